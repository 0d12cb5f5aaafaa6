//! Controller register map: 256 words of 32 bits.

pub const MODE: u8 = 0x00;
pub const I_SET: u8 = 0x01;
pub const I_READ: u8 = 0x02;
pub const STATUS: u8 = 0x03;
pub const R_LOAD: u8 = 0x04;
pub const V_OUT: u8 = 0x05;
pub const WF_OFFSET: u8 = 0x06;
pub const WF_SCALE: u8 = 0x07;
pub const TRIG_ARM: u8 = 0x08;
/// Index of the waveform point currently being played.
pub const WF_INDEX: u8 = 0x09;
/// Effective regulation target after clamping and waveform mapping.
pub const I_TARGET: u8 = 0x0A;
pub const I_MAX: u8 = 0x0B;
pub const DAC_A_CFG: u8 = 0x10;
pub const DAC_A_OFFSET: u8 = 0x11;
pub const DAC_B_CFG: u8 = 0x12;
pub const DAC_B_OFFSET: u8 = 0x13;
pub const DAC_A_OUT: u8 = 0x14;
pub const DAC_B_OUT: u8 = 0x15;

pub const CNT_TICKS: u8 = 0x20;
pub const CNT_TRIG_UNARMED: u8 = 0x21;
pub const CNT_TRIPS: u8 = 0x22;
pub const CNT_FRAMES: u8 = 0x23;
pub const CNT_NAKS: u8 = 0x24;
pub const CNT_WF_CYCLES: u8 = 0x25;
pub const CNT_LIMITS: u8 = 0x26;
pub const CNT_WRITES: u8 = 0x27;

/// Download window.
pub const WF_CTRL: u8 = 0xF0;
pub const WF_LOOP: u8 = 0xF1;
pub const WF_FILL: u8 = 0xF2;
pub const WF_LEN: u8 = 0xF3;
/// FIFO port: every word written here appends one binary32 point.
pub const WF_DATA: u8 = 0xFF;

pub const WF_CTRL_CLEAR: u32 = 1;
pub const WF_CTRL_COMMIT_VOLATILE: u32 = 2;
pub const WF_CTRL_COMMIT_PERSISTENT: u32 = 3;

/// Snapshot block read by the driver poll, MODE through TRIG_ARM.
pub const POLL_BASE: u8 = MODE;
pub const POLL_COUNT: u32 = 9;

pub mod status {
    pub const ON: u32 = 1 << 0;
    pub const REGULATING: u32 = 1 << 1;
    pub const WAVEFORM_RUNNING: u32 = 1 << 2;
    pub const TRIGGER_ARMED: u32 = 1 << 3;
    pub const FAULT: u32 = 1 << 4;
    pub const TX_BROKEN: u32 = 1 << 5;
    pub const RX_BROKEN: u32 = 1 << 6;
    pub const LOCAL: u32 = 1 << 7;
    pub const LIMIT: u32 = 1 << 8;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    ReadOnly,
    ReadWrite,
    WriteOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// binary32 physical quantity.
    Analog,
    Word,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegInfo {
    pub name: &'static str,
    pub access: Access,
    pub kind: Kind,
}

const fn info(name: &'static str, access: Access, kind: Kind) -> Option<RegInfo> {
    Some(RegInfo { name, access, kind })
}

pub fn reg_info(addr: u8) -> Option<RegInfo> {
    use Access::*;
    use Kind::*;
    match addr {
        MODE => info("MODE", ReadWrite, Word),
        I_SET => info("I_SET", ReadWrite, Analog),
        I_READ => info("I_READ", ReadOnly, Analog),
        STATUS => info("STATUS", ReadOnly, Word),
        R_LOAD => info("R_LOAD", ReadOnly, Analog),
        V_OUT => info("V_OUT", ReadOnly, Analog),
        WF_OFFSET => info("WF_OFFSET", ReadWrite, Analog),
        WF_SCALE => info("WF_SCALE", ReadWrite, Analog),
        TRIG_ARM => info("TRIG_ARM", ReadWrite, Word),
        WF_INDEX => info("WF_INDEX", ReadOnly, Word),
        I_TARGET => info("I_TARGET", ReadOnly, Analog),
        I_MAX => info("I_MAX", ReadOnly, Analog),
        DAC_A_CFG => info("DAC_A_CFG", ReadWrite, Word),
        DAC_A_OFFSET => info("DAC_A_OFFSET", ReadWrite, Analog),
        DAC_B_CFG => info("DAC_B_CFG", ReadWrite, Word),
        DAC_B_OFFSET => info("DAC_B_OFFSET", ReadWrite, Analog),
        DAC_A_OUT => info("DAC_A_OUT", ReadOnly, Analog),
        DAC_B_OUT => info("DAC_B_OUT", ReadOnly, Analog),
        0x20..=0x2F => info("COUNTER", ReadOnly, Word),
        WF_CTRL => info("WF_CTRL", WriteOnly, Word),
        WF_LOOP => info("WF_LOOP", ReadWrite, Word),
        WF_FILL => info("WF_FILL", ReadOnly, Word),
        WF_LEN => info("WF_LEN", ReadOnly, Word),
        WF_DATA => info("WF_DATA", WriteOnly, Analog),
        _ => None,
    }
}

/// DAC source assignment packed into one word: the low byte holds the source
/// register, the upper 24 bits are the upper 24 bits of the binary32 scale.
pub fn pack_dac_cfg(source: u8, scale: f32) -> u32 {
    (scale.to_bits() & 0xFFFF_FF00) | source as u32
}

pub fn unpack_dac_cfg(word: u32) -> (u8, f32) {
    ((word & 0xFF) as u8, f32::from_bits(word & 0xFFFF_FF00))
}

#[derive(Clone)]
pub struct RegisterFile {
    words: [u32; 256],
}

impl Default for RegisterFile {
    fn default() -> Self {
        Self { words: [0; 256] }
    }
}

impl std::fmt::Debug for RegisterFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(
                self.words
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0)
                    .map(|(a, w)| (format!("{a:#04x}"), format!("{w:#010x}"))),
            )
            .finish()
    }
}

impl RegisterFile {
    /// Raw read; unmapped addresses always read 0.
    #[inline]
    pub fn get(&self, addr: u8) -> u32 {
        if reg_info(addr).is_some() {
            self.words[addr as usize]
        } else {
            0
        }
    }

    #[inline]
    pub fn set(&mut self, addr: u8, word: u32) {
        self.words[addr as usize] = word;
    }

    #[inline]
    pub fn get_f32(&self, addr: u8) -> f32 {
        f32::from_bits(self.get(addr))
    }

    #[inline]
    pub fn set_f32(&mut self, addr: u8, v: f64) {
        self.set(addr, (v as f32).to_bits());
    }

    pub fn increment(&mut self, addr: u8) {
        let w = &mut self.words[addr as usize];
        *w = w.wrapping_add(1);
    }
}
