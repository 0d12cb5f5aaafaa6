//! The digital power-supply controller.
//!
//! Every 20 us tick the controller reads the quantized load current, runs a
//! velocity-form PI regulator, quantizes the voltage command with error
//! feedback and applies it to the magnet for one tick. Between ticks it
//! services link requests against its register file.

pub mod quantizer;
pub mod regs;
pub mod waveform;

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::link::frame::{Frame, NakReason, Opcode};
use crate::plant::{AdcModel, Magnet, PlantParams, PlantState};
use crate::sim::{Nanos, SimRng};

pub use quantizer::{quantize_ef, QuantizerState};
pub use regs::RegisterFile;
pub use waveform::{LoopMode, Waveform, WaveformError};

use regs::status;

/// 50 kHz control loop.
pub const TICK_NS: Nanos = 20_000;
pub const TICK_S: f64 = TICK_NS as f64 * 1e-9;
/// Overcurrent trip threshold relative to full scale.
pub const TRIP_RATIO: f64 = 1.05;
/// Resistance estimate is only updated above this fraction of full scale.
pub const R_GUARD_RATIO: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Waveform(#[from] WaveformError),
    #[error("state file {path}: {msg}")]
    Flash { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Off = 0,
    On = 1,
    Local = 2,
}

impl Mode {
    pub fn from_word(w: u32) -> Option<Self> {
        match w {
            0 => Some(Mode::Off),
            1 => Some(Mode::On),
            2 => Some(Mode::Local),
            _ => None,
        }
    }

    pub fn is_running(self) -> bool {
        self != Mode::Off
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveformTarget {
    Volatile,
    Persistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dac {
    A,
    B,
}

impl Dac {
    fn cfg_reg(self) -> u8 {
        match self {
            Dac::A => regs::DAC_A_CFG,
            Dac::B => regs::DAC_B_CFG,
        }
    }
    fn offset_reg(self) -> u8 {
        match self {
            Dac::A => regs::DAC_A_OFFSET,
            Dac::B => regs::DAC_B_OFFSET,
        }
    }
    fn out_reg(self) -> u8 {
        match self {
            Dac::A => regs::DAC_A_OUT,
            Dac::B => regs::DAC_B_OUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub tick_ns: Nanos,
    /// Proportional gain, V/A.
    pub kp: f64,
    /// Integral gain, V/(A s).
    pub ki: f64,
    /// Target closed-loop bandwidth in Hz.
    pub f_c: f64,
    pub adc: AdcModel,
    /// Output voltage resolution.
    pub dac_lsb: f64,
    /// Time constant of the load-resistance average, seconds.
    pub r_tau: f64,
}

impl ControllerConfig {
    /// Pole-zero cancelling PI: Kp = L wc, Ki = R wc. The closed loop is
    /// first order with bandwidth `f_c`.
    pub fn tuned(nominal: &PlantParams, f_c: f64) -> Self {
        let wc = TAU * f_c;
        Self {
            tick_ns: TICK_NS,
            kp: nominal.inductance * wc,
            ki: nominal.resistance * wc,
            f_c,
            adc: AdcModel::new(nominal.i_max),
            dac_lsb: nominal.v_max / 32768.0,
            r_tau: 0.1,
        }
    }

    pub fn tick_s(&self) -> f64 {
        self.tick_ns as f64 * 1e-9
    }

    /// Ten closed-loop time constants.
    pub fn settle_time(&self) -> f64 {
        10.0 / (TAU * self.f_c)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PiState {
    pub v_prev: f64,
    pub e_prev: f64,
}

/// One velocity-form PI step, `v_k = v_{k-1} + Kp (e_k - e_{k-1}) + Ki T e_k`,
/// clamped to `[v_lo, v_hi]`. Storing the clamped output keeps the
/// integrator from winding up.
#[inline]
pub fn pi_step(st: &mut PiState, e: f64, kp: f64, ki: f64, t: f64, v_lo: f64, v_hi: f64) -> f64 {
    let v = (st.v_prev + kp * (e - st.e_prev) + ki * t * e).clamp(v_lo, v_hi);
    st.v_prev = v;
    st.e_prev = e;
    v
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct FlashImage {
    format: u32,
    id: String,
    waveform: Option<Waveform>,
}

/// Non-volatile store, optionally mirrored to a state file.
#[derive(Debug, Clone, Default)]
struct Flash {
    path: Option<PathBuf>,
    image: FlashImage,
}

impl Flash {
    fn open(id: &str, path: Option<PathBuf>) -> Result<Self, ControllerError> {
        let mut image = FlashImage {
            format: 1,
            id: id.to_string(),
            waveform: None,
        };
        if let Some(p) = &path {
            if p.exists() {
                let text = std::fs::read_to_string(p).map_err(|e| flash_err(p, e))?;
                image = serde_json::from_str(&text).map_err(|e| flash_err(p, e))?;
            }
        }
        Ok(Self { path, image })
    }

    fn save(&self) -> Result<(), ControllerError> {
        let Some(p) = &self.path else { return Ok(()) };
        let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| flash_err(p, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| flash_err(p, e))?;
        serde_json::to_writer_pretty(&mut tmp, &self.image).map_err(|e| flash_err(p, e))?;
        tmp.persist(p).map_err(|e| flash_err(p, e))?;
        Ok(())
    }
}

fn flash_err(p: &Path, e: impl std::fmt::Display) -> ControllerError {
    ControllerError::Flash {
        path: p.to_path_buf(),
        msg: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ActiveWaveform {
    points: Vec<f64>,
    mode: LoopMode,
}

/// What one tick produced, beyond the register updates.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TickReport {
    pub dac: [Option<f64>; 2],
    pub tripped: bool,
    pub waveform_finished: bool,
}

#[derive(Debug, Clone)]
pub struct Controller {
    pub id: String,
    nominal: PlantParams,
    cfg: ControllerConfig,
    regs: RegisterFile,
    mode: Mode,
    fault: bool,
    limit: bool,
    armed: bool,
    pi: PiState,
    quant: QuantizerState,
    active: Option<ActiveWaveform>,
    staging: Vec<f64>,
    playback: Option<u64>,
    r_est: f64,
    tx_broken: bool,
    rx_broken: bool,
    flash: Flash,
}

impl Controller {
    pub fn new(id: &str, nominal: PlantParams, cfg: ControllerConfig) -> Self {
        Self::with_state_file(id, nominal, cfg, None).expect("no state file")
    }

    /// Creates a controller whose persistent waveform lives in `state_file`.
    /// A waveform already stored there is loaded as after a reboot.
    pub fn with_state_file(
        id: &str,
        nominal: PlantParams,
        cfg: ControllerConfig,
        state_file: Option<PathBuf>,
    ) -> Result<Self, ControllerError> {
        let flash = Flash::open(id, state_file)?;
        let mut c = Self {
            id: id.to_string(),
            nominal,
            cfg,
            regs: RegisterFile::default(),
            mode: Mode::Off,
            fault: false,
            limit: false,
            armed: false,
            pi: PiState::default(),
            quant: QuantizerState::default(),
            active: None,
            staging: vec![],
            playback: None,
            r_est: 0.0,
            tx_broken: false,
            rx_broken: false,
            flash,
        };
        c.reboot();
        Ok(c)
    }

    /// Clears all volatile state and reloads the flash contents.
    pub fn reboot(&mut self) {
        let tx = self.tx_broken;
        let rx = self.rx_broken;
        self.regs = RegisterFile::default();
        self.mode = Mode::Off;
        self.fault = false;
        self.limit = false;
        self.armed = false;
        self.pi = PiState::default();
        self.quant = QuantizerState::default();
        self.active = None;
        self.staging.clear();
        self.playback = None;
        self.r_est = self.nominal.resistance;
        self.regs.set_f32(regs::WF_SCALE, 1.0);
        self.regs.set_f32(regs::R_LOAD, self.r_est);
        self.regs.set_f32(regs::I_MAX, self.nominal.i_max);
        if let Some(w) = self.flash.image.waveform.clone() {
            self.install_waveform(&w);
        }
        self.tx_broken = tx;
        self.rx_broken = rx;
        self.refresh_status();
    }

    pub fn nominal(&self) -> &PlantParams {
        &self.nominal
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn registers(&self) -> &RegisterFile {
        &self.regs
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_on(&self) -> bool {
        self.mode.is_running() && !self.fault
    }

    pub fn is_local(&self) -> bool {
        self.mode == Mode::Local
    }

    pub fn faulted(&self) -> bool {
        self.fault
    }

    pub fn waveform_running(&self) -> bool {
        self.playback.is_some()
    }

    pub fn armed(&self) -> bool {
        self.armed
    }

    pub fn i_set(&self) -> f64 {
        self.regs.get_f32(regs::I_SET) as f64
    }

    pub fn i_read(&self) -> f64 {
        self.regs.get_f32(regs::I_READ) as f64
    }

    pub fn i_target(&self) -> f64 {
        self.regs.get_f32(regs::I_TARGET) as f64
    }

    pub fn v_out(&self) -> f64 {
        self.regs.get_f32(regs::V_OUT) as f64
    }

    pub fn r_load(&self) -> f64 {
        self.regs.get_f32(regs::R_LOAD) as f64
    }

    pub fn status(&self) -> u32 {
        self.regs.get(regs::STATUS)
    }

    /// Switches on at `i` amperes in regulated steady state, with the magnet
    /// already carrying the current.
    pub fn preset_steady(&mut self, magnet: &mut Magnet, i: f64) {
        self.apply_mode(Mode::On);
        self.regs.set_f32(regs::I_SET, i);
        self.regs.set_f32(regs::I_TARGET, i);
        self.regs.set_f32(regs::I_READ, self.cfg.adc.quantize(i));
        let v = magnet.params.resistance * i;
        magnet.state = PlantState {
            current: i,
            v_applied: v,
        };
        self.regs.set_f32(regs::V_OUT, v);
        self.pi = PiState { v_prev: v, e_prev: 0.0 };
        self.refresh_status();
    }

    /// Front-panel local/remote switch.
    pub fn set_local(&mut self, local: bool) {
        if local {
            self.apply_mode(Mode::Local);
        } else if self.mode == Mode::Local {
            self.apply_mode(Mode::On);
        }
    }

    /// Mirrors the link break flags into STATUS.
    pub fn set_link_flags(&mut self, tx_broken: bool, rx_broken: bool) {
        self.tx_broken = tx_broken;
        self.rx_broken = rx_broken;
        self.refresh_status();
    }

    pub fn reg_read(&self, addr: u8) -> u32 {
        self.regs.get(addr)
    }

    pub fn reg_write(&mut self, addr: u8, word: u32) -> Result<(), NakReason> {
        let info = regs::reg_info(addr).ok_or(NakReason::Unmapped)?;
        if info.access == regs::Access::ReadOnly {
            return Err(NakReason::ReadOnly);
        }
        if self.mode == Mode::Local && addr != regs::MODE {
            return Err(NakReason::Local);
        }
        if info.kind == regs::Kind::Analog && !f32::from_bits(word).is_finite() {
            return Err(NakReason::InvalidValue);
        }
        match addr {
            regs::MODE => {
                let m = Mode::from_word(word).ok_or(NakReason::InvalidValue)?;
                self.apply_mode(m);
            }
            regs::TRIG_ARM => match word {
                0 => {
                    self.armed = false;
                    self.playback = None;
                }
                1 => self.armed = true,
                _ => return Err(NakReason::InvalidValue),
            },
            regs::DAC_A_CFG | regs::DAC_B_CFG => {
                let (src, scale) = regs::unpack_dac_cfg(word);
                if !scale.is_finite() {
                    return Err(NakReason::InvalidValue);
                }
                // Source 0 (MODE) disables the DAC.
                if src != 0 && regs::reg_info(src).map(|i| i.kind) != Some(regs::Kind::Analog) {
                    return Err(NakReason::InvalidValue);
                }
            }
            regs::WF_LOOP if word > 1 => return Err(NakReason::InvalidValue),
            regs::WF_CTRL => {
                return self.wf_ctrl(word).map(|_| self.regs.increment(regs::CNT_WRITES));
            }
            regs::WF_DATA => {
                if self.staging.len() >= waveform::MAX_POINTS {
                    return Err(NakReason::InvalidValue);
                }
                self.staging.push(f32::from_bits(word) as f64);
                self.regs.set(regs::WF_FILL, self.staging.len() as u32);
                self.regs.increment(regs::CNT_WRITES);
                return Ok(());
            }
            _ => {}
        }
        self.regs.set(addr, word);
        self.regs.increment(regs::CNT_WRITES);
        self.refresh_status();
        Ok(())
    }

    fn wf_ctrl(&mut self, word: u32) -> Result<(), NakReason> {
        match word {
            regs::WF_CTRL_CLEAR => {
                self.staging.clear();
                self.regs.set(regs::WF_FILL, 0);
                Ok(())
            }
            regs::WF_CTRL_COMMIT_VOLATILE | regs::WF_CTRL_COMMIT_PERSISTENT => {
                let w = Waveform {
                    name: String::new(),
                    points: std::mem::take(&mut self.staging),
                    offset: self.regs.get_f32(regs::WF_OFFSET) as f64,
                    scale: self.regs.get_f32(regs::WF_SCALE) as f64,
                    loop_mode: if self.regs.get(regs::WF_LOOP) == 1 {
                        LoopMode::Loop
                    } else {
                        LoopMode::Once
                    },
                };
                self.regs.set(regs::WF_FILL, 0);
                let target = if word == regs::WF_CTRL_COMMIT_PERSISTENT {
                    WaveformTarget::Persistent
                } else {
                    WaveformTarget::Volatile
                };
                self.load_waveform(w, target)
                    .map_err(|_| NakReason::InvalidValue)
            }
            _ => Err(NakReason::InvalidValue),
        }
    }

    fn apply_mode(&mut self, m: Mode) {
        if m.is_running() && (!self.mode.is_running() || self.fault) {
            self.pi = PiState::default();
            self.quant = QuantizerState::default();
        }
        if m == Mode::On {
            self.fault = false;
        }
        self.mode = m;
        self.regs.set(regs::MODE, m as u32);
        self.refresh_status();
    }

    fn refresh_status(&mut self) {
        let mut s = 0;
        let on = self.is_on();
        if on {
            s |= status::ON | status::REGULATING;
        }
        if self.playback.is_some() {
            s |= status::WAVEFORM_RUNNING;
        }
        if self.armed {
            s |= status::TRIGGER_ARMED;
        }
        if self.fault {
            s |= status::FAULT;
        }
        if self.tx_broken {
            s |= status::TX_BROKEN;
        }
        if self.rx_broken {
            s |= status::RX_BROKEN;
        }
        if self.mode == Mode::Local {
            s |= status::LOCAL;
        }
        if self.limit {
            s |= status::LIMIT;
        }
        self.regs.set(regs::STATUS, s);
        self.regs.set(regs::TRIG_ARM, self.armed as u32);
    }

    /// Stages a waveform for triggered playback.
    pub fn load_waveform(
        &mut self,
        w: Waveform,
        target: WaveformTarget,
    ) -> Result<(), ControllerError> {
        w.validate(self.nominal.i_max)?;
        self.install_waveform(&w);
        if target == WaveformTarget::Persistent {
            self.flash.image.waveform = Some(w);
            self.flash.save()?;
        }
        Ok(())
    }

    fn install_waveform(&mut self, w: &Waveform) {
        self.playback = None;
        self.active = Some(ActiveWaveform {
            points: w.points.clone(),
            mode: w.loop_mode,
        });
        self.regs.set_f32(regs::WF_OFFSET, w.offset);
        self.regs.set_f32(regs::WF_SCALE, w.scale);
        self.regs.set(regs::WF_LOOP, (w.loop_mode == LoopMode::Loop) as u32);
        self.regs.set(regs::WF_LEN, w.points.len() as u32);
        self.refresh_status();
    }

    /// External trigger input. Starts playback at the next tick when armed
    /// and a waveform is loaded; otherwise counts a missed trigger.
    pub fn fire_trigger(&mut self) -> bool {
        if self.armed && self.active.is_some() {
            self.armed = false;
            self.playback = Some(0);
            self.refresh_status();
            true
        } else {
            self.regs.increment(regs::CNT_TRIG_UNARMED);
            false
        }
    }

    /// Routes an analog register to a diagnostic DAC output:
    /// `out = scale * (value + offset)`.
    pub fn assign_dac(
        &mut self,
        dac: Dac,
        source: u8,
        offset: f64,
        scale: f64,
    ) -> Result<(), NakReason> {
        if regs::reg_info(source).map(|i| i.kind) != Some(regs::Kind::Analog) {
            return Err(NakReason::InvalidValue);
        }
        self.reg_write(dac.offset_reg(), (offset as f32).to_bits())?;
        self.reg_write(dac.cfg_reg(), regs::pack_dac_cfg(source, scale as f32))
    }

    fn dac_output(&mut self, dac: Dac) -> Option<f64> {
        let (src, scale) = regs::unpack_dac_cfg(self.regs.get(dac.cfg_reg()));
        if src == 0 {
            return None;
        }
        let offset = self.regs.get_f32(dac.offset_reg()) as f64;
        let out = scale as f64 * (self.regs.get_f32(src) as f64 + offset);
        self.regs.set_f32(dac.out_reg(), out);
        Some(out)
    }

    /// Regulation target for this tick and whether it was clamped.
    fn target(&mut self) -> (f64, bool) {
        let raw = match (self.playback, &self.active) {
            (Some(k), Some(wf)) => match waveform::sample(&wf.points, wf.mode, k) {
                Some((p, idx)) => {
                    if k % waveform::TICKS_PER_POINT == 0 {
                        self.regs.set(regs::WF_INDEX, idx as u32);
                    }
                    let scale = self.regs.get_f32(regs::WF_SCALE) as f64;
                    let offset = self.regs.get_f32(regs::WF_OFFSET) as f64;
                    scale * p + offset
                }
                None => self.i_set(),
            },
            _ => self.i_set(),
        };
        let lo = self.nominal.i_min();
        let hi = self.nominal.i_max;
        let clamped = raw.clamp(lo, hi);
        (clamped, clamped != raw)
    }

    fn advance_playback(&mut self) -> bool {
        let (Some(k), Some(wf)) = (self.playback, &self.active) else {
            return false;
        };
        let next = k + 1;
        if wf.mode == LoopMode::Loop && next % (wf.points.len() as u64 * waveform::TICKS_PER_POINT) == 0 {
            self.regs.increment(regs::CNT_WF_CYCLES);
        }
        if waveform::sample(&wf.points, wf.mode, next).is_none() {
            // Hold the final value as the new DC set-point.
            let last = self.regs.get(regs::I_TARGET);
            self.regs.set(regs::I_SET, last);
            self.playback = None;
            self.regs.increment(regs::CNT_WF_CYCLES);
            return true;
        }
        self.playback = Some(next);
        false
    }

    /// One 50 kHz regulation step against `magnet`.
    pub fn tick(&mut self, magnet: &mut Magnet, rng: &mut SimRng) -> TickReport {
        let mut report = TickReport::default();
        let t = self.cfg.tick_s();
        let adc = &self.cfg.adc;
        let noisy = magnet.state.current + rng.gaussian(adc.noise_sigma);
        let i_meas = adc.quantize(noisy);
        self.regs.increment(regs::CNT_TICKS);

        // The overcurrent comparator sits before the ADC's saturation.
        if self.is_on() && noisy.abs() > TRIP_RATIO * self.nominal.i_max {
            self.fault = true;
            self.mode = Mode::Off;
            self.regs.set(regs::MODE, Mode::Off as u32);
            self.playback = None;
            self.regs.increment(regs::CNT_TRIPS);
            report.tripped = true;
        }

        let (target, limited) = self.target();
        if limited && !self.limit {
            self.regs.increment(regs::CNT_LIMITS);
        }
        self.limit = limited;

        let v_cmd = if self.is_on() {
            let e = target - i_meas;
            let lo = if self.nominal.quadrants.allows_negative_voltage() {
                -self.nominal.v_max
            } else {
                0.0
            };
            let v = pi_step(&mut self.pi, e, self.cfg.kp, self.cfg.ki, t, lo, self.nominal.v_max);
            quantize_ef(v, &mut self.quant, self.cfg.dac_lsb)
        } else {
            self.pi = PiState::default();
            self.quant = QuantizerState::default();
            0.0
        };
        let applied = magnet.step(v_cmd, t).v_applied;

        self.regs.set_f32(regs::I_READ, i_meas);
        self.regs.set_f32(regs::V_OUT, applied);
        self.regs.set_f32(regs::I_TARGET, target);

        if self.is_on() && i_meas.abs() > R_GUARD_RATIO * self.nominal.i_max {
            let alpha = 1.0 - (-t / self.cfg.r_tau).exp();
            self.r_est += alpha * (applied / i_meas - self.r_est);
            self.regs.set_f32(regs::R_LOAD, self.r_est);
        }

        report.dac = [self.dac_output(Dac::A), self.dac_output(Dac::B)];
        report.waveform_finished = self.advance_playback();
        self.refresh_status();
        report
    }

    /// Slave side of the link: executes one request frame and builds the
    /// response.
    pub fn service(&mut self, req: &Frame) -> Frame {
        self.regs.increment(regs::CNT_FRAMES);
        let resp = self.execute(req);
        if resp.opcode == Opcode::Nak {
            self.regs.increment(regs::CNT_NAKS);
        }
        resp.with_prio(req.prio)
    }

    fn execute(&mut self, req: &Frame) -> Frame {
        let addr = req.addr;
        match req.opcode {
            Opcode::Read if req.payload.is_empty() => Frame::ack(addr, vec![self.reg_read(addr)]),
            Opcode::Write if req.payload.len() == 1 => match self.reg_write(addr, req.payload[0]) {
                Ok(()) => Frame::ack(addr, vec![]),
                Err(r) => Frame::nak(addr, r),
            },
            Opcode::BlockWrite if !req.payload.is_empty() => {
                if addr == regs::WF_DATA {
                    for &w in &req.payload {
                        if let Err(r) = self.reg_write(addr, w) {
                            return Frame::nak(addr, r);
                        }
                    }
                    return Frame::ack(addr, vec![]);
                }
                if addr as usize + req.payload.len() > 256 {
                    return Frame::nak(addr, NakReason::BadRequest);
                }
                for (i, &w) in req.payload.iter().enumerate() {
                    if let Err(r) = self.reg_write(addr + i as u8, w) {
                        return Frame::nak(addr + i as u8, r);
                    }
                }
                Frame::ack(addr, vec![])
            }
            Opcode::BlockRead if req.payload.len() == 1 => {
                let n = req.payload[0] as usize;
                if n == 0 || n > 256 || addr as usize + n > 256 {
                    return Frame::nak(addr, NakReason::BadRequest);
                }
                Frame::ack(addr, (0..n).map(|i| self.reg_read(addr + i as u8)).collect())
            }
            _ => Frame::nak(addr, NakReason::BadRequest),
        }
    }
}
