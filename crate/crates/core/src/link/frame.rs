//! Wire format of the controller link.
//!
//! ```text
//!  31  30..28  27..20  19..8   7..0
//! prio opcode   addr   count  header CRC-8
//! [count x 32-bit payload words, big-endian][payload CRC-8]   (only if count > 0)
//! ```
//!
//! Both CRCs use polynomial 0x07 with zero init. The header CRC covers the 24
//! bits above it; the payload CRC covers the payload bytes.

use crc::{Crc, CRC_8_SMBUS};
use thiserror::Error;

pub const CRC8: Crc<u8> = Crc::<u8>::new(&CRC_8_SMBUS);

/// Largest payload a frame may carry, one full register file.
pub const MAX_COUNT: usize = 256;
pub const HEADER_BITS: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Read = 0,
    Write = 1,
    BlockWrite = 2,
    BlockRead = 3,
    Ack = 6,
    Nak = 7,
}

impl Opcode {
    pub fn from_bits(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Read,
            1 => Self::Write,
            2 => Self::BlockWrite,
            3 => Self::BlockRead,
            6 => Self::Ack,
            7 => Self::Nak,
            _ => return None,
        })
    }
}

/// Reason code carried in the single payload word of a NAK.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum NakReason {
    Unmapped = 1,
    ReadOnly = 2,
    Local = 3,
    InvalidValue = 4,
    BadRequest = 5,
}

impl NakReason {
    pub fn from_word(w: u32) -> Self {
        match w {
            1 => Self::Unmapped,
            2 => Self::ReadOnly,
            3 => Self::Local,
            4 => Self::InvalidValue,
            _ => Self::BadRequest,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Unmapped => "unmapped",
            Self::ReadOnly => "read_only",
            Self::Local => "local_mode",
            Self::InvalidValue => "invalid_value",
            Self::BadRequest => "bad_request",
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum FrameError {
    #[error("payload count {0} exceeds {MAX_COUNT}")]
    CountOverflow(usize),
    #[error("header CRC mismatch")]
    BadHeader,
    #[error("payload CRC mismatch")]
    BadPayload,
    #[error("unknown opcode {0}")]
    BadOpcode(u8),
    #[error("frame length does not match its count field")]
    BadLength,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub prio: bool,
    pub opcode: Opcode,
    pub addr: u8,
    pub payload: Vec<u32>,
}

impl Frame {
    pub fn new(opcode: Opcode, addr: u8, payload: Vec<u32>) -> Self {
        Self {
            prio: false,
            opcode,
            addr,
            payload,
        }
    }

    pub fn read(addr: u8) -> Self {
        Self::new(Opcode::Read, addr, vec![])
    }

    pub fn write(addr: u8, word: u32) -> Self {
        Self::new(Opcode::Write, addr, vec![word])
    }

    pub fn block_read(addr: u8, count: u32) -> Self {
        Self::new(Opcode::BlockRead, addr, vec![count])
    }

    pub fn block_write(addr: u8, words: Vec<u32>) -> Self {
        Self::new(Opcode::BlockWrite, addr, words)
    }

    pub fn ack(addr: u8, payload: Vec<u32>) -> Self {
        Self::new(Opcode::Ack, addr, payload)
    }

    pub fn nak(addr: u8, reason: NakReason) -> Self {
        Self::new(Opcode::Nak, addr, vec![reason as u32])
    }

    pub fn with_prio(mut self, prio: bool) -> Self {
        self.prio = prio;
        self
    }

    pub fn count(&self) -> usize {
        self.payload.len()
    }

    /// Encoded length in bits.
    pub fn bit_len(&self) -> u64 {
        bit_len_for(self.count())
    }
}

pub fn bit_len_for(count: usize) -> u64 {
    if count == 0 {
        HEADER_BITS
    } else {
        HEADER_BITS + 32 * count as u64 + 8
    }
}

pub fn encode_frame(f: &Frame) -> Result<Vec<u8>, FrameError> {
    let count = f.count();
    if count > MAX_COUNT {
        return Err(FrameError::CountOverflow(count));
    }
    let top: u32 = ((f.prio as u32) << 23)
        | ((f.opcode as u32) << 20)
        | ((f.addr as u32) << 12)
        | count as u32;
    let top_bytes = &top.to_be_bytes()[1..];
    let mut out = Vec::with_capacity(5 + 4 * count);
    out.extend_from_slice(top_bytes);
    out.push(CRC8.checksum(top_bytes));
    if count > 0 {
        for w in &f.payload {
            out.extend_from_slice(&w.to_be_bytes());
        }
        out.push(CRC8.checksum(&out[4..]));
    }
    Ok(out)
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FrameError> {
    if bytes.len() < 4 {
        return Err(FrameError::BadLength);
    }
    if CRC8.checksum(&bytes[..3]) != bytes[3] {
        return Err(FrameError::BadHeader);
    }
    let top = u32::from_be_bytes([0, bytes[0], bytes[1], bytes[2]]);
    let prio = top >> 23 & 1 == 1;
    let op_bits = (top >> 20 & 0x7) as u8;
    let addr = (top >> 12 & 0xFF) as u8;
    let count = (top & 0xFFF) as usize;
    let opcode = Opcode::from_bits(op_bits).ok_or(FrameError::BadOpcode(op_bits))?;
    if count > MAX_COUNT {
        return Err(FrameError::BadLength);
    }
    let expected = if count == 0 { 4 } else { 4 + 4 * count + 1 };
    if bytes.len() != expected {
        return Err(FrameError::BadLength);
    }
    let mut payload = Vec::with_capacity(count);
    if count > 0 {
        let body = &bytes[4..4 + 4 * count];
        if CRC8.checksum(body) != bytes[expected - 1] {
            return Err(FrameError::BadPayload);
        }
        payload.extend(
            body.chunks_exact(4)
                .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]])),
        );
    }
    Ok(Frame {
        prio,
        opcode,
        addr,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn crc8_check_value() {
        assert_eq!(CRC8.checksum(b"123456789"), 0xF4);
    }

    #[test]
    fn sizes_and_wire_times() {
        let w = encode_frame(&Frame::write(0x01, 2.0f32.to_bits())).unwrap();
        assert_eq!(w.len() * 8, 72);
        assert_eq!(Frame::write(1, 0).bit_len(), 72);
        let r = encode_frame(&Frame::read(0x02)).unwrap();
        assert_eq!(r.len() * 8, 32);
        // 72 bits at 5 Mbit/s is 14.4 us; 32 bits is 6.4 us.
        assert_eq!(72u64 * 1_000_000_000 / 5_000_000, 14_400);
        assert_eq!(32u64 * 1_000_000_000 / 5_000_000, 6_400);
    }

    #[test]
    fn count_overflow() {
        let f = Frame::block_write(0, vec![0; 300]);
        assert_eq!(encode_frame(&f), Err(FrameError::CountOverflow(300)));
    }

    #[test]
    fn truncated_is_bad_length() {
        let mut b = encode_frame(&Frame::write(1, 7)).unwrap();
        b.pop();
        assert_eq!(decode_frame(&b), Err(FrameError::BadLength));
        assert_eq!(decode_frame(&b[..2]), Err(FrameError::BadLength));
    }

    #[test]
    fn unknown_opcode() {
        let top: u32 = (4 << 20) | (0x10 << 12);
        let mut b = top.to_be_bytes()[1..].to_vec();
        b.push(CRC8.checksum(&b));
        assert_eq!(decode_frame(&b), Err(FrameError::BadOpcode(4)));
    }

    #[test]
    fn every_single_bit_flip_detected() {
        let b = encode_frame(&Frame::write(0x01, 0x4000_0000).with_prio(true)).unwrap();
        for bit in 0..b.len() * 8 {
            let mut c = b.clone();
            c[bit / 8] ^= 0x80 >> (bit % 8);
            let err = decode_frame(&c).unwrap_err();
            if bit < 32 {
                assert_eq!(err, FrameError::BadHeader, "bit {bit}");
            } else {
                assert_eq!(err, FrameError::BadPayload, "bit {bit}");
            }
        }
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        (
            any::<bool>(),
            prop::sample::select(vec![
                Opcode::Read,
                Opcode::Write,
                Opcode::BlockWrite,
                Opcode::BlockRead,
                Opcode::Ack,
                Opcode::Nak,
            ]),
            any::<u8>(),
            prop::collection::vec(any::<u32>(), 0..=MAX_COUNT),
        )
            .prop_map(|(prio, opcode, addr, payload)| Frame {
                prio,
                opcode,
                addr,
                payload,
            })
    }

    proptest! {
        #[test]
        fn round_trip(f in arb_frame()) {
            let bytes = encode_frame(&f).unwrap();
            prop_assert_eq!(bytes.len() as u64 * 8, f.bit_len());
            prop_assert_eq!(decode_frame(&bytes).unwrap(), f);
        }
    }
}
