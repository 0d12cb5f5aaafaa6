//! Named control-system channels: naming, value typing, alarm severities.
//!
//! Every power supply exposes the same 18 channels `<ps>:<FIELD>`; families
//! expose the aggregated subset in [`FAMILY_FIELDS`]. The channel state
//! itself lives in the world, which owns the link traffic behind it.

pub mod hysteresis;
pub mod program;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::controller::regs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    #[default]
    None,
    Minor,
    Major,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::None => "none",
            Severity::Minor => "minor",
            Severity::Major => "major",
        }
    }

    pub fn level(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    ISet,
    IRead,
    Mode,
    Status,
    Compare,
    HystState,
    CycleCmd,
    RLoad,
    VOut,
    LinkTxOk,
    LinkRxOk,
    Local,
    WfOffset,
    WfScale,
    WfLoad,
    TrigArm,
    Alarm,
    RampState,
}

pub const FIELDS: [Field; 18] = [
    Field::ISet,
    Field::IRead,
    Field::Mode,
    Field::Status,
    Field::Compare,
    Field::HystState,
    Field::CycleCmd,
    Field::RLoad,
    Field::VOut,
    Field::LinkTxOk,
    Field::LinkRxOk,
    Field::Local,
    Field::WfOffset,
    Field::WfScale,
    Field::WfLoad,
    Field::TrigArm,
    Field::Alarm,
    Field::RampState,
];

/// Fields a family exposes with single-PS semantics.
pub const FAMILY_FIELDS: [Field; 8] = [
    Field::ISet,
    Field::IRead,
    Field::Mode,
    Field::Compare,
    Field::HystState,
    Field::CycleCmd,
    Field::Alarm,
    Field::RampState,
];

impl Field {
    pub fn name(self) -> &'static str {
        match self {
            Field::ISet => "I-SET",
            Field::IRead => "I-READ",
            Field::Mode => "MODE",
            Field::Status => "STATUS",
            Field::Compare => "COMPARE",
            Field::HystState => "HYST-STATE",
            Field::CycleCmd => "CYCLE-CMD",
            Field::RLoad => "R-LOAD",
            Field::VOut => "V-OUT",
            Field::LinkTxOk => "LINK-TX-OK",
            Field::LinkRxOk => "LINK-RX-OK",
            Field::Local => "LOCAL",
            Field::WfOffset => "WF-OFFSET",
            Field::WfScale => "WF-SCALE",
            Field::WfLoad => "WF-LOAD",
            Field::TrigArm => "TRIG-ARM",
            Field::Alarm => "ALARM",
            Field::RampState => "RAMP-STATE",
        }
    }

    pub fn parse(s: &str) -> Option<Field> {
        FIELDS.iter().copied().find(|f| f.name() == s)
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    /// Backing register, for register-backed channels.
    pub fn register(self) -> Option<u8> {
        Some(match self {
            Field::ISet => regs::I_SET,
            Field::IRead => regs::I_READ,
            Field::Mode => regs::MODE,
            Field::Status => regs::STATUS,
            Field::RLoad => regs::R_LOAD,
            Field::VOut => regs::V_OUT,
            Field::WfOffset => regs::WF_OFFSET,
            Field::WfScale => regs::WF_SCALE,
            Field::TrigArm => regs::TRIG_ARM,
            _ => return None,
        })
    }

    pub fn writable(self) -> bool {
        matches!(
            self,
            Field::ISet
                | Field::Mode
                | Field::CycleCmd
                | Field::WfOffset
                | Field::WfScale
                | Field::WfLoad
                | Field::TrigArm
        )
    }
}

/// Splits `"SR-C01:I-SET"` into device and field.
pub fn split_name(name: &str) -> Option<(&str, &str)> {
    name.rsplit_once(':')
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChError {
    #[error("no_such_channel: {0}")]
    NoSuchChannel(String),
    #[error("read_only")]
    ReadOnly,
    #[error("type_mismatch: {0}")]
    TypeMismatch(String),
    #[error("local_mode")]
    Local,
    #[error("unmapped")]
    Unmapped,
    #[error("invalid_value")]
    InvalidValue,
    #[error("bad_request")]
    BadRequest,
    #[error("link_down")]
    LinkDown,
    #[error("timeout")]
    Timeout,
    #[error("busy")]
    Busy,
    #[error("not_on: {0}")]
    NotOn(String),
    #[error("member_not_ready: {0}")]
    MemberNotReady(String),
    #[error("out_of_range: {0}")]
    OutOfRange(String),
    #[error("config: {0}")]
    Config(String),
}

impl ChError {
    /// Stable machine-readable code, the text before any detail.
    pub fn code(&self) -> &'static str {
        match self {
            ChError::NoSuchChannel(_) => "no_such_channel",
            ChError::ReadOnly => "read_only",
            ChError::TypeMismatch(_) => "type_mismatch",
            ChError::Local => "local_mode",
            ChError::Unmapped => "unmapped",
            ChError::InvalidValue => "invalid_value",
            ChError::BadRequest => "bad_request",
            ChError::LinkDown => "link_down",
            ChError::Timeout => "timeout",
            ChError::Busy => "busy",
            ChError::NotOn(_) => "not_on",
            ChError::MemberNotReady(_) => "member_not_ready",
            ChError::OutOfRange(_) => "out_of_range",
            ChError::Config(_) => "config",
        }
    }
}

impl From<crate::link::frame::NakReason> for ChError {
    fn from(r: crate::link::frame::NakReason) -> Self {
        use crate::link::frame::NakReason::*;
        match r {
            Unmapped => ChError::Unmapped,
            ReadOnly => ChError::ReadOnly,
            Local => ChError::Local,
            InvalidValue => ChError::InvalidValue,
            BadRequest => ChError::BadRequest,
        }
    }
}

impl From<crate::link::LinkError> for ChError {
    fn from(e: crate::link::LinkError) -> Self {
        match e {
            crate::link::LinkError::Timeout => ChError::Timeout,
            crate::link::LinkError::PriorityBusy => ChError::Busy,
            _ => ChError::LinkDown,
        }
    }
}

pub fn num(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

/// Binary32 register value as a channel value.
pub fn f32_value(word: u32) -> Value {
    num(f32::from_bits(word) as f64)
}

pub fn as_f64(v: &Value) -> Result<f64, ChError> {
    match v {
        Value::Number(n) => n.as_f64().ok_or_else(|| ChError::TypeMismatch("number".into())),
        Value::String(s) => s
            .trim()
            .parse()
            .map_err(|_| ChError::TypeMismatch(format!("expected a number, got {s:?}"))),
        other => Err(ChError::TypeMismatch(format!("expected a number, got {other}"))),
    }
}

/// Accepts true/false, 0/1 and on/off style strings.
pub fn as_bool(v: &Value) -> Result<bool, ChError> {
    match v {
        Value::Bool(b) => Ok(*b),
        Value::Number(n) if n.as_f64() == Some(0.0) => Ok(false),
        Value::Number(n) if n.as_f64() == Some(1.0) => Ok(true),
        Value::String(s) => match s.to_ascii_lowercase().as_str() {
            "1" | "true" | "on" | "yes" | "start" => Ok(true),
            "0" | "false" | "off" | "no" | "stop" => Ok(false),
            _ => Err(ChError::TypeMismatch(format!("expected a flag, got {s:?}"))),
        },
        other => Err(ChError::TypeMismatch(format!("expected a flag, got {other}"))),
    }
}

/// MODE channel: "off" | "on" | "local", or the register word.
pub fn mode_word(v: &Value) -> Result<u32, ChError> {
    match v {
        Value::String(s) => match s.to_ascii_lowercase().as_str() {
            "off" | "0" => Ok(0),
            "on" | "1" => Ok(1),
            "local" | "2" => Ok(2),
            _ => Err(ChError::TypeMismatch(format!("unknown mode {s:?}"))),
        },
        Value::Bool(b) => Ok(*b as u32),
        Value::Number(n) => match n.as_u64() {
            Some(w @ 0..=2) => Ok(w as u32),
            _ => Err(ChError::TypeMismatch(format!("unknown mode {n}"))),
        },
        other => Err(ChError::TypeMismatch(format!("unknown mode {other}"))),
    }
}

pub fn mode_label(word: u32) -> &'static str {
    match word {
        0 => "off",
        1 => "on",
        2 => "local",
        _ => "unknown",
    }
}
