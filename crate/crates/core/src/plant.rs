//! R-L magnet load model, ADC quantization and fault injection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimRng;

/// Effective ADC resolution: 17 bits plus sign.
pub const ADC_BITS: u32 = 17;
pub const ADC_COUNTS: f64 = (1u32 << ADC_BITS) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("non-finite plant input")]
    NonFinite,
    #[error("time step must be positive, got {0}")]
    BadStep(f64),
    #[error("invalid plant parameter {name} = {value}")]
    BadParam { name: &'static str, value: f64 },
    #[error("unknown power supply {0:?}")]
    UnknownPs(String),
}

/// Operating quadrants of a converter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Quadrants {
    /// I >= 0 and V >= 0.
    One,
    /// I >= 0, V either sign.
    Two,
    Four,
}

impl TryFrom<u8> for Quadrants {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            4 => Ok(Self::Four),
            other => Err(format!("quadrants must be 1, 2 or 4, got {other}")),
        }
    }
}

impl From<Quadrants> for u8 {
    fn from(q: Quadrants) -> u8 {
        match q {
            Quadrants::One => 1,
            Quadrants::Two => 2,
            Quadrants::Four => 4,
        }
    }
}

impl Quadrants {
    pub fn allows_negative_current(self) -> bool {
        self == Quadrants::Four
    }

    pub fn allows_negative_voltage(self) -> bool {
        self != Quadrants::One
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    /// Load resistance in ohms.
    pub resistance: f64,
    /// Load inductance in henries.
    pub inductance: f64,
    /// Full-scale current in amperes.
    pub i_max: f64,
    /// Voltage ceiling in volts.
    pub v_max: f64,
    pub quadrants: Quadrants,
    pub class_name: String,
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        for (name, value) in [
            ("resistance", self.resistance),
            ("inductance", self.inductance),
            ("i_max", self.i_max),
            ("v_max", self.v_max),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(PlantError::BadParam { name, value });
            }
        }
        Ok(())
    }

    /// L/R time constant in seconds.
    pub fn time_constant(&self) -> f64 {
        self.inductance / self.resistance
    }

    /// Clamps a voltage command to the converter's ceiling and quadrant.
    pub fn clamp_voltage(&self, v: f64) -> f64 {
        let lo = if self.quadrants.allows_negative_voltage() {
            -self.v_max
        } else {
            0.0
        };
        v.clamp(lo, self.v_max)
    }

    /// Lowest current the converter can drive.
    pub fn i_min(&self) -> f64 {
        if self.quadrants.allows_negative_current() {
            -self.i_max
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub current: f64,
    pub v_applied: f64,
}

/// Exact zero-order-hold step of dI/dt = (V - R I) / L.
///
/// The voltage is clamped to the parameter limits first. Converters that
/// cannot carry negative current stop at zero.
pub fn plant_step(
    params: &PlantParams,
    state: PlantState,
    v: f64,
    dt: f64,
) -> Result<PlantState, PlantError> {
    if !(v.is_finite() && dt.is_finite() && state.current.is_finite()) {
        return Err(PlantError::NonFinite);
    }
    if dt <= 0.0 {
        return Err(PlantError::BadStep(dt));
    }
    let decay = (-params.resistance * dt / params.inductance).exp();
    Ok(step_with_decay(params, state, v, decay))
}

/// Same as [`plant_step`] with the decay factor `exp(-R dt / L)` precomputed.
#[inline]
pub fn step_with_decay(params: &PlantParams, state: PlantState, v: f64, decay: f64) -> PlantState {
    let v = params.clamp_voltage(v);
    let mut current = state.current * decay + (v / params.resistance) * (1.0 - decay);
    if !params.quadrants.allows_negative_current() && current < 0.0 {
        current = 0.0;
    }
    PlantState {
        current,
        v_applied: v,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdcModel {
    pub i_max: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl AdcModel {
    pub fn new(i_max: f64) -> Self {
        Self {
            i_max,
            noise_sigma: 0.0,
        }
    }

    #[inline]
    pub fn lsb(&self) -> f64 {
        self.i_max / ADC_COUNTS
    }

    /// Quantizes a current to the ADC grid, rounding half away from zero.
    #[inline]
    pub fn quantize(&self, current: f64) -> f64 {
        let lsb = self.lsb();
        let q = (current / lsb).round() * lsb;
        q.clamp(-self.i_max, self.i_max)
    }
}

/// Quantized current reading with optional Gaussian noise from the
/// simulation's generator.
pub fn measure_current(state: &PlantState, adc: &AdcModel, rng: &mut SimRng) -> f64 {
    let noisy = state.current + rng.gaussian(adc.noise_sigma);
    adc.quantize(noisy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    ResistanceChange { new_r: f64 },
    SwapWith { other: String },
}

/// Magnet load together with its live state.
#[derive(Debug, Clone)]
pub struct Magnet {
    pub params: PlantParams,
    pub state: PlantState,
    decay: f64,
    decay_dt: f64,
}

impl Magnet {
    pub fn new(params: PlantParams) -> Result<Self, PlantError> {
        params.validate()?;
        Ok(Self {
            params,
            state: PlantState::default(),
            decay: 1.0,
            decay_dt: 0.0,
        })
    }

    pub fn step(&mut self, v: f64, dt: f64) -> PlantState {
        if dt != self.decay_dt {
            self.decay = (-self.params.resistance * dt / self.params.inductance).exp();
            self.decay_dt = dt;
        }
        self.state = step_with_decay(&self.params, self.state, v, self.decay);
        self.state
    }

    /// Changes the winding resistance, e.g. a shorted turn.
    pub fn set_resistance(&mut self, new_r: f64) -> Result<(), PlantError> {
        if !(new_r.is_finite() && new_r > 0.0) {
            return Err(PlantError::BadParam {
                name: "resistance",
                value: new_r,
            });
        }
        self.params.resistance = new_r;
        self.decay_dt = 0.0;
        Ok(())
    }
}
