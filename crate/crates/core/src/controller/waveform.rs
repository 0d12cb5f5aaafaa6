//! Triggered current waveforms.
//!
//! Playback consumes one set-point every four controller ticks (80 us at the
//! 20 us tick) and fills the three ticks in between by linear interpolation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Controller ticks per waveform set-point.
pub const TICKS_PER_POINT: u64 = 4;
pub const MIN_POINTS: usize = 2;
/// Flash capacity bound on stored set-points.
pub const MAX_POINTS: usize = 32_768;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveformError {
    #[error("waveform needs at least {MIN_POINTS} points, got {0}")]
    TooShort(usize),
    #[error("waveform exceeds {MAX_POINTS} points, got {0}")]
    TooLong(usize),
    #[error("non-finite waveform value at index {0}")]
    NonFinite(usize),
    #[error("point {index} maps to {value} A, outside +/-{i_max} A")]
    OutOfRange { index: usize, value: f64, i_max: f64 },
    #[error("waveform file: {0}")]
    File(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    #[default]
    Once,
    Loop,
}

/// Waveform file and download unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    #[serde(default)]
    pub name: String,
    pub points: Vec<f64>,
    #[serde(default)]
    pub offset: f64,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub loop_mode: LoopMode,
}

fn one() -> f64 {
    1.0
}

impl Waveform {
    pub fn new(points: Vec<f64>) -> Self {
        Self {
            name: String::new(),
            points,
            offset: 0.0,
            scale: 1.0,
            loop_mode: LoopMode::Once,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, WaveformError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WaveformError::File(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| WaveformError::File(e.to_string()))
    }

    pub fn validate(&self, i_max: f64) -> Result<(), WaveformError> {
        validate_points(&self.points, self.offset, self.scale, i_max)
    }

    /// Playback period in controller ticks for loop mode.
    pub fn period_ticks(&self) -> u64 {
        self.points.len() as u64 * TICKS_PER_POINT
    }
}

pub fn validate_points(
    points: &[f64],
    offset: f64,
    scale: f64,
    i_max: f64,
) -> Result<(), WaveformError> {
    if points.len() < MIN_POINTS {
        return Err(WaveformError::TooShort(points.len()));
    }
    if points.len() > MAX_POINTS {
        return Err(WaveformError::TooLong(points.len()));
    }
    for (index, &p) in points.iter().enumerate() {
        if !p.is_finite() {
            return Err(WaveformError::NonFinite(index));
        }
        let value = scale * p + offset;
        if !value.is_finite() || value.abs() > i_max {
            return Err(WaveformError::OutOfRange {
                index,
                value,
                i_max,
            });
        }
    }
    Ok(())
}

/// Raw (unscaled) waveform value `tick` ticks after playback start.
///
/// Returns `None` once a single-shot waveform has passed its last point.
pub fn sample(points: &[f64], mode: LoopMode, tick: u64) -> Option<(f64, usize)> {
    let n = points.len() as u64;
    let seg = tick / TICKS_PER_POINT;
    let phase = tick % TICKS_PER_POINT;
    let (idx, next) = match mode {
        LoopMode::Loop => {
            let i = seg % n;
            (i, (i + 1) % n)
        }
        LoopMode::Once => {
            if seg >= n - 1 {
                if seg == n - 1 && phase == 0 {
                    return Some((points[(n - 1) as usize], (n - 1) as usize));
                }
                return None;
            }
            (seg, seg + 1)
        }
    };
    let a = points[idx as usize];
    let b = points[next as usize];
    let frac = phase as f64 / TICKS_PER_POINT as f64;
    Some((a + (b - a) * frac, idx as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_three_steps() {
        let pts = [0.0, 4.0];
        let got: Vec<f64> = (0..5)
            .map(|k| sample(&pts, LoopMode::Once, k).unwrap().0)
            .collect();
        assert_eq!(got, [0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(sample(&pts, LoopMode::Once, 5), None);
    }

    #[test]
    fn loop_wraps_to_first_point() {
        let pts = [0.0, 4.0];
        let got: Vec<f64> = (0..9)
            .map(|k| sample(&pts, LoopMode::Loop, k).unwrap().0)
            .collect();
        assert_eq!(got, [0.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn length_limits() {
        assert_eq!(
            validate_points(&[1.0], 0.0, 1.0, 10.0),
            Err(WaveformError::TooShort(1))
        );
        let long = vec![0.0; MAX_POINTS + 1];
        assert_eq!(
            validate_points(&long, 0.0, 1.0, 10.0),
            Err(WaveformError::TooLong(MAX_POINTS + 1))
        );
        assert!(validate_points(&vec![0.0; MAX_POINTS], 0.0, 1.0, 10.0).is_ok());
    }

    #[test]
    fn range_uses_offset_and_scale() {
        assert!(validate_points(&[0.0, 4.0], 1.0, 0.5, 3.0).is_ok());
        assert!(matches!(
            validate_points(&[0.0, 4.0], 1.5, 0.5, 3.0),
            Err(WaveformError::OutOfRange { index: 1, .. })
        ));
        assert_eq!(
            validate_points(&[0.0, f64::NAN], 0.0, 1.0, 3.0),
            Err(WaveformError::NonFinite(1))
        );
    }

    #[test]
    fn periods() {
        // Booster ramp: 4167 points at 80 us.
        let w = Waveform::new(vec![0.0; 4167]);
        assert_eq!(w.period_ticks() * 20_000, 333_360_000);
        // Quadrupole wobble: 2500 points is 0.2 s, i.e. 5 Hz.
        let w = Waveform::new(vec![0.0; 2500]);
        assert_eq!(w.period_ticks() * 20_000, 200_000_000);
    }

    #[test]
    fn file_format() {
        let w: Waveform = serde_json::from_str(
            r#"{"name":"wobble","points":[0,1],"offset":2,"scale":0.5,"loop_mode":"loop"}"#,
        )
        .unwrap();
        assert_eq!(w.loop_mode, LoopMode::Loop);
        assert_eq!(w.scale, 0.5);
        let d: Waveform = serde_json::from_str(r#"{"points":[0,1]}"#).unwrap();
        assert_eq!((d.offset, d.scale, d.loop_mode), (0.0, 1.0, LoopMode::Once));
    }
}
