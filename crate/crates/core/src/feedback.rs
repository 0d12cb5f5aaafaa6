//! Orbit feedback: response-matrix pseudo-inverse and the proportional
//! correction law.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row-major dense matrix as nested vectors (rows x cols).
pub type Mat = Vec<Vec<f64>>;

pub const MAX_COND: f64 = 1e10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeedbackError {
    #[error("response matrix is singular or ill-conditioned (cond ~ {0:e})")]
    SingularResponse(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

fn dims(a: &Mat) -> Result<(usize, usize), FeedbackError> {
    let rows = a.len();
    let cols = a.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Err(FeedbackError::Dimension("empty matrix".into()));
    }
    if a.iter().any(|r| r.len() != cols) {
        return Err(FeedbackError::Dimension("ragged rows".into()));
    }
    Ok((rows, cols))
}

fn norm1(a: &Mat) -> f64 {
    let cols = a[0].len();
    (0..cols)
        .map(|j| a.iter().map(|r| r[j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Moore-Penrose pseudo-inverse of a full-column-rank matrix, solving
/// (RᵀR) P = Rᵀ by Gauss-Jordan elimination with partial pivoting.
pub fn pinv(r: &Mat) -> Result<Mat, FeedbackError> {
    let (m, n) = dims(r)?;
    if m < n {
        return Err(FeedbackError::Dimension(format!(
            "{m} BPMs cannot resolve {n} correctors"
        )));
    }
    // Augmented [RᵀR | I | Rᵀ]; the identity block yields (RᵀR)⁻¹ for the
    // condition estimate.
    let w = 2 * n + m;
    let mut aug = vec![vec![0.0; w]; n];
    for i in 0..n {
        for j in 0..n {
            aug[i][j] = (0..m).map(|k| r[k][i] * r[k][j]).sum();
        }
        aug[i][n + i] = 1.0;
        for k in 0..m {
            aug[i][2 * n + k] = r[k][i];
        }
    }
    let ata: Mat = aug.iter().map(|row| row[..n].to_vec()).collect();
    let scale = norm1(&ata);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&a, &b| aug[a][col].abs().total_cmp(&aug[b][col].abs()))
            .expect("non-empty range");
        if aug[piv][col].abs() <= f64::EPSILON * scale {
            return Err(FeedbackError::SingularResponse(f64::INFINITY));
        }
        aug.swap(col, piv);
        let d = aug[col][col];
        for v in aug[col].iter_mut() {
            *v /= d;
        }
        let pivot_row = aug[col].clone();
        for (i, row) in aug.iter_mut().enumerate() {
            if i == col {
                continue;
            }
            let f = row[col];
            if f != 0.0 {
                for (v, p) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
            }
        }
    }
    let inv: Mat = aug.iter().map(|row| row[n..2 * n].to_vec()).collect();
    let cond = scale * norm1(&inv);
    if !cond.is_finite() || cond >= MAX_COND {
        return Err(FeedbackError::SingularResponse(cond));
    }
    Ok(aug.iter().map(|row| row[2 * n..].to_vec()).collect())
}

pub fn mat_vec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum())
        .collect()
}

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let n = b.first().map_or(0, |r| r.len());
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

pub fn rms(y: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    (y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64).sqrt()
}

/// Which currents the orbit model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrbitInput {
    /// The corrector set-points last commanded by the feedback.
    #[default]
    SetPoint,
    /// The simulated magnet currents.
    Plant,
}

/// Sinusoidal disturbance added to the static orbit offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wobble {
    pub amplitude: Vec<f64>,
    pub freq_hz: f64,
}

/// Scenario block configuring one feedback instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackSpec {
    pub correctors: Vec<String>,
    #[serde(default)]
    pub bpms: Vec<String>,
    /// Response matrix in mm/A, BPMs x correctors.
    #[serde(rename = "R_om")]
    pub r_om: Mat,
    /// Static orbit disturbance in mm, one per BPM.
    pub d: Vec<f64>,
    #[serde(default)]
    pub wobble: Option<Wobble>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "half")]
    pub alpha: f64,
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "one_ms")]
    pub period_ms: f64,
    #[serde(default)]
    pub input: OrbitInput,
}

fn half() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}
fn one_ms() -> f64 {
    1.0
}

impl FeedbackSpec {
    pub fn validate(&self) -> Result<(), FeedbackError> {
        let (m, n) = dims(&self.r_om)?;
        if n != self.correctors.len() {
            return Err(FeedbackError::Dimension(format!(
                "R_om has {n} columns for {} correctors",
                self.correctors.len()
            )));
        }
        if !self.bpms.is_empty() && self.bpms.len() != m {
            return Err(FeedbackError::Dimension(format!(
                "R_om has {m} rows for {} BPMs",
                self.bpms.len()
            )));
        }
        if self.d.len() != m {
            return Err(FeedbackError::Dimension(format!(
                "disturbance has {} entries for {m} BPMs",
                self.d.len()
            )));
        }
        if let Some(w) = &self.wobble {
            if w.amplitude.len() != m {
                return Err(FeedbackError::Dimension("wobble amplitude length".into()));
            }
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(FeedbackError::Dimension(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.period_ms > 0.0) {
            return Err(FeedbackError::Dimension("period must be positive".into()));
        }
        Ok(())
    }

    /// Disturbance at time `t` seconds.
    pub fn disturbance(&self, t: f64) -> Vec<f64> {
        let mut d = self.d.clone();
        if let Some(w) = &self.wobble {
            let s = (std::f64::consts::TAU * w.freq_hz * t).sin();
            for (v, a) in d.iter_mut().zip(&w.amplitude) {
                *v += a * s;
            }
        }
        d
    }
}

/// One correction: ΔI = −α·P·y.
pub fn correction(p: &Mat, y: &[f64], alpha: f64) -> Vec<f64> {
    mat_vec(p, y).into_iter().map(|v| -alpha * v).collect()
}
