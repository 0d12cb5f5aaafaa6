//! Scenario files: supply classes, instances, machine, feedback, timed
//! events and run parameters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::controller::Waveform;
use crate::feedback::FeedbackSpec;
use crate::link::{Direction, LinkParams};
use crate::machine::{MachineConfig, ToySpec};
use crate::plant::{PlantParams, Quadrants};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("scenario schema: {0}")]
    Schema(String),
    #[error("unknown class {class:?} for power supply {ps}")]
    UnknownClass { ps: String, class: String },
    #[error("unknown power supply {0}")]
    UnknownPs(String),
    #[error("duplicate power supply {0}")]
    DuplicatePs(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub r: f64,
    pub l: f64,
    pub i_max: f64,
    pub v_max: f64,
    pub quadrants: Quadrants,
    /// Closed-loop bandwidth, Hz.
    pub f_c: f64,
    /// Standardization ramp rate, A/s.
    pub ramp_rate: f64,
    /// Whether hysteresis branch tracking applies.
    #[serde(default)]
    pub tracked: bool,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "tol")]
    pub tol_ppm: f64,
}

fn tol() -> f64 {
    100.0
}

impl ClassSpec {
    pub fn plant(&self, name: &str) -> PlantParams {
        PlantParams {
            resistance: self.r,
            inductance: self.l,
            i_max: self.i_max,
            v_max: self.v_max,
            quadrants: self.quadrants,
            class_name: name.to_string(),
        }
    }
}

/// Built-in classes. Ratings of the corrector and booster ends follow the
/// installed range (3 A/20 V four-quadrant to 950 A/1000 V two-quadrant);
/// R and L are placeholders.
pub fn builtin_classes() -> BTreeMap<String, ClassSpec> {
    let mut m = BTreeMap::new();
    m.insert(
        "corrector".into(),
        ClassSpec {
            r: 0.5,
            l: 0.01,
            i_max: 3.0,
            v_max: 20.0,
            quadrants: Quadrants::Four,
            f_c: 1000.0,
            ramp_rate: 1.0,
            tracked: false,
            noise_sigma: 0.0,
            tol_ppm: 100.0,
        },
    );
    m.insert(
        "quadrupole".into(),
        ClassSpec {
            r: 0.25,
            l: 0.06,
            i_max: 120.0,
            v_max: 80.0,
            quadrants: Quadrants::One,
            f_c: 10.0,
            ramp_rate: 10.0,
            tracked: true,
            noise_sigma: 0.0,
            tol_ppm: 100.0,
        },
    );
    m.insert(
        "sextupole".into(),
        ClassSpec {
            r: 0.2,
            l: 0.05,
            i_max: 200.0,
            v_max: 100.0,
            quadrants: Quadrants::One,
            f_c: 10.0,
            ramp_rate: 20.0,
            tracked: true,
            noise_sigma: 0.0,
            tol_ppm: 100.0,
        },
    );
    m.insert(
        "booster".into(),
        ClassSpec {
            r: 0.08,
            l: 0.12,
            i_max: 950.0,
            v_max: 1000.0,
            quadrants: Quadrants::Two,
            f_c: 10.0,
            ramp_rate: 100.0,
            tracked: false,
            noise_sigma: 0.0,
            tol_ppm: 100.0,
        },
    );
    m
}

/// A value given inline or as a path relative to the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source<T> {
    Path(String),
    Inline(T),
}

impl<T: serde::de::DeserializeOwned + Clone> Source<T> {
    pub fn resolve(&self, base: &Path) -> Result<T, ConfigError> {
        match self {
            Source::Inline(v) => Ok(v.clone()),
            Source::Path(p) => {
                let path = base.join(p);
                let text = std::fs::read_to_string(&path).map_err(|e| ConfigError::Io {
                    path: path.clone(),
                    msg: e.to_string(),
                })?;
                serde_json::from_str(&text).map_err(|e| ConfigError::Io {
                    path,
                    msg: e.to_string(),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsInstance {
    pub id: String,
    pub class: String,
    #[serde(default)]
    pub link: Option<LinkParams>,
    /// Actual winding resistance and inductance, when they differ from the
    /// class values the controller is tuned for.
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default)]
    pub l: Option<f64>,
    /// Nominal resistance known to the controller (alarm band centre).
    #[serde(default)]
    pub r_nom: Option<f64>,
    #[serde(default)]
    pub noise_sigma: Option<f64>,
    /// Switches the supply on and starts it in steady state at this current.
    #[serde(default)]
    pub initial_set: Option<f64>,
    #[serde(default)]
    pub on: Option<bool>,
    #[serde(default)]
    pub waveform: Option<Source<Waveform>>,
    #[serde(default)]
    pub waveform_persistent: bool,
    /// Arms the trigger and fires it at this time, seconds.
    #[serde(default)]
    pub trigger_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventKind {
    ResistanceChange { new_r: f64 },
    SwapWith { other: String },
    LinkBreak {
        dir: Direction,
        #[serde(default = "yes")]
        broken: bool,
    },
    Local {
        #[serde(default = "yes")]
        on: bool,
    },
    Trigger,
    Put { channel: String, value: Value },
    Feedback { enabled: bool },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    /// Seconds of virtual time.
    pub t: f64,
    #[serde(default)]
    pub ps: Option<String>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default = "ten")]
    pub until: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub metrics_path: Option<String>,
    /// Metrics sample period; 0 disables sampling.
    #[serde(default = "ten")]
    pub metrics_period_ms: f64,
    /// Directory for persistent controller state files.
    #[serde(default)]
    pub state_dir: Option<String>,
}

fn ten() -> f64 {
    10.0
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            until: 10.0,
            seed: None,
            metrics_path: None,
            metrics_period_ms: 10.0,
            state_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub classes: BTreeMap<String, ClassSpec>,
    /// Default link parameters for every supply.
    #[serde(default)]
    pub link: LinkParams,
    #[serde(default)]
    pub ps_instances: Vec<PsInstance>,
    /// Generates ring supplies, families and optics.
    #[serde(default)]
    pub toy_machine: Option<ToySpec>,
    #[serde(default)]
    pub machine: Option<Source<MachineConfig>>,
    #[serde(default)]
    pub feedback: Option<FeedbackSpec>,
    #[serde(default)]
    pub faults: Vec<TimedEvent>,
    #[serde(default)]
    pub run: RunSpec,
    /// Ramp duration used when an optic change is large enough to ramp.
    #[serde(default = "one_s")]
    pub optic_ramp_s: f64,
    /// Directory that relative paths resolve against; set by [`Scenario::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn one_s() -> f64 {
    1.0
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut s = Self::from_json(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut s: Scenario =
            serde_json::from_str(text).map_err(|e| ConfigError::Schema(e.to_string()))?;
        if s.optic_ramp_s == 0.0 {
            s.optic_ramp_s = 1.0;
        }
        Ok(s)
    }

    pub fn seed(&self) -> u64 {
        self.run.seed.unwrap_or(0)
    }

    /// Class table: built-ins overridden or extended by the scenario.
    pub fn class_table(&self) -> BTreeMap<String, ClassSpec> {
        let mut t = builtin_classes();
        t.extend(self.classes.clone());
        t
    }

    pub fn resolve_path(&self, p: &str) -> PathBuf {
        self.base_dir.join(p)
    }
}
