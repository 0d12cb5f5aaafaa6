//! Families of power supplies and the optic model that maps five physical
//! knobs to family currents.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MachineError {
    #[error("machine config: {0}")]
    Schema(String),
    #[error("power supply {0} is listed in more than one family")]
    DuplicateMember(String),
    #[error("duplicate family {0}")]
    DuplicateFamily(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unknown family {0}")]
    UnknownFamily(String),
    #[error("unknown power supply {0}")]
    UnknownPs(String),
    #[error("{ps}: {value} A outside [{lo}, {hi}] A")]
    OutOfRange { ps: String, value: f64, lo: f64, hi: f64 },
    #[error("no optic model loaded")]
    NoOptic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub ps: String,
    #[serde(default)]
    pub offset: f64,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub name: String,
    pub members: Vec<MemberSpec>,
    #[serde(default)]
    pub set_value: f64,
}

impl FamilySpec {
    /// Member currents for a family value: `scale * value + offset`.
    pub fn member_currents(&self, value: f64) -> Vec<(String, f64)> {
        self.members
            .iter()
            .map(|m| (m.ps.clone(), m.scale * value + m.offset))
            .collect()
    }

    /// Inverse mapping used to present a member read-back in family units.
    pub fn family_units(&self, member: usize, current: f64) -> f64 {
        let m = &self.members[member];
        (current - m.offset) / m.scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticSpec {
    #[serde(rename = "E0")]
    pub e0: f64,
    #[serde(rename = "I0")]
    pub i0: BTreeMap<String, f64>,
    #[serde(rename = "M")]
    pub m: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub g: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineConfig {
    pub families: Vec<FamilySpec>,
    #[serde(default)]
    pub optic: Option<OpticSpec>,
}

/// The five optic knobs: energy and the tune/chromaticity shifts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 5]", into = "[f64; 5]")]
pub struct OpticQ {
    pub e: f64,
    pub dnu_x: f64,
    pub dnu_y: f64,
    pub dxi_x: f64,
    pub dxi_y: f64,
}

impl From<[f64; 5]> for OpticQ {
    fn from(a: [f64; 5]) -> Self {
        Self {
            e: a[0],
            dnu_x: a[1],
            dnu_y: a[2],
            dxi_x: a[3],
            dxi_y: a[4],
        }
    }
}

impl From<OpticQ> for [f64; 5] {
    fn from(q: OpticQ) -> Self {
        [q.e, q.dnu_x, q.dnu_y, q.dxi_x, q.dxi_y]
    }
}

impl OpticQ {
    pub fn theoretical(e0: f64) -> Self {
        Self {
            e: e0,
            dnu_x: 0.0,
            dnu_y: 0.0,
            dxi_x: 0.0,
            dxi_y: 0.0,
        }
    }

    pub fn knobs(&self) -> [f64; 4] {
        [self.dnu_x, self.dnu_y, self.dxi_x, self.dxi_y]
    }
}

/// Optic model resolved to family order.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticModel {
    pub e0: f64,
    pub i0: Vec<f64>,
    pub m: Vec<[f64; 4]>,
    pub g: Vec<f64>,
}

impl OpticModel {
    /// I_f = g_f (E/E0) (I0_f + (M Δq)_f)
    pub fn currents(&self, q: &OpticQ) -> Vec<f64> {
        let k = q.knobs();
        let ratio = q.e / self.e0;
        self.i0
            .iter()
            .zip(&self.m)
            .zip(&self.g)
            .map(|((i0, row), g)| {
                let dm: f64 = row.iter().zip(&k).map(|(a, b)| a * b).sum();
                g * ratio * (i0 + dm)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Machine {
    pub families: Vec<FamilySpec>,
    index: HashMap<String, usize>,
    member_of: HashMap<String, usize>,
    pub optic: Option<OpticModel>,
}

impl Machine {
    pub fn load(path: &Path) -> Result<Self, MachineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MachineError::Schema(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, MachineError> {
        let cfg: MachineConfig =
            serde_json::from_str(text).map_err(|e| MachineError::Schema(e.to_string()))?;
        Self::new(cfg)
    }

    pub fn new(cfg: MachineConfig) -> Result<Self, MachineError> {
        let mut index = HashMap::new();
        let mut member_of = HashMap::new();
        for (i, f) in cfg.families.iter().enumerate() {
            if index.insert(f.name.clone(), i).is_some() {
                return Err(MachineError::DuplicateFamily(f.name.clone()));
            }
            if f.members.is_empty() {
                return Err(MachineError::Schema(format!("family {} has no members", f.name)));
            }
            for m in &f.members {
                if !(m.scale.is_finite() && m.offset.is_finite()) || m.scale == 0.0 {
                    return Err(MachineError::Schema(format!(
                        "family {}: bad scale/offset for {}",
                        f.name, m.ps
                    )));
                }
                if member_of.insert(m.ps.clone(), i).is_some() {
                    return Err(MachineError::DuplicateMember(m.ps.clone()));
                }
            }
        }
        let optic = cfg
            .optic
            .as_ref()
            .map(|o| resolve_optic(o, &cfg.families))
            .transpose()?;
        Ok(Self {
            families: cfg.families,
            index,
            member_of,
            optic,
        })
    }

    pub fn family_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn family_of(&self, ps: &str) -> Option<usize> {
        self.member_of.get(ps).copied()
    }

    /// Checks every member against the known power supplies.
    pub fn check_members(&self, known: impl Fn(&str) -> bool) -> Result<(), MachineError> {
        for f in &self.families {
            for m in &f.members {
                if !known(&m.ps) {
                    return Err(MachineError::UnknownPs(m.ps.clone()));
                }
            }
        }
        Ok(())
    }

    /// Member currents for a whole optic setting, family by family.
    pub fn optic_member_currents(&self, q: &OpticQ) -> Result<Vec<(String, f64)>, MachineError> {
        let optic = self.optic.as_ref().ok_or(MachineError::NoOptic)?;
        Ok(optic
            .currents(q)
            .iter()
            .zip(&self.families)
            .flat_map(|(v, f)| f.member_currents(*v))
            .collect())
    }
}

fn resolve_optic(o: &OpticSpec, families: &[FamilySpec]) -> Result<OpticModel, MachineError> {
    if !(o.e0 > 0.0) {
        return Err(MachineError::Schema("E0 must be positive".into()));
    }
    let names: HashSet<&str> = families.iter().map(|f| f.name.as_str()).collect();
    for key in o.i0.keys().chain(o.m.keys()).chain(o.g.keys()) {
        if !names.contains(key.as_str()) {
            return Err(MachineError::UnknownFamily(key.clone()));
        }
    }
    if o.m.len() != families.len() || o.i0.len() != families.len() {
        return Err(MachineError::Dimension(format!(
            "optic has {} M rows and {} I0 entries for {} families",
            o.m.len(),
            o.i0.len(),
            families.len()
        )));
    }
    let mut model = OpticModel {
        e0: o.e0,
        i0: vec![],
        m: vec![],
        g: vec![],
    };
    for f in families {
        let row = &o.m[&f.name];
        let row: [f64; 4] = row.as_slice().try_into().map_err(|_| {
            MachineError::Dimension(format!("M row for {} has {} entries, want 4", f.name, row.len()))
        })?;
        let g = o.g.get(&f.name).copied().unwrap_or(1.0);
        if !(g > 0.0) {
            return Err(MachineError::Schema(format!("gradient of {} must be > 0", f.name)));
        }
        model.i0.push(o.i0[&f.name]);
        model.m.push(row);
        model.g.push(g);
    }
    Ok(model)
}

/// A generated storage-ring machine: power supplies with their class, and
/// the family/optic configuration over them.
#[derive(Debug, Clone)]
pub struct ToyRing {
    pub ps: Vec<(String, String)>,
    pub config: MachineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "quads")]
    pub quad_families: usize,
    #[serde(default = "sexts")]
    pub sext_families: usize,
    #[serde(default = "two")]
    pub members_per_family: usize,
}

fn default_seed() -> u64 {
    7
}
fn quads() -> usize {
    31
}
fn sexts() -> usize {
    9
}
fn two() -> usize {
    2
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            quad_families: quads(),
            sext_families: sexts(),
            members_per_family: two(),
        }
    }
}

/// Random but well-conditioned ring optics. Quadrupole families respond
/// mainly to the tune knobs, sextupole families to the chromaticity knobs.
pub fn toy_ring(spec: &ToySpec) -> ToyRing {
    let mut rng = SimRng::seed_from(spec.seed);
    let mut ps = vec![];
    let mut families = vec![];
    let mut i0 = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut g = BTreeMap::new();
    let total = spec.quad_families + spec.sext_families;
    for f in 0..total {
        let quad = f < spec.quad_families;
        let (prefix, class, k) = if quad {
            ("Q", "quadrupole", f + 1)
        } else {
            ("S", "sextupole", f + 1 - spec.quad_families)
        };
        let name = format!("{prefix}F{k:02}");
        let mut members = vec![];
        for j in 0..spec.members_per_family {
            let id = format!("SR-{prefix}{k:02}-{:02}", j + 1);
            ps.push((id.clone(), class.to_string()));
            members.push(MemberSpec {
                ps: id,
                offset: rng.uniform(-0.5, 0.5),
                scale: rng.uniform(0.99, 1.01),
            });
        }
        let (base, strong, weak) = if quad {
            (rng.uniform(40.0, 80.0), [0, 1], [2, 3])
        } else {
            (rng.uniform(50.0, 100.0), [2, 3], [0, 1])
        };
        let mut row = [0.0; 4];
        for s in strong {
            row[s] = rng.uniform(-20.0, 20.0);
        }
        for w in weak {
            row[w] = rng.uniform(-1.0, 1.0);
        }
        i0.insert(name.clone(), base);
        m.insert(name.clone(), row.to_vec());
        let gain = rng.uniform(0.97, 1.03);
        g.insert(name.clone(), gain);
        families.push(FamilySpec {
            name,
            members,
            // Start on the theoretical optic.
            set_value: gain * base,
        });
    }
    ToyRing {
        ps,
        config: MachineConfig {
            families,
            optic: Some(OpticSpec { e0: 2.4, i0, m, g }),
        },
    }
}
