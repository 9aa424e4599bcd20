//! Label spaces, class probability vectors, the topology/ego-motion
//! consistency relation and distance-to-intersection windows.
//!
//! Class ids are 1-based everywhere in the public API (topology 1..=7,
//! ego-motion 1..=3); vectors are indexed with `id - 1`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_TOPOLOGIES: usize = 7;
pub const NUM_MOTIONS: usize = 3;

/// Tolerance used when validating externally supplied probability vectors.
pub const PDF_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    Topology7,
    Egomotion3,
}

impl LabelSpace {
    pub fn len(self) -> usize {
        match self {
            LabelSpace::Topology7 => NUM_TOPOLOGIES,
            LabelSpace::Egomotion3 => NUM_MOTIONS,
        }
    }
}

/// A normalized probability vector over one of the two label spaces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassPdf {
    values: Vec<f64>,
    space: LabelSpace,
}

/// Normalize `values` into a [`ClassPdf`] over `space`.
pub fn make_pdf(values: &[f64], space: LabelSpace) -> Result<ClassPdf> {
    ClassPdf::new(values, space)
}

impl ClassPdf {
    pub fn new(values: &[f64], space: LabelSpace) -> Result<Self> {
        if values.len() != space.len() {
            return Err(Error::DimensionMismatch {
                expected: space.len(),
                actual: values.len(),
            });
        }
        for (index, &value) in values.iter().enumerate() {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(Error::NegativeEntry { index, value });
            }
        }
        let sum: f64 = values.iter().sum();
        if sum <= 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(Self {
            values: values.iter().map(|v| v / sum).collect(),
            space,
        })
    }

    /// Accept an already-normalized vector (e.g. read from disk) without
    /// rescaling it. Fails if it is off by more than [`PDF_TOLERANCE`].
    pub fn from_normalized(values: &[f64], space: LabelSpace) -> Result<Self> {
        let pdf = Self::new(values, space)?;
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PDF_TOLERANCE {
            return Err(Error::InvalidPdf(format!("entries sum to {sum}")));
        }
        Ok(Self {
            values: values.to_vec(),
            space: pdf.space,
        })
    }

    /// Softmax of raw scores, computed in f64.
    pub fn softmax(logits: &[f32], space: LabelSpace) -> Result<Self> {
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l as f64));
        let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
        Self::new(&exps, space)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn space(&self) -> LabelSpace {
        self.space
    }

    /// Class id (1-based) of the largest entry; ties go to the lowest id.
    pub fn top1(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best + 1
    }

    /// Class id (1-based) of the smallest entry; ties go to the lowest id.
    pub fn worst1(&self) -> usize {
        let mut worst = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v < self.values[worst] {
                worst = i;
            }
        }
        worst + 1
    }

    pub fn max_value(&self) -> f64 {
        self.values[self.top1() - 1]
    }
}

pub fn top1(pdf: &ClassPdf) -> usize {
    pdf.top1()
}

pub fn worst1(pdf: &ClassPdf) -> usize {
    pdf.worst1()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgoMotion {
    Straight,
    Left,
    Right,
}

impl EgoMotion {
    pub const ALL: [EgoMotion; NUM_MOTIONS] = [EgoMotion::Straight, EgoMotion::Left, EgoMotion::Right];

    pub fn id(self) -> usize {
        match self {
            EgoMotion::Straight => 1,
            EgoMotion::Left => 2,
            EgoMotion::Right => 3,
        }
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id.checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EgoMotion::Straight => "straight",
            EgoMotion::Left => "left",
            EgoMotion::Right => "right",
        }
    }

    /// Parse either a name (`left`) or a numeric id (`2`).
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if let Ok(id) = s.parse::<usize>() {
            return Self::from_id(id);
        }
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for EgoMotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyClass {
    pub id: u8,
    pub name: String,
    pub afforded_motions: Vec<EgoMotion>,
}

/// `entries[m][c]` is true iff ego-motion `m + 1` is afforded by topology `c + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConsistencyMatrix {
    entries: [[bool; NUM_TOPOLOGIES]; NUM_MOTIONS],
}

impl ConsistencyMatrix {
    pub fn new(entries: [[bool; NUM_TOPOLOGIES]; NUM_MOTIONS]) -> Result<Self> {
        for (m, row) in entries.iter().enumerate() {
            if !row.iter().any(|&e| e) {
                return Err(Error::Catalogue(format!(
                    "ego-motion {} is afforded by no topology",
                    m + 1
                )));
            }
        }
        for c in 0..NUM_TOPOLOGIES {
            if !entries.iter().any(|row| row[c]) {
                return Err(Error::Catalogue(format!(
                    "topology {} affords no ego-motion",
                    c + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn all_true() -> Self {
        Self {
            entries: [[true; NUM_TOPOLOGIES]; NUM_MOTIONS],
        }
    }

    /// `motion` and `topology` are 1-based ids.
    pub fn get(&self, motion: usize, topology: usize) -> bool {
        self.entries[motion - 1][topology - 1]
    }

    /// Row of topologies consistent with a 1-based motion id.
    pub fn row(&self, motion: usize) -> &[bool; NUM_TOPOLOGIES] {
        &self.entries[motion - 1]
    }

    pub fn entries(&self) -> &[[bool; NUM_TOPOLOGIES]; NUM_MOTIONS] {
        &self.entries
    }
}

impl Default for ConsistencyMatrix {
    fn default() -> Self {
        Catalogue::default().consistency()
    }
}

/// Distance-to-intersection windows in meters. Input-T is captured in
/// `[-l2, -l1]`; an input-F sequence starts in `[-l3, 0]` and ends in `[0, l4]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct D2iConfig {
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "L2")]
    pub l2: f64,
    #[serde(rename = "L3")]
    pub l3: f64,
    #[serde(rename = "L4")]
    pub l4: f64,
}

impl Default for D2iConfig {
    fn default() -> Self {
        Self {
            l1: 5.0,
            l2: 15.0,
            l3: 5.0,
            l4: 15.0,
        }
    }
}

impl D2iConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.l2, self.l3, self.l4];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("d2i values must be >= 0: {self:?}")));
        }
        if self.l1 >= self.l2 {
            return Err(Error::Config(format!(
                "d2i requires L1 < L2, got L1={} L2={}",
                self.l1, self.l2
            )));
        }
        Ok(())
    }

    pub fn t_range(&self) -> (f64, f64) {
        (-self.l2, -self.l1)
    }

    pub fn f_start_range(&self) -> (f64, f64) {
        (-self.l3, 0.0)
    }

    pub fn f_end_range(&self) -> (f64, f64) {
        (0.0, self.l4)
    }
}

/// Topology catalogue plus D2I windows, loadable from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalogue {
    pub topology_classes: Vec<TopologyClass>,
    #[serde(default)]
    pub d2i: D2iConfig,
}

impl Default for Catalogue {
    fn default() -> Self {
        use EgoMotion::*;
        let class = |id: u8, name: &str, motions: &[EgoMotion]| TopologyClass {
            id,
            name: name.to_string(),
            afforded_motions: motions.to_vec(),
        };
        Self {
            topology_classes: vec![
                class(1, "four-way cross", &[Straight, Left, Right]),
                class(2, "t-junction", &[Left, Right]),
                class(3, "side-road left", &[Straight, Left]),
                class(4, "side-road right", &[Straight, Right]),
                class(5, "left turn only", &[Left]),
                class(6, "right turn only", &[Right]),
                class(7, "straight", &[Straight]),
            ],
            d2i: D2iConfig::default(),
        }
    }
}

impl Catalogue {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cat: Catalogue =
            toml::from_str(text).map_err(|e| Error::Catalogue(e.to_string()))?;
        cat.topology_classes.sort_by_key(|c| c.id);
        cat.validate()?;
        Ok(cat)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("catalogue serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.topology_classes.len() != NUM_TOPOLOGIES {
            return Err(Error::Catalogue(format!(
                "expected {NUM_TOPOLOGIES} topology classes, got {}",
                self.topology_classes.len()
            )));
        }
        for (i, class) in self.topology_classes.iter().enumerate() {
            if class.id as usize != i + 1 {
                return Err(Error::Catalogue(format!(
                    "topology ids must be unique and cover 1..=7 (found {})",
                    class.id
                )));
            }
            if class.afforded_motions.is_empty() {
                return Err(Error::Catalogue(format!(
                    "topology {} ({}) affords no ego-motion",
                    class.id, class.name
                )));
            }
        }
        self.d2i.validate()?;
        ConsistencyMatrix::new(self.entries()).map(|_| ())
    }

    fn entries(&self) -> [[bool; NUM_TOPOLOGIES]; NUM_MOTIONS] {
        let mut entries = [[false; NUM_TOPOLOGIES]; NUM_MOTIONS];
        for class in &self.topology_classes {
            for m in &class.afforded_motions {
                entries[m.id() - 1][class.id as usize - 1] = true;
            }
        }
        entries
    }

    pub fn consistency(&self) -> ConsistencyMatrix {
        ConsistencyMatrix::new(self.entries()).expect("validated catalogue")
    }

    pub fn class(&self, id: u8) -> Option<&TopologyClass> {
        self.topology_classes.get((id as usize).checked_sub(1)?)
    }
}
