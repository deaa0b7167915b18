//! Multi-agent trajectory scenes, observation masks, synthetic sports
//! generators and the JSONL dataset format.
//!
//! A scene holds `N` agents over `T` steps. Positions are stored row-major as
//! `N × T × 2` and the observation mask as `N × T`, with `1` meaning observed.
//! A masked-out step has both coordinates missing.

mod io;
mod mask;
mod synth;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use io::{load_jsonl, read_jsonl, save_jsonl, write_jsonl};
pub use mask::{apply_mask, make_mask, split_visible_missing, MaskPattern, MaskSpec};
pub use synth::{builtin_splits, generate_synthetic, DomainProfile};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("invalid field bounds {0:?}")]
    Bounds(FieldBounds),
    #[error("invalid mask spec: {0}")]
    Mask(String),
    #[error("dataset must be normalized before merging (found units `{0}`)")]
    NotNormalized(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Semantic role of an agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Ball,
    Player,
}

impl Role {
    pub const ALL: [Role; 2] = [Role::Ball, Role::Player];

    pub fn index(self) -> usize {
        match self {
            Role::Ball => 0,
            Role::Player => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Ball => "ball",
            Role::Player => "player",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Team {
    Offense,
    Defense,
    None,
}

impl Team {
    pub fn index(self) -> usize {
        match self {
            Team::Offense => 0,
            Team::Defense => 1,
            Team::None => 2,
        }
    }
}

/// Valid playing area in dataset units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl FieldBounds {
    pub const UNIT: FieldBounds = FieldBounds { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0 };

    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self, DataError> {
        let b = Self { x_min, x_max, y_min, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max].iter().all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(DataError::Bounds(*self));
        }
        Ok(())
    }

    /// Boundary-inclusive containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn clamp(&self, x: f64, y: f64) -> (f64, f64) {
        (x.clamp(self.x_min, self.x_max), y.clamp(self.y_min, self.y_max))
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

/// Canonical domain labels; anything else must be `synthetic-<name>`.
pub const KNOWN_DOMAINS: [&str; 3] = ["basketball", "football", "soccer"];

pub fn validate_domain(domain: &str) -> Result<(), DataError> {
    let ok = KNOWN_DOMAINS.contains(&domain)
        || domain.strip_prefix("synthetic-").is_some_and(|rest| !rest.is_empty());
    if ok {
        Ok(())
    } else {
        Err(DataError::Invalid(format!("unknown domain `{domain}` (expected basketball, football, soccer or synthetic-<name>)")))
    }
}

/// One multi-agent sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub domain: String,
    pub roles: Vec<Role>,
    pub teams: Vec<Team>,
    /// `N × T × 2`, row-major.
    pub positions: Vec<f64>,
    /// `N × T`, 1 = observed.
    pub mask: Vec<u8>,
    steps: usize,
}

impl SceneSequence {
    pub fn new(
        domain: impl Into<String>,
        roles: Vec<Role>,
        teams: Vec<Team>,
        positions: Vec<f64>,
        mask: Vec<u8>,
        steps: usize,
    ) -> Result<Self, DataError> {
        let seq = Self { domain: domain.into(), roles, teams, positions, mask, steps };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.roles.len();
        let t = self.steps;
        validate_domain(&self.domain)?;
        if n == 0 || t == 0 {
            return Err(DataError::Invalid("empty scene".into()));
        }
        if self.teams.len() != n {
            return Err(DataError::Invalid(format!("{} teams for {n} agents", self.teams.len())));
        }
        if self.positions.len() != n * t * 2 {
            return Err(DataError::Invalid(format!("{} coordinates for {n} agents × {t} steps", self.positions.len())));
        }
        if self.mask.len() != n * t {
            return Err(DataError::Invalid(format!("{} mask entries for {n} agents × {t} steps", self.mask.len())));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(DataError::Invalid("mask values must be 0 or 1".into()));
        }
        if self.positions.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite coordinate".into()));
        }
        let balls = self.roles.iter().filter(|r| **r == Role::Ball).count();
        if balls != 1 {
            return Err(DataError::Invalid(format!("expected exactly one ball, found {balls}")));
        }
        for i in 0..n {
            if !self.agent_mask(i).contains(&1) {
                return Err(DataError::Invalid(format!("agent {i} has no observed step")));
            }
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.roles.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn xy(&self, agent: usize, t: usize) -> [f64; 2] {
        let o = (agent * self.steps + t) * 2;
        [self.positions[o], self.positions[o + 1]]
    }

    /// `T × 2` slice for one agent.
    pub fn trajectory(&self, agent: usize) -> &[f64] {
        &self.positions[agent * self.steps * 2..(agent + 1) * self.steps * 2]
    }

    pub fn agent_mask(&self, agent: usize) -> &[u8] {
        &self.mask[agent * self.steps..(agent + 1) * self.steps]
    }

    pub fn observed(&self, agent: usize, t: usize) -> bool {
        self.mask[agent * self.steps + t] == 1
    }

    pub fn missing_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 0).count()
    }

    /// Same scene with a new mask and the masked coordinates zeroed.
    pub fn masked(&self, mask: Vec<u8>) -> Result<Self, DataError> {
        let positions = apply_mask(&self.positions, &mask)?;
        Self::new(self.domain.clone(), self.roles.clone(), self.teams.clone(), positions, mask, self.steps)
    }
}

/// A collection of scenes sharing units and field bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<SceneSequence>,
    pub bounds: FieldBounds,
    pub units: String,
    /// Bounds before normalization, when the dataset was normalized in memory.
    pub source_bounds: Option<FieldBounds>,
}

pub const NORMALIZED_UNITS: &str = "normalized";

impl Dataset {
    pub fn new(sequences: Vec<SceneSequence>, bounds: FieldBounds, units: impl Into<String>) -> Self {
        Self { sequences, bounds, units: units.into(), source_bounds: None }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.units == NORMALIZED_UNITS && self.bounds == FieldBounds::UNIT
    }

    /// Sequence count per domain label.
    pub fn domain_histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for s in &self.sequences {
            *h.entry(s.domain.clone()).or_insert(0) += 1;
        }
        h
    }

    pub fn domains(&self) -> Vec<String> {
        self.domain_histogram().into_keys().collect()
    }

    /// Common `T` of all sequences, if they agree.
    pub fn steps(&self) -> Option<usize> {
        let t = self.sequences.first()?.steps();
        self.sequences.iter().all(|s| s.steps() == t).then_some(t)
    }

    pub fn filter_domain(&self, domain: &str) -> Dataset {
        Dataset {
            sequences: self.sequences.iter().filter(|s| s.domain == domain).cloned().collect(),
            bounds: self.bounds,
            units: self.units.clone(),
            source_bounds: self.source_bounds,
        }
    }
}

/// Maps every observed coordinate into the unit square.
pub fn normalize(dataset: &Dataset) -> Result<Dataset, DataError> {
    dataset.bounds.validate()?;
    if dataset.is_normalized() {
        return Ok(dataset.clone());
    }
    let b = dataset.bounds;
    let sequences = dataset
        .sequences
        .iter()
        .map(|s| {
            let mut out = s.clone();
            transform_observed(&mut out, |x, y| ((x - b.x_min) / b.width(), (y - b.y_min) / b.height()));
            out
        })
        .collect();
    Ok(Dataset { sequences, bounds: FieldBounds::UNIT, units: NORMALIZED_UNITS.into(), source_bounds: Some(b) })
}

/// Inverse of [`normalize`]; needs the source bounds recorded by it.
pub fn denormalize(dataset: &Dataset) -> Result<Dataset, DataError> {
    let b = dataset
        .source_bounds
        .ok_or_else(|| DataError::Invalid("dataset carries no source bounds to denormalize to".into()))?;
    b.validate()?;
    let sequences = dataset
        .sequences
        .iter()
        .map(|s| {
            let mut out = s.clone();
            transform_observed(&mut out, |x, y| (x * b.width() + b.x_min, y * b.height() + b.y_min));
            out
        })
        .collect();
    Ok(Dataset { sequences, bounds: b, units: "denormalized".into(), source_bounds: None })
}

fn transform_observed(seq: &mut SceneSequence, f: impl Fn(f64, f64) -> (f64, f64)) {
    for (k, m) in seq.mask.iter().enumerate() {
        if *m == 1 {
            let (x, y) = f(seq.positions[2 * k], seq.positions[2 * k + 1]);
            seq.positions[2 * k] = x;
            seq.positions[2 * k + 1] = y;
        }
    }
}

/// Concatenates normalized datasets, keeping each sequence's domain label.
pub fn merge_unified(datasets: &[Dataset]) -> Result<Dataset, DataError> {
    let mut sequences = Vec::with_capacity(datasets.iter().map(Dataset::len).sum());
    for d in datasets {
        if !d.is_normalized() {
            return Err(DataError::NotNormalized(d.units.clone()));
        }
        sequences.extend(d.sequences.iter().cloned());
    }
    Ok(Dataset::new(sequences, FieldBounds::UNIT, NORMALIZED_UNITS))
}
