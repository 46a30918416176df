//! Scenes, datasets, synthetic generation and evaluation metrics.

pub mod generate;
pub mod geometry;
pub mod io;
pub mod metrics;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{BicycleState, ControlSequence};
pub use geometry::Point;
pub use metrics::{Metrics, PredictionSet};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("validation failed for `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("line {line}: unsupported format_version {found} (expected {expected})")]
    FormatVersion { line: usize, found: i64, expected: u32 },
    #[error("line {line}: schema error in `{field}`: {message}")]
    Schema { line: usize, field: String, message: String },
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    Shape { what: &'static str, expected: String, found: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn invalid(field: &str, message: impl Into<String>) -> SceneError {
    SceneError::Validation { field: field.to_string(), message: message.into() }
}

/// Controls that reproduce an augmented agent's trajectory exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentControls {
    pub init: BicycleState,
    pub controls: ControlSequence,
}

/// One scene: N agents with H observed and T future positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    dt: f64,
    history: Vec<Vec<Point>>,
    future: Vec<Vec<Point>>,
    lanes: Vec<Vec<Point>>,
    controls: Option<Vec<Option<AgentControls>>>,
}

impl Scene {
    pub fn new(dt: f64, history: Vec<Vec<Point>>, future: Vec<Vec<Point>>, lanes: Vec<Vec<Point>>) -> Result<Self, SceneError> {
        let scene = Self { dt, history, future, lanes, controls: None };
        scene.validate()?;
        Ok(scene)
    }

    pub fn with_controls(mut self, controls: Vec<Option<AgentControls>>) -> Result<Self, SceneError> {
        if controls.len() != self.num_agents() {
            return Err(invalid("controls", format!("{} entries for {} agents", controls.len(), self.num_agents())));
        }
        self.controls = Some(controls);
        Ok(self)
    }

    fn validate(&self) -> Result<(), SceneError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        if self.history.is_empty() {
            return Err(invalid("history", "scene needs at least one agent"));
        }
        if self.future.len() != self.history.len() {
            return Err(invalid("future", format!("{} agents, history has {}", self.future.len(), self.history.len())));
        }
        let h = self.history[0].len();
        let t = self.future[0].len();
        if h < 2 {
            return Err(invalid("history", format!("history_len must be >= 2, got {h}")));
        }
        if t < 1 {
            return Err(invalid("future", "future_len must be >= 1, got 0"));
        }
        for (i, (hist, fut)) in self.history.iter().zip(&self.future).enumerate() {
            if hist.len() != h {
                return Err(invalid("history", format!("agent {i} has {} steps, expected {h}", hist.len())));
            }
            if fut.len() != t {
                return Err(invalid("future", format!("agent {i} has {} steps, expected {t}", fut.len())));
            }
            if hist.iter().chain(fut).flatten().any(|v| !v.is_finite()) {
                return Err(invalid("history", format!("agent {i} has non-finite positions")));
            }
        }
        for (j, lane) in self.lanes.iter().enumerate() {
            if lane.iter().flatten().any(|v| !v.is_finite()) {
                return Err(invalid("lanes", format!("lane {j} has non-finite vertices")));
            }
            if !geometry::is_simple_polygon(lane) {
                return Err(invalid("lanes", format!("lane {j} is not a simple polygon")));
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn num_agents(&self) -> usize {
        self.history.len()
    }

    pub fn history_len(&self) -> usize {
        self.history[0].len()
    }

    pub fn future_len(&self) -> usize {
        self.future[0].len()
    }

    pub fn history(&self) -> &[Vec<Point>] {
        &self.history
    }

    pub fn future(&self) -> &[Vec<Point>] {
        &self.future
    }

    pub fn lanes(&self) -> &[Vec<Point>] {
        &self.lanes
    }

    pub fn controls(&self) -> Option<&[Option<AgentControls>]> {
        self.controls.as_deref()
    }

    /// History followed by future for agent `i`.
    pub fn trajectory(&self, i: usize) -> Vec<Point> {
        let mut out = self.history[i].clone();
        out.extend_from_slice(&self.future[i]);
        out
    }

    /// Row-major N × 2H history values.
    pub fn history_flat(&self) -> Vec<f64> {
        self.history.iter().flatten().flatten().copied().collect()
    }

    /// Row-major N × 2T future values.
    pub fn future_flat(&self) -> Vec<f64> {
        self.future.iter().flatten().flatten().copied().collect()
    }

    /// Largest per-step displacement over all agents and the full horizon.
    pub fn max_step_displacement(&self) -> f64 {
        (0..self.num_agents())
            .flat_map(|i| {
                let traj = self.trajectory(i);
                traj.windows(2).map(|w| geometry::dist(w[0], w[1])).collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }

    /// Same lanes and dt with new trajectories.
    pub fn with_trajectories(&self, history: Vec<Vec<Point>>, future: Vec<Vec<Point>>) -> Result<Self, SceneError> {
        Scene::new(self.dt, history, future, self.lanes.clone())
    }

    /// Scene whose history values are replaced by the flat N × 2H slice.
    pub fn with_history_flat(&self, flat: &[f64]) -> Result<Self, SceneError> {
        let (n, h) = (self.num_agents(), self.history_len());
        if flat.len() != n * h * 2 {
            return Err(SceneError::Shape { what: "history", expected: format!("{}", n * h * 2), found: format!("{}", flat.len()) });
        }
        let history = (0..n)
            .map(|i| (0..h).map(|t| [flat[(i * h + t) * 2], flat[(i * h + t) * 2 + 1]]).collect())
            .collect();
        self.with_trajectories(history, self.future.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
    Augmented,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: u64,
    pub split: Split,
    pub provenance: Provenance,
    pub scene: Scene,
}

/// Ordered scenes, each carrying exactly one split label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Self {
        Self { records }
    }

    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn scenes(&self, split: Split) -> Vec<&Scene> {
        self.split(split).map(|r| &r.scene).collect()
    }

    pub fn extend(&mut self, other: Dataset) {
        self.records.extend(other.records);
    }
}
