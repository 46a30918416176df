//! Experiment configuration: defaults, file and flag overrides, seed
//! fan-out and the digest stamped on every artifact.

use std::path::{Path, PathBuf};

use advtraj_core::attacks::{AttackConfig, AttackKind};
use advtraj_core::augmentation::AugConfig;
use advtraj_core::planner::PlannerConfig;
use advtraj_core::predictor::{Arch, Family};
use advtraj_core::probe::{NoiseKind, ProbeConfig};
use advtraj_core::scene::generate::GenConfig;
use advtraj_core::seed;
use advtraj_core::training::{EvalPlan, Regime, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: u32 = 1;
pub const OUT_ENV: &str = "ROBUSTTRAJ_OUT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Field { path: String, msg: String },
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config {path} is not valid JSON: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("bad override {0:?}: expected key.path=value")]
    Override(String),
}

fn field(path: &str, msg: impl ToString) -> ConfigError {
    ConfigError::Field { path: path.to_string(), msg: msg.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: GenConfig,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { generator: GenConfig::default(), train: 512, val: 0, test: 128, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: Family,
    pub hidden: usize,
    pub embed: usize,
    pub latent: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = Arch::new(Family::Cvae, 4, 12);
        Self { family: a.kind, hidden: a.hidden, embed: a.embed, latent: a.latent }
    }
}

/// One training run per entry and replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunEntry {
    pub regime: Regime,
    #[serde(default)]
    pub augmentation: bool,
}

impl RunEntry {
    pub fn label(&self) -> String {
        if self.augmentation { format!("{}+aug", self.regime.as_str()) } else { self.regime.as_str().to_string() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub config: AugConfig,
    pub seed: u64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self { config: AugConfig::default(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub eps: f64,
    pub config: AttackConfig,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self { kind: AttackKind::Deterministic, eps: 0.5, config: AttackConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub planner: PlannerConfig,
    /// ε of the sequence attack on the designated adversary.
    pub eps: f64,
    pub attack: AttackConfig,
    pub suite_seed: u64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { planner: PlannerConfig::default(), eps: 1.0, attack: AttackConfig::default(), suite_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub config: ProbeConfig,
    pub kinds: Vec<NoiseKind>,
    pub seed: u64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self { config: ProbeConfig::default(), kinds: vec![NoiseKind::SaltPepper, NoiseKind::Adversarial], seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub format_version: u32,
    /// Global seed; every module seed below is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Shared by every run; `runs` sets the regime and augmentation flag.
    pub train: TrainConfig,
    pub runs: Vec<RunEntry>,
    pub replicates: usize,
    pub augment: AugmentSection,
    pub eval: EvalPlan,
    pub attack: AttackSection,
    pub simulate: SimulateSection,
    pub probe: ProbeSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = Self {
            format_version: FORMAT_VERSION,
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            runs: vec![
                RunEntry { regime: Regime::Clean, augmentation: false },
                RunEntry { regime: Regime::NaiveAt, augmentation: false },
                RunEntry { regime: Regime::Robusttraj, augmentation: false },
                RunEntry { regime: Regime::Robusttraj, augmentation: true },
            ],
            replicates: 1,
            augment: AugmentSection::default(),
            eval: EvalPlan::default(),
            attack: AttackSection::default(),
            simulate: SimulateSection::default(),
            probe: ProbeSection::default(),
        };
        c.apply_seeds();
        c
    }
}

/// Module seed paths and the labels they are derived under.
const SEED_PATHS: &[(&str, &str)] = &[
    ("data.seed", "gen-data"),
    ("augment.seed", "augment"),
    ("train.seed", "train"),
    ("eval.eval.seed", "eval"),
    ("attack.config.seed", "attack"),
    ("simulate.planner.seed", "planner"),
    ("simulate.attack.seed", "simulate-attack"),
    ("simulate.suite_seed", "suite"),
    ("probe.seed", "probe"),
];

impl ExperimentConfig {
    fn apply_seeds(&mut self) {
        let g = self.seed;
        let d = |label: &str| seed::derive(g, label, 0);
        self.data.seed = d("gen-data");
        self.augment.seed = d("augment");
        self.train.seed = d("train");
        self.eval.eval.seed = d("eval");
        self.attack.config.seed = d("attack");
        self.simulate.planner.seed = d("planner");
        self.simulate.attack.seed = d("simulate-attack");
        self.simulate.suite_seed = d("suite");
        self.probe.seed = d("probe");
    }

    pub fn arch(&self) -> Arch {
        let g = &self.data.generator;
        Arch {
            hidden: self.model.hidden,
            embed: self.model.embed,
            latent: self.model.latent,
            ..Arch::new(self.model.family, g.history_len, g.future_len)
        }
    }

    /// Seed of replicate `r`, shared by every regime so runs differ only
    /// in their objective.
    pub fn replicate_seed(&self, r: usize) -> u64 {
        seed::derive(self.train.seed, "replicate", r as u64)
    }

    pub fn run_id(&self, entry: &RunEntry, r: usize) -> String {
        format!("{}_r{r}", entry.label())
    }

    pub fn train_config(&self, entry: &RunEntry, r: usize) -> TrainConfig {
        TrainConfig { regime: entry.regime, augmentation: entry.augmentation, seed: self.replicate_seed(r), ..self.train.clone() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.format_version != FORMAT_VERSION {
            return Err(field("format_version", format!("unsupported version {}, expected {FORMAT_VERSION}", self.format_version)));
        }
        self.data.generator.validate().map_err(|e| field("data.generator", e))?;
        if self.data.train == 0 || self.data.test == 0 {
            return Err(field("data", "train and test splits must be non-empty"));
        }
        self.arch().validate().map_err(|e| field("model", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        if self.runs.is_empty() {
            return Err(field("runs", "at least one run is required"));
        }
        if self.replicates == 0 {
            return Err(field("replicates", "must be >= 1"));
        }
        self.augment.config.validate().map_err(|e| field("augment.config", e))?;
        if self.eval.eps.iter().any(|e| !(*e >= 0.0)) {
            return Err(field("eval.eps", "must be >= 0"));
        }
        if !(self.attack.eps >= 0.0) {
            return Err(field("attack.eps", "must be >= 0"));
        }
        if self.attack.config.steps == 0 {
            return Err(field("attack.config.steps", "must be >= 1"));
        }
        self.simulate.planner.validate().map_err(|e| field("simulate.planner", e))?;
        if self.simulate.planner.horizon != self.data.generator.future_len {
            return Err(field("simulate.planner.horizon", "must equal data.generator.future_len"));
        }
        if !(self.simulate.eps >= 0.0) {
            return Err(field("simulate.eps", "must be >= 0"));
        }
        self.probe.config.validate().map_err(|e| field("probe.config", e))?;
        if self.probe.kinds.is_empty() {
            return Err(field("probe.kinds", "at least one noise kind is required"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical (key-sorted) JSON of this config.
    pub fn digest(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(serde_json::to_string(&v).expect("value serializes").as_bytes()))
    }

    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string_pretty(&v).expect("value serializes")
    }
}

fn get<'a>(v: &'a Value, path: &[&str]) -> Option<&'a Value> {
    path.iter().try_fold(v, |cur, k| cur.get(*k))
}

fn set(v: &mut Value, path: &[&str], leaf: Value) {
    let mut cur = v;
    for k in &path[..path.len() - 1] {
        if !cur.get(*k).is_some_and(Value::is_object) {
            cur[*k] = Value::Object(Default::default());
        }
        cur = cur.get_mut(*k).unwrap();
    }
    cur[path[path.len() - 1]] = leaf;
}

/// Leaves of `user` with their dotted paths, checked against the shape of
/// `reference`: unknown keys are rejected, and an object meets an object
/// only where the reference has one.
fn leaves(user: &Value, reference: &Value, prefix: &str, out: &mut Vec<(String, Value)>) -> Result<(), ConfigError> {
    match (user, reference) {
        (Value::Object(u), Value::Object(r)) => {
            for (k, v) in u {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match r.get(k) {
                    Some(rv) => leaves(v, rv, &path, out)?,
                    None => return Err(field(&path, "unknown field")),
                }
            }
            Ok(())
        }
        (_, Value::Object(_)) if !prefix.is_empty() => Err(field(prefix, "expected an object")),
        (_, Value::Object(_)) => Err(field("<root>", "expected a JSON object")),
        _ => {
            out.push((prefix.to_string(), user.clone()));
            Ok(())
        }
    }
}

/// Parses `key.path=value`; the value is JSON when it parses as JSON and
/// a string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Override(s.to_string()))?;
    if k.is_empty() {
        return Err(ConfigError::Override(s.to_string()));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

pub fn read_config_file(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.display().to_string(), source: e })?;
    serde_json::from_str(&text).map_err(|e| ConfigError::Parse { path: path.display().to_string(), source: e })
}

/// Applies `overrides` (in order, later wins) over `file`, then the output
/// directory from the environment when given, fills defaults, derives the
/// module seeds and validates. Errors name the offending field.
pub fn resolve_config(file: Option<&Value>, overrides: &[(String, Value)], env_out: Option<&str>) -> Result<ExperimentConfig, ConfigError> {
    let mut user = file.cloned().unwrap_or_else(|| Value::Object(Default::default()));
    if !user.is_object() {
        return Err(field("<root>", "expected a JSON object"));
    }
    for (k, v) in overrides {
        let path: Vec<&str> = k.split('.').collect();
        set(&mut user, &path, v.clone());
    }
    if let Some(out) = env_out {
        user["out_dir"] = Value::String(out.to_string());
    }
    let reference = serde_json::to_value(ExperimentConfig::default()).expect("config serializes");
    let mut items = Vec::new();
    leaves(&user, &reference, "", &mut items)?;
    // apply one leaf at a time so a type error points at its field
    let mut cur = reference;
    for (path, v) in &items {
        let keys: Vec<&str> = path.split('.').collect();
        let mut trial = cur.clone();
        set(&mut trial, &keys, v.clone());
        if let Err(e) = serde_json::from_value::<ExperimentConfig>(trial.clone()) {
            return Err(field(path, e));
        }
        cur = trial;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(cur).map_err(|e| field("<root>", e))?;
    let explicit: Vec<(&str, Option<u64>)> =
        SEED_PATHS.iter().map(|(p, _)| (*p, get(&user, &p.split('.').collect::<Vec<_>>()).and_then(Value::as_u64))).collect();
    cfg.apply_seeds();
    let resolved = serde_json::to_value(&cfg).expect("config serializes");
    for (p, given) in explicit {
        if let Some(given) = given {
            let want = get(&resolved, &p.split('.').collect::<Vec<_>>()).and_then(Value::as_u64).expect("seed path exists");
            if given != want {
                return Err(field(p, format!("module seeds derive from the global `seed` (expected {want}, got {given}); set `seed` instead")));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
