//! Degeneration probe: how much a conditional predictor still depends on
//! its history after training on noisy histories.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_batch, AttackConfig, AttackKind, Targets, ThreatModel};
use crate::predictor::checkpoint::Model;
use crate::predictor::{predict_batch, Arch, Batch, Family, Predictor, PredictorError};
use crate::scene::generate::{generate_dataset, GenConfig};
use crate::scene::{Point, Scene, SceneError, Split};
use crate::training::{epoch_batches, TrainConfig, TrainError, Trainer};
use crate::{seed, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error("degenerate probe set: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    SaltPepper,
    Adversarial,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::SaltPepper => "salt_pepper",
            NoiseKind::Adversarial => "adversarial",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = ProbeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "salt_pepper" => Ok(NoiseKind::SaltPepper),
            "adversarial" => Ok(NoiseKind::Adversarial),
            _ => Err(ProbeError::Config(format!("unknown noise kind {s:?}"))),
        }
    }
}

/// Replaces each coordinate with probability `p` by `±magnitude`, the sign
/// a fair coin.
pub fn salt_pepper(x: &Tensor, p: f64, seed: u64, magnitude: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ProbeError::Config(format!("salt-and-pepper probability {p} outside [0, 1]")));
    }
    let mut rng = seed::rng(seed);
    let data = x
        .data()
        .iter()
        .map(|&v| {
            if rng.random_bool(p) {
                if rng.random_bool(0.5) { magnitude } else { -magnitude }
            } else {
                v
            }
        })
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), data).expect("same shape"))
}

/// Future of agent 0 relative to its last observed position.
pub fn focal_displacement(scene: &Scene) -> Vec<Point> {
    let last = *scene.history()[0].last().expect("non-empty history");
    scene.future()[0].iter().map(|p| [p[0] - last[0], p[1] - last[1]]).collect()
}

fn ade(a: &[Point], b: &[Point]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1])).sum::<f64>() / a.len() as f64
}

/// Fraction of samples closer (ADE) to their own scene's target than to
/// every other target. `samples[i]` holds the draws conditioned on scene i.
pub fn retrieval_score(samples: &[Vec<Vec<Point>>], targets: &[Vec<Point>]) -> Result<f64> {
    let m = targets.len();
    if m < 2 {
        return Err(ProbeError::Config(format!("need at least 2 probe scenes, got {m}")));
    }
    if samples.len() != m {
        return Err(ProbeError::Config(format!("{} sample sets for {m} targets", samples.len())));
    }
    for i in 0..m {
        for j in i + 1..m {
            if ade(&targets[i], &targets[j]) == 0.0 {
                return Err(ProbeError::Degenerate(format!("scenes {i} and {j} share a target")));
            }
        }
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (i, draws) in samples.iter().enumerate() {
        for s in draws {
            let own = ade(s, &targets[i]);
            if (0..m).filter(|&j| j != i).all(|j| own < ade(s, &targets[j])) {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(ProbeError::Config("no samples".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Binomial standard deviation of the score under chance, `p = 1/M`.
pub fn chance_sigma(m: usize, k: usize) -> f64 {
    let p = 1.0 / m as f64;
    (p * (1.0 - p) / (m * k) as f64).sqrt()
}

/// Retrieval accuracy of `k` draws per scene, compared in each scene's
/// own displacement frame so a decoder that ignores the history scores
/// chance.
pub fn condition_dependence_score<P: Predictor + ?Sized>(model: &P, scenes: &[&Scene], k: usize, seed: u64) -> Result<f64> {
    if scenes.len() < 2 {
        return Err(ProbeError::Config(format!("need at least 2 probe scenes, got {}", scenes.len())));
    }
    if k == 0 {
        return Err(ProbeError::Config("k must be >= 1".into()));
    }
    let b = Batch::new(scenes)?;
    let preds = predict_batch(model, &b, &b.x, k, seed)?;
    let samples: Vec<Vec<Vec<Point>>> = scenes
        .iter()
        .zip(&preds)
        .map(|(s, p)| {
            let last = *s.history()[0].last().expect("non-empty history");
            p.candidates().iter().map(|c| c[0].iter().map(|q| [q[0] - last[0], q[1] - last[1]]).collect()).collect()
        })
        .collect();
    let targets: Vec<Vec<Point>> = scenes.iter().map(|s| focal_displacement(s)).collect();
    retrieval_score(&samples, &targets)
}

/// Zeroes every context-encoder parameter, leaving a model whose output
/// no longer depends on the history beyond the last position.
pub fn zero_context(model: &mut Model) {
    let prefixes = model.encoder_prefixes();
    let names: Vec<String> = model.params().names().filter(|n| prefixes.iter().any(|p| n.starts_with(p))).cloned().collect();
    for n in names {
        let t = model.params_mut().get_mut(&n).expect("listed name");
        *t = Tensor::zeros(t.shape());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub family: Family,
    /// Probe scenes.
    pub m: usize,
    /// Draws per probe scene.
    pub k: usize,
    pub replicates: usize,
    /// Noise levels in [0, 1]: the flip probability p for salt-and-pepper,
    /// ε = magnitude·√p for adversarial noise. Both then carry the same
    /// expected squared perturbation per coordinate, about p·magnitude².
    pub levels: Vec<f64>,
    pub magnitude: f64,
    pub train_scenes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    pub embed: usize,
    pub inner_steps: usize,
}

/// Fewer optimizer steps than this per run gets the report flagged.
pub const MIN_TRAIN_STEPS: usize = 100;

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            family: Family::Cvae,
            m: 32,
            k: 10,
            replicates: 3,
            levels: vec![0.0, 0.1, 0.3, 0.6],
            magnitude: 10.0,
            train_scenes: 256,
            epochs: 30,
            batch_size: 32,
            lr: 3e-3,
            hidden: 32,
            embed: 16,
            inner_steps: 6,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ProbeError::Config(m));
        if self.m < 2 {
            return bad(format!("need at least 2 probe scenes, got {}", self.m));
        }
        if self.k == 0 || self.replicates == 0 || self.train_scenes == 0 || self.batch_size == 0 {
            return bad("k, replicates, train_scenes and batch_size must be >= 1".into());
        }
        if self.levels.is_empty() {
            return bad("no noise levels".into());
        }
        if self.levels.windows(2).any(|w| !(w[0] < w[1])) {
            return bad(format!("levels must be strictly increasing: {:?}", self.levels));
        }
        if self.levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return bad(format!("levels must lie in [0, 1]: {:?}", self.levels));
        }
        if !(self.magnitude > 0.0) {
            return bad("magnitude must be > 0".into());
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be >= 1".into());
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        Arch { hidden: self.hidden, embed: self.embed, ..Arch::new(self.family, 4, 12) }
    }

    pub fn train_config(&self, replicate_seed: u64) -> TrainConfig {
        TrainConfig { epochs: self.epochs, batch_size: self.batch_size, lr: self.lr, seed: replicate_seed, ..TrainConfig::default() }
    }

    pub fn steps_per_run(&self) -> usize {
        self.epochs * self.train_scenes.div_ceil(self.batch_size)
    }
}

pub fn replicate_seed(seed: u64, r: usize) -> u64 {
    seed::derive(seed, "replicate", r as u64)
}

/// Training and probe scenes, shared by every level and replicate.
pub fn probe_data(cfg: &ProbeConfig, seed: u64) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let ds = generate_dataset(
        &GenConfig::default(),
        [(Split::Train, cfg.train_scenes), (Split::Val, 0), (Split::Test, cfg.m)],
        seed::derive(seed, "probe-data", 0),
    )?;
    Ok((ds.scenes(Split::Train).into_iter().cloned().collect(), ds.scenes(Split::Test).into_iter().cloned().collect()))
}

/// ε matched to salt-and-pepper noise of flip probability `level`.
pub fn adversarial_eps(level: f64, magnitude: f64) -> f64 {
    magnitude * level.sqrt()
}

/// Training input for one step: the batch history with the level's noise.
pub fn noisy_history(model: &Model, b: &Batch, kind: NoiseKind, level: f64, cfg: &ProbeConfig, step_seed: u64) -> Result<Tensor> {
    if level == 0.0 {
        return Ok(b.x.clone());
    }
    match kind {
        NoiseKind::SaltPepper => salt_pepper(&b.x, level, step_seed, cfg.magnitude),
        NoiseKind::Adversarial => {
            let threat = ThreatModel { eps: adversarial_eps(level, cfg.magnitude), targets: Targets::All };
            let acfg = AttackConfig { steps: cfg.inner_steps, seed: step_seed, k: cfg.k, ..AttackConfig::default() };
            Ok(attack_batch(model, b, AttackKind::Deterministic, &threat, &acfg)?.0)
        }
    }
}

/// Trains a fresh model at one noise level and returns it.
pub fn train_noisy(cfg: &ProbeConfig, train: &[&Scene], kind: NoiseKind, level: f64, replicate_seed: u64) -> Result<Model> {
    let mut model = Model::new(cfg.arch(), seed::derive(replicate_seed, "init", 0))?;
    let tcfg = cfg.train_config(replicate_seed);
    let mut trainer = Trainer::new(tcfg.clone())?;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        for scenes in epoch_batches(train, &[], &tcfg, epoch) {
            let b = Batch::new(&scenes)?;
            let x = noisy_history(&model, &b, kind, level, cfg, seed::derive(replicate_seed, kind.as_str(), step))?;
            trainer.step_on(&mut model, &b, &x)?;
            step += 1;
        }
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: NoiseKind,
    pub levels: Vec<f64>,
    /// Mean score over replicates, one per level.
    pub scores: Vec<f64>,
    /// Sample variance over replicates, one per level.
    pub variances: Vec<f64>,
    /// `[level][replicate]`.
    pub replicate_scores: Vec<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub chance: f64,
    pub chance_sigma: f64,
    pub warnings: Vec<String>,
}

pub const PROBE_HEADER: &str = "noise_kind,level,seed,score";

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(PROBE_HEADER);
        s.push('\n');
        for (l, row) in self.levels.iter().zip(&self.replicate_scores) {
            for (seed, score) in self.seeds.iter().zip(row) {
                s.push_str(&format!("{},{},{},{}\n", self.kind.as_str(), l, seed, score));
            }
        }
        s
    }

    /// Spearman rank correlation between level and score for one replicate.
    pub fn spearman(&self, replicate: usize) -> f64 {
        let ys: Vec<f64> = self.replicate_scores.iter().map(|r| r[replicate]).collect();
        let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
        spearman(&xs, &ys)
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ties share the mean rank
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            r[t] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman's ρ with mid-ranks for ties; NaN when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Trains one fresh model per level and replicate on noisy histories and
/// scores each on the clean probe scenes.
pub fn run_probe(cfg: &ProbeConfig, kind: NoiseKind, seed: u64) -> Result<ProbeReport> {
    cfg.validate()?;
    let (train, probe) = probe_data(cfg, seed)?;
    let train: Vec<&Scene> = train.iter().collect();
    let probe: Vec<&Scene> = probe.iter().collect();
    let seeds: Vec<u64> = (0..cfg.replicates).map(|r| replicate_seed(seed, r)).collect();
    let mut replicate_scores = Vec::with_capacity(cfg.levels.len());
    for &level in &cfg.levels {
        let mut row = Vec::with_capacity(seeds.len());
        for &rs in &seeds {
            let model = train_noisy(cfg, &train, kind, level, rs)?;
            let score = condition_dependence_score(&model, &probe, cfg.k, seed::derive(rs, "score", 0))?;
            log::info!("probe {} level {level} seed {rs}: {score:.4}", kind.as_str());
            row.push(score);
        }
        replicate_scores.push(row);
    }
    let n = seeds.len() as f64;
    let scores: Vec<f64> = replicate_scores.iter().map(|r| r.iter().sum::<f64>() / n).collect();
    let variances: Vec<f64> = replicate_scores
        .iter()
        .zip(&scores)
        .map(|(r, m)| if r.len() < 2 { f64::NAN } else { r.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1.0) })
        .collect();
    let mut warnings = Vec::new();
    if cfg.steps_per_run() < MIN_TRAIN_STEPS {
        warnings.push(format!("train budget of {} steps per run is below {MIN_TRAIN_STEPS}", cfg.steps_per_run()));
    }
    if cfg.replicates < 2 {
        warnings.push("one replicate per level: no variance estimate".into());
    }
    let spread = scores.first().unwrap() - scores.last().unwrap();
    let worst_sd = variances.iter().filter(|v| v.is_finite()).fold(0.0f64, |a, &v| a.max(v.sqrt()));
    if worst_sd > spread.abs() {
        warnings.push(format!("replicate spread {worst_sd:.4} exceeds the level effect {spread:.4}"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ProbeReport {
        kind,
        levels: cfg.levels.clone(),
        scores,
        variances,
        replicate_scores,
        seeds,
        chance: 1.0 / cfg.m as f64,
        chance_sigma: chance_sigma(cfg.m, cfg.k),
        warnings,
    })
}
