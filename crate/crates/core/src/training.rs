//! Training regimes (clean, naive adversarial training, RobustTraj) and the
//! evaluation harness.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_batch, scene_norms, AttackConfig, AttackKind, ThreatModel};
use crate::nn::{Adam, AdamConfig, Bound};
use crate::predictor::checkpoint::{self, Model};
use crate::predictor::{cgan, predict_batch, Arch, Batch, Family, Predictor, PredictorError};
use crate::scene::io::{metrics_csv, MetricsRow};
use crate::scene::metrics::evaluate as scene_metrics;
use crate::scene::{Metrics, Scene, SceneError, Split};
use crate::scene::io::METRICS_HEADER;
use crate::{seed, Graph, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at epoch {epoch} step {step}{}", checkpoint.as_ref().map(|p| format!(", state saved to {}", p.display())).unwrap_or_default())]
    NonFinite { epoch: usize, step: usize, loss: f64, checkpoint: Option<PathBuf> },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Clean,
    NaiveAt,
    Robusttraj,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Clean => "clean",
            Regime::NaiveAt => "naive_at",
            Regime::Robusttraj => "robusttraj",
        }
    }

    /// Attack used by the inner maximization, if any.
    pub fn inner_attack(self) -> Option<AttackKind> {
        match self {
            Regime::Clean => None,
            Regime::NaiveAt => Some(AttackKind::Naive),
            Regime::Robusttraj => Some(AttackKind::Deterministic),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub eps: f64,
    pub inner_steps: usize,
    pub beta: f64,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub augmentation: bool,
    /// Share of each batch drawn from the augmented set.
    pub aug_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Clean,
            eps: 0.5,
            inner_steps: 2,
            beta: 0.1,
            k: 5,
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            augmentation: false,
            aug_ratio: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if !(self.eps >= 0.0) {
            return bad("eps must be >= 0");
        }
        if self.regime != Regime::Clean && self.inner_steps == 0 {
            return bad("adversarial regimes need inner_steps >= 1");
        }
        if self.k == 0 || self.batch_size == 0 {
            return bad("k and batch_size must be >= 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if !(0.0..=1.0).contains(&self.aug_ratio) {
            return bad("aug_ratio must lie in [0, 1]");
        }
        Ok(())
    }

    fn inner_config(&self, step_seed: u64) -> AttackConfig {
        AttackConfig { steps: self.inner_steps.max(1), seed: step_seed, k: self.k, ..AttackConfig::default() }
    }
}

/// `L_clean`: the family's total loss on the unperturbed batch, `[B]`.
pub fn loss_clean(model: &dyn Predictor, g: &mut Graph, p: &Bound, b: &Batch, k: usize, seed: u64) -> Result<Var> {
    let x = g.constant(b.x.clone());
    Ok(model.loss_total(g, p, x, b, k, seed)?)
}

/// `L_reg`: per-scene `‖f(X+δ) − f(X)‖₂` with the perturbed history fixed,
/// `[B]`.
pub fn loss_reg(model: &dyn Predictor, g: &mut Graph, p: &Bound, b: &Batch, x_adv: &Tensor) -> Result<Var> {
    let x0 = g.constant(b.x.clone());
    let x1 = g.constant(x_adv.clone());
    let c0 = model.encode(g, p, x0, b)?;
    let c1 = model.encode(g, p, x1, b)?;
    Ok(scene_norms(g, c1, c0, b)?)
}

/// Batch-mean outer objective of the regime at a fixed perturbed history.
pub fn outer_loss(model: &dyn Predictor, g: &mut Graph, p: &Bound, b: &Batch, x_adv: &Tensor, cfg: &TrainConfig, seed: u64) -> Result<Var> {
    let xa = g.constant(x_adv.clone());
    let adv = model.loss_total(g, p, xa, b, cfg.k, seed)?;
    let per_scene = match cfg.regime {
        Regime::Clean | Regime::NaiveAt => adv,
        Regime::Robusttraj => {
            let clean = loss_clean(model, g, p, b, cfg.k, seed)?;
            let mut s = g.add(adv, clean)?;
            if cfg.beta > 0.0 {
                let reg = loss_reg(model, g, p, b, x_adv)?;
                let reg = g.scale(reg, cfg.beta);
                s = g.add(s, reg)?;
            }
            s
        }
    };
    Ok(g.mean(per_scene)?)
}

/// Perturbed history for the regime's inner maximization; the clean
/// history for the clean regime.
pub fn inner_perturbation(model: &dyn Predictor, b: &Batch, cfg: &TrainConfig, step_seed: u64) -> Result<Tensor> {
    match cfg.regime.inner_attack() {
        None => Ok(b.x.clone()),
        Some(kind) => {
            let (xa, _) = attack_batch(model, b, kind, &ThreatModel::new(cfg.eps), &cfg.inner_config(step_seed))?;
            Ok(xa)
        }
    }
}

/// Optimizer state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    opt: Adam,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub loss: f64,
    pub disc_loss: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
        Ok(Self { cfg, opt, step: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update: inner attack against the pre-step parameters, then a
    /// single gradient step on the outer objective with δ detached. cGANs
    /// first update the discriminator on the same input.
    pub fn step(&mut self, model: &mut Model, b: &Batch) -> Result<StepLog> {
        let s = seed::derive(self.cfg.seed, "step", self.step);
        let x_adv = inner_perturbation(model, b, &self.cfg, seed::derive(s, "inner", 0))?;
        self.step_on(model, b, &x_adv)
    }

    /// One update on a caller-supplied history in place of the inner
    /// attack's output.
    pub fn step_on(&mut self, model: &mut Model, b: &Batch, x_adv: &Tensor) -> Result<StepLog> {
        let s = seed::derive(self.cfg.seed, "step", self.step);
        self.step += 1;
        let disc_loss = match model {
            Model::Cgan(m) => Some(m.disc_step(b, x_adv, self.cfg.k, s, &mut self.opt)?.0),
            Model::Cvae(_) => None,
        };
        let mut g = Graph::new();
        let p = match model.family() {
            Family::Cvae => model.params().bind(&mut g, true),
            Family::Cgan => model.params().bind_partial(&mut g, cgan::GENERATOR),
        };
        let l = outer_loss(model, &mut g, &p, b, x_adv, &self.cfg, s)?;
        let loss = g.scalar(l);
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { epoch: 0, step: self.step as usize - 1, loss, checkpoint: None });
        }
        let grads = p.collect(&g.backward(l).map_err(PredictorError::from)?);
        self.opt.apply(model.params_mut(), &grads);
        Ok(StepLog { loss, disc_loss })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    /// Mean attack-time encoder drift on the probe scenes, when tracked.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub context_drift: Option<f64>,
}

/// Scenes and attack used to track encoder drift after every epoch.
pub struct DriftProbe<'a> {
    pub scenes: &'a [&'a Scene],
    pub eps: f64,
    pub eval: EvalConfig,
}

/// Batches for one epoch: every real scene once in shuffled order, plus
/// augmented scenes filling `aug_ratio` of each batch.
pub fn epoch_batches<'a>(train: &[&'a Scene], aug: &[&'a Scene], cfg: &TrainConfig, epoch: usize) -> Vec<Vec<&'a Scene>> {
    let mut rng = seed::rng_for(cfg.seed, "shuffle", epoch as u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let use_aug = cfg.augmentation && !aug.is_empty();
    let n_aug = if use_aug { (cfg.batch_size as f64 * cfg.aug_ratio).round() as usize } else { 0 };
    let n_real = (cfg.batch_size - n_aug.min(cfg.batch_size - 1)).max(1);
    let mut aug_order: Vec<usize> = (0..aug.len()).collect();
    aug_order.shuffle(&mut rng);
    let mut aug_iter = aug_order.iter().cycle();
    order
        .chunks(n_real)
        .map(|chunk| {
            let mut batch: Vec<&Scene> = chunk.iter().map(|&i| train[i]).collect();
            if use_aug {
                batch.extend((0..n_aug).map(|_| aug[*aug_iter.next().unwrap()]));
            }
            batch
        })
        .collect()
}

/// Trains `model` in place. Checkpoints go to `ckpt_dir/epoch_NNN.json`
/// when given; a non-finite loss saves the current state before failing.
pub fn train(
    model: &mut Model,
    train_scenes: &[&Scene],
    aug: &[&Scene],
    cfg: &TrainConfig,
    probe: Option<&DriftProbe>,
    ckpt_dir: Option<&Path>,
) -> Result<Vec<EpochLog>> {
    let mut trainer = Trainer::new(cfg.clone())?;
    if let Some(dir) = ckpt_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(train_scenes, aug, cfg, epoch);
        for (i, scenes) in batches.iter().enumerate() {
            let b = Batch::new(scenes)?;
            match trainer.step(model, &b) {
                Ok(s) => total += s.loss,
                Err(e) => {
                    let loss = match &e {
                        TrainError::NonFinite { loss, .. } => *loss,
                        TrainError::Predictor(PredictorError::NonFinite(_)) => f64::NAN,
                        _ => return Err(e),
                    };
                    let checkpoint = match ckpt_dir {
                        Some(dir) => {
                            let path = dir.join(format!("failed_epoch_{:03}.json", epoch + 1));
                            checkpoint::save(&path, model)?;
                            Some(path)
                        }
                        None => None,
                    };
                    log::error!("{e}");
                    return Err(TrainError::NonFinite { epoch: epoch + 1, step: i, loss, checkpoint });
                }
            }
        }
        let context_drift = match probe {
            Some(pr) => Some(evaluate(model, pr.scenes, pr.eps, AttackKind::Deterministic, &pr.eval)?.context_drift),
            None => None,
        };
        let log = EpochLog { epoch: epoch + 1, mean_loss: total / batches.len().max(1) as f64, steps: batches.len(), context_drift };
        log::info!("{} epoch {}: loss {:.5}", cfg.regime.as_str(), log.epoch, log.mean_loss);
        logs.push(log);
        if let Some(dir) = ckpt_dir {
            checkpoint::save(&dir.join(format!("epoch_{:03}.json", epoch + 1)), model)?;
        }
    }
    Ok(logs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub steps: usize,
    pub seed: u64,
    /// Scenes per attack batch.
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 5, steps: 20, seed: 0, batch: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metrics: Metrics,
    /// Mean per-scene `‖f(X+δ) − f(X)‖₂` at the evaluated perturbation.
    pub context_drift: f64,
    pub per_scene: Vec<Metrics>,
}

/// Attacks every scene (unless `kind` is none), samples K predictions and
/// averages the metrics. Prediction noise depends only on the scene chunk,
/// so clean and attacked runs see the same latent draws. The attacker may
/// always fall back to δ = 0, so a scene whose attacked ADE comes out below
/// its clean ADE is scored at the clean point.
pub fn evaluate(model: &dyn Predictor, scenes: &[&Scene], eps: f64, kind: AttackKind, cfg: &EvalConfig) -> Result<EvalResult> {
    let mut per_scene = Vec::with_capacity(scenes.len());
    let mut drift = 0.0;
    for (ci, chunk) in scenes.chunks(cfg.batch.max(1)).enumerate() {
        let b = Batch::new(chunk)?;
        let pred_seed = seed::derive(cfg.seed, "eval-sample", ci as u64);
        let clean = predict_batch(model, &b, &b.x, cfg.k, pred_seed)?;
        let clean_m: Vec<Metrics> =
            clean.iter().zip(chunk).map(|(p, s)| scene_metrics(p, s.future(), s.lanes())).collect::<std::result::Result<_, _>>()?;
        if kind == AttackKind::None || eps == 0.0 {
            per_scene.extend(clean_m);
            continue;
        }
        let acfg = AttackConfig { steps: cfg.steps, seed: seed::derive(cfg.seed, "eval-attack", ci as u64), k: cfg.k, ..AttackConfig::default() };
        let (xa, _) = attack_batch(model, &b, kind, &ThreatModel::new(eps), &acfg)?;
        let adv = predict_batch(model, &b, &xa, cfg.k, pred_seed)?;
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let d = loss_reg(model, &mut g, &p, &b, &xa)?;
        drift += g.value(d).data().iter().sum::<f64>();
        for ((pa, clean), s) in adv.iter().zip(clean_m).zip(chunk) {
            let m = scene_metrics(pa, s.future(), s.lanes())?;
            per_scene.push(if m.ade >= clean.ade { m } else { clean });
        }
    }
    Ok(EvalResult { metrics: Metrics::mean(&per_scene), context_drift: drift / scenes.len().max(1) as f64, per_scene })
}

/// One training run of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub run_id: String,
    pub arch: Arch,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerAttack {
    pub kind: AttackKind,
    pub eps: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackedEval {
    pub eps: f64,
    pub attack: AttackKind,
    pub metrics: Metrics,
    pub context_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub regime: Regime,
    pub arch: Arch,
    pub config: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub inner_attack: Option<InnerAttack>,
    pub epochs: Vec<EpochLog>,
    pub clean: Metrics,
    pub attacked: Vec<AttackedEval>,
    /// Mean attack-time encoder drift at the first evaluated ε under the
    /// deterministic attack.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub context_drift: Option<f64>,
    pub ade_aggregation: String,
    pub complete: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl RunReport {
    pub fn rows(&self) -> Vec<MetricsRow> {
        let mut rows = vec![MetricsRow { run_id: self.run_id.clone(), split: Split::Test, eps: 0.0, attack: "none".into(), metrics: self.clean }];
        rows.extend(self.attacked.iter().map(|a| MetricsRow {
            run_id: self.run_id.clone(),
            split: Split::Test,
            eps: a.eps,
            attack: a.attack.as_str().into(),
            metrics: a.metrics,
        }));
        rows
    }

    /// Robust metrics for `(eps, attack)`, if evaluated.
    pub fn robust(&self, eps: f64, attack: AttackKind) -> Option<&AttackedEval> {
        self.attacked.iter().find(|a| a.eps == eps && a.attack == attack)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalPlan {
    pub eps: Vec<f64>,
    pub attacks: Vec<AttackKind>,
    pub eval: EvalConfig,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self { eps: vec![0.5, 1.0], attacks: vec![AttackKind::Deterministic], eval: EvalConfig::default() }
    }
}

/// Clean and attacked evaluation of a trained model.
pub fn evaluate_plan(model: &dyn Predictor, test: &[&Scene], plan: &EvalPlan) -> Result<(Metrics, Vec<AttackedEval>)> {
    let clean = evaluate(model, test, 0.0, AttackKind::None, &plan.eval)?.metrics;
    let mut attacked = Vec::new();
    for &eps in &plan.eps {
        for &attack in &plan.attacks {
            if attack == AttackKind::Latent && model.arch().kind != Family::Cvae {
                continue;
            }
            let r = evaluate(model, test, eps, attack, &plan.eval)?;
            attacked.push(AttackedEval { eps, attack, metrics: r.metrics, context_drift: r.context_drift });
        }
    }
    Ok((clean, attacked))
}

/// Trains and evaluates one run. A non-finite loss yields a partial report
/// instead of an error.
pub fn run_one(spec: &RunSpec, train_scenes: &[&Scene], aug: &[&Scene], test: &[&Scene], plan: &EvalPlan, out: Option<&Path>) -> Result<(Model, RunReport)> {
    let mut model = Model::new(spec.arch.clone(), seed::derive(spec.train.seed, "init", 0))?;
    let ckpt_dir = out.map(|o| o.join(&spec.run_id));
    let inner_attack = spec.train.regime.inner_attack().map(|kind| InnerAttack { kind, eps: spec.train.eps, steps: spec.train.inner_steps });
    let mut report = RunReport {
        run_id: spec.run_id.clone(),
        regime: spec.train.regime,
        arch: spec.arch.clone(),
        config: spec.train.clone(),
        inner_attack,
        epochs: vec![],
        clean: Metrics::default(),
        attacked: vec![],
        context_drift: None,
        ade_aggregation: "all_agents".into(),
        complete: false,
        error: None,
    };
    match train(&mut model, train_scenes, aug, &spec.train, None, ckpt_dir.as_deref()) {
        Ok(logs) => report.epochs = logs,
        Err(e @ TrainError::NonFinite { .. }) => {
            report.error = Some(e.to_string());
            return Ok((model, report));
        }
        Err(e) => return Err(e),
    }
    let (clean, attacked) = evaluate_plan(&model, test, plan)?;
    report.clean = clean;
    report.context_drift = attacked.iter().find(|a| a.attack == AttackKind::Deterministic).map(|a| a.context_drift);
    report.attacked = attacked;
    report.complete = true;
    Ok((model, report))
}

/// Runs every spec, writing `<run_id>.report.json`, per-epoch checkpoints
/// under `<run_id>/` and a combined `metrics.csv` when `out` is given.
pub fn run_experiment(specs: &[RunSpec], train_scenes: &[&Scene], aug: &[&Scene], test: &[&Scene], plan: &EvalPlan, out: Option<&Path>) -> Result<Vec<RunReport>> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut reports = Vec::with_capacity(specs.len());
    for spec in specs {
        let (_, report) = run_one(spec, train_scenes, aug, test, plan, out)?;
        if let Some(dir) = out {
            let path = dir.join(format!("{}.report.json", spec.run_id));
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        }
        reports.push(report);
    }
    if let Some(dir) = out {
        let path = dir.join("metrics.csv");
        std::fs::write(&path, experiment_csv(&reports)).map_err(|e| io_err(&path, e))?;
    }
    Ok(reports)
}

pub fn experiment_csv(reports: &[RunReport]) -> String {
    let rows: Vec<MetricsRow> = reports.iter().flat_map(RunReport::rows).collect();
    debug_assert!(metrics_csv(&rows).starts_with(METRICS_HEADER));
    metrics_csv(&rows)
}
