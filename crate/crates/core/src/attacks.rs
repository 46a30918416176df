//! L∞ attacks on trajectory predictors: projection, a sign-gradient PGD
//! driver with an adaptive step size, and the attack objectives.
//!
//! Perturbations are `[A, 2H]` matrices, one row per attacked agent; rows
//! are scattered onto the history matrix through a constant placement
//! matrix, so agents that are not attacked can never move.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::predictor::{candidate_noise, kl_rows, Batch, Predictor, PredictorError, Result};
use crate::scene::{Scene, SceneError};
use crate::{seed, Graph, Tensor, Var};

static VIOLATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of iterates, process-wide, found outside the threat set.
pub fn threat_violations() -> usize {
    VIOLATIONS.load(Ordering::SeqCst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    /// One adversarial agent per scene, given by index.
    Designated(usize),
    /// Every agent, for stress tests.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub eps: f64,
    pub targets: Targets,
}

impl ThreatModel {
    pub fn new(eps: f64) -> Self {
        assert!(eps >= 0.0, "epsilon must be non-negative");
        Self { eps, targets: Targets::Designated(0) }
    }

    /// Attacked rows of the batch and the scene each belongs to.
    pub fn rows(&self, b: &Batch) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut groups = Vec::new();
        for s in 0..b.num_scenes() {
            let r = b.scene_rows(s);
            match self.targets {
                Targets::Designated(i) => {
                    rows.push(r.start + i.min(r.len() - 1));
                    groups.push(s);
                }
                Targets::All => {
                    for row in r {
                        rows.push(row);
                        groups.push(s);
                    }
                }
            }
        }
        (rows, groups)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub steps: usize,
    /// Initial step size as a fraction of ε.
    pub alpha_frac: f64,
    /// Non-improving steps before the step size halves.
    pub patience: usize,
    /// Step-size floor as a fraction of ε.
    pub min_alpha_frac: f64,
    pub random_init: bool,
    pub seed: u64,
    /// Candidates for the naive objective.
    pub k: usize,
    /// Stochastic draws per window in the sequence objective; 0 attacks the
    /// deterministic decode only.
    pub eot_draws: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { steps: 20, alpha_frac: 0.25, patience: 5, min_alpha_frac: 0.01, random_init: false, seed: 0, k: 5, eot_draws: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Naive,
    Deterministic,
    Latent,
    Context,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Naive => "naive",
            AttackKind::Deterministic => "deterministic",
            AttackKind::Latent => "latent",
            AttackKind::Context => "context",
        }
    }

    /// Objectives minimized at δ = 0 have a zero gradient there, so PGD
    /// for them starts from a seeded random point.
    pub fn needs_random_start(self) -> bool {
        matches!(self, AttackKind::Latent | AttackKind::Context)
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::None, Self::Naive, Self::Deterministic, Self::Latent, Self::Context].into_iter().find(|k| k.as_str() == s)
    }
}

/// Componentwise clamp into `[-ε, ε]`.
pub fn project_linf(delta: &Tensor, eps: f64) -> Tensor {
    Tensor::new(delta.shape().to_vec(), delta.data().iter().map(|&v| v.clamp(-eps, eps)).collect()).expect("finite")
}

/// Something PGD can maximize: per-group values of a function of δ.
pub trait Objective {
    fn num_groups(&self) -> usize;
    /// Group of every δ row.
    fn row_groups(&self) -> &[usize];
    fn delta_shape(&self) -> [usize; 2];
    /// Per-group objective `[G]`; `step` lets stochastic objectives draw
    /// fresh noise each iteration.
    fn eval(&self, g: &mut Graph, delta: Var, step: usize) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub delta: Tensor,
    /// Best-so-far objective per group, index 0 being the initial point.
    pub traces: Vec<Vec<f64>>,
}

impl AttackResult {
    pub fn best(&self) -> Vec<f64> {
        self.traces.iter().map(|t| *t.last().unwrap()).collect()
    }
}

fn eval_with_grad(obj: &dyn Objective, delta: &Tensor, step: usize) -> Result<(Vec<f64>, Tensor)> {
    let mut g = Graph::new();
    let d = g.leaf(delta.clone());
    let v = obj.eval(&mut g, d, step)?;
    let values = g.value(v).data().to_vec();
    let root = g.sum(v);
    let grad = g.backward(root)?.wrt(&g, d);
    if let Some(i) = grad.data().iter().position(|v| !v.is_finite()) {
        return Err(PredictorError::NonFinite(format!("attack gradient component {i} at step {step}")));
    }
    Ok((values, grad))
}

fn check_threat(delta: &Tensor, eps: f64) {
    if delta.data().iter().any(|v| v.abs() > eps) {
        VIOLATIONS.fetch_add(1, Ordering::SeqCst);
        log::error!("perturbation left the threat set (eps {eps})");
    }
}

/// Sign-gradient ascent with projection after every step. Each group keeps
/// its own step size, halved after `patience` non-improving steps down to
/// the floor, and its own best-so-far perturbation.
pub fn pgd(obj: &dyn Objective, eps: f64, cfg: &AttackConfig) -> Result<AttackResult> {
    let [rows, cols] = obj.delta_shape();
    let groups = obj.num_groups();
    let row_groups = obj.row_groups().to_vec();
    let mut delta = if cfg.random_init && eps > 0.0 {
        let mut rng = seed::rng_for(cfg.seed, "pgd-init", 0);
        Tensor::from_fn(&[rows, cols], |_| rng.random_range(-eps..=eps)).map_err(PredictorError::from)?
    } else {
        Tensor::zeros(&[rows, cols])
    };
    delta = project_linf(&delta, eps);
    check_threat(&delta, eps);
    let (values, mut grad) = eval_with_grad(obj, &delta, 0)?;
    let mut best = values.clone();
    let mut best_delta = delta.clone();
    let mut traces: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
    if eps == 0.0 {
        return Ok(AttackResult { delta, traces });
    }
    let mut alpha = vec![cfg.alpha_frac * eps; groups];
    let floor = cfg.min_alpha_frac * eps;
    let mut stall = vec![0usize; groups];
    for step in 1..=cfg.steps {
        let mut next = delta.data().to_vec();
        for (i, v) in next.iter_mut().enumerate() {
            let gr = grad.data()[i];
            let s = if gr > 0.0 { 1.0 } else if gr < 0.0 { -1.0 } else { 0.0 };
            *v += alpha[row_groups[i / cols]] * s;
        }
        delta = project_linf(&Tensor::new(vec![rows, cols], next).map_err(PredictorError::from)?, eps);
        check_threat(&delta, eps);
        let (values, g2) = eval_with_grad(obj, &delta, step)?;
        grad = g2;
        for gi in 0..groups {
            if values[gi] > best[gi] {
                best[gi] = values[gi];
                stall[gi] = 0;
                let mut bd = best_delta.data().to_vec();
                for (r, _) in row_groups.iter().enumerate().filter(|(_, &rg)| rg == gi) {
                    bd[r * cols..(r + 1) * cols].copy_from_slice(&delta.data()[r * cols..(r + 1) * cols]);
                }
                best_delta = Tensor::new(vec![rows, cols], bd).map_err(PredictorError::from)?;
            } else {
                stall[gi] += 1;
                if stall[gi] >= cfg.patience {
                    alpha[gi] = (alpha[gi] / 2.0).max(floor);
                    stall[gi] = 0;
                }
            }
            traces[gi].push(best[gi]);
        }
    }
    Ok(AttackResult { delta: best_delta, traces })
}

/// Single-frame objectives on a batch of scenes, one group per scene.
pub struct SceneObjective<'a, P: Predictor + ?Sized> {
    pub model: &'a P,
    pub batch: &'a Batch,
    pub kind: AttackKind,
    placement: Tensor,
    row_groups: Vec<usize>,
    k: usize,
    seed: u64,
}

impl<'a, P: Predictor + ?Sized> SceneObjective<'a, P> {
    pub fn new(model: &'a P, batch: &'a Batch, kind: AttackKind, threat: &ThreatModel, cfg: &AttackConfig) -> Result<Self> {
        if kind == AttackKind::None {
            return Err(PredictorError::Unsupported("attack kind `none` has no objective".into()));
        }
        if kind == AttackKind::Latent && model.arch().kind != crate::predictor::Family::Cvae {
            return Err(PredictorError::Unsupported("latent attack needs a posterior; cGAN has none".into()));
        }
        let (rows, row_groups) = threat.rows(batch);
        Ok(Self { model, batch, kind, placement: batch.placement(&rows), row_groups, k: cfg.k, seed: cfg.seed })
    }

    pub fn perturbed(&self, delta: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let d = g.constant(delta.clone());
        let x = self.x_adv(&mut g, d)?;
        Ok(g.value(x).clone())
    }

    fn x_adv(&self, g: &mut Graph, delta: Var) -> Result<Var> {
        let pl = g.constant(self.placement.clone());
        let x = g.constant(self.batch.x.clone());
        let shift = g.matmul(pl, delta)?;
        Ok(g.add(x, shift)?)
    }
}

/// Deterministic-attack loss per scene: decode at the maximum-likelihood
/// latent recomputed from `x`.
pub fn deterministic_loss<P: Predictor + ?Sized>(model: &P, g: &mut Graph, p: &crate::nn::Bound, x: Var, b: &Batch) -> Result<Var> {
    let c = model.encode(g, p, x, b)?;
    let z = model.latent_mode(g, p, c)?;
    let out = model.decode(g, p, c, z, x, b)?;
    let y = g.constant(b.y.clone());
    b.scene_sq_error(g, out, y)
}

/// Per-scene `‖a − b‖₂` over the rows of each scene.
pub fn scene_norms(g: &mut Graph, a: Var, bvar: Var, b: &Batch) -> Result<Var> {
    let d = g.sub(a, bvar)?;
    let mut parts = Vec::with_capacity(b.num_scenes());
    for s in 0..b.num_scenes() {
        let r = b.scene_rows(s);
        let rows = g.slice(d, 0, r.start, r.len())?;
        let n = g.norm(rows);
        parts.push(g.reshape(n, &[1])?);
    }
    Ok(g.concat(&parts, 0)?)
}

impl<P: Predictor + ?Sized> Objective for SceneObjective<'_, P> {
    fn num_groups(&self) -> usize {
        self.batch.num_scenes()
    }

    fn row_groups(&self) -> &[usize] {
        &self.row_groups
    }

    fn delta_shape(&self) -> [usize; 2] {
        [self.row_groups.len(), 2 * self.batch.h]
    }

    fn eval(&self, g: &mut Graph, delta: Var, step: usize) -> Result<Var> {
        let m = self.model;
        let b = self.batch;
        let p = m.params().bind(g, false);
        let x = self.x_adv(g, delta)?;
        match self.kind {
            AttackKind::Deterministic => deterministic_loss(m, g, &p, x, b),
            AttackKind::Naive => {
                let y = g.constant(b.y.clone());
                let c = m.encode(g, &p, x, b)?;
                let s = seed::derive(self.seed, "naive", step as u64);
                let mut errs = Vec::with_capacity(self.k);
                for i in 0..self.k {
                    let z = m.latent(g, &p, c, candidate_noise(b.rows(), m.arch().latent, s, i))?;
                    let out = m.decode(g, &p, c, z, x, b)?;
                    let e = b.scene_sq_error(g, out, y)?;
                    errs.push(g.reshape(e, &[b.num_scenes(), 1])?);
                }
                let stacked = g.concat(&errs, 1)?;
                Ok(g.min_over_axis(stacked, 1)?)
            }
            AttackKind::Latent => {
                let y = g.constant(b.y.clone());
                let x0 = g.constant(b.x.clone());
                let c0 = m.encode(g, &p, x0, b)?;
                let q0 = m.posterior(g, &p, c0, x0, y, b)?.ok_or_else(|| PredictorError::Unsupported("no posterior".into()))?;
                let c1 = m.encode(g, &p, x, b)?;
                let q1 = m.posterior(g, &p, c1, x, y, b)?.ok_or_else(|| PredictorError::Unsupported("no posterior".into()))?;
                let kl = kl_rows(g, q0, q1)?;
                b.scene_sum(g, kl)
            }
            AttackKind::Context => {
                let x0 = g.constant(b.x.clone());
                let c0 = m.encode(g, &p, x0, b)?;
                let c1 = m.encode(g, &p, x, b)?;
                scene_norms(g, c0, c1, b)
            }
            AttackKind::None => unreachable!("rejected in new"),
        }
    }
}

/// Runs one attack on every scene of the batch and returns the attacked
/// history matrix along with the raw result.
pub fn attack_batch<P: Predictor + ?Sized>(
    model: &P,
    b: &Batch,
    kind: AttackKind,
    threat: &ThreatModel,
    cfg: &AttackConfig,
) -> Result<(Tensor, AttackResult)> {
    if kind == AttackKind::None {
        let (rows, _) = threat.rows(b);
        let res = AttackResult { delta: Tensor::zeros(&[rows.len(), 2 * b.h]), traces: vec![] };
        return Ok((b.x.clone(), res));
    }
    let obj = SceneObjective::new(model, b, kind, threat, cfg)?;
    let cfg = AttackConfig { random_init: cfg.random_init || kind.needs_random_start(), ..cfg.clone() };
    let res = pgd(&obj, threat.eps, &cfg)?;
    Ok((obj.perturbed(&res.delta)?, res))
}

/// Overlapping windows of a long scenario for the sequence attack.
pub struct SequenceObjective<'a, P: Predictor + ?Sized> {
    pub model: &'a P,
    /// Long history matrix `[N, 2(H + L_p)]`.
    long_x: Tensor,
    windows: Batch,
    placement: Tensor,
    row_groups: Vec<usize>,
    h: usize,
    lp: usize,
    eot_draws: usize,
    seed: u64,
}

impl<'a, P: Predictor + ?Sized> SequenceObjective<'a, P> {
    /// `scenario` must have history length `H + lp` and future length `T`,
    /// where H and T are the model's.
    pub fn new(model: &'a P, scenario: &Scene, lp: usize, adversary: usize, cfg: &AttackConfig) -> Result<Self> {
        let (h, t) = (model.arch().history_len, model.arch().future_len);
        if scenario.history_len() != h + lp || scenario.future_len() < t {
            return Err(PredictorError::Shape(format!(
                "sequence attack needs history {} and future >= {t}, scenario has {} and {}",
                h + lp,
                scenario.history_len(),
                scenario.future_len()
            )));
        }
        let n = scenario.num_agents();
        let windows: Vec<Scene> = (0..=lp)
            .map(|w| {
                let hist = (0..n).map(|i| scenario.trajectory(i)[w..w + h].to_vec()).collect();
                let fut = (0..n).map(|i| scenario.trajectory(i)[w + h..w + h + t].to_vec()).collect();
                Scene::new(scenario.dt(), hist, fut, vec![])
            })
            .collect::<std::result::Result<_, SceneError>>()?;
        let refs: Vec<&Scene> = windows.iter().collect();
        let long_x = Tensor::matrix(n, 2 * (h + lp), scenario.history_flat()).map_err(PredictorError::from)?;
        let mut pl = vec![0.0; n];
        pl[adversary.min(n - 1)] = 1.0;
        Ok(Self {
            model,
            long_x,
            windows: Batch::new(&refs)?,
            placement: Tensor::matrix(n, 1, pl).unwrap(),
            row_groups: vec![0],
            h,
            lp,
            eot_draws: cfg.eot_draws,
            seed: cfg.seed,
        })
    }

    pub fn windows(&self) -> &Batch {
        &self.windows
    }

    /// Stacked window histories `[(L_p + 1) N, 2H]` under `delta`.
    fn window_x(&self, g: &mut Graph, delta: Var) -> Result<Var> {
        let pl = g.constant(self.placement.clone());
        let lx = g.constant(self.long_x.clone());
        let shift = g.matmul(pl, delta)?;
        let xl = g.add(lx, shift)?;
        let parts = (0..=self.lp).map(|w| g.slice(xl, 1, 2 * w, 2 * self.h)).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(g.concat(&parts, 0)?)
    }

    /// Window histories as values.
    pub fn window_values(&self, delta: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let d = g.constant(delta.clone());
        let x = self.window_x(&mut g, d)?;
        Ok(g.value(x).clone())
    }

    /// Per-window losses `[L_p + 1]`.
    pub fn window_losses(&self, g: &mut Graph, delta: Var) -> Result<Var> {
        let m = self.model;
        let b = &self.windows;
        let p = m.params().bind(g, false);
        let x = self.window_x(g, delta)?;
        if self.eot_draws == 0 {
            return deterministic_loss(m, g, &p, x, b);
        }
        let y = g.constant(b.y.clone());
        let c = m.encode(g, &p, x, b)?;
        let mut acc: Option<Var> = None;
        for d in 0..self.eot_draws {
            let z = m.latent(g, &p, c, candidate_noise(b.rows(), m.arch().latent, seed::derive(self.seed, "eot", 0), d))?;
            let out = m.decode(g, &p, c, z, x, b)?;
            let e = b.scene_sq_error(g, out, y)?;
            acc = Some(match acc {
                None => e,
                Some(a) => g.add(a, e)?,
            });
        }
        Ok(g.scale(acc.unwrap(), 1.0 / self.eot_draws as f64))
    }
}

impl<P: Predictor + ?Sized> Objective for SequenceObjective<'_, P> {
    fn num_groups(&self) -> usize {
        1
    }

    fn row_groups(&self) -> &[usize] {
        &self.row_groups
    }

    fn delta_shape(&self) -> [usize; 2] {
        [1, 2 * (self.h + self.lp)]
    }

    fn eval(&self, g: &mut Graph, delta: Var, _step: usize) -> Result<Var> {
        let w = self.window_losses(g, delta)?;
        let s = g.sum(w);
        Ok(g.reshape(s, &[1])?)
    }
}

/// Attack result file record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub scene_id: u64,
    pub attack_kind: String,
    pub eps: f64,
    pub steps: usize,
    pub delta: Vec<f64>,
    pub trace: Vec<f64>,
}

/// Ground-truth future of window `w` of a sequence scenario.
pub fn window_future(scenario: &Scene, lp: usize, w: usize, t: usize) -> Vec<Vec<crate::scene::Point>> {
    let h = scenario.history_len() - lp;
    (0..scenario.num_agents()).map(|i| scenario.trajectory(i)[w + h..w + h + t].to_vec()).collect()
}
