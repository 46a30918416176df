//! Trajectory predictors: a conditional VAE and a conditional GAN sharing
//! one context encoder design.
//!
//! All computations run on a [`Batch`], which stacks the agents of several
//! scenes into one matrix. Scene structure enters only through constant
//! selection matrices (neighbor pairs, pooling, per-scene sums), so scenes
//! in a batch never interact.

pub mod cgan;
pub mod checkpoint;
pub mod cvae;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::nn::{self, Activation, Bound, ParamStore};
use crate::scene::{PredictionSet, Scene, SceneError};
use crate::{seed, Graph, Tensor, Var};

pub use cgan::CganModel;
pub use cvae::CvaeModel;

pub const LOGSIG_CLAMP: f64 = 9.2;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, PredictorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Cvae,
    Cgan,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Cvae => "cvae",
            Family::Cgan => "cgan",
        }
    }
}

/// Architecture hyperparameters. The context code has `2 * embed` columns:
/// the agent's own embedding followed by the pooled neighbor embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub kind: Family,
    pub history_len: usize,
    pub future_len: usize,
    pub hidden: usize,
    pub embed: usize,
    pub latent: usize,
    pub activation: Activation,
    /// Meters per unit of encoder input.
    pub pos_scale: f64,
    /// Meters per unit of decoder step output.
    pub step_scale: f64,
}

impl Arch {
    pub fn new(kind: Family, history_len: usize, future_len: usize) -> Self {
        Self {
            kind,
            history_len,
            future_len,
            hidden: 64,
            embed: 32,
            latent: 8,
            activation: Activation::Tanh,
            pos_scale: 10.0,
            step_scale: 5.0,
        }
    }

    pub fn context_dim(&self) -> usize {
        2 * self.embed
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.history_len >= 2
            && self.future_len >= 1
            && self.hidden >= 1
            && self.embed >= 1
            && self.latent >= 1
            && self.pos_scale > 0.0
            && self.step_scale > 0.0;
        if !ok {
            return Err(PredictorError::Checkpoint(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }
}

/// Agents of several scenes stacked row-wise, plus the constant matrices
/// the models need. Rows are `[x_0, y_0, x_1, y_1, ...]` per agent.
#[derive(Clone, Debug)]
pub struct Batch {
    pub h: usize,
    pub t: usize,
    /// Row offset of each scene, with the total row count appended.
    pub offsets: Vec<usize>,
    pub x: Tensor,
    pub y: Tensor,
    /// `x · rel` subtracts the last observed position from every step.
    pub rel: Tensor,
    /// `x · last_h` repeats the last observed position over H steps.
    pub last_h: Tensor,
    /// `x · last_t` repeats the last observed position over T steps.
    pub last_t: Tensor,
    /// Per-coordinate running sum over T steps.
    pub cumsum: Tensor,
    /// Neighbor pairs (i, j), j ≠ i, within a scene: `pair_j · x` selects
    /// the neighbor, `pair_i · x` the ego row. `None` when no scene has two
    /// agents.
    pub pairs: Option<(Tensor, Tensor, Tensor)>,
    /// `[B, M]` scene membership, for per-scene sums.
    pub seg: Tensor,
    pub ones_t: Tensor,
}

fn last_point_map(h: usize, cols_steps: usize) -> Tensor {
    let mut m = vec![0.0; 2 * h * 2 * cols_steps];
    for s in 0..cols_steps {
        for c in 0..2 {
            m[(2 * (h - 1) + c) * 2 * cols_steps + 2 * s + c] = 1.0;
        }
    }
    Tensor::matrix(2 * h, 2 * cols_steps, m).unwrap()
}

impl Batch {
    pub fn new(scenes: &[&Scene]) -> Result<Self> {
        let first = scenes.first().ok_or_else(|| PredictorError::Shape("empty batch".into()))?;
        let (h, t) = (first.history_len(), first.future_len());
        let mut offsets = vec![0];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in scenes {
            if s.history_len() != h || s.future_len() != t {
                return Err(PredictorError::Shape(format!(
                    "batch mixes horizons ({h}, {t}) and ({}, {})",
                    s.history_len(),
                    s.future_len()
                )));
            }
            xs.extend(s.history_flat());
            ys.extend(s.future_flat());
            offsets.push(offsets.last().unwrap() + s.num_agents());
        }
        let m = *offsets.last().unwrap();
        let x = Tensor::matrix(m, 2 * h, xs).map_err(AutodiffError::from)?;
        let y = Tensor::matrix(m, 2 * t, ys).map_err(AutodiffError::from)?;
        Ok(Self::from_parts(h, t, offsets, x, y))
    }

    fn from_parts(h: usize, t: usize, offsets: Vec<usize>, x: Tensor, y: Tensor) -> Self {
        let m = *offsets.last().unwrap();
        let b = offsets.len() - 1;
        let last_h = last_point_map(h, h);
        let rel = Tensor::from_fn(&[2 * h, 2 * h], |i| {
            let (r, c) = (i / (2 * h), i % (2 * h));
            f64::from(r == c) - last_h.data()[i]
        })
        .unwrap();
        let cumsum = Tensor::from_fn(&[2 * t, 2 * t], |i| {
            let (r, c) = (i / (2 * t), i % (2 * t));
            f64::from(r % 2 == c % 2 && r / 2 <= c / 2)
        })
        .unwrap();
        let mut pair_i = Vec::new();
        let mut pair_j = Vec::new();
        let mut owner = Vec::new();
        for s in 0..b {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            for i in lo..hi {
                for j in lo..hi {
                    if i != j {
                        pair_i.push(i);
                        pair_j.push(j);
                        owner.push((i, hi - lo - 1));
                    }
                }
            }
        }
        let p = pair_i.len();
        let pairs = (p > 0).then(|| {
            let sel = |idx: &[usize]| {
                let mut d = vec![0.0; p * m];
                for (r, &c) in idx.iter().enumerate() {
                    d[r * m + c] = 1.0;
                }
                Tensor::matrix(p, m, d).unwrap()
            };
            let mut pool = vec![0.0; m * p];
            for (r, &(i, n)) in owner.iter().enumerate() {
                pool[i * p + r] = 1.0 / n as f64;
            }
            (sel(&pair_i), sel(&pair_j), Tensor::matrix(m, p, pool).unwrap())
        });
        let mut seg = vec![0.0; b * m];
        for s in 0..b {
            for r in offsets[s]..offsets[s + 1] {
                seg[s * m + r] = 1.0;
            }
        }
        Self {
            h,
            t,
            offsets,
            x,
            y,
            rel,
            last_h,
            last_t: last_point_map(h, t),
            cumsum,
            pairs,
            seg: Tensor::matrix(b, m, seg).unwrap(),
            ones_t: Tensor::full(&[2 * t, 1], 1.0),
        }
    }

    pub fn num_scenes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn scene_rows(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    /// Same structure with a different history matrix.
    pub fn with_history(&self, x: Tensor) -> Result<Self> {
        if x.shape() != self.x.shape() {
            return Err(PredictorError::Shape(format!("history {:?} vs {:?}", x.shape(), self.x.shape())));
        }
        let mut b = self.clone();
        b.x = x;
        Ok(b)
    }

    /// `[M, A]` matrix placing A perturbation rows onto absolute rows.
    pub fn placement(&self, rows: &[usize]) -> Tensor {
        let (m, a) = (self.rows(), rows.len());
        let mut d = vec![0.0; m * a];
        for (c, &r) in rows.iter().enumerate() {
            d[r * a + c] = 1.0;
        }
        Tensor::matrix(m, a, d).unwrap()
    }

    /// Per-scene sum of per-row values `[M, 1]` as a `[B]` vector.
    pub fn scene_sum(&self, g: &mut Graph, per_row: Var) -> Result<Var> {
        let seg = g.constant(self.seg.clone());
        let s = g.matmul(seg, per_row)?;
        Ok(g.reshape(s, &[self.num_scenes()])?)
    }

    /// Per-scene squared error between `[M, 2T]` predictions and `y`.
    pub fn scene_sq_error(&self, g: &mut Graph, pred: Var, y: Var) -> Result<Var> {
        let d = g.sub(pred, y)?;
        let sq = g.mul(d, d)?;
        let ones = g.constant(self.ones_t.clone());
        let rows = g.matmul(sq, ones)?;
        self.scene_sum(g, rows)
    }
}

/// Per-agent context code `[M, 2E]`: own history embedding followed by the
/// mean embedding of neighbor histories, both in the agent's frame.
pub fn encode_context(g: &mut Graph, p: &Bound, prefix: &str, arch: &Arch, x: Var, b: &Batch) -> Result<Var> {
    let inv = 1.0 / arch.pos_scale;
    let rel = g.constant(b.rel.clone());
    let own = g.matmul(x, rel)?;
    let own = g.scale(own, inv);
    let own = nn::mlp2(g, p, &format!("{prefix}.self"), own, arch.activation)?;
    let social = match &b.pairs {
        Some((pi, pj, pool)) => {
            let (pi, pj, pool) = (g.constant(pi.clone()), g.constant(pj.clone()), g.constant(pool.clone()));
            let last = g.constant(b.last_h.clone());
            let nb = g.matmul(pj, x)?;
            let ego = g.matmul(pi, x)?;
            let ego_last = g.matmul(ego, last)?;
            let q = g.sub(nb, ego_last)?;
            let q = g.scale(q, inv);
            let e = nn::mlp2(g, p, &format!("{prefix}.pair"), q, arch.activation)?;
            g.matmul(pool, e)?
        }
        None => g.constant(Tensor::zeros(&[b.rows(), arch.embed])),
    };
    Ok(g.concat(&[own, social], 1)?)
}

pub fn add_encoder_params(store: &mut ParamStore, prefix: &str, arch: &Arch, rng: &mut seed::Rng) {
    let (h2, hid, e) = (2 * arch.history_len, arch.hidden, arch.embed);
    store.add_linear(&format!("{prefix}.self.l1"), h2, hid, 1.0, rng);
    store.add_linear(&format!("{prefix}.self.l2"), hid, e, 1.0, rng);
    store.add_linear(&format!("{prefix}.pair.l1"), h2, hid, 1.0, rng);
    store.add_linear(&format!("{prefix}.pair.l2"), hid, e, 1.0, rng);
}

/// Decoder: `(C ‖ Z)` through two layers to T displacement steps, summed
/// from the last observed position. Output `[M, 2T]` absolute positions.
pub fn decode_steps(g: &mut Graph, p: &Bound, prefix: &str, arch: &Arch, c: Var, z: Var, x: Var, b: &Batch) -> Result<Var> {
    let inp = g.concat(&[c, z], 1)?;
    let steps = nn::mlp2(g, p, prefix, inp, arch.activation)?;
    let steps = g.scale(steps, arch.step_scale);
    let cs = g.constant(b.cumsum.clone());
    let rel = g.matmul(steps, cs)?;
    let lt = g.constant(b.last_t.clone());
    let anchor = g.matmul(x, lt)?;
    Ok(g.add(rel, anchor)?)
}

pub fn add_decoder_params(store: &mut ParamStore, prefix: &str, arch: &Arch, rng: &mut seed::Rng) {
    store.add_linear(&format!("{prefix}.l1"), arch.context_dim() + arch.latent, arch.hidden, 1.0, rng);
    store.add_linear(&format!("{prefix}.l2"), arch.hidden, 2 * arch.future_len, 0.5, rng);
}

/// Diagonal Gaussian with log standard deviation already clamped.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian {
    pub mu: Var,
    pub logsig: Var,
}

/// Closed-form KL(q ‖ p) between diagonal Gaussians, summed per row to `[M, 1]`.
pub fn kl_rows(g: &mut Graph, q: Gaussian, p: Gaussian) -> Result<Var> {
    let dl = g.sub(q.logsig, p.logsig)?;
    let var_ratio = g.scale(dl, 2.0);
    let var_ratio = g.exp(var_ratio)?;
    let dm = g.sub(q.mu, p.mu)?;
    let dm2 = g.mul(dm, dm)?;
    let inv_var = g.scale(p.logsig, -2.0);
    let inv_var = g.exp(inv_var)?;
    let maha = g.mul(dm2, inv_var)?;
    let quad = g.add(var_ratio, maha)?;
    let quad = g.scale(quad, 0.5);
    let nl = g.neg(dl);
    let kl = g.add(nl, quad)?;
    let kl = g.offset(kl, -0.5);
    let cols = g.shape(kl)[1];
    let ones = g.constant(Tensor::full(&[cols, 1], 1.0));
    Ok(g.matmul(kl, ones)?)
}

/// Reparameterized sample `μ + exp(logσ) ⊙ u`.
pub fn reparameterize(g: &mut Graph, gauss: Gaussian, u: Tensor) -> Result<Var> {
    let sig = g.exp(gauss.logsig)?;
    let u = g.constant(u);
    let su = g.mul(sig, u)?;
    Ok(g.add(gauss.mu, su)?)
}

pub fn standard_normal(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = seed::rng(seed);
    let d = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::matrix(rows, cols, d).unwrap()
}

/// Noise for candidate `k` of a prediction call seeded with `seed`.
pub fn candidate_noise(rows: usize, latent: usize, seed: u64, k: usize) -> Tensor {
    standard_normal(rows, latent, seed::derive(seed, "candidate", k as u64))
}

/// Common interface of the predictor families, as used by attacks and
/// training.
pub trait Predictor: Send + Sync {
    fn arch(&self) -> &Arch;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// Parameter name prefixes of the context encoder f.
    fn encoder_prefixes(&self) -> &'static [&'static str];

    fn encode(&self, g: &mut Graph, p: &Bound, x: Var, b: &Batch) -> Result<Var>;

    /// Latent for noise `u`: `μ + σ ⊙ u` under the prior (CVAE) or `u`
    /// itself (cGAN).
    fn latent(&self, g: &mut Graph, p: &Bound, c: Var, u: Tensor) -> Result<Var>;

    /// Maximum-likelihood latent: the prior mean (CVAE) or zero (cGAN).
    fn latent_mode(&self, g: &mut Graph, p: &Bound, c: Var) -> Result<Var>;

    fn decode(&self, g: &mut Graph, p: &Bound, c: Var, z: Var, x: Var, b: &Batch) -> Result<Var>;

    /// Posterior q(Z | Y, X), if the family has one.
    fn posterior(&self, _g: &mut Graph, _p: &Bound, _c: Var, _x: Var, _y: Var, _b: &Batch) -> Result<Option<Gaussian>> {
        Ok(None)
    }

    /// Training loss per scene, shape `[B]`.
    fn loss_total(&self, g: &mut Graph, p: &Bound, x: Var, b: &Batch, k: usize, seed: u64) -> Result<Var>;
}

/// K candidates per scene of the batch, predicted from history `x`.
pub fn predict_batch<P: Predictor + ?Sized>(model: &P, b: &Batch, x: &Tensor, k: usize, seed: u64) -> Result<Vec<PredictionSet>> {
    let noise: Vec<Tensor> = (0..k).map(|i| candidate_noise(b.rows(), model.arch().latent, seed, i)).collect();
    predict_with_noise(model, b, x, &noise)
}

/// One candidate per noise tensor.
pub fn predict_with_noise<P: Predictor + ?Sized>(model: &P, b: &Batch, x: &Tensor, noise: &[Tensor]) -> Result<Vec<PredictionSet>> {
    if noise.is_empty() {
        return Err(PredictorError::Shape("K must be >= 1".into()));
    }
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let c = model.encode(&mut g, &p, xv, b)?;
    let mut outs = Vec::with_capacity(noise.len());
    for u in noise {
        let z = model.latent(&mut g, &p, c, u.clone())?;
        let y = model.decode(&mut g, &p, c, z, xv, b)?;
        outs.push(g.value(y).clone());
    }
    split_predictions(b, &outs)
}

/// Decode at the maximum-likelihood latent, `[M, 2T]`.
pub fn predict_mode<P: Predictor + ?Sized>(model: &P, b: &Batch, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let c = model.encode(&mut g, &p, xv, b)?;
    let z = model.latent_mode(&mut g, &p, c)?;
    let y = model.decode(&mut g, &p, c, z, xv, b)?;
    Ok(g.value(y).clone())
}

/// Context code values `[M, 2E]` for history `x`.
pub fn context_values<P: Predictor + ?Sized>(model: &P, b: &Batch, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let c = model.encode(&mut g, &p, xv, b)?;
    Ok(g.value(c).clone())
}

pub fn split_predictions(b: &Batch, outs: &[Tensor]) -> Result<Vec<PredictionSet>> {
    let t = b.t;
    (0..b.num_scenes())
        .map(|s| {
            let cands = outs
                .iter()
                .map(|o| {
                    b.scene_rows(s)
                        .map(|r| (0..t).map(|k| [o.data()[r * 2 * t + 2 * k], o.data()[r * 2 * t + 2 * k + 1]]).collect())
                        .collect()
                })
                .collect();
            Ok(PredictionSet::new(cands)?)
        })
        .collect()
}

/// K seeded candidates for one scene.
pub fn sample_predictions<P: Predictor + ?Sized>(model: &P, scene: &Scene, k: usize, seed: u64) -> Result<PredictionSet> {
    let b = Batch::new(&[scene])?;
    Ok(predict_batch(model, &b, &b.x, k, seed)?.remove(0))
}
