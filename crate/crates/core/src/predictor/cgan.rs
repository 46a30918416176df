//! Conditional GAN: generator G(C, Z) with Z ~ N(0, I) and a
//! discriminator D(X, Y) with its own context encoder.

use std::collections::BTreeMap;

use super::{
    add_decoder_params, add_encoder_params, candidate_noise, decode_steps, encode_context, Arch, Batch, Family,
    Predictor, PredictorError, Result,
};
use crate::nn::{self, Adam, Bound, ParamStore};
use crate::{seed, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CganModel {
    arch: Arch,
    params: ParamStore,
}

pub const GENERATOR: &[&str] = &["enc.", "dec."];
pub const DISCRIMINATOR: &[&str] = &["disc."];

/// Losses of one alternating step, before the updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanStepLog {
    pub disc_loss: f64,
    pub gen_adv: f64,
    pub gen_diversity: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

impl CganModel {
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        if arch.kind != Family::Cgan {
            return Err(PredictorError::Unsupported(format!("arch kind {:?} for a cGAN", arch.kind)));
        }
        arch.validate()?;
        let mut rng = seed::rng(seed);
        let mut p = ParamStore::default();
        add_encoder_params(&mut p, "enc", &arch, &mut rng);
        add_decoder_params(&mut p, "dec", &arch, &mut rng);
        add_encoder_params(&mut p, "disc.enc", &arch, &mut rng);
        p.add_linear("disc.fut.l1", 2 * arch.future_len, arch.hidden, 1.0, &mut rng);
        p.add_linear("disc.fut.l2", arch.hidden, arch.embed, 1.0, &mut rng);
        p.add_linear("disc.l1", arch.context_dim() + arch.embed, arch.hidden, 1.0, &mut rng);
        p.add_linear("disc.out", arch.hidden, 1, 1.0, &mut rng);
        Ok(Self { arch, params: p })
    }

    pub fn from_params(arch: Arch, params: ParamStore) -> Result<Self> {
        let reference = Self::new(arch.clone(), 0)?;
        super::checkpoint::check_params(&reference.params, &params)?;
        Ok(Self { arch, params })
    }

    /// Discriminator logits `[M, 1]` for futures `y` given history `x`.
    pub fn disc_logits(&self, g: &mut Graph, p: &Bound, x: Var, y: Var, b: &Batch) -> Result<Var> {
        let c = encode_context(g, p, "disc.enc", &self.arch, x, b)?;
        let lt = g.constant(b.last_t.clone());
        let anchor = g.matmul(x, lt)?;
        let fut = g.sub(y, anchor)?;
        let fut = g.scale(fut, 1.0 / self.arch.pos_scale);
        let fe = nn::mlp2(g, p, "disc.fut", fut, self.arch.activation)?;
        let inp = g.concat(&[c, fe], 1)?;
        let h = nn::linear(g, p, "disc.l1", inp)?;
        let h = nn::activate(g, h, self.arch.activation);
        let logits = nn::linear(g, p, "disc.out", h)?;
        if g.value(logits).data().iter().any(|v| !v.is_finite()) {
            return Err(PredictorError::NonFinite("discriminator logits".into()));
        }
        Ok(logits)
    }

    /// Discriminator scores in (0, 1).
    pub fn disc_scores(&self, b: &Batch, y: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(b.x.clone());
        let y = g.constant(y.clone());
        let l = self.disc_logits(&mut g, &p, x, y, b)?;
        let s = g.sigmoid(l);
        Ok(g.value(s).data().to_vec())
    }

    /// `log D = -softplus(-logit)` summed per scene.
    fn log_d(&self, g: &mut Graph, logits: Var, b: &Batch) -> Result<Var> {
        let n = g.neg(logits);
        let sp = g.softplus(n);
        let l = g.neg(sp);
        b.scene_sum(g, l)
    }

    /// `log(1 - D) = -softplus(logit)` summed per scene.
    fn log_one_minus_d(&self, g: &mut Graph, logits: Var, b: &Batch) -> Result<Var> {
        let sp = g.softplus(logits);
        let l = g.neg(sp);
        b.scene_sum(g, l)
    }

    fn generate_k(&self, g: &mut Graph, p: &Bound, x: Var, b: &Batch, k: usize, seed: u64) -> Result<Vec<Var>> {
        let c = self.encode(g, p, x, b)?;
        (0..k)
            .map(|i| {
                let z = g.constant(candidate_noise(b.rows(), self.arch.latent, seed::derive(seed, "gan", 0), i));
                self.decode(g, p, c, z, x, b)
            })
            .collect()
    }

    /// Per-scene discriminator loss `-(log D(Y) + mean_k log(1 - D(Ŷ_k)))`,
    /// `[B]`. Fakes enter as given.
    pub fn disc_loss(&self, g: &mut Graph, p: &Bound, x: Var, b: &Batch, fakes: &[Var]) -> Result<Var> {
        let y = g.constant(b.y.clone());
        let lr = self.disc_logits(g, p, x, y, b)?;
        let real = self.log_d(g, lr, b)?;
        let mut fake_terms = Vec::with_capacity(fakes.len());
        for &f in fakes {
            let lf = self.disc_logits(g, p, x, f, b)?;
            fake_terms.push(self.log_one_minus_d(g, lf, b)?);
        }
        let mut acc = fake_terms[0];
        for &t in &fake_terms[1..] {
            acc = g.add(acc, t)?;
        }
        let fake = g.scale(acc, 1.0 / fakes.len() as f64);
        let s = g.add(real, fake)?;
        Ok(g.neg(s))
    }

    /// Per-scene generator terms `(-mean_k log D(Ŷ_k), min_k ‖Ŷ_k − Y‖²)`.
    pub fn gen_terms(&self, g: &mut Graph, p: &Bound, x: Var, b: &Batch, k: usize, seed: u64) -> Result<(Var, Var)> {
        if k == 0 {
            return Err(PredictorError::Shape("K must be >= 1".into()));
        }
        let y = g.constant(b.y.clone());
        let fakes = self.generate_k(g, p, x, b, k, seed)?;
        let mut adv = None;
        let mut errs = Vec::with_capacity(k);
        for &f in &fakes {
            let l = self.disc_logits(g, p, x, f, b)?;
            let ld = self.log_d(g, l, b)?;
            adv = Some(match adv {
                None => ld,
                Some(a) => g.add(a, ld)?,
            });
            let e = b.scene_sq_error(g, f, y)?;
            errs.push(g.reshape(e, &[b.num_scenes(), 1])?);
        }
        let adv = g.scale(adv.unwrap(), -1.0 / k as f64);
        let stacked = g.concat(&errs, 1)?;
        let div = g.min_over_axis(stacked, 1)?;
        Ok((adv, div))
    }

    /// Both adversarial losses as batch means: (discriminator, generator).
    pub fn loss_gan(&self, b: &Batch, k: usize, seed: u64) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(b.x.clone());
        let fakes = self.generate_k(&mut g, &p, x, b, k, seed)?;
        let d = self.disc_loss(&mut g, &p, x, b, &fakes)?;
        let d = g.mean(d)?;
        let gen = self.loss_total(&mut g, &p, x, b, k, seed)?;
        let gen = g.mean(gen)?;
        Ok((g.scalar(d), g.scalar(gen)))
    }

    /// One discriminator update on detached fakes generated from history
    /// `x`. Returns (loss, mean D(Y), mean D(Ŷ_0)) before the update.
    pub fn disc_step(&mut self, b: &Batch, x: &Tensor, k: usize, seed: u64, opt: &mut Adam) -> Result<(f64, f64, f64)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let fake_vals: Vec<Tensor> = self
            .generate_k(&mut g, &p, xv, b, k, seed)?
            .into_iter()
            .map(|v| g.value(v).clone())
            .collect();

        let mut g = Graph::new();
        let p = self.params.bind_partial(&mut g, DISCRIMINATOR);
        let xv = g.constant(x.clone());
        let fakes: Vec<Var> = fake_vals.iter().map(|f| g.constant(f.clone())).collect();
        let y = g.constant(b.y.clone());
        let lr = self.disc_logits(&mut g, &p, xv, y, b)?;
        let d_real = g.value(lr).data().iter().map(|&l| crate::autodiff::sigmoid_value(l)).sum::<f64>() / b.rows() as f64;
        let lf = self.disc_logits(&mut g, &p, xv, fakes[0], b)?;
        let d_fake = g.value(lf).data().iter().map(|&l| crate::autodiff::sigmoid_value(l)).sum::<f64>() / b.rows() as f64;
        let dl = self.disc_loss(&mut g, &p, xv, b, &fakes)?;
        let dl = g.mean(dl)?;
        let disc_loss = g.scalar(dl);
        if !disc_loss.is_finite() {
            return Err(PredictorError::NonFinite(format!("discriminator loss {disc_loss}")));
        }
        let grads = p.collect(&g.backward(dl)?);
        opt.apply(&mut self.params, &only(grads, DISCRIMINATOR));
        Ok((disc_loss, d_real, d_fake))
    }

    /// One discriminator update on detached fakes, then one generator
    /// update against the updated discriminator.
    pub fn train_step_alternating(&mut self, b: &Batch, k: usize, seed: u64, opt: &mut Adam) -> Result<GanStepLog> {
        let (disc_loss, d_real, d_fake) = self.disc_step(b, &b.x, k, seed, opt)?;
        let mut g = Graph::new();
        let p = self.params.bind_partial(&mut g, GENERATOR);
        let x = g.constant(b.x.clone());
        let (adv, div) = self.gen_terms(&mut g, &p, x, b, k, seed)?;
        let gen_adv = g.value(adv).data().iter().sum::<f64>() / b.num_scenes() as f64;
        let gen_diversity = g.value(div).data().iter().sum::<f64>() / b.num_scenes() as f64;
        let total = g.add(adv, div)?;
        let total = g.mean(total)?;
        if !g.scalar(total).is_finite() {
            return Err(PredictorError::NonFinite(format!("generator loss {}", g.scalar(total))));
        }
        let grads = p.collect(&g.backward(total)?);
        opt.apply(&mut self.params, &only(grads, GENERATOR));
        Ok(GanStepLog { disc_loss, gen_adv, gen_diversity, d_real, d_fake })
    }
}

fn only(grads: BTreeMap<String, Tensor>, prefixes: &[&str]) -> BTreeMap<String, Tensor> {
    grads.into_iter().filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p))).collect()
}

impl Predictor for CganModel {
    fn arch(&self) -> &Arch {
        &self.arch
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn encoder_prefixes(&self) -> &'static [&'static str] {
        &["enc."]
    }

    fn encode(&self, g: &mut Graph, p: &Bound, x: Var, b: &Batch) -> Result<Var> {
        encode_context(g, p, "enc", &self.arch, x, b)
    }

    fn latent(&self, g: &mut Graph, _p: &Bound, _c: Var, u: Tensor) -> Result<Var> {
        Ok(g.constant(u))
    }

    fn latent_mode(&self, g: &mut Graph, _p: &Bound, c: Var) -> Result<Var> {
        let rows = g.shape(c)[0];
        Ok(g.constant(Tensor::zeros(&[rows, self.arch.latent])))
    }

    fn decode(&self, g: &mut Graph, p: &Bound, c: Var, z: Var, x: Var, b: &Batch) -> Result<Var> {
        decode_steps(g, p, "dec", &self.arch, c, z, x, b)
    }

    /// Generator objective: non-saturating adversarial term plus diversity.
    fn loss_total(&self, g: &mut Graph, p: &Bound, x: Var, b: &Batch, k: usize, seed: u64) -> Result<Var> {
        let (adv, div) = self.gen_terms(g, p, x, b, k, seed)?;
        Ok(g.add(adv, div)?)
    }
}
