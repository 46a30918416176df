//! Conditional VAE: context encoder f, conditional Gaussian prior,
//! posterior q(Z | Y, X) and a step decoder.

use super::{
    add_decoder_params, add_encoder_params, candidate_noise, decode_steps, encode_context, kl_rows, reparameterize,
    standard_normal, Arch, Batch, Family, Gaussian, Predictor, PredictorError, Result, LOGSIG_CLAMP,
};
use crate::nn::{self, Bound, ParamStore};
use crate::{seed, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeModel {
    arch: Arch,
    params: ParamStore,
}

/// Prefixes of θ (encoder, prior, decoder); φ is everything under `post`.
pub const THETA: &[&str] = &["enc.", "prior.", "dec."];
pub const PHI: &[&str] = &["post."];

impl CvaeModel {
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        if arch.kind != Family::Cvae {
            return Err(PredictorError::Unsupported(format!("arch kind {:?} for a CVAE", arch.kind)));
        }
        arch.validate()?;
        let mut rng = seed::rng(seed);
        let mut p = ParamStore::default();
        let (c, hid, l, e) = (arch.context_dim(), arch.hidden, arch.latent, arch.embed);
        add_encoder_params(&mut p, "enc", &arch, &mut rng);
        p.add_linear("prior.l1", c, hid, 1.0, &mut rng);
        p.add_linear("prior.mu", hid, l, 0.5, &mut rng);
        p.add_linear("prior.logsig", hid, l, 0.1, &mut rng);
        p.add_linear("post.fut.l1", 2 * arch.future_len, hid, 1.0, &mut rng);
        p.add_linear("post.fut.l2", hid, e, 1.0, &mut rng);
        p.add_linear("post.l1", c + e, hid, 1.0, &mut rng);
        p.add_linear("post.mu", hid, l, 0.5, &mut rng);
        p.add_linear("post.logsig", hid, l, 0.1, &mut rng);
        add_decoder_params(&mut p, "dec", &arch, &mut rng);
        Ok(Self { arch, params: p })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against a fresh instance of `arch`.
    pub fn from_params(arch: Arch, params: ParamStore) -> Result<Self> {
        let reference = Self::new(arch.clone(), 0)?;
        super::checkpoint::check_params(&reference.params, &params)?;
        Ok(Self { arch, params })
    }

    fn gaussian_head(&self, g: &mut Graph, p: &Bound, prefix: &str, h: Var) -> Result<Gaussian> {
        let mu = nn::linear(g, p, &format!("{prefix}.mu"), h)?;
        let ls = nn::linear(g, p, &format!("{prefix}.logsig"), h)?;
        let logsig = g.clamp(ls, -LOGSIG_CLAMP, LOGSIG_CLAMP);
        Ok(Gaussian { mu, logsig })
    }

    /// Conditional prior p(Z | X) from the context code.
    pub fn prior(&self, g: &mut Graph, p: &Bound, c: Var) -> Result<Gaussian> {
        let h = nn::linear(g, p, "prior.l1", c)?;
        let h = nn::activate(g, h, self.arch.activation);
        self.gaussian_head(g, p, "prior", h)
    }

    /// Approximate posterior q(Z | Y, X).
    pub fn posterior_of(&self, g: &mut Graph, p: &Bound, c: Var, x: Var, y: Var, b: &Batch) -> Result<Gaussian> {
        let lt = g.constant(b.last_t.clone());
        let anchor = g.matmul(x, lt)?;
        let fut = g.sub(y, anchor)?;
        let fut = g.scale(fut, 1.0 / self.arch.pos_scale);
        let fe = nn::mlp2(g, p, "post.fut", fut, self.arch.activation)?;
        let inp = g.concat(&[c, fe], 1)?;
        let h = nn::linear(g, p, "post.l1", inp)?;
        let h = nn::activate(g, h, self.arch.activation);
        self.gaussian_head(g, p, "post", h)
    }

    /// Loss terms per scene: (reconstruction, KL, diversity), each `[B]`.
    pub fn loss_terms(&self, g: &mut Graph, p: &Bound, x: Var, b: &Batch, k: usize, seed: u64) -> Result<(Var, Var, Var)> {
        if k == 0 {
            return Err(PredictorError::Shape("K must be >= 1".into()));
        }
        let y = g.constant(b.y.clone());
        let c = self.encode(g, p, x, b)?;
        let prior = self.prior(g, p, c)?;
        let post = self.posterior_of(g, p, c, x, y, b)?;
        let u = standard_normal(b.rows(), self.arch.latent, seed::derive(seed, "posterior", 0));
        let zq = reparameterize(g, post, u)?;
        let recon = self.decode(g, p, c, zq, x, b)?;
        let recon = b.scene_sq_error(g, recon, y)?;
        let kl = kl_rows(g, post, prior)?;
        let kl = b.scene_sum(g, kl)?;
        let mut errs = Vec::with_capacity(k);
        for i in 0..k {
            let u = candidate_noise(b.rows(), self.arch.latent, seed::derive(seed, "prior", 0), i);
            let z = reparameterize(g, prior, u)?;
            let yk = self.decode(g, p, c, z, x, b)?;
            let e = b.scene_sq_error(g, yk, y)?;
            errs.push(g.reshape(e, &[b.num_scenes(), 1])?);
        }
        let stacked = g.concat(&errs, 1)?;
        let div = g.min_over_axis(stacked, 1)?;
        Ok((recon, kl, div))
    }

    pub fn arch_ref(&self) -> &Arch {
        &self.arch
    }
}

impl Predictor for CvaeModel {
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

    fn latent(&self, g: &mut Graph, p: &Bound, c: Var, u: Tensor) -> Result<Var> {
        let prior = self.prior(g, p, c)?;
        reparameterize(g, prior, u)
    }

    fn latent_mode(&self, g: &mut Graph, p: &Bound, c: Var) -> Result<Var> {
        Ok(self.prior(g, p, c)?.mu)
    }

    fn decode(&self, g: &mut Graph, p: &Bound, c: Var, z: Var, x: Var, b: &Batch) -> Result<Var> {
        decode_steps(g, p, "dec", &self.arch, c, z, x, b)
    }

    fn posterior(&self, g: &mut Graph, p: &Bound, c: Var, x: Var, y: Var, b: &Batch) -> Result<Option<Gaussian>> {
        Ok(Some(self.posterior_of(g, p, c, x, y, b)?))
    }

    fn loss_total(&self, g: &mut Graph, p: &Bound, x: Var, b: &Batch, k: usize, seed: u64) -> Result<Var> {
        let (r, kl, d) = self.loss_terms(g, p, x, b, k, seed)?;
        let s = g.add(r, kl)?;
        Ok(g.add(s, d)?)
    }
}
