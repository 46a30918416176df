//! Named parameters, dense layers and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Gradients};
use crate::seed::Rng;
use crate::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Parameters keyed by name; iteration order is the key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Glorot-uniform weight `[fan_in, fan_out]` and zero bias `[1, fan_out]`.
    pub fn add_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) {
        let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        self.insert(format!("{prefix}.w"), Tensor::matrix(fan_in, fan_out, w).expect("finite init"));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]));
    }

    /// Binds every parameter into `g`, as leaves when `trainable` and as
    /// constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), if trainable { g.leaf(v.clone()) } else { g.constant(v.clone()) }))
            .collect();
        Bound { vars }
    }

    /// Binds parameters whose name starts with any of `trainable_prefixes`
    /// as leaves and the rest as constants.
    pub fn bind_partial(&self, g: &mut Graph, trainable_prefixes: &[&str]) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| {
                let train = trainable_prefixes.iter().any(|p| k.starts_with(p));
                (k.clone(), if train { g.leaf(v.clone()) } else { g.constant(v.clone()) })
            })
            .collect();
        Bound { vars }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// Parameter handles inside one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Replaces the handle for `name`, e.g. with a leaf under test.
    pub fn with_var(mut self, name: &str, v: Var) -> Self {
        self.vars.insert(name.to_string(), v);
        self
    }

    /// Gradients keyed by parameter name; parameters bound as constants or
    /// unreachable from the root are omitted.
    pub fn collect(&self, grads: &Gradients<f64>) -> BTreeMap<String, Tensor> {
        self.vars.iter().filter_map(|(k, &v)| grads.get(v).map(|t| (k.clone(), t.clone()))).collect()
    }
}

pub fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Tanh => g.tanh(x),
        Activation::Identity => x,
    }
}

/// `x · W + b` with the bias tiled over rows.
pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var, AutodiffError> {
    let xw = g.matmul(x, p.var(&format!("{prefix}.w")))?;
    let rows = g.shape(xw)[0];
    let b = g.tile_rows(p.var(&format!("{prefix}.b")), rows)?;
    g.add(xw, b)
}

/// Two dense layers with `act` between them and a linear output.
pub fn mlp2(g: &mut Graph, p: &Bound, prefix: &str, x: Var, act: Activation) -> Result<Var, AutodiffError> {
    let h = linear(g, p, &format!("{prefix}.l1"), x)?;
    let h = activate(g, h, act);
    linear(g, p, &format!("{prefix}.l2"), h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam over named parameters. Generic so it can drive f32 or f64 buffers.
#[derive(Clone, Debug)]
pub struct Adam<T = f64> {
    pub config: AdamConfig,
    step: BTreeMap<String, u64>,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: BTreeMap::new(), m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Updates `param` in place from `grad`. Each name keeps its own step
    /// count, so parameter groups updated on different schedules (the two
    /// players of a GAN) get correct bias correction.
    pub fn update(&mut self, name: &str, param: &mut [T], grad: &[T]) {
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let t = self.step.entry(name.to_string()).or_insert(0);
        *t += 1;
        let bc1 = T::one() - b1.powi(*t as i32);
        let bc2 = T::one() - b2.powi(*t as i32);
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![T::zero(); param.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![T::zero(); param.len()]);
        for i in 0..param.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * grad[i];
            v[i] = b2 * v[i] + (T::one() - b2) * grad[i] * grad[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            param[i] = param[i] - T::lit(c.lr) * mh / (vh.sqrt() + T::lit(c.eps));
        }
    }
}

impl Adam<f64> {
    /// Applies gradients to the matching entries of `store`.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        for (name, g) in grads {
            let p = store.get_mut(name).unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let mut data = p.data().to_vec();
            self.update(name, &mut data, g.data());
            *p = Tensor::new(p.shape().to_vec(), data).expect("finite update");
        }
    }
}
