//! Checkpoint files: `{"format_version":1,"arch":{...},"params":{name:[floats]}}`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Arch, Batch, CganModel, CvaeModel, Family, Gaussian, Predictor, PredictorError, Result};
use crate::nn::{Bound, ParamStore};
use crate::{Graph, Tensor, Var};

pub const FORMAT_VERSION: u32 = 1;

/// Either predictor family behind one type.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Cvae(CvaeModel),
    Cgan(CganModel),
}

impl Model {
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        Ok(match arch.kind {
            Family::Cvae => Model::Cvae(CvaeModel::new(arch, seed)?),
            Family::Cgan => Model::Cgan(CganModel::new(arch, seed)?),
        })
    }

    pub fn family(&self) -> Family {
        self.arch().kind
    }

    fn inner(&self) -> &dyn Predictor {
        match self {
            Model::Cvae(m) => m,
            Model::Cgan(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Predictor {
        match self {
            Model::Cvae(m) => m,
            Model::Cgan(m) => m,
        }
    }
}

impl Predictor for Model {
    fn arch(&self) -> &Arch {
        self.inner().arch()
    }
    fn params(&self) -> &ParamStore {
        self.inner().params()
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        self.inner_mut().params_mut()
    }
    fn encoder_prefixes(&self) -> &'static [&'static str] {
        self.inner().encoder_prefixes()
    }
    fn encode(&self, g: &mut Graph, p: &Bound, x: Var, b: &Batch) -> Result<Var> {
        self.inner().encode(g, p, x, b)
    }
    fn latent(&self, g: &mut Graph, p: &Bound, c: Var, u: Tensor) -> Result<Var> {
        self.inner().latent(g, p, c, u)
    }
    fn latent_mode(&self, g: &mut Graph, p: &Bound, c: Var) -> Result<Var> {
        self.inner().latent_mode(g, p, c)
    }
    fn decode(&self, g: &mut Graph, p: &Bound, c: Var, z: Var, x: Var, b: &Batch) -> Result<Var> {
        self.inner().decode(g, p, c, z, x, b)
    }
    fn posterior(&self, g: &mut Graph, p: &Bound, c: Var, x: Var, y: Var, b: &Batch) -> Result<Option<Gaussian>> {
        self.inner().posterior(g, p, c, x, y, b)
    }
    fn loss_total(&self, g: &mut Graph, p: &Bound, x: Var, b: &Batch, k: usize, seed: u64) -> Result<Var> {
        self.inner().loss_total(g, p, x, b, k, seed)
    }
}

/// Names and shapes of `got` must match `reference` exactly.
pub fn check_params(reference: &ParamStore, got: &ParamStore) -> Result<()> {
    for (name, t) in reference.iter() {
        let g = got.get(name).ok_or_else(|| PredictorError::Checkpoint(format!("missing parameter `{name}`")))?;
        if g.shape() != t.shape() {
            return Err(PredictorError::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, architecture needs {:?}",
                g.shape(),
                t.shape()
            )));
        }
    }
    if let Some(extra) = got.names().find(|n| reference.get(n).is_none()) {
        return Err(PredictorError::Checkpoint(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct File {
    format_version: u32,
    arch: Arch,
    params: BTreeMap<String, Vec<f64>>,
}

pub fn to_json(model: &Model) -> String {
    let file = File {
        format_version: FORMAT_VERSION,
        arch: model.arch().clone(),
        params: model.params().iter().map(|(k, v)| (k.clone(), v.data().to_vec())).collect(),
    };
    serde_json::to_string(&file).expect("checkpoint serializes")
}

pub fn from_json(text: &str) -> Result<Model> {
    let value: Value = serde_json::from_str(text).map_err(|e| PredictorError::Checkpoint(e.to_string()))?;
    let version = value.get("format_version").and_then(Value::as_u64);
    if version != Some(FORMAT_VERSION as u64) {
        return Err(PredictorError::Checkpoint(format!("format_version {version:?}, expected {FORMAT_VERSION}")));
    }
    let arch: Arch = serde_json::from_value(value.get("arch").cloned().unwrap_or(Value::Null))
        .map_err(|e| PredictorError::Checkpoint(format!("arch: {e}")))?;
    arch.validate()?;
    let raw: BTreeMap<String, Vec<f64>> = serde_json::from_value(value.get("params").cloned().unwrap_or(Value::Null))
        .map_err(|e| PredictorError::Checkpoint(format!("params: {e}")))?;
    // Shapes come from the architecture, lengths from the file.
    let reference = Model::new(arch.clone(), 0)?;
    let mut store = ParamStore::default();
    for (name, data) in raw {
        let shape = reference
            .params()
            .get(&name)
            .ok_or_else(|| PredictorError::Checkpoint(format!("unexpected parameter `{name}`")))?
            .shape()
            .to_vec();
        let t = Tensor::new(shape, data).map_err(|e| PredictorError::Checkpoint(format!("parameter `{name}`: {e}")))?;
        store.insert(name, t);
    }
    Ok(match arch.kind {
        Family::Cvae => Model::Cvae(CvaeModel::from_params(arch, store)?),
        Family::Cgan => Model::Cgan(CganModel::from_params(arch, store)?),
    })
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, to_json(model)).map_err(|source| PredictorError::Io { path: path.display().to_string(), source })
}

pub fn load(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(|source| PredictorError::Io { path: path.display().to_string(), source })?;
    from_json(&text)
}
