//! Checkpoints as a single safetensors file.
//!
//! Tensors are stored under `param.<name>`, `buffer.<name>`,
//! `optim.m.<name>` and `optim.v.<name>`. One metadata key, `pagty`, holds a
//! JSON document with the model configuration (TOML text), the training
//! configuration, epoch, optimizer step and RNG seed. Writing the same
//! state twice produces identical bytes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamKind;

pub const FORMAT: &str = "pagty-checkpoint-1";
const META_KEY: &str = "pagty";

/// Everything besides the weights needed to resume training.
#[derive(Debug, Clone)]
pub struct TrainingState {
    /// Number of completed epochs.
    pub epoch: u64,
    /// Seed from which every per-epoch and per-sample stream is derived.
    pub seed: u64,
    pub optimizer: Option<Adam>,
    /// Training configuration as TOML text.
    pub train_config: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format: String,
    model_config: String,
    train_config: Option<String>,
    epoch: u64,
    seed: u64,
    adam: Option<AdamConfig>,
    adam_step: u64,
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
}

/// Serialise a model and its training state.
pub fn to_bytes(model: &Model, state: &TrainingState) -> Result<Vec<u8>> {
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
    for (name, e) in model.params().entries() {
        let prefix = match e.kind {
            ParamKind::Trainable => "param",
            ParamKind::Buffer => "buffer",
        };
        tensors.insert(format!("{prefix}.{name}"), (e.var.dims().to_vec(), tensor_bytes(e.var.as_tensor())?));
    }
    if let Some(opt) = &state.optimizer {
        for (kind, map) in [("m", &opt.m), ("v", &opt.v)] {
            for (name, t) in map {
                tensors.insert(format!("optim.{kind}.{name}"), (t.dims().to_vec(), tensor_bytes(t)?));
            }
        }
    }
    let meta = Meta {
        format: FORMAT.to_string(),
        model_config: model.config().to_toml()?,
        train_config: state.train_config.clone(),
        epoch: state.epoch,
        seed: state.seed,
        adam: state.optimizer.as_ref().map(|o| o.config),
        adam_step: state.optimizer.as_ref().map_or(0, |o| o.step),
    };
    let json = serde_json::to_string(&meta).map_err(|e| Error::data(format!("checkpoint metadata: {e}")))?;
    let views = tensors
        .iter()
        .map(|(k, (shape, bytes))| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::data(format!("checkpoint tensor {k}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, Some(HashMap::from([(META_KEY.to_string(), json)])))
        .map_err(|e| Error::data(format!("writing checkpoint: {e}")))
}

pub fn save(path: &Path, model: &Model, state: &TrainingState) -> Result<()> {
    let bytes = to_bytes(model, state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn view_tensor(v: &TensorView) -> Result<Tensor> {
    if v.dtype() != Dtype::F32 {
        return Err(Error::data(format!("checkpoint tensor has dtype {:?}", v.dtype())));
    }
    let data: Vec<f32> = v
        .data()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(data, v.shape(), &Device::Cpu)?)
}

/// Rebuild the model and training state from serialised bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, TrainingState)> {
    let bad = |e: safetensors::SafeTensorError| Error::data(format!("reading checkpoint: {e}"));
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(bad)?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::data("checkpoint lacks its metadata record"))?;
    let meta: Meta = serde_json::from_str(json).map_err(|e| Error::data(format!("checkpoint metadata: {e}")))?;
    if meta.format != FORMAT {
        return Err(Error::data(format!("unsupported checkpoint format {}", meta.format)));
    }
    let config = ModelConfig::from_toml(&meta.model_config)?;
    let model = build_model(&config)?;
    let st = SafeTensors::deserialize(bytes).map_err(bad)?;

    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut restored = 0;
    for name in st.names() {
        let t = view_tensor(&st.tensor(name).map_err(bad)?)?;
        if let Some(p) = name.strip_prefix("param.").or_else(|| name.strip_prefix("buffer.")) {
            model.params().assign(p, &t)?;
            restored += 1;
        } else if let Some(p) = name.strip_prefix("optim.m.") {
            m.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix("optim.v.") {
            v.insert(p.to_string(), t);
        } else {
            return Err(Error::data(format!("unexpected checkpoint tensor {name}")));
        }
    }
    let expected = model.params().names().len();
    if restored != expected {
        return Err(Error::data(format!(
            "checkpoint holds {restored} of the model's {expected} tensors"
        )));
    }
    let optimizer = match meta.adam {
        Some(cfg) => Some(Adam::restore(cfg, meta.adam_step, m, v, model.params())?),
        None => None,
    };
    Ok((
        model,
        TrainingState {
            epoch: meta.epoch,
            seed: meta.seed,
            optimizer,
            train_config: meta.train_config,
        },
    ))
}

pub fn load(path: &Path) -> Result<(Model, TrainingState)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
