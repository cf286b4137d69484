//! On-disk model artifacts.
//!
//! ```text
//! <dir>/config.json           method, model config, physics config, hash
//! <dir>/stats.json            normalization constants
//! <dir>/params.manifest.json  parameter names, shapes and tensor files
//! <dir>/params/NNNN.tns       one f64 tensor per parameter
//! <dir>/optimizer/{m,v}NNNN.tns, train_state.json   Adam moments, curve
//! <dir>/loss_curve.csv
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{config_hash, read_json, write_bytes, write_json};
use crate::model::{Method, Model, ModelConfig, Stats};
use crate::nn::{Adam, AdamConfig};
use crate::physics::PhysicsConfig;
use crate::tensor_file::{self, TensorData};
use crate::train::{curve_csv, EpochRow, Trainer};

pub const PARAMS_FORMAT: &str = "varsig-params";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactConfig {
    pub method: Method,
    pub model: ModelConfig,
    pub physics: PhysicsConfig,
}

impl ArtifactConfig {
    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConfigFile {
    #[serde(flatten)]
    config: ArtifactConfig,
    config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub tensors: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainState {
    epochs_done: usize,
    adam: AdamConfig,
    adam_step: u64,
    curve: Vec<EpochRow>,
}

fn write_tensor(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let t = TensorData::new(dims.to_vec(), data.to_vec())?;
    write_bytes(path, &tensor_file::encode(&t, tensor_file::DType::F64)?)
}

fn tensor_dims(shape: &[usize]) -> Vec<usize> {
    // Tensor files hold rank <= 4; larger shapes are stored flat.
    if shape.len() <= 4 && !shape.is_empty() {
        shape.to_vec()
    } else {
        vec![shape.iter().product()]
    }
}

/// Writes config, stats and parameters.
pub fn save_model(model: &Model, dir: &Path) -> Result<()> {
    let cfg = ArtifactConfig {
        method: model.method(),
        model: model.config().clone(),
        physics: model.physics().clone(),
    };
    write_json(
        &dir.join("config.json"),
        &ConfigFile {
            config_hash: cfg.hash()?,
            config: cfg,
        },
    )?;
    write_json(&dir.join("stats.json"), model.stats())?;
    let p = model.params();
    let mut tensors = Vec::with_capacity(p.len());
    for id in 0..p.len() {
        let file = format!("params/{id:04}.tns");
        write_tensor(&dir.join(&file), &tensor_dims(p.shape(id)), p.value(id))?;
        tensors.push(ParamEntry {
            name: p.name(id).to_string(),
            shape: p.shape(id).to_vec(),
            file,
        });
    }
    write_json(
        &dir.join("params.manifest.json"),
        &ParamsManifest {
            format: PARAMS_FORMAT.into(),
            version: 1,
            dtype: "f64".into(),
            tensors,
        },
    )
}

pub fn load_config(dir: &Path) -> Result<ArtifactConfig> {
    let file: ConfigFile = read_json(&dir.join("config.json"))?;
    Ok(file.config)
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let cfg = load_config(dir)?;
    let stats: Stats = read_json(&dir.join("stats.json"))?;
    let manifest: ParamsManifest = read_json(&dir.join("params.manifest.json"))?;
    if manifest.format != PARAMS_FORMAT || manifest.version != 1 {
        return Err(Error::Config(format!(
            "unsupported parameter manifest {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut model = Model::new(cfg.model, cfg.method, cfg.physics, stats)?;
    let named = manifest
        .tensors
        .into_iter()
        .map(|e| {
            let t = tensor_file::read(dir.join(&e.file))?;
            Ok((e.name, e.shape, t.data))
        })
        .collect::<Result<Vec<_>>>()?;
    model.load_params(named)?;
    Ok(model)
}

/// Model files plus optimizer moments and the loss curve.
pub fn save_trainer(tr: &Trainer, dir: &Path) -> Result<()> {
    save_model(&tr.model, dir)?;
    for (i, (m, v)) in tr.opt.m.iter().zip(&tr.opt.v).enumerate() {
        write_tensor(&dir.join(format!("optimizer/m{i:04}.tns")), &[m.len()], m)?;
        write_tensor(&dir.join(format!("optimizer/v{i:04}.tns")), &[v.len()], v)?;
    }
    write_json(
        &dir.join("optimizer/train_state.json"),
        &TrainState {
            epochs_done: tr.epochs_done(),
            adam: tr.opt.cfg,
            adam_step: tr.opt.step,
            curve: tr.curve.clone(),
        },
    )?;
    write_bytes(&dir.join("loss_curve.csv"), curve_csv(&tr.curve).as_bytes())
}

/// Restores a trainer saved by [`save_trainer`] so training can resume.
pub fn load_trainer(dir: &Path) -> Result<Trainer> {
    let model = load_model(dir)?;
    let st: TrainState = read_json(&dir.join("optimizer/train_state.json"))?;
    if st.epochs_done != st.curve.len() {
        return Err(Error::State("train_state epoch count disagrees with its curve".into()));
    }
    let n = model.params().len();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let len = model.params().value(i).len();
        let mi = tensor_file::read(dir.join(format!("optimizer/m{i:04}.tns")))?.data;
        let vi = tensor_file::read(dir.join(format!("optimizer/v{i:04}.tns")))?.data;
        if mi.len() != len || vi.len() != len {
            return Err(Error::Shape(format!("optimizer state {i} does not match its parameter")));
        }
        m.push(mi);
        v.push(vi);
    }
    Ok(Trainer {
        model,
        opt: Adam {
            cfg: st.adam,
            step: st.adam_step,
            m,
            v,
        },
        curve: st.curve,
    })
}
