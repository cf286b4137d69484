//! Datasets of `(f, g)` records and their directory layout.
//!
//! ```text
//! <dir>/manifest.json        system, physics config, seed, record list
//! <dir>/records/NNNNNN_f.tns signal (f64)
//! <dir>/records/NNNNNN_g.tns measurement (f64)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{config_hash, read_json, write_bytes, write_json};
use crate::physics::PhysicsConfig;
use crate::tensor_file::{self, DType, TensorData};
use crate::train::Example;
use crate::types::{DatasetRecord, MeasurementVec, SignalVec, SystemId};

pub const DATASET_FORMAT: &str = "varsig-dataset";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub physics: PhysicsConfig,
    /// Where the signals came from, e.g. `mnist:train` or `synthetic`.
    pub source: String,
    pub seed: u64,
    pub records: Vec<DatasetRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordEntry {
    id: String,
    seed: u64,
    f: String,
    g: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    system: SystemId,
    count: usize,
    seed: u64,
    source: String,
    config_hash: String,
    physics: PhysicsConfig,
    records: Vec<RecordEntry>,
}

pub fn record_id(i: usize) -> String {
    format!("{i:06}")
}

impl Dataset {
    pub fn system(&self) -> SystemId {
        self.physics.system()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn examples(&self) -> Vec<Example> {
        self.records
            .iter()
            .map(|r| Example {
                f: r.f.as_flat().to_vec(),
                g: r.g.as_flat().to_vec(),
            })
            .collect()
    }

    pub fn config_hash(&self) -> Result<String> {
        config_hash(&(&self.physics, self.seed, &self.source, self.records.len()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            let id = record_id(i);
            let f = format!("records/{id}_f.tns");
            let g = format!("records/{id}_g.tns");
            let ft = TensorData::new(r.f.shape().to_vec(), r.f.as_flat().to_vec())?;
            let gt = TensorData::new(r.g.shape().to_vec(), r.g.as_flat().to_vec())?;
            write_bytes(&dir.join(&f), &tensor_file::encode(&ft, DType::F64)?)?;
            write_bytes(&dir.join(&g), &tensor_file::encode(&gt, DType::F64)?)?;
            entries.push(RecordEntry {
                id,
                seed: r.seed,
                f,
                g,
                meta: r.meta.clone(),
            });
        }
        write_json(
            &dir.join("manifest.json"),
            &Manifest {
                format: DATASET_FORMAT.into(),
                version: 1,
                system: self.system(),
                count: self.records.len(),
                seed: self.seed,
                source: self.source.clone(),
                config_hash: self.config_hash()?,
                physics: self.physics.clone(),
                records: entries,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = read_json(&dir.join("manifest.json"))?;
        if m.format != DATASET_FORMAT || m.version != 1 {
            return Err(Error::Config(format!("unsupported dataset format {} v{}", m.format, m.version)));
        }
        if m.physics.system() != m.system {
            return Err(Error::SystemMismatch {
                expected: m.system,
                found: m.physics.system(),
            });
        }
        if m.count != m.records.len() {
            return Err(Error::Config(format!(
                "manifest count {} but {} records listed",
                m.count,
                m.records.len()
            )));
        }
        let fm = m.physics.build()?;
        let records = m
            .records
            .into_iter()
            .map(|e| {
                let f = tensor_file::read(dir.join(&e.f))?;
                let g = tensor_file::read(dir.join(&e.g))?;
                Ok(DatasetRecord {
                    f: SignalVec::new(m.system, f.dims, f.data)?,
                    g: MeasurementVec::new(m.system, g.dims, g.data, fm.nonneg_measurement())?,
                    seed: e.seed,
                    meta: e.meta,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            physics: m.physics,
            source: m.source,
            seed: m.seed,
            records,
        })
    }
}
