use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::container::Container;
use crate::error::{MmapError, Result};
use crate::model::{MmapModel, ModelConfig};
use crate::protobank::PrototypeBank;
use crate::util::hash_json;

pub const FORMAT_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

/// Model parameters, banks and the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: MmapModel,
    pub train: TrainConfig,
    pub epoch: usize,
    pub gene_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    model: ModelConfig,
    train: TrainConfig,
    n_genes: usize,
    gene_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    slide_id: String,
    seed: u64,
    config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u64,
    stage: Stage,
    epoch: usize,
    seed: u64,
    config: Snapshot,
    banks: Vec<BankMeta>,
}

fn bank_prefix(slide_id: &str) -> String {
    format!("bank/{slide_id}/")
}

impl Checkpoint {
    pub fn config_snapshot(&self) -> serde_json::Value {
        serde_json::to_value(Snapshot {
            model: self.model.config.clone(),
            train: self.train.clone(),
            n_genes: self.model.n_genes,
            gene_names: self.gene_names.clone(),
        })
        .expect("serializable")
    }

    pub fn config_hash(&self) -> String {
        hash_json(&self.config_snapshot())
    }

    pub fn to_container(&self) -> Container {
        let meta = Meta {
            format_version: FORMAT_VERSION,
            stage: self.stage,
            epoch: self.epoch,
            seed: self.model.seed,
            config: serde_json::from_value(self.config_snapshot()).expect("round trip"),
            banks: self
                .model
                .banks
                .values()
                .map(|b| BankMeta {
                    slide_id: b.slide_id.clone(),
                    seed: b.seed,
                    config_hash: b.config_hash.clone(),
                })
                .collect(),
        };
        let mut c = Container::new("checkpoint", serde_json::to_value(meta).expect("serializable"));
        for (_, p) in self.model.store.iter() {
            c.push_matrix(p.name.clone(), &p.value);
        }
        for bank in self.model.banks.values() {
            bank.push_arrays(&mut c, &bank_prefix(&bank.slide_id));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "checkpoint" {
            return Err(MmapError::Checkpoint(format!("expected a checkpoint, found `{}`", c.kind)));
        }
        let meta: Meta = serde_json::from_value(c.meta.clone())
            .map_err(|e| MmapError::Checkpoint(format!("bad checkpoint manifest: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(MmapError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                meta.format_version
            )));
        }
        let snap = meta.config;
        let mut model = MmapModel::new(&snap.model, snap.n_genes, meta.seed)?;
        if meta.stage == Stage::Stage2 {
            model.enter_stage2()?;
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let value = c.matrix(&name)?;
            if value.dim() != model.store.get(id).dim() {
                return Err(MmapError::Checkpoint(format!("array `{name}` has the wrong shape")));
            }
            *model.store.get_mut(id) = value;
        }
        let n_bank_arrays = 3 * meta.banks.len();
        if c.arrays.len() != model.store.len() + n_bank_arrays {
            return Err(MmapError::Checkpoint("checkpoint holds arrays the model does not use".into()));
        }
        for b in meta.banks {
            let bank = PrototypeBank::from_arrays(c, &bank_prefix(&b.slide_id), b.slide_id.clone(), b.seed, b.config_hash)?;
            model.banks.insert(b.slide_id, bank);
        }
        Ok(Self {
            stage: meta.stage,
            model,
            train: snap.train,
            epoch: meta.epoch,
            gene_names: snap.gene_names,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
