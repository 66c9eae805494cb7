//! Training state on disk.

use crate::backbone::BackboneConfig;
use crate::config::RunConfig;
use crate::container::{Container, StoredData, StoredTensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{Adam, Moments};
use crate::params::{ParamGroup, ParamStore};
use crate::prototype::{PrototypeConfig, Provenance};
use crate::tensor::{Real, Tensor};
use crate::trainer::{BestModel, EpochRecord, Progress, Trainer};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub progress: Progress,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestModel>,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    backbone: BackboneConfig,
    prototypes: PrototypeConfig,
    groups: BTreeMap<String, ParamGroup>,
    provenance: Vec<Option<Provenance>>,
}

#[derive(Serialize, Deserialize)]
struct BestMeta {
    epoch: usize,
    val_macro_auroc: Real,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    stage: String,
    config: RunConfig,
    progress: Progress,
    history: Vec<EpochRecord>,
    model: ModelMeta,
    best: Option<(BestMeta, ModelMeta)>,
    adam_steps: BTreeMap<String, u64>,
}

#[cfg(not(feature = "f32"))]
fn stored(t: &Tensor) -> StoredTensor {
    StoredTensor {
        shape: t.shape().to_vec(),
        data: StoredData::F64(t.data().to_vec()),
    }
}

#[cfg(feature = "f32")]
fn stored(t: &Tensor) -> StoredTensor {
    StoredTensor {
        shape: t.shape().to_vec(),
        data: StoredData::F32(t.data().to_vec()),
    }
}

fn tensor(c: &Container, name: &str) -> Result<Tensor> {
    let st = c.get(name)?;
    let data: Vec<Real> = match &st.data {
        StoredData::F64(v) => v.iter().map(|&x| x as Real).collect(),
        StoredData::F32(v) => v.iter().map(|&x| x as Real).collect(),
        StoredData::U8(_) => return Err(Error::Format(format!("tensor `{name}` is not floating point"))),
    };
    Tensor::new(st.shape.clone(), data)
}

fn put_model(c: &mut Container, prefix: &str, m: &Model) -> ModelMeta {
    for (name, p) in m.params.iter() {
        c.insert(format!("{prefix}.param.{name}"), stored(&p.value));
    }
    for (j, s) in m.sources.iter().enumerate() {
        if let Some(img) = s {
            c.insert(format!("{prefix}.source.{j}"), stored(img));
        }
    }
    ModelMeta {
        backbone: m.backbone.clone(),
        prototypes: m.prototypes.clone(),
        groups: m.params.iter().map(|(n, p)| (n.to_string(), p.group)).collect(),
        provenance: m.provenance.clone(),
    }
}

fn get_model(c: &Container, prefix: &str, meta: &ModelMeta) -> Result<Model> {
    let mut params = ParamStore::new();
    for (name, &group) in &meta.groups {
        params.insert(name.clone(), group, tensor(c, &format!("{prefix}.param.{name}"))?);
    }
    let sources = (0..meta.provenance.len())
        .map(|j| {
            let key = format!("{prefix}.source.{j}");
            if c.tensors.contains_key(&key) {
                tensor(c, &key).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Model {
        backbone: meta.backbone.clone(),
        prototypes: meta.prototypes.clone(),
        params,
        provenance: meta.provenance.clone(),
        sources,
    };
    model.validate()?;
    Ok(model)
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer<'_>) -> Self {
        Self {
            config: t.config.clone(),
            model: t.model.clone(),
            optimizer: t.optimizer.clone(),
            progress: t.progress,
            history: t.history.clone(),
            best: t.best.clone(),
        }
    }

    /// Trainer that continues from this state.
    pub fn into_trainer(self, data: &Dataset) -> Result<Trainer<'_>> {
        let mut t = Trainer::new(self.config, data)?;
        t.model = self.model;
        t.optimizer = self.optimizer;
        t.progress = self.progress;
        t.history = self.history;
        t.best = self.best;
        Ok(t)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(self.config.hash(), serde_json::Value::Null);
        let model = put_model(&mut c, "model", &self.model);
        let best = self.best.as_ref().map(|b| {
            (
                BestMeta {
                    epoch: b.epoch,
                    val_macro_auroc: b.val_macro_auroc,
                },
                put_model(&mut c, "best", &b.model),
            )
        });
        for (name, st) in &self.optimizer.state {
            c.insert(format!("adam.m.{name}"), stored(&st.m));
            c.insert(format!("adam.v.{name}"), stored(&st.v));
        }
        let meta = Meta {
            kind: "checkpoint".into(),
            stage: self.progress.stage.to_string(),
            config: self.config.clone(),
            progress: self.progress,
            history: self.history.clone(),
            model,
            best,
            adam_steps: self.optimizer.state.iter().map(|(k, v)| (k.clone(), v.step)).collect(),
        };
        c.metadata = serde_json::to_value(meta).expect("metadata serializes");
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: Meta = serde_json::from_value(c.metadata.clone())?;
        if meta.kind != "checkpoint" {
            return Err(Error::Format(format!("expected a checkpoint, found `{}`", meta.kind)));
        }
        if meta.config.hash() != c.config_hash {
            return Err(Error::Format(
                "embedded config does not match the header hash".into(),
            ));
        }
        let model = get_model(c, "model", &meta.model)?;
        let best = meta
            .best
            .as_ref()
            .map(|(b, m)| {
                Ok::<_, Error>(BestModel {
                    epoch: b.epoch,
                    val_macro_auroc: b.val_macro_auroc,
                    model: get_model(c, "best", m)?,
                })
            })
            .transpose()?;
        let mut optimizer = Adam::new(meta.config.train.optimizer);
        for (name, &step) in &meta.adam_steps {
            optimizer.state.insert(
                name.clone(),
                Moments {
                    step,
                    m: tensor(c, &format!("adam.m.{name}"))?,
                    v: tensor(c, &format!("adam.v.{name}"))?,
                },
            );
        }
        Ok(Self {
            config: meta.config,
            model,
            optimizer,
            progress: meta.progress,
            history: meta.history,
            best,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
