//! Dataset splits, their manifest and on-disk layout.
//!
//! A dataset directory holds `manifest.json` plus one container per split
//! with `images` (`u8 [N, 1, H, H]`), `masks` (`u8 [N, H, H]`) and `labels`
//! (`u8 [N]`).

use super::synth::{generate_lesion, sample_negative_patches, GeneratorConfig, Sample, SampleMeta};
use crate::classes::{MarginClass, NUM_CLASSES};
use crate::container::{Container, StoredData, StoredTensor, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLITS: [&str; 4] = ["train", "val", "eval", "negatives"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub eval_per_class: usize,
    /// Training pool of negative patches.
    pub negatives: usize,
    /// Negative patches appended to the eval split.
    pub eval_negatives: usize,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            image_size: 64,
            train_per_class: 400,
            val_per_class: 50,
            eval_per_class: 100,
            negatives: 500,
            eval_negatives: 50,
            generator: GeneratorConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::config("data.image_size", "must be at least 16"));
        }
        if self.train_per_class == 0 {
            return Err(Error::config("data.train_per_class", "every class needs training samples"));
        }
        if self.eval_per_class == 0 {
            return Err(Error::config("data.eval_per_class", "every class needs eval samples"));
        }
        self.generator.validate()
    }
}

/// Independent RNG for sample `index` of stream `name`.
pub fn sample_rng(seed: u64, name: &str, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update((index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub name: String,
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<MarginClass> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for s in &self.samples {
            c[s.label.index()] += 1;
        }
        c
    }

    /// Images of the given samples as `[B, 1, H, W]`.
    pub fn images(&self, idx: &[usize]) -> Result<Tensor> {
        let parts = idx
            .iter()
            .map(|&i| self.sample(i).map(|s| &s.image))
            .collect::<Result<Vec<_>>>()?;
        stack(&parts)
    }

    /// Masks of the given samples as `[B, H, W]`.
    pub fn masks(&self, idx: &[usize]) -> Result<Tensor> {
        let parts = idx
            .iter()
            .map(|&i| self.sample(i).map(|s| &s.mask))
            .collect::<Result<Vec<_>>>()?;
        stack(&parts)
    }

    pub fn all_images(&self) -> Result<Tensor> {
        self.images(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn sample(&self, i: usize) -> Result<&Sample> {
        self.samples
            .get(i)
            .ok_or_else(|| Error::invalid(format!("sample {i} out of range for split {}", self.name)))
    }

    pub fn find(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::shape("empty batch"))?;
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(parts.len() * first.len());
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::shape("samples of different sizes in one batch"));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub label: MarginClass,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub file: String,
    pub class_counts: BTreeMap<MarginClass, usize>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DataConfig,
    pub splits: BTreeMap<String, SplitManifest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub train: Split,
    pub val: Split,
    pub eval: Split,
    /// Training pool of negative patches.
    pub negatives: Split,
}

fn lesion_split(cfg: &DataConfig, name: &str, per_class: usize) -> Split {
    let n = per_class * MarginClass::MARGINS.len();
    let samples = (0..n)
        .map(|i| {
            let class = MarginClass::MARGINS[i % MarginClass::MARGINS.len()];
            let mut rng = sample_rng(cfg.seed, name, i);
            let mut s = generate_lesion(class, &mut rng, cfg.image_size, &cfg.generator);
            s.id = format!("{name}-{i:05}");
            s
        })
        .collect();
    Split {
        name: name.into(),
        samples,
    }
}

fn negative_samples(cfg: &DataConfig, stream: &str, prefix: &str, n: usize) -> Vec<Sample> {
    let mut out = sample_negative_patches(n, cfg.image_size, &cfg.generator, |i| {
        sample_rng(cfg.seed, stream, i)
    });
    for (i, s) in out.iter_mut().enumerate() {
        s.id = format!("{prefix}-{i:05}");
    }
    out
}

impl Dataset {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let train = lesion_split(cfg, "train", cfg.train_per_class);
        let val = lesion_split(cfg, "val", cfg.val_per_class);
        let mut eval = lesion_split(cfg, "eval", cfg.eval_per_class);
        eval.samples
            .extend(negative_samples(cfg, "eval-negatives", "eval-neg", cfg.eval_negatives));
        let negatives = Split {
            name: "negatives".into(),
            samples: negative_samples(cfg, "negatives", "neg", cfg.negatives),
        };
        if negatives.len() < cfg.negatives {
            return Err(Error::Data(format!(
                "generator produced {} of {} negative patches",
                negatives.len(),
                cfg.negatives
            )));
        }
        Ok(Self {
            config: cfg.clone(),
            train,
            val,
            eval,
            negatives,
        })
    }

    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "eval" => Ok(&self.eval),
            "negatives" => Ok(&self.negatives),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }

    fn splits(&self) -> [&Split; 4] {
        [&self.train, &self.val, &self.eval, &self.negatives]
    }

    /// SHA-256 of the canonical JSON of the generating config.
    pub fn config_hash(&self) -> [u8; 32] {
        config_hash(&self.config)
    }

    pub fn manifest(&self) -> DatasetManifest {
        let splits = self
            .splits()
            .iter()
            .map(|s| {
                let counts = s.class_counts();
                let class_counts = MarginClass::ALL
                    .iter()
                    .filter(|c| counts[c.index()] > 0)
                    .map(|&c| (c, counts[c.index()]))
                    .collect();
                let samples = s
                    .samples
                    .iter()
                    .map(|x| SampleRecord {
                        id: x.id.clone(),
                        label: x.label,
                        meta: x.meta.clone(),
                    })
                    .collect();
                (
                    s.name.clone(),
                    SplitManifest {
                        file: format!("{}.fpt", s.name),
                        class_counts,
                        samples,
                    },
                )
            })
            .collect();
        DatasetManifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            splits,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = self.manifest();
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        let hash = self.config_hash();
        for split in self.splits() {
            let h = self.config.image_size;
            let n = split.len();
            let to_u8 = |t: &Tensor| -> Vec<u8> {
                t.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
            };
            let mut images = Vec::with_capacity(n * h * h);
            let mut masks = Vec::with_capacity(n * h * h);
            for s in &split.samples {
                images.extend(to_u8(&s.image));
                masks.extend(s.mask.data().iter().map(|&v| u8::from(v != 0.0)));
            }
            let labels = split.samples.iter().map(|s| s.label.index() as u8).collect();
            let mut c = Container::new(hash, serde_json::json!({ "kind": "dataset", "split": split.name }));
            c.insert("images", StoredTensor::new(vec![n, 1, h, h], StoredData::U8(images))?);
            c.insert("masks", StoredTensor::new(vec![n, h, h], StoredData::U8(masks))?);
            c.insert("labels", StoredTensor::new(vec![n], StoredData::U8(labels))?);
            c.write(&dir.join(&manifest.splits[&split.name].file))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let cfg = manifest.config.clone();
        cfg.validate()?;
        let hash = config_hash(&cfg);
        let h = cfg.image_size;
        let mut load = |name: &str| -> Result<Split> {
            let sm = manifest
                .splits
                .get(name)
                .ok_or_else(|| Error::Data(format!("manifest lists no `{name}` split")))?;
            let c = Container::read(&dir.join(&sm.file))?;
            if c.config_hash != hash {
                return Err(Error::Data(format!("split `{name}` was generated with a different config")));
            }
            let n = sm.samples.len();
            let u8s = |t: &str, shape: &[usize]| -> Result<Vec<u8>> {
                let st = c.get(t)?;
                match &st.data {
                    StoredData::U8(v) if st.shape == shape => Ok(v.clone()),
                    _ => Err(Error::Format(format!("tensor `{t}` of split `{name}` is malformed"))),
                }
            };
            let images = u8s("images", &[n, 1, h, h])?;
            let masks = u8s("masks", &[n, h, h])?;
            let labels = u8s("labels", &[n])?;
            let mut samples = Vec::with_capacity(n);
            for (i, rec) in sm.samples.iter().enumerate() {
                if labels[i] as usize != rec.label.index() {
                    return Err(Error::Data(format!("label of {} disagrees with manifest", rec.id)));
                }
                let px = h * h;
                samples.push(Sample {
                    id: rec.id.clone(),
                    image: Tensor::new(
                        vec![1, h, h],
                        images[i * px..(i + 1) * px].iter().map(|&v| v as Real / 255.0).collect(),
                    )?,
                    label: rec.label,
                    mask: Tensor::new(
                        vec![h, h],
                        masks[i * px..(i + 1) * px].iter().map(|&v| v as Real).collect(),
                    )?,
                    meta: rec.meta.clone(),
                });
            }
            Ok(Split {
                name: name.into(),
                samples,
            })
        };
        let [train, val, eval, negatives] = SPLITS.map(&mut load);
        Ok(Self {
            config: cfg,
            train: train?,
            val: val?,
            eval: eval?,
            negatives: negatives?,
        })
    }
}

pub fn config_hash<T: Serialize>(cfg: &T) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).into()
}
