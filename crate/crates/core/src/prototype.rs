//! Prototype bank, patch cosine similarity, focal pooling and the class
//! scoring layer.
//!
//! Each prototype is a `d`-dimensional vector bound to one class and one
//! pyramid level. It is compared only against the patches (spatial
//! positions) of its own level's map:
//!
//! ```text
//! s[j, n]  = <z_n / max(|z_n|, eps), p_j / |p_j|>
//! g[j]     = mean(top_k(s[j, :])) - mean(s[j, :])
//! logits   = W g
//! ```

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{BackboneConfig, Level};
use crate::classes::{MarginClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Guard on patch norms in the cosine similarity.
pub const COSINE_EPS: Real = 1e-12;

/// Own-class and cross-class initial weights of the last layer.
pub const OWN_CLASS_WEIGHT: Real = 1.0;
pub const CROSS_CLASS_WEIGHT: Real = -0.5;

/// `count` prototypes of one class on one level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeGroup {
    pub class: MarginClass,
    pub level: Level,
    pub count: usize,
    /// Number of patches averaged by focal pooling.
    pub top_k: usize,
}

/// Prototype allocation. Groups expand in order, so prototype indices are
/// dense and follow the listing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrototypeConfig {
    pub groups: Vec<PrototypeGroup>,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self::uniform(&MarginClass::ALL, &[2, 3, 5], 2, 3)
    }
}

/// One expanded prototype slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrototypeEntry {
    pub index: usize,
    pub class: MarginClass,
    pub level: Level,
    pub top_k: usize,
}

impl PrototypeConfig {
    /// `per_level` prototypes for each class on each of `levels`.
    pub fn uniform(classes: &[MarginClass], levels: &[Level], per_level: usize, top_k: usize) -> Self {
        let groups = classes
            .iter()
            .flat_map(|&class| {
                levels.iter().map(move |&level| PrototypeGroup {
                    class,
                    level,
                    count: per_level,
                    top_k,
                })
            })
            .collect();
        Self { groups }
    }

    pub fn entries(&self) -> Vec<PrototypeEntry> {
        let mut out = Vec::new();
        for g in &self.groups {
            for _ in 0..g.count {
                out.push(PrototypeEntry {
                    index: out.len(),
                    class: g.class,
                    level: g.level,
                    top_k: g.top_k,
                });
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Vec<MarginClass> {
        self.entries().iter().map(|e| e.class).collect()
    }

    /// Prototype indices per level, levels ascending.
    pub fn by_level(&self) -> BTreeMap<Level, Vec<usize>> {
        let mut m: BTreeMap<Level, Vec<usize>> = BTreeMap::new();
        for e in self.entries() {
            m.entry(e.level).or_default().push(e.index);
        }
        m
    }

    pub fn of_class(&self, class: MarginClass) -> Vec<usize> {
        self.entries()
            .iter()
            .filter(|e| e.class == class)
            .map(|e| e.index)
            .collect()
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        for (i, g) in self.groups.iter().enumerate() {
            let field = format!("prototypes.groups[{i}]");
            if g.count == 0 {
                return Err(Error::config(format!("{field}.count"), "must be positive"));
            }
            if !backbone.levels.contains(&g.level) {
                return Err(Error::config(
                    format!("{field}.level"),
                    format!("level {} is not emitted by the backbone", g.level),
                ));
            }
            let eta = backbone.extent(g.level).unwrap_or(0);
            if g.top_k == 0 || g.top_k > eta * eta {
                return Err(Error::config(
                    format!("{field}.top_k"),
                    format!("must be in 1..={} for level {}", eta * eta, g.level),
                ));
            }
        }
        for c in MarginClass::ALL {
            if self.of_class(c).is_empty() {
                return Err(Error::config(
                    "prototypes.groups",
                    format!("class {c} owns no prototype"),
                ));
            }
        }
        Ok(())
    }
}

/// Where a projected prototype was copied from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Index into the projection sample list.
    pub sample: usize,
    pub sample_id: String,
    pub level: Level,
    pub y: usize,
    pub x: usize,
    /// Cosine similarity to the pre-projection vector.
    pub similarity: Real,
}

/// Prototype vectors drawn uniformly from the unit sphere, as `[m, d]`.
pub fn init_prototypes(rng: &mut impl Rng, m: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(m * d);
    for _ in 0..m {
        let v: Vec<Real> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<Real>().sqrt();
        data.extend(v.iter().map(|x| x / n));
    }
    Tensor::new(vec![m, d], data).expect("m * d values")
}

/// Last-layer weights `[NUM_CLASSES, m]`: own-class connections get
/// [`OWN_CLASS_WEIGHT`], all others [`CROSS_CLASS_WEIGHT`].
pub fn class_connected_weights(cfg: &PrototypeConfig) -> Tensor {
    let classes = cfg.classes();
    let m = classes.len();
    Tensor::from_fn(&[NUM_CLASSES, m], |i| {
        if classes[i % m].index() == i / m {
            OWN_CLASS_WEIGHT
        } else {
            CROSS_CLASS_WEIGHT
        }
    })
}

/// Cosine similarity between `p` and every patch of `z: [B, d, eta, eta]`,
/// as a `[B, eta, eta]` map.
pub fn patch_cosine_similarity(z: &Tensor, p: &[Real]) -> Result<Tensor> {
    let (b, d, h, w) = z.dims4()?;
    if p.len() != d {
        return Err(Error::shape(format!(
            "prototype has {} dims, feature map has {d}",
            p.len()
        )));
    }
    let pn = p.iter().map(|v| v * v).sum::<Real>().sqrt();
    if !(pn > 0.0) {
        return Err(Error::invalid("prototype vector has zero norm"));
    }
    let hw = h * w;
    let mut out = vec![0.0; b * hw];
    for bi in 0..b {
        for n in 0..hw {
            let mut dot = 0.0;
            let mut ss = 0.0;
            for (c, pc) in p.iter().enumerate() {
                let v = z.data()[(bi * d + c) * hw + n];
                dot += v * pc;
                ss += v * v;
            }
            out[bi * hw + n] = dot / (ss.sqrt().max(COSINE_EPS) * pn);
        }
    }
    Tensor::new(vec![b, h, w], out)
}

/// Mean of the `k` largest map entries minus the mean of all entries.
pub fn focal_similarity(map: &[Real], k: usize) -> Result<Real> {
    if k == 0 || k > map.len() {
        return Err(Error::invalid(format!(
            "top-k count {k} outside 1..={}",
            map.len()
        )));
    }
    let top = crate::autodiff::kernels::topk_indices(map, k);
    let top_mean = top.iter().map(|&i| map[i]).sum::<Real>() / k as Real;
    let mean = map.iter().sum::<Real>() / map.len() as Real;
    Ok(top_mean - mean)
}

/// Class logits `W g` for one image.
pub fn score_classes(scores: &[Real], weights: &Tensor) -> Result<Vec<Real>> {
    let (c, m) = weights.dims2()?;
    if scores.len() != m {
        return Err(Error::shape(format!(
            "{} scores for a last layer expecting {m}",
            scores.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prototype scores".into()));
    }
    Ok((0..c)
        .map(|k| {
            weights.data()[k * m..(k + 1) * m]
                .iter()
                .zip(scores)
                .map(|(w, s)| w * s)
                .sum()
        })
        .collect())
}

/// Similarity maps and focal scores of the prototypes on one level.
#[derive(Debug, Clone)]
pub struct LevelSimilarity {
    pub level: Level,
    /// Global prototype indices, in map-channel order.
    pub prototypes: Vec<usize>,
    /// `[B, m_l, eta, eta]` cosine maps.
    pub maps: NodeId,
    /// `[B, m_l]` focal similarities.
    pub focal: NodeId,
}

/// Prototype layer on the graph. Returns per-level similarities and the
/// `[B, m]` focal score matrix in prototype-index order.
pub fn prototype_layer(
    g: &mut Graph,
    cfg: &PrototypeConfig,
    prototypes: NodeId,
    pyramid: &BTreeMap<Level, NodeId>,
) -> Result<(Vec<LevelSimilarity>, NodeId)> {
    let entries = cfg.entries();
    let (m, d) = g.value(prototypes).dims2()?;
    if m != entries.len() {
        return Err(Error::shape(format!(
            "{m} prototype vectors for {} configured prototypes",
            entries.len()
        )));
    }
    let mut levels = Vec::new();
    let mut order = Vec::with_capacity(m);
    for (level, idx) in cfg.by_level() {
        let z = *pyramid
            .get(&level)
            .ok_or_else(|| Error::shape(format!("no pyramid map for level {level}")))?;
        let zn = g.normalize_channels(z, COSINE_EPS)?;
        let rows = g.select_rows(prototypes, &idx)?;
        let rows = g.reshape(rows, &[idx.len(), d, 1, 1])?;
        let pn = g.normalize_channels(rows, COSINE_EPS)?;
        let maps = g.conv2d(zn, pn, 1, 0)?;
        let ks: Vec<usize> = idx.iter().map(|&j| entries[j].top_k).collect();
        let top = g.topk_mean(maps, &ks)?;
        let mean = g.spatial_mean(maps)?;
        let focal = g.sub(top, mean)?;
        order.extend_from_slice(&idx);
        levels.push(LevelSimilarity {
            level,
            prototypes: idx,
            maps,
            focal,
        });
    }
    let focals: Vec<NodeId> = levels.iter().map(|l| l.focal).collect();
    let stacked = g.concat_cols(&focals)?;
    // column i of `stacked` holds prototype order[i]; invert that permutation
    let mut inverse = vec![0; m];
    for (col, &j) in order.iter().enumerate() {
        inverse[j] = col;
    }
    let scores = g.select_cols(stacked, &inverse)?;
    Ok((levels, scores))
}
