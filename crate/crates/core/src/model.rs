//! The full network: backbone, feature pyramid, prototype layer, last layer.

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{self, BackboneConfig, FeaturePyramid, Level};
use crate::classes::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamNodes, ParamStore};
use crate::prototype::{self, LevelSimilarity, PrototypeConfig, Provenance};
use crate::tensor::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const PROTOTYPES: &str = "prototypes";
pub const LAST_LAYER: &str = "last_layer";

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: BackboneConfig,
    pub prototypes: PrototypeConfig,
    pub params: ParamStore,
    /// Source patch of each prototype once projected.
    pub provenance: Vec<Option<Provenance>>,
    /// `[1, H, W]` image each projected prototype was copied from.
    pub sources: Vec<Option<Tensor>>,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub input: NodeId,
    pub params: ParamNodes,
    pub bottom_up: BTreeMap<Level, NodeId>,
    pub pyramid: BTreeMap<Level, NodeId>,
    pub levels: Vec<LevelSimilarity>,
    /// `[B, m]` focal similarities in prototype-index order.
    pub scores: NodeId,
    /// `[B, NUM_CLASSES]`.
    pub logits: NodeId,
}

/// Plain-tensor outputs of an inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub logits: Tensor,
    pub scores: Tensor,
    /// Per prototype, its `[B, eta, eta]` similarity map.
    pub maps: Vec<Tensor>,
}

impl Inference {
    pub fn probabilities(&self) -> Tensor {
        let (_, c) = self.logits.dims2().expect("2-D logits");
        let mut out = self.logits.clone();
        for row in out.data_mut().chunks_mut(c) {
            let mx = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        out
    }

    pub fn predictions(&self) -> Vec<usize> {
        let (_, c) = self.logits.dims2().expect("2-D logits");
        self.logits
            .data()
            .chunks(c)
            .map(|row| {
                (0..c).fold(0, |best, i| if row[i] > row[best] { i } else { best })
            })
            .collect()
    }
}

impl Model {
    /// Fresh model with all parameters drawn from `seed`.
    pub fn new(backbone: BackboneConfig, prototypes: PrototypeConfig, seed: u64) -> Result<Self> {
        backbone.validate()?;
        prototypes.validate(&backbone)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone.init_params(&mut rng, &mut params);
        let m = prototypes.len();
        params.insert(
            PROTOTYPES,
            ParamGroup::Prototypes,
            prototype::init_prototypes(&mut rng, m, backbone.feature_dim),
        );
        params.insert(
            LAST_LAYER,
            ParamGroup::LastLayer,
            prototype::class_connected_weights(&prototypes),
        );
        Ok(Self {
            backbone,
            prototypes,
            params,
            provenance: vec![None; m],
            sources: vec![None; m],
        })
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn input_size(&self) -> usize {
        self.backbone.input_size
    }

    /// Row `j` of the prototype matrix.
    pub fn prototype_vector(&self, j: usize) -> &[Real] {
        let d = self.backbone.feature_dim;
        &self.params.get(PROTOTYPES).expect("prototypes present").data()[j * d..(j + 1) * d]
    }

    pub fn last_layer(&self) -> &Tensor {
        self.params.get(LAST_LAYER).expect("last layer present")
    }

    pub fn is_projected(&self) -> bool {
        self.provenance.iter().all(Option::is_some)
    }

    /// Records the forward pass on `g`. Parameters of groups for which
    /// `trainable` is false enter as constants.
    pub fn forward(
        &self,
        g: &mut Graph,
        images: &Tensor,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Result<Forward> {
        let params = ParamNodes::insert(g, &self.params, trainable);
        let input = g.constant(images.clone());
        let bottom_up = backbone::bottom_up(g, &self.backbone, &params, input)?;
        let pyramid = backbone::top_down(g, &self.backbone, &params, &bottom_up)?;
        let protos = params.get(PROTOTYPES)?;
        let (levels, scores) = prototype::prototype_layer(g, &self.prototypes, protos, &pyramid)?;
        let logits = g.linear(scores, params.get(LAST_LAYER)?)?;
        Ok(Forward {
            input,
            params,
            bottom_up,
            pyramid,
            levels,
            scores,
            logits,
        })
    }

    pub fn feature_pyramid(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, images, |_| false)?;
        let grab = |m: &BTreeMap<Level, NodeId>| {
            m.iter()
                .map(|(&l, &id)| (l, g.value(id).clone()))
                .collect::<BTreeMap<_, _>>()
        };
        Ok(FeaturePyramid {
            bottom_up: grab(&f.bottom_up),
            top_down: grab(&f.pyramid),
        })
    }

    /// Inference over `images: [B, 1, H, W]` in chunks of `batch`.
    pub fn infer(&self, images: &Tensor, batch: usize) -> Result<Inference> {
        let (n, _, _, _) = images.dims4()?;
        let batch = batch.max(1);
        let m = self.num_prototypes();
        let mut logits = Vec::new();
        let mut scores = Vec::new();
        let mut maps: Vec<Vec<Tensor>> = vec![Vec::new(); m];
        let mut start = 0;
        while start < n {
            let len = batch.min(n - start);
            let chunk = images.slice_batch(start, len)?;
            let mut g = Graph::new();
            let f = self.forward(&mut g, &chunk, |_| false)?;
            logits.push(g.value(f.logits).clone());
            scores.push(g.value(f.scores).clone());
            for lvl in &f.levels {
                let t = g.value(lvl.maps);
                let (b, ml, h, w) = t.dims4()?;
                for (jl, &j) in lvl.prototypes.iter().enumerate() {
                    let mut data = Vec::with_capacity(b * h * w);
                    for bi in 0..b {
                        let off = (bi * ml + jl) * h * w;
                        data.extend_from_slice(&t.data()[off..off + h * w]);
                    }
                    maps[j].push(Tensor::new(vec![b, h, w], data)?);
                }
            }
            start += len;
        }
        if n == 0 {
            return Ok(Inference {
                logits: Tensor::zeros(&[0, NUM_CLASSES]),
                scores: Tensor::zeros(&[0, m]),
                maps: Vec::new(),
            });
        }
        let cat = |v: &[Tensor]| Tensor::concat_batch(&v.iter().collect::<Vec<_>>());
        Ok(Inference {
            logits: cat(&logits)?,
            scores: cat(&scores)?,
            maps: maps.iter().map(|v| cat(v)).collect::<Result<_>>()?,
        })
    }

    /// Checks structural consistency (after loading, for instance).
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.prototypes.validate(&self.backbone)?;
        let m = self.num_prototypes();
        let p = self.params.get(PROTOTYPES)?;
        if p.shape() != [m, self.backbone.feature_dim] {
            return Err(Error::shape(format!(
                "prototype matrix {:?} does not match {m} x {}",
                p.shape(),
                self.backbone.feature_dim
            )));
        }
        if self.last_layer().shape() != [NUM_CLASSES, m] {
            return Err(Error::shape("last layer shape does not match prototype count"));
        }
        if self.provenance.len() != m || self.sources.len() != m {
            return Err(Error::shape("provenance table does not match prototype count"));
        }
        for j in 0..m {
            if self.prototype_vector(j).iter().all(|&v| v == 0.0) {
                return Err(Error::invalid(format!("prototype {j} has zero norm")));
            }
        }
        Ok(())
    }
}
