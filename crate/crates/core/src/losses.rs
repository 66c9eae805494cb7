//! Training objective.
//!
//! ```text
//! loss = CE + l1 * cluster + l2 * separation + l3 * orthogonality + l4 * fine
//! ```
//!
//! Cluster, separation and orthogonality use the usual prototype-network
//! definitions:
//!
//! * cluster: `-mean_i max_{j of class y_i} g_ij`
//! * separation: `mean_i max_{j not of class y_i} g_ij`
//! * orthogonality: `sum_class |P P^T - I|_F^2` over each class's unit-normalized prototypes
//!
//! The fine-annotation term upsamples each similarity map to mask
//! resolution (the prototype activation map, PAM) and sums, over images and
//! prototypes, `| a * (mask ⊙ PAM) + b * PAM |_2` where `a` and `b` are
//! looked up by (sample class, prototype class). Masks are 1 outside the
//! annotated region.

use crate::autodiff::{Graph, NodeId, UpsampleMode};
use crate::classes::{MarginClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::prototype::{LevelSimilarity, PrototypeConfig, COSINE_EPS};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cluster: Real,
    pub separation: Real,
    pub orthogonality: Real,
    pub fine_annotation: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cluster: 0.8,
            separation: 0.08,
            orthogonality: 0.01,
            fine_annotation: 0.001,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            cluster: 0.0,
            separation: 0.0,
            orthogonality: 0.0,
            fine_annotation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cluster", self.cluster),
            ("separation", self.separation),
            ("orthogonality", self.orthogonality),
            ("fine_annotation", self.fine_annotation),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(
                    format!("loss.{name}"),
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Fine-annotation coefficients, indexed `[sample class][prototype class]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineAnnotationCoeffs {
    /// Weight on activation outside the annotation (`mask ⊙ PAM`).
    pub masked: [[Real; NUM_CLASSES]; NUM_CLASSES],
    /// Weight on activation anywhere (`PAM`).
    pub full: [[Real; NUM_CLASSES]; NUM_CLASSES],
}

impl Default for FineAnnotationCoeffs {
    fn default() -> Self {
        Self {
            masked: [
                [1.0, 1.0, 1.0, 1.0],
                [1.0, 1.0, 1.0, 1.0],
                [1.0, 1.0, 1.0, 1.0],
                [0.0, 0.0, 0.0, 0.0],
            ],
            full: [
                [0.0, 0.0, 0.0, 1.0],
                [0.0, 0.0, 0.0, 1.0],
                [1.0, 1.0, 0.0, 1.0],
                [0.0, 0.0, 0.0, 0.0],
            ],
        }
    }
}

impl FineAnnotationCoeffs {
    pub fn zero() -> Self {
        Self {
            masked: [[0.0; NUM_CLASSES]; NUM_CLASSES],
            full: [[0.0; NUM_CLASSES]; NUM_CLASSES],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("masked", &self.masked), ("full", &self.full)] {
            for (r, row) in m.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    if !v.is_finite() || v < 0.0 {
                        return Err(Error::config(
                            format!("fine_annotation.{name}[{r}][{c}]"),
                            format!("must be finite and non-negative, got {v}"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy of `[B, C]` logits.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[MarginClass]) -> Result<NodeId> {
    let idx: Vec<usize> = labels.iter().map(|c| c.index()).collect();
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, &idx)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Cluster and separation terms from `[B, m]` focal scores.
pub fn cluster_and_separation(
    g: &mut Graph,
    scores: NodeId,
    labels: &[MarginClass],
    proto_classes: &[MarginClass],
) -> Result<(NodeId, NodeId)> {
    let (b, m) = g.value(scores).dims2()?;
    if labels.len() != b || proto_classes.len() != m {
        return Err(Error::shape("cluster/separation: label or prototype count mismatch"));
    }
    let own: Vec<bool> = labels
        .iter()
        .flat_map(|&y| proto_classes.iter().map(move |&c| c == y))
        .collect();
    let other: Vec<bool> = own.iter().map(|o| !o).collect();
    let own_max = g.masked_row_max(scores, &own)?;
    let mean_own = g.mean(own_max);
    let cluster = g.scale(mean_own, -1.0);
    let other_max = g.masked_row_max(scores, &other)?;
    let separation = g.mean(other_max);
    Ok((cluster, separation))
}

/// Orthogonality penalty over each class's prototypes in `[m, d]`.
pub fn orthogonality(g: &mut Graph, prototypes: NodeId, cfg: &PrototypeConfig) -> Result<NodeId> {
    let (_, d) = g.value(prototypes).dims2()?;
    let mut total: Option<NodeId> = None;
    for c in MarginClass::ALL {
        let idx = cfg.of_class(c);
        if idx.is_empty() {
            continue;
        }
        let n = idx.len();
        let rows = g.select_rows(prototypes, &idx)?;
        let rows = g.reshape(rows, &[n, d, 1, 1])?;
        let unit = g.normalize_channels(rows, COSINE_EPS)?;
        let unit = g.reshape(unit, &[n, d])?;
        let gram = g.linear(unit, unit)?;
        let eye = g.constant(Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 }));
        let diff = g.sub(gram, eye)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum(sq);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    total.ok_or_else(|| Error::invalid("orthogonality: no prototypes"))
}

/// Checks a `[B, H, W]` mask stack is binary.
pub fn validate_masks(masks: &Tensor) -> Result<()> {
    if masks.ndim() != 3 {
        return Err(Error::shape(format!("masks must be [B, H, W], got {:?}", masks.shape())));
    }
    if let Some(v) = masks.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!("mask value {v} is not binary")));
    }
    Ok(())
}

/// Fine-annotation loss summed over annotated images and all prototypes.
///
/// `masks` is `[B, H, W]` at input resolution; `annotated[i]` marks
/// membership in the fine-annotated subset.
pub fn fine_annotation(
    g: &mut Graph,
    levels: &[LevelSimilarity],
    masks: &Tensor,
    labels: &[MarginClass],
    annotated: &[bool],
    proto_classes: &[MarginClass],
    coeffs: &FineAnnotationCoeffs,
) -> Result<NodeId> {
    validate_masks(masks)?;
    let (b, h, w) = (masks.shape()[0], masks.shape()[1], masks.shape()[2]);
    if labels.len() != b || annotated.len() != b {
        return Err(Error::shape("fine_annotation: batch size mismatch"));
    }
    let mut total: Option<NodeId> = None;
    for lvl in levels {
        let (mb, ml, eta, eta_w) = g.value(lvl.maps).dims4()?;
        if mb != b {
            return Err(Error::shape("fine_annotation: map batch differs from mask batch"));
        }
        if eta == 0 || h % eta != 0 || w % eta_w != 0 || h / eta != w / eta_w {
            return Err(Error::shape(format!(
                "mask resolution {h}x{w} is not an integer multiple of map {eta}x{eta_w}"
            )));
        }
        let pam = g.upsample(lvl.maps, h / eta, UpsampleMode::Bilinear)?;
        let hw = h * w;
        let mut weight = vec![0.0; b * ml * hw];
        for i in 0..b {
            if !annotated[i] {
                continue;
            }
            let y = labels[i].index();
            let mask = &masks.data()[i * hw..(i + 1) * hw];
            for (jl, &j) in lvl.prototypes.iter().enumerate() {
                let c = proto_classes[j].index();
                let (a, f) = (coeffs.masked[y][c], coeffs.full[y][c]);
                let dst = &mut weight[(i * ml + jl) * hw..(i * ml + jl + 1) * hw];
                for (d, &mv) in dst.iter_mut().zip(mask) {
                    *d = a * mv + f;
                }
            }
        }
        let weight = Tensor::new(vec![b, ml, h, w], weight)?;
        let weighted = g.mul_const(pam, &weight)?;
        let norms = g.spatial_l2_norm(weighted)?;
        let s = g.sum(norms);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}

/// Node ids of every loss term plus the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub cross_entropy: NodeId,
    pub cluster: NodeId,
    pub separation: NodeId,
    pub orthogonality: NodeId,
    pub fine_annotation: NodeId,
    pub total: NodeId,
}

/// Scalar values of the loss terms, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub cross_entropy: Real,
    pub cluster: Real,
    pub separation: Real,
    pub orthogonality: Real,
    pub fine_annotation: Real,
    pub total: Real,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |id| g.value(id).item();
        LossValues {
            cross_entropy: v(self.cross_entropy),
            cluster: v(self.cluster),
            separation: v(self.separation),
            orthogonality: v(self.orthogonality),
            fine_annotation: v(self.fine_annotation),
            total: v(self.total),
        }
    }
}

/// Inputs of the objective that are not graph nodes.
pub struct LossTargets<'a> {
    pub labels: &'a [MarginClass],
    pub masks: &'a Tensor,
    pub annotated: &'a [bool],
}

/// Builds the full weighted objective.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    logits: NodeId,
    scores: NodeId,
    levels: &[LevelSimilarity],
    prototypes: NodeId,
    cfg: &PrototypeConfig,
    targets: &LossTargets<'_>,
    weights: &LossWeights,
    coeffs: &FineAnnotationCoeffs,
) -> Result<LossTerms> {
    let classes = cfg.classes();
    let ce = cross_entropy(g, logits, targets.labels)?;
    let (cluster, separation) = cluster_and_separation(g, scores, targets.labels, &classes)?;
    let ortho = orthogonality(g, prototypes, cfg)?;
    let fine = fine_annotation(
        g,
        levels,
        targets.masks,
        targets.labels,
        targets.annotated,
        &classes,
        coeffs,
    )?;
    let mut total = ce;
    for (node, lambda) in [
        (cluster, weights.cluster),
        (separation, weights.separation),
        (ortho, weights.orthogonality),
        (fine, weights.fine_annotation),
    ] {
        if lambda != 0.0 {
            let t = g.scale(node, lambda);
            total = g.add(total, t)?;
        }
    }
    Ok(LossTerms {
        cross_entropy: ce,
        cluster,
        separation,
        orthogonality: ortho,
        fine_annotation: fine,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_coefficients_follow_tables() {
        let c = FineAnnotationCoeffs::default();
        assert_eq!(c.masked[MarginClass::Negative.index()], [0.0; 4]);
        assert_eq!(c.full[MarginClass::Spiculated.index()], [1.0, 1.0, 0.0, 1.0]);
        assert_eq!(c.full[MarginClass::Circumscribed.index()], [0.0, 0.0, 0.0, 1.0]);
        c.validate().unwrap();
    }

    #[test]
    fn weights_validation() {
        LossWeights::default().validate().unwrap();
        let mut w = LossWeights::default();
        w.separation = -1.0;
        assert!(matches!(w.validate(), Err(Error::Config { field, .. }) if field == "loss.separation"));
        let mut c = FineAnnotationCoeffs::default();
        c.full[0][0] = Real::NAN;
        assert!(c.validate().is_err());
    }

    #[test]
    fn uniform_logits_give_ln4() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::full(&[3, 4], 0.7));
        let ce = cross_entropy(&mut g, logits, &[MarginClass::Negative; 3]).unwrap();
        assert!((g.value(ce).item() - (4.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn non_binary_mask_rejected() {
        let m = Tensor::full(&[1, 2, 2], 0.5);
        assert!(validate_masks(&m).is_err());
    }
}
