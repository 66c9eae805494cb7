//! Prototype projection: each prototype is replaced by the most similar
//! latent patch of a training image of its own class.

use crate::classes::MarginClass;
use crate::error::{Error, Result};
use crate::model::{Model, PROTOTYPES};
use crate::prototype::Provenance;
use crate::tensor::{Real, Tensor};
use std::collections::BTreeMap;

/// A provenance patch is kept if it is within this much of the best
/// similarity found, so projecting twice is a no-op.
pub const KEEP_TOLERANCE: Real = 1e-12;

/// Images a projection may draw patches from.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionSet<'a> {
    /// `[N, 1, H, W]`
    pub images: &'a Tensor,
    pub labels: &'a [MarginClass],
    pub ids: &'a [String],
}

impl ProjectionSet<'_> {
    fn validate(&self) -> Result<()> {
        let (n, _, _, _) = self.images.dims4()?;
        if self.labels.len() != n || self.ids.len() != n {
            return Err(Error::shape(format!(
                "{n} images but {} labels and {} ids",
                self.labels.len(),
                self.ids.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionReport {
    /// Euclidean distance each prototype moved.
    pub displacement: Vec<Real>,
    /// Cosine similarity between each old vector and its new patch.
    pub similarity: Vec<Real>,
}

impl ProjectionReport {
    pub fn max_displacement(&self) -> Real {
        self.displacement.iter().copied().fold(0.0, Real::max)
    }
}

struct Best {
    similarity: Real,
    sample: usize,
    y: usize,
    x: usize,
    vector: Vec<Real>,
    /// Similarity of the current provenance patch, when re-encountered.
    current: Option<(Real, Vec<Real>)>,
}

/// Projects every prototype in place and records its provenance.
/// The scan covers all patches of all same-class images; ties go to the
/// first patch in (sample, row, column) order.
pub fn project_prototypes(
    model: &mut Model,
    set: &ProjectionSet<'_>,
    batch: usize,
) -> Result<ProjectionReport> {
    set.validate()?;
    let d = model.backbone.feature_dim;
    let entries = model.prototypes.entries();
    let m = entries.len();
    let batch = batch.max(1);
    let mut best: Vec<Option<Best>> = (0..m).map(|_| None).collect();

    for class in MarginClass::ALL {
        let protos: Vec<usize> = (0..m).filter(|&j| entries[j].class == class).collect();
        if protos.is_empty() {
            continue;
        }
        let pool: Vec<usize> = (0..set.labels.len())
            .filter(|&i| set.labels[i] == class)
            .collect();
        if pool.is_empty() {
            return Err(Error::Data(format!(
                "no {class} images to project prototypes onto"
            )));
        }
        let normed: BTreeMap<usize, Vec<Real>> = protos
            .iter()
            .map(|&j| {
                let p = model.prototype_vector(j);
                let n = p.iter().map(|v| v * v).sum::<Real>().sqrt();
                if !(n > 0.0) {
                    return Err(Error::invalid(format!("prototype {j} has zero norm")));
                }
                Ok((j, p.iter().map(|v| v / n).collect()))
            })
            .collect::<Result<_>>()?;

        for chunk in pool.chunks(batch) {
            let images = set.images.select_batch(chunk)?;
            let pyramid = model.feature_pyramid(&images)?;
            for &j in &protos {
                let level = entries[j].level;
                let z = pyramid.top_down.get(&level).ok_or_else(|| {
                    Error::shape(format!("no pyramid map for level {level}"))
                })?;
                let (b, dz, h, w) = z.dims4()?;
                debug_assert_eq!(dz, d);
                let hw = h * w;
                let pn = &normed[&j];
                let current = model.provenance[j].as_ref();
                for (bi, &sample) in chunk.iter().enumerate().take(b) {
                    for n in 0..hw {
                        let at = |c: usize| z.data()[(bi * d + c) * hw + n];
                        let norm = (0..d).map(|c| at(c) * at(c)).sum::<Real>().sqrt();
                        let dot: Real = (0..d).map(|c| at(c) * pn[c]).sum();
                        let sim = dot / norm.max(crate::prototype::COSINE_EPS);
                        let (y, x) = (n / w, n % w);
                        let vector = || (0..d).map(at).collect::<Vec<_>>();
                        let slot = &mut best[j];
                        let is_current = current.is_some_and(|p| {
                            p.sample_id == set.ids[sample] && p.level == level && p.y == y && p.x == x
                        });
                        if slot.as_ref().is_none_or(|s| sim > s.similarity) {
                            let cur = slot.as_mut().and_then(|s| s.current.take());
                            *slot = Some(Best {
                                similarity: sim,
                                sample,
                                y,
                                x,
                                vector: vector(),
                                current: cur,
                            });
                        }
                        if is_current {
                            if let Some(s) = slot.as_mut() {
                                s.current = Some((sim, vector()));
                            }
                        }
                    }
                }
            }
        }
    }

    let mut report = ProjectionReport {
        displacement: vec![0.0; m],
        similarity: vec![0.0; m],
    };
    let mut protos = model.params.get(PROTOTYPES)?.clone();
    for j in 0..m {
        let b = best[j]
            .take()
            .ok_or_else(|| Error::Data(format!("prototype {j} found no patch")))?;
        let level = entries[j].level;
        // A kept patch whose features did not move keeps its recorded
        // similarity, so a repeated projection is a bitwise no-op.
        let (similarity, sample, y, x, vector, recorded) = match (&b.current, &model.provenance[j]) {
            (Some((sim, v)), Some(p)) if *sim >= b.similarity - KEEP_TOLERANCE => {
                let idx = set.ids.iter().position(|id| *id == p.sample_id).unwrap_or(p.sample);
                let unmoved = protos.data()[j * d..(j + 1) * d] == v[..];
                (*sim, idx, p.y, p.x, v.clone(), if unmoved { p.similarity } else { *sim })
            }
            _ => (b.similarity, b.sample, b.y, b.x, b.vector, b.similarity),
        };
        let row = &mut protos.data_mut()[j * d..(j + 1) * d];
        report.displacement[j] = row
            .iter()
            .zip(&vector)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<Real>()
            .sqrt();
        report.similarity[j] = similarity;
        row.copy_from_slice(&vector);
        model.provenance[j] = Some(Provenance {
            sample,
            sample_id: set.ids[sample].clone(),
            level,
            y,
            x,
            similarity: recorded,
        });
        model.sources[j] = Some(
            set.images
                .select_batch(&[sample])?
                .reshape(&set.images.shape()[1..])?,
        );
    }
    *model.params.get_mut(PROTOTYPES)? = protos;
    log::debug!(
        "projected {m} prototypes, max displacement {:.4}",
        report.max_displacement()
    );
    Ok(report)
}
