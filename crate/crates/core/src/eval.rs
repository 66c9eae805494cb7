//! Classification metrics.

use crate::classes::{MarginClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Rank-based AUROC (Mann-Whitney U) with average ranks for ties.
pub fn auroc(scores: &[Real], positive: &[bool]) -> Result<Real> {
    if scores.len() != positive.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("AUROC scores".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUROC needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; a tie group shares the mean of its ranks.
        let avg = (i + j) as Real / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| positive[k]).count() as Real * avg;
        i = j + 1;
    }
    let (p, n) = (n_pos as Real, n_neg as Real);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// One-vs-rest AUROC of `class` using column `class` of `scores: [N, C]`.
pub fn auroc_ovr(scores: &Tensor, labels: &[MarginClass], class: MarginClass) -> Result<Real> {
    let (n, c) = scores.dims2()?;
    if n != labels.len() || class.index() >= c {
        return Err(Error::shape(format!(
            "score matrix [{n}, {c}] does not fit {} labels / class {class}",
            labels.len()
        )));
    }
    let col: Vec<Real> = (0..n).map(|i| scores.data()[i * c + class.index()]).collect();
    let pos: Vec<bool> = labels.iter().map(|&l| l == class).collect();
    auroc(&col, &pos)
}

/// `m[true][predicted]` counts.
pub fn confusion_matrix(preds: &[MarginClass], labels: &[MarginClass]) -> Result<[[usize; NUM_CLASSES]; NUM_CLASSES]> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = [[0; NUM_CLASSES]; NUM_CLASSES];
    for (p, l) in preds.iter().zip(labels) {
        m[l.index()][p.index()] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub support: usize,
    pub auroc: Option<Real>,
    pub sensitivity: Option<Real>,
    pub specificity: Option<Real>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub samples: usize,
    pub per_class: BTreeMap<MarginClass, ClassMetrics>,
    /// Mean one-vs-rest AUROC over the three margin classes, computed on
    /// lesion samples only.
    pub macro_auroc: Real,
    /// Rows are true classes, columns predictions, in class-index order.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub accuracy: Real,
}

fn ratio(num: usize, den: usize) -> Option<Real> {
    (den > 0).then(|| num as Real / den as Real)
}

/// Builds a report from softmax probabilities `[N, C]`.
pub fn report(split: &str, probs: &Tensor, labels: &[MarginClass]) -> Result<EvalReport> {
    let (n, c) = probs.dims2()?;
    if c != NUM_CLASSES || n != labels.len() {
        return Err(Error::shape(format!(
            "probabilities [{n}, {c}] for {} labels",
            labels.len()
        )));
    }
    let preds: Vec<MarginClass> = probs
        .data()
        .chunks(c)
        .map(|row| {
            let best = (0..c).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            MarginClass::from_index(best).expect("class index in range")
        })
        .collect();
    let confusion = confusion_matrix(&preds, labels)?;

    let lesion: Vec<usize> = (0..n).filter(|&i| labels[i] != MarginClass::Negative).collect();
    let lesion_probs = probs.select_batch(&lesion)?;
    let lesion_labels: Vec<MarginClass> = lesion.iter().map(|&i| labels[i]).collect();

    let mut per_class = BTreeMap::new();
    let mut margin_aurocs = Vec::new();
    for class in MarginClass::ALL {
        let k = class.index();
        let support: usize = confusion[k].iter().sum();
        let tp = confusion[k][k];
        let predicted: usize = (0..NUM_CLASSES).map(|r| confusion[r][k]).sum();
        let tn = n - support - (predicted - tp);
        let auroc = if class == MarginClass::Negative {
            auroc_ovr(probs, labels, class).ok()
        } else {
            let a = auroc_ovr(&lesion_probs, &lesion_labels, class).ok();
            if let Some(v) = a {
                margin_aurocs.push(v);
            }
            a
        };
        per_class.insert(
            class,
            ClassMetrics {
                support,
                auroc,
                sensitivity: ratio(tp, support),
                specificity: ratio(tn, n - support),
            },
        );
    }
    if margin_aurocs.len() != MarginClass::MARGINS.len() {
        return Err(Error::Data(format!(
            "split `{split}` lacks a margin class, macro AUROC undefined"
        )));
    }
    let correct = (0..NUM_CLASSES).map(|k| confusion[k][k]).sum::<usize>();
    Ok(EvalReport {
        split: split.into(),
        samples: n,
        per_class,
        macro_auroc: margin_aurocs.iter().sum::<Real>() / margin_aurocs.len() as Real,
        confusion,
        accuracy: correct as Real / n.max(1) as Real,
    })
}

/// Runs the model over `images` and reports against `labels`.
pub fn evaluate(
    model: &Model,
    split: &str,
    images: &Tensor,
    labels: &[MarginClass],
    batch: usize,
) -> Result<EvalReport> {
    let inf = model.infer(images, batch)?;
    report(split, &inf.probabilities(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_extremes() {
        let pos = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.2, 0.3, 0.4], &pos).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4, 0.3, 0.2, 0.1], &pos).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5; 4], &pos).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn confusion_single_sample() {
        let m = confusion_matrix(&[MarginClass::Spiculated], &[MarginClass::Indistinct]).unwrap();
        assert_eq!(m[1][2], 1);
        assert_eq!(m.iter().flatten().sum::<usize>(), 1);
    }
}
