//! Case-based explanations: which prototypes fired where, what training
//! patch each one came from, and how much each added to the logits.

use crate::autodiff::kernels::upsample_forward;
use crate::autodiff::UpsampleMode;
use crate::backbone::Level;
use crate::classes::{MarginClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

pub const DEFAULT_TOP_N: usize = 3;

/// Half-open pixel box `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl PatchBox {
    /// Image footprint of cell `(y, x)` on a `cells x cells` map.
    pub fn of_cell(y: usize, x: usize, cells: usize, image_size: usize) -> Self {
        let s = image_size / cells.max(1);
        Self {
            y0: y * s,
            x0: x * s,
            y1: (y + 1) * s,
            x1: (x + 1) * s,
        }
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcePatch {
    pub sample_id: String,
    pub patch: PatchBox,
    pub similarity: Real,
}

/// Evidence from one prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeEvidence {
    pub prototype: usize,
    pub class: MarginClass,
    pub level: Level,
    pub focal_similarity: Real,
    /// Last-layer weight towards the explained class.
    pub weight: Real,
    pub contribution: Real,
    /// Raw `[eta, eta]` cosine map.
    pub map: Tensor,
    /// Map bilinearly resized to `[H, W]`.
    pub activation: Tensor,
    pub top_patch: PatchBox,
    pub source: Option<SourcePatch>,
    /// `[1, H, W]` training image the prototype was projected from.
    pub source_image: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    /// `[1, H, W]` explained image.
    pub image: Tensor,
    pub logits: [Real; NUM_CLASSES],
    pub predicted: MarginClass,
    /// `contributions[j][k]`: focal similarity of prototype `j` times its
    /// weight to class `k`. Column sums equal the logits.
    pub contributions: Vec<[Real; NUM_CLASSES]>,
    /// Prototypes with the largest non-zero contribution to the predicted
    /// class, best first.
    pub top: Vec<PrototypeEvidence>,
    /// False when some prototypes were never projected, so source patches
    /// are missing.
    pub projected: bool,
}

/// Explains the prediction on `image: [1, H, W]`.
pub fn explain(model: &Model, image: &Tensor, top_n: usize) -> Result<Explanation> {
    let h = model.input_size();
    if image.shape() != [1, h, h] {
        return Err(Error::shape(format!(
            "expected a [1, {h}, {h}] image, got {:?}",
            image.shape()
        )));
    }
    let projected = model.is_projected();
    if !projected {
        log::warn!("prototypes are not projected; source patches are unavailable");
    }
    let batch = image.clone().reshape(&[1, 1, h, h])?;
    let inf = model.infer(&batch, 1)?;
    let m = model.num_prototypes();
    let w = model.last_layer();
    let scores = inf.scores.data();
    let mut contributions = vec![[0.0; NUM_CLASSES]; m];
    for (j, row) in contributions.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = scores[j] * w.data()[k * m + j];
        }
    }
    let mut logits = [0.0; NUM_CLASSES];
    logits.copy_from_slice(inf.logits.data());
    let predicted = MarginClass::from_index(inf.predictions()[0]).expect("class index");
    let k = predicted.index();

    let mut ranked: Vec<usize> = (0..m).filter(|&j| contributions[j][k] != 0.0).collect();
    ranked.sort_by(|&a, &b| contributions[b][k].total_cmp(&contributions[a][k]).then(a.cmp(&b)));
    ranked.truncate(top_n);

    let entries = model.prototypes.entries();
    let top = ranked
        .into_iter()
        .map(|j| {
            let map = &inf.maps[j];
            let (_, eta, _) = (map.shape()[0], map.shape()[1], map.shape()[2]);
            let map = map.clone().reshape(&[eta, eta])?;
            let arg = crate::autodiff::kernels::topk_indices(map.data(), 1)[0];
            let activation = upsample_forward(
                &map.clone().reshape(&[1, 1, eta, eta])?,
                h / eta,
                UpsampleMode::Bilinear,
            )?
            .reshape(&[h, h])?;
            let source = model.provenance[j].as_ref().map(|p| {
                let cells = model.backbone.extent(p.level).unwrap_or(eta);
                SourcePatch {
                    sample_id: p.sample_id.clone(),
                    patch: PatchBox::of_cell(p.y, p.x, cells, h),
                    similarity: p.similarity,
                }
            });
            Ok(PrototypeEvidence {
                prototype: j,
                class: entries[j].class,
                level: entries[j].level,
                focal_similarity: scores[j],
                weight: w.data()[k * m + j],
                contribution: contributions[j][k],
                top_patch: PatchBox::of_cell(arg / eta, arg % eta, eta, h),
                map,
                activation,
                source,
                source_image: model.sources[j].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Explanation {
        image: image.clone(),
        logits,
        predicted,
        contributions,
        top,
        projected,
    })
}

#[derive(Serialize)]
struct TableEntry<'a> {
    rank: usize,
    prototype: usize,
    class: MarginClass,
    level: Level,
    focal_similarity: Real,
    weight: Real,
    contribution: Real,
    top_patch: PatchBox,
    source: &'a Option<SourcePatch>,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Table<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    config_hash: Option<&'a str>,
    predicted: MarginClass,
    logits: [Real; NUM_CLASSES],
    projected: bool,
    overlay_normalization: &'static str,
    input: &'static str,
    top: Vec<TableEntry<'a>>,
    contributions: &'a [[Real; NUM_CLASSES]],
}

fn to_u8(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn pgm(values: &[Real], w: usize, h: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_u8(v)));
    out
}

/// Reads an 8-bit binary PGM as a `[1, H, W]` image in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let data = bytes.get(i + 1..i + 1 + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Tensor::new(vec![1, h, w], data.iter().map(|&v| v as Real / max as Real).collect())
}

fn crop(img: &[Real], size: usize, b: &PatchBox) -> Vec<Real> {
    let mut out = Vec::with_capacity(b.area());
    for y in b.y0..b.y1 {
        out.extend_from_slice(&img[y * size + b.x0..y * size + b.x1]);
    }
    out
}

/// Input in gray with the min-max normalized activation blended in red,
/// plus the top patch outlined in yellow.
fn overlay(img: &[Real], act: &[Real], size: usize, patch: &PatchBox) -> Vec<u8> {
    let lo = act.iter().copied().fold(Real::INFINITY, Real::min);
    let hi = act.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let alpha = 0.5;
    let mut out = format!("P6\n{size} {size}\n255\n").into_bytes();
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let a = (act[i] - lo) / span;
            let g = img[i];
            let on_edge = (y == patch.y0 || y + 1 == patch.y1) && (patch.x0..patch.x1).contains(&x)
                || (x == patch.x0 || x + 1 == patch.x1) && (patch.y0..patch.y1).contains(&y);
            let rgb = if on_edge {
                [1.0, 1.0, 0.0]
            } else {
                [(1.0 - alpha) * g + alpha * a, (1.0 - alpha) * g, (1.0 - alpha) * g]
            };
            out.extend(rgb.iter().map(|&v| to_u8(v)));
        }
    }
    out
}

/// Writes the explanation as PGM/PPM images plus `explanation.json`.
/// Output bytes depend only on the arguments.
pub fn render(e: &Explanation, out_dir: &Path, config_hash: Option<&str>) -> Result<Vec<String>> {
    std::fs::create_dir_all(out_dir)?;
    let size = e.image.shape()[1];
    let img = e.image.data();
    let mut written = vec!["input.pgm".to_string()];
    std::fs::write(out_dir.join("input.pgm"), pgm(img, size, size))?;
    let mut top = Vec::new();
    for (r, ev) in e.top.iter().enumerate() {
        let rank = r + 1;
        let mut files = Vec::new();
        let mut emit = |name: String, bytes: Vec<u8>| -> Result<()> {
            std::fs::write(out_dir.join(&name), bytes)?;
            files.push(name);
            Ok(())
        };
        emit(
            format!("rank{rank}_activation.ppm"),
            overlay(img, ev.activation.data(), size, &ev.top_patch),
        )?;
        let p = &ev.top_patch;
        emit(
            format!("rank{rank}_patch.pgm"),
            pgm(&crop(img, size, p), p.x1 - p.x0, p.y1 - p.y0),
        )?;
        if let (Some(src), Some(simg)) = (&ev.source, &ev.source_image) {
            emit(format!("rank{rank}_source.pgm"), pgm(simg.data(), size, size))?;
            let b = &src.patch;
            emit(
                format!("rank{rank}_source_patch.pgm"),
                pgm(&crop(simg.data(), size, b), b.x1 - b.x0, b.y1 - b.y0),
            )?;
        }
        written.extend(files.iter().cloned());
        top.push(TableEntry {
            rank,
            prototype: ev.prototype,
            class: ev.class,
            level: ev.level,
            focal_similarity: ev.focal_similarity,
            weight: ev.weight,
            contribution: ev.contribution,
            top_patch: ev.top_patch,
            source: &ev.source,
            files,
        });
    }
    let table = Table {
        config_hash,
        predicted: e.predicted,
        logits: e.logits,
        projected: e.projected,
        overlay_normalization: "per-map min-max",
        input: "input.pgm",
        top,
        contributions: &e.contributions,
    };
    let mut json = serde_json::to_string_pretty(&table)?;
    json.push('\n');
    std::fs::write(out_dir.join("explanation.json"), json)?;
    written.push("explanation.json".into());
    Ok(written)
}

/// Plain-text summary for terminals.
pub fn summary(e: &Explanation) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "predicted: {}", e.predicted);
    for (c, l) in MarginClass::ALL.iter().zip(e.logits) {
        let _ = writeln!(s, "  logit {c:<14} {l:+.4}");
    }
    for (r, ev) in e.top.iter().enumerate() {
        let _ = writeln!(
            s,
            "  #{} prototype {} ({}, level {}): similarity {:.4} x weight {:+.2} = {:+.4}",
            r + 1,
            ev.prototype,
            ev.class,
            ev.level,
            ev.focal_similarity,
            ev.weight,
            ev.contribution
        );
    }
    if !e.projected {
        let _ = writeln!(s, "  (prototypes not projected: no source patches)");
    }
    s
}
