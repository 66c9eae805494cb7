//! Property checks shared by the topic test files and the acceptance run.
//! Each check panics on failure.

use super::{auroc_pairs, bilinear_oracle, conv_oracle, cosine_oracle, focal_oracle, random_tensor, rng};
use fpnproto::autodiff::{gradient_check_many, Graph, NodeId, UpsampleMode};
use fpnproto::backbone::{self, BackboneConfig, BlockSpec, Level};
use fpnproto::eval::{auroc, confusion_matrix};
use fpnproto::losses::{self, FineAnnotationCoeffs, LossTargets, LossWeights};
use fpnproto::model::{LAST_LAYER, PROTOTYPES};
use fpnproto::params::ParamNodes;
use fpnproto::prototype::{self, PrototypeConfig, PrototypeGroup};
use fpnproto::{MarginClass, Model, Real, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

const TRIALS: u64 = 100;
const EPS: Real = 1e-5;
const TOL: Real = 1e-4;

fn random_class(r: &mut ChaCha8Rng) -> MarginClass {
    MarginClass::ALL[r.random_range(0..4)]
}

/// Random allocation on levels 2 and 4 with at least one prototype per class.
fn random_prototypes(r: &mut ChaCha8Rng) -> PrototypeConfig {
    let mut groups = Vec::new();
    for class in MarginClass::ALL {
        for level in [2, 4] {
            let count = r.random_range(if level == 2 { 1 } else { 0 }..3);
            if count > 0 {
                groups.push(PrototypeGroup {
                    class,
                    level,
                    count,
                    top_k: r.random_range(1..5),
                });
            }
        }
    }
    PrototypeConfig { groups }
}

struct Layer {
    cfg: PrototypeConfig,
    pyramid: BTreeMap<Level, Tensor>,
    protos: Tensor,
}

fn random_layer(r: &mut ChaCha8Rng, b: usize, d: usize) -> Layer {
    let cfg = random_prototypes(r);
    let mut pyramid = BTreeMap::new();
    pyramid.insert(2, random_tensor(r, &[b, d, 4, 4]));
    pyramid.insert(4, random_tensor(r, &[b, d, 2, 2]));
    let protos = random_tensor(r, &[cfg.len(), d]);
    Layer { cfg, pyramid, protos }
}

fn run_layer(g: &mut Graph, l: &Layer) -> (Vec<prototype::LevelSimilarity>, fpnproto::autodiff::NodeId) {
    let nodes = l.pyramid.iter().map(|(&k, v)| (k, g.constant(v.clone()))).collect();
    let p = g.constant(l.protos.clone());
    prototype::prototype_layer(g, &l.cfg, p, &nodes).unwrap()
}

fn patch(z: &Tensor, b: usize, n: usize) -> Vec<Real> {
    let (_, d, h, w) = z.dims4().unwrap();
    (0..d).map(|c| z.data()[(b * d + c) * h * w + n]).collect()
}

pub fn patch_cosine_similarity_matches_oracle() {
    for t in 0..TRIALS {
        let mut r = rng(1000 + t);
        let (b, d, h) = (r.random_range(1..3), r.random_range(1..6), r.random_range(1..5));
        let z = random_tensor(&mut r, &[b, d, h, h]);
        let p: Vec<Real> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = prototype::patch_cosine_similarity(&z, &p).unwrap();
        for bi in 0..b {
            for n in 0..h * h {
                let want = cosine_oracle(&patch(&z, bi, n), &p);
                assert!((got.data()[bi * h * h + n] - want).abs() < 1e-12, "trial {t}");
            }
        }
    }
}

pub fn layer_maps_and_focal_scores_match_oracles() {
    for t in 0..TRIALS {
        let mut r = rng(2000 + t);
        let (b, d) = (r.random_range(1..3), r.random_range(2..6));
        let layer = random_layer(&mut r, b, d);
        let mut g = Graph::new();
        let (levels, scores) = run_layer(&mut g, &layer);
        let entries = layer.cfg.entries();
        let m = entries.len();
        assert_eq!(g.value(scores).shape(), &[b, m]);
        for lvl in &levels {
            let z = &layer.pyramid[&lvl.level];
            let (_, _, h, w) = z.dims4().unwrap();
            let maps = g.value(lvl.maps);
            for (jl, &j) in lvl.prototypes.iter().enumerate() {
                let p = &layer.protos.data()[j * d..(j + 1) * d];
                for bi in 0..b {
                    let map: Vec<Real> = (0..h * w)
                        .map(|n| maps.data()[(bi * lvl.prototypes.len() + jl) * h * w + n])
                        .collect();
                    for n in 0..h * w {
                        assert!((map[n] - cosine_oracle(&patch(z, bi, n), p)).abs() < 1e-12);
                    }
                    let want = focal_oracle(&map, entries[j].top_k);
                    let lib = prototype::focal_similarity(&map, entries[j].top_k).unwrap();
                    let got = g.value(scores).data()[bi * m + j];
                    assert!((got - want).abs() < 1e-12, "trial {t} prototype {j}");
                    assert!((lib - want).abs() < 1e-12);
                }
            }
        }
    }
}

pub fn cluster_and_separation_match_oracle() {
    for t in 0..TRIALS {
        let mut r = rng(3000 + t);
        let b = r.random_range(1..6);
        let layer = random_layer(&mut r, 1, 2);
        let classes = layer.cfg.classes();
        let m = classes.len();
        let scores = random_tensor(&mut r, &[b, m]);
        let labels: Vec<MarginClass> = (0..b).map(|_| random_class(&mut r)).collect();
        let mut g = Graph::new();
        let s = g.constant(scores.clone());
        let (clst, sep) = losses::cluster_and_separation(&mut g, s, &labels, &classes).unwrap();

        let row_max = |i: usize, own: bool| {
            (0..m)
                .filter(|&j| (classes[j] == labels[i]) == own)
                .map(|j| scores.data()[i * m + j])
                .fold(Real::NEG_INFINITY, Real::max)
        };
        let want_clst = -(0..b).map(|i| row_max(i, true)).sum::<Real>() / b as Real;
        let want_sep = (0..b).map(|i| row_max(i, false)).sum::<Real>() / b as Real;
        assert!((g.value(clst).item() - want_clst).abs() < 1e-12, "trial {t}");
        assert!((g.value(sep).item() - want_sep).abs() < 1e-12, "trial {t}");
    }
}

pub fn orthogonality_matches_oracle() {
    for t in 0..TRIALS {
        let mut r = rng(4000 + t);
        let d = r.random_range(2..7);
        let layer = random_layer(&mut r, 1, d);
        let mut g = Graph::new();
        let p = g.constant(layer.protos.clone());
        let got = losses::orthogonality(&mut g, p, &layer.cfg).unwrap();

        let unit = |j: usize| {
            let v = &layer.protos.data()[j * d..(j + 1) * d];
            let n = v.iter().map(|x| x * x).sum::<Real>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let mut want = 0.0;
        for c in MarginClass::ALL {
            let idx = layer.cfg.of_class(c);
            for &a in &idx {
                for &bb in &idx {
                    let dot: Real = unit(a).iter().zip(unit(bb)).map(|(x, y)| x * y).sum();
                    let e = dot - if a == bb { 1.0 } else { 0.0 };
                    want += e * e;
                }
            }
        }
        assert!((g.value(got).item() - want).abs() < 1e-12, "trial {t}: {} vs {want}", g.value(got).item());
    }
}

pub fn fine_annotation_matches_oracle() {
    for t in 0..TRIALS {
        let mut r = rng(5000 + t);
        let b = r.random_range(1..4);
        let layer = random_layer(&mut r, b, 3);
        let classes = layer.cfg.classes();
        let hw = 8;
        let masks = Tensor::from_fn(&[b, hw, hw], |_| if r.random_bool(0.3) { 0.0 } else { 1.0 });
        let labels: Vec<MarginClass> = (0..b).map(|_| random_class(&mut r)).collect();
        let annotated: Vec<bool> = (0..b).map(|_| r.random_bool(0.7)).collect();
        let coeffs = if t % 2 == 0 {
            FineAnnotationCoeffs::default()
        } else {
            let mut c = FineAnnotationCoeffs::zero();
            for row in c.masked.iter_mut().chain(c.full.iter_mut()) {
                for v in row.iter_mut() {
                    *v = r.random_range(0.0..2.0);
                }
            }
            c
        };
        let mut g = Graph::new();
        let (levels, _) = run_layer(&mut g, &layer);
        let got = losses::fine_annotation(&mut g, &levels, &masks, &labels, &annotated, &classes, &coeffs)
            .unwrap();

        let mut want = 0.0;
        for lvl in &levels {
            let maps = g.value(lvl.maps).clone();
            let (_, ml, eta, _) = maps.dims4().unwrap();
            let pam = bilinear_oracle(&maps, hw / eta);
            for i in (0..b).filter(|&i| annotated[i]) {
                for (jl, &j) in lvl.prototypes.iter().enumerate() {
                    let a = coeffs.masked[labels[i].index()][classes[j].index()];
                    let f = coeffs.full[labels[i].index()][classes[j].index()];
                    let mut ss = 0.0;
                    for p in 0..hw * hw {
                        let v = (a * masks.data()[i * hw * hw + p] + f)
                            * pam.data()[(i * ml + jl) * hw * hw + p];
                        ss += v * v;
                    }
                    want += ss.sqrt();
                }
            }
        }
        assert!((g.value(got).item() - want).abs() < 1e-12, "trial {t}");
    }
}

pub fn auroc_matches_pair_counting() {
    for t in 0..TRIALS {
        let mut r = rng(6000 + t);
        let n = r.random_range(2..40);
        let ties = t % 2 == 1;
        let scores: Vec<Real> = (0..n)
            .map(|_| {
                if ties {
                    r.random_range(0..4) as Real
                } else {
                    r.random_range(-1.0..1.0)
                }
            })
            .collect();
        let mut pos: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        pos[0] = true;
        pos[1] = false;
        let got = auroc(&scores, &pos).unwrap();
        let want = auroc_pairs(&scores, &pos);
        let tol = if ties { 1e-6 } else { 1e-12 };
        assert!((got - want).abs() < tol, "trial {t}: {got} vs {want}");
    }
}

pub fn twenty_random_scores_match_pair_counting() {
    let mut r = rng(77);
    let scores: Vec<Real> = (0..20).map(|_| r.random_range(0.0..1.0)).collect();
    let pos: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
    assert!((auroc(&scores, &pos).unwrap() - auroc_pairs(&scores, &pos)).abs() < 1e-12);
}

pub fn confusion_matrix_matches_tally() {
    for t in 0..TRIALS {
        let mut r = rng(7000 + t);
        let n = r.random_range(0..50);
        let labels: Vec<MarginClass> = (0..n).map(|_| random_class(&mut r)).collect();
        let preds: Vec<MarginClass> = (0..n).map(|_| random_class(&mut r)).collect();
        let m = confusion_matrix(&preds, &labels).unwrap();
        for a in MarginClass::ALL {
            for p in MarginClass::ALL {
                let tally = (0..n).filter(|&i| labels[i] == a && preds[i] == p).count();
                assert_eq!(m[a.index()][p.index()], tally);
            }
            let row: usize = m[a.index()].iter().sum();
            assert_eq!(row, labels.iter().filter(|&&l| l == a).count());
        }
    }
}

pub fn confusion_matrix_examples() {
    let labels = [MarginClass::Circumscribed, MarginClass::Spiculated, MarginClass::Negative];
    let m = confusion_matrix(&labels, &labels).unwrap();
    for a in 0..4 {
        for b in 0..4 {
            assert_eq!(m[a][b] > 0, a == b && a != 1);
        }
    }
}

/// Every differentiable op, composed with a random linear functional so
/// that each output coordinate receives a distinct upstream gradient.
/// Returns the worst relative error.
pub fn every_op_passes_gradient_check() -> Real {
    type OpFn = Box<dyn Fn(&mut Graph, &[fpnproto::autodiff::NodeId]) -> fpnproto::Result<fpnproto::autodiff::NodeId>>;
    struct Case {
        name: &'static str,
        shapes: Vec<Vec<usize>>,
        positive: bool,
        f: OpFn,
    }
    let cases: Vec<Case> = vec![
        Case { name: "conv3x3", shapes: vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3]], positive: false,
            f: Box::new(|g, x| g.conv2d(x[0], x[1], 1, 1)) },
        Case { name: "conv3x3 stride2", shapes: vec![vec![1, 2, 6, 6], vec![2, 2, 3, 3]], positive: false,
            f: Box::new(|g, x| g.conv2d(x[0], x[1], 2, 1)) },
        Case { name: "conv1x1", shapes: vec![vec![2, 3, 4, 4], vec![2, 3, 1, 1]], positive: false,
            f: Box::new(|g, x| g.conv2d(x[0], x[1], 1, 0)) },
        Case { name: "bias_add", shapes: vec![vec![2, 3, 2, 2], vec![3]], positive: false,
            f: Box::new(|g, x| g.bias_add(x[0], x[1])) },
        Case { name: "relu", shapes: vec![vec![2, 3, 3]], positive: false,
            f: Box::new(|g, x| Ok(g.relu(x[0]))) },
        Case { name: "maxpool", shapes: vec![vec![1, 2, 4, 4]], positive: false,
            f: Box::new(|g, x| g.maxpool2d(x[0], 2, 2)) },
        Case { name: "upsample nearest", shapes: vec![vec![1, 2, 2, 3]], positive: false,
            f: Box::new(|g, x| g.upsample(x[0], 2, UpsampleMode::Nearest)) },
        Case { name: "upsample bilinear", shapes: vec![vec![1, 2, 3, 3]], positive: false,
            f: Box::new(|g, x| g.upsample(x[0], 4, UpsampleMode::Bilinear)) },
        Case { name: "add", shapes: vec![vec![2, 3], vec![2, 3]], positive: false,
            f: Box::new(|g, x| g.add(x[0], x[1])) },
        Case { name: "sub", shapes: vec![vec![2, 3], vec![2, 3]], positive: false,
            f: Box::new(|g, x| g.sub(x[0], x[1])) },
        Case { name: "mul", shapes: vec![vec![2, 3], vec![2, 3]], positive: false,
            f: Box::new(|g, x| g.mul(x[0], x[1])) },
        Case { name: "square via mul", shapes: vec![vec![4]], positive: false,
            f: Box::new(|g, x| g.mul(x[0], x[0])) },
        Case { name: "scale", shapes: vec![vec![5]], positive: false,
            f: Box::new(|g, x| Ok(g.scale(x[0], -2.5))) },
        Case { name: "linear", shapes: vec![vec![3, 4], vec![2, 4]], positive: false,
            f: Box::new(|g, x| g.linear(x[0], x[1])) },
        Case { name: "softmax", shapes: vec![vec![2, 4]], positive: false,
            f: Box::new(|g, x| g.softmax(x[0])) },
        Case { name: "log_softmax", shapes: vec![vec![2, 4]], positive: false,
            f: Box::new(|g, x| g.log_softmax(x[0])) },
        Case { name: "log", shapes: vec![vec![6]], positive: true,
            f: Box::new(|g, x| Ok(g.log(x[0]))) },
        Case { name: "normalize_channels", shapes: vec![vec![2, 3, 2, 2]], positive: false,
            f: Box::new(|g, x| g.normalize_channels(x[0], 1e-12)) },
        Case { name: "reshape", shapes: vec![vec![2, 6]], positive: false,
            f: Box::new(|g, x| g.reshape(x[0], &[3, 4])) },
        Case { name: "topk_mean", shapes: vec![vec![2, 2, 3, 3]], positive: false,
            f: Box::new(|g, x| g.topk_mean(x[0], &[3, 2])) },
        Case { name: "spatial_mean", shapes: vec![vec![2, 2, 3, 3]], positive: false,
            f: Box::new(|g, x| g.spatial_mean(x[0])) },
        Case { name: "spatial_l2_norm", shapes: vec![vec![2, 2, 3, 3]], positive: false,
            f: Box::new(|g, x| g.spatial_l2_norm(x[0])) },
        Case { name: "concat_cols", shapes: vec![vec![2, 2], vec![2, 3]], positive: false,
            f: Box::new(|g, x| g.concat_cols(&[x[0], x[1]])) },
        Case { name: "select_cols", shapes: vec![vec![2, 4]], positive: false,
            f: Box::new(|g, x| g.select_cols(x[0], &[3, 0, 0, 2])) },
        Case { name: "select_rows", shapes: vec![vec![4, 3]], positive: false,
            f: Box::new(|g, x| g.select_rows(x[0], &[2, 2, 1])) },
        Case { name: "masked_row_max", shapes: vec![vec![3, 4]], positive: false,
            f: Box::new(|g, x| g.masked_row_max(x[0], &[true, false, true, true, false, true, false, false, true, true, true, true])) },
        Case { name: "pick", shapes: vec![vec![3, 4]], positive: false,
            f: Box::new(|g, x| g.pick(x[0], &[1, 3, 0])) },
        Case { name: "mean", shapes: vec![vec![3, 4]], positive: false,
            f: Box::new(|g, x| Ok(g.mean(x[0]))) },
    ];
    let mut worst: Real = 0.0;
    for case in &cases {
        for seed in 0..5u64 {
            let mut r = rng(1000 + seed);
            let inputs: Vec<Tensor> = case
                .shapes
                .iter()
                .map(|s| {
                    let t = random_tensor(&mut r, s);
                    if case.positive { t.map(|v| v.abs() + 0.1) } else { t }
                })
                .collect();
            // a fixed random projection makes the output scalar
            let probe_seed = 5000 + seed;
            let rep = gradient_check_many(
                |g, ids| {
                    let y = (case.f)(g, ids)?;
                    let shape = g.value(y).shape().to_vec();
                    let mut pr = rng(probe_seed);
                    let w = random_tensor(&mut pr, &shape);
                    let yw = g.mul_const(y, &w)?;
                    Ok(g.sum(yw))
                },
                &inputs,
                EPS,
            )
            .unwrap();
            assert!(rep.max_rel_error < TOL, "{} seed {}: {:?}", case.name, seed, rep);
            worst = worst.max(rep.max_rel_error);
        }
    }
    worst
}

fn tiny() -> (BackboneConfig, PrototypeConfig) {
    let bb = BackboneConfig {
        input_size: 16,
        stem_stride: 1,
        blocks: vec![BlockSpec { convs: 1, width: 2 }; 4],
        feature_dim: 3,
        levels: vec![2, 3, 4, 5],
    };
    (bb, PrototypeConfig::uniform(&MarginClass::ALL, &[2, 4], 1, 2))
}

/// Gradient of the weighted objective with respect to every parameter of a
/// tiny model. Returns the worst relative error.
pub fn full_objective_passes_gradient_check() -> Real {
    let (bb, pc) = tiny();
    let mut worst: Real = 0.0;
    for seed in 0..5u64 {
        let model = Model::new(bb.clone(), pc.clone(), seed).unwrap();
        let mut r = rng(900 + seed);
        let images = random_tensor(&mut r, &[2, 1, 16, 16]);
        let masks = Tensor::from_fn(&[2, 16, 16], |_| if r.random_bool(0.3) { 0.0 } else { 1.0 });
        let labels = [MarginClass::ALL[r.random_range(0..4)], MarginClass::ALL[r.random_range(0..4)]];
        // The last layer is randomized so no gradient is trivially zero.
        let names: Vec<String> = model.params.names().map(String::from).collect();
        let inputs: Vec<Tensor> = names
            .iter()
            .map(|n| {
                let t = model.params.get(n).unwrap();
                if n == LAST_LAYER { random_tensor(&mut r, t.shape()) } else { t.clone() }
            })
            .collect();
        let weights = LossWeights::default();
        let coeffs = FineAnnotationCoeffs::default();
        let annotated = [true, true];
        let rep = gradient_check_many(
            |g: &mut Graph, ids: &[NodeId]| {
                let params = ParamNodes::from_nodes(names.iter().cloned().zip(ids.iter().copied()).collect::<BTreeMap<_, _>>());
                let x = g.constant(images.clone());
                let c = backbone::bottom_up(g, &bb, &params, x)?;
                let z = backbone::top_down(g, &bb, &params, &c)?;
                let protos = params.get(PROTOTYPES)?;
                let (levels, scores) = prototype::prototype_layer(g, &pc, protos, &z)?;
                let logits = g.linear(scores, params.get(LAST_LAYER)?)?;
                let terms = losses::total_loss(
                    g,
                    logits,
                    scores,
                    &levels,
                    protos,
                    &pc,
                    &LossTargets { labels: &labels, masks: &masks, annotated: &annotated },
                    &weights,
                    &coeffs,
                )?;
                Ok(terms.total)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(rep.max_rel_error < TOL, "seed {seed}: {rep:?} at {}", names[rep.worst.0]);
        worst = worst.max(rep.max_rel_error);
    }
    worst
}

fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    Tensor::from_fn(&[n, c, h, w], |i| x.data()[i] + b.data()[(i / (h * w)) % c])
}

fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

fn maxpool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    let (ho, wo) = (h / 2, w / 2);
    Tensor::from_fn(&[n, c, ho, wo], |i| {
        let (p, oy, ox) = (i / (ho * wo), (i / wo) % ho, i % wo);
        let at = |y: usize, xx: usize| x.data()[p * h * w + y * w + xx];
        at(2 * oy, 2 * ox)
            .max(at(2 * oy, 2 * ox + 1))
            .max(at(2 * oy + 1, 2 * ox))
            .max(at(2 * oy + 1, 2 * ox + 1))
    })
}

fn nearest_up(x: &Tensor, f: usize) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    Tensor::from_fn(&[n, c, h * f, w * f], |i| {
        let (p, y, xx) = (i / (h * f * w * f), (i / (w * f)) % (h * f), i % (w * f));
        x.data()[p * h * w + (y / f) * w + xx / f]
    })
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i])
}

/// Bottom-up and top-down maps composed by hand from named parameters.
fn oracle_pyramid(model: &Model, x: &Tensor) -> (BTreeMap<Level, Tensor>, BTreeMap<Level, Tensor>) {
    let cfg = &model.backbone;
    let p = |name: String| model.params.get(&name).unwrap().clone();
    let n = cfg.blocks.len();
    let mut cur = x.clone();
    let mut c = BTreeMap::new();
    for (b, block) in cfg.blocks.iter().enumerate() {
        for k in 0..block.convs {
            let stride = if b == 0 && k == 0 { cfg.stem_stride } else { 1 };
            let w = p(format!("backbone.block{b}.conv{k}.weight"));
            let bias = p(format!("backbone.block{b}.conv{k}.bias"));
            cur = relu(&add_bias(&conv_oracle(&cur, &w, stride, 1), &bias));
        }
        if b + 1 < n {
            cur = maxpool2(&cur);
        }
        let level = (5 + b + 1 - n) as Level;
        if (2..=5).contains(&level) {
            c.insert(level, cur.clone());
        }
    }
    let lateral = |l: Level| {
        add_bias(
            &conv_oracle(&c[&l], &p(format!("fpn.lateral{l}.weight")), 1, 0),
            &p(format!("fpn.lateral{l}.bias")),
        )
    };
    let emitted = cfg.emitted_levels();
    let (lo, hi) = (emitted[0], *emitted.last().unwrap());
    let mut z: BTreeMap<Level, Tensor> = BTreeMap::new();
    z.insert(hi, lateral(hi));
    for l in (lo..hi).rev() {
        let above = &z[&(l + 1)];
        let f = c[&l].shape()[2] / above.shape()[2];
        let merged = add(&nearest_up(above, f), &lateral(l));
        let s = add_bias(
            &conv_oracle(&merged, &p(format!("fpn.smooth{l}.weight")), 1, 1),
            &p(format!("fpn.smooth{l}.bias")),
        );
        z.insert(l, s);
    }
    z.retain(|l, _| emitted.contains(l));
    (c, z)
}

fn assert_close(a: &Tensor, b: &Tensor, tol: Real, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}");
    let d = a.max_abs_diff(b);
    assert!(d < tol, "{what}: max difference {d}");
}

pub fn desk_pyramid_matches_hand_composition() {
    for seed in 0..3 {
        let model = Model::new(BackboneConfig::desk(), PrototypeConfig::default(), seed).unwrap();
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[2, 1, 64, 64]);
        let got = model.feature_pyramid(&x).unwrap();
        let (c, z) = oracle_pyramid(&model, &x);
        for (l, t) in &c {
            assert_close(&got.bottom_up[l], t, 1e-12, &format!("c{l}"));
        }
        assert_eq!(got.top_down.keys().copied().collect::<Vec<_>>(), vec![2, 3, 4, 5]);
        for (l, t) in &z {
            assert_close(&got.top_down[l], t, 1e-12, &format!("z{l}"));
        }
        let extents: Vec<usize> = got.top_down.values().map(|t| t.shape()[2]).collect();
        assert_eq!(extents, vec![16, 8, 4, 4]);
        assert!(got.top_down.values().all(|t| t.shape()[1] == 32));
    }
}

pub fn sparse_levels_still_traverse_the_pathway() {
    let mut cfg = BackboneConfig::desk();
    cfg.levels = vec![2, 5];
    let protos = PrototypeConfig::uniform(&MarginClass::ALL, &[2, 5], 1, 2);
    let model = Model::new(cfg, protos, 3).unwrap();
    let x = random_tensor(&mut rng(3), &[1, 1, 64, 64]);
    let got = model.feature_pyramid(&x).unwrap();
    let (_, z) = oracle_pyramid(&model, &x);
    assert_eq!(got.top_down.keys().copied().collect::<Vec<_>>(), vec![2, 5]);
    for (l, t) in &z {
        assert_close(&got.top_down[l], t, 1e-12, &format!("z{l}"));
    }
}

pub fn paper_scale_layout_gives_56_to_14() {
    let cfg = BackboneConfig::vgg16();
    let ext: Vec<usize> = (2..=5).map(|l| cfg.extent(l).unwrap()).collect();
    assert_eq!(ext, vec![56, 28, 14, 14]);
    // Same layout with narrow blocks so the forward pass stays cheap.
    let mut narrow = cfg.clone();
    narrow.blocks = cfg.blocks.iter().map(|b| BlockSpec { convs: b.convs, width: 2 }).collect();
    narrow.feature_dim = 4;
    let model = Model::new(narrow, PrototypeConfig::uniform(&MarginClass::ALL, &[2, 5], 1, 3), 0).unwrap();
    let x = random_tensor(&mut rng(0), &[1, 1, 224, 224]);
    let pyr = model.feature_pyramid(&x).unwrap();
    let shapes: Vec<Vec<usize>> = pyr.top_down.values().map(|t| t.shape().to_vec()).collect();
    assert_eq!(
        shapes,
        vec![vec![1, 4, 56, 56], vec![1, 4, 28, 28], vec![1, 4, 14, 14], vec![1, 4, 14, 14]]
    );
}

pub fn similarity_maps_depend_only_on_their_own_level() {
    let cfg = PrototypeConfig::default();
    let d = 8;
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let sizes = [(2, 16), (3, 8), (4, 4), (5, 4)];
        let base: BTreeMap<Level, Tensor> = sizes
            .iter()
            .map(|&(l, e)| (l, random_tensor(&mut r, &[2, d, e, e])))
            .collect();
        let protos = random_tensor(&mut r, &[cfg.len(), d]);
        let run = |pyr: &BTreeMap<Level, Tensor>| {
            let mut g = Graph::new();
            let nodes = pyr.iter().map(|(&l, t)| (l, g.constant(t.clone()))).collect();
            let p = g.constant(protos.clone());
            let (levels, _) = prototype::prototype_layer(&mut g, &cfg, p, &nodes).unwrap();
            levels
                .iter()
                .map(|lv| (lv.level, (g.value(lv.maps).clone(), g.value(lv.focal).clone())))
                .collect::<BTreeMap<_, _>>()
        };
        let reference = run(&base);
        for &(own, _) in &sizes {
            let mut perturbed = base.clone();
            for (l, t) in perturbed.iter_mut() {
                if *l != own {
                    *t = random_tensor(&mut r, t.shape());
                }
            }
            let out = run(&perturbed);
            if let Some(expected) = reference.get(&own) {
                // Bitwise, not approximately.
                assert_eq!(out[&own].0.data(), expected.0.data(), "level {own} maps moved");
                assert_eq!(out[&own].1.data(), expected.1.data(), "level {own} scores moved");
            }
        }
    }
}

/// Every prototype of a projected model is bitwise equal to the latent
/// patch its provenance names, comes from an image of its own class, and
/// has cosine similarity one there. Returns the largest `|cos - 1|`.
pub fn projected_prototypes_match_sources(model: &Model, data: &fpnproto::data::Dataset) -> Real {
    assert!(model.is_projected(), "some prototypes have no provenance");
    let entries = model.prototypes.entries();
    let dim = model.backbone.feature_dim;
    let mut worst: Real = 0.0;
    for j in 0..model.num_prototypes() {
        let p = model.provenance[j].as_ref().unwrap();
        let src = data.train.find(&p.sample_id).or_else(|| data.negatives.find(&p.sample_id)).unwrap();
        assert_eq!(src.label, entries[j].class, "prototype {j} projected across classes");
        assert_eq!(model.sources[j].as_ref().unwrap(), &src.image);
        let h = src.image.shape()[1];
        let pyr = model.feature_pyramid(&src.image.clone().reshape(&[1, 1, h, h]).unwrap()).unwrap();
        let z = &pyr.top_down[&p.level];
        let (_, _, eh, ew) = z.dims4().unwrap();
        let patch: Vec<Real> = (0..dim).map(|c| z.data()[c * eh * ew + p.y * ew + p.x]).collect();
        assert_eq!(model.prototype_vector(j), &patch[..], "prototype {j}");
        let sim = prototype::patch_cosine_similarity(z, model.prototype_vector(j)).unwrap();
        let dev = (sim.data()[p.y * ew + p.x] - 1.0).abs();
        assert!(dev < 1e-6, "prototype {j}: cosine off by {dev}");
        worst = worst.max(dev);
    }
    worst
}
