//! Test-only oracles and helpers. The oracles never call into the library's
//! numeric kernels, so the checks stay independent of the code under test.
#![allow(dead_code)]

pub mod checks;

use fpnproto::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct nested-loop convolution.
pub fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, _, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * co * ho * wo];
    for bi in 0..b {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.at4(bi, i, iy as usize, ix as usize) * k.at4(o, i, ky, kx);
                            }
                        }
                    }
                    out[((bi * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, co, ho, wo], out).unwrap()
}

/// Bilinear (align-corners=false) resampling written as a sum of tent
/// weights over every source pixel.
pub fn bilinear_oracle(x: &Tensor, factor: usize) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (h * factor, w * factor);
    let src = |o: usize, n: usize| -> Real {
        let s = (o as Real + 0.5) / factor as Real - 0.5;
        s.clamp(0.0, (n - 1) as Real)
    };
    let tent = |d: Real| (1.0 - d.abs()).max(0.0);
    let mut out = vec![0.0; b * c * ho * wo];
    for p in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let (sy, sx) = (src(oy, h), src(ox, w));
                let mut acc = 0.0;
                for iy in 0..h {
                    for ix in 0..w {
                        acc += tent(sy - iy as Real)
                            * tent(sx - ix as Real)
                            * x.data()[p * h * w + iy * w + ix];
                    }
                }
                out[p * ho * wo + oy * wo + ox] = acc;
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out).unwrap()
}

/// Mean of the k largest values minus the mean of all values, via a full sort.
pub fn focal_oracle(values: &[Real], k: usize) -> Real {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v[..k].iter().sum::<Real>() / k as Real - values.iter().sum::<Real>() / values.len() as Real
}

/// Cosine similarity of two vectors, with the patch norm guarded as the model does.
pub fn cosine_oracle(z: &[Real], p: &[Real]) -> Real {
    let dot: Real = z.iter().zip(p).map(|(a, b)| a * b).sum();
    let nz = z.iter().map(|v| v * v).sum::<Real>().sqrt().max(1e-12);
    let np = p.iter().map(|v| v * v).sum::<Real>().sqrt();
    dot / (nz * np)
}

/// AUROC by counting every positive/negative pair (ties count one half).
pub fn auroc_pairs(scores: &[Real], positive: &[bool]) -> Real {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Sobel gradient magnitude at interior pixel `(x, y)` of an `n x n` image.
pub fn sobel(img: &[Real], n: usize, x: usize, y: usize) -> Real {
    let p = |dx: isize, dy: isize| img[(y as isize + dy) as usize * n + (x as isize + dx) as usize];
    let gx = p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1);
    let gy = p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1);
    gx.hypot(gy)
}

/// Largest Sobel magnitude over interior pixels selected by `keep`.
pub fn max_sobel(img: &[Real], n: usize, keep: impl Fn(usize, usize) -> bool) -> Real {
    let mut best: Real = 0.0;
    for y in 1..n - 1 {
        for x in 1..n - 1 {
            if keep(x, y) {
                best = best.max(sobel(img, n, x, y));
            }
        }
    }
    best
}

/// Default config on a small dataset, for tests that train.
pub fn small_config(per_class: usize, seed: u64) -> fpnproto::RunConfig {
    let mut c = fpnproto::RunConfig::default();
    c.data.train_per_class = per_class;
    c.data.val_per_class = 4;
    c.data.eval_per_class = 4;
    c.data.negatives = per_class;
    c.data.eval_negatives = 2;
    c.train.seed = seed;
    c.train.batch_size = 8;
    c.train.negatives_per_epoch = per_class;
    c.train.warmup_epochs = 1;
    c.train.finetune_epochs = 1;
    c
}
