//! Synthetic mass-margin images.
//!
//! A lesion is a bright ellipse on low-frequency textured background with
//! pixel noise. The margin class only changes the edge: a hard one-pixel
//! ramp (circumscribed), a Gaussian-blurred edge (indistinct) or radial
//! triangular spikes (spiculated). The shared geometry is drawn before any
//! class-specific quantity, so one RNG state yields the same lesion under
//! each margin.

use crate::classes::MarginClass;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const MAX_REDRAWS: usize = 64;
const WAVES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Semi-major axis as a fraction of the image side.
    pub radius: [f64; 2],
    /// Minor-to-major axis ratio.
    pub aspect: [f64; 2],
    /// Lesion brightness above background.
    pub contrast: [f64; 2],
    pub background: [f64; 2],
    pub texture_amplitude: f64,
    pub noise_sigma: f64,
    /// Edge blur of indistinct margins, in pixels.
    pub blur_sigma: [f64; 2],
    pub spike_count: [usize; 2],
    /// Spike length in pixels.
    pub spike_length: [f64; 2],
    /// Spike half-width at its base, in radians.
    pub spike_half_width: [f64; 2],
    /// Maximum offset of the lesion centre from the image centre, in pixels.
    pub center_jitter: f64,
    /// Half-width of the annotation ring in pixels.
    pub band_radius: usize,
    /// Negative patches are cropped from backgrounds this many times larger.
    pub pool_scale: usize,
    pub crops_per_pool_image: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            radius: [0.14, 0.21],
            aspect: [0.65, 1.0],
            contrast: [0.3, 0.5],
            background: [0.15, 0.35],
            texture_amplitude: 0.05,
            noise_sigma: 0.015,
            blur_sigma: [3.0, 6.0],
            spike_count: [8, 16],
            spike_length: [4.0, 9.0],
            spike_half_width: [0.08, 0.16],
            center_jitter: 5.0,
            band_radius: 2,
            pool_scale: 2,
            crops_per_pool_image: 2,
        }
    }
}

fn check_range(field: &str, r: [f64; 2], lo: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] >= lo && r[0] <= r[1]) {
        return Err(Error::config(
            format!("data.generator.{field}"),
            format!("expected finite lo <= hi with lo >= {lo}, got {r:?}"),
        ));
    }
    Ok(())
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("radius", self.radius, 0.01)?;
        if self.radius[1] > 0.4 {
            return Err(Error::config("data.generator.radius", "must stay below 0.4"));
        }
        check_range("aspect", self.aspect, 0.1)?;
        if self.aspect[1] > 1.0 {
            return Err(Error::config("data.generator.aspect", "must not exceed 1"));
        }
        check_range("contrast", self.contrast, 0.0)?;
        check_range("background", self.background, 0.0)?;
        if self.background[1] + self.contrast[1] > 1.0 {
            return Err(Error::config(
                "data.generator.contrast",
                "background plus contrast must stay within [0, 1]",
            ));
        }
        check_range("blur_sigma", self.blur_sigma, 0.1)?;
        check_range("spike_length", self.spike_length, 0.0)?;
        check_range("spike_half_width", self.spike_half_width, 0.001)?;
        if self.spike_count[0] == 0 || self.spike_count[0] > self.spike_count[1] {
            return Err(Error::config(
                "data.generator.spike_count",
                format!("expected 1 <= lo <= hi, got {:?}", self.spike_count),
            ));
        }
        for (field, v) in [
            ("texture_amplitude", self.texture_amplitude),
            ("noise_sigma", self.noise_sigma),
            ("center_jitter", self.center_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("data.generator.{field}"), "must be >= 0"));
            }
        }
        if self.band_radius == 0 {
            return Err(Error::config("data.generator.band_radius", "must be positive"));
        }
        if self.pool_scale < 2 {
            return Err(Error::config("data.generator.pool_scale", "must be at least 2"));
        }
        if self.crops_per_pool_image == 0 {
            return Err(Error::config(
                "data.generator.crops_per_pool_image",
                "must be positive",
            ));
        }
        Ok(())
    }
}

/// One sinusoidal texture component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    /// Cycles per 64 pixels along x and y.
    pub freq: [f64; 2],
    pub phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub angle: f64,
    pub length: f64,
    pub half_width: f64,
}

/// Everything needed to re-render a lesion, short of the pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionParams {
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub rotation: f64,
    pub contrast: f64,
    pub background: f64,
    pub texture: Vec<Wave>,
    pub blur_sigma: Option<f64>,
    pub spikes: Vec<Spike>,
}

impl LesionParams {
    /// Boundary radius in direction `phi`.
    pub fn boundary_radius(&self, phi: f64) -> f64 {
        let [a, b] = self.radii;
        let t = phi - self.rotation;
        let mut r = a * b / ((b * t.cos()).powi(2) + (a * t.sin()).powi(2)).sqrt();
        for s in &self.spikes {
            let off = wrap_angle(phi - s.angle).abs();
            r += s.length * (1.0 - off / s.half_width).max(0.0);
        }
        r
    }

    /// Radial signed distance: negative inside the nominal boundary.
    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        dx.hypot(dy) - self.boundary_radius(dy.atan2(dx))
    }

    /// Half-side of a square around the centre outside of which the lesion
    /// adds nothing visible.
    pub fn extent(&self) -> f64 {
        let spike = self.spikes.iter().map(|s| s.length).fold(0.0, f64::max);
        self.radii[0] + spike + 3.0 * self.blur_sigma.unwrap_or(0.0) + 2.0
    }

    fn edge_profile(&self, s: f64) -> f64 {
        match self.blur_sigma {
            Some(sigma) => 0.5 * libm::erfc(s / (sigma * std::f64::consts::SQRT_2)),
            None => (0.5 - s).clamp(0.0, 1.0),
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let t = (a + PI).rem_euclid(2.0 * PI);
    t - PI
}

/// Provenance of a generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleMeta {
    Lesion(LesionParams),
    Background {
        background: f64,
        texture: Vec<Wave>,
    },
    NegativeCrop {
        pool_image: usize,
        /// Top-left corner `[x, y]` of the crop in the pool image.
        origin: [usize; 2],
        /// `[x0, y0, x1, y1)` of the pool image's lesion.
        lesion_box: [usize; 4],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1, H, H]`, values in [0, 1] on a 1/255 grid.
    pub image: Tensor,
    pub label: MarginClass,
    /// `[H, H]`, 0 on the margin annotation band and 1 elsewhere.
    pub mask: Tensor,
    pub meta: SampleMeta,
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn draw_texture(rng: &mut impl Rng) -> Vec<Wave> {
    (0..WAVES)
        .map(|_| Wave {
            freq: [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)],
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect()
}

fn texture_at(texture: &[Wave], amp: f64, x: f64, y: f64) -> f64 {
    let s: f64 = texture
        .iter()
        .map(|w| (2.0 * PI * (w.freq[0] * x + w.freq[1] * y) / 64.0 + w.phase).sin())
        .sum();
    amp * s / (texture.len().max(1) as f64).sqrt()
}

fn quantize(v: f64) -> Real {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as Real
}

/// Renders background plus optional lesion plus noise into a `size x size`
/// grid of values in [0, 1].
fn render(
    rng: &mut impl Rng,
    cfg: &GeneratorConfig,
    size: usize,
    background: f64,
    texture: &[Wave],
    lesion: Option<&LesionParams>,
) -> Vec<f64> {
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let mut v = background + texture_at(texture, cfg.texture_amplitude, fx, fy);
            if let Some(p) = lesion {
                v += p.contrast * p.edge_profile(p.signed_distance(fx, fy));
            }
            out.push(v);
        }
    }
    // Noise after the deterministic field so it draws identically for
    // every margin class.
    if cfg.noise_sigma > 0.0 {
        for v in out.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    out
}

/// Annotation mask: 0 within `r` pixels (Chebyshev) of the boundary on
/// either side, 1 elsewhere.
pub fn annotation_mask(inside: &[bool], size: usize, r: usize) -> Vec<Real> {
    let mut mask = vec![1.0; size * size];
    let r = r as isize;
    let n = size as isize;
    for y in 0..n {
        for x in 0..n {
            let here = inside[(y * n + x) as usize];
            let mut differs = false;
            'win: for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    let other = (0..n).contains(&yy)
                        && (0..n).contains(&xx)
                        && inside[(yy * n + xx) as usize];
                    if other != here {
                        differs = true;
                        break 'win;
                    }
                }
            }
            if differs {
                mask[(y * n + x) as usize] = 0.0;
            }
        }
    }
    mask
}

fn draw_geometry(rng: &mut impl Rng, cfg: &GeneratorConfig, size: usize, center: [f64; 2]) -> LesionParams {
    let a = uniform(rng, cfg.radius) * size as f64;
    let b = a * uniform(rng, cfg.aspect);
    LesionParams {
        center,
        radii: [a, b],
        rotation: rng.random_range(0.0..PI),
        contrast: uniform(rng, cfg.contrast),
        background: uniform(rng, cfg.background),
        texture: draw_texture(rng),
        blur_sigma: None,
        spikes: Vec::new(),
    }
}

fn draw_margin(rng: &mut impl Rng, cfg: &GeneratorConfig, class: MarginClass, p: &mut LesionParams) {
    match class {
        MarginClass::Indistinct => p.blur_sigma = Some(uniform(rng, cfg.blur_sigma)),
        MarginClass::Spiculated => {
            let n = rng.random_range(cfg.spike_count[0]..=cfg.spike_count[1]);
            p.spikes = (0..n)
                .map(|_| Spike {
                    angle: rng.random_range(-PI..PI),
                    length: uniform(rng, cfg.spike_length),
                    half_width: uniform(rng, cfg.spike_half_width),
                })
                .collect();
        }
        MarginClass::Circumscribed | MarginClass::Negative => {}
    }
}

fn to_sample(size: usize, pixels: Vec<f64>, label: MarginClass, mask: Vec<Real>, meta: SampleMeta) -> Sample {
    Sample {
        id: String::new(),
        image: Tensor::new(vec![1, size, size], pixels.into_iter().map(quantize).collect())
            .expect("size * size pixels"),
        label,
        mask: Tensor::new(vec![size, size], mask).expect("size * size mask"),
        meta,
    }
}

/// Generates one `size x size` sample of `class`. A negative class yields
/// plain textured background with an all-ones mask.
pub fn generate_lesion(class: MarginClass, rng: &mut impl Rng, size: usize, cfg: &GeneratorConfig) -> Sample {
    if class == MarginClass::Negative {
        let background = uniform(rng, cfg.background);
        let texture = draw_texture(rng);
        let pixels = render(rng, cfg, size, background, &texture, None);
        return to_sample(
            size,
            pixels,
            class,
            vec![1.0; size * size],
            SampleMeta::Background { background, texture },
        );
    }
    let half = size as f64 / 2.0 - 0.5;
    let mut params = None;
    for _ in 0..MAX_REDRAWS {
        let center = [
            half + rng.random_range(-1.0..=1.0) * cfg.center_jitter,
            half + rng.random_range(-1.0..=1.0) * cfg.center_jitter,
        ];
        let mut p = draw_geometry(rng, cfg, size, center);
        draw_margin(rng, cfg, class, &mut p);
        // Redraw lesions whose boundary would leave the frame.
        let reach = p.radii[0]
            + p.spikes.iter().map(|s| s.length).fold(0.0, f64::max)
            + cfg.band_radius as f64
            + 1.0;
        let fits = center.iter().all(|&c| c - reach >= 0.0 && c + reach <= size as f64 - 1.0);
        if fits && p.radii[1] >= 2.0 {
            params = Some(p);
            break;
        }
    }
    // Unreachable with validated configs on sensible sizes; fall back to a
    // small centred lesion rather than failing.
    let params = params.unwrap_or_else(|| {
        let mut p = draw_geometry(rng, cfg, size, [half, half]);
        p.radii = [size as f64 / 8.0, size as f64 / 10.0];
        p.spikes.clear();
        draw_margin(rng, cfg, class, &mut p);
        for s in p.spikes.iter_mut() {
            s.length = s.length.min(size as f64 / 16.0);
        }
        p
    });
    let pixels = render(rng, cfg, size, params.background, &params.texture.clone(), Some(&params));
    let inside: Vec<bool> = (0..size * size)
        .map(|i| params.signed_distance((i % size) as f64, (i / size) as f64) < 0.0)
        .collect();
    let mask = annotation_mask(&inside, size, cfg.band_radius);
    to_sample(size, pixels, class, mask, SampleMeta::Lesion(params))
}

/// Crops `n` lesion-free `size x size` patches from larger generated
/// mammogram-like images, each containing one lesion of a random class.
/// Pool image `i` draws from `pool_rng(i)`, so patches are reproducible
/// independently of `n`.
pub fn sample_negative_patches<R: Rng>(
    n: usize,
    size: usize,
    cfg: &GeneratorConfig,
    mut pool_rng: impl FnMut(usize) -> R,
) -> Vec<Sample> {
    let big = size * cfg.pool_scale;
    let mut out = Vec::with_capacity(n);
    let mut pool_image = 0;
    while out.len() < n {
        if pool_image > MAX_REDRAWS * (n + 1) {
            log::warn!("background pool exhausted after {} of {n} patches", out.len());
            break;
        }
        let mut rng = pool_rng(pool_image);
        let class = MarginClass::MARGINS[rng.random_range(0..MarginClass::MARGINS.len())];
        let lo = size as f64 * 0.3;
        let center = [
            rng.random_range(lo..big as f64 - lo),
            rng.random_range(lo..big as f64 - lo),
        ];
        let mut p = draw_geometry(&mut rng, cfg, size, center);
        draw_margin(&mut rng, cfg, class, &mut p);
        let e = p.extent();
        let clampi = |v: f64| v.clamp(0.0, big as f64) as usize;
        let lesion_box = [
            clampi((center[0] - e).floor()),
            clampi((center[1] - e).floor()),
            clampi((center[0] + e).ceil() + 1.0),
            clampi((center[1] + e).ceil() + 1.0),
        ];
        let pixels = render(&mut rng, cfg, big, p.background, &p.texture.clone(), Some(&p));
        let mut taken = 0;
        for _ in 0..MAX_REDRAWS {
            if taken == cfg.crops_per_pool_image || out.len() == n {
                break;
            }
            let ox = rng.random_range(0..=big - size);
            let oy = rng.random_range(0..=big - size);
            let disjoint = ox + size <= lesion_box[0]
                || ox >= lesion_box[2]
                || oy + size <= lesion_box[1]
                || oy >= lesion_box[3];
            if !disjoint {
                continue;
            }
            let crop: Vec<f64> = (0..size * size)
                .map(|i| pixels[(oy + i / size) * big + ox + i % size])
                .collect();
            out.push(to_sample(
                size,
                crop,
                MarginClass::Negative,
                vec![1.0; size * size],
                SampleMeta::NegativeCrop {
                    pool_image,
                    origin: [ox, oy],
                    lesion_box,
                },
            ));
            taken += 1;
        }
        pool_image += 1;
    }
    out
}
