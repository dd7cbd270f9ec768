//! Synthetic lesion scenes with exact ground truth.
//!
//! Each lesion is a union of 2 to 4 rotated ellipses. Every category has a
//! base color and a stripe texture; per image the whole scene gets a random
//! gain and each category a small color jitter, scaled by the appearance-shift
//! factor.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::mask::{BitMask, LabelMap};
use crate::math::{cos, sin, sqrt};
use crate::rng::RngHandle;
use crate::types::ImageTensor;

/// Placement attempts per lesion before giving up.
pub const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Inclusive lesion count range per non-background category.
    pub blobs_per_class: (usize, usize),
    /// Inclusive lesion radius range in pixels.
    pub radius: (f64, f64),
    pub texture_amplitude: f64,
    /// Relative strength of per-image color drift.
    pub appearance_shift: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 224,
            width: 224,
            num_classes: 3,
            blobs_per_class: (1, 2),
            radius: (22.0, 38.0),
            texture_amplitude: 0.06,
            appearance_shift: 0.1,
            noise: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(config_err!("synthetic images need a positive size"));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(config_err!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if self.blobs_per_class.0 > self.blobs_per_class.1 {
            return Err(config_err!("blob count range {:?} is empty", self.blobs_per_class));
        }
        let (r0, r1) = self.radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(config_err!("radius range {:?} is invalid", self.radius));
        }
        if !(self.texture_amplitude >= 0.0 && self.appearance_shift >= 0.0 && self.noise >= 0.0) {
            return Err(config_err!("texture, shift and noise must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Whether the center of pixel `(row, col)` lies inside.
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let dx = col as f64 + 0.5 - self.cx;
        let dy = row as f64 + 0.5 - self.cy;
        let (s, c) = (sin(self.theta), cos(self.theta));
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

/// One lesion as logged by the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub category: usize,
    pub ellipses: Vec<Ellipse>,
}

impl Blob {
    pub fn rasterize(&self, height: usize, width: usize) -> BitMask {
        BitMask::from_fn(height, width, |r, c| self.ellipses.iter().any(|e| e.contains(r, c)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub image: ImageTensor,
    pub labels: LabelMap,
    pub blobs: Vec<Blob>,
}

/// Per-category appearance shared by all images of a seed.
#[derive(Clone, Debug)]
struct Palette {
    colors: Vec<[f64; 3]>,
    stripe_freq: Vec<f64>,
    stripe_angle: Vec<f64>,
}

fn color_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    sqrt((0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum())
}

impl Palette {
    fn new(num_classes: usize, rng: &mut RngHandle) -> Self {
        let mut colors: Vec<[f64; 3]> = Vec::with_capacity(num_classes);
        for k in 0..num_classes {
            let mut best = [0.5; 3];
            let mut best_gap = -1.0;
            for _ in 0..64 {
                let c = [
                    rng.uniform_range(0.15, 0.85),
                    rng.uniform_range(0.15, 0.85),
                    rng.uniform_range(0.15, 0.85),
                ];
                let gap = colors
                    .iter()
                    .map(|o| color_distance(o, &c))
                    .fold(f64::INFINITY, f64::min);
                if gap > best_gap {
                    best_gap = gap;
                    best = c;
                }
                if k == 0 || gap > 0.35 {
                    break;
                }
            }
            colors.push(best);
        }
        let stripe_freq = (0..num_classes).map(|k| 2.0 + 1.5 * k as f64).collect();
        let stripe_angle = (0..num_classes).map(|_| rng.uniform_range(0.0, PI)).collect();
        Self {
            colors,
            stripe_freq,
            stripe_angle,
        }
    }
}

fn sample_blob(spec: &SyntheticSpec, category: usize, rng: &mut RngHandle) -> Blob {
    let r = rng.uniform_range(spec.radius.0, spec.radius.1);
    let margin_x = r.min(spec.width as f64 / 2.0);
    let margin_y = r.min(spec.height as f64 / 2.0);
    let cx = rng.uniform_range(margin_x, spec.width as f64 - margin_x);
    let cy = rng.uniform_range(margin_y, spec.height as f64 - margin_y);
    let parts = rng.range_inclusive(2, 4);
    let ellipses = (0..parts)
        .map(|_| Ellipse {
            cx: cx + rng.uniform_range(-0.4, 0.4) * r,
            cy: cy + rng.uniform_range(-0.4, 0.4) * r,
            a: rng.uniform_range(0.5, 1.0) * r,
            b: rng.uniform_range(0.5, 1.0) * r,
            theta: rng.uniform_range(0.0, PI),
        })
        .collect();
    Blob { category, ellipses }
}

fn place_blobs(spec: &SyntheticSpec, rng: &mut RngHandle) -> Result<(LabelMap, Vec<Blob>)> {
    let (h, w) = (spec.height, spec.width);
    let mut labels = LabelMap::filled(h, w, 0);
    let mut blobs = Vec::new();
    for k in 1..spec.num_classes {
        let count = rng.range_inclusive(spec.blobs_per_class.0, spec.blobs_per_class.1);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..MAX_ATTEMPTS {
                let blob = sample_blob(spec, k, rng);
                let mask = blob.rasterize(h, w);
                let clash = mask.ones().any(|i| {
                    let l = labels.as_slice()[i];
                    l != 0 && l as usize != k
                });
                if clash || mask.is_empty() {
                    continue;
                }
                for i in mask.ones() {
                    labels.set(i / w, i % w, k as u8);
                }
                blobs.push(blob);
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Generation(alloc::format!(
                    "could not place a category {k} lesion without overlap after {MAX_ATTEMPTS} attempts; use smaller blobs or fewer per class"
                )));
            }
        }
    }
    Ok((labels, blobs))
}

fn render(spec: &SyntheticSpec, palette: &Palette, labels: &LabelMap, rng: &mut RngHandle) -> Result<ImageTensor> {
    let shift = spec.appearance_shift;
    let gain = 1.0 + rng.uniform_range(-shift, shift);
    let colors: Vec<[f64; 3]> = palette
        .colors
        .iter()
        .map(|c| {
            let mut out = *c;
            for v in out.iter_mut() {
                *v = gain * (*v + rng.uniform_range(-0.5, 0.5) * shift);
            }
            out
        })
        .collect();
    let phases: Vec<f64> = (0..spec.num_classes).map(|_| rng.uniform_range(0.0, 2.0 * PI)).collect();
    let (h, w) = (spec.height, spec.width);
    let scale = 2.0 * PI / h.max(w) as f64;
    let mut pixels = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let k = labels.get(y, x) as usize;
            let (s, c) = (sin(palette.stripe_angle[k]), cos(palette.stripe_angle[k]));
            let t = palette.stripe_freq[k] * scale * 8.0 * (x as f64 * c + y as f64 * s) + phases[k];
            let stripe = spec.texture_amplitude * sin(t);
            for ch in 0..3 {
                let v = colors[k][ch] + stripe + spec.noise * rng.normal();
                pixels[(y * w + x) * 3 + ch] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(h, w, pixels)
}

/// `n` deterministic samples for the spec's seed.
pub fn generate(spec: &SyntheticSpec, n: usize) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let mut rng = RngHandle::new(spec.seed, 0x5e7);
    let palette = Palette::new(spec.num_classes, &mut rng);
    (0..n)
        .map(|i| {
            let mut rng = RngHandle::new(spec.seed, 0x1000 + i as u64);
            let (labels, blobs) = place_blobs(spec, &mut rng)?;
            let image = render(spec, &palette, &labels, &mut rng)?;
            Ok(SyntheticSample { image, labels, blobs })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            height: 56,
            width: 56,
            radius: (6.0, 10.0),
            ..Default::default()
        }
    }

    #[test]
    fn zero_blobs_is_background() {
        let spec = SyntheticSpec {
            blobs_per_class: (0, 0),
            ..small()
        };
        let s = generate(&spec, 2).unwrap();
        assert!(s.iter().all(|x| x.labels.as_slice().iter().all(|&l| l == 0)));
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small(), 2).unwrap(), generate(&small(), 2).unwrap());
    }

    #[test]
    fn impossible_layout_is_a_generation_error() {
        let spec = SyntheticSpec {
            blobs_per_class: (6, 6),
            radius: (40.0, 40.0),
            ..small()
        };
        assert!(matches!(generate(&spec, 1), Err(Error::Generation(_))));
    }

    #[test]
    fn ellipse_membership() {
        let e = Ellipse {
            cx: 5.0,
            cy: 5.0,
            a: 3.0,
            b: 1.0,
            theta: 0.0,
        };
        assert!(e.contains(4, 7));
        assert!(!e.contains(6, 4));
    }
}
