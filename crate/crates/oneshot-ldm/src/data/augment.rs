//! Stochastic image augmentation for the contrastive regularizers.
//!
//! Each call applies exactly one transform family, picked uniformly:
//! random resized crop, random affine (rotation, translation, zoom,
//! shear), or random perspective. All warps inverse-map output pixels and
//! sample bilinearly with zero fill, so blank images stay blank and
//! degenerate parameter intervals reproduce the input exactly.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter intervals for the three transform families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Crop area as a fraction of the image area.
    pub crop_scale: (f64, f64),
    /// Crop aspect ratio (width over height).
    pub crop_ratio: (f64, f64),
    /// Rotation in degrees.
    pub rotation_deg: (f64, f64),
    /// Translation in pixels, drawn independently per axis.
    pub translate_px: (f64, f64),
    /// Isotropic zoom factor.
    pub zoom_ratio: (f64, f64),
    /// Shear angle in degrees along x.
    pub shear_deg: (f64, f64),
    /// Corner displacement as a fraction of the half image size.
    pub perspective_distortion: f64,
    /// Chance that the perspective family actually warps.
    pub perspective_prob: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            crop_scale: (0.1, 0.9),
            crop_ratio: (0.8, 1.2),
            rotation_deg: (-15.0, 15.0),
            translate_px: (-5.0, 5.0),
            zoom_ratio: (0.75, 1.25),
            shear_deg: (-10.0, 10.0),
            perspective_distortion: 0.5,
            perspective_prob: 0.5,
        }
    }
}

impl AugmentationConfig {
    /// Collapsed intervals: every draw is the identity transform.
    pub fn identity() -> Self {
        AugmentationConfig {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            rotation_deg: (0.0, 0.0),
            translate_px: (0.0, 0.0),
            zoom_ratio: (1.0, 1.0),
            shear_deg: (0.0, 0.0),
            perspective_distortion: 0.0,
            perspective_prob: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let intervals = [
            ("crop_scale", self.crop_scale),
            ("crop_ratio", self.crop_ratio),
            ("rotation_deg", self.rotation_deg),
            ("translate_px", self.translate_px),
            ("zoom_ratio", self.zoom_ratio),
            ("shear_deg", self.shear_deg),
        ];
        for (name, (lo, hi)) in intervals {
            if !(lo <= hi) {
                return Err(Error::Config(format!(
                    "augmentation interval {name} is empty: ({lo}, {hi})"
                )));
            }
        }
        if self.crop_scale.0 <= 0.0 || self.crop_ratio.0 <= 0.0 || self.zoom_ratio.0 <= 0.0 {
            return Err(Error::Config(
                "crop_scale, crop_ratio and zoom_ratio must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.perspective_prob) || self.perspective_distortion < 0.0 {
            return Err(Error::Config(
                "perspective_prob must be in [0,1] and distortion non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha12Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Bilinear lookup with zero fill outside the image.
fn sample_bilinear(img: &Array3<f64>, sx: f64, sy: f64) -> f64 {
    let (_, h, w) = img.dim();
    let x0 = sx.floor();
    let y0 = sy.floor();
    let wx = sx - x0;
    let wy = sy - y0;
    let mut acc = 0.0;
    for (dy, fy) in [(0.0, 1.0 - wy), (1.0, wy)] {
        for (dx, fx) in [(0.0, 1.0 - wx), (1.0, wx)] {
            let xi = x0 + dx;
            let yi = y0 + dy;
            if fx == 0.0 || fy == 0.0 {
                continue;
            }
            if xi >= 0.0 && yi >= 0.0 && (xi as usize) < w && (yi as usize) < h {
                acc += fx * fy * img[[0, yi as usize, xi as usize]];
            }
        }
    }
    acc
}

fn warp_inverse<F>(img: &Array3<f64>, inv: F) -> Array3<f64>
where
    F: Fn(f64, f64) -> (f64, f64),
{
    let (_, h, w) = img.dim();
    let mut out = Array3::<f64>::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv(x as f64, y as f64);
            out[[0, y, x]] = sample_bilinear(img, sx, sy).clamp(0.0, 1.0);
        }
    }
    out
}

fn resized_crop(img: &Array3<f64>, cfg: &AugmentationConfig, rng: &mut ChaCha12Rng) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let (hf, wf) = (h as f64, w as f64);
    let area = hf * wf * uniform(rng, cfg.crop_scale);
    let ratio = uniform(rng, cfg.crop_ratio);
    let cw = (area * ratio).sqrt().min(wf);
    let ch = (area / ratio).sqrt().min(hf);
    let left = uniform(rng, (0.0, wf - cw));
    let top = uniform(rng, (0.0, hf - ch));
    warp_inverse(img, |x, y| {
        (
            left + (x + 0.5) * cw / wf - 0.5,
            top + (y + 0.5) * ch / hf - 0.5,
        )
    })
}

fn affine(img: &Array3<f64>, cfg: &AugmentationConfig, rng: &mut ChaCha12Rng) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let theta = uniform(rng, cfg.rotation_deg).to_radians();
    let tx = uniform(rng, cfg.translate_px);
    let ty = uniform(rng, cfg.translate_px);
    let zoom = uniform(rng, cfg.zoom_ratio);
    let shear = uniform(rng, cfg.shear_deg).to_radians();
    // Forward map: rotate * shear * zoom about the center, then translate.
    let (sin, cos) = theta.sin_cos();
    let sh = shear.tan();
    // m = r(theta) * shear_x(sh) * zoom
    let m = [
        [zoom * cos, zoom * (cos * sh - sin)],
        [zoom * sin, zoom * (sin * sh + cos)],
    ];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let minv = [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ];
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    warp_inverse(img, |x, y| {
        let dx = x - tx - cx;
        let dy = y - ty - cy;
        (
            cx + minv[0][0] * dx + minv[0][1] * dy,
            cy + minv[1][0] * dx + minv[1][1] * dy,
        )
    })
}

/// Solve `a x = b` in place by Gaussian elimination with partial pivoting.
fn solve_linear(a: &mut [[f64; 8]; 8], b: &mut [f64; 8]) {
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let p = a[col][col];
        for row in col + 1..8 {
            let f = a[row][col] / p;
            for k in col..8 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    for col in (0..8).rev() {
        let mut acc = b[col];
        for k in col + 1..8 {
            acc -= a[col][k] * b[k];
        }
        b[col] = acc / a[col][col];
    }
}

fn perspective(img: &Array3<f64>, cfg: &AugmentationConfig, rng: &mut ChaCha12Rng) -> Array3<f64> {
    let apply: f64 = rng.gen();
    if apply >= cfg.perspective_prob || cfg.perspective_distortion == 0.0 {
        return img.clone();
    }
    let (_, h, w) = img.dim();
    let (hf, wf) = (h as f64 - 1.0, w as f64 - 1.0);
    let dw = cfg.perspective_distortion * wf / 2.0;
    let dh = cfg.perspective_distortion * hf / 2.0;
    let mut d = |m: f64| uniform(rng, (0.0, m));
    // Output corners map to inward-displaced source corners.
    let dst = [(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)];
    let src = [
        (d(dw), d(dh)),
        (wf - d(dw), d(dh)),
        (wf - d(dw), hf - d(dh)),
        (d(dw), hf - d(dh)),
    ];
    // Homography h with x_src = (h0 x + h1 y + h2) / (h6 x + h7 y + 1).
    let mut a = [[0.0f64; 8]; 8];
    let mut b = [0.0f64; 8];
    for i in 0..4 {
        let (x, y) = dst[i];
        let (u, v) = src[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y];
        b[2 * i] = u;
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y];
        b[2 * i + 1] = v;
    }
    solve_linear(&mut a, &mut b);
    let hm = b;
    warp_inverse(img, |x, y| {
        let denom = hm[6] * x + hm[7] * y + 1.0;
        (
            (hm[0] * x + hm[1] * y + hm[2]) / denom,
            (hm[3] * x + hm[4] * y + hm[5]) / denom,
        )
    })
}

/// Apply one randomly chosen transform family to `image`.
pub fn augment(
    image: &Array3<f64>,
    config: &AugmentationConfig,
    rng: &mut ChaCha12Rng,
) -> Array3<f64> {
    match rng.gen_range(0..3u8) {
        0 => resized_crop(image, config, rng),
        1 => affine(image, config, rng),
        _ => perspective(image, config, rng),
    }
}

/// Two independent augmentations of the same image, for dual-view
/// contrastive objectives.
pub fn two_views(
    image: &Array3<f64>,
    config: &AugmentationConfig,
    rng: &mut ChaCha12Rng,
) -> (Array3<f64>, Array3<f64>) {
    (augment(image, config, rng), augment(image, config, rng))
}
