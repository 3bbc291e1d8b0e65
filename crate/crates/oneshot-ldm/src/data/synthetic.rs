//! Procedural glyph dataset generator.
//!
//! Produces drawing-like categories without any external data: each
//! category is a random stroke program (a few quadratic curves), and each
//! sample re-renders that program under control-point jitter, a small
//! affine perturbation and varying stroke width. Useful for tests,
//! examples and full pipeline runs when no real dataset is mounted.
//!
//! `write_dataset` emits the on-disk episode format understood by
//! [`super::load_dataset`]; `generate_split` builds the same content in
//! memory.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::seeds::derive_seed;

use super::{pixel_embedder, select_exemplar, DatasetSplit, Episode, Split};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_train_categories: usize,
    pub n_test_categories: usize,
    pub samples_per_category: usize,
    pub image_size: usize,
    /// Inclusive range for the number of strokes per glyph.
    pub strokes: (usize, usize),
    /// Standard deviation of the per-sample control-point jitter, in
    /// normalized [0,1] canvas units.
    pub jitter: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_train_categories: 24,
            n_test_categories: 8,
            samples_per_category: 12,
            image_size: 48,
            strokes: (2, 5),
            jitter: 0.03,
        }
    }
}

/// One quadratic stroke in normalized canvas coordinates.
#[derive(Debug, Clone, Copy)]
struct Stroke {
    p0: (f64, f64),
    c: (f64, f64),
    p1: (f64, f64),
    width: f64,
}

fn rand_point(rng: &mut ChaCha12Rng) -> (f64, f64) {
    (rng.gen_range(0.14..0.86), rng.gen_range(0.14..0.86))
}

/// Sample a category's stroke program.
fn glyph_program(rng: &mut ChaCha12Rng, cfg: &SyntheticConfig) -> Vec<Stroke> {
    let n = rng.gen_range(cfg.strokes.0..=cfg.strokes.1);
    let mut strokes = Vec::with_capacity(n);
    let mut cursor = rand_point(rng);
    for _ in 0..n {
        // Half the strokes continue from the previous endpoint so glyphs
        // read as connected figures.
        let p0 = if strokes.is_empty() || rng.gen_bool(0.5) {
            rand_point(rng)
        } else {
            cursor
        };
        let c = rand_point(rng);
        let p1 = rand_point(rng);
        cursor = p1;
        strokes.push(Stroke {
            p0,
            c,
            p1,
            width: rng.gen_range(0.9..1.6),
        });
    }
    strokes
}

fn jittered(strokes: &[Stroke], rng: &mut ChaCha12Rng, cfg: &SyntheticConfig) -> Vec<Stroke> {
    let mut j = |p: (f64, f64)| {
        (
            p.0 + cfg.jitter * rng.sample::<f64, _>(StandardNormal),
            p.1 + cfg.jitter * rng.sample::<f64, _>(StandardNormal),
        )
    };
    let mut out: Vec<Stroke> = strokes
        .iter()
        .map(|s| Stroke {
            p0: j(s.p0),
            c: j(s.c),
            p1: j(s.p1),
            width: s.width,
        })
        .collect();
    // Whole-glyph perturbation: slight rotation, zoom and shift.
    let theta: f64 = rng.gen_range(-0.17..0.17);
    let zoom: f64 = rng.gen_range(0.9..1.1);
    let (dx, dy) = (rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04));
    let (sin, cos) = theta.sin_cos();
    let width_scale: f64 = rng.gen_range(0.85..1.2);
    for s in &mut out {
        for p in [&mut s.p0, &mut s.c, &mut s.p1] {
            let (x, y) = (p.0 - 0.5, p.1 - 0.5);
            p.0 = 0.5 + zoom * (cos * x - sin * y) + dx;
            p.1 = 0.5 + zoom * (sin * x + cos * y) + dy;
        }
        s.width *= width_scale;
    }
    out
}

/// Rasterize strokes with a soft round brush; ink is 1, background 0.
fn render(strokes: &[Stroke], size: usize) -> Array3<f64> {
    let mut img = Array3::<f64>::zeros((1, size, size));
    let sf = size as f64;
    for s in strokes {
        let scale = |p: (f64, f64)| (p.0 * sf, p.1 * sf);
        let (p0, c, p1) = (scale(s.p0), scale(s.c), scale(s.p1));
        let chord = ((p1.0 - p0.0).hypot(p1.1 - p0.1))
            + ((c.0 - p0.0).hypot(c.1 - p0.1))
            + ((p1.0 - c.0).hypot(p1.1 - c.1));
        let steps = (chord * 4.0).ceil().max(8.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let u = 1.0 - t;
            let x = u * u * p0.0 + 2.0 * u * t * c.0 + t * t * p1.0;
            let y = u * u * p0.1 + 2.0 * u * t * c.1 + t * t * p1.1;
            splat(&mut img, x, y, s.width);
        }
    }
    img
}

fn splat(img: &mut Array3<f64>, x: f64, y: f64, radius: f64) {
    let size = img.dim().1 as isize;
    let r = radius + 1.0;
    let (x0, x1) = ((x - r).floor() as isize, (x + r).ceil() as isize);
    let (y0, y1) = ((y - r).floor() as isize, (y + r).ceil() as isize);
    for yi in y0.max(0)..=y1.min(size - 1) {
        for xi in x0.max(0)..=x1.min(size - 1) {
            let d = ((xi as f64 - x).powi(2) + (yi as f64 - y).powi(2)).sqrt();
            let v = (radius + 0.5 - d).clamp(0.0, 1.0);
            let slot = &mut img[[0, yi as usize, xi as usize]];
            *slot = slot.max(v);
        }
    }
}

fn category_samples(cfg: &SyntheticConfig, seed: u64, name: &str) -> Vec<Array3<f64>> {
    let mut prog_rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, &format!("program/{name}")));
    let program = glyph_program(&mut prog_rng, cfg);
    (0..cfg.samples_per_category)
        .map(|k| {
            let mut rng =
                ChaCha12Rng::seed_from_u64(derive_seed(seed, &format!("sample/{name}/{k}")));
            render(&jittered(&program, &mut rng, cfg), cfg.image_size)
        })
        .collect()
}

fn category_names(cfg: &SyntheticConfig) -> Vec<(String, Split)> {
    let mut out = Vec::new();
    for i in 0..cfg.n_train_categories {
        out.push((format!("glyph_{i:03}"), Split::Train));
    }
    for i in 0..cfg.n_test_categories {
        out.push((format!("glyph_{:03}", cfg.n_train_categories + i), Split::Test));
    }
    out
}

/// Build one split in memory. Category ids follow the sorted order of all
/// category names, matching what `load_dataset` would assign.
pub fn generate_split(cfg: &SyntheticConfig, seed: u64, split: Split) -> DatasetSplit {
    let mut episodes = Vec::new();
    for (id, (name, s)) in category_names(cfg).into_iter().enumerate() {
        if s != split {
            continue;
        }
        let samples = category_samples(cfg, seed, &name);
        let (exemplar, idx) =
            select_exemplar(&samples, pixel_embedder).expect("non-empty category");
        let variations = samples
            .into_iter()
            .enumerate()
            .filter(|(i, _)| *i != idx)
            .map(|(_, v)| v)
            .collect();
        episodes.push(Episode {
            category_id: id,
            category_name: name,
            exemplar,
            variations,
        });
    }
    DatasetSplit {
        episodes,
        split_name: split,
        image_size: (cfg.image_size, cfg.image_size),
    }
}

/// Write the dataset to `root` in the on-disk episode format.
pub fn write_dataset(root: &Path, cfg: &SyntheticConfig, seed: u64) -> Result<()> {
    use crate::error::Error;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = std::collections::BTreeMap::new();
    for (name, split) in category_names(cfg) {
        let dir = root.join(&name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let samples = category_samples(cfg, seed, &name);
        let (_, idx) = select_exemplar(&samples, pixel_embedder)?;
        for (k, img) in samples.iter().enumerate() {
            super::save_image(&dir.join(format!("sample_{k:03}.png")), img)?;
        }
        let idx_path = dir.join("exemplar.idx");
        std::fs::write(&idx_path, format!("{idx}\n")).map_err(|e| Error::io(&idx_path, e))?;
        manifest.insert(name, split.as_str().to_string());
    }
    let manifest_path = root.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, body).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}
