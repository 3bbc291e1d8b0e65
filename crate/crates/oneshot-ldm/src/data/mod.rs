//! Drawing datasets organized as category episodes.
//!
//! Each category contributes one designated exemplar plus a pool of
//! variation images. On disk a dataset is a directory per category holding
//! 8-bit grayscale PNGs and an `exemplar.idx` file, with a top-level
//! `manifest.json` mapping category directories to the train or test
//! split. Images are handled as `[1, H, W]` reals in `[0, 1]`.

pub mod augment;
pub mod synthetic;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

pub use augment::AugmentationConfig;

/// One category: its exemplar and the held-out variation images.
#[derive(Debug, Clone)]
pub struct Episode {
    pub category_id: usize,
    /// Directory name this category was loaded from, when applicable.
    pub category_name: String,
    pub exemplar: Array3<f64>,
    pub variations: Vec<Array3<f64>>,
}

/// Which half of the category split to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?}, expected \"train\" or \"test\""
            ))),
        }
    }
}

/// All episodes of one split.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub episodes: Vec<Episode>,
    pub split_name: Split,
    pub image_size: (usize, usize),
}

impl DatasetSplit {
    pub fn n_categories(&self) -> usize {
        self.episodes.len()
    }

    pub fn n_variations(&self) -> usize {
        self.episodes.iter().map(|e| e.variations.len()).sum()
    }

    pub fn episode_by_id(&self, category_id: usize) -> Option<&Episode> {
        self.episodes.iter().find(|e| e.category_id == category_id)
    }
}

/// Whether the designated exemplar also appears in the variation pool.
///
/// Excluded by default: the exemplar conditions the model, the variations
/// are its targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExemplarHandling {
    #[default]
    Exclude,
    Include,
}

/// Decode an 8-bit grayscale PNG into `[1, H, W]` values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::parse(path, format!("png decode failed: {e}")))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((1, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[[0, y as usize, x as usize]] = p.0[0] as f64 / 255.0;
    }
    Ok(out)
}

/// Save a `[1, H, W]` image in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_image(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (_, h, w) = img.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        let v = img[[0, y as usize, x as usize]].clamp(0.0, 1.0);
        p.0[0] = (v * 255.0).round() as u8;
    }
    buf.save(path)
        .map_err(|e| Error::parse(path, format!("png encode failed: {e}")))
}

/// Load one split of a dataset stored in the on-disk episode format.
///
/// `name` is a dataset identifier (`quickdraw-fs`, `omniglot`, or anything
/// else following the same layout); it is recorded but does not change the
/// loading logic. Category ids are assigned by sorted directory name over
/// the *whole* manifest, so train and test ids never collide.
pub fn load_dataset(root: &Path, name: &str, split: Split) -> Result<DatasetSplit> {
    load_dataset_with(root, name, split, ExemplarHandling::Exclude)
}

pub fn load_dataset_with(
    root: &Path,
    _name: &str,
    split: Split,
    exemplar_handling: ExemplarHandling,
) -> Result<DatasetSplit> {
    let manifest_path = root.join("manifest.json");
    let manifest_raw = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: BTreeMap<String, String> = serde_json::from_str(&manifest_raw)
        .map_err(|e| Error::parse(&manifest_path, format!("bad manifest: {e}")))?;

    let mut episodes = Vec::new();
    let mut image_size: Option<(usize, usize)> = None;
    for (category_id, (dir_name, split_str)) in manifest.iter().enumerate() {
        if Split::parse(split_str)? != split {
            continue;
        }
        let dir = root.join(dir_name);
        let mut sample_paths: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        sample_paths.sort();
        if sample_paths.is_empty() {
            return Err(Error::Validation(format!(
                "category {dir_name:?} has no samples"
            )));
        }
        let mut samples = Vec::with_capacity(sample_paths.len());
        for p in &sample_paths {
            let img = load_image(p)?;
            let (_, h, w) = img.dim();
            match image_size {
                None => image_size = Some((h, w)),
                Some(sz) if sz != (h, w) => {
                    return Err(Error::Validation(format!(
                        "image {} is {h}x{w}, dataset is {}x{}",
                        p.display(),
                        sz.0,
                        sz.1
                    )));
                }
                _ => {}
            }
            samples.push(img);
        }
        let idx_path = dir.join("exemplar.idx");
        let idx_raw = std::fs::read_to_string(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
        let exemplar_idx: usize = idx_raw
            .trim()
            .parse()
            .map_err(|e| Error::parse(&idx_path, format!("bad exemplar index: {e}")))?;
        if exemplar_idx >= samples.len() {
            return Err(Error::parse(
                &idx_path,
                format!(
                    "exemplar index {exemplar_idx} out of range for {} samples",
                    samples.len()
                ),
            ));
        }
        let exemplar = samples[exemplar_idx].clone();
        let variations: Vec<_> = match exemplar_handling {
            ExemplarHandling::Exclude => samples
                .into_iter()
                .enumerate()
                .filter(|(i, _)| *i != exemplar_idx)
                .map(|(_, s)| s)
                .collect(),
            ExemplarHandling::Include => samples,
        };
        if variations.is_empty() {
            return Err(Error::Validation(format!(
                "category {dir_name:?} has no variations besides its exemplar"
            )));
        }
        episodes.push(Episode {
            category_id,
            category_name: dir_name.clone(),
            exemplar,
            variations,
        });
    }
    if episodes.is_empty() {
        return Err(Error::Validation(format!(
            "no {} categories in manifest {}",
            split.as_str(),
            manifest_path.display()
        )));
    }
    Ok(DatasetSplit {
        episodes,
        split_name: split,
        image_size: image_size.unwrap(),
    })
}

/// Pick the sample whose embedding has the smallest mean Euclidean
/// distance to all the others. Ties break to the lowest index.
pub fn select_exemplar<F>(samples: &[Array3<f64>], embedder: F) -> Result<(Array3<f64>, usize)>
where
    F: Fn(&Array3<f64>) -> Array1<f64>,
{
    if samples.is_empty() {
        return Err(Error::Validation("select_exemplar: empty sample list".into()));
    }
    let embeddings: Vec<Array1<f64>> = samples.iter().map(|s| embedder(s)).collect();
    let n = embeddings.len();
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..n {
        let mut total = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let d2 = (&embeddings[i] - &embeddings[j]).mapv(|v| v * v).sum();
            total += d2.sqrt();
        }
        let mean = if n > 1 { total / (n - 1) as f64 } else { 0.0 };
        if mean < best.0 {
            best = (mean, i);
        }
    }
    Ok((samples[best.1].clone(), best.1))
}

/// Flatten raw pixels; the fallback embedder for exemplar selection.
pub fn pixel_embedder(img: &Array3<f64>) -> Array1<f64> {
    Array1::from_iter(img.iter().copied())
}

/// One training batch: variation images, their category labels, and the
/// matching exemplars.
pub struct Batch {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub exemplars: Array4<f64>,
}

/// Without-replacement batch iterator over all variations of a split.
///
/// Each epoch is a fresh seeded permutation; `next_batch` yields `None`
/// once at the epoch boundary, then starts the next epoch.
pub struct BatchIter<'a> {
    split: &'a DatasetSplit,
    batch_size: usize,
    order: Vec<(usize, usize)>,
    cursor: usize,
    rng: ChaCha12Rng,
}

impl<'a> BatchIter<'a> {
    pub fn new(split: &'a DatasetSplit, batch_size: usize, seed: u64) -> Result<Self> {
        let total = split.n_variations();
        if batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if batch_size > total {
            return Err(Error::Validation(format!(
                "batch_size {batch_size} exceeds split size {total}"
            )));
        }
        let mut it = BatchIter {
            split,
            batch_size,
            order: Vec::new(),
            cursor: 0,
            rng: ChaCha12Rng::seed_from_u64(seed),
        };
        it.shuffle_epoch();
        Ok(it)
    }

    fn shuffle_epoch(&mut self) {
        self.order.clear();
        for (ei, ep) in self.split.episodes.iter().enumerate() {
            for vi in 0..ep.variations.len() {
                self.order.push((ei, vi));
            }
        }
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    /// Number of batches per epoch (final short batch included).
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn next_batch(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            self.shuffle_epoch();
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let picks = &self.order[self.cursor..end];
        self.cursor = end;
        Some(assemble_batch(self.split, picks))
    }
}

fn assemble_batch(split: &DatasetSplit, picks: &[(usize, usize)]) -> Batch {
    let (h, w) = split.image_size;
    let b = picks.len();
    let mut images = Array4::<f64>::zeros((b, 1, h, w));
    let mut exemplars = Array4::<f64>::zeros((b, 1, h, w));
    let mut labels = Vec::with_capacity(b);
    for (bi, &(ei, vi)) in picks.iter().enumerate() {
        let ep = &split.episodes[ei];
        images
            .index_axis_mut(ndarray::Axis(0), bi)
            .assign(&ep.variations[vi]);
        exemplars
            .index_axis_mut(ndarray::Axis(0), bi)
            .assign(&ep.exemplar);
        labels.push(ep.category_id);
    }
    Batch {
        images,
        labels,
        exemplars,
    }
}

/// One-off random batch: the first batch of a fresh epoch permutation.
pub fn make_batch(split: &DatasetSplit, batch_size: usize, seed: u64) -> Result<Batch> {
    let mut it = BatchIter::new(split, batch_size, seed)?;
    Ok(it.next_batch().expect("fresh iterator yields a batch"))
}
