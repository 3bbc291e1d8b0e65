use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::Error;

use super::augment::{augment, AugmentationConfig};
use super::synthetic::{write_dataset, SyntheticConfig};
use super::*;

fn tiny_synthetic() -> SyntheticConfig {
    SyntheticConfig {
        n_train_categories: 4,
        n_test_categories: 2,
        samples_per_category: 5,
        image_size: 24,
        ..SyntheticConfig::default()
    }
}

fn const_image(v: f64) -> Array3<f64> {
    Array3::from_elem((1, 4, 4), v)
}

/// Brute-force mean-distance minimizer, kept deliberately naive as the
/// oracle for `select_exemplar`.
fn exemplar_oracle(embeddings: &[Array1<f64>]) -> usize {
    let n = embeddings.len();
    let mut best_idx = 0;
    let mut best = f64::INFINITY;
    for i in 0..n {
        let mut dists = Vec::new();
        for j in 0..n {
            if i != j {
                let diff = &embeddings[i] - &embeddings[j];
                dists.push(diff.dot(&diff).sqrt());
            }
        }
        let mean = if dists.is_empty() {
            0.0
        } else {
            dists.iter().sum::<f64>() / dists.len() as f64
        };
        if mean < best {
            best = mean;
            best_idx = i;
        }
    }
    best_idx
}

#[test]
fn exemplar_of_singleton_is_itself() {
    let samples = vec![const_image(0.5)];
    let (img, idx) = select_exemplar(&samples, pixel_embedder).unwrap();
    assert_eq!(idx, 0);
    assert_eq!(img, samples[0]);
}

#[test]
fn exemplar_of_line_embeddings_is_the_middle_one() {
    // Embeddings at 0, 1 and 10 on a line: the point at 1 has the smallest
    // mean distance (5.0 against 5.5 and 9.5).
    let samples = vec![const_image(0.0), const_image(0.1), const_image(1.0)];
    let embed = |img: &Array3<f64>| Array1::from_vec(vec![img[[0, 0, 0]] * 10.0]);
    let (_, idx) = select_exemplar(&samples, embed).unwrap();
    assert_eq!(idx, 1);
    let embeddings: Vec<_> = samples.iter().map(|s| embed(s)).collect();
    assert_eq!(idx, exemplar_oracle(&embeddings));
}

#[test]
fn exemplar_tie_breaks_to_lowest_index() {
    let samples = vec![const_image(0.3), const_image(0.3), const_image(0.9)];
    let (_, idx) = select_exemplar(&samples, pixel_embedder).unwrap();
    assert_eq!(idx, 0);
}

#[test]
fn exemplar_matches_brute_force_oracle_on_random_sets() {
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    for trial in 0..50 {
        let n = rng.gen_range(2..=50);
        let samples: Vec<Array3<f64>> = (0..n)
            .map(|_| Array3::from_shape_simple_fn((1, 3, 3), || rng.gen::<f64>()))
            .collect();
        let (_, idx) = select_exemplar(&samples, pixel_embedder).unwrap();
        let embeddings: Vec<_> = samples.iter().map(pixel_embedder).collect();
        assert_eq!(idx, exemplar_oracle(&embeddings), "trial {trial}");
    }
}

#[test]
fn exemplar_rejects_empty_input() {
    assert!(matches!(
        select_exemplar(&[], pixel_embedder),
        Err(Error::Validation(_))
    ));
}

#[test]
fn augment_identity_config_returns_input() {
    let mut rng = ChaCha12Rng::seed_from_u64(32);
    let img = Array3::from_shape_simple_fn((1, 16, 16), || rng.gen::<f64>());
    let cfg = AugmentationConfig::identity();
    for _ in 0..20 {
        let out = augment(&img, &cfg, &mut rng);
        let worst = (&out - &img).mapv(f64::abs).iter().fold(0.0f64, |a, &b| a.max(b));
        assert!(worst < 1e-12, "worst={worst}");
    }
}

#[test]
fn augment_is_deterministic_given_seed() {
    let img = Array3::from_shape_fn((1, 16, 16), |(_, y, x)| ((x + y) % 3) as f64 / 2.0);
    let cfg = AugmentationConfig::default();
    let a = augment(&img, &cfg, &mut ChaCha12Rng::seed_from_u64(99));
    let b = augment(&img, &cfg, &mut ChaCha12Rng::seed_from_u64(99));
    assert_eq!(a, b);
}

#[test]
fn augment_keeps_blank_images_blank() {
    let img = Array3::zeros((1, 16, 16));
    let cfg = AugmentationConfig::default();
    let mut rng = ChaCha12Rng::seed_from_u64(33);
    for _ in 0..30 {
        let out = augment(&img, &cfg, &mut rng);
        assert_eq!(out.sum(), 0.0);
    }
}

#[test]
fn augment_preserves_shape_and_range_for_many_random_configs() {
    let mut rng = ChaCha12Rng::seed_from_u64(34);
    let img = Array3::from_shape_fn((1, 16, 16), |(_, y, x)| ((x * 7 + y * 3) % 5) as f64 / 4.0);
    for _ in 0..1000 {
        let lo = rng.gen_range(0.05..0.8);
        let cfg = AugmentationConfig {
            crop_scale: (lo, lo + rng.gen_range(0.01..0.2)),
            crop_ratio: (0.7, 1.4),
            rotation_deg: (-45.0, 45.0),
            translate_px: (-6.0, 6.0),
            zoom_ratio: (0.5, 1.6),
            shear_deg: (-25.0, 25.0),
            perspective_distortion: rng.gen_range(0.0..0.9),
            perspective_prob: rng.gen(),
        };
        cfg.validate().unwrap();
        let out = augment(&img, &cfg, &mut rng);
        assert_eq!(out.dim(), (1, 16, 16));
        for &v in out.iter() {
            assert!((0.0..=1.0).contains(&v), "out of range: {v}");
        }
    }
}

#[test]
fn synthetic_dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_synthetic();
    write_dataset(dir.path(), &cfg, 7).unwrap();

    let train = load_dataset(dir.path(), "synthetic", Split::Train).unwrap();
    let test = load_dataset(dir.path(), "synthetic", Split::Test).unwrap();
    assert_eq!(train.n_categories(), 4);
    assert_eq!(test.n_categories(), 2);
    assert_eq!(train.image_size, (24, 24));
    for ep in train.episodes.iter().chain(test.episodes.iter()) {
        // Exemplar excluded from the variation pool by default.
        assert_eq!(ep.variations.len(), cfg.samples_per_category - 1);
        for img in std::iter::once(&ep.exemplar).chain(ep.variations.iter()) {
            for &v in img.iter() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
    let train_ids: std::collections::BTreeSet<_> =
        train.episodes.iter().map(|e| e.category_id).collect();
    let test_ids: std::collections::BTreeSet<_> =
        test.episodes.iter().map(|e| e.category_id).collect();
    assert!(train_ids.is_disjoint(&test_ids));
}

#[test]
fn load_reports_missing_root_as_io_error() {
    let err = load_dataset(std::path::Path::new("/nonexistent/nope"), "x", Split::Train)
        .unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn load_names_corrupt_file_in_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &tiny_synthetic(), 7).unwrap();
    let victim = dir.path().join("glyph_000/sample_002.png");
    std::fs::write(&victim, b"not a png").unwrap();
    let err = load_dataset(dir.path(), "synthetic", Split::Train).unwrap_err();
    match err {
        Error::Parse { path, .. } => {
            assert!(path.ends_with("sample_002.png"), "{}", path.display())
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn load_rejects_empty_category() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &tiny_synthetic(), 7).unwrap();
    for entry in std::fs::read_dir(dir.path().join("glyph_001")).unwrap() {
        std::fs::remove_file(entry.unwrap().path()).unwrap();
    }
    let err = load_dataset(dir.path(), "synthetic", Split::Train).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err:?}");
}

#[test]
fn batches_align_exemplars_with_labels() {
    let split = synthetic::generate_split(&tiny_synthetic(), 7, Split::Train);
    let batch = make_batch(&split, 6, 41).unwrap();
    assert_eq!(batch.images.dim(), (6, 1, 24, 24));
    for (bi, &label) in batch.labels.iter().enumerate() {
        let ep = split.episode_by_id(label).unwrap();
        let got = batch.exemplars.index_axis(ndarray::Axis(0), bi);
        assert_eq!(got, ep.exemplar.view(), "batch row {bi}");
    }
}

#[test]
fn epoch_visits_every_variation_once() {
    let split = synthetic::generate_split(&tiny_synthetic(), 7, Split::Train);
    let mut it = BatchIter::new(&split, 6, 42).unwrap();
    let mut per_label = std::collections::BTreeMap::<usize, usize>::new();
    let mut total = 0;
    while let Some(b) = it.next_batch() {
        for &l in &b.labels {
            *per_label.entry(l).or_insert(0) += 1;
        }
        total += b.labels.len();
    }
    assert_eq!(total, split.n_variations());
    for ep in &split.episodes {
        assert_eq!(per_label[&ep.category_id], ep.variations.len());
    }
}

#[test]
fn same_seed_gives_identical_epochs() {
    let split = synthetic::generate_split(&tiny_synthetic(), 7, Split::Train);
    let mut a = BatchIter::new(&split, 5, 43).unwrap();
    let mut b = BatchIter::new(&split, 5, 43).unwrap();
    loop {
        match (a.next_batch(), b.next_batch()) {
            (None, None) => break,
            (Some(x), Some(y)) => {
                assert_eq!(x.labels, y.labels);
                assert_eq!(x.images, y.images);
            }
            _ => panic!("iterators out of sync"),
        }
    }
}

#[test]
fn oversized_batch_is_rejected() {
    let split = synthetic::generate_split(&tiny_synthetic(), 7, Split::Test);
    let err = match BatchIter::new(&split, 10_000, 1) {
        Err(e) => e,
        Ok(_) => panic!("oversized batch accepted"),
    };
    assert!(matches!(err, Error::Validation(_)));
}
