use std::collections::BTreeMap;

use approx::{assert_abs_diff_eq, assert_relative_eq};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::*;
use crate::data::{DatasetSplit, Episode, Split};
use crate::error::Error;

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- spearman

#[test]
fn spearman_perfect_agreement_and_disagreement() {
    let a = [0.1, 0.7, 0.3, 2.0, 1.1];
    let rho = spearman_rank(&a, &a).unwrap();
    assert_abs_diff_eq!(rho, 1.0, epsilon = 1e-12);

    let b: Vec<f64> = a.iter().map(|v| -v).collect();
    let rho = spearman_rank(&a, &b).unwrap();
    assert_abs_diff_eq!(rho, -1.0, epsilon = 1e-12);
}

#[test]
fn spearman_matches_hand_rank_formula() {
    // No ties: rho = 1 - 6 sum(d^2) / (n (n^2 - 1)) with d = rank differences.
    // [1,2,3,4] vs [1,3,2,4]: d^2 sums to 2, so rho = 1 - 12/60 = 0.8.
    let rho = spearman_rank(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    assert_abs_diff_eq!(rho, 0.8, epsilon = 1e-12);
}

#[test]
fn spearman_tie_cases_match_reference() {
    // Frozen reference values from scipy.stats.spearmanr 1.15.3, which
    // implements the same average-rank convention.
    let rho = spearman_rank(&[1.0, 2.0, 2.0, 3.0, 5.0], &[2.0, 1.0, 4.0, 4.0, 6.0]).unwrap();
    assert_relative_eq!(rho, 0.7631578947368421, max_relative = 1e-12);

    let a = [3.1, 1.0, 1.0, 7.2, 5.5, 5.5, 5.5, 0.4];
    let b = [2.0, 2.0, 9.9, 4.4, 4.4, 1.1, 8.8, 0.2];
    let rho = spearman_rank(&a, &b).unwrap();
    assert_relative_eq!(rho, 0.31682519336239684, max_relative = 1e-12);
}

#[test]
fn spearman_invariant_under_monotone_transforms() {
    let a = [0.3, 1.9, 0.8, 2.6, 1.1, 0.4];
    let b = [2.2, 0.1, 1.4, 0.9, 3.0, 2.9];
    let rho = spearman_rank(&a, &b).unwrap();

    let a_exp: Vec<f64> = a.iter().map(|v| v.exp()).collect();
    let b_cube: Vec<f64> = b.iter().map(|v| v * v * v).collect();
    // Strictly monotone maps preserve ranks exactly, so rho is bit-identical.
    assert_eq!(spearman_rank(&a_exp, &b).unwrap(), rho);
    assert_eq!(spearman_rank(&a, &b_cube).unwrap(), rho);
}

#[test]
fn spearman_rejects_bad_input() {
    assert!(matches!(
        spearman_rank(&[1.0, 2.0], &[1.0]),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        spearman_rank(&[1.0], &[1.0]),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        spearman_rank(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
        Err(Error::Degenerate(_))
    ));
    assert!(matches!(
        spearman_rank(&[1.0, f64::NAN, 3.0], &[1.0, 2.0, 3.0]),
        Err(Error::Validation(_))
    ));
}

// ---------------------------------------------------------------- wilcoxon

/// Exact tail probabilities by enumerating all 2^n sign assignments with
/// integer ranks (valid when |diffs| are distinct). Independent of the
/// implementation's rank and DP code.
fn enumerate_tail(diffs: &[f64]) -> (f64, f64) {
    let n = diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut ranks = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    let w_obs: usize = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let mut count_ge = 0u64;
    let mut count_eq = 0u64;
    for mask in 0u64..(1 << n) {
        let w: usize = ranks
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, r)| *r)
            .sum();
        count_ge += u64::from(w >= w_obs);
        count_eq += u64::from(w == w_obs);
    }
    let denom = (1u64 << n) as f64;
    (count_ge as f64 / denom, count_eq as f64 / denom)
}

#[test]
fn wilcoxon_exact_matches_enumeration() {
    let a = [2.1, 3.3, 1.2, 4.0, 2.8, 5.1, 3.9, 2.2];
    let b = [1.0, 3.5, 0.1, 2.6, 3.1, 1.9, 2.0, 2.15];
    let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let (p_oracle, _) = enumerate_tail(&diffs);
    let p = wilcoxon_signed_rank(&a, &b, Alternative::Greater).unwrap();
    assert_abs_diff_eq!(p, p_oracle, epsilon = 1e-15);
    // scipy.stats.wilcoxon(a, b, alternative='greater', method='exact')
    // gives 0.0390625 = 10/256 on this fixture.
    assert_abs_diff_eq!(p, 0.0390625, epsilon = 1e-15);
}

#[test]
fn wilcoxon_swap_gives_complementary_test() {
    // P(W >= w) for (a,b) plus P(W >= w') for (b,a) equals 1 + P(W = w):
    // the null distribution is symmetric about half the total rank sum.
    let a = [2.1, 3.3, 1.2, 4.0, 2.8, 5.1, 3.9, 2.2];
    let b = [1.0, 3.5, 0.1, 2.6, 3.1, 1.9, 2.0, 2.15];
    let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let (_, pmf) = enumerate_tail(&diffs);
    let p_ab = wilcoxon_signed_rank(&a, &b, Alternative::Greater).unwrap();
    let p_ba = wilcoxon_signed_rank(&b, &a, Alternative::Greater).unwrap();
    assert_abs_diff_eq!(p_ab + p_ba, 1.0 + pmf, epsilon = 1e-12);
}

#[test]
fn wilcoxon_exact_handles_tied_ranks() {
    // |diffs| carry heavy ties (six 0.5s, three 2.0s), every value an exact
    // dyadic so the ties survive float subtraction. Reference value 52/1024
    // comes from brute-force enumeration of all 2^10 sign assignments with
    // average ranks (ranks [7, 3.5, 9, ...], W+ = 44.5); scipy's exact
    // method mishandles this case by rounding the tied statistic into the
    // no-ties distribution.
    let a = [1.5, -0.5, 2.0, 0.5, -0.5, 2.0, 0.5, -0.5, 2.0, 0.5];
    let b = [0.0; 10];
    let p = wilcoxon_signed_rank(&a, &b, Alternative::Greater).unwrap();
    assert_abs_diff_eq!(p, 0.05078125, epsilon = 1e-15);
}

#[test]
fn wilcoxon_all_positive_shift_hits_exact_minimum() {
    // A = B + 1 elementwise, n = 25: only the all-positive assignment
    // reaches the maximal statistic, so p = 2^-25 exactly.
    let b: Vec<f64> = (0..25).map(|i| i as f64).collect();
    let a: Vec<f64> = b.iter().map(|v| v + 1.0).collect();
    let p = wilcoxon_signed_rank(&a, &b, Alternative::Greater).unwrap();
    assert!(p < 1e-4);
    assert_relative_eq!(p, 2.0f64.powi(-25), max_relative = 1e-12);
}

#[test]
fn wilcoxon_drops_zero_differences() {
    // Two zero pairs drop, leaving diffs {-0.5, 1.0, 0.8, 0.9}; the
    // positive ranks sum to 9 of 10 and 2 of the 16 sign assignments reach
    // >= 9, so p = 0.125.
    let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let b = [1.0, 2.5, 2.0, 4.0, 4.2, 5.1];
    let p = wilcoxon_signed_rank(&a, &b, Alternative::Greater).unwrap();
    assert_abs_diff_eq!(p, 0.125, epsilon = 1e-15);
}

#[test]
fn wilcoxon_normal_approximation_matches_reference() {
    // n = 30 forces the tie-corrected normal approximation with continuity
    // correction. Reference from scipy.stats.wilcoxon(x, zeros,
    // alternative='greater', method='approx', correction=True): p =
    // 0.4023718560477091 with W+ = 245.
    let x = [
        0.4, 0.7, 0.1, -0.5, -0.1, -0.6, 0.5, 1.7, -0.1, -0.2, 0.9, 0.8, 0.5, -0.5, 0.4, 1.1,
        -0.9, -0.1, -1.5, -0.9, -1.4, 0.2, -0.9, 0.7, 0.6, 0.2, -2.1, -0.1, 0.4, 0.5,
    ];
    let zeros = [0.0; 30];
    assert!(x.len() > WILCOXON_EXACT_MAX_N);
    let p = wilcoxon_signed_rank(&x, &zeros, Alternative::Greater).unwrap();
    // Tolerance covers the erfc approximation (relative error < 1.2e-7).
    assert_relative_eq!(p, 0.4023718560477091, max_relative = 1e-6);
}

#[test]
fn wilcoxon_rejects_degenerate_and_bad_input() {
    let a = [1.0, 2.0, 3.0];
    assert!(matches!(
        wilcoxon_signed_rank(&a, &a, Alternative::Greater),
        Err(Error::Degenerate(_))
    ));
    assert!(matches!(
        wilcoxon_signed_rank(&a, &a[..2], Alternative::Greater),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        wilcoxon_signed_rank(&[1.0, f64::NAN, 2.0], &[0.0; 3], Alternative::Greater),
        Err(Error::Validation(_))
    ));
}

// --------------------------------------------------------------- bootstrap

fn noise_map(rng: &mut ChaCha12Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    let mut m = Array3::zeros(shape);
    for v in m.iter_mut() {
        *v = rng.gen::<f64>();
    }
    m
}

#[test]
fn bootstrap_identical_maps_give_rho_one() {
    let mut r = rng(11);
    let mut maps = BTreeMap::new();
    for cat in 0..3 {
        let shared = noise_map(&mut r, (1, 6, 6));
        maps.insert(cat, vec![shared.clone(), shared.clone(), shared.clone(), shared]);
    }
    let rho = bootstrap_consistency(&maps, 25, &mut rng(0)).unwrap();
    assert_abs_diff_eq!(rho, 1.0, epsilon = 1e-12);
}

#[test]
fn bootstrap_white_noise_is_near_zero() {
    // Independent participant maps share no structure, so the split-half
    // correlation averages out near zero. With 48x48 maps the per-category
    // spread of mean rho is about 1/sqrt(2303); 0.05 is a > 4 sigma bound.
    let mut r = rng(21);
    let mut maps = BTreeMap::new();
    for cat in 0..2 {
        let participants: Vec<Array3<f64>> =
            (0..6).map(|_| noise_map(&mut r, (1, 48, 48))).collect();
        maps.insert(cat, participants);
    }
    let rho = bootstrap_consistency(&maps, 1000, &mut rng(1)).unwrap();
    assert!(rho.abs() < 0.05, "mean rho {rho} not near zero");
}

#[test]
fn bootstrap_is_deterministic_given_seed() {
    let mut r = rng(31);
    let mut maps = BTreeMap::new();
    for cat in 0..2 {
        let participants: Vec<Array3<f64>> =
            (0..5).map(|_| noise_map(&mut r, (1, 5, 5))).collect();
        maps.insert(cat, participants);
    }
    let a = bootstrap_consistency(&maps, 50, &mut rng(7)).unwrap();
    let b = bootstrap_consistency(&maps, 50, &mut rng(7)).unwrap();
    assert_eq!(a, b);
    let c = bootstrap_consistency(&maps, 50, &mut rng(8)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn bootstrap_rejects_bad_input() {
    let mut r = rng(41);
    let empty: BTreeMap<usize, Vec<Array3<f64>>> = BTreeMap::new();
    assert!(matches!(
        bootstrap_consistency(&empty, 10, &mut rng(0)),
        Err(Error::Validation(_))
    ));

    let mut single = BTreeMap::new();
    single.insert(0usize, vec![noise_map(&mut r, (1, 4, 4))]);
    assert!(matches!(
        bootstrap_consistency(&single, 10, &mut rng(0)),
        Err(Error::Validation(_))
    ));

    let mut mismatched = BTreeMap::new();
    mismatched.insert(
        0usize,
        vec![noise_map(&mut r, (1, 4, 4)), noise_map(&mut r, (1, 5, 5))],
    );
    assert!(matches!(
        bootstrap_consistency(&mismatched, 10, &mut rng(0)),
        Err(Error::Shape { .. })
    ));

    let mut fine = BTreeMap::new();
    fine.insert(
        0usize,
        vec![noise_map(&mut r, (1, 4, 4)), noise_map(&mut r, (1, 4, 4))],
    );
    assert!(matches!(
        bootstrap_consistency(&fine, 0, &mut rng(0)),
        Err(Error::Validation(_))
    ));
}

// ------------------------------------------------- recognizability scoring

/// Flattens images; embeddings are the raw pixels.
struct IdentityEmbedder {
    dim: usize,
}

impl ImageEmbedder for IdentityEmbedder {
    fn embed(&self, images: &Array4<f64>) -> crate::error::Result<Array2<f64>> {
        let n = images.dim().0;
        Ok(images
            .to_shape((n, self.dim))
            .expect("contiguous image batch")
            .to_owned())
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }
}

/// Linear map of flattened pixels; doubling `w` doubles every distance.
struct LinearEmbedder {
    w: Array2<f64>,
}

impl ImageEmbedder for LinearEmbedder {
    fn embed(&self, images: &Array4<f64>) -> crate::error::Result<Array2<f64>> {
        let n = images.dim().0;
        let flat = images
            .to_shape((n, self.w.ncols()))
            .expect("contiguous image batch")
            .to_owned();
        Ok(flat.dot(&self.w.t()))
    }

    fn embed_dim(&self) -> usize {
        self.w.nrows()
    }
}

fn image(rng: &mut ChaCha12Rng, h: usize, w: usize) -> Array3<f64> {
    let mut img = Array3::zeros((1, h, w));
    for v in img.iter_mut() {
        *v = rng.gen::<f64>();
    }
    img
}

fn as_batch(images: &[Array3<f64>]) -> Array4<f64> {
    let views: Vec<_> = images.iter().map(|x| x.view()).collect();
    ndarray::stack(Axis(0), &views).unwrap()
}

#[test]
fn recognizability_self_samples_score_one() {
    let mut r = rng(51);
    let mut exemplars = BTreeMap::new();
    let mut samples = BTreeMap::new();
    for cat in 0..5 {
        let ex = image(&mut r, 4, 4);
        samples.insert(cat, as_batch(&[ex.clone()]));
        exemplars.insert(cat, ex);
    }
    let critic = IdentityEmbedder { dim: 16 };
    let acc = recognizability(&samples, &exemplars, &critic).unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn recognizability_is_order_invariant() {
    let mut r = rng(61);
    let mut exemplars = BTreeMap::new();
    for cat in 0..4 {
        exemplars.insert(cat, image(&mut r, 4, 4));
    }
    let pool: Vec<Array3<f64>> = (0..12).map(|_| image(&mut r, 4, 4)).collect();
    let critic = IdentityEmbedder { dim: 16 };

    let mut forward = BTreeMap::new();
    forward.insert(1usize, as_batch(&pool[..6]));
    forward.insert(3usize, as_batch(&pool[6..]));
    let mut reversed_rows: Vec<Array3<f64>> = pool[..6].to_vec();
    reversed_rows.reverse();
    let mut shuffled = BTreeMap::new();
    shuffled.insert(1usize, as_batch(&reversed_rows));
    shuffled.insert(3usize, as_batch(&pool[6..]));

    let a = recognizability(&forward, &exemplars, &critic).unwrap();
    let b = recognizability(&shuffled, &exemplars, &critic).unwrap();
    assert_eq!(a, b);
}

#[test]
fn recognizability_random_tags_score_chance_level() {
    // Uniformly random tags turn each sample into a Bernoulli(1/N) match;
    // with 2000 samples over N=8 categories the observed rate stays within
    // 4 standard errors (~0.03) of 1/8.
    let mut r = rng(71);
    let n_cats = 8usize;
    let mut exemplars = BTreeMap::new();
    for cat in 0..n_cats {
        exemplars.insert(cat, image(&mut r, 4, 4));
    }
    let mut by_tag: BTreeMap<usize, Vec<Array3<f64>>> = BTreeMap::new();
    for _ in 0..2000 {
        let tag = r.gen_range(0..n_cats);
        by_tag.entry(tag).or_default().push(image(&mut r, 4, 4));
    }
    let samples: BTreeMap<usize, Array4<f64>> = by_tag
        .iter()
        .map(|(tag, imgs)| (*tag, as_batch(imgs)))
        .collect();
    let critic = IdentityEmbedder { dim: 16 };
    let acc = recognizability(&samples, &exemplars, &critic).unwrap();
    assert!(
        (acc - 1.0 / n_cats as f64).abs() < 0.03,
        "accuracy {acc} not at chance level"
    );
}

#[test]
fn recognizability_rejects_bad_input() {
    let mut r = rng(81);
    let critic = IdentityEmbedder { dim: 16 };
    let mut exemplars = BTreeMap::new();
    exemplars.insert(0usize, image(&mut r, 4, 4));

    let empty: BTreeMap<usize, Array4<f64>> = BTreeMap::new();
    assert!(matches!(
        recognizability(&empty, &exemplars, &critic),
        Err(Error::Validation(_))
    ));

    let mut unknown_tag = BTreeMap::new();
    unknown_tag.insert(9usize, as_batch(&[image(&mut r, 4, 4)]));
    assert!(matches!(
        recognizability(&unknown_tag, &exemplars, &critic),
        Err(Error::Validation(_))
    ));
}

// ----------------------------------------------------- originality scoring

#[test]
fn originality_of_identical_samples_is_zero() {
    let mut r = rng(91);
    let mut exemplars = BTreeMap::new();
    let mut samples = BTreeMap::new();
    for cat in 0..3 {
        let ex = image(&mut r, 4, 4);
        samples.insert(cat, as_batch(&[ex.clone(), ex.clone()]));
        exemplars.insert(cat, ex);
    }
    let critic = IdentityEmbedder { dim: 16 };
    assert_eq!(originality_raw(&samples, &exemplars, &critic).unwrap(), 0.0);
}

#[test]
fn originality_scales_linearly_with_embedder() {
    let mut r = rng(101);
    let mut exemplars = BTreeMap::new();
    let mut samples = BTreeMap::new();
    for cat in 0..3 {
        exemplars.insert(cat, image(&mut r, 4, 4));
        samples.insert(cat, as_batch(&[image(&mut r, 4, 4), image(&mut r, 4, 4)]));
    }
    let mut w = Array2::zeros((6, 16));
    for v in w.iter_mut() {
        *v = r.gen::<f64>() - 0.5;
    }
    let single = LinearEmbedder { w: w.clone() };
    let double = LinearEmbedder { w: 2.0 * &w };
    let raw = originality_raw(&samples, &exemplars, &single).unwrap();
    let raw2 = originality_raw(&samples, &exemplars, &double).unwrap();
    assert!(raw > 0.0);
    assert_relative_eq!(raw2, 2.0 * raw, max_relative = 1e-12);
}

#[test]
fn originality_pools_as_size_weighted_mean() {
    let mut r = rng(111);
    let mut exemplars = BTreeMap::new();
    for cat in 0..2 {
        exemplars.insert(cat, image(&mut r, 4, 4));
    }
    let critic = IdentityEmbedder { dim: 16 };

    let set_a: Vec<Array3<f64>> = (0..3).map(|_| image(&mut r, 4, 4)).collect();
    let set_b: Vec<Array3<f64>> = (0..5).map(|_| image(&mut r, 4, 4)).collect();

    let mut only_a = BTreeMap::new();
    only_a.insert(0usize, as_batch(&set_a));
    let mut only_b = BTreeMap::new();
    only_b.insert(1usize, as_batch(&set_b));
    let mut pooled = BTreeMap::new();
    pooled.insert(0usize, as_batch(&set_a));
    pooled.insert(1usize, as_batch(&set_b));

    let mean_a = originality_raw(&only_a, &exemplars, &critic).unwrap();
    let mean_b = originality_raw(&only_b, &exemplars, &critic).unwrap();
    let mean_pooled = originality_raw(&pooled, &exemplars, &critic).unwrap();
    assert_relative_eq!(
        mean_pooled,
        (3.0 * mean_a + 5.0 * mean_b) / 8.0,
        max_relative = 1e-12
    );
}

// ------------------------------------------------------------ normalization

fn point(id: &str, raw: f64) -> ModelPoint {
    ModelPoint::new(id, BTreeMap::new(), 0.5, raw)
}

#[test]
fn normalize_originality_is_min_max() {
    let mut points = vec![point("a", 2.0), point("b", 4.0), point("c", 6.0)];
    let human = normalize_originality(&mut points, 4.0, true).unwrap();
    assert_eq!(points[0].originality, Some(0.0));
    assert_eq!(points[1].originality, Some(0.5));
    assert_eq!(points[2].originality, Some(1.0));
    assert_eq!(human, 0.5);
}

#[test]
fn normalize_originality_includes_human_in_extremes() {
    let mut points = vec![point("a", 2.0), point("b", 4.0)];
    // Human raw 6 extends the range; models compress into [0, 2/3].
    let human = normalize_originality(&mut points, 6.0, true).unwrap();
    assert_eq!(human, 1.0);
    assert_abs_diff_eq!(points[0].originality.unwrap(), 0.0);
    assert_abs_diff_eq!(points[1].originality.unwrap(), 0.5, epsilon = 1e-12);

    // Excluding the human keeps the model extremes at 0 and 1 and lets the
    // human value leave [0, 1].
    let human = normalize_originality(&mut points, 6.0, false).unwrap();
    assert_eq!(points[0].originality, Some(0.0));
    assert_eq!(points[1].originality, Some(1.0));
    assert_eq!(human, 2.0);
}

#[test]
fn normalize_originality_preserves_order() {
    let raws = [3.7, 0.2, 9.1, 4.4, 2.2];
    let mut points: Vec<ModelPoint> = raws
        .iter()
        .enumerate()
        .map(|(i, &raw)| point(&format!("m{i}"), raw))
        .collect();
    normalize_originality(&mut points, 5.0, true).unwrap();
    for i in 0..raws.len() {
        for j in 0..raws.len() {
            let (a, b) = (points[i].originality.unwrap(), points[j].originality.unwrap());
            assert_eq!(raws[i] < raws[j], a < b);
        }
    }
}

#[test]
fn normalize_originality_rejects_degenerate_sets() {
    let mut points = vec![point("a", 3.0), point("b", 3.0)];
    assert!(matches!(
        normalize_originality(&mut points, 3.0, true),
        Err(Error::Degenerate(_))
    ));
    let mut empty: Vec<ModelPoint> = Vec::new();
    assert!(matches!(
        normalize_originality(&mut empty, 3.0, true),
        Err(Error::Validation(_))
    ));
    let mut points = vec![point("a", f64::NAN)];
    assert!(matches!(
        normalize_originality(&mut points, 3.0, true),
        Err(Error::Validation(_))
    ));
}

// -------------------------------------------------------------- sweep fit

/// Independent least-squares oracle: explicit normal equations solved by
/// Gaussian elimination with partial pivoting.
fn normal_equation_fit(x: &[f64], y: &[f64]) -> [f64; 3] {
    let mut s = [0.0f64; 5];
    let mut t = [0.0f64; 3];
    for (&xi, &yi) in x.iter().zip(y) {
        let mut p = 1.0;
        for k in 0..5 {
            s[k] += p;
            if k < 3 {
                t[k] += p * yi;
            }
            p *= xi;
        }
    }
    let mut m = [
        [s[0], s[1], s[2], t[0]],
        [s[1], s[2], s[3], t[1]],
        [s[2], s[3], s[4], t[2]],
    ];
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
            .unwrap();
        m.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let c2 = m[2][3] / m[2][2];
    let c1 = (m[1][3] - m[1][2] * c2) / m[1][1];
    let c0 = (m[0][3] - m[0][1] * c1 - m[0][2] * c2) / m[0][0];
    [c0, c1, c2]
}

#[test]
fn fit_recovers_exact_quadratic() {
    // Betas span five decades; responses are exact quadratics in log10.
    let betas: Vec<f64> = (0..8).map(|i| 1e-3 * 10f64.powf(i as f64 * 0.7)).collect();
    let q_o = |x: f64| 0.3 - 0.12 * x + 0.05 * x * x;
    let q_r = |x: f64| 0.9 + 0.02 * x - 0.04 * x * x;
    let orig: Vec<f64> = betas.iter().map(|b| q_o(b.log10())).collect();
    let recog: Vec<f64> = betas.iter().map(|b| q_r(b.log10())).collect();

    let fit = fit_sweep_values(&betas, &orig, &recog).unwrap();
    assert_abs_diff_eq!(fit.coeffs_originality[0], 0.3, epsilon = 1e-8);
    assert_abs_diff_eq!(fit.coeffs_originality[1], -0.12, epsilon = 1e-8);
    assert_abs_diff_eq!(fit.coeffs_originality[2], 0.05, epsilon = 1e-8);
    assert_abs_diff_eq!(fit.coeffs_recognizability[0], 0.9, epsilon = 1e-8);
    assert_abs_diff_eq!(fit.coeffs_recognizability[1], 0.02, epsilon = 1e-8);
    assert_abs_diff_eq!(fit.coeffs_recognizability[2], -0.04, epsilon = 1e-8);
    assert_eq!(fit.beta_order.len(), betas.len());
    assert!(fit.beta_order.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn fit_residuals_match_normal_equation_oracle() {
    // Noisy responses: the QR solution must agree with the independent
    // normal-equations solver on every residual.
    let mut r = rng(121);
    let betas: Vec<f64> = (0..10).map(|i| 1e-4 * 10f64.powf(i as f64 * 0.6)).collect();
    let orig: Vec<f64> = betas
        .iter()
        .map(|b| 0.4 + 0.1 * b.log10() + 0.3 * r.gen::<f64>())
        .collect();
    let recog: Vec<f64> = betas.iter().map(|_| r.gen::<f64>()).collect();

    let fit = fit_sweep_values(&betas, &orig, &recog).unwrap();
    let xs: Vec<f64> = betas.iter().map(|b| b.log10()).collect();
    for (coeffs, ys) in [
        (&fit.coeffs_originality, &orig),
        (&fit.coeffs_recognizability, &recog),
    ] {
        let oracle = normal_equation_fit(&xs, ys);
        for (&x, &y) in xs.iter().zip(ys.iter()) {
            let res_fit = y - (coeffs[0] + coeffs[1] * x + coeffs[2] * x * x);
            let res_oracle = y - (oracle[0] + oracle[1] * x + oracle[2] * x * x);
            assert_abs_diff_eq!(res_fit, res_oracle, epsilon = 1e-8);
        }
    }
}

#[test]
fn fit_collinear_points_zero_quadratic_term() {
    let betas: [f64; 3] = [0.1, 1.0, 10.0];
    let line: Vec<f64> = betas.iter().map(|b| 0.2 + 0.15 * b.log10()).collect();
    let fit = fit_sweep_values(&betas, &line, &line).unwrap();
    assert_abs_diff_eq!(fit.coeffs_originality[2], 0.0, epsilon = 1e-10);
    assert_abs_diff_eq!(fit.coeffs_recognizability[2], 0.0, epsilon = 1e-10);
}

#[test]
fn fit_averages_duplicate_betas() {
    let betas = [1.0, 1.0, 10.0, 100.0];
    let orig = [0.2, 0.4, 0.5, 0.6];
    let recog = [0.9, 0.7, 0.6, 0.5];
    let fit = fit_sweep_values(&betas, &orig, &recog).unwrap();

    let merged_betas = [1.0, 10.0, 100.0];
    let merged_orig = [0.3, 0.5, 0.6];
    let merged_recog = [0.8, 0.6, 0.5];
    let merged = fit_sweep_values(&merged_betas, &merged_orig, &merged_recog).unwrap();
    for k in 0..3 {
        assert_relative_eq!(
            fit.coeffs_originality[k],
            merged.coeffs_originality[k],
            max_relative = 1e-12
        );
        assert_relative_eq!(
            fit.coeffs_recognizability[k],
            merged.coeffs_recognizability[k],
            max_relative = 1e-12
        );
    }
    assert_eq!(fit.beta_order, vec![1.0, 10.0, 100.0]);
}

#[test]
fn fit_rejects_bad_input() {
    // Two distinct betas (one duplicated) are not enough for a quadratic.
    let r = fit_sweep_values(&[1.0, 1.0, 10.0], &[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]);
    assert!(matches!(r, Err(Error::Validation(_))));
    let r = fit_sweep_values(&[0.0, 1.0, 10.0], &[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]);
    assert!(matches!(r, Err(Error::Validation(_))));
    let r = fit_sweep_values(&[-1.0, 1.0, 10.0], &[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]);
    assert!(matches!(r, Err(Error::Validation(_))));
    let r = fit_sweep_values(&[1.0, 10.0], &[0.1, 0.2], &[0.1, 0.2]);
    assert!(matches!(r, Err(Error::Validation(_))));
}

#[test]
fn fit_sweep_reads_model_points() {
    use crate::regularizers::RegularizerKind;
    let betas = [0.1, 1.0, 10.0, 100.0];
    let mut points: Vec<ModelPoint> = betas
        .iter()
        .enumerate()
        .map(|(i, &beta)| {
            let mut beta_map = BTreeMap::new();
            beta_map.insert(RegularizerKind::Prototype, beta);
            let mut p = ModelPoint::new(format!("m{i}"), beta_map, 0.5 + 0.05 * i as f64, 0.0);
            p.originality = Some(0.1 * i as f64);
            p
        })
        .collect();

    let from_points = fit_sweep(&points, RegularizerKind::Prototype).unwrap();
    let orig: Vec<f64> = points.iter().map(|p| p.originality.unwrap()).collect();
    let recog: Vec<f64> = points.iter().map(|p| p.recognizability).collect();
    let from_values = fit_sweep_values(&betas, &orig, &recog).unwrap();
    assert_eq!(from_points, from_values);

    assert!(matches!(
        fit_sweep(&points, RegularizerKind::Kl),
        Err(Error::Validation(_))
    ));
    points[0].originality = None;
    assert!(matches!(
        fit_sweep(&points, RegularizerKind::Prototype),
        Err(Error::Validation(_))
    ));
}

#[test]
fn fit_curve_follows_increasing_beta() {
    let betas: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
    // Originality rises linearly with log beta, so curve points must too.
    let orig: Vec<f64> = betas.iter().map(|b| 0.5 + 0.1 * b.log10()).collect();
    let recog: Vec<f64> = betas.iter().map(|b| 0.8 - 0.05 * b.log10()).collect();
    let fit = fit_sweep_values(&betas, &orig, &recog).unwrap();

    let curve = fit.curve(9);
    assert_eq!(curve.len(), 9);
    for w in curve.windows(2) {
        assert!(w[0].0 < w[1].0, "originality must increase along the curve");
        assert!(w[0].1 > w[1].1, "recognizability must decrease");
    }
    assert_abs_diff_eq!(curve[0].0, fit.originality_at(0.01), epsilon = 1e-12);
    assert_abs_diff_eq!(
        curve[8].1,
        fit.recognizability_at(10.0),
        epsilon = 1e-12
    );
    assert!(fit.curve(0).is_empty());
    assert_eq!(fit.curve(1).len(), 1);
}

// ---------------------------------------------------------------- distance

#[test]
fn distance_examples() {
    assert_eq!(plane_distance((0.0, 0.0), (0.3, 0.4)), 0.5);
    assert_eq!(
        plane_distance((0.1, 0.9), (0.7, 0.2)),
        plane_distance((0.7, 0.2), (0.1, 0.9))
    );

    let mut p = point("a", 1.0);
    p.originality = Some(0.25);
    assert_eq!(distance_to_human(&p, (0.25, 0.5)).unwrap(), 0.0);
    p.originality = None;
    assert!(matches!(
        distance_to_human(&p, (0.25, 0.5)),
        Err(Error::Validation(_))
    ));
}

// ------------------------------------------------------------------ report

#[test]
fn report_round_trips() {
    use crate::regularizers::RegularizerKind;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");

    let mut beta_map = BTreeMap::new();
    beta_map.insert(RegularizerKind::Prototype, 10.0);
    beta_map.insert(RegularizerKind::Kl, 1e-3);
    let mut a = ModelPoint::new("proto_10", beta_map, 0.9375, 1.2345678901234);
    a.originality = Some(0.25);
    let b = ModelPoint::new("baseline", BTreeMap::new(), 0.5, 2.0);

    let report = EvalReport {
        points: vec![a, b],
        human: Some((0.75, 0.95)),
        fit: Some(FitCurve {
            coeffs_originality: [0.1, -0.2, 0.033333333333333336],
            coeffs_recognizability: [0.9, 0.01, -0.5],
            beta_order: vec![0.001, 10.0, 500.0],
        }),
    };
    write_report(&path, &report).unwrap();
    let back = read_report(&path).unwrap();
    assert_eq!(back, report);

    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("kl:0.001|prototype:10"));
    // Un-normalized point: empty originality and distance columns.
    assert!(text.contains("baseline,,0.5,2,,\n"));
}

#[test]
fn report_without_fit_or_human() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bare.csv");
    let report = EvalReport {
        points: vec![point("solo", 1.5)],
        human: None,
        fit: None,
    };
    write_report(&path, &report).unwrap();
    let back = read_report(&path).unwrap();
    assert_eq!(back, report);
}

#[test]
fn report_rejects_delimiters_and_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    let report = EvalReport {
        points: vec![point("has,comma", 1.0)],
        human: None,
        fit: None,
    };
    assert!(matches!(
        write_report(&path, &report),
        Err(Error::Validation(_))
    ));

    std::fs::write(&path, "not,a,report\n").unwrap();
    assert!(matches!(read_report(&path), Err(Error::Parse { .. })));

    std::fs::write(
        &path,
        "# fit_originality: 1 2 3\nmodel_id,beta_map,recognizability,originality_raw,originality,distance_to_human\n",
    )
    .unwrap();
    assert!(matches!(read_report(&path), Err(Error::Parse { .. })));
}

// ----------------------------------------------------------------- critics

fn blob_image(corner: usize, noise: f64, rng: &mut ChaCha12Rng) -> Array3<f64> {
    let mut img = Array3::zeros((1, 48, 48));
    let (r0, c0) = [(4, 4), (4, 28), (28, 4), (28, 28)][corner];
    for r in r0..r0 + 16 {
        for c in c0..c0 + 16 {
            img[[0, r, c]] = 1.0;
        }
    }
    for v in img.iter_mut() {
        *v = (*v + noise * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0);
    }
    img
}

/// Four well-separated categories: solid blocks in distinct corners.
fn separable_split(rng: &mut ChaCha12Rng, variations: usize) -> DatasetSplit {
    let episodes = (0..4)
        .map(|cat| Episode {
            category_id: 10 + cat,
            category_name: format!("corner{cat}"),
            exemplar: blob_image(cat, 0.1, rng),
            variations: (0..variations).map(|_| blob_image(cat, 0.1, rng)).collect(),
        })
        .collect();
    DatasetSplit {
        episodes,
        split_name: Split::Train,
        image_size: (48, 48),
    }
}

fn tiny_critic_config() -> CriticConfig {
    CriticConfig {
        embed_dim: 8,
        channels: [2, 4, 4, 4],
        head_dim: 8,
        epochs: 6,
        batch_size: 16,
        learning_rate: 1e-3,
        holdout_fraction: 0.25,
        accuracy_gate: 0.9,
        temperature: 1.0,
        augmentation: crate::data::AugmentationConfig::default(),
    }
}

#[test]
fn untrained_classifier_matches_exemplars_to_themselves() {
    let mut r = rng(131);
    let split = separable_split(&mut r, 2);
    let config = tiny_critic_config();
    let mut init_rng = rng(7);
    let net = crate::rae::RAEModel::new(
        &mut init_rng,
        &crate::rae::RAEConfig {
            latent_dim: config.embed_dim,
            channels: config.channels,
            ..Default::default()
        },
        false,
    )
    .unwrap();
    let head = crate::nn::Linear::new(&mut init_rng, config.embed_dim, config.head_dim, true);
    let classifier = CriticClassifier {
        net,
        head,
        gate_accuracy: 0.0,
    };

    // Exemplars as queries against themselves: zero distance wins.
    let exemplars: Vec<&Array3<f64>> = split.episodes.iter().map(|e| &e.exemplar).collect();
    let views: Vec<_> = exemplars.iter().map(|x| x.view()).collect();
    let support = ndarray::stack(Axis(0), &views).unwrap();
    let preds = classifier.classify(&support, &support).unwrap();
    assert_eq!(preds, vec![0, 1, 2, 3]);

    assert_eq!(classifier.embed_dim(), 8);
    let emb = classifier.embed(&support).unwrap();
    assert_eq!(emb.dim(), (4, 8));
}

#[test]
fn critics_train_pass_gate_and_stay_frozen() {
    let mut r = rng(141);
    let split = separable_split(&mut r, 8);
    let config = tiny_critic_config();

    let (classifier, embedder) = train_critics(&split, &config, 515).unwrap();
    assert!(classifier.gate_accuracy >= config.accuracy_gate);
    assert_eq!(embedder.embed_dim(), config.embed_dim);

    // Different seed: both critics end elsewhere in parameter space.
    let (classifier2, _) = train_critics(&split, &config, 516).unwrap();
    assert!(classifier2.gate_accuracy >= config.accuracy_gate);
    let mut c1 = classifier.net.clone();
    let mut c2 = classifier2.net.clone();
    assert_ne!(
        param_checksum(&mut c1.params()),
        param_checksum(&mut c2.params())
    );

    // Scoring must not mutate critic parameters.
    let mut exemplars = BTreeMap::new();
    let mut samples = BTreeMap::new();
    for ep in &split.episodes {
        exemplars.insert(ep.category_id, ep.exemplar.clone());
        let views: Vec<_> = ep.variations[..2].iter().map(|x| x.view()).collect();
        samples.insert(ep.category_id, ndarray::stack(Axis(0), &views).unwrap());
    }
    let mut net = classifier.net.clone();
    let mut head = classifier.head.clone();
    let mut params = net.params();
    params.extend(head.params());
    let before = param_checksum(&mut params);

    let acc = recognizability(&samples, &exemplars, &classifier).unwrap();
    assert!(acc >= 0.9, "trained critic should recognize its own data, got {acc}");
    let raw = originality_raw(&samples, &exemplars, &embedder).unwrap();
    assert!(raw.is_finite() && raw >= 0.0);

    let mut net = classifier.net.clone();
    let mut head = classifier.head.clone();
    let mut params = net.params();
    params.extend(head.params());
    assert_eq!(before, param_checksum(&mut params));
}

#[test]
fn critic_gate_failure_reports_accuracy_curve() {
    // All four categories draw from the same distribution, so one-shot
    // accuracy stays near chance and the gate cannot be met.
    let mut r = rng(151);
    let episodes = (0..4)
        .map(|cat| Episode {
            category_id: cat,
            category_name: format!("same{cat}"),
            exemplar: blob_image(0, 0.3, &mut r),
            variations: (0..4).map(|_| blob_image(0, 0.3, &mut r)).collect(),
        })
        .collect();
    let split = DatasetSplit {
        episodes,
        split_name: Split::Train,
        image_size: (48, 48),
    };
    let config = CriticConfig {
        epochs: 2,
        ..tiny_critic_config()
    };
    match train_critics(&split, &config, 3) {
        Err(Error::Training { diagnostics, .. }) => {
            assert_eq!(diagnostics.len(), 2);
            assert!(diagnostics[0].contains("holdout accuracy"));
        }
        other => panic!("expected gate failure, got {other:?}"),
    }
}
