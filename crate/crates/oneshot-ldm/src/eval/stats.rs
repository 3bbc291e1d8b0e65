//! Rank statistics for importance-map comparison: Spearman correlation,
//! the one-sided Wilcoxon signed-rank test, and the split-half bootstrap
//! consistency estimate.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// Alternative hypothesis for [`wilcoxon_signed_rank`]. Only the one-sided
/// "A greater than B" direction is used; the complementary test is obtained
/// by swapping the inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    Greater,
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "{name} contains a non-finite value"
        )));
    }
    Ok(())
}

/// 1-based ranks with average-rank tie handling: every member of a tied run
/// receives the mean of the positions the run occupies.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start+1 ..= end share the run; their mean is exact in f64.
        let shared = (start + 1 + end) as f64 / 2.0;
        for k in start..end {
            ranks[order[k]] = shared;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
///
/// Inputs must have equal length >= 2; a constant input has undefined rank
/// correlation and is rejected.
pub fn spearman_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "spearman inputs differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Validation(
            "spearman needs at least 2 paired values".into(),
        ));
    }
    check_finite("spearman input a", a)?;
    check_finite("spearman input b", b)?;
    if a.iter().all(|v| *v == a[0]) || b.iter().all(|v| *v == b[0]) {
        return Err(Error::Degenerate(
            "spearman undefined for constant input".into(),
        ));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let mean_a = ra.iter().sum::<f64>() / n;
    let mean_b = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

/// Complementary error function, Numerical Recipes rational approximation.
/// Relative error below 1.2e-7 over the whole real line.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398
                                + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277))))))));
    let ans = t * poly.exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// P(Z >= z) for a standard normal.
fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Largest post-drop sample size for which the exact sign-flip distribution
/// is used; larger samples fall back to the tie-corrected normal
/// approximation with continuity correction.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Exact P(W+ >= w_plus) under uniform sign flips of the (possibly tied,
/// average-) ranks. Ranks are multiples of 1/2, so doubling makes them exact
/// integers and the tail count is a dynamic program over the doubled sum.
fn wilcoxon_exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len();
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut ways = vec![0u64; total + 1];
    ways[0] = 1;
    let mut reach = 0usize;
    for &r in &doubled {
        reach += r;
        for s in (r..=reach).rev() {
            ways[s] += ways[s - r];
        }
    }
    let w2 = (2.0 * w_plus).round() as usize;
    let tail: u64 = ways[w2..].iter().sum();
    // n <= 25, so both the tail count and 2^n are exact in f64.
    tail as f64 / (1u64 << n) as f64
}

/// One-sided Wilcoxon signed-rank test that the paired values in `a` are
/// stochastically greater than those in `b`.
///
/// Zero differences are dropped, tied absolute differences get average
/// ranks. The p-value comes from the exact sign-flip distribution for up to
/// [`WILCOXON_EXACT_MAX_N`] non-zero differences and from a tie-corrected
/// normal approximation with continuity correction above that.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], alternative: Alternative) -> Result<f64> {
    let Alternative::Greater = alternative;
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "wilcoxon inputs differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    check_finite("wilcoxon input a", a)?;
    check_finite("wilcoxon input b", b)?;
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::Degenerate(
            "wilcoxon undefined: all paired differences are zero".into(),
        ));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let n = diffs.len();
    if n <= WILCOXON_EXACT_MAX_N {
        return Ok(wilcoxon_exact_p(&ranks, w_plus));
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    // Tie correction subtracts sum(t^3 - t)/48 over tied groups of |d|.
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite values"));
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && sorted[end] == sorted[start] {
            end += 1;
        }
        let t = (end - start) as f64;
        tie_term += t * t * t - t;
        start = end;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (w_plus - mean - 0.5) / var.sqrt();
    Ok(normal_sf(z))
}

fn flat_mean(maps: &[&Array3<f64>]) -> Vec<f64> {
    let len = maps[0].len();
    let mut mean = vec![0.0; len];
    for map in maps {
        for (acc, v) in mean.iter_mut().zip(map.iter()) {
            *acc += *v;
        }
    }
    let scale = 1.0 / maps.len() as f64;
    for v in &mut mean {
        *v *= scale;
    }
    mean
}

/// Split-half consistency of per-participant importance maps.
///
/// Each resample splits every category's participants into two random
/// halves, averages the maps within each half, and correlates the two
/// averages with [`spearman_rank`]; the return value is the mean rho across
/// categories and resamples. Each resample runs on its own RNG stream seeded
/// from `rng`, so resamples are order-independent given the drawn seeds.
pub fn bootstrap_consistency(
    per_participant_maps: &BTreeMap<usize, Vec<Array3<f64>>>,
    n_resamples: usize,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    if per_participant_maps.is_empty() {
        return Err(Error::Validation(
            "bootstrap needs at least one category".into(),
        ));
    }
    if n_resamples == 0 {
        return Err(Error::Validation("bootstrap needs n_resamples >= 1".into()));
    }
    for (category, maps) in per_participant_maps {
        if maps.len() < 2 {
            return Err(Error::Validation(format!(
                "category {category} has {} participant map(s); need at least 2",
                maps.len()
            )));
        }
        let shape = maps[0].shape();
        for map in maps {
            if map.shape() != shape {
                return Err(Error::shape(
                    format!("{shape:?} for every map of category {category}"),
                    format!("{:?}", map.shape()),
                ));
            }
        }
    }
    let mut total = 0.0;
    for _ in 0..n_resamples {
        let mut resample_rng = ChaCha12Rng::seed_from_u64(rng.gen());
        for (category, maps) in per_participant_maps {
            let mut order: Vec<usize> = (0..maps.len()).collect();
            order.shuffle(&mut resample_rng);
            let (first, second) = order.split_at(maps.len() / 2);
            let mean_a = flat_mean(&first.iter().map(|&i| &maps[i]).collect::<Vec<_>>());
            let mean_b = flat_mean(&second.iter().map(|&i| &maps[i]).collect::<Vec<_>>());
            let rho = spearman_rank(&mean_a, &mean_b).map_err(|e| {
                Error::Degenerate(format!("category {category} split-half correlation: {e}"))
            })?;
            total += rho;
        }
    }
    Ok(total / (n_resamples * per_participant_maps.len()) as f64)
}
