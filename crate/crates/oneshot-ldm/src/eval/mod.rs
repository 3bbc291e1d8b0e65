//! Originality-vs-recognizability evaluation: critic networks, the scoring
//! operations that place a trained model in the (originality,
//! recognizability) plane, the degree-2 sweep fit over log10(beta), and the
//! report file format.

pub mod critics;
pub mod stats;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regularizers::RegularizerKind;

pub use critics::{
    one_shot_accuracy, param_checksum, train_critics, CriticClassifier, CriticConfig,
    CriticEmbedder, ImageEmbedder,
};
pub use stats::{
    bootstrap_consistency, spearman_rank, wilcoxon_signed_rank, Alternative,
    WILCOXON_EXACT_MAX_N,
};

/// One evaluated model: its regularizer weights and its position in the
/// evaluation plane. `originality` stays `None` until
/// [`normalize_originality`] has run over the full model set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPoint {
    pub model_id: String,
    pub beta_map: BTreeMap<RegularizerKind, f64>,
    pub recognizability: f64,
    pub originality_raw: f64,
    pub originality: Option<f64>,
}

impl ModelPoint {
    pub fn new(
        model_id: impl Into<String>,
        beta_map: BTreeMap<RegularizerKind, f64>,
        recognizability: f64,
        originality_raw: f64,
    ) -> Self {
        ModelPoint {
            model_id: model_id.into(),
            beta_map,
            recognizability,
            originality_raw,
            originality: None,
        }
    }
}

/// Degree-2 least-squares fits of originality and recognizability against
/// log10(beta). Sampling both polynomials from the first to the last entry
/// of `beta_order` traces the sweep curve in the direction of increasing
/// beta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitCurve {
    /// c0 + c1 x + c2 x^2 with x = log10(beta).
    pub coeffs_originality: [f64; 3],
    pub coeffs_recognizability: [f64; 3],
    /// Distinct swept beta values, ascending.
    pub beta_order: Vec<f64>,
}

fn eval_poly(c: &[f64; 3], x: f64) -> f64 {
    c[0] + x * (c[1] + x * c[2])
}

impl FitCurve {
    pub fn originality_at(&self, beta: f64) -> f64 {
        eval_poly(&self.coeffs_originality, beta.log10())
    }

    pub fn recognizability_at(&self, beta: f64) -> f64 {
        eval_poly(&self.coeffs_recognizability, beta.log10())
    }

    /// `n` (originality, recognizability) curve points at betas log-spaced
    /// from the smallest to the largest swept value, so the point order
    /// follows increasing beta.
    pub fn curve(&self, n: usize) -> Vec<(f64, f64)> {
        if n == 0 || self.beta_order.is_empty() {
            return Vec::new();
        }
        let lo = self.beta_order[0].log10();
        let hi = self.beta_order[self.beta_order.len() - 1].log10();
        (0..n)
            .map(|i| {
                let f = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                let x = lo + f * (hi - lo);
                (
                    eval_poly(&self.coeffs_originality, x),
                    eval_poly(&self.coeffs_recognizability, x),
                )
            })
            .collect()
    }
}

fn stack_exemplars(exemplars: &BTreeMap<usize, Array3<f64>>) -> Result<(Vec<usize>, Array4<f64>)> {
    if exemplars.is_empty() {
        return Err(Error::Validation("exemplar set is empty".into()));
    }
    let keys: Vec<usize> = exemplars.keys().copied().collect();
    let views: Vec<_> = exemplars.values().map(|x| x.view()).collect();
    let batch = ndarray::stack(Axis(0), &views)
        .map_err(|e| Error::Validation(format!("exemplar shapes disagree: {e}")))?;
    Ok((keys, batch))
}

fn check_tags_covered(
    samples: &BTreeMap<usize, Array4<f64>>,
    exemplars: &BTreeMap<usize, Array3<f64>>,
) -> Result<()> {
    for tag in samples.keys() {
        if !exemplars.contains_key(tag) {
            return Err(Error::Validation(format!(
                "sample tag {tag} has no exemplar"
            )));
        }
    }
    let total: usize = samples.values().map(|s| s.shape()[0]).sum();
    if total == 0 {
        return Err(Error::Validation("sample set is empty".into()));
    }
    Ok(())
}

/// Fraction of generated samples whose nearest exemplar in the critic's
/// embedding space matches their conditioning category. N-way over the full
/// exemplar set passed in; pass a subset for a smaller-way readout.
pub fn recognizability<C: ImageEmbedder>(
    samples: &BTreeMap<usize, Array4<f64>>,
    exemplars: &BTreeMap<usize, Array3<f64>>,
    critic: &C,
) -> Result<f64> {
    check_tags_covered(samples, exemplars)?;
    let (keys, exemplar_batch) = stack_exemplars(exemplars)?;
    let anchor = critic.embed(&exemplar_batch)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (tag, batch) in samples {
        if batch.shape()[0] == 0 {
            continue;
        }
        let emb = critic.embed(batch)?;
        for row in emb.axis_iter(Axis(0)) {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, ex) in anchor.axis_iter(Axis(0)).enumerate() {
                let d = row
                    .iter()
                    .zip(ex.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if keys[best] == *tag {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Mean Euclidean distance, in the embedder's feature space, between each
/// sample and the exemplar of its conditioning category.
pub fn originality_raw<C: ImageEmbedder>(
    samples: &BTreeMap<usize, Array4<f64>>,
    exemplars: &BTreeMap<usize, Array3<f64>>,
    embedder: &C,
) -> Result<f64> {
    check_tags_covered(samples, exemplars)?;
    let (keys, exemplar_batch) = stack_exemplars(exemplars)?;
    let anchor = embedder.embed(&exemplar_batch)?;
    let row_of: BTreeMap<usize, usize> =
        keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut total_dist = 0.0;
    let mut total = 0usize;
    for (tag, batch) in samples {
        if batch.shape()[0] == 0 {
            continue;
        }
        let emb = embedder.embed(batch)?;
        let ex = anchor.row(row_of[tag]);
        for row in emb.axis_iter(Axis(0)) {
            let d2 = row
                .iter()
                .zip(ex.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            total_dist += d2.sqrt();
            total += 1;
        }
    }
    Ok(total_dist / total as f64)
}

/// Min-max rescaling of raw originality over the model set. With
/// `include_human` (the default in the CLI) the human raw value joins the
/// normalization set, so the human point lands in [0, 1] alongside the
/// models; without it the human value is rescaled by the model-only min-max
/// and may fall outside [0, 1]. Returns the normalized human value and sets
/// `originality` on every point.
pub fn normalize_originality(
    points: &mut [ModelPoint],
    human_raw: f64,
    include_human: bool,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Validation("no model points to normalize".into()));
    }
    if !human_raw.is_finite() {
        return Err(Error::Validation("human raw originality is not finite".into()));
    }
    let mut values: Vec<f64> = points.iter().map(|p| p.originality_raw).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(
            "a model has non-finite raw originality".into(),
        ));
    }
    if include_human {
        values.push(human_raw);
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Err(Error::Degenerate(
            "all raw originality values are equal; min-max normalization undefined".into(),
        ));
    }
    let span = max - min;
    for p in points.iter_mut() {
        p.originality = Some((p.originality_raw - min) / span);
    }
    Ok((human_raw - min) / span)
}

/// Degree-2 least squares of y against x via modified Gram-Schmidt QR.
/// Assumes at least 3 distinct x values (checked by the callers).
fn polyfit_quadratic(x: &[f64], y: &[f64]) -> Result<[f64; 3]> {
    let n = x.len();
    let cols: [Vec<f64>; 3] = [
        vec![1.0; n],
        x.to_vec(),
        x.iter().map(|v| v * v).collect(),
    ];
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(3);
    let mut r = [[0.0f64; 3]; 3];
    for (j, col) in cols.iter().enumerate() {
        let mut v = col.clone();
        for (i, qi) in q.iter().enumerate() {
            let proj: f64 = qi.iter().zip(&v).map(|(a, b)| a * b).sum();
            r[i][j] = proj;
            for (vk, qk) in v.iter_mut().zip(qi) {
                *vk -= proj * qk;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate(
                "design matrix is rank deficient; need 3 distinct beta values".into(),
            ));
        }
        r[j][j] = norm;
        for vk in &mut v {
            *vk /= norm;
        }
        q.push(v);
    }
    let b: Vec<f64> = q
        .iter()
        .map(|qi| qi.iter().zip(y).map(|(a, c)| a * c).sum())
        .collect();
    let c2 = b[2] / r[2][2];
    let c1 = (b[1] - r[1][2] * c2) / r[1][1];
    let c0 = (b[0] - r[0][1] * c1 - r[0][2] * c2) / r[0][0];
    Ok([c0, c1, c2])
}

/// Fits originality and recognizability against log10(beta). Duplicate
/// betas are averaged before fitting; at least 3 distinct betas required.
pub fn fit_sweep_values(
    betas: &[f64],
    originality: &[f64],
    recognizability: &[f64],
) -> Result<FitCurve> {
    if betas.len() != originality.len() || betas.len() != recognizability.len() {
        return Err(Error::Validation(format!(
            "sweep inputs differ in length: {} betas, {} originality, {} recognizability",
            betas.len(),
            originality.len(),
            recognizability.len()
        )));
    }
    for (&beta, (&o, &r)) in betas.iter().zip(originality.iter().zip(recognizability)) {
        if !beta.is_finite() || beta <= 0.0 {
            return Err(Error::Validation(format!(
                "sweep beta must be finite and positive, got {beta}"
            )));
        }
        if !o.is_finite() || !r.is_finite() {
            return Err(Error::Validation("sweep values must be finite".into()));
        }
    }
    // Average duplicate betas (exact equality; sweep grids reuse literals).
    let mut grouped: BTreeMap<u64, (f64, f64, f64, usize)> = BTreeMap::new();
    for (&beta, (&o, &r)) in betas.iter().zip(originality.iter().zip(recognizability)) {
        let entry = grouped.entry(beta.to_bits()).or_insert((beta, 0.0, 0.0, 0));
        entry.1 += o;
        entry.2 += r;
        entry.3 += 1;
    }
    let mut rows: Vec<(f64, f64, f64)> = grouped
        .values()
        .map(|&(beta, so, sr, c)| (beta, so / c as f64, sr / c as f64))
        .collect();
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite betas"));
    if rows.len() < 3 {
        return Err(Error::Validation(format!(
            "sweep fit needs at least 3 distinct betas, got {}",
            rows.len()
        )));
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.0.log10()).collect();
    let ys_o: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let ys_r: Vec<f64> = rows.iter().map(|r| r.2).collect();
    Ok(FitCurve {
        coeffs_originality: polyfit_quadratic(&xs, &ys_o)?,
        coeffs_recognizability: polyfit_quadratic(&xs, &ys_r)?,
        beta_order: rows.iter().map(|r| r.0).collect(),
    })
}

/// Sweep fit over evaluated model points; `kind` selects which regularizer's
/// beta is the swept coordinate. All points must carry that beta and a
/// normalized originality.
pub fn fit_sweep(points: &[ModelPoint], kind: RegularizerKind) -> Result<FitCurve> {
    let mut betas = Vec::with_capacity(points.len());
    let mut orig = Vec::with_capacity(points.len());
    let mut recog = Vec::with_capacity(points.len());
    for p in points {
        let beta = p.beta_map.get(&kind).copied().ok_or_else(|| {
            Error::Validation(format!(
                "model {} has no beta for regularizer {}",
                p.model_id,
                kind.as_str()
            ))
        })?;
        let o = p.originality.ok_or_else(|| {
            Error::Validation(format!(
                "model {} has unnormalized originality; run normalize_originality first",
                p.model_id
            ))
        })?;
        betas.push(beta);
        orig.push(o);
        recog.push(p.recognizability);
    }
    fit_sweep_values(&betas, &orig, &recog)
}

/// Euclidean distance between two points of the evaluation plane.
pub fn plane_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Distance from a normalized model point to the human reference point,
/// both as (originality, recognizability).
pub fn distance_to_human(point: &ModelPoint, human: (f64, f64)) -> Result<f64> {
    let originality = point.originality.ok_or_else(|| {
        Error::Validation(format!(
            "model {} has unnormalized originality; run normalize_originality first",
            point.model_id
        ))
    })?;
    Ok(plane_distance((originality, point.recognizability), human))
}

/// Everything one `evaluate` run produces: the model points, the optional
/// human reference point (originality, recognizability) and the optional
/// sweep fit.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub points: Vec<ModelPoint>,
    pub human: Option<(f64, f64)>,
    pub fit: Option<FitCurve>,
}

fn format_beta_map(map: &BTreeMap<RegularizerKind, f64>) -> String {
    let mut out = String::new();
    for (i, (kind, beta)) in map.iter().enumerate() {
        if i > 0 {
            out.push('|');
        }
        let _ = write!(out, "{}:{}", kind.as_str(), beta);
    }
    out
}

fn parse_beta_map(field: &str, path: &Path) -> Result<BTreeMap<RegularizerKind, f64>> {
    let mut map = BTreeMap::new();
    if field.is_empty() {
        return Ok(map);
    }
    for pair in field.split('|') {
        let (kind, beta) = pair
            .split_once(':')
            .ok_or_else(|| Error::parse(path, format!("bad beta_map entry `{pair}`")))?;
        let kind = RegularizerKind::from_str(kind).map_err(|e| Error::parse(path, e))?;
        let beta: f64 = beta
            .parse()
            .map_err(|_| Error::parse(path, format!("bad beta value `{beta}`")))?;
        map.insert(kind, beta);
    }
    Ok(map)
}

fn parse_f64_list(rest: &str, path: &Path) -> Result<Vec<f64>> {
    rest.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::parse(path, format!("bad number `{tok}`")))
        })
        .collect()
}

fn opt_f64(field: &str, path: &Path) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::parse(path, format!("bad number `{field}`")))
}

const REPORT_HEADER: &str =
    "model_id,beta_map,recognizability,originality_raw,originality,distance_to_human";

/// Writes the evaluation report: `#`-prefixed lines carry the fit
/// coefficients and the human point, then one CSV record per model. The
/// distance column is present only when both a human point and a normalized
/// originality exist.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = String::new();
    if let Some(fit) = &report.fit {
        let c = &fit.coeffs_originality;
        let _ = writeln!(out, "# fit_originality: {} {} {}", c[0], c[1], c[2]);
        let c = &fit.coeffs_recognizability;
        let _ = writeln!(out, "# fit_recognizability: {} {} {}", c[0], c[1], c[2]);
        let betas: Vec<String> = fit.beta_order.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(out, "# beta_order: {}", betas.join(" "));
    }
    if let Some((orig, recog)) = report.human {
        let _ = writeln!(out, "# human: {orig} {recog}");
    }
    out.push_str(REPORT_HEADER);
    out.push('\n');
    for p in &report.points {
        if p.model_id.contains([',', '|', ':', '\n']) {
            return Err(Error::Validation(format!(
                "model_id `{}` contains a report delimiter",
                p.model_id
            )));
        }
        let originality = p.originality.map(|v| v.to_string()).unwrap_or_default();
        let distance = match (report.human, p.originality) {
            (Some(human), Some(_)) => distance_to_human(p, human)?.to_string(),
            _ => String::new(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.model_id,
            format_beta_map(&p.beta_map),
            p.recognizability,
            p.originality_raw,
            originality,
            distance
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a report written by [`write_report`]. The distance column is
/// recomputed from the human point rather than trusted.
pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut coeffs_originality: Option<[f64; 3]> = None;
    let mut coeffs_recognizability: Option<[f64; 3]> = None;
    let mut beta_order: Option<Vec<f64>> = None;
    let mut human: Option<(f64, f64)> = None;
    let mut points = Vec::new();
    let mut saw_header = false;
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim_start();
            if let Some(v) = rest.strip_prefix("fit_originality:") {
                let v = parse_f64_list(v, path)?;
                coeffs_originality = Some(<[f64; 3]>::try_from(v).map_err(|v: Vec<f64>| {
                    Error::parse(path, format!("expected 3 coefficients, got {}", v.len()))
                })?);
            } else if let Some(v) = rest.strip_prefix("fit_recognizability:") {
                let v = parse_f64_list(v, path)?;
                coeffs_recognizability = Some(<[f64; 3]>::try_from(v).map_err(
                    |v: Vec<f64>| {
                        Error::parse(path, format!("expected 3 coefficients, got {}", v.len()))
                    },
                )?);
            } else if let Some(v) = rest.strip_prefix("beta_order:") {
                beta_order = Some(parse_f64_list(v, path)?);
            } else if let Some(v) = rest.strip_prefix("human:") {
                let v = parse_f64_list(v, path)?;
                if v.len() != 2 {
                    return Err(Error::parse(path, "human line needs 2 numbers"));
                }
                human = Some((v[0], v[1]));
            }
            // Unknown comment lines are ignored for forward compatibility.
            continue;
        }
        if !saw_header {
            if line != REPORT_HEADER {
                return Err(Error::parse(path, format!("unexpected header `{line}`")));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::parse(
                path,
                format!("expected 6 fields, got {} in `{line}`", fields.len()),
            ));
        }
        let recognizability = fields[2]
            .parse::<f64>()
            .map_err(|_| Error::parse(path, format!("bad number `{}`", fields[2])))?;
        let originality_raw = fields[3]
            .parse::<f64>()
            .map_err(|_| Error::parse(path, format!("bad number `{}`", fields[3])))?;
        points.push(ModelPoint {
            model_id: fields[0].to_string(),
            beta_map: parse_beta_map(fields[1], path)?,
            recognizability,
            originality_raw,
            originality: opt_f64(fields[4], path)?,
        });
    }
    if !saw_header {
        return Err(Error::parse(path, "missing report header"));
    }
    let fit = match (coeffs_originality, coeffs_recognizability, beta_order) {
        (Some(o), Some(r), Some(b)) => Some(FitCurve {
            coeffs_originality: o,
            coeffs_recognizability: r,
            beta_order: b,
        }),
        (None, None, None) => None,
        _ => {
            return Err(Error::parse(
                path,
                "incomplete fit header: need fit_originality, fit_recognizability and beta_order",
            ))
        }
    };
    Ok(EvalReport { points, human, fit })
}
