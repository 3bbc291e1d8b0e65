//! Latent-space regularizers: six composable losses that shape the
//! autoencoder code, each weighted by its own coefficient.
//!
//! Every loss comes in two forms: a value-only function and a `_grad`
//! variant returning the analytic gradients with respect to the latent
//! inputs while accumulating head/codebook parameter gradients in place.
//! The `_grad` variants are canonical; value wrappers delegate to them.


use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init, with_prefix, Linear, Param, ParamRefs};

/// Diagonal-Gaussian encoder output, the input to the KL regularizer.
#[derive(Debug, Clone)]
pub struct GaussianLatent {
    pub mean: Array2<f64>,
    pub log_variance: Array2<f64>,
}

impl GaussianLatent {
    /// Reparametrized sample `mean + exp(log_variance/2) * eps` along with
    /// the noise used, which the caller needs for gradient routing.
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> (Array2<f64>, Array2<f64>) {
        let eps = Array2::from_shape_simple_fn(self.mean.raw_dim(), || {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let z = &self.mean + &(self.log_variance.mapv(|lv| (lv / 2.0).exp()) * &eps);
        (z, eps)
    }
}

/// Learnable nearest-neighbor codebook over `s`-dimensional chunks.
#[derive(Debug, Clone)]
pub struct Codebook {
    /// `[K, s]` codeword rows.
    pub entries: Param,
}

impl Codebook {
    pub fn new(rng: &mut ChaCha12Rng, k: usize, s: usize) -> Self {
        // Spread initial codewords like unit-scale latents.
        let entries = init::uniform_fan_in(rng, (k, s), 1);
        Codebook {
            entries: Param::new(entries.into_dyn()),
        }
    }

    pub fn k(&self) -> usize {
        self.entries.value.shape()[0]
    }

    pub fn codeword_dim(&self) -> usize {
        self.entries.value.shape()[1]
    }
}

/// Which regularizer a spec activates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    None,
    Kl,
    Vq,
    Classification,
    Prototype,
    Simclr,
    Barlow,
}

impl RegularizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RegularizerKind::None => "none",
            RegularizerKind::Kl => "kl",
            RegularizerKind::Vq => "vq",
            RegularizerKind::Classification => "classification",
            RegularizerKind::Prototype => "prototype",
            RegularizerKind::Simclr => "simclr",
            RegularizerKind::Barlow => "barlow",
        }
    }
}

impl std::str::FromStr for RegularizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(RegularizerKind::None),
            "kl" => Ok(RegularizerKind::Kl),
            "vq" => Ok(RegularizerKind::Vq),
            "classification" => Ok(RegularizerKind::Classification),
            "prototype" => Ok(RegularizerKind::Prototype),
            "simclr" => Ok(RegularizerKind::Simclr),
            "barlow" => Ok(RegularizerKind::Barlow),
            other => Err(format!("unknown regularizer kind `{other}`")),
        }
    }
}

fn default_codebook_size() -> usize {
    512
}
fn default_codeword_dim() -> usize {
    8
}
fn default_lambda() -> f64 {
    5e-3
}
fn default_temperature() -> f64 {
    1.0
}
fn default_head_dim() -> usize {
    128
}

/// One active regularizer and its weight, as written in experiment
/// configs: `{kind, beta, params...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub beta: f64,
    /// Codebook rows (vq).
    #[serde(default = "default_codebook_size")]
    pub codebook_size: usize,
    /// Codeword dimension (vq); must divide the latent size.
    #[serde(default = "default_codeword_dim")]
    pub codeword_dim: usize,
    /// Off-diagonal weight (barlow).
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Similarity divisor (simclr).
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Projection size for the prototype/simclr/barlow heads.
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind, beta: f64) -> Self {
        RegularizerSpec {
            kind,
            beta,
            codebook_size: default_codebook_size(),
            codeword_dim: default_codeword_dim(),
            lambda: default_lambda(),
            temperature: default_temperature(),
            head_dim: default_head_dim(),
        }
    }

    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "regularizer {} has negative weight {}",
                self.kind.as_str(),
                self.beta
            )));
        }
        if self.kind == RegularizerKind::Vq {
            if self.codeword_dim == 0 || latent_dim % self.codeword_dim != 0 {
                return Err(Error::Config(format!(
                    "codeword_dim {} does not divide latent size {latent_dim}",
                    self.codeword_dim
                )));
            }
            if self.codebook_size == 0 {
                return Err(Error::Config("codebook_size must be >= 1".into()));
            }
        }
        if self.kind == RegularizerKind::Simclr && self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// KL divergence of a diagonal Gaussian from the standard normal,
/// `0.5 * sum_j (mean^2 + var - log var - 1)`, averaged over the batch.
pub fn kl_loss(latent: &GaussianLatent) -> Result<f64> {
    kl_loss_grad(latent).map(|(l, _, _)| l)
}

pub fn kl_loss_grad(latent: &GaussianLatent) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if latent.mean.shape() != latent.log_variance.shape() {
        return Err(Error::shape(
            format!("{:?}", latent.mean.shape()),
            format!("{:?}", latent.log_variance.shape()),
        ));
    }
    let b = latent.mean.nrows() as f64;
    let mut loss = 0.0;
    let mut gmean = Array2::<f64>::zeros(latent.mean.raw_dim());
    let mut glogvar = Array2::<f64>::zeros(latent.mean.raw_dim());
    for ((idx, &mu), &lv) in latent.mean.indexed_iter().zip(latent.log_variance.iter()) {
        if !mu.is_finite() || !lv.is_finite() {
            return Err(Error::Numerical(
                "non-finite Gaussian latent in kl_loss".into(),
            ));
        }
        let var = lv.exp();
        loss += 0.5 * (mu * mu + var - lv - 1.0);
        gmean[idx] = mu / b;
        glogvar[idx] = 0.5 * (var - 1.0) / b;
    }
    Ok((loss / b, gmean, glogvar))
}

/// Nearest-codeword lookup per `s`-chunk. Ties break to the lowest row.
///
/// Returns the quantized code and one index per chunk, sample-major.
pub fn quantize(z: &Array2<f64>, codebook: &Codebook) -> Result<(Array2<f64>, Vec<usize>)> {
    let (b, d) = z.dim();
    let s = codebook.codeword_dim();
    if s == 0 || d % s != 0 {
        return Err(Error::Config(format!(
            "codeword dim {s} does not divide latent size {d}"
        )));
    }
    let entries = codebook
        .entries
        .value
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let chunks = d / s;
    let mut z_q = Array2::<f64>::zeros((b, d));
    let mut indices = Vec::with_capacity(b * chunks);
    for bi in 0..b {
        for ci in 0..chunks {
            let span = ci * s..(ci + 1) * s;
            let chunk = z.slice(ndarray::s![bi, span.clone()]);
            let mut best = (f64::INFINITY, 0usize);
            for (ki, row) in entries.outer_iter().enumerate() {
                let mut d2 = 0.0;
                for (a, b_) in chunk.iter().zip(row.iter()) {
                    d2 += (a - b_) * (a - b_);
                }
                if d2 < best.0 {
                    best = (d2, ki);
                }
            }
            indices.push(best.1);
            z_q.slice_mut(ndarray::s![bi, span])
                .assign(&entries.row(best.1));
        }
    }
    Ok((z_q, indices))
}

/// Two-term vector-quantization loss
/// `|sg[z_q] - z|^2 + |z_q - sg[z]|^2`, batch mean. Numerically this is
/// `2 |z - z_q|^2`; the split matters only for gradient routing.
pub fn vq_loss(z: &Array2<f64>, z_q: &Array2<f64>) -> Result<f64> {
    if z.shape() != z_q.shape() {
        return Err(Error::shape(
            format!("{:?}", z.shape()),
            format!("{:?}", z_q.shape()),
        ));
    }
    let b = z.nrows() as f64;
    let d2 = (z - z_q).mapv(|v| v * v).sum();
    Ok(2.0 * d2 / b)
}

/// Gradients of [`vq_loss`]: returns d/dz (the codebook side is
/// accumulated into `codebook.entries.grad` through the chunk indices).
pub fn vq_loss_grads(
    z: &Array2<f64>,
    z_q: &Array2<f64>,
    indices: &[usize],
    codebook: &mut Codebook,
) -> Result<Array2<f64>> {
    if z.shape() != z_q.shape() {
        return Err(Error::shape(
            format!("{:?}", z.shape()),
            format!("{:?}", z_q.shape()),
        ));
    }
    let (b, d) = z.dim();
    let s = codebook.codeword_dim();
    let chunks = d / s;
    assert_eq!(indices.len(), b * chunks, "index count mismatch");
    let bf = b as f64;
    // First term: gradient flows to z only.
    let gz = (z - z_q).mapv(|v| 2.0 * v / bf);
    // Second term: gradient flows to the selected codewords only.
    let mut ge = codebook
        .entries
        .grad
        .view_mut()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    for bi in 0..b {
        for ci in 0..chunks {
            let ki = indices[bi * chunks + ci];
            for j in 0..s {
                let zq = z_q[[bi, ci * s + j]];
                let zv = z[[bi, ci * s + j]];
                ge[[ki, j]] += 2.0 * (zq - zv) / bf;
            }
        }
    }
    Ok(gz)
}

/// Straight-through estimator: forward value is `z_q`, gradient passes to
/// `z` unchanged (`z + sg[z_q - z]`). Callers route the downstream
/// gradient of the returned code directly onto `z`.
pub fn straight_through(z: &Array2<f64>, z_q: &Array2<f64>) -> Array2<f64> {
    debug_assert_eq!(z.shape(), z_q.shape());
    z_q.clone()
}

fn check_labels(labels: &[usize], n_classes: usize, b: usize) -> Result<()> {
    if labels.len() != b {
        return Err(Error::Validation(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }
    for &l in labels {
        if l >= n_classes {
            return Err(Error::Validation(format!(
                "label {l} out of range for {n_classes} classes"
            )));
        }
    }
    Ok(())
}

/// Batch-mean cross-entropy of a linear classifier on the latent code.
pub fn classification_loss(z: &Array2<f64>, labels: &[usize], head: &Linear) -> Result<f64> {
    let mut scratch = head.clone();
    classification_loss_grad(z, labels, &mut scratch).map(|(l, _)| l)
}

pub fn classification_loss_grad(
    z: &Array2<f64>,
    labels: &[usize],
    head: &mut Linear,
) -> Result<(f64, Array2<f64>)> {
    let b = z.nrows();
    let n_classes = head.out_features();
    check_labels(labels, n_classes, b)?;
    let logits = head.forward(z);
    let mut loss = 0.0;
    let mut glogits = Array2::<f64>::zeros(logits.raw_dim());
    for (bi, row) in logits.outer_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
        loss += lse - row[labels[bi]];
        for (ci, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            glogits[[bi, ci]] = (p - if ci == labels[bi] { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    let gz = head.backward(z, &glogits);
    Ok((loss / b as f64, gz))
}

/// First-occurrence order of distinct labels plus each sample's position
/// in that order.
fn distinct_classes(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut order = Vec::new();
    let mut assign = Vec::with_capacity(labels.len());
    for &l in labels {
        let k = match order.iter().position(|&o| o == l) {
            Some(k) => k,
            None => {
                order.push(l);
                order.len() - 1
            }
        };
        assign.push(k);
    }
    (order, assign)
}

/// Episodic prototype loss: softmax over negated Euclidean distances from
/// each projected sample to the batch's distinct projected exemplars.
pub fn prototype_loss(
    z: &Array2<f64>,
    z_y: &Array2<f64>,
    labels: &[usize],
    head: &Linear,
) -> Result<f64> {
    let mut scratch = head.clone();
    prototype_loss_grad(z, z_y, labels, &mut scratch).map(|r| r.0)
}

/// Returns (loss, d/dz, d/dz_y). The exemplar gradient for each distinct
/// class is placed on that class's first batch row and is zero elsewhere,
/// matching a gather of one shared encoding per class.
pub fn prototype_loss_grad(
    z: &Array2<f64>,
    z_y: &Array2<f64>,
    labels: &[usize],
    head: &mut Linear,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (b, _) = z.dim();
    if b == 0 {
        return Err(Error::Validation("prototype_loss: empty batch".into()));
    }
    if z.shape() != z_y.shape() {
        return Err(Error::shape(
            format!("{:?}", z.shape()),
            format!("{:?}", z_y.shape()),
        ));
    }
    if labels.len() != b {
        return Err(Error::Validation(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }
    let (order, assign) = distinct_classes(labels);
    let k = order.len();
    let first_row: Vec<usize> = order
        .iter()
        .map(|&cls| labels.iter().position(|&l| l == cls).unwrap())
        .collect();

    let p = head.forward(z);
    // One prototype per distinct class, taken from its first occurrence.
    let mut protos = Array2::<f64>::zeros((k, p.ncols()));
    let py = head.forward(z_y);
    for (ki, &row) in first_row.iter().enumerate() {
        protos.row_mut(ki).assign(&py.row(row));
    }

    let mut loss = 0.0;
    let mut gp = Array2::<f64>::zeros(p.raw_dim());
    let mut gprotos = Array2::<f64>::zeros(protos.raw_dim());
    for bi in 0..b {
        let mut dists = Array1::<f64>::zeros(k);
        for ki in 0..k {
            let diff = &p.row(bi) - &protos.row(ki);
            dists[ki] = diff.dot(&diff).sqrt();
        }
        // Softmax over negated distances.
        let max = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let lse = (-max) + dists.mapv(|d| (-(d - max)).exp()).sum().ln();
        let target = assign[bi];
        loss += lse + dists[target];
        for ki in 0..k {
            let prob = (-dists[ki] - lse).exp();
            // d loss / d dist_ki for this sample.
            let gd = (if ki == target { 1.0 } else { 0.0 }) - prob;
            if dists[ki] > 1e-12 {
                let dir = (&p.row(bi) - &protos.row(ki)).mapv(|v| v / dists[ki]);
                let scaled = dir.mapv(|v| v * gd / b as f64);
                gp.row_mut(bi).zip_mut_with(&scaled, |a, &s| *a += s);
                gprotos.row_mut(ki).zip_mut_with(&scaled, |a, &s| *a -= s);
            }
        }
    }
    loss /= b as f64;

    let gz = head.backward(z, &gp);
    // Scatter prototype gradients back onto first-occurrence rows of z_y.
    let mut gpy = Array2::<f64>::zeros(py.raw_dim());
    for (ki, &row) in first_row.iter().enumerate() {
        gpy.row_mut(row).assign(&gprotos.row(ki));
    }
    let gz_y = head.backward(z_y, &gpy);
    Ok((loss, gz, gz_y))
}

/// Per-sample class probabilities of the prototype softmax; rows sum to 1.
pub fn prototype_probabilities(
    z: &Array2<f64>,
    z_y: &Array2<f64>,
    labels: &[usize],
    head: &Linear,
) -> Result<Array2<f64>> {
    let (b, _) = z.dim();
    if b == 0 {
        return Err(Error::Validation("prototype probabilities: empty batch".into()));
    }
    let (order, _) = distinct_classes(labels);
    let k = order.len();
    let first_row: Vec<usize> = order
        .iter()
        .map(|&cls| labels.iter().position(|&l| l == cls).unwrap())
        .collect();
    let p = head.forward(z);
    let py = head.forward(z_y);
    let mut probs = Array2::<f64>::zeros((b, k));
    for bi in 0..b {
        let mut dists = Array1::<f64>::zeros(k);
        for ki in 0..k {
            let diff = &p.row(bi) - &py.row(first_row[ki]);
            dists[ki] = diff.dot(&diff).sqrt();
        }
        let max = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let lse = (-max) + dists.mapv(|d| (-(d - max)).exp()).sum().ln();
        for ki in 0..k {
            probs[[bi, ki]] = (-dists[ki] - lse).exp();
        }
    }
    Ok(probs)
}

fn cosine_rows(a: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = a.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    for &n in norms.iter() {
        if n < 1e-12 {
            return Err(Error::Numerical(
                "zero-norm embedding in cosine similarity".into(),
            ));
        }
    }
    let mut unit = a.clone();
    for (mut row, &n) in unit.outer_iter_mut().zip(norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }
    Ok((unit, norms))
}

/// Contrastive instance loss on two projected views, as a two-term sum per
/// sample: negative positive-pair similarity plus the log-sum-exp of the
/// similarities to the other samples' second views.
pub fn simclr_loss(
    z_a: &Array2<f64>,
    z_b: &Array2<f64>,
    head: &Linear,
    temperature: f64,
) -> Result<f64> {
    let mut scratch = head.clone();
    simclr_loss_grad(z_a, z_b, &mut scratch, temperature).map(|r| r.0)
}

pub fn simclr_loss_grad(
    z_a: &Array2<f64>,
    z_b: &Array2<f64>,
    head: &mut Linear,
    temperature: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (b, _) = z_a.dim();
    if b < 2 {
        return Err(Error::Validation(
            "simclr_loss needs a batch of at least 2 (no negatives otherwise)".into(),
        ));
    }
    if z_a.shape() != z_b.shape() {
        return Err(Error::shape(
            format!("{:?}", z_a.shape()),
            format!("{:?}", z_b.shape()),
        ));
    }
    if temperature <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let pa = head.forward(z_a);
    let pb = head.forward(z_b);
    let (ua, _) = cosine_rows(&pa)?;
    let (ub, _) = cosine_rows(&pb)?;
    let sims = ua.dot(&ub.t()); // sims[i][j] = cos(pa_i, pb_j)

    let mut loss = 0.0;
    // Gradient with respect to the similarity matrix.
    let mut gsims = Array2::<f64>::zeros((b, b));
    for i in 0..b {
        // Positive term.
        loss -= sims[[i, i]] / temperature;
        gsims[[i, i]] -= 1.0 / (temperature * b as f64);
        // Log-sum-exp over cross-view negatives j != i.
        let mut max = f64::NEG_INFINITY;
        for j in 0..b {
            if j != i {
                max = max.max(sims[[i, j]] / temperature);
            }
        }
        let mut denom = 0.0;
        for j in 0..b {
            if j != i {
                denom += (sims[[i, j]] / temperature - max).exp();
            }
        }
        loss += max + denom.ln();
        for j in 0..b {
            if j != i {
                let w = (sims[[i, j]] / temperature - max).exp() / denom;
                gsims[[i, j]] += w / (temperature * b as f64);
            }
        }
    }
    loss /= b as f64;

    // Through the cosine: d cos(u_i, v_j)/d pa_i = (v_j - cos * u_i)/|pa_i|.
    let na = pa.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let nb = pb.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut gpa = Array2::<f64>::zeros(pa.raw_dim());
    let mut gpb = Array2::<f64>::zeros(pb.raw_dim());
    for i in 0..b {
        for j in 0..b {
            let g = gsims[[i, j]];
            if g == 0.0 {
                continue;
            }
            let c = sims[[i, j]];
            for f in 0..pa.ncols() {
                gpa[[i, f]] += g * (ub[[j, f]] - c * ua[[i, f]]) / na[i];
                gpb[[j, f]] += g * (ua[[i, f]] - c * ub[[j, f]]) / nb[j];
            }
        }
    }
    let gza = head.backward(z_a, &gpa);
    let gzb = head.backward(z_b, &gpb);
    Ok((loss, gza, gzb))
}

/// Cross-correlation matrix of per-feature standardized embeddings,
/// exposed for property checks.
pub fn cross_correlation(ha: &Array2<f64>, hb: &Array2<f64>) -> Result<Array2<f64>> {
    let (b, _) = ha.dim();
    if b < 2 {
        return Err(Error::Validation(
            "cross correlation needs at least 2 samples".into(),
        ));
    }
    let za = standardize(ha)?;
    let zb = standardize(hb)?;
    Ok(za.t().dot(&zb) / b as f64)
}

fn standardize(h: &Array2<f64>) -> Result<Array2<f64>> {
    let mean = h.mean_axis(Axis(0)).unwrap();
    let centered = h - &mean;
    let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
    for &v in var.iter() {
        if v < 1e-20 {
            return Err(Error::Numerical(
                "zero-variance feature in correlation normalization".into(),
            ));
        }
    }
    let istd = var.mapv(|v| 1.0 / v.sqrt());
    Ok(&centered * &istd)
}

/// Redundancy-reduction loss on the cross-correlation matrix:
/// `sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2`.
pub fn barlow_from_correlation(c: &Array2<f64>, lambda: f64) -> f64 {
    let mut loss = 0.0;
    for ((i, j), &v) in c.indexed_iter() {
        if i == j {
            loss += (1.0 - v) * (1.0 - v);
        } else {
            loss += lambda * v * v;
        }
    }
    loss
}

pub fn barlow_loss(
    z_a: &Array2<f64>,
    z_b: &Array2<f64>,
    head: &Linear,
    lambda: f64,
) -> Result<f64> {
    let mut scratch = head.clone();
    barlow_loss_grad(z_a, z_b, &mut scratch, lambda).map(|r| r.0)
}

pub fn barlow_loss_grad(
    z_a: &Array2<f64>,
    z_b: &Array2<f64>,
    head: &mut Linear,
    lambda: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (b, _) = z_a.dim();
    if b < 2 {
        return Err(Error::Validation(
            "barlow_loss needs a batch of at least 2".into(),
        ));
    }
    if z_a.shape() != z_b.shape() {
        return Err(Error::shape(
            format!("{:?}", z_a.shape()),
            format!("{:?}", z_b.shape()),
        ));
    }
    let ha = head.forward(z_a);
    let hb = head.forward(z_b);
    let za = standardize(&ha)?;
    let zb = standardize(&hb)?;
    let bf = b as f64;
    let c = za.t().dot(&zb) / bf;
    let loss = barlow_from_correlation(&c, lambda);

    let mut gc = Array2::<f64>::zeros(c.raw_dim());
    for ((i, j), &v) in c.indexed_iter() {
        gc[[i, j]] = if i == j {
            -2.0 * (1.0 - v)
        } else {
            2.0 * lambda * v
        };
    }
    let gza = zb.dot(&gc.t()) / bf;
    let gzb = za.dot(&gc) / bf;
    let gha = standardize_backward(&ha, &za, &gza);
    let ghb = standardize_backward(&hb, &zb, &gzb);
    let ga = head.backward(z_a, &gha);
    let gb = head.backward(z_b, &ghb);
    Ok((loss, ga, gb))
}

/// Backward through per-feature batch standardization (biased variance).
fn standardize_backward(h: &Array2<f64>, zhat: &Array2<f64>, gz: &Array2<f64>) -> Array2<f64> {
    let (b, f) = h.dim();
    let n = b as f64;
    let mean = h.mean_axis(Axis(0)).unwrap();
    let centered = h - &mean;
    let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
    let istd = var.mapv(|v| 1.0 / v.sqrt());
    let mut gh = Array2::<f64>::zeros((b, f));
    for fi in 0..f {
        let mut sum_g = 0.0;
        let mut sum_gz = 0.0;
        for bi in 0..b {
            sum_g += gz[[bi, fi]];
            sum_gz += gz[[bi, fi]] * zhat[[bi, fi]];
        }
        for bi in 0..b {
            gh[[bi, fi]] =
                istd[fi] / n * (n * gz[[bi, fi]] - sum_g - zhat[[bi, fi]] * sum_gz);
        }
    }
    gh
}

/// The heads and codebook owned by a set of active regularizers.
#[derive(Debug, Clone)]
pub struct RegularizerBank {
    pub specs: Vec<RegularizerSpec>,
    pub codebook: Option<Codebook>,
    pub class_head: Option<Linear>,
    pub proto_head: Option<Linear>,
    pub simclr_head: Option<Linear>,
    pub barlow_head: Option<Linear>,
}

impl RegularizerBank {
    /// Builds heads for the active specs. `n_classes` may be 0 when no
    /// classification spec is present.
    pub fn new(
        rng: &mut ChaCha12Rng,
        specs: &[RegularizerSpec],
        latent_dim: usize,
        n_classes: usize,
    ) -> Result<Self> {
        let mut bank = RegularizerBank {
            specs: specs.to_vec(),
            codebook: None,
            class_head: None,
            proto_head: None,
            simclr_head: None,
            barlow_head: None,
        };
        for spec in specs {
            spec.validate(latent_dim)?;
            match spec.kind {
                RegularizerKind::Vq => {
                    bank.codebook = Some(Codebook::new(rng, spec.codebook_size, spec.codeword_dim));
                }
                RegularizerKind::Classification => {
                    if n_classes == 0 {
                        return Err(Error::Config(
                            "classification regularizer needs n_classes > 0".into(),
                        ));
                    }
                    bank.class_head = Some(Linear::new(rng, latent_dim, n_classes, true));
                }
                RegularizerKind::Prototype => {
                    bank.proto_head = Some(Linear::new(rng, latent_dim, spec.head_dim, false));
                }
                RegularizerKind::Simclr => {
                    bank.simclr_head = Some(Linear::new(rng, latent_dim, spec.head_dim, false));
                }
                RegularizerKind::Barlow => {
                    bank.barlow_head = Some(Linear::new(rng, latent_dim, spec.head_dim, false));
                }
                RegularizerKind::None | RegularizerKind::Kl => {}
            }
        }
        Ok(bank)
    }

    pub fn spec(&self, kind: RegularizerKind) -> Option<&RegularizerSpec> {
        self.specs.iter().find(|s| s.kind == kind)
    }

    pub fn uses_gaussian_encoder(&self) -> bool {
        self.spec(RegularizerKind::Kl).is_some()
    }

    pub fn uses_two_views(&self) -> bool {
        self.spec(RegularizerKind::Simclr).is_some()
            || self.spec(RegularizerKind::Barlow).is_some()
    }

    pub fn params(&mut self) -> ParamRefs<'_> {
        let mut out = Vec::new();
        if let Some(cb) = &mut self.codebook {
            out.push(("codebook.entries".to_string(), &mut cb.entries));
        }
        if let Some(h) = &mut self.class_head {
            out.extend(with_prefix("class_head", h.params()));
        }
        if let Some(h) = &mut self.proto_head {
            out.extend(with_prefix("proto_head", h.params()));
        }
        if let Some(h) = &mut self.simclr_head {
            out.extend(with_prefix("simclr_head", h.params()));
        }
        if let Some(h) = &mut self.barlow_head {
            out.extend(with_prefix("barlow_head", h.params()));
        }
        out
    }
}

/// Everything a composed-loss evaluation might need. `z` is the code that
/// feeds the decoder (for two-view specs, view A's code).
pub struct RegContext<'a> {
    pub z: &'a Array2<f64>,
    pub gaussian: Option<&'a GaussianLatent>,
    pub labels: Option<&'a [usize]>,
    pub exemplar_z: Option<&'a Array2<f64>>,
    pub second_view: Option<&'a Array2<f64>>,
}

impl<'a> RegContext<'a> {
    pub fn plain(z: &'a Array2<f64>) -> Self {
        RegContext {
            z,
            gaussian: None,
            labels: None,
            exemplar_z: None,
            second_view: None,
        }
    }
}

/// Weighted sum of the active regularizer losses. Empty spec list gives 0.
pub fn compose_regularizers(bank: &RegularizerBank, ctx: &RegContext<'_>) -> Result<f64> {
    let mut total = 0.0;
    for spec in &bank.specs {
        let missing = |what: &str| {
            Error::Config(format!(
                "regularizer {} is active but context lacks {what}",
                spec.kind.as_str()
            ))
        };
        let value = match spec.kind {
            RegularizerKind::None => 0.0,
            RegularizerKind::Kl => kl_loss(ctx.gaussian.ok_or_else(|| missing("gaussian latent"))?)?,
            RegularizerKind::Vq => {
                let cb = bank.codebook.as_ref().ok_or_else(|| missing("codebook"))?;
                let (z_q, _) = quantize(ctx.z, cb)?;
                vq_loss(ctx.z, &z_q)?
            }
            RegularizerKind::Classification => classification_loss(
                ctx.z,
                ctx.labels.ok_or_else(|| missing("labels"))?,
                bank.class_head.as_ref().ok_or_else(|| missing("classification head"))?,
            )?,
            RegularizerKind::Prototype => prototype_loss(
                ctx.z,
                ctx.exemplar_z.ok_or_else(|| missing("exemplar latents"))?,
                ctx.labels.ok_or_else(|| missing("labels"))?,
                bank.proto_head.as_ref().ok_or_else(|| missing("prototype head"))?,
            )?,
            RegularizerKind::Simclr => simclr_loss(
                ctx.z,
                ctx.second_view.ok_or_else(|| missing("second view"))?,
                bank.simclr_head.as_ref().ok_or_else(|| missing("instance head"))?,
                spec.temperature,
            )?,
            RegularizerKind::Barlow => barlow_loss(
                ctx.z,
                ctx.second_view.ok_or_else(|| missing("second view"))?,
                bank.barlow_head.as_ref().ok_or_else(|| missing("redundancy head"))?,
                spec.lambda,
            )?,
        };
        total += spec.beta * value;
    }
    Ok(total)
}
