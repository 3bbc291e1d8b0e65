//! Denoising diffusion over autoencoder latents.
//!
//! Stage two of the pipeline: a noise predictor is trained on the frozen
//! encoder's latent codes, conditioned on the exemplar's latent, and new
//! variations are generated by reverse diffusion with classifier-free
//! guidance followed by a decode.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rae::LrSchedule;

pub mod predictor;
pub mod train;


pub use predictor::{noise_mse, NoisePredictor};
pub use train::{encode_dataset, train_ldm, LatentDataset, LdmEpochStats, LdmTrainer};

/// Classifier-free guidance settings.
///
/// `gamma` blends the conditional and unconditional predictions at
/// sampling time; `cond_dropout_prob` is the training-time probability of
/// replacing the exemplar latent with the null token so the unconditional
/// branch gets learned at all.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub cond_dropout_prob: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            gamma: 1.0,
            cond_dropout_prob: 0.1,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() {
            return Err(Error::Config("guidance gamma must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_prob) {
            return Err(Error::Config(format!(
                "cond_dropout_prob {} outside [0, 1]",
                self.cond_dropout_prob
            )));
        }
        Ok(())
    }
}

/// Hyperparameters for the latent diffusion stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub latent_dim: usize,
    /// Network widths as multiples of `latent_dim`, outermost first.
    pub width_mults: [usize; 4],
    pub time_embed_dim: usize,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub guidance: GuidanceConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            latent_dim: 128,
            width_mults: [16, 8, 4, 2],
            time_embed_dim: 128,
            t_steps: 1000,
            beta_start: 1.5e-3,
            beta_end: 1.95e-2,
            guidance: GuidanceConfig::default(),
            epochs: 1000,
            batch_size: 128,
            learning_rate: 1e-4,
            // Torch AdamW default; the training recipe does not pin this.
            weight_decay: 1e-2,
            lr_schedule: LrSchedule::StepDecay {
                every_epochs: 200,
                divide_by: 10.0,
            },
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        for (i, &m) in self.width_mults.iter().enumerate() {
            if m == 0 {
                return Err(Error::Config(format!("width_mults[{i}] must be positive")));
            }
            if (m * self.latent_dim) % predictor::NORM_GROUPS != 0 {
                return Err(Error::Config(format!(
                    "width {} not divisible by {} norm groups",
                    m * self.latent_dim,
                    predictor::NORM_GROUPS
                )));
            }
        }
        for i in 0..3 {
            if self.width_mults[i] <= self.width_mults[i + 1] {
                return Err(Error::Config(
                    "width_mults must be strictly decreasing".into(),
                ));
            }
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim {} must be even and positive",
                self.time_embed_dim
            )));
        }
        if self.t_steps < 1 {
            return Err(Error::Config("t_steps must be at least 1".into()));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range ({}, {}) must satisfy 0 < start <= end < 1",
                self.beta_start, self.beta_end
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.guidance.validate()?;
        self.lr_schedule.validate()
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        build_schedule(self.t_steps, self.beta_start, self.beta_end)
    }
}

/// Precomputed noise schedule. Vectors are 0-indexed: entry `t-1` belongs
/// to timestep `t` in 1..=T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub t_steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub beta_tilde: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Linear beta schedule with the derived quantities used by noising and
/// the reverse process. The posterior variance convention sets
/// `alpha_bar_0 = 1`, which makes `beta_tilde_1 = 0`: the final reverse
/// step adds no noise.
pub fn build_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t_steps < 1 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
        )));
    }
    let n = t_steps;
    let beta: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(n);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let mut beta_tilde = Vec::with_capacity(n);
    for t in 1..=n {
        let ab_prev = if t == 1 { 1.0 } else { alpha_bar[t - 2] };
        let ab = alpha_bar[t - 1];
        beta_tilde.push((1.0 - ab_prev) / (1.0 - ab) * beta[t - 1]);
    }
    let sigma = beta_tilde.iter().map(|v| v.sqrt()).collect();
    Ok(DiffusionSchedule {
        t_steps,
        beta,
        alpha,
        alpha_bar,
        beta_tilde,
        sigma,
    })
}

impl DiffusionSchedule {
    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_steps {
            return Err(Error::Validation(format!(
                "timestep {t} outside 1..={}",
                self.t_steps
            )));
        }
        Ok(())
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t - 1])
    }
}

/// Forward noising operator: z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps,
/// with a per-sample timestep.
pub fn noising(
    z0: &Array2<f64>,
    t: &[usize],
    eps: &Array2<f64>,
    schedule: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    if z0.raw_dim() != eps.raw_dim() {
        return Err(Error::shape(
            format!("{:?}", z0.raw_dim()),
            format!("{:?}", eps.raw_dim()),
        ));
    }
    if t.len() != z0.nrows() {
        return Err(Error::Validation(format!(
            "{} timesteps for batch of {}",
            t.len(),
            z0.nrows()
        )));
    }
    let mut z_t = Array2::<f64>::zeros(z0.raw_dim());
    for (bi, &tv) in t.iter().enumerate() {
        let ab = schedule.alpha_bar_at(tv)?;
        let (s_signal, s_noise) = (ab.sqrt(), (1.0 - ab).sqrt());
        let row = &z0.row(bi) * s_signal + &eps.row(bi) * s_noise;
        z_t.row_mut(bi).assign(&row);
    }
    Ok(z_t)
}

/// Algebraic inverse of `noising` for a known noise vector:
/// z0 = (z_t - sqrt(1-abar_t) eps) / sqrt(abar_t).
pub fn invert_noising(
    z_t: &Array2<f64>,
    t: &[usize],
    eps: &Array2<f64>,
    schedule: &DiffusionSchedule,
) -> Result<Array2<f64>> {
    if z_t.raw_dim() != eps.raw_dim() {
        return Err(Error::shape(
            format!("{:?}", z_t.raw_dim()),
            format!("{:?}", eps.raw_dim()),
        ));
    }
    if t.len() != z_t.nrows() {
        return Err(Error::Validation(format!(
            "{} timesteps for batch of {}",
            t.len(),
            z_t.nrows()
        )));
    }
    let mut z0 = Array2::<f64>::zeros(z_t.raw_dim());
    for (bi, &tv) in t.iter().enumerate() {
        let ab = schedule.alpha_bar_at(tv)?;
        let row = (&z_t.row(bi) - &(&eps.row(bi) * (1.0 - ab).sqrt())) / ab.sqrt();
        z0.row_mut(bi).assign(&row);
    }
    Ok(z0)
}

/// Guided noise estimate: (1+gamma) * cond - gamma * uncond, where the
/// unconditional branch feeds the zero null token. gamma = 0 skips the
/// unconditional pass entirely.
pub fn guided_eps(
    predictor: &NoisePredictor,
    z_t: &Array2<f64>,
    z_y: &Array2<f64>,
    t: &[usize],
    gamma: f64,
) -> Result<Array2<f64>> {
    let cond = predictor.forward(z_t, z_y, t)?;
    if gamma == 0.0 {
        return Ok(cond);
    }
    let null = predictor.null_token(z_t.nrows());
    let uncond = predictor.forward(z_t, &null, t)?;
    Ok(&cond * (1.0 + gamma) - &uncond * gamma)
}

/// Reverse update for a precomputed noise estimate. The same timestep is
/// applied to every row. No noise is added at t = 1.
pub fn reverse_step_from_eps(
    z_t: &Array2<f64>,
    eps_hat: &Array2<f64>,
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<f64>> {
    schedule.check_t(t)?;
    if eps_hat.raw_dim() != z_t.raw_dim() {
        return Err(Error::shape(
            format!("{:?}", z_t.raw_dim()),
            format!("{:?}", eps_hat.raw_dim()),
        ));
    }
    let alpha = schedule.alpha[t - 1];
    let ab = schedule.alpha_bar[t - 1];
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let mut out = (z_t - &(eps_hat * coef)) / alpha.sqrt();
    if t > 1 {
        let sigma = schedule.sigma[t - 1];
        let noise = standard_normal(rng, z_t.nrows(), z_t.ncols());
        out = out + &noise * sigma;
    }
    Ok(out)
}

/// One reverse-diffusion step from z_t to z_{t-1} with guided noise
/// estimation.
pub fn reverse_step(
    predictor: &NoisePredictor,
    z_t: &Array2<f64>,
    z_y: &Array2<f64>,
    t: usize,
    schedule: &DiffusionSchedule,
    gamma: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<f64>> {
    schedule.check_t(t)?;
    let t_vec = vec![t; z_t.nrows()];
    let eps_hat = guided_eps(predictor, z_t, z_y, &t_vec, gamma)?;
    reverse_step_from_eps(z_t, &eps_hat, t, schedule, rng)
}

/// Full reverse chain from pure noise, conditioned on one exemplar
/// latent replicated across `n_samples` rows.
pub fn sample_latents(
    predictor: &NoisePredictor,
    z_y: &Array1<f64>,
    schedule: &DiffusionSchedule,
    gamma: f64,
    n_samples: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<f64>> {
    let d = predictor.latent_dim;
    if z_y.len() != d {
        return Err(Error::shape(format!("[{d}]"), format!("[{}]", z_y.len())));
    }
    if n_samples == 0 {
        return Ok(Array2::zeros((0, d)));
    }
    let z_y_rows = replicate_rows(z_y, n_samples);
    let mut z = standard_normal(rng, n_samples, d);
    for t in (1..=schedule.t_steps).rev() {
        z = reverse_step(predictor, &z, &z_y_rows, t, schedule, gamma, rng)?;
    }
    Ok(z)
}

/// End-to-end one-shot generation: encode the exemplar, sample latents,
/// decode them back to images.
pub fn generate_variations(
    rae: &crate::rae::RAEModel,
    predictor: &NoisePredictor,
    exemplar: &Array4<f64>,
    n: usize,
    gamma: f64,
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<Array4<f64>> {
    if rae.config.latent_dim != predictor.latent_dim {
        return Err(Error::Config(format!(
            "autoencoder latent_dim {} but predictor latent_dim {}",
            rae.config.latent_dim, predictor.latent_dim
        )));
    }
    if exemplar.dim().0 != 1 {
        return Err(Error::shape(
            "[1, 1, 48, 48]",
            format!("{:?}", exemplar.dim()),
        ));
    }
    let z_y = rae.encode(exemplar)?.point().row(0).to_owned();
    if n == 0 {
        let (_, c, h, w) = exemplar.dim();
        return Ok(Array4::zeros((0, c, h, w)));
    }
    let latents = sample_latents(predictor, &z_y, schedule, gamma, n, rng)?;
    rae.decode(&latents)
}

pub(crate) fn standard_normal(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((rows, cols));
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    out
}

pub(crate) fn replicate_rows(v: &Array1<f64>, rows: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((rows, v.len()));
    for mut row in out.axis_iter_mut(Axis(0)) {
        row.assign(v);
    }
    out
}
