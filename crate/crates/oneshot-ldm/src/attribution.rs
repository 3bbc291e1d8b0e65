//! Per-pixel feature-importance maps for the generation process.
//!
//! At each visited state of a reverse trajectory the diffusion score
//! -eps_hat / sqrt(1 - alpha_bar_t) is pushed through the decoder as a
//! directional derivative; the absolute pixel responses accumulated over
//! the whole trajectory say which pixels the latent dynamics steer most.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand_chacha::ChaCha12Rng;

use crate::diffusion::{guided_eps, reverse_step_from_eps, DiffusionSchedule, NoisePredictor};
use crate::error::{Error, Result};
use crate::rae::RAEModel;

/// Number of trajectories averaged into a category map by default.
pub const DEFAULT_MAP_VARIATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Raw,
    UnitMax,
}

/// A non-negative per-pixel importance image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub values: Array3<f64>,
    pub category_id: Option<usize>,
    pub n_averaged: usize,
    pub normalization: Normalization,
}

impl ImportanceMap {
    pub fn with_category(mut self, id: usize) -> Self {
        self.category_id = Some(id);
        self
    }

    /// Scales the map so its maximum is 1; an identically zero map is
    /// returned unchanged (apart from the tag).
    pub fn unit_max(&self) -> ImportanceMap {
        let max = self.values.iter().fold(0.0f64, |m, &v| m.max(v));
        let values = if max > 0.0 {
            &self.values / max
        } else {
            self.values.clone()
        };
        ImportanceMap {
            values,
            category_id: self.category_id,
            n_averaged: self.n_averaged,
            normalization: Normalization::UnitMax,
        }
    }
}

/// Anything that can decode latents and expose directional derivatives
/// of the decoding. The real autoencoder implements this; tests swap in
/// analytic stubs.
pub trait LatentDecoder {
    fn latent_dim(&self) -> usize;
    /// (channels, height, width) of decoded images.
    fn image_shape(&self) -> (usize, usize, usize);
    /// Primal decode plus the derivative of decode at `z` along `v`.
    fn decode_jvp(&self, z: &Array2<f64>, v: &Array2<f64>) -> Result<(Array4<f64>, Array4<f64>)>;
}

impl LatentDecoder for RAEModel {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        (1, self.config.image_size.0, self.config.image_size.1)
    }

    fn decode_jvp(&self, z: &Array2<f64>, v: &Array2<f64>) -> Result<(Array4<f64>, Array4<f64>)> {
        self.decoder_jvp(z, v)
    }
}

fn one_row(v: &Array1<f64>) -> Array2<f64> {
    v.view().insert_axis(Axis(0)).to_owned()
}

/// |d decode / d z at `z` along `direction`| as a [C,H,W] image. Exactly
/// linear in the direction magnitude.
pub fn directional_map<D: LatentDecoder>(
    decoder: &D,
    z: &Array1<f64>,
    direction: &Array1<f64>,
) -> Result<Array3<f64>> {
    if z.len() != decoder.latent_dim() || direction.len() != z.len() {
        return Err(Error::Validation(format!(
            "latent length {} / direction length {} for decoder dim {}",
            z.len(),
            direction.len(),
            decoder.latent_dim()
        )));
    }
    let (_, tangent) = decoder.decode_jvp(&one_row(z), &one_row(direction))?;
    Ok(tangent.index_axis(Axis(0), 0).mapv(f64::abs))
}

/// Importance of one trajectory state: the score direction at (z_t, t)
/// pushed through the decoder.
pub fn local_importance<D: LatentDecoder>(
    decoder: &D,
    predictor: &NoisePredictor,
    z_t: &Array1<f64>,
    z_y: &Array1<f64>,
    t: usize,
    schedule: &DiffusionSchedule,
    gamma: f64,
) -> Result<Array3<f64>> {
    let ab = schedule.alpha_bar_at(t)?;
    if 1.0 - ab <= 0.0 {
        return Err(Error::Validation(format!(
            "alpha_bar at t={t} is 1; score is undefined"
        )));
    }
    let eps_hat = guided_eps(predictor, &one_row(z_t), &one_row(z_y), &[t], gamma)?;
    let score = eps_hat.row(0).mapv(|e| -e / (1.0 - ab).sqrt());
    directional_map(decoder, z_t, &score)
}

/// Accumulates `local_importance` over one full guided reverse
/// trajectory conditioned on `z_y`. The visited states are exactly those
/// of `sample_latents` for the same RNG stream.
pub fn importance_map_from_latent<D: LatentDecoder>(
    decoder: &D,
    predictor: &NoisePredictor,
    z_y: &Array1<f64>,
    schedule: &DiffusionSchedule,
    gamma: f64,
    rng: &mut ChaCha12Rng,
) -> Result<ImportanceMap> {
    let d = predictor.latent_dim;
    if z_y.len() != d {
        return Err(Error::shape(format!("[{d}]"), format!("[{}]", z_y.len())));
    }
    let (c, h, w) = decoder.image_shape();
    let mut total = Array3::<f64>::zeros((c, h, w));
    let z_y_row = one_row(z_y);
    let mut z = crate::diffusion::standard_normal(rng, 1, d);
    for t in (1..=schedule.t_steps).rev() {
        let eps_hat = guided_eps(predictor, &z, &z_y_row, &[t], gamma)?;
        let ab = schedule.alpha_bar_at(t)?;
        if 1.0 - ab <= 0.0 {
            return Err(Error::Validation(format!(
                "alpha_bar at t={t} is 1; score is undefined"
            )));
        }
        let score = eps_hat.row(0).mapv(|e| -e / (1.0 - ab).sqrt());
        let z1 = z.row(0).to_owned();
        total += &directional_map(decoder, &z1, &score)?;
        z = reverse_step_from_eps(&z, &eps_hat, t, schedule, rng)?;
    }
    Ok(ImportanceMap {
        values: total,
        category_id: None,
        n_averaged: 1,
        normalization: Normalization::Raw,
    })
}

/// Spec-level entry: encode the exemplar, then trace one trajectory.
pub fn importance_map(
    rae: &RAEModel,
    predictor: &NoisePredictor,
    exemplar: &Array4<f64>,
    schedule: &DiffusionSchedule,
    gamma: f64,
    rng: &mut ChaCha12Rng,
) -> Result<ImportanceMap> {
    let z_y = rae.encode(exemplar)?.point().row(0).to_owned();
    importance_map_from_latent(rae, predictor, &z_y, schedule, gamma, rng)
}

/// Mean of `n_variations` independent trajectory maps for one exemplar.
pub fn category_importance_from_latent<D: LatentDecoder>(
    decoder: &D,
    predictor: &NoisePredictor,
    z_y: &Array1<f64>,
    n_variations: usize,
    schedule: &DiffusionSchedule,
    gamma: f64,
    rng: &mut ChaCha12Rng,
) -> Result<ImportanceMap> {
    if n_variations < 1 {
        return Err(Error::Validation(
            "category importance needs at least one variation".into(),
        ));
    }
    let (c, h, w) = decoder.image_shape();
    let mut total = Array3::<f64>::zeros((c, h, w));
    for _ in 0..n_variations {
        let m = importance_map_from_latent(decoder, predictor, z_y, schedule, gamma, rng)?;
        total += &m.values;
    }
    Ok(ImportanceMap {
        values: total / n_variations as f64,
        category_id: None,
        n_averaged: n_variations,
        normalization: Normalization::Raw,
    })
}

/// Spec-level entry: per-category map averaged over fresh trajectories.
pub fn category_importance(
    rae: &RAEModel,
    predictor: &NoisePredictor,
    exemplar: &Array4<f64>,
    n_variations: usize,
    schedule: &DiffusionSchedule,
    gamma: f64,
    rng: &mut ChaCha12Rng,
) -> Result<ImportanceMap> {
    let z_y = rae.encode(exemplar)?.point().row(0).to_owned();
    category_importance_from_latent(rae, predictor, &z_y, n_variations, schedule, gamma, rng)
}
