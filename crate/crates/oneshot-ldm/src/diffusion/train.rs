//! Noise-prediction loss and the epoch loop for the diffusion stage.
//!
//! The autoencoder is frozen here by construction: training operates on a
//! `LatentDataset` produced once by the encoder, and the optimizer only
//! ever sees predictor parameters.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::nn::{zero_grads, Adam};
use crate::rae::RAEModel;
use crate::seeds::derive_seed;

use super::predictor::{noise_mse, noise_mse_grad, NoisePredictor};
use super::{noising, standard_normal, DiffusionConfig, DiffusionSchedule, GuidanceConfig};

/// The random draws behind one training step, exposed so tests can
/// reproduce the exact degraded batch from the same RNG stream.
pub struct NoisingDraws {
    pub t: Vec<usize>,
    pub eps: Array2<f64>,
    pub z_t: Array2<f64>,
    pub z_y_masked: Array2<f64>,
}

/// Draw order: per-sample timesteps, then the noise matrix (row by row),
/// then the per-sample conditioning-dropout coin flips.
pub fn draw_noising_batch(
    z0: &Array2<f64>,
    z_y: &Array2<f64>,
    schedule: &DiffusionSchedule,
    cond_dropout_prob: f64,
    rng: &mut ChaCha12Rng,
) -> Result<NoisingDraws> {
    if z_y.raw_dim() != z0.raw_dim() {
        return Err(Error::shape(
            format!("{:?}", z0.raw_dim()),
            format!("{:?}", z_y.raw_dim()),
        ));
    }
    let b = z0.nrows();
    let t: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=schedule.t_steps)).collect();
    let eps = standard_normal(rng, b, z0.ncols());
    let z_t = noising(z0, &t, &eps, schedule)?;
    let mut z_y_masked = z_y.clone();
    for bi in 0..b {
        if rng.gen::<f64>() < cond_dropout_prob {
            z_y_masked.row_mut(bi).fill(0.0);
        }
    }
    Ok(NoisingDraws {
        t,
        eps,
        z_t,
        z_y_masked,
    })
}

fn check_finite_loss(loss: f64, draws: &NoisingDraws, pred: &Array2<f64>) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let abs_max = |a: &Array2<f64>| a.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    Err(Error::Training {
        message: "non-finite diffusion loss".into(),
        diagnostics: vec![
            format!("loss = {loss}"),
            format!("|z_t| max = {:.3e}", abs_max(&draws.z_t)),
            format!("|pred| max = {:.3e}", abs_max(pred)),
        ],
    })
}

/// Simplified denoising loss: degrade z0 at a random timestep, predict
/// the injected noise, return the mean per-sample squared error.
pub fn ddpm_loss(
    predictor: &NoisePredictor,
    z0: &Array2<f64>,
    z_y: &Array2<f64>,
    schedule: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let draws = draw_noising_batch(z0, z_y, schedule, guidance.cond_dropout_prob, rng)?;
    let pred = predictor.forward(&draws.z_t, &draws.z_y_masked, &draws.t)?;
    let loss = noise_mse(&pred, &draws.eps);
    check_finite_loss(loss, &draws, &pred)?;
    Ok(loss)
}

/// As `ddpm_loss` but also accumulates predictor parameter gradients.
pub fn ddpm_loss_and_grad(
    predictor: &mut NoisePredictor,
    z0: &Array2<f64>,
    z_y: &Array2<f64>,
    schedule: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let draws = draw_noising_batch(z0, z_y, schedule, guidance.cond_dropout_prob, rng)?;
    let (pred, cache) = predictor.forward_cached(&draws.z_t, &draws.z_y_masked, &draws.t)?;
    let loss = noise_mse(&pred, &draws.eps);
    check_finite_loss(loss, &draws, &pred)?;
    let gpred = noise_mse_grad(&pred, &draws.eps);
    predictor.backward(&cache, &gpred);
    Ok(loss)
}

/// One optimizer step on a latent batch.
pub fn ldm_step(
    predictor: &mut NoisePredictor,
    opt: &mut Adam,
    z0: &Array2<f64>,
    z_y: &Array2<f64>,
    schedule: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    zero_grads(&mut predictor.params());
    let loss = ddpm_loss_and_grad(predictor, z0, z_y, schedule, guidance, rng)?;
    opt.step(&mut predictor.params());
    Ok(loss)
}

/// Encoded training corpus for the diffusion stage: one latent row per
/// variation image, plus each category's exemplar latent.
#[derive(Debug, Clone)]
pub struct LatentDataset {
    pub z: Array2<f64>,
    pub labels: Vec<usize>,
    pub exemplar_z: BTreeMap<usize, Array1<f64>>,
}

impl LatentDataset {
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn latent_dim(&self) -> usize {
        self.z.ncols()
    }

    /// (z0, z_y) matrices for the given variation rows.
    pub fn batch(&self, rows: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
        let d = self.latent_dim();
        let mut z0 = Array2::<f64>::zeros((rows.len(), d));
        let mut z_y = Array2::<f64>::zeros((rows.len(), d));
        for (k, &i) in rows.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::Validation(format!(
                    "latent row {i} out of range (have {})",
                    self.len()
                )));
            }
            let label = self.labels[i];
            let ex = self.exemplar_z.get(&label).ok_or_else(|| {
                Error::Validation(format!("no exemplar latent for category {label}"))
            })?;
            z0.row_mut(k).assign(&self.z.row(i));
            z_y.row_mut(k).assign(ex);
        }
        Ok((z0, z_y))
    }
}

/// Encode every variation and exemplar of a split with the frozen
/// encoder. For stochastic (Gaussian) encoders the mean is used.
pub fn encode_dataset(model: &RAEModel, split: &DatasetSplit) -> Result<LatentDataset> {
    let d = model.config.latent_dim;
    let mut labels = Vec::new();
    let mut images: Vec<&ndarray::Array3<f64>> = Vec::new();
    for ep in &split.episodes {
        for v in &ep.variations {
            labels.push(ep.category_id);
            images.push(v);
        }
    }
    let mut z = Array2::<f64>::zeros((images.len(), d));
    for (start, chunk) in images.chunks(64).enumerate().map(|(i, c)| (i * 64, c)) {
        let mut batch = Array4::<f64>::zeros((
            chunk.len(),
            chunk[0].dim().0,
            chunk[0].dim().1,
            chunk[0].dim().2,
        ));
        for (k, img) in chunk.iter().enumerate() {
            batch.index_axis_mut(Axis(0), k).assign(img);
        }
        let encoded = model.encode(&batch)?;
        z.slice_mut(ndarray::s![start..start + chunk.len(), ..])
            .assign(encoded.point());
    }
    let mut exemplar_z = BTreeMap::new();
    for ep in &split.episodes {
        let mut batch = Array4::<f64>::zeros((
            1,
            ep.exemplar.dim().0,
            ep.exemplar.dim().1,
            ep.exemplar.dim().2,
        ));
        batch.index_axis_mut(Axis(0), 0).assign(&ep.exemplar);
        let encoded = model.encode(&batch)?;
        exemplar_z.insert(ep.category_id, encoded.point().row(0).to_owned());
    }
    Ok(LatentDataset {
        z,
        labels,
        exemplar_z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdmEpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

/// Epoch-level training driver. Cloning the trainer at an epoch boundary
/// and resuming yields bit-identical parameters, since every epoch seeds
/// its own data and step RNG streams from (base_seed, epoch index).
#[derive(Debug, Clone)]
pub struct LdmTrainer {
    pub predictor: NoisePredictor,
    pub opt: Adam,
    pub config: DiffusionConfig,
    pub schedule: DiffusionSchedule,
    pub base_seed: u64,
    pub epochs_done: usize,
}

impl LdmTrainer {
    pub fn new(config: &DiffusionConfig, base_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(base_seed, "ldm/init"));
        let predictor = NoisePredictor::new(&mut rng, config)?;
        let opt = Adam::adamw(config.learning_rate, config.weight_decay);
        let schedule = config.schedule()?;
        Ok(LdmTrainer {
            predictor,
            opt,
            config: config.clone(),
            schedule,
            base_seed,
            epochs_done: 0,
        })
    }

    pub fn run_epoch(&mut self, data: &LatentDataset) -> Result<LdmEpochStats> {
        if data.is_empty() {
            return Err(Error::Validation("latent dataset is empty".into()));
        }
        if data.latent_dim() != self.config.latent_dim {
            return Err(Error::shape(
                format!("[N, {}]", self.config.latent_dim),
                format!("[N, {}]", data.latent_dim()),
            ));
        }
        let epoch = self.epochs_done;
        let lr = self
            .config
            .lr_schedule
            .lr_at(self.config.learning_rate, epoch);
        self.opt.lr = lr;

        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut perm_rng =
            ChaCha12Rng::seed_from_u64(derive_seed(self.base_seed, &format!("ldm/data/{epoch}")));
        order.shuffle(&mut perm_rng);
        let mut step_rng =
            ChaCha12Rng::seed_from_u64(derive_seed(self.base_seed, &format!("ldm/step/{epoch}")));

        let bs = self.config.batch_size.min(data.len());
        let mut total = 0.0;
        let mut steps = 0usize;
        for rows in order.chunks(bs) {
            let (z0, z_y) = data.batch(rows)?;
            total += ldm_step(
                &mut self.predictor,
                &mut self.opt,
                &z0,
                &z_y,
                &self.schedule,
                &self.config.guidance,
                &mut step_rng,
            )?;
            steps += 1;
        }
        self.epochs_done += 1;
        Ok(LdmEpochStats {
            epoch,
            loss: total / steps.max(1) as f64,
            learning_rate: lr,
        })
    }
}

/// Train a fresh predictor on an encoded dataset for the configured
/// number of epochs.
pub fn train_ldm(
    data: &LatentDataset,
    config: &DiffusionConfig,
    base_seed: u64,
) -> Result<(LdmTrainer, Vec<LdmEpochStats>)> {
    let mut trainer = LdmTrainer::new(config, base_seed)?;
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        log.push(trainer.run_epoch(data)?);
    }
    Ok((trainer, log))
}
