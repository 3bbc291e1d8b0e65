//! One optimizer step and the epoch loop for the autoencoder stage.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::augment::{two_views, AugmentationConfig};
use crate::data::{BatchIter, DatasetSplit};
use crate::error::{Error, Result};
use crate::nn::{zero_grads, Adam, ParamRefs};
use crate::regularizers::{
    barlow_loss_grad, classification_loss_grad, kl_loss_grad, prototype_loss_grad, quantize,
    simclr_loss_grad, straight_through, vq_loss, vq_loss_grads, GaussianLatent, RegularizerBank,
    RegularizerKind, RegularizerSpec,
};
use crate::seeds::derive_seed;

use super::{EncoderCache, LatentBatch, RAEConfig, RAEModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss_total: f64,
    pub loss_recon: f64,
    pub loss_reg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_recon: f64,
    pub loss_reg: f64,
    pub learning_rate: f64,
}

/// One encoder pass plus what backward needs: the sampled code and, for a
/// Gaussian head, the distribution and the noise that produced the sample.
struct EncodedView {
    z: Array2<f64>,
    cache: EncoderCache,
    gaussian: Option<(GaussianLatent, Array2<f64>)>,
}

fn encode_view(model: &mut RAEModel, x: &Array4<f64>, rng: &mut ChaCha12Rng) -> Result<EncodedView> {
    let (latent, cache) = model.encode_train(x)?;
    Ok(match latent {
        LatentBatch::Deterministic(z) => EncodedView {
            z,
            cache,
            gaussian: None,
        },
        LatentBatch::Gaussian(g) => {
            let (z, eps) = g.sample(rng);
            EncodedView {
                z,
                cache,
                gaussian: Some((g, eps)),
            }
        }
    })
}

/// Routes a code gradient (plus optional direct KL gradients on the
/// distribution) back through one encoder pass. With a Gaussian head the
/// sample gradient splits over mean and log-variance via
/// `z = mean + exp(lv/2) * eps`.
fn backprop_view(
    model: &mut RAEModel,
    view: &EncodedView,
    gz: &Array2<f64>,
    gkl: Option<(&Array2<f64>, &Array2<f64>)>,
) {
    let graw = match &view.gaussian {
        None => gz.clone(),
        Some((g, eps)) => {
            let half_std_eps = g.log_variance.mapv(|lv| 0.5 * (lv / 2.0).exp()) * eps;
            let mut gmean = gz.clone();
            let mut glv = gz * &half_std_eps;
            if let Some((km, kv)) = gkl {
                gmean += km;
                glv += kv;
            }
            concatenate(Axis(1), &[gmean.view(), glv.view()]).unwrap()
        }
    };
    model.encoder_backward(&view.cache, &graw);
}

fn scale_grads(params: ParamRefs<'_>, s: f64) {
    for (_, p) in params {
        p.grad.mapv_inplace(|g| g * s);
    }
}

fn add_scaled(acc: &mut Option<Array2<f64>>, g: &Array2<f64>, s: f64) {
    match acc {
        Some(a) => *a += &g.mapv(|v| v * s),
        None => *acc = Some(g.mapv(|v| v * s)),
    }
}

/// One training step: forward through the configured regularizer paths,
/// reconstruction plus weighted regularizers, one optimizer update.
///
/// `labels` must already be mapped to contiguous class indices when a
/// classification spec is active. `exemplars` is the per-row exemplar
/// image batch; only the prototype path reads it.
#[allow(clippy::too_many_arguments)]
pub fn rae_step(
    model: &mut RAEModel,
    bank: &mut RegularizerBank,
    opt: &mut Adam,
    images: &Array4<f64>,
    labels: &[usize],
    exemplars: Option<&Array4<f64>>,
    aug: &AugmentationConfig,
    rng: &mut ChaCha12Rng,
) -> Result<StepStats> {
    if bank.uses_gaussian_encoder() != model.gaussian_head {
        return Err(Error::Config(
            "model Gaussian head does not match the presence of a kl spec".into(),
        ));
    }
    let b = images.dim().0;
    if labels.len() != b {
        return Err(Error::Validation(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }

    zero_grads(&mut model.params());
    zero_grads(&mut bank.params());

    let (xa, xb) = if bank.uses_two_views() {
        let mut xa = Array4::<f64>::zeros(images.raw_dim());
        let mut xb = Array4::<f64>::zeros(images.raw_dim());
        for bi in 0..b {
            let img = images.index_axis(Axis(0), bi).to_owned();
            let (va, vb) = two_views(&img, aug, rng);
            xa.index_axis_mut(Axis(0), bi).assign(&va);
            xb.index_axis_mut(Axis(0), bi).assign(&vb);
        }
        (xa, Some(xb))
    } else {
        (images.clone(), None)
    };

    let view_a = encode_view(model, &xa, rng)?;
    let view_b = match &xb {
        Some(x) => Some(encode_view(model, x, rng)?),
        None => None,
    };
    let view_y = match bank.spec(RegularizerKind::Prototype) {
        Some(_) => {
            let ex = exemplars.ok_or_else(|| {
                Error::Config("prototype regularizer needs exemplar images in the batch".into())
            })?;
            Some(encode_view(model, ex, rng)?)
        }
        None => None,
    };

    let vq_parts = match bank.spec(RegularizerKind::Vq) {
        Some(_) => {
            let cb = bank.codebook.as_ref().unwrap();
            let (z_q, idx) = quantize(&view_a.z, cb)?;
            Some((z_q, idx))
        }
        None => None,
    };
    let z_dec = match &vq_parts {
        Some((z_q, _)) => straight_through(&view_a.z, z_q),
        None => view_a.z.clone(),
    };

    // Reconstruction always targets the original, un-augmented images.
    let (xhat, dcache) = model.decode_train(&z_dec)?;
    let numel = images.len() as f64;
    let mut gxhat = &xhat - images;
    let loss_recon = gxhat.mapv(|v| v * v).sum() / numel;
    gxhat.mapv_inplace(|v| 2.0 * v / numel);

    // The straight-through estimator forwards the decoder's code gradient
    // onto the continuous code unchanged.
    let mut gz_a = model.decoder_backward(&dcache, &gxhat);
    let mut gz_b: Option<Array2<f64>> = None;
    let mut gz_y: Option<Array2<f64>> = None;
    let mut gkl_mean: Option<Array2<f64>> = None;
    let mut gkl_lv: Option<Array2<f64>> = None;

    let mut loss_reg = 0.0;
    let specs: Vec<RegularizerSpec> = bank.specs.clone();
    for spec in &specs {
        let beta = spec.beta;
        match spec.kind {
            RegularizerKind::None => {}
            RegularizerKind::Kl => {
                let g = view_a
                    .gaussian
                    .as_ref()
                    .map(|(g, _)| g)
                    .expect("gaussian head checked above");
                let (l, gm, glv) = kl_loss_grad(g)?;
                loss_reg += beta * l;
                add_scaled(&mut gkl_mean, &gm, beta);
                add_scaled(&mut gkl_lv, &glv, beta);
            }
            RegularizerKind::Vq => {
                let (z_q, idx) = vq_parts.as_ref().unwrap();
                let cb = bank.codebook.as_mut().unwrap();
                let l = vq_loss(&view_a.z, z_q)?;
                let gz = vq_loss_grads(&view_a.z, z_q, idx, cb)?;
                cb.entries.grad.mapv_inplace(|g| g * beta);
                loss_reg += beta * l;
                gz_a += &gz.mapv(|v| v * beta);
            }
            RegularizerKind::Classification => {
                let head = bank.class_head.as_mut().unwrap();
                let (l, gz) = classification_loss_grad(&view_a.z, labels, head)?;
                scale_grads(head.params(), beta);
                loss_reg += beta * l;
                gz_a += &gz.mapv(|v| v * beta);
            }
            RegularizerKind::Prototype => {
                let vy = view_y.as_ref().unwrap();
                let head = bank.proto_head.as_mut().unwrap();
                let (l, gz, gzy) = prototype_loss_grad(&view_a.z, &vy.z, labels, head)?;
                scale_grads(head.params(), beta);
                loss_reg += beta * l;
                gz_a += &gz.mapv(|v| v * beta);
                add_scaled(&mut gz_y, &gzy, beta);
            }
            RegularizerKind::Simclr => {
                let vb = view_b.as_ref().expect("two-view path checked above");
                let head = bank.simclr_head.as_mut().unwrap();
                let (l, gza, gzb) = simclr_loss_grad(&view_a.z, &vb.z, head, spec.temperature)?;
                scale_grads(head.params(), beta);
                loss_reg += beta * l;
                gz_a += &gza.mapv(|v| v * beta);
                add_scaled(&mut gz_b, &gzb, beta);
            }
            RegularizerKind::Barlow => {
                let vb = view_b.as_ref().expect("two-view path checked above");
                let head = bank.barlow_head.as_mut().unwrap();
                let (l, gza, gzb) = barlow_loss_grad(&view_a.z, &vb.z, head, spec.lambda)?;
                scale_grads(head.params(), beta);
                loss_reg += beta * l;
                gz_a += &gza.mapv(|v| v * beta);
                add_scaled(&mut gz_b, &gzb, beta);
            }
        }
    }

    let loss_total = loss_recon + loss_reg;
    if !loss_total.is_finite() {
        return Err(Error::Training {
            message: "non-finite loss in autoencoder step".into(),
            diagnostics: vec![
                format!("loss_recon = {loss_recon}"),
                format!("loss_reg = {loss_reg}"),
                format!("|z_A| max = {:.3e}", view_a.z.iter().fold(0.0f64, |a, &v| a.max(v.abs()))),
            ],
        });
    }

    backprop_view(
        model,
        &view_a,
        &gz_a,
        match (&gkl_mean, &gkl_lv) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        },
    );
    if let (Some(vb), Some(gb)) = (&view_b, &gz_b) {
        backprop_view(model, vb, gb, None);
    }
    if let (Some(vy), Some(gy)) = (&view_y, &gz_y) {
        backprop_view(model, vy, gy, None);
    }

    let mut params = model.params();
    params.extend(bank.params());
    opt.step(&mut params);

    Ok(StepStats {
        loss_total,
        loss_recon,
        loss_reg,
    })
}

/// Resumable training state for the autoencoder stage. Epochs are the
/// checkpoint unit: every RNG stream is derived from `(base_seed, epoch)`,
/// so a run restored at an epoch boundary continues bit-identically.
#[derive(Clone)]
pub struct RaeTrainer {
    pub model: RAEModel,
    pub bank: RegularizerBank,
    pub opt: Adam,
    pub config: RAEConfig,
    pub augmentation: AugmentationConfig,
    pub base_seed: u64,
    pub epochs_done: usize,
    /// Dataset category id -> contiguous class index for the
    /// classification head.
    pub class_map: BTreeMap<usize, usize>,
}

impl RaeTrainer {
    pub fn new(
        config: &RAEConfig,
        specs: &[RegularizerSpec],
        split: &DatasetSplit,
        augmentation: &AugmentationConfig,
        base_seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        augmentation.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(base_seed, "rae/init"));
        let gaussian = specs.iter().any(|s| s.kind == RegularizerKind::Kl);
        let model = RAEModel::new(&mut rng, config, gaussian)?;
        let class_map: BTreeMap<usize, usize> = split
            .episodes
            .iter()
            .map(|e| e.category_id)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, c)| (c, i))
            .collect();
        let bank = RegularizerBank::new(&mut rng, specs, config.latent_dim, class_map.len())?;
        let opt = Adam::with_l2(config.learning_rate, config.weight_decay);
        Ok(RaeTrainer {
            model,
            bank,
            opt,
            config: config.clone(),
            augmentation: augmentation.clone(),
            base_seed,
            epochs_done: 0,
            class_map,
        })
    }

    /// Batch size clamped to the split so small overfit sets still train.
    fn effective_batch(&self, split: &DatasetSplit) -> usize {
        self.config.batch_size.min(split.n_variations())
    }

    pub fn run_epoch(&mut self, split: &DatasetSplit) -> Result<EpochStats> {
        let epoch = self.epochs_done;
        let lr = self.config.lr_schedule.lr_at(self.config.learning_rate, epoch);
        self.opt.lr = lr;
        let mut data = BatchIter::new(
            split,
            self.effective_batch(split),
            derive_seed(self.base_seed, &format!("rae/data/{epoch}")),
        )?;
        let mut step_rng =
            ChaCha12Rng::seed_from_u64(derive_seed(self.base_seed, &format!("rae/step/{epoch}")));
        let (mut st, mut sr, mut sg) = (0.0, 0.0, 0.0);
        let mut n = 0usize;
        while let Some(batch) = data.next_batch() {
            let labels: Vec<usize> = batch
                .labels
                .iter()
                .map(|l| *self.class_map.get(l).expect("label from split"))
                .collect();
            let stats = rae_step(
                &mut self.model,
                &mut self.bank,
                &mut self.opt,
                &batch.images,
                &labels,
                Some(&batch.exemplars),
                &self.augmentation,
                &mut step_rng,
            )?;
            st += stats.loss_total;
            sr += stats.loss_recon;
            sg += stats.loss_reg;
            n += 1;
        }
        self.epochs_done += 1;
        let nf = n.max(1) as f64;
        Ok(EpochStats {
            epoch,
            loss_total: st / nf,
            loss_recon: sr / nf,
            loss_reg: sg / nf,
            learning_rate: lr,
        })
    }
}

/// Full training run: `config.epochs` epochs over `split`. Returns the
/// trainer (model, bank, optimizer) plus the per-epoch loss log; with
/// `epochs = 0` the model is returned initialized and the log empty.
pub fn train_rae(
    split: &DatasetSplit,
    config: &RAEConfig,
    specs: &[RegularizerSpec],
    augmentation: &AugmentationConfig,
    base_seed: u64,
) -> Result<(RaeTrainer, Vec<EpochStats>)> {
    let mut trainer = RaeTrainer::new(config, specs, split, augmentation, base_seed)?;
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        log.push(trainer.run_epoch(split)?);
    }
    Ok((trainer, log))
}
