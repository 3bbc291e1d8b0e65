//! Regularized autoencoder: the first stage of the pipeline.
//!
//! Convolutional encoder to a flat latent code and a transposed-conv
//! decoder back to a 48x48 grayscale image. The latent space is shaped
//! during training by the losses in [`crate::regularizers`]; the decoder
//! additionally exposes a forward-mode derivative used by the attribution
//! maps.

mod train;

pub use train::{rae_step, train_rae, EpochStats, RaeTrainer, StepStats};

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{act, with_prefix, BatchNorm2d, Conv2d, ConvTranspose2d, Linear, ParamRefs, ZeroPad2d};
use crate::regularizers::GaussianLatent;

/// Learning-rate schedule applied at epoch boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Divide the learning rate by `divide_by` every `every_epochs`.
    StepDecay { every_epochs: usize, divide_by: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base_lr: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base_lr,
            LrSchedule::StepDecay {
                every_epochs,
                divide_by,
            } => base_lr / divide_by.powi((epoch / every_epochs) as i32),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LrSchedule::StepDecay {
            every_epochs,
            divide_by,
        } = self
        {
            if *every_epochs == 0 {
                return Err(Error::Config("lr schedule every_epochs must be >= 1".into()));
            }
            if !(*divide_by > 0.0 && divide_by.is_finite()) {
                return Err(Error::Config("lr schedule divide_by must be positive".into()));
            }
        }
        Ok(())
    }
}

fn default_image_size() -> (usize, usize) {
    (48, 48)
}
fn default_channels() -> [usize; 4] {
    [16, 32, 64, 128]
}
fn default_epochs() -> usize {
    200
}
fn default_batch_size() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-4
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_schedule() -> LrSchedule {
    LrSchedule::Constant
}

/// Autoencoder hyperparameters. Defaults follow the reference setup:
/// latent 128 for the drawing set (64 for the handwritten-character set,
/// which also uses `StepDecay { every_epochs: 70, divide_by: 4 }` and 300
/// epochs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RAEConfig {
    pub latent_dim: usize,
    pub image_size: (usize, usize),
    pub channels: [usize; 4],
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for RAEConfig {
    fn default() -> Self {
        RAEConfig {
            latent_dim: 128,
            image_size: default_image_size(),
            channels: default_channels(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_lr(),
            weight_decay: default_weight_decay(),
            lr_schedule: default_schedule(),
        }
    }
}

impl RAEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if self.image_size != (48, 48) {
            return Err(Error::Config(format!(
                "encoder layout expects 48x48 inputs, got {}x{}",
                self.image_size.0, self.image_size.1
            )));
        }
        let c = &self.channels;
        if c.iter().any(|&w| w == 0) || !(c[0] <= c[1] && c[1] <= c[2] && c[2] <= c[3]) {
            return Err(Error::Config(format!(
                "channel widths must be positive and non-decreasing, got {c:?}"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Flattened size after the four strided convolutions.
    fn bottleneck_elems(&self) -> usize {
        self.channels[3] * 3 * 3
    }
}

/// Encoder or decoder output of [`RAEModel::encode`].
#[derive(Debug, Clone)]
pub enum LatentBatch {
    Deterministic(Array2<f64>),
    Gaussian(GaussianLatent),
}

impl LatentBatch {
    /// The point code downstream consumers use outside training: the
    /// deterministic code, or the Gaussian mean.
    pub fn point(&self) -> &Array2<f64> {
        match self {
            LatentBatch::Deterministic(z) => z,
            LatentBatch::Gaussian(g) => &g.mean,
        }
    }
}

/// Four conv blocks (stride 2, batch norm, rectifier) and a final dense
/// layer; spatial chain 48 -> 24 -> 12 -> 7 -> 3.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub conv: [Conv2d; 4],
    pub bn: [BatchNorm2d; 4],
    pub fc: Linear,
}

/// Dense-free mirror: a 1x1-to-6x6 transposed conv, three stride-2
/// transposed convs, asymmetric zero pad to 49, and a final conv with
/// sigmoid; spatial chain 1 -> 6 -> 12 -> 24 -> 48 -> 49 -> 48.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub ct: [ConvTranspose2d; 4],
    pub bn: [BatchNorm2d; 4],
    pub pad: ZeroPad2d,
    pub out: Conv2d,
}

#[derive(Debug, Clone)]
pub struct RAEModel {
    pub config: RAEConfig,
    /// When set, the encoder emits (mean, log variance) for reparametrized
    /// sampling instead of a point code.
    pub gaussian_head: bool,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

pub struct EncoderCache {
    x: Array4<f64>,
    conv_out: Vec<Array4<f64>>,
    bn_caches: Vec<crate::nn::norm::BatchNorm2dCache>,
    bn_out: Vec<Array4<f64>>,
    relu_out: Vec<Array4<f64>>,
    flat: Array2<f64>,
}

pub struct DecoderCache {
    z4: Array4<f64>,
    bn_caches: Vec<crate::nn::norm::BatchNorm2dCache>,
    bn_out: Vec<Array4<f64>>,
    relu_out: Vec<Array4<f64>>,
    padded: Array4<f64>,
    preact: Array4<f64>,
}

impl RAEModel {
    pub fn new(rng: &mut ChaCha12Rng, config: &RAEConfig, gaussian_head: bool) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3, c4] = config.channels;
        let d = config.latent_dim;
        let fc_out = if gaussian_head { 2 * d } else { d };
        let encoder = Encoder {
            conv: [
                Conv2d::new(rng, 1, c1, 4, 2, 1, false),
                Conv2d::new(rng, c1, c2, 4, 2, 1, false),
                Conv2d::new(rng, c2, c3, 4, 2, 2, false),
                Conv2d::new(rng, c3, c4, 4, 2, 1, false),
            ],
            bn: [
                BatchNorm2d::new(c1),
                BatchNorm2d::new(c2),
                BatchNorm2d::new(c3),
                BatchNorm2d::new(c4),
            ],
            fc: Linear::new(rng, config.bottleneck_elems(), fc_out, true),
        };
        let decoder = Decoder {
            ct: [
                ConvTranspose2d::new(rng, d, c4, 6, 1, 0, false),
                ConvTranspose2d::new(rng, c4, c3, 4, 2, 1, false),
                ConvTranspose2d::new(rng, c3, c2, 4, 2, 1, false),
                ConvTranspose2d::new(rng, c2, c1, 4, 2, 1, false),
            ],
            bn: [
                BatchNorm2d::new(c4),
                BatchNorm2d::new(c3),
                BatchNorm2d::new(c2),
                BatchNorm2d::new(c1),
            ],
            pad: ZeroPad2d::new(0, 1, 0, 1),
            out: Conv2d::new(rng, c1, 1, 4, 1, 1, true),
        };
        Ok(RAEModel {
            config: config.clone(),
            gaussian_head,
            encoder,
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_image_shape(&self, x: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 1 || (h, w) != self.config.image_size {
            return Err(Error::shape(
                format!("[B, 1, {}, {}]", self.config.image_size.0, self.config.image_size.1),
                format!("[B, {c}, {h}, {w}]"),
            ));
        }
        Ok(())
    }

    fn check_latent_shape(&self, z: &Array2<f64>) -> Result<()> {
        if z.ncols() != self.config.latent_dim {
            return Err(Error::shape(
                format!("[B, {}]", self.config.latent_dim),
                format!("[B, {}]", z.ncols()),
            ));
        }
        Ok(())
    }

    fn split_gaussian(&self, raw: Array2<f64>) -> LatentBatch {
        if self.gaussian_head {
            let d = self.config.latent_dim;
            let mean = raw.slice(ndarray::s![.., ..d]).to_owned();
            let log_variance = raw.slice(ndarray::s![.., d..]).to_owned();
            LatentBatch::Gaussian(GaussianLatent {
                mean,
                log_variance,
            })
        } else {
            LatentBatch::Deterministic(raw)
        }
    }

    /// Inference-mode encoding using batch-norm running statistics.
    pub fn encode(&self, x: &Array4<f64>) -> Result<LatentBatch> {
        self.check_image_shape(x)?;
        let e = &self.encoder;
        let mut h = x.clone();
        for i in 0..4 {
            h = act::relu(&e.bn[i].forward_eval(&e.conv[i].forward(&h)));
        }
        let b = h.dim().0;
        let flat = h
            .into_shape_with_order((b, self.config.bottleneck_elems()))
            .unwrap();
        Ok(self.split_gaussian(e.fc.forward(&flat)))
    }

    /// Training-mode encoding: batch statistics, caches for backward.
    pub fn encode_train(&mut self, x: &Array4<f64>) -> Result<(LatentBatch, EncoderCache)> {
        self.check_image_shape(x)?;
        let e = &mut self.encoder;
        let mut conv_out = Vec::with_capacity(4);
        let mut bn_caches = Vec::with_capacity(4);
        let mut bn_out = Vec::with_capacity(4);
        let mut relu_out = Vec::with_capacity(4);
        let mut h = x.clone();
        for i in 0..4 {
            let c = e.conv[i].forward(&h);
            let (bno, bnc) = e.bn[i].forward_train(&c);
            let r = act::relu(&bno);
            conv_out.push(c);
            bn_caches.push(bnc);
            bn_out.push(bno);
            relu_out.push(r.clone());
            h = r;
        }
        let b = h.dim().0;
        let flat = h
            .into_shape_with_order((b, self.config.bottleneck_elems()))
            .unwrap();
        let raw = e.fc.forward(&flat);
        let cache = EncoderCache {
            x: x.clone(),
            conv_out,
            bn_caches,
            bn_out,
            relu_out,
            flat,
        };
        Ok((self.split_gaussian(raw), cache))
    }

    /// Backward through the encoder. `graw` has width d (or 2d with the
    /// Gaussian head: mean gradient then log-variance gradient).
    pub fn encoder_backward(&mut self, cache: &EncoderCache, graw: &Array2<f64>) -> Array4<f64> {
        let e = &mut self.encoder;
        let gflat = e.fc.backward(&cache.flat, graw);
        let (b, _) = gflat.dim();
        let c4 = self.config.channels[3];
        let mut g = gflat.into_shape_with_order((b, c4, 3, 3)).unwrap();
        for i in (0..4).rev() {
            g = act::relu_backward(&cache.bn_out[i], &g);
            g = e.bn[i].backward(&cache.bn_caches[i], &g);
            let input = if i == 0 { &cache.x } else { &cache.relu_out[i - 1] };
            g = e.conv[i].backward(input, &g);
        }
        let _ = &cache.conv_out;
        g
    }

    /// Inference-mode decoding; outputs lie strictly inside (0, 1).
    pub fn decode(&self, z: &Array2<f64>) -> Result<Array4<f64>> {
        self.check_latent_shape(z)?;
        let d = &self.decoder;
        let (b, dim) = z.dim();
        let mut h = z.clone().into_shape_with_order((b, dim, 1, 1)).unwrap();
        for i in 0..4 {
            h = act::relu(&d.bn[i].forward_eval(&d.ct[i].forward(&h)));
        }
        let padded = d.pad.forward(&h);
        Ok(act::sigmoid(&d.out.forward(&padded)))
    }

    /// Training-mode decoding with caches.
    pub fn decode_train(&mut self, z: &Array2<f64>) -> Result<(Array4<f64>, DecoderCache)> {
        self.check_latent_shape(z)?;
        let d = &mut self.decoder;
        let (b, dim) = z.dim();
        let z4 = z.clone().into_shape_with_order((b, dim, 1, 1)).unwrap();
        let mut bn_caches = Vec::with_capacity(4);
        let mut bn_out = Vec::with_capacity(4);
        let mut relu_out = Vec::with_capacity(4);
        let mut h = z4.clone();
        for i in 0..4 {
            let c = d.ct[i].forward(&h);
            let (bno, bnc) = d.bn[i].forward_train(&c);
            let r = act::relu(&bno);
            bn_caches.push(bnc);
            bn_out.push(bno);
            relu_out.push(r.clone());
            h = r;
        }
        let padded = d.pad.forward(&h);
        let preact = d.out.forward(&padded);
        let y = act::sigmoid(&preact);
        let cache = DecoderCache {
            z4,
            bn_caches,
            bn_out,
            relu_out,
            padded,
            preact,
        };
        Ok((y, cache))
    }

    /// Backward through the decoder; returns the latent gradient `[B, d]`.
    pub fn decoder_backward(&mut self, cache: &DecoderCache, gy: &Array4<f64>) -> Array2<f64> {
        let d = &mut self.decoder;
        let go = act::sigmoid_backward(&cache.preact, gy);
        let gp = d.out.backward(&cache.padded, &go);
        let mut g = d.pad.backward(&gp);
        for i in (0..4).rev() {
            g = act::relu_backward(&cache.bn_out[i], &g);
            g = d.bn[i].backward(&cache.bn_caches[i], &g);
            let input = if i == 0 { &cache.z4 } else { &cache.relu_out[i - 1] };
            g = d.ct[i].backward(input, &g);
        }
        let (b, dim, _, _) = g.dim();
        g.into_shape_with_order((b, dim)).unwrap()
    }

    /// Forward-mode directional derivative of the inference decoder:
    /// returns `(decode(z), d/dt decode(z + t v)|_{t=0})`.
    ///
    /// Linear layers propagate the tangent through their bias-free map,
    /// batch norm scales it by its per-channel inference gain, the
    /// rectifier masks it by the primal sign, and the sigmoid scales by
    /// its local slope.
    pub fn decoder_jvp(&self, z: &Array2<f64>, v: &Array2<f64>) -> Result<(Array4<f64>, Array4<f64>)> {
        self.check_latent_shape(z)?;
        if z.shape() != v.shape() {
            return Err(Error::shape(
                format!("{:?}", z.shape()),
                format!("{:?}", v.shape()),
            ));
        }
        let d = &self.decoder;
        let (b, dim) = z.dim();
        let mut h = z.clone().into_shape_with_order((b, dim, 1, 1)).unwrap();
        let mut t = v.clone().into_shape_with_order((b, dim, 1, 1)).unwrap();
        for i in 0..4 {
            let c = d.ct[i].forward(&h);
            let tc = d.ct[i].forward_linear(&t);
            let bno = d.bn[i].forward_eval(&c);
            let scale = d.bn[i].eval_scale();
            let mut tb = tc;
            for (ci, mut ch) in tb.axis_iter_mut(ndarray::Axis(1)).enumerate() {
                ch.mapv_inplace(|x| x * scale[ci]);
            }
            // Rectifier: tangent passes only where the primal is active.
            let mut tr = tb;
            ndarray::Zip::from(&mut tr).and(&bno).for_each(|tv, &pv| {
                if pv <= 0.0 {
                    *tv = 0.0;
                }
            });
            h = act::relu(&bno);
            t = tr;
        }
        let hp = d.pad.forward(&h);
        let tp = d.pad.forward(&t);
        let preact = d.out.forward(&hp);
        let tpre = d.out.forward_linear(&tp);
        let y = act::sigmoid(&preact);
        let mut ty = tpre;
        ndarray::Zip::from(&mut ty).and(&y).for_each(|tv, &s| {
            *tv *= s * (1.0 - s);
        });
        Ok((y, ty))
    }

    pub fn params(&mut self) -> ParamRefs<'_> {
        let mut out = Vec::new();
        let enc = self.encoder.conv.iter_mut().zip(self.encoder.bn.iter_mut());
        for (i, (conv, bn)) in enc.enumerate() {
            out.extend(with_prefix(&format!("encoder.conv{i}"), conv.params()));
            out.extend(with_prefix(&format!("encoder.bn{i}"), bn.params()));
        }
        out.extend(with_prefix("encoder.fc", self.encoder.fc.params()));
        let dec = self.decoder.ct.iter_mut().zip(self.decoder.bn.iter_mut());
        for (i, (ct, bn)) in dec.enumerate() {
            out.extend(with_prefix(&format!("decoder.ct{i}"), ct.params()));
            out.extend(with_prefix(&format!("decoder.bn{i}"), bn.params()));
        }
        out.extend(with_prefix("decoder.out", self.decoder.out.params()));
        out
    }

    /// Non-trainable state that must survive checkpoints: batch-norm
    /// running statistics, in parameter-list order.
    pub fn running_stats(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, bn) in self.encoder.bn.iter().enumerate() {
            out.push((format!("encoder.bn{i}.mean"), bn.running_mean.to_vec()));
            out.push((format!("encoder.bn{i}.var"), bn.running_var.to_vec()));
        }
        for (i, bn) in self.decoder.bn.iter().enumerate() {
            out.push((format!("decoder.bn{i}.mean"), bn.running_mean.to_vec()));
            out.push((format!("decoder.bn{i}.var"), bn.running_var.to_vec()));
        }
        out
    }

    pub fn set_running_stats(&mut self, stats: &[(String, Vec<f64>)]) -> Result<()> {
        for (name, values) in stats {
            let (enc, rest) = match name.strip_prefix("encoder.bn") {
                Some(rest) => (true, rest),
                None => (
                    false,
                    name.strip_prefix("decoder.bn").ok_or_else(|| {
                        Error::Validation(format!("unknown running-stat entry {name}"))
                    })?,
                ),
            };
            let (idx_str, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::Validation(format!("malformed stat name {name}")))?;
            let idx: usize = idx_str
                .parse()
                .map_err(|_| Error::Validation(format!("malformed stat name {name}")))?;
            let bn = if enc {
                &mut self.encoder.bn[idx]
            } else {
                &mut self.decoder.bn[idx]
            };
            let target = match field {
                "mean" => &mut bn.running_mean,
                "var" => &mut bn.running_var,
                _ => return Err(Error::Validation(format!("unknown stat field {field}"))),
            };
            if target.len() != values.len() {
                return Err(Error::shape(
                    format!("{}", target.len()),
                    format!("{}", values.len()),
                ));
            }
            *target = ndarray::Array1::from_vec(values.clone());
        }
        Ok(())
    }
}
