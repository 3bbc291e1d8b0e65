//! The conditional noise predictor: a 1-D U-Net over latent vectors.
//!
//! The latent and the exemplar latent are concatenated at the input and
//! projected onto a width pyramid (default 16d, 8d, 4d, 2d). Each stage
//! runs two residual MLP blocks with a time-embedding scale-shift, an
//! attention residual, and a resampling linear; the up path consumes the
//! down path's activations by concatenation, U-Net style.

use ndarray::{concatenate, s, Array2, Axis};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::attention::AttentionCache;
use crate::nn::norm::{GroupNorm, GroupNormCache};
use crate::nn::{act, with_prefix, AttentionResidual, Linear, ParamRefs};

use super::DiffusionConfig;

/// Groups used by every feature normalization in the predictor.
pub const NORM_GROUPS: usize = 8;

fn hcat(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[a.view(), b.view()]).unwrap()
}

fn hsplit(x: &Array2<f64>, w: usize) -> (Array2<f64>, Array2<f64>) {
    (
        x.slice(s![.., ..w]).to_owned(),
        x.slice(s![.., w..]).to_owned(),
    )
}

/// Sinusoidal position embedding of integer timesteps, `dim` even.
pub fn sinusoidal_embedding(t: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let denom = (half - 1).max(1) as f64;
    let log_base = (10000.0f64).ln();
    let mut out = Array2::<f64>::zeros((t.len(), dim));
    for (bi, &tv) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(i as f64) * log_base / denom).exp();
            let arg = tv as f64 * freq;
            out[[bi, i]] = arg.sin();
            out[[bi, half + i]] = arg.cos();
        }
    }
    out
}

/// Linear, group norm, optional per-sample scale-shift, SiLU.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub lin: Linear,
    pub norm: GroupNorm,
}

pub struct DenseBlockCache {
    x: Array2<f64>,
    norm: GroupNormCache,
    normed: Array2<f64>,
    scale: Option<Array2<f64>>,
    pre_act: Array2<f64>,
}

impl DenseBlock {
    pub fn new(rng: &mut ChaCha12Rng, d_in: usize, d_out: usize) -> Self {
        DenseBlock {
            lin: Linear::new(rng, d_in, d_out, true),
            norm: GroupNorm::new(NORM_GROUPS, d_out),
        }
    }

    pub fn forward(
        &self,
        x: &Array2<f64>,
        scale_shift: Option<(&Array2<f64>, &Array2<f64>)>,
    ) -> (Array2<f64>, DenseBlockCache) {
        let pre_norm = self.lin.forward(x);
        let (normed, nc) = self.norm.forward(&pre_norm);
        let (pre_act, scale) = match scale_shift {
            Some((s, sh)) => (&(&normed * &s.mapv(|v| v + 1.0)) + sh, Some(s.clone())),
            None => (normed.clone(), None),
        };
        let y = act::silu(&pre_act);
        (
            y,
            DenseBlockCache {
                x: x.clone(),
                norm: nc,
                normed,
                scale,
                pre_act,
            },
        )
    }

    /// Returns the input gradient and, when a scale-shift was applied, the
    /// gradients for (scale, shift).
    pub fn backward(
        &mut self,
        cache: &DenseBlockCache,
        gy: &Array2<f64>,
    ) -> (Array2<f64>, Option<(Array2<f64>, Array2<f64>)>) {
        let gpre = act::silu_backward(&cache.pre_act, gy);
        let (gnormed, gss) = match &cache.scale {
            Some(s) => {
                let gscale = &gpre * &cache.normed;
                let gshift = gpre.clone();
                (&gpre * &s.mapv(|v| v + 1.0), Some((gscale, gshift)))
            }
            None => (gpre, None),
        };
        let gpre_norm = self.norm.backward(&cache.norm, &gnormed);
        let gx = self.lin.backward(&cache.x, &gpre_norm);
        (gx, gss)
    }

    pub fn params(&mut self) -> ParamRefs<'_> {
        let mut out = Vec::new();
        out.extend(with_prefix("lin", self.lin.params()));
        out.extend(with_prefix("norm", self.norm.params()));
        out
    }
}

/// Two dense blocks with a time-conditioned scale-shift on the first, plus
/// a (projected) residual connection.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub time_lin: Linear,
    pub block1: DenseBlock,
    pub block2: DenseBlock,
    pub res_proj: Option<Linear>,
}

pub struct ResidualBlockCache {
    x: Array2<f64>,
    t_emb: Array2<f64>,
    silu_t: Array2<f64>,
    b1: DenseBlockCache,
    b2: DenseBlockCache,
}

impl ResidualBlock {
    pub fn new(rng: &mut ChaCha12Rng, d_in: usize, d_out: usize, d_t: usize) -> Self {
        ResidualBlock {
            time_lin: Linear::new(rng, d_t, 2 * d_out, true),
            block1: DenseBlock::new(rng, d_in, d_out),
            block2: DenseBlock::new(rng, d_out, d_out),
            res_proj: if d_in == d_out {
                None
            } else {
                Some(Linear::new(rng, d_in, d_out, true))
            },
        }
    }

    pub fn forward(&self, x: &Array2<f64>, t_emb: &Array2<f64>) -> (Array2<f64>, ResidualBlockCache) {
        let silu_t = act::silu(t_emb);
        let ss = self.time_lin.forward(&silu_t);
        let d_out = ss.ncols() / 2;
        let (scale, shift) = hsplit(&ss, d_out);
        let (h1, b1) = self.block1.forward(x, Some((&scale, &shift)));
        let (h2, b2) = self.block2.forward(&h1, None);
        let res = match &self.res_proj {
            Some(p) => p.forward(x),
            None => x.clone(),
        };
        (
            &h2 + &res,
            ResidualBlockCache {
                x: x.clone(),
                t_emb: t_emb.clone(),
                silu_t,
                b1,
                b2,
            },
        )
    }

    /// Returns (input gradient, time-embedding gradient).
    pub fn backward(
        &mut self,
        cache: &ResidualBlockCache,
        gy: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let (gh1, _) = self.block2.backward(&cache.b2, gy);
        let (gx1, gss) = self.block1.backward(&cache.b1, &gh1);
        let (gscale, gshift) = gss.expect("block1 always gets a scale-shift");
        let gss_full = hcat(&gscale, &gshift);
        let gsilu_t = self.time_lin.backward(&cache.silu_t, &gss_full);
        let gt = act::silu_backward(&cache.t_emb, &gsilu_t);
        let gres = match &mut self.res_proj {
            Some(p) => p.backward(&cache.x, gy),
            None => gy.clone(),
        };
        (&gx1 + &gres, gt)
    }

    pub fn params(&mut self) -> ParamRefs<'_> {
        let mut out = Vec::new();
        out.extend(with_prefix("time_lin", self.time_lin.params()));
        out.extend(with_prefix("block1", self.block1.params()));
        out.extend(with_prefix("block2", self.block2.params()));
        if let Some(p) = &mut self.res_proj {
            out.extend(with_prefix("res_proj", p.params()));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct DownStage {
    pub rb1: ResidualBlock,
    pub rb2: ResidualBlock,
    pub attn: AttentionResidual,
    pub down: Linear,
}

#[derive(Debug, Clone)]
pub struct UpStage {
    pub rb1: ResidualBlock,
    pub rb2: ResidualBlock,
    pub attn: AttentionResidual,
    pub up: Linear,
}

pub struct DownStageCache {
    rb1: ResidualBlockCache,
    rb2: ResidualBlockCache,
    attn: AttentionCache,
    attn_out: Array2<f64>,
}

pub struct UpStageCache {
    cat1_w: usize,
    rb1: ResidualBlockCache,
    cat2_w: usize,
    rb2: ResidualBlockCache,
    attn: AttentionCache,
    attn_out: Array2<f64>,
}

pub struct PredictorCache {
    t_sin: Array2<f64>,
    t_lin1_out: Array2<f64>,
    t_gelu: Array2<f64>,
    t_emb: Array2<f64>,
    x_in: Array2<f64>,
    downs: Vec<DownStageCache>,
    mid_rb1: ResidualBlockCache,
    mid_attn: AttentionCache,
    mid_rb2: ResidualBlockCache,
    ups: Vec<UpStageCache>,
    final_cat_w: usize,
    final_rb: ResidualBlockCache,
    final_h: Array2<f64>,
}

/// The denoiser network. Widths are `width_mults[i] * latent_dim`.
#[derive(Debug, Clone)]
pub struct NoisePredictor {
    pub latent_dim: usize,
    pub time_embed_dim: usize,
    pub widths: [usize; 4],
    pub time_lin1: Linear,
    pub time_lin2: Linear,
    pub init: Linear,
    pub downs: Vec<DownStage>,
    pub mid_rb1: ResidualBlock,
    pub mid_attn: AttentionResidual,
    pub mid_rb2: ResidualBlock,
    pub ups: Vec<UpStage>,
    pub final_rb: ResidualBlock,
    pub final_lin: Linear,
}

impl NoisePredictor {
    pub fn new(rng: &mut ChaCha12Rng, config: &DiffusionConfig) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let d_t = config.time_embed_dim;
        let w: [usize; 4] = core::array::from_fn(|i| config.width_mults[i] * d);
        let mut downs = Vec::new();
        for i in 0..3 {
            downs.push(DownStage {
                rb1: ResidualBlock::new(rng, w[i], w[i], d_t),
                rb2: ResidualBlock::new(rng, w[i], w[i], d_t),
                attn: AttentionResidual::new(rng, w[i], 128),
                down: Linear::new(rng, w[i], w[i + 1], true),
            });
        }
        let mut ups = Vec::new();
        // Mirrors the down pairs in reverse; each block consumes the
        // concatenation of the running activation and one stored skip.
        for i in 0..3 {
            let (d_in, d_out) = (w[2 - i], w[3 - i]);
            ups.push(UpStage {
                rb1: ResidualBlock::new(rng, d_out + d_in, d_out, d_t),
                rb2: ResidualBlock::new(rng, d_out + d_in, d_out, d_t),
                attn: AttentionResidual::new(rng, d_out, 128),
                up: Linear::new(rng, d_out, d_in, true),
            });
        }
        Ok(NoisePredictor {
            latent_dim: d,
            time_embed_dim: d_t,
            widths: w,
            time_lin1: Linear::new(rng, d_t, d_t, true),
            time_lin2: Linear::new(rng, d_t, d_t, true),
            init: Linear::new(rng, 2 * d, w[0], true),
            downs,
            mid_rb1: ResidualBlock::new(rng, w[3], w[3], d_t),
            mid_attn: AttentionResidual::new(rng, w[3], 128),
            mid_rb2: ResidualBlock::new(rng, w[3], w[3], d_t),
            ups,
            final_rb: ResidualBlock::new(rng, 2 * w[0], w[0], d_t),
            final_lin: Linear::new(rng, w[0], d, true),
        })
    }

    fn check_inputs(&self, z_t: &Array2<f64>, z_y: &Array2<f64>, t: &[usize]) -> Result<()> {
        let (b, d) = z_t.dim();
        if d != self.latent_dim {
            return Err(Error::shape(
                format!("[B, {}]", self.latent_dim),
                format!("[B, {d}]"),
            ));
        }
        if z_y.dim() != (b, d) {
            return Err(Error::shape(format!("[{b}, {d}]"), format!("{:?}", z_y.dim())));
        }
        if t.len() != b {
            return Err(Error::Validation(format!(
                "{} timesteps for batch of {b}",
                t.len()
            )));
        }
        Ok(())
    }

    /// Forward pass with caches for backpropagation.
    pub fn forward_cached(
        &self,
        z_t: &Array2<f64>,
        z_y: &Array2<f64>,
        t: &[usize],
    ) -> Result<(Array2<f64>, PredictorCache)> {
        self.check_inputs(z_t, z_y, t)?;
        let t_sin = sinusoidal_embedding(t, self.time_embed_dim);
        let t_lin1_out = self.time_lin1.forward(&t_sin);
        let t_gelu = act::gelu(&t_lin1_out);
        let t_emb = self.time_lin2.forward(&t_gelu);

        let x_in = hcat(z_t, z_y);
        let r = self.init.forward(&x_in);

        let mut x = r.clone();
        let mut skips: Vec<Array2<f64>> = Vec::with_capacity(6);
        let mut down_caches = Vec::with_capacity(3);
        for stage in &self.downs {
            let (h1, c1) = stage.rb1.forward(&x, &t_emb);
            skips.push(h1.clone());
            let (h2, c2) = stage.rb2.forward(&h1, &t_emb);
            skips.push(h2.clone());
            let (a, ca) = stage.attn.forward(&h2);
            x = stage.down.forward(&a);
            down_caches.push(DownStageCache {
                rb1: c1,
                rb2: c2,
                attn: ca,
                attn_out: a,
            });
        }

        let (m1, cm1) = self.mid_rb1.forward(&x, &t_emb);
        let (ma, cma) = self.mid_attn.forward(&m1);
        let (m2, cm2) = self.mid_rb2.forward(&ma, &t_emb);
        x = m2;

        let mut up_caches = Vec::with_capacity(3);
        for stage in &self.ups {
            let s1 = skips.pop().expect("skip available");
            let cat1 = hcat(&x, &s1);
            let (h1, c1) = stage.rb1.forward(&cat1, &t_emb);
            let s2 = skips.pop().expect("skip available");
            let cat2 = hcat(&h1, &s2);
            let (h2, c2) = stage.rb2.forward(&cat2, &t_emb);
            let (a, ca) = stage.attn.forward(&h2);
            x = stage.up.forward(&a);
            up_caches.push(UpStageCache {
                cat1_w: h1.ncols(),
                rb1: c1,
                cat2_w: h2.ncols(),
                rb2: c2,
                attn: ca,
                attn_out: a,
            });
        }
        debug_assert!(skips.is_empty());

        let final_cat = hcat(&x, &r);
        let (fh, cf) = self.final_rb.forward(&final_cat, &t_emb);
        let out = self.final_lin.forward(&fh);
        Ok((
            out,
            PredictorCache {
                t_sin,
                t_lin1_out,
                t_gelu,
                t_emb,
                x_in,
                downs: down_caches,
                mid_rb1: cm1,
                mid_attn: cma,
                mid_rb2: cm2,
                ups: up_caches,
                final_cat_w: x.ncols(),
                final_rb: cf,
                final_h: fh,
            },
        ))
    }

    /// Inference forward pass.
    pub fn forward(&self, z_t: &Array2<f64>, z_y: &Array2<f64>, t: &[usize]) -> Result<Array2<f64>> {
        Ok(self.forward_cached(z_t, z_y, t)?.0)
    }

    /// Backward pass; accumulates parameter gradients and returns the
    /// input gradients (d loss / d z_t, d loss / d z_y).
    pub fn backward(
        &mut self,
        cache: &PredictorCache,
        gout: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let mut gt_emb = Array2::<f64>::zeros(cache.t_emb.raw_dim());

        let gfh = self.final_lin.backward(&cache.final_h, gout);
        let (gfcat, gt) = self.final_rb.backward(&cache.final_rb, &gfh);
        gt_emb += &gt;
        let (mut gx, mut gr) = hsplit(&gfcat, cache.final_cat_w);

        // Up stages in reverse; each emits gradients for the two skips it
        // consumed, recorded for the down pass.
        let mut gskips: Vec<Option<Array2<f64>>> = vec![None; 6];
        for (i, stage) in self.ups.iter_mut().enumerate().rev() {
            let cache_u = &cache.ups[i];
            let ga = stage.up.backward(&cache_u.attn_out, &gx);
            let gh2 = stage.attn.backward(&cache_u.attn, &ga);
            let (gcat2, gt2) = stage.rb2.backward(&cache_u.rb2, &gh2);
            gt_emb += &gt2;
            let (gh1, gs2) = hsplit(&gcat2, cache_u.cat2_w);
            let (gcat1, gt1) = stage.rb1.backward(&cache_u.rb1, &gh1);
            gt_emb += &gt1;
            let (gx_new, gs1) = hsplit(&gcat1, cache_u.cat1_w);
            // Up stage i popped skips (5-2i) then (4-2i).
            gskips[5 - 2 * i] = Some(gs1);
            gskips[4 - 2 * i] = Some(gs2);
            gx = gx_new;
        }

        let (gma, gtm2) = self.mid_rb2.backward(&cache.mid_rb2, &gx);
        gt_emb += &gtm2;
        let gm1 = self.mid_attn.backward(&cache.mid_attn, &gma);
        let (mut g, gtm1) = self.mid_rb1.backward(&cache.mid_rb1, &gm1);
        gt_emb += &gtm1;

        for (j, stage) in self.downs.iter_mut().enumerate().rev() {
            let cache_d = &cache.downs[j];
            let ga = stage.down.backward(&cache_d.attn_out, &g);
            let mut gh2 = stage.attn.backward(&cache_d.attn, &ga);
            if let Some(gs) = &gskips[2 * j + 1] {
                gh2 += gs;
            }
            let (mut gh1, gt2) = stage.rb2.backward(&cache_d.rb2, &gh2);
            gt_emb += &gt2;
            if let Some(gs) = &gskips[2 * j] {
                gh1 += gs;
            }
            let (gx_new, gt1) = stage.rb1.backward(&cache_d.rb1, &gh1);
            gt_emb += &gt1;
            g = gx_new;
        }

        gr += &g;
        let gx_in = self.init.backward(&cache.x_in, &gr);

        let gt_gelu = self.time_lin2.backward(&cache.t_gelu, &gt_emb);
        let gt_lin1 = act::gelu_backward(&cache.t_lin1_out, &gt_gelu);
        let _ = self.time_lin1.backward(&cache.t_sin, &gt_lin1);

        hsplit(&gx_in, self.latent_dim)
    }

    pub fn params(&mut self) -> ParamRefs<'_> {
        let mut out = Vec::new();
        out.extend(with_prefix("time_lin1", self.time_lin1.params()));
        out.extend(with_prefix("time_lin2", self.time_lin2.params()));
        out.extend(with_prefix("init", self.init.params()));
        for (i, s) in self.downs.iter_mut().enumerate() {
            out.extend(with_prefix(&format!("down{i}.rb1"), s.rb1.params()));
            out.extend(with_prefix(&format!("down{i}.rb2"), s.rb2.params()));
            out.extend(with_prefix(&format!("down{i}.attn"), s.attn.params()));
            out.extend(with_prefix(&format!("down{i}.down"), s.down.params()));
        }
        out.extend(with_prefix("mid.rb1", self.mid_rb1.params()));
        out.extend(with_prefix("mid.attn", self.mid_attn.params()));
        out.extend(with_prefix("mid.rb2", self.mid_rb2.params()));
        for (i, s) in self.ups.iter_mut().enumerate() {
            out.extend(with_prefix(&format!("up{i}.rb1"), s.rb1.params()));
            out.extend(with_prefix(&format!("up{i}.rb2"), s.rb2.params()));
            out.extend(with_prefix(&format!("up{i}.attn"), s.attn.params()));
            out.extend(with_prefix(&format!("up{i}.up"), s.up.params()));
        }
        out.extend(with_prefix("final.rb", self.final_rb.params()));
        out.extend(with_prefix("final.lin", self.final_lin.params()));
        out
    }

    /// Total parameter count per top-level component, for architecture
    /// verification.
    pub fn component_param_counts(&mut self) -> Vec<(String, usize)> {
        let mut totals: Vec<(String, usize)> = Vec::new();
        for (name, p) in self.params() {
            let key = name.split('.').next().unwrap().to_string();
            match totals.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += p.len(),
                None => totals.push((key, p.len())),
            }
        }
        totals
    }

    /// Null conditioning token: the zero vector.
    pub fn null_token(&self, batch: usize) -> Array2<f64> {
        Array2::zeros((batch, self.latent_dim))
    }
}

/// Per-sample squared-error against the drawn noise, averaged over the
/// batch: mean_b ||pred_b - eps_b||^2.
pub fn noise_mse(pred: &Array2<f64>, eps: &Array2<f64>) -> f64 {
    let b = pred.nrows().max(1) as f64;
    (pred - eps).mapv(|d| d * d).sum() / b
}

pub(crate) fn noise_mse_grad(pred: &Array2<f64>, eps: &Array2<f64>) -> Array2<f64> {
    let b = pred.nrows().max(1) as f64;
    (pred - eps).mapv(|d| 2.0 * d / b)
}
