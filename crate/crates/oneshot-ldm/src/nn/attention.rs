//! Single-head attention over one latent token, with pre-norm, a learned
//! per-feature output gain, and a residual connection.
//!
//! The denoiser treats the whole latent vector as a single token, so the
//! softmax runs over a length-one sequence and its weight is exactly 1.
//! The query/key projections still exist (and are checkpointed) but
//! receive no gradient through the constant softmax.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha12Rng;

use super::norm::{RmsNorm, RmsNormCache};
use super::{init, with_prefix, Linear, Param, ParamRefs};

#[derive(Debug, Clone)]
pub struct AttentionResidual {
    pub norm: RmsNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    /// Per-feature gain on the attention output, before the residual add.
    pub gain: Param,
}

pub struct AttentionCache {
    norm: RmsNormCache,
    xn: Array2<f64>,
    attended: Array2<f64>,
    projected: Array2<f64>,
}

impl AttentionResidual {
    pub fn new(rng: &mut ChaCha12Rng, features: usize, head_dim: usize) -> Self {
        AttentionResidual {
            norm: RmsNorm::new(features),
            wq: Linear::new(rng, features, head_dim, false),
            wk: Linear::new(rng, features, head_dim, false),
            wv: Linear::new(rng, features, head_dim, false),
            wo: Linear::new(rng, head_dim, features, true),
            gain: Param::new(init::ones::<ndarray::Ix1, _>(features).into_dyn()),
        }
    }

    fn gain_view(&self) -> Array1<f64> {
        self.gain
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let (xn, norm) = self.norm.forward(x);
        let q = self.wq.forward(&xn);
        let k = self.wk.forward(&xn);
        let v = self.wv.forward(&xn);
        let head_dim = q.dim().1 as f64;
        // One token: softmax over the single logit is identically 1.
        let mut attended = Array2::<f64>::zeros(v.raw_dim());
        for (bi, mut row) in attended.outer_iter_mut().enumerate() {
            let logit = q.row(bi).dot(&k.row(bi)) / head_dim.sqrt();
            let weight = (logit - logit).exp(); // softmax of a singleton
            row.assign(&v.row(bi));
            row.mapv_inplace(|t| t * weight);
        }
        let projected = self.wo.forward(&attended);
        let y = &(&projected * &self.gain_view()) + x;
        (
            y,
            AttentionCache {
                norm,
                xn,
                attended,
                projected,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache, gy: &Array2<f64>) -> Array2<f64> {
        let gain = self.gain_view();
        let ggain = (gy * &cache.projected).sum_axis(ndarray::Axis(0));
        self.gain
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .zip_mut_with(&ggain, |a, &g| *a += g);
        let gprojected = gy * &gain;
        let g_attended = self.wo.backward(&cache.attended, &gprojected);
        // The softmax weight is constant, so gradients reach only the value
        // path; wq/wk stay at zero gradient.
        let g_xn = self.wv.backward(&cache.xn, &g_attended);
        let gx = self.norm.backward(&cache.norm, &g_xn);
        &gx + gy
    }

    pub fn params(&mut self) -> ParamRefs<'_> {
        let mut out = Vec::new();
        out.extend(with_prefix("norm", self.norm.params()));
        out.extend(with_prefix("wq", self.wq.params()));
        out.extend(with_prefix("wk", self.wk.params()));
        out.extend(with_prefix("wv", self.wv.params()));
        out.extend(with_prefix("wo", self.wo.params()));
        out.push(("gain".to_string(), &mut self.gain));
        out
    }
}
