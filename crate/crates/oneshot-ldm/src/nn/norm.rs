//! Normalization layers: batch norm over feature maps, group norm and
//! RMS norm over feature vectors.

use ndarray::{Array1, Array2, Array4, Axis};

use super::{init, Param, ParamRefs};

/// Batch normalization over `[b, c, h, w]`, statistics per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Activations batch norm needs again in the backward pass.
pub struct BatchNorm2dCache {
    invstd: Array1<f64>,
    xhat: Array4<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(init::ones::<ndarray::Ix1, _>(channels).into_dyn()),
            beta: Param::new(init::zeros::<ndarray::Ix1, _>(channels).into_dyn()),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Training forward: normalizes with batch statistics and updates the
    /// running estimates (unbiased variance, like the usual framework
    /// convention).
    pub fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, BatchNorm2dCache) {
        let (b, c, h, w) = x.dim();
        let n = (b * h * w) as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut invstd = Array1::<f64>::zeros(c);
        let mut xhat = Array4::<f64>::zeros(x.raw_dim());
        let mut y = Array4::<f64>::zeros(x.raw_dim());
        for ci in 0..c {
            let ch = x.index_axis(Axis(1), ci);
            let mean = ch.sum() / n;
            let var = ch.mapv(|v| (v - mean) * (v - mean)).sum() / n;
            let istd = 1.0 / (var + self.eps).sqrt();
            invstd[ci] = istd;
            let mut xh = xhat.index_axis_mut(Axis(1), ci);
            xh.assign(&ch);
            xh.mapv_inplace(|v| (v - mean) * istd);
            let mut yc = y.index_axis_mut(Axis(1), ci);
            yc.assign(&xh);
            yc.mapv_inplace(|v| v * gamma[ci] + beta[ci]);
            let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
            self.running_mean[ci] = (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
            self.running_var[ci] = (1.0 - self.momentum) * self.running_var[ci] + self.momentum * unbiased;
        }
        (y, BatchNorm2dCache { invstd, xhat })
    }

    /// Inference forward using the running statistics.
    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = x.clone();
        for (ci, mut ch) in y.axis_iter_mut(Axis(1)).enumerate() {
            let istd = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let (m, g, b) = (self.running_mean[ci], gamma[ci], beta[ci]);
            ch.mapv_inplace(|v| (v - m) * istd * g + b);
        }
        y
    }

    /// Per-channel scale of the inference map; its input Jacobian is
    /// diagonal with these values.
    pub fn eval_scale(&self) -> Array1<f64> {
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut s = Array1::<f64>::zeros(gamma.len());
        for ci in 0..gamma.len() {
            s[ci] = gamma[ci] / (self.running_var[ci] + self.eps).sqrt();
        }
        s
    }

    pub fn backward(&mut self, cache: &BatchNorm2dCache, gy: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = gy.dim();
        let n = (b * h * w) as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut gx = Array4::<f64>::zeros(gy.raw_dim());
        let mut ggamma = Array1::<f64>::zeros(c);
        let mut gbeta = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let gyc = gy.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let sum_gy = gyc.sum();
            let sum_gy_xhat = (&gyc * &xh).sum();
            ggamma[ci] = sum_gy_xhat;
            gbeta[ci] = sum_gy;
            let scale = gamma[ci] * cache.invstd[ci] / n;
            let mut gxc = gx.index_axis_mut(Axis(1), ci);
            azip_combine(&mut gxc, &gyc, &xh, |g, x| scale * (n * g - sum_gy - x * sum_gy_xhat));
        }
        accumulate_1d(&mut self.gamma, &ggamma);
        accumulate_1d(&mut self.beta, &gbeta);
        gx
    }

    pub fn params(&mut self) -> ParamRefs<'_> {
        vec![
            ("gamma".to_string(), &mut self.gamma),
            ("beta".to_string(), &mut self.beta),
        ]
    }
}

fn azip_combine(
    out: &mut ndarray::ArrayViewMut3<'_, f64>,
    a: &ndarray::ArrayView3<'_, f64>,
    b: &ndarray::ArrayView3<'_, f64>,
    f: impl Fn(f64, f64) -> f64,
) {
    ndarray::Zip::from(out).and(a).and(b).for_each(|o, &x, &y| *o = f(x, y));
}

fn accumulate_1d(p: &mut Param, g: &Array1<f64>) {
    let mut pg = p.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
    pg += g;
}

/// Group normalization over `[b, f]` feature vectors.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    pub groups: usize,
    pub eps: f64,
}

pub struct GroupNormCache {
    invstd: Array2<f64>,
    xhat: Array2<f64>,
}

impl GroupNorm {
    pub fn new(groups: usize, features: usize) -> Self {
        assert!(features % groups == 0, "features must divide into groups");
        GroupNorm {
            gamma: Param::new(init::ones::<ndarray::Ix1, _>(features).into_dyn()),
            beta: Param::new(init::zeros::<ndarray::Ix1, _>(features).into_dyn()),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, GroupNormCache) {
        let (b, f) = x.dim();
        let gs = f / self.groups;
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut invstd = Array2::<f64>::zeros((b, self.groups));
        let mut xhat = Array2::<f64>::zeros((b, f));
        let mut y = Array2::<f64>::zeros((b, f));
        for bi in 0..b {
            for gi in 0..self.groups {
                let span = gi * gs..(gi + 1) * gs;
                let seg = x.slice(ndarray::s![bi, span.clone()]);
                let mean = seg.sum() / gs as f64;
                let var = seg.mapv(|v| (v - mean) * (v - mean)).sum() / gs as f64;
                let istd = 1.0 / (var + self.eps).sqrt();
                invstd[[bi, gi]] = istd;
                for j in span {
                    let xh = (x[[bi, j]] - mean) * istd;
                    xhat[[bi, j]] = xh;
                    y[[bi, j]] = xh * gamma[j] + beta[j];
                }
            }
        }
        (y, GroupNormCache { invstd, xhat })
    }

    pub fn backward(&mut self, cache: &GroupNormCache, gy: &Array2<f64>) -> Array2<f64> {
        let (b, f) = gy.dim();
        let gs = f / self.groups;
        let n = gs as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut gx = Array2::<f64>::zeros((b, f));
        let mut ggamma = Array1::<f64>::zeros(f);
        let mut gbeta = Array1::<f64>::zeros(f);
        for bi in 0..b {
            for gi in 0..self.groups {
                let span = gi * gs..(gi + 1) * gs;
                let mut sum_gxh = 0.0;
                let mut sum_gxh_xh = 0.0;
                for j in span.clone() {
                    let gxh = gy[[bi, j]] * gamma[j];
                    sum_gxh += gxh;
                    sum_gxh_xh += gxh * cache.xhat[[bi, j]];
                    ggamma[j] += gy[[bi, j]] * cache.xhat[[bi, j]];
                    gbeta[j] += gy[[bi, j]];
                }
                let istd = cache.invstd[[bi, gi]];
                for j in span {
                    let gxh = gy[[bi, j]] * gamma[j];
                    gx[[bi, j]] =
                        istd / n * (n * gxh - sum_gxh - cache.xhat[[bi, j]] * sum_gxh_xh);
                }
            }
        }
        accumulate_1d(&mut self.gamma, &ggamma);
        accumulate_1d(&mut self.beta, &gbeta);
        gx
    }

    pub fn params(&mut self) -> ParamRefs<'_> {
        vec![
            ("gamma".to_string(), &mut self.gamma),
            ("beta".to_string(), &mut self.beta),
        ]
    }
}

/// Root-mean-square normalization over `[b, f]` feature vectors.
#[derive(Debug, Clone)]
pub struct RmsNorm {
    pub gamma: Param,
    pub eps: f64,
}

pub struct RmsNormCache {
    inv_rms: Array1<f64>,
    xhat: Array2<f64>,
}

impl RmsNorm {
    pub fn new(features: usize) -> Self {
        RmsNorm {
            gamma: Param::new(init::ones::<ndarray::Ix1, _>(features).into_dyn()),
            eps: 1e-8,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, RmsNormCache) {
        let (b, f) = x.dim();
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut inv_rms = Array1::<f64>::zeros(b);
        let mut xhat = Array2::<f64>::zeros((b, f));
        let mut y = Array2::<f64>::zeros((b, f));
        for bi in 0..b {
            let row = x.index_axis(Axis(0), bi);
            let ms = row.mapv(|v| v * v).sum() / f as f64;
            let ir = 1.0 / (ms + self.eps).sqrt();
            inv_rms[bi] = ir;
            for j in 0..f {
                let xh = x[[bi, j]] * ir;
                xhat[[bi, j]] = xh;
                y[[bi, j]] = xh * gamma[j];
            }
        }
        (y, RmsNormCache { inv_rms, xhat })
    }

    pub fn backward(&mut self, cache: &RmsNormCache, gy: &Array2<f64>) -> Array2<f64> {
        let (b, f) = gy.dim();
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut gx = Array2::<f64>::zeros((b, f));
        let mut ggamma = Array1::<f64>::zeros(f);
        for bi in 0..b {
            let mut mean_gxh_xh = 0.0;
            for j in 0..f {
                let gxh = gy[[bi, j]] * gamma[j];
                mean_gxh_xh += gxh * cache.xhat[[bi, j]];
                ggamma[j] += gy[[bi, j]] * cache.xhat[[bi, j]];
            }
            mean_gxh_xh /= f as f64;
            for j in 0..f {
                let gxh = gy[[bi, j]] * gamma[j];
                gx[[bi, j]] = cache.inv_rms[bi] * (gxh - cache.xhat[[bi, j]] * mean_gxh_xh);
            }
        }
        accumulate_1d(&mut self.gamma, &ggamma);
        gx
    }

    pub fn params(&mut self) -> ParamRefs<'_> {
        vec![("gamma".to_string(), &mut self.gamma)]
    }
}
