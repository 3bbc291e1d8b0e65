//! 2-D convolution, transposed convolution and zero padding.
//!
//! Both convolutions lower to matrix multiplication through `im2col` /
//! `col2im` over the whole batch, which keeps the hot path inside the
//! BLAS-style `dot` kernel. Tensors are `[batch, channels, height, width]`.

use ndarray::{Array2, Array4, Axis};
use rand_chacha::ChaCha12Rng;

use super::{init, Param, ParamRefs};

/// Gather sliding `k x k` patches of `x` into a `[c*k*k, b*oh*ow]` matrix.
///
/// Output spatial size is `(h + 2p - k) / s + 1`; out-of-bounds taps read 0.
pub fn im2col(x: &Array4<f64>, k: usize, s: usize, p: usize) -> Array2<f64> {
    let (bsz, c, h, w) = x.dim();
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let ncols = bsz * oh * ow;
    let mut cols = Array2::<f64>::zeros((c * k * k, ncols));
    let xs = x.as_slice().expect("im2col input must be standard layout");
    let cs = cols.as_slice_mut().unwrap();
    for b in 0..bsz {
        for ci in 0..c {
            let x_base = (b * c + ci) * h * w;
            for kh in 0..k {
                for kw in 0..k {
                    let row = (ci * k + kh) * k + kw;
                    let row_base = row * ncols + b * oh * ow;
                    for oy in 0..oh {
                        let ih = (oy * s + kh) as isize - p as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = x_base + ih as usize * w;
                        let col_base = row_base + oy * ow;
                        for ox in 0..ow {
                            let iw = (ox * s + kw) as isize - p as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            cs[col_base + ox] = xs[x_row + iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image tensor.
///
/// `shape` is the target `[b, c, h, w]`; the column grid must match what
/// `im2col(target, k, s, p)` would produce.
pub fn col2im(cols: &Array2<f64>, shape: (usize, usize, usize, usize), k: usize, s: usize, p: usize) -> Array4<f64> {
    let (bsz, c, h, w) = shape;
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let ncols = bsz * oh * ow;
    assert_eq!(cols.dim(), (c * k * k, ncols), "col2im: column shape mismatch");
    let mut x = Array4::<f64>::zeros(shape);
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("col2im input must be standard layout");
    for b in 0..bsz {
        for ci in 0..c {
            let x_base = (b * c + ci) * h * w;
            for kh in 0..k {
                for kw in 0..k {
                    let row = (ci * k + kh) * k + kw;
                    let row_base = row * ncols + b * oh * ow;
                    for oy in 0..oh {
                        let ih = (oy * s + kh) as isize - p as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = x_base + ih as usize * w;
                        let col_base = row_base + oy * ow;
                        for ox in 0..ow {
                            let iw = (ox * s + kw) as isize - p as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            xs[x_row + iw as usize] += cs[col_base + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[b, c, h, w]` -> `[c, b*h*w]` with matching column ordering.
fn to_channel_major(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let perm = x.view().permuted_axes([1, 0, 2, 3]);
    let std = perm.as_standard_layout().to_owned();
    std.into_shape_with_order((c, b * h * w)).unwrap()
}

/// `[c, b*h*w]` -> `[b, c, h, w]`, inverse of [`to_channel_major`].
fn from_channel_major(m: Array2<f64>, b: usize, h: usize, w: usize) -> Array4<f64> {
    let c = m.dim().0;
    let x = m.into_shape_with_order((c, b, h, w)).unwrap();
    let perm = x.view().permuted_axes([1, 0, 2, 3]);
    perm.as_standard_layout().to_owned()
}

/// Strided 2-D convolution with square kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// Weight of shape `[c_out, c_in, k, k]`.
    pub weight: Param,
    /// Optional bias of shape `[c_out]`.
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha12Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = c_in * k * k;
        let weight = init::uniform_fan_in(rng, (c_out, c_in, k, k), fan_in);
        let bias = bias
            .then(|| Param::new(init::uniform_fan_in::<ndarray::Ix1, _>(rng, c_out, fan_in).into_dyn()));
        Conv2d {
            weight: Param::new(weight.into_dyn()),
            bias,
            stride,
            padding,
        }
    }

    fn kernel(&self) -> (usize, usize, usize) {
        let sh = self.weight.value.shape();
        (sh[0], sh[1], sh[2])
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, k) = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut y = self.forward_linear(x);
        if let Some(b) = &self.bias {
            let bv = b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for (ci, mut ch) in y.axis_iter_mut(Axis(1)).enumerate() {
                ch += bv[ci];
            }
        }
        y
    }

    /// Forward pass without bias: the Jacobian-vector product in the input.
    pub fn forward_linear(&self, x: &Array4<f64>) -> Array4<f64> {
        let (bsz, c_in, h, w) = x.dim();
        let (c_out, wc_in, k) = self.kernel();
        assert_eq!(c_in, wc_in, "conv input channels");
        let (oh, ow) = self.out_size(h, w);
        let cols = im2col(x, k, self.stride, self.padding);
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .unwrap();
        let y2 = w2.dot(&cols);
        from_channel_major(y2, bsz, oh, ow)
    }

    pub fn backward(&mut self, x: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
        let (bsz, c_in, h, w) = x.dim();
        let (c_out, _, k) = self.kernel();
        let gy2 = to_channel_major(gy);
        let cols = im2col(x, k, self.stride, self.padding);
        let gw2 = gy2.dot(&cols.t());
        {
            let mut wg = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((c_out, c_in * k * k))
                .unwrap();
            wg += &gw2;
        }
        if let Some(b) = &mut self.bias {
            let mut bg = b.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            for (ci, g) in bg.iter_mut().enumerate() {
                *g += gy.index_axis(Axis(1), ci).sum();
            }
        }
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .unwrap();
        let gcols = w2.t().dot(&gy2);
        col2im(&gcols, (bsz, c_in, h, w), k, self.stride, self.padding)
    }

    pub fn params(&mut self) -> ParamRefs<'_> {
        let mut out: ParamRefs<'_> = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            out.push(("bias".to_string(), b));
        }
        out
    }
}

/// Strided 2-D transposed convolution (the adjoint of [`Conv2d`]).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    /// Weight of shape `[c_in, c_out, k, k]`.
    pub weight: Param,
    /// Optional bias of shape `[c_out]`.
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        rng: &mut ChaCha12Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        // Fan-in mirrors the forward conv this layer transposes.
        let fan_in = c_out * k * k;
        let weight = init::uniform_fan_in(rng, (c_in, c_out, k, k), fan_in);
        let bias = bias
            .then(|| Param::new(init::uniform_fan_in::<ndarray::Ix1, _>(rng, c_out, fan_in).into_dyn()));
        ConvTranspose2d {
            weight: Param::new(weight.into_dyn()),
            bias,
            stride,
            padding,
        }
    }

    fn kernel(&self) -> (usize, usize, usize) {
        let sh = self.weight.value.shape();
        (sh[0], sh[1], sh[2])
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, k) = self.kernel();
        (
            (h - 1) * self.stride + k - 2 * self.padding,
            (w - 1) * self.stride + k - 2 * self.padding,
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut y = self.forward_linear(x);
        if let Some(b) = &self.bias {
            let bv = b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for (ci, mut ch) in y.axis_iter_mut(Axis(1)).enumerate() {
                ch += bv[ci];
            }
        }
        y
    }

    /// Forward pass without bias: the Jacobian-vector product in the input.
    pub fn forward_linear(&self, x: &Array4<f64>) -> Array4<f64> {
        let (bsz, c_in, h, w) = x.dim();
        let (wc_in, c_out, k) = self.kernel();
        assert_eq!(c_in, wc_in, "conv transpose input channels");
        let (oh, ow) = self.out_size(h, w);
        let x2 = to_channel_major(x);
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((c_in, c_out * k * k))
            .unwrap();
        let cols = w2.t().dot(&x2);
        col2im(&cols, (bsz, c_out, oh, ow), k, self.stride, self.padding)
    }

    pub fn backward(&mut self, x: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
        let (bsz, c_in, h, w) = x.dim();
        let (_, c_out, k) = self.kernel();
        let x2 = to_channel_major(x);
        let gcols = im2col(gy, k, self.stride, self.padding);
        let gw2 = x2.dot(&gcols.t());
        {
            let mut wg = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((c_in, c_out * k * k))
                .unwrap();
            wg += &gw2;
        }
        if let Some(b) = &mut self.bias {
            let mut bg = b.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            for (ci, g) in bg.iter_mut().enumerate() {
                *g += gy.index_axis(Axis(1), ci).sum();
            }
        }
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((c_in, c_out * k * k))
            .unwrap();
        let gx2 = w2.dot(&gcols);
        from_channel_major(gx2, bsz, h, w)
    }

    pub fn params(&mut self) -> ParamRefs<'_> {
        let mut out: ParamRefs<'_> = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            out.push(("bias".to_string(), b));
        }
        out
    }
}

/// Zero padding with independent left/right/top/bottom widths.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPad2d {
    pub left: usize,
    pub right: usize,
    pub top: usize,
    pub bottom: usize,
}

impl ZeroPad2d {
    pub fn new(left: usize, right: usize, top: usize, bottom: usize) -> Self {
        ZeroPad2d { left, right, top, bottom }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let mut y = Array4::<f64>::zeros((b, c, h + self.top + self.bottom, w + self.left + self.right));
        y.slice_mut(ndarray::s![.., .., self.top..self.top + h, self.left..self.left + w])
            .assign(x);
        y
    }

    pub fn backward(&self, gy: &Array4<f64>) -> Array4<f64> {
        let (b, c, oh, ow) = gy.dim();
        let h = oh - self.top - self.bottom;
        let w = ow - self.left - self.right;
        let _ = (b, c);
        gy.slice(ndarray::s![.., .., self.top..self.top + h, self.left..self.left + w])
            .to_owned()
    }
}
