//! Element-wise activations as forward/backward function pairs.
//!
//! Backward functions take the forward *input* `x` and the upstream
//! gradient `gy`, and return dL/dx.

use ndarray::{Array, Dimension};

pub fn relu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward<D: Dimension>(x: &Array<f64, D>, gy: &Array<f64, D>) -> Array<f64, D> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

pub fn sigmoid<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(sigmoid_scalar)
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn sigmoid_backward<D: Dimension>(x: &Array<f64, D>, gy: &Array<f64, D>) -> Array<f64, D> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| {
        let s = sigmoid_scalar(v);
        *g *= s * (1.0 - s);
    });
    gx
}

pub fn silu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| v * sigmoid_scalar(v))
}

pub fn silu_backward<D: Dimension>(x: &Array<f64, D>, gy: &Array<f64, D>) -> Array<f64, D> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| {
        let s = sigmoid_scalar(v);
        *g *= s * (1.0 + v * (1.0 - s));
    });
    gx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh approximation of GELU.
pub fn gelu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v.powi(3))).tanh()))
}

pub fn gelu_backward<D: Dimension>(x: &Array<f64, D>, gy: &Array<f64, D>) -> Array<f64, D> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| {
        let u = GELU_C * (v + GELU_A * v.powi(3));
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *g *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    });
    gx
}
