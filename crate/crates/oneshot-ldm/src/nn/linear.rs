//! Dense layer.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha12Rng;

use super::{init, Param, ParamRefs};

/// Fully connected layer `y = x W^T + b` over batches of row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    /// Weight of shape `[out_features, in_features]`.
    pub weight: Param,
    /// Optional bias of shape `[out_features]`.
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha12Rng, in_features: usize, out_features: usize, bias: bool) -> Self {
        let weight = init::uniform_fan_in(rng, (out_features, in_features), in_features);
        let bias = bias.then(|| {
            Param::new(
                init::uniform_fan_in::<ndarray::Ix1, _>(rng, out_features, in_features).into_dyn(),
            )
        });
        Linear {
            weight: Param::new(weight.into_dyn()),
            bias,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    /// `x`: `[batch, in_features]` -> `[batch, out_features]`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut y = x.dot(&w.t());
        if let Some(b) = &self.bias {
            let b = b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            y += &b;
        }
        y
    }

    /// Accumulates parameter gradients and returns dL/dx.
    ///
    /// `x` must be the same activation that produced the forward output.
    pub fn backward(&mut self, x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let gx = gy.dot(&w);
        let gw = gy.t().dot(x);
        {
            let mut wg = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            wg += &gw;
        }
        if let Some(b) = &mut self.bias {
            let gb: Array1<f64> = gy.sum_axis(Axis(0));
            let mut bg = b
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            bg += &gb;
        }
        gx
    }

    pub fn params(&mut self) -> ParamRefs<'_> {
        let mut out: ParamRefs<'_> = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            out.push(("bias".to_string(), b));
        }
        out
    }
}
