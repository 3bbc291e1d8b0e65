//! Minimal neural-network building blocks with hand-written backward passes.
//!
//! Everything runs in `f64` on the CPU. Layers expose `forward`
//! (inference), `forward_train` where training-time state differs, and
//! `backward`, which consumes the upstream gradient, accumulates parameter
//! gradients in place and returns the input gradient. Models collect their
//! parameters through [`Param`] visitors so optimizers and checkpoints stay
//! agnostic of concrete architectures.

pub mod act;
pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod linear;
pub mod norm;
pub mod optim;

use ndarray::ArrayD;

pub use attention::AttentionResidual;
pub use conv::{Conv2d, ConvTranspose2d, ZeroPad2d};
pub use linear::Linear;
pub use norm::{BatchNorm2d, GroupNorm, RmsNorm};
pub use optim::{Adam, MomentPair};

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named mutable references to a model's parameters, in a stable order.
///
/// The order defines the optimizer-state alignment and the checkpoint
/// layout, so implementations must keep it fixed across calls.
pub type ParamRefs<'a> = Vec<(String, &'a mut Param)>;

/// Prefix every name in `params` with `prefix.`.
pub fn with_prefix<'a>(prefix: &str, params: ParamRefs<'a>) -> ParamRefs<'a> {
    params
        .into_iter()
        .map(|(name, p)| (format!("{prefix}.{name}"), p))
        .collect()
}

/// Zero the gradients of every parameter in the list.
pub fn zero_grads(params: &mut ParamRefs<'_>) {
    for (_, p) in params.iter_mut() {
        p.zero_grad();
    }
}
