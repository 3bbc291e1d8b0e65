//! Adam optimizer, with either L2-regularized or decoupled weight decay.

use ndarray::ArrayD;

use super::ParamRefs;

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct MomentPair {
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

/// Adam. With `decoupled = false` weight decay is added to the gradient
/// (classic L2); with `decoupled = true` it is applied directly to the
/// weights after the adaptive step (AdamW).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
    pub step_count: u64,
    pub moments: Vec<MomentPair>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    /// Adam with weight decay folded into the gradient.
    pub fn with_l2(lr: f64, weight_decay: f64) -> Self {
        Adam {
            weight_decay,
            ..Adam::new(lr)
        }
    }

    /// AdamW: decay applied to the weights, not the gradient.
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Adam {
            weight_decay,
            decoupled: true,
            ..Adam::new(lr)
        }
    }

    /// Applies one update using the gradients currently accumulated in
    /// `params`. Parameter order must stay identical across calls; the
    /// moment buffers are allocated on the first step.
    pub fn step(&mut self, params: &mut ParamRefs<'_>) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(_, p)| MomentPair {
                    m: ArrayD::zeros(p.value.raw_dim()),
                    v: ArrayD::zeros(p.value.raw_dim()),
                })
                .collect();
        }
        assert_eq!(
            self.moments.len(),
            params.len(),
            "optimizer state does not match parameter list"
        );
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((_, p), st) in params.iter_mut().zip(self.moments.iter_mut()) {
            assert_eq!(p.value.shape(), st.m.shape(), "optimizer state shape drift");
            ndarray::Zip::from(&mut st.m)
                .and(&mut st.v)
                .and(&mut p.value)
                .and(&p.grad)
                .for_each(|m, v, w, &g| {
                    let g = if !self.decoupled && self.weight_decay > 0.0 {
                        g + self.weight_decay * *w
                    } else {
                        g
                    };
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    if self.decoupled && self.weight_decay > 0.0 {
                        *w -= self.lr * self.weight_decay * *w;
                    }
                });
        }
    }
}
