//! Weight initialization.

use ndarray::{Array, Dimension, ShapeBuilder};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
///
/// Matches the default used for dense and convolutional layers in common
/// deep-learning frameworks, so reference hyperparameters transfer.
pub fn uniform_fan_in<D, Sh>(rng: &mut ChaCha12Rng, shape: Sh, fan_in: usize) -> Array<f64, D>
where
    D: Dimension,
    Sh: ShapeBuilder<Dim = D>,
{
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
}

/// All-zeros tensor, for biases and normalization offsets.
pub fn zeros<D, Sh>(shape: Sh) -> Array<f64, D>
where
    D: Dimension,
    Sh: ShapeBuilder<Dim = D>,
{
    Array::zeros(shape)
}

/// All-ones tensor, for normalization gains.
pub fn ones<D, Sh>(shape: Sh) -> Array<f64, D>
where
    D: Dimension,
    Sh: ShapeBuilder<Dim = D>,
{
    Array::ones(shape)
}
