use ndarray::{ArrayD, IxDyn};

use crate::rng::RandomSource;

/// Negative-slope parameter of the Kaiming bound. `√5` gives
/// `b = 1/sqrt(fan_in)`, the usual default for convolution layers; the
/// ReLU-gain bound `sqrt(6/fan_in)` doubles the variance at every linear
/// convolution and makes an untrained residual SR network's output explode.
const KAIMING_A: f64 = 2.236_067_977_499_79;

/// Kaiming-uniform fan-in weights: `U(-b, b)` with
/// `b = sqrt(6 / ((1 + a²) fan_in))`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut RandomSource) -> ArrayD<f64> {
    let bound = (6.0 / ((1.0 + KAIMING_A * KAIMING_A) * fan_in as f64)).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.uniform(-bound, bound))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}
