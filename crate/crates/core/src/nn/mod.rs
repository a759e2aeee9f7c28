//! Minimal CPU neural-network engine: explicit forward/backward layers on
//! `ndarray` tensors, generic over the scalar type.
//!
//! Layers own their weights and gradient buffers; a training step zeroes
//! gradients, runs forward + backward, then applies [`sgd::Sgd`]. Models
//! expose their parameters through [`HasParams`], which drives the
//! optimizer, checkpoint IO, and the finite-difference checks.

pub mod io;
pub mod layers;
pub mod sgd;

use crate::num::Scalar;
use ndarray::{Array4, ArrayViewMutD};
use rand::Rng;

/// Batched feature map `(batch, channels, height, width)`.
pub type Tensor4<S> = Array4<S>;

/// Stable-order access to every trainable parameter and its gradient.
pub trait HasParams<S: Scalar> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<S>, ArrayViewMutD<S>));

    /// Non-trainable state carried in checkpoints (running statistics).
    fn visit_state(&mut self, _f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {}
}

/// Standard normal draw (Box-Muller), deterministic under the given rng.
pub fn randn<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn zero_grads<S: Scalar, M: HasParams<S>>(model: &mut M) {
    model.visit_params(&mut |_, _, mut g| g.fill(S::zero()));
}

pub fn param_count<S: Scalar, M: HasParams<S>>(model: &mut M) -> usize {
    let mut n = 0;
    model.visit_params(&mut |_, v, _| n += v.len());
    n
}

pub fn flatten_params<S: Scalar, M: HasParams<S>>(model: &mut M) -> Vec<S> {
    let mut out = Vec::new();
    model.visit_params(&mut |_, v, _| out.extend(v.iter().cloned()));
    out
}

pub fn flatten_grads<S: Scalar, M: HasParams<S>>(model: &mut M) -> Vec<S> {
    let mut out = Vec::new();
    model.visit_params(&mut |_, _, g| out.extend(g.iter().cloned()));
    out
}

pub fn set_params_from_flat<S: Scalar, M: HasParams<S>>(model: &mut M, flat: &[S]) {
    let mut i = 0;
    model.visit_params(&mut |_, mut v, _| {
        for x in v.iter_mut() {
            *x = flat[i];
            i += 1;
        }
    });
    assert_eq!(i, flat.len(), "flat parameter vector length mismatch");
}
