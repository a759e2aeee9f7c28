//! Stochastic gradient descent with momentum and L2 weight decay.

use super::HasParams;
use crate::num::Scalar;

/// `v <- momentum * v + (g + weight_decay * w)`, `w <- w - lr * v`.
pub struct Sgd<S: Scalar> {
    pub weight_decay: f64,
    pub momentum: f64,
    velocity: Vec<S>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(weight_decay: f64, momentum: f64) -> Self {
        Sgd {
            weight_decay,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step<M: HasParams<S>>(&mut self, model: &mut M, lr: f64) {
        if self.velocity.is_empty() {
            let n = super::param_count(model);
            self.velocity = vec![S::zero(); n];
        }
        let wd = S::of_f64(self.weight_decay);
        let mom = S::of_f64(self.momentum);
        let lr = S::of_f64(lr);
        let mut offset = 0usize;
        let vel = &mut self.velocity;
        model.visit_params(&mut |_, mut v, g| {
            for (val, gr) in v.iter_mut().zip(g.iter()) {
                let upd = *gr + wd * *val;
                vel[offset] = mom * vel[offset] + upd;
                *val = *val - lr * vel[offset];
                offset += 1;
            }
        });
        debug_assert_eq!(offset, vel.len());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::HasParams;
    use ndarray::{Array1, ArrayViewMutD};

    struct Quad {
        w: Array1<f64>,
        g: Array1<f64>,
    }

    impl HasParams<f64> for Quad {
        fn visit_params(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>, ArrayViewMutD<f64>)) {
            f(
                "w",
                self.w.view_mut().into_dyn(),
                self.g.view_mut().into_dyn(),
            );
        }
    }

    #[test]
    fn sgd_descends_quadratic() {
        // f(w) = 0.5 * |w|^2, gradient w.
        let mut m = Quad {
            w: Array1::from_vec(vec![2.0, -3.0]),
            g: Array1::zeros(2),
        };
        let mut opt = Sgd::new(0.0, 0.9);
        for _ in 0..250 {
            m.g.assign(&m.w);
            opt.step(&mut m, 0.1);
        }
        assert!(m.w.iter().all(|v| v.abs() < 1e-3), "{:?}", m.w);
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradient() {
        let mut m = Quad {
            w: Array1::from_vec(vec![1.0]),
            g: Array1::zeros(1),
        };
        let mut opt = Sgd::new(0.5, 0.0);
        opt.step(&mut m, 0.1);
        // w - lr * wd * w = 1 - 0.05
        assert!((m.w[0] - 0.95).abs() < 1e-12);
    }
}
