//! Layers with explicit forward/backward passes.
//!
//! Convolutions run as im2col + GEMM per sample; every per-sample result is
//! independent of the rest of the batch, so outputs are reproducible across
//! batch compositions (batch normalization is the one deliberate exception).

use super::{randn, Tensor4};
use crate::num::Scalar;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;

/// Numerically stable logistic function.
pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// Same-padding stride-1 convolution; weights are stored flattened as
/// `(out_ch, in_ch * k * k)` so forward is a single GEMM per sample.
///
/// The two scratch vectors hold the im2col matrix and the column gradient;
/// they persist across calls to avoid churning tens of megabytes of
/// allocations per update, which makes `forward` take `&mut self`.
pub struct Conv2d<S: Scalar> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub pad: usize,
    pub w: Array2<S>,
    pub b: Array1<S>,
    pub gw: Array2<S>,
    pub gb: Array1<S>,
    col_scratch: Vec<S>,
    dcol_scratch: Vec<S>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, k: usize, rng: &mut R) -> Self {
        let fan_in = in_ch * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((out_ch, fan_in), |_| S::of_f64(randn(rng) * std));
        Conv2d {
            in_ch,
            out_ch,
            k,
            pad: k / 2,
            w,
            b: Array1::zeros(out_ch),
            gw: Array2::zeros((out_ch, fan_in)),
            gb: Array1::zeros(out_ch),
            col_scratch: Vec::new(),
            dcol_scratch: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor4<S>) -> Tensor4<S> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let mut out = Array4::zeros((n, self.out_ch, h, w));
        let hw = h * w;
        for i in 0..n {
            im2col(
                &x.index_axis(Axis(0), i),
                self.k,
                self.pad,
                &mut self.col_scratch,
            );
            let col = ArrayView2::from_shape((c * self.k * self.k, hw), &self.col_scratch)
                .expect("col shape");
            let y = self.w.dot(&col);
            let mut os = out.index_axis_mut(Axis(0), i);
            let dst = os.as_slice_mut().expect("contiguous output");
            let src = y.as_slice().expect("contiguous gemm result");
            for oc in 0..self.out_ch {
                let b = self.b[oc];
                for (d, s) in dst[oc * hw..(oc + 1) * hw].iter_mut().zip(&src[oc * hw..]) {
                    *d = *s + b;
                }
            }
        }
        out
    }

    /// Accumulates weight gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor4<S>, dy: &Tensor4<S>) -> Tensor4<S> {
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let rows = c * self.k * self.k;
        let mut dx = Array4::zeros(x.raw_dim());
        self.dcol_scratch.resize(rows * hw, S::zero());
        for i in 0..n {
            im2col(
                &x.index_axis(Axis(0), i),
                self.k,
                self.pad,
                &mut self.col_scratch,
            );
            let col = ArrayView2::from_shape((rows, hw), &self.col_scratch).expect("col shape");
            let dys = dy.index_axis(Axis(0), i);
            let owned;
            let dy_slice = match dys.as_slice() {
                Some(s) => s,
                None => {
                    owned = dys.to_owned();
                    owned.as_slice().expect("owned copy is contiguous")
                }
            };
            let dy_mat = ArrayView2::from_shape((self.out_ch, hw), dy_slice).expect("dy reshape");
            self.gw += &dy_mat.dot(&col.t());
            self.gb += &dy_mat.sum_axis(Axis(1));
            let mut dcol = ndarray::ArrayViewMut2::from_shape((rows, hw), &mut self.dcol_scratch)
                .expect("dcol shape");
            ndarray::linalg::general_mat_mul(S::one(), &self.w.t(), &dy_mat, S::zero(), &mut dcol);
            let mut dxs = dx.index_axis_mut(Axis(0), i);
            col2im_add(
                &self.dcol_scratch,
                rows,
                self.k,
                self.pad,
                h,
                w,
                dxs.as_slice_mut().unwrap(),
            );
        }
        dx
    }
}

/// Lower one `(C, H, W)` sample into a `(C*k*k, H*W)` patch matrix stored
/// in `col`. Every cell is written (zero padding included), so the buffer
/// can be reused across calls.
fn im2col<S: Scalar>(x: &ArrayView3<S>, k: usize, pad: usize, col: &mut Vec<S>) {
    let (c, h, w) = x.dim();
    let hw = h * w;
    col.resize(c * k * k * hw, S::zero());
    let owned;
    let xs = match x.as_slice() {
        Some(s) => s,
        None => {
            owned = x.to_owned();
            owned.as_slice().expect("owned copy is contiguous")
        }
    };
    let zero = S::zero();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_base = row * hw;
                let x_lo = pad.saturating_sub(kx).min(w);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                let src_x0 = (x_lo + kx).saturating_sub(pad);
                let len = x_hi.saturating_sub(x_lo);
                for y in 0..h {
                    let dst_row = row_base + y * w;
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        col[dst_row..dst_row + w].fill(zero);
                        continue;
                    }
                    col[dst_row..dst_row + x_lo].fill(zero);
                    if len > 0 {
                        let src = ci * hw + sy as usize * w + src_x0;
                        col[dst_row + x_lo..dst_row + x_lo + len]
                            .copy_from_slice(&xs[src..src + len]);
                    }
                    col[dst_row + x_hi..dst_row + w].fill(zero);
                }
            }
        }
    }
}

/// Scatter-add the adjoint of [`im2col`] back into a `(C, H, W)` gradient.
fn col2im_add<S: Scalar>(
    ds: &[S],
    rows: usize,
    k: usize,
    pad: usize,
    h: usize,
    w: usize,
    dx: &mut [S],
) {
    let hw = h * w;
    let c = rows / (k * k);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_base = row * hw;
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                let src_x0 = x_lo + kx - pad;
                let len = x_hi - x_lo;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = row_base + y * w + x_lo;
                    let dst = ci * hw + sy as usize * w + src_x0;
                    for j in 0..len {
                        dx[dst + j] += ds[src + j];
                    }
                }
            }
        }
    }
}

pub fn relu<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    x.map(|&v| if v > S::zero() { v } else { S::zero() })
}

pub fn relu_backward<S: Scalar>(x: &Tensor4<S>, dy: &Tensor4<S>) -> Tensor4<S> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= S::zero() {
            *d = S::zero();
        }
    });
    dx
}

/// 2x2 max pooling with stride 2. Ties route the gradient to the first
/// maximal element in scan order.
pub fn maxpool2<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::zeros((n, c, oh, ow));
    for i in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for x2 in 0..ow {
                    let a = x[[i, ci, 2 * y, 2 * x2]];
                    let b = x[[i, ci, 2 * y, 2 * x2 + 1]];
                    let d = x[[i, ci, 2 * y + 1, 2 * x2]];
                    let e = x[[i, ci, 2 * y + 1, 2 * x2 + 1]];
                    out[[i, ci, y, x2]] = a.max(b).max(d).max(e);
                }
            }
        }
    }
    out
}

pub fn maxpool2_backward<S: Scalar>(x: &Tensor4<S>, dy: &Tensor4<S>) -> Tensor4<S> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Array4::zeros(x.raw_dim());
    for i in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for x2 in 0..ow {
                    let mut best = (2 * y, 2 * x2);
                    let mut best_v = x[[i, ci, 2 * y, 2 * x2]];
                    for (dy2, dx2) in [(0, 1), (1, 0), (1, 1)] {
                        let v = x[[i, ci, 2 * y + dy2, 2 * x2 + dx2]];
                        if v > best_v {
                            best_v = v;
                            best = (2 * y + dy2, 2 * x2 + dx2);
                        }
                    }
                    dx[[i, ci, best.0, best.1]] += dy[[i, ci, y, x2]];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(i, ci, y, x2)| {
        x[[i, ci, y / 2, x2 / 2]]
    })
}

pub fn upsample2_backward<S: Scalar>(dy: &Tensor4<S>) -> Tensor4<S> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for ci in 0..c {
            for y in 0..h2 {
                for x2 in 0..w2 {
                    dx[[i, ci, y / 2, x2 / 2]] += dy[[i, ci, y, x2]];
                }
            }
        }
    }
    dx
}

/// Concatenate two feature maps along the channel axis.
pub fn concat_channels<S: Scalar>(a: &Tensor4<S>, b: &Tensor4<S>) -> Tensor4<S> {
    let c = ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("channel concat");
    if c.is_standard_layout() {
        c
    } else {
        c.as_standard_layout().to_owned()
    }
}

/// Split a channel-axis gradient back into the two concatenated parts.
pub fn split_channels<S: Scalar>(dy: &Tensor4<S>, first: usize) -> (Tensor4<S>, Tensor4<S>) {
    let a = dy.slice(ndarray::s![.., ..first, .., ..]).to_owned();
    let b = dy.slice(ndarray::s![.., first.., .., ..]).to_owned();
    (a, b)
}

/// Per-channel batch normalization over `(batch, H, W)`.
pub struct BatchNorm2<S: Scalar> {
    pub ch: usize,
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
    pub ggamma: Array1<S>,
    pub gbeta: Array1<S>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
}

pub struct BnCache<S: Scalar> {
    mean: Array1<S>,
    inv_std: Array1<S>,
}

impl<S: Scalar> BatchNorm2<S> {
    pub fn new(ch: usize) -> Self {
        BatchNorm2 {
            ch,
            gamma: Array1::ones(ch),
            beta: Array1::zeros(ch),
            ggamma: Array1::zeros(ch),
            gbeta: Array1::zeros(ch),
            running_mean: Array1::zeros(ch),
            running_var: Array1::ones(ch),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Training-mode forward: normalize by batch statistics (population
    /// variance) and update the running estimates.
    pub fn forward_train(&mut self, x: &Tensor4<S>) -> (Tensor4<S>, BnCache<S>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.ch);
        let m = (n * h * w) as f64;
        let mut mean = Array1::<S>::zeros(c);
        let mut inv_std = Array1::<S>::zeros(c);
        for ci in 0..c {
            let ch_view = x.slice(ndarray::s![.., ci, .., ..]);
            let mut sum = 0.0f64;
            for &v in ch_view.iter() {
                sum += v.as_f64();
            }
            let mu = sum / m;
            let mut ss = 0.0f64;
            for &v in ch_view.iter() {
                let d = v.as_f64() - mu;
                ss += d * d;
            }
            let var = ss / m;
            self.running_mean[ci] =
                (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mu;
            self.running_var[ci] =
                (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var;
            mean[ci] = S::of_f64(mu);
            inv_std[ci] = S::of_f64(1.0 / (var + self.eps).sqrt());
        }
        let mut y = x.clone();
        for ci in 0..c {
            let g = self.gamma[ci];
            let b = self.beta[ci];
            let mu = mean[ci];
            let is = inv_std[ci];
            for v in y.slice_mut(ndarray::s![.., ci, .., ..]).iter_mut() {
                *v = (*v - mu) * is * g + b;
            }
        }
        (y, BnCache { mean, inv_std })
    }

    /// Inference-mode forward using the running statistics.
    pub fn forward_eval(&self, x: &Tensor4<S>) -> Tensor4<S> {
        let (_, c, _, _) = x.dim();
        let mut y = x.clone();
        for ci in 0..c {
            let mu = S::of_f64(self.running_mean[ci]);
            let is = S::of_f64(1.0 / (self.running_var[ci] + self.eps).sqrt());
            let g = self.gamma[ci];
            let b = self.beta[ci];
            for v in y.slice_mut(ndarray::s![.., ci, .., ..]).iter_mut() {
                *v = (*v - mu) * is * g + b;
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor4<S>, cache: &BnCache<S>, dy: &Tensor4<S>) -> Tensor4<S> {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let mut dx = Array4::zeros(x.raw_dim());
        for ci in 0..c {
            let xs = x.slice(ndarray::s![.., ci, .., ..]);
            let dys = dy.slice(ndarray::s![.., ci, .., ..]);
            let mu = cache.mean[ci].as_f64();
            let is = cache.inv_std[ci].as_f64();
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for (&xv, &dv) in xs.iter().zip(dys.iter()) {
                let xhat = (xv.as_f64() - mu) * is;
                sum_dy += dv.as_f64();
                sum_dy_xhat += dv.as_f64() * xhat;
            }
            self.ggamma[ci] += S::of_f64(sum_dy_xhat);
            self.gbeta[ci] += S::of_f64(sum_dy);
            let g = self.gamma[ci].as_f64();
            let scale = g * is / m;
            let mut dxs = dx.slice_mut(ndarray::s![.., ci, .., ..]);
            for ((dxv, &xv), &dv) in dxs.iter_mut().zip(xs.iter()).zip(dys.iter()) {
                let xhat = (xv.as_f64() - mu) * is;
                *dxv = S::of_f64(scale * (m * dv.as_f64() - sum_dy - xhat * sum_dy_xhat));
            }
        }
        dx
    }
}

/// Fully connected layer on `(batch, features)`.
pub struct Dense<S: Scalar> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Array2<S>,
    pub b: Array1<S>,
    pub gw: Array2<S>,
    pub gb: Array1<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        Dense {
            in_dim,
            out_dim,
            w: Array2::from_shape_fn((out_dim, in_dim), |_| S::of_f64(randn(rng) * std)),
            b: Array1::zeros(out_dim),
            gw: Array2::zeros((out_dim, in_dim)),
            gb: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    pub fn backward(&mut self, x: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
        self.gw += &dy.t().dot(x);
        self.gb += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }
}

/// Global average pool `(N, C, H, W)` -> `(N, C)`.
pub fn global_avg_pool<S: Scalar>(x: &Tensor4<S>) -> Array2<S> {
    let (n, c, h, w) = x.dim();
    let scale = S::of_f64(1.0 / (h * w) as f64);
    let mut out = Array2::zeros((n, c));
    for i in 0..n {
        for ci in 0..c {
            let mut s = S::zero();
            for &v in x.slice(ndarray::s![i, ci, .., ..]).iter() {
                s += v;
            }
            out[[i, ci]] = s * scale;
        }
    }
    out
}

pub fn global_avg_pool_backward<S: Scalar>(
    dy: &Array2<S>,
    shape: (usize, usize, usize, usize),
) -> Tensor4<S> {
    let (n, c, h, w) = shape;
    let scale = S::of_f64(1.0 / (h * w) as f64);
    Array4::from_shape_fn((n, c, h, w), |(i, ci, _, _)| dy[[i, ci]] * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: (usize, usize, usize, usize), seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| randn(&mut rng))
    }

    /// Central finite-difference check of the input gradient of
    /// `sum(forward(x) * dy)`.
    fn check_input_grad<F, G>(x: &Tensor4<f64>, forward: F, analytic: G)
    where
        F: Fn(&Tensor4<f64>) -> Tensor4<f64>,
        G: Fn(&Tensor4<f64>, &Tensor4<f64>) -> Tensor4<f64>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let y0 = forward(x);
        let dy = Array4::from_shape_fn(y0.raw_dim(), |_| randn(&mut rng));
        let dx = analytic(x, &dy);
        let loss = |t: &Tensor4<f64>| (&forward(t) * &dy).sum();
        let h = 1e-6;
        let mut xp = x.clone();
        for idx in [(0, 0, 0, 0), (0, 0, 1, 1)] {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let lp = loss(&xp);
            xp[idx] = orig - h;
            let lm = loss(&xp);
            xp[idx] = orig;
            let num = (lp - lm) / (2.0 * h);
            assert!(
                (num - dx[idx]).abs() < 1e-5 * (1.0 + num.abs()),
                "numeric {num} vs analytic {}",
                dx[idx]
            );
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new(1, 1, 3, &mut rng);
        conv.w.fill(0.0);
        conv.w[[0, 4]] = 1.0; // center tap
        conv.b[0] = 0.5;
        let x = rand_tensor((2, 1, 5, 6), 2);
        let y = conv.forward(&x);
        for (yv, xv) in y.iter().zip(x.iter()) {
            assert!((yv - xv - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = std::cell::RefCell::new(Conv2d::<f64>::new(2, 3, 3, &mut rng));
        let x = rand_tensor((2, 2, 4, 5), 4);
        check_input_grad(
            &x,
            |t| conv.borrow().forward(t),
            |t, dy| conv.borrow_mut().backward(t, dy),
        );

        let mut c = conv.into_inner();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dy = Array4::from_shape_fn((2, 3, 4, 5), |_| randn(&mut rng));
        c.gw.fill(0.0);
        c.gb.fill(0.0);
        c.backward(&x, &dy);
        let loss = |c: &Conv2d<f64>| (&c.forward(&x) * &dy).sum();
        let h = 1e-6;
        for idx in [(0usize, 0usize), (2, 17), (1, 9)] {
            let orig = c.w[idx];
            c.w[idx] = orig + h;
            let lp = loss(&c);
            c.w[idx] = orig - h;
            let lm = loss(&c);
            c.w[idx] = orig;
            let num = (lp - lm) / (2.0 * h);
            assert!((num - c.gw[idx]).abs() < 1e-5 * (1.0 + num.abs()));
        }
        let orig = c.b[1];
        c.b[1] = orig + h;
        let lp = loss(&c);
        c.b[1] = orig - h;
        let lm = loss(&c);
        c.b[1] = orig;
        let num = (lp - lm) / (2.0 * h);
        assert!((num - c.gb[1]).abs() < 1e-5 * (1.0 + num.abs()));
    }

    #[test]
    fn pool_upsample_relu_gradients() {
        let x = rand_tensor((1, 2, 4, 4), 7);
        check_input_grad(&x, maxpool2, maxpool2_backward);
        check_input_grad(&x, upsample2, |_, dy| upsample2_backward(dy));
        check_input_grad(&x, relu, relu_backward);
    }

    #[test]
    fn batchnorm_normalizes_and_gradients_match() {
        let mut bn = BatchNorm2::<f64>::new(2);
        let x = rand_tensor((3, 2, 4, 4), 11);
        let (y, _) = bn.forward_train(&x);
        for ci in 0..2 {
            let ys = y.slice(ndarray::s![.., ci, .., ..]);
            let m: f64 = ys.iter().sum::<f64>() / ys.len() as f64;
            let v: f64 = ys.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / ys.len() as f64;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-4);
        }
        let bn = std::cell::RefCell::new(bn);
        check_input_grad(
            &x,
            |t| bn.borrow_mut().forward_train(t).0,
            |t, dy| {
                let mut b = bn.borrow_mut();
                let (_, cache) = b.forward_train(t);
                b.backward(t, &cache, dy)
            },
        );
    }

    #[test]
    fn dense_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut d = Dense::<f64>::new(4, 3, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |_| randn(&mut rng));
        let dy = Array2::from_shape_fn((5, 3), |_| randn(&mut rng));
        let dx = d.backward(&x, &dy);
        let loss = |d: &Dense<f64>, x: &Array2<f64>| (&d.forward(x) * &dy).sum();
        let h = 1e-6;
        let mut xp = x.clone();
        let orig = xp[[2, 1]];
        xp[[2, 1]] = orig + h;
        let lp = loss(&d, &xp);
        xp[[2, 1]] = orig - h;
        let lm = loss(&d, &xp);
        xp[[2, 1]] = orig;
        let num = (lp - lm) / (2.0 * h);
        assert!((num - dx[[2, 1]]).abs() < 1e-6 * (1.0 + num.abs()));

        let orig = d.w[[1, 2]];
        d.w[[1, 2]] = orig + h;
        let lp = loss(&d, &x);
        d.w[[1, 2]] = orig - h;
        let lm = loss(&d, &x);
        d.w[[1, 2]] = orig;
        let num = (lp - lm) / (2.0 * h);
        assert!((num - d.gw[[1, 2]]).abs() < 1e-6 * (1.0 + num.abs()));
    }

    #[test]
    fn gap_averages() {
        let x = rand_tensor((2, 3, 4, 4), 17);
        let y = global_avg_pool(&x);
        let manual: f64 = x.slice(ndarray::s![1, 2, .., ..]).iter().sum::<f64>() / 16.0;
        assert!((y[[1, 2]] - manual).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_stable_at_extremes() {
        assert!(sigmoid(800.0f64) <= 1.0);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = rand_tensor((2, 3, 4, 4), 19);
        let b = rand_tensor((2, 2, 4, 4), 23);
        let c = concat_channels(&a, &b);
        assert_eq!(c.dim(), (2, 5, 4, 4));
        let (a2, b2) = split_channels(&c, 3);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
