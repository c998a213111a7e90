//! Minimal CPU conv-net building blocks with hand-written backward passes.
//!
//! Layers do not own weights; they hold shapes plus offsets into one flat
//! parameter buffer owned by the encoder. Gradients use an identically
//! indexed flat buffer, which keeps SGD updates and finite-difference
//! checks trivial.
//!
//! Activations are `(C, H, W)` arrays; convolutions use odd kernels with
//! same-padding `k/2`.

use crate::scalar::Scalar;
use ndarray::{Array1, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// 2-D convolution: weight `(out_ch, in_ch, k, k)` and bias `(out_ch)` at
/// fixed offsets in the flat buffer.
#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvSpec {
    pub fn param_count(in_ch: usize, out_ch: usize, kernel: usize) -> usize {
        out_ch * in_ch * kernel * kernel + out_ch
    }

    pub fn out_side(&self, side: usize) -> usize {
        let pad = self.kernel / 2;
        (side + 2 * pad - self.kernel) / self.stride + 1
    }

    #[inline]
    fn w_idx(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> usize {
        self.w_off + ((oc * self.in_ch + ic) * self.kernel + ky) * self.kernel + kx
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Array3<T>) -> Array3<T> {
        let (in_ch, h, w) = x.dim();
        debug_assert_eq!(in_ch, self.in_ch);
        let pad = (self.kernel / 2) as isize;
        let (oh, ow) = (self.out_side(h), self.out_side(w));
        let mut out = Array3::<T>::zeros((self.out_ch, oh, ow));
        for oc in 0..self.out_ch {
            let bias = params[self.b_off + oc];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for ic in 0..self.in_ch {
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += params[self.w_idx(oc, ic, ky, kx)]
                                    * x[[ic, iy as usize, ix as usize]];
                            }
                        }
                    }
                    out[[oc, oy, ox]] = acc;
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grad_params` and returns the
    /// gradient with respect to the input.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        x: &Array3<T>,
        grad_out: &Array3<T>,
        grad_params: &mut [T],
    ) -> Array3<T> {
        let (_, h, w) = x.dim();
        let (_, oh, ow) = grad_out.dim();
        let pad = (self.kernel / 2) as isize;
        let mut grad_in = Array3::<T>::zeros(x.dim());
        for oc in 0..self.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = grad_out[[oc, oy, ox]];
                    if go == T::zero() {
                        continue;
                    }
                    grad_params[self.b_off + oc] += go;
                    for ic in 0..self.in_ch {
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                grad_params[self.w_idx(oc, ic, ky, kx)] += go * x[[ic, iy, ix]];
                                grad_in[[ic, iy, ix]] +=
                                    go * params[self.w_idx(oc, ic, ky, kx)];
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

/// Fully connected layer: weight `(out_dim, in_dim)` row-major plus bias.
#[derive(Debug, Clone)]
pub struct LinearSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl LinearSpec {
    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        out_dim * in_dim + out_dim
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Array1<T>) -> Array1<T> {
        let mut out = Array1::<T>::zeros(self.out_dim);
        for o in 0..self.out_dim {
            let row = self.w_off + o * self.in_dim;
            let mut acc = params[self.b_off + o];
            for i in 0..self.in_dim {
                acc += params[row + i] * x[i];
            }
            out[o] = acc;
        }
        out
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        x: &Array1<T>,
        grad_out: &Array1<T>,
        grad_params: &mut [T],
    ) -> Array1<T> {
        let mut grad_in = Array1::<T>::zeros(self.in_dim);
        for o in 0..self.out_dim {
            let go = grad_out[o];
            let row = self.w_off + o * self.in_dim;
            grad_params[self.b_off + o] += go;
            for i in 0..self.in_dim {
                grad_params[row + i] += go * x[i];
                grad_in[i] += go * params[row + i];
            }
        }
        grad_in
    }
}

pub fn relu3<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    x.mapv(|v| v.max(T::zero()))
}

/// Masks `grad` by the sign of the pre-activation `pre`.
pub fn relu3_backward<T: Scalar>(pre: &Array3<T>, grad: &Array3<T>) -> Array3<T> {
    let mut out = grad.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= T::zero() {
            *g = T::zero();
        }
    });
    out
}

pub fn relu1<T: Scalar>(x: &Array1<T>) -> Array1<T> {
    x.mapv(|v| v.max(T::zero()))
}

pub fn relu1_backward<T: Scalar>(pre: &Array1<T>, grad: &Array1<T>) -> Array1<T> {
    let mut out = grad.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= T::zero() {
            *g = T::zero();
        }
    });
    out
}

/// Non-overlapping k-by-k average pooling. Spatial dims must divide by `k`.
pub fn avg_pool<T: Scalar>(x: &Array3<T>, k: usize) -> Array3<T> {
    let (c, h, w) = x.dim();
    debug_assert!(h % k == 0 && w % k == 0);
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut out = Array3::<T>::zeros((c, h / k, w / k));
    for ch in 0..c {
        for oy in 0..h / k {
            for ox in 0..w / k {
                let mut acc = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        acc += x[[ch, oy * k + dy, ox * k + dx]];
                    }
                }
                out[[ch, oy, ox]] = acc * inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(grad_out: &Array3<T>, k: usize) -> Array3<T> {
    let (c, oh, ow) = grad_out.dim();
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut grad_in = Array3::<T>::zeros((c, oh * k, ow * k));
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[[ch, oy, ox]] * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        grad_in[[ch, oy * k + dy, ox * k + dx]] = g;
                    }
                }
            }
        }
    }
    grad_in
}

/// Per-channel spatial mean: `(C, H, W) -> (C)`.
pub fn global_avg_pool<T: Scalar>(x: &Array3<T>) -> Array1<T> {
    let (c, h, w) = x.dim();
    let inv = T::one() / T::from_usize(h * w).unwrap();
    Array1::from_iter((0..c).map(|ch| {
        x.index_axis(ndarray::Axis(0), ch).iter().copied().sum::<T>() * inv
    }))
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Array1<T>,
    dim: (usize, usize, usize),
) -> Array3<T> {
    let (c, h, w) = dim;
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let mut grad_in = Array3::<T>::zeros(dim);
    for ch in 0..c {
        grad_in
            .index_axis_mut(ndarray::Axis(0), ch)
            .fill(grad_out[ch] * inv);
    }
    grad_in
}

/// Unit-normalize; the norm is floored at 1e-12 to keep the backward pass
/// finite on a degenerate zero vector (surfaced downstream by the unit-norm
/// checks in the loss module).
pub fn l2_normalize<T: Scalar>(z: &Array1<T>) -> (Array1<T>, T) {
    let norm = z.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::from_f64_c(1e-12));
    (z.mapv(|v| v / norm), norm)
}

/// Backward of `v = z / |z|`: `dz = (dv - v (v . dv)) / |z|`.
pub fn l2_normalize_backward<T: Scalar>(v: &Array1<T>, norm: T, grad_v: &Array1<T>) -> Array1<T> {
    let dot: T = v.iter().zip(grad_v.iter()).map(|(&a, &b)| a * b).sum();
    v.iter()
        .zip(grad_v.iter())
        .map(|(&vi, &gi)| (gi - vi * dot) / norm)
        .collect()
}

/// He-normal initialization for weights feeding a ReLU; biases zero.
pub fn init_conv<T: Scalar>(spec: &ConvSpec, params: &mut [T], rng: &mut impl Rng) {
    let fan_in = spec.in_ch * spec.kernel * spec.kernel;
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    let n_w = spec.out_ch * spec.in_ch * spec.kernel * spec.kernel;
    for i in 0..n_w {
        params[spec.w_off + i] = T::from_f64_c(normal.sample(rng));
    }
    for i in 0..spec.out_ch {
        params[spec.b_off + i] = T::zero();
    }
}

pub fn init_linear<T: Scalar>(spec: &LinearSpec, params: &mut [T], gain: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, (gain / spec.in_dim as f64).sqrt()).unwrap();
    for i in 0..spec.out_dim * spec.in_dim {
        params[spec.w_off + i] = T::from_f64_c(normal.sample(rng));
    }
    for i in 0..spec.out_dim {
        params[spec.b_off + i] = T::zero();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use approx::assert_abs_diff_eq;

    fn random3(dims: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = rng_from(seed);
        let mut x = Array3::<f64>::zeros(dims);
        for v in x.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        x
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        let spec = ConvSpec {
            in_ch: 1,
            out_ch: 1,
            kernel: 3,
            stride: 1,
            w_off: 0,
            b_off: 9,
        };
        let mut params = vec![0.0f64; 10];
        params[4] = 1.0; // center tap
        let x = random3((1, 6, 6), 3);
        let y = spec.forward(&params, &x);
        assert_abs_diff_eq!(y[[0, 2, 3]], x[[0, 2, 3]], epsilon = 1e-12);
        assert_eq!(y.dim(), (1, 6, 6));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let spec = ConvSpec {
            in_ch: 2,
            out_ch: 3,
            kernel: 3,
            stride: 2,
            w_off: 0,
            b_off: 54,
        };
        let n_params = ConvSpec::param_count(2, 3, 3);
        let mut rng = rng_from(11);
        let mut params = vec![0.0f64; n_params];
        for p in params.iter_mut() {
            *p = rng.gen_range(-0.5..0.5);
        }
        let x = random3((2, 8, 8), 5);

        // Scalar objective: sum of outputs weighted by a fixed random mask.
        let mask = random3((3, 4, 4), 7);
        let objective = |params: &[f64], x: &Array3<f64>| -> f64 {
            (spec.forward(params, x) * &mask).sum()
        };

        let grad_out = mask.clone();
        let mut grad_params = vec![0.0f64; n_params];
        let grad_in = spec.backward(&params, &x, &grad_out, &mut grad_params);

        let eps = 1e-6;
        for &i in &[0usize, 10, 33, 54, 56] {
            let mut plus = params.clone();
            plus[i] += eps;
            let mut minus = params.clone();
            minus[i] -= eps;
            let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * eps);
            assert_abs_diff_eq!(fd, grad_params[i], epsilon = 1e-6 * (1.0 + fd.abs()));
        }
        for &(c, y, xx) in &[(0usize, 0usize, 0usize), (1, 3, 5), (0, 7, 7)] {
            let mut plus = x.clone();
            plus[[c, y, xx]] += eps;
            let mut minus = x.clone();
            minus[[c, y, xx]] -= eps;
            let fd = (objective(&params, &plus) - objective(&params, &minus)) / (2.0 * eps);
            assert_abs_diff_eq!(fd, grad_in[[c, y, xx]], epsilon = 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let spec = LinearSpec {
            in_dim: 4,
            out_dim: 3,
            w_off: 0,
            b_off: 12,
        };
        let mut rng = rng_from(2);
        let mut params = vec![0.0f64; LinearSpec::param_count(4, 3)];
        for p in params.iter_mut() {
            *p = rng.gen_range(-0.5..0.5);
        }
        let x = Array1::from_vec(vec![0.3, -0.7, 0.2, 0.9]);
        let mask = Array1::from_vec(vec![0.5, -1.0, 2.0]);
        let objective =
            |params: &[f64], x: &Array1<f64>| (spec.forward(params, x) * &mask).sum();

        let mut grad_params = vec![0.0f64; params.len()];
        let grad_in = spec.backward(&params, &x, &mask, &mut grad_params);

        let eps = 1e-6;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += eps;
            let mut minus = params.clone();
            minus[i] -= eps;
            let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * eps);
            assert_abs_diff_eq!(fd, grad_params[i], epsilon = 1e-7 + 1e-6 * fd.abs());
        }
        for i in 0..4 {
            let mut plus = x.clone();
            plus[i] += eps;
            let mut minus = x.clone();
            minus[i] -= eps;
            let fd = (objective(&params, &plus) - objective(&params, &minus)) / (2.0 * eps);
            assert_abs_diff_eq!(fd, grad_in[i], epsilon = 1e-7 + 1e-6 * fd.abs());
        }
    }

    #[test]
    fn avg_pool_round_trip_shapes_and_values() {
        let x = random3((2, 8, 8), 9);
        let y = avg_pool(&x, 4);
        assert_eq!(y.dim(), (2, 2, 2));
        let manual: f64 = (0..4)
            .flat_map(|dy| (0..4).map(move |dx| (dy, dx)))
            .map(|(dy, dx)| x[[1, 4 + dy, dx]])
            .sum::<f64>()
            / 16.0;
        assert_abs_diff_eq!(y[[1, 1, 0]], manual, epsilon = 1e-12);

        let g = avg_pool_backward(&y, 4);
        assert_eq!(g.dim(), (2, 8, 8));
        assert_abs_diff_eq!(g[[1, 4, 0]], y[[1, 1, 0]] / 16.0, epsilon = 1e-12);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let z = Array1::from_vec(vec![0.4, -1.2, 0.8]);
        let g = Array1::from_vec(vec![1.0, 0.3, -0.5]);
        let (v, norm) = l2_normalize(&z);
        let dz = l2_normalize_backward(&v, norm, &g);
        let eps = 1e-7;
        for i in 0..3 {
            let mut plus = z.clone();
            plus[i] += eps;
            let mut minus = z.clone();
            minus[i] -= eps;
            let f = |z: &Array1<f64>| (l2_normalize(z).0 * &g).sum();
            let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
            assert_abs_diff_eq!(fd, dz[i], epsilon = 1e-6);
        }
    }
}
