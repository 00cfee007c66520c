//! Dense-array numerical core: tensors, a seeded RNG with a stable
//! cross-platform stream, parameter initialization, the Adam optimizer,
//! global-norm gradient clipping, inverted dropout, and a finite-difference
//! gradient checker.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::Real;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor shapes differ: {left:?} vs {right:?}")]
    IncompatibleShapes { left: Vec<usize>, right: Vec<usize> },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
    #[error("dropout rate must lie in [0, 1), got {rate}")]
    InvalidDropoutRate { rate: Real },
}

/// Contiguous row-major array of real values.
///
/// For 2-D tensors, `shape = [rows, cols]` and element `(r, c)` lives at
/// `data[r * cols + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: Real) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a tensor from raw data, rejecting length mismatches and
    /// non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<Real>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::ShapeMismatch {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite {
                context: "Tensor::from_vec",
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> Real {
        debug_assert!(r < self.rows() && c < self.cols());
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn at2_mut(&mut self, r: usize, c: usize) -> &mut Real {
        debug_assert!(r < self.rows() && c < self.cols());
        &mut self.data[r * self.shape[1] + c]
    }

    /// Row `r` of a 2-D tensor as a contiguous slice.
    #[inline]
    pub fn row(&self, r: usize) -> &[Real] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [Real] {
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += other * scale`, used for gradient accumulation.
    pub fn add_scaled(&mut self, other: &Tensor, scale: Real) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * scale;
        }
    }

    pub fn scale(&mut self, s: Real) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn squared_norm(&self) -> Real {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Seeded random generator with a reproducible cross-platform stream.
///
/// Backed by ChaCha8; every sampling helper below derives its output from
/// `next_u64` by a fixed documented transformation, so two `Rng`s created
/// from the same seed produce identical values on every platform.
#[derive(Debug, Clone)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream for the same seed; used for per-worker generators.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng(inner)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn uniform_01(&mut self) -> Real {
        ((self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)) as Real
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: Real, hi: Real) -> Real {
        lo + (hi - lo) * self.uniform_01()
    }

    /// Standard normal via the Box-Muller transform.
    pub fn standard_normal(&mut self) -> Real {
        let u1 = 1.0 - self.uniform_01(); // (0, 1]
        let u2 = self.uniform_01();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * (std::f64::consts::PI as Real) * u2;
        r * theta.cos()
    }

    /// Uniform integer in [0, n) via rejection sampling (unbiased).
    pub fn uniform_usize(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let limit = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < limit {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle driven by this generator.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.uniform_usize(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Glorot (Xavier) uniform initialization on [-b, b] with
/// b = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform_init(fan_in: usize, fan_out: usize, shape: &[usize], rng: &mut Rng) -> Tensor {
    assert!(fan_in >= 1 && fan_out >= 1);
    let bound = (6.0 / (fan_in + fan_out) as Real).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub learning_rate: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter optimizer state: first/second moment estimates and the
/// step counter driving bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub params: AdamParams,
}

impl AdamState {
    pub fn new(shape: &[usize], params: AdamParams) -> Self {
        AdamState {
            step_count: 0,
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            params,
        }
    }
}

/// One Adam update with bias correction. Mutates `param` and `state` in place.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState) -> Result<(), TensorError> {
    if param.shape() != grad.shape() || param.shape() != state.first_moment.shape() {
        return Err(TensorError::IncompatibleShapes {
            left: param.shape().to_vec(),
            right: grad.shape().to_vec(),
        });
    }
    if !grad.all_finite() {
        return Err(TensorError::NonFinite {
            context: "adam_step gradient",
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let AdamParams {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.params;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    let p = param.data_mut();
    let g = grad.data();
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// Scales all gradients by `threshold / norm` when their global L2 norm
/// exceeds `threshold`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [&mut Tensor], threshold: Real) -> Real {
    assert!(threshold > 0.0);
    let norm = grads
        .iter()
        .map(|g| g.squared_norm())
        .sum::<Real>()
        .sqrt();
    if norm > threshold {
        let factor = threshold / norm;
        for g in grads.iter_mut() {
            g.scale(factor);
        }
    }
    norm
}

/// Inverted dropout mask: each element is 0 with probability `rate`,
/// otherwise 1/(1-rate), so expected activations are unchanged and
/// inference needs no rescaling.
pub fn dropout_mask(shape: &[usize], rate: Real, rng: &mut Rng) -> Result<Tensor, TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidDropoutRate { rate });
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.uniform_01() < rate { 0.0 } else { keep_scale })
        .collect();
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradientCheckReport {
    /// Worst relative error over all elements of all tensors.
    pub max_rel_err: Real,
    /// Worst relative error per tensor, in `params` order.
    pub per_tensor: Vec<Real>,
}

/// Compares `analytic` gradients against central finite differences of
/// `loss_fn`: rel err = |a - n| / max(1e-8, |a| + |n|), maximized over
/// elements. `loss_fn` must be deterministic (dropout disabled, fixed data).
pub fn gradient_check<F>(
    mut loss_fn: F,
    params: &mut [Tensor],
    analytic: &[Tensor],
    epsilon: Real,
) -> GradientCheckReport
where
    F: FnMut(&[Tensor]) -> Real,
{
    assert_eq!(params.len(), analytic.len());
    let mut per_tensor = Vec::with_capacity(params.len());
    let mut max_rel_err: Real = 0.0;
    for t in 0..params.len() {
        let mut tensor_max: Real = 0.0;
        for i in 0..params[t].numel() {
            let saved = params[t].data()[i];
            params[t].data_mut()[i] = saved + epsilon;
            let f_plus = loss_fn(params);
            params[t].data_mut()[i] = saved - epsilon;
            let f_minus = loss_fn(params);
            params[t].data_mut()[i] = saved;
            let numeric = (f_plus - f_minus) / (2.0 * epsilon);
            let a = analytic[t].data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            tensor_max = tensor_max.max(rel);
        }
        max_rel_err = max_rel_err.max(tensor_max);
        per_tensor.push(tensor_max);
    }
    GradientCheckReport {
        max_rel_err,
        per_tensor,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_lengths_and_nan() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::from_vec(&[2], vec![1.0, Real::NAN]).is_err());
        assert!(Tensor::from_vec(&[2], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn rng_same_seed_same_stream() {
        let mut a = Rng::from_seed(42);
        let mut b = Rng::from_seed(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn rng_streams_are_independent() {
        let mut a = Rng::with_stream(42, 0);
        let mut b = Rng::with_stream(42, 1);
        assert_ne!(
            (0..8).map(|_| a.next_u64()).collect::<Vec<_>>(),
            (0..8).map(|_| b.next_u64()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn glorot_bound_for_equal_fans() {
        // fan_in = fan_out = 3 gives bound sqrt(6/6) = 1
        let mut rng = Rng::from_seed(1);
        let t = glorot_uniform_init(3, 3, &[3, 3], &mut rng);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn glorot_deterministic_under_seed() {
        let mut a = Rng::from_seed(7);
        let mut b = Rng::from_seed(7);
        let ta = glorot_uniform_init(5, 4, &[4, 5], &mut a);
        let tb = glorot_uniform_init(5, 4, &[4, 5], &mut b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn glorot_empirical_mean_near_zero() {
        let mut rng = Rng::from_seed(3);
        let t = glorot_uniform_init(10, 10, &[100_000], &mut rng);
        let mean = t.data().iter().sum::<Real>() / t.numel() as Real;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // Bias-corrected first step is ~ -lr * sign(g).
        let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![0.2]).unwrap();
        let mut st = AdamState::new(&[1], AdamParams::default());
        adam_step(&mut p, &g, &mut st).unwrap();
        assert!((p.data()[0] + 0.001).abs() < 1e-6, "step {}", p.data()[0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_param_unchanged() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(&[3], AdamParams::default());
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_rejects_shape_mismatch_and_nonfinite() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[2], AdamParams::default());
        assert!(adam_step(&mut p, &Tensor::zeros(&[3]), &mut st).is_err());
        let mut bad = Tensor::zeros(&[2]);
        bad.data_mut()[0] = Real::INFINITY;
        assert!(adam_step(&mut p, &bad, &mut st).is_err());
    }

    #[test]
    fn adam_converges_on_convex_quadratic() {
        // minimize (w - 3)^2 from w = 0
        let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let mut st = AdamState::new(
            &[1],
            AdamParams {
                learning_rate: 0.1,
                ..AdamParams::default()
            },
        );
        for _ in 0..1000 {
            let w = p.data()[0];
            let g = Tensor::from_vec(&[1], vec![2.0 * (w - 3.0)]).unwrap();
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert!((p.data()[0] - 3.0).abs() < 0.01, "w = {}", p.data()[0]);
    }

    #[test]
    fn clip_scales_single_tensor() {
        let mut t = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let norm = clip_global_norm(&mut [&mut t], 1.0);
        assert!((norm - 2.0).abs() < 1e-12);
        assert!((t.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut t = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        clip_global_norm(&mut [&mut t], 1.0);
        assert_eq!(t.data()[0], 0.5);
    }

    #[test]
    fn clip_uses_global_norm_across_tensors() {
        // tensors [3] and [4] have global norm 5
        let mut a = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let mut b = Tensor::from_vec(&[1], vec![4.0]).unwrap();
        let norm = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((a.data()[0] - 0.6).abs() < 1e-12);
        assert!((b.data()[0] - 0.8).abs() < 1e-12);
        let new_norm = (a.squared_norm() + b.squared_norm()).sqrt();
        assert!(new_norm <= 1.0 + 1e-12);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = Rng::from_seed(0);
        let m = dropout_mask(&[10], 0.0, &mut rng).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut rng = Rng::from_seed(0);
        assert!(dropout_mask(&[4], 1.0, &mut rng).is_err());
    }

    #[test]
    fn dropout_mask_statistics() {
        let mut rng = Rng::from_seed(11);
        let m = dropout_mask(&[1_000_000], 0.25, &mut rng).unwrap();
        let n = m.numel() as Real;
        let mean = m.data().iter().sum::<Real>() / n;
        let zero_fraction = m.data().iter().filter(|&&v| v == 0.0).count() as Real / n;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((zero_fraction - 0.25).abs() < 0.005, "zeros {zero_fraction}");
    }

    #[cfg(not(feature = "single-precision"))]
    #[test]
    fn gradient_check_on_square() {
        // f(w) = w^2 at w = 3: analytic gradient 6
        let mut params = vec![Tensor::from_vec(&[1], vec![3.0]).unwrap()];
        let analytic = vec![Tensor::from_vec(&[1], vec![6.0]).unwrap()];
        let report = gradient_check(
            |p: &[Tensor]| p[0].data()[0] * p[0].data()[0],
            &mut params,
            &analytic,
            1e-5,
        );
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn gradient_check_on_constant() {
        let mut params = vec![Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap()];
        let analytic = vec![Tensor::zeros(&[2])];
        let report = gradient_check(|_: &[Tensor]| 5.0, &mut params, &analytic, 1e-5);
        assert_eq!(report.max_rel_err, 0.0);
    }
}
