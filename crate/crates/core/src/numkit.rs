//! Dense numerical substrate for the trainable models.
//!
//! Everything is `f64`, row-major, and shape-checked. Gradients are derived by
//! hand in each model and validated with [`grad_check`].

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

/// Seeded generator used everywhere randomness is needed.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NumError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("parameter count mismatch: {params} params, {grads} grads")]
    Count { params: usize, grads: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty input")]
    Empty,
}

/// Row-major dense matrix. A vector is a `1 x n` tensor. Deserialization
/// rejects data whose length disagrees with the shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: (usize, usize),
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: (usize, usize),
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = NumError;

    fn try_from(r: RawTensor) -> Result<Self, NumError> {
        Tensor::from_vec(r.shape.0, r.shape.1, r.data)
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: (rows, cols),
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::Shape {
                expected: (rows, cols),
                found: (1, data.len()),
            });
        }
        Ok(Tensor {
            shape: (rows, cols),
            data,
        })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: (1, 1),
            data: vec![x],
        }
    }

    /// Uniform initialisation in `[-scale, scale]`.
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Tensor {
            shape: (rows, cols),
            data,
        }
    }

    /// Glorot-style uniform initialisation for a `fan_in x fan_out` weight.
    pub fn glorot(rows: usize, cols: usize, rng: &mut SeededRng) -> Self {
        let scale = libm::sqrt(6.0 / (rows + cols) as f64);
        Self::uniform(rows, cols, scale, rng)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.0
    }

    pub fn cols(&self) -> usize {
        self.shape.1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape.1;
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.shape.1;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape.1 + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape.1;
        self.data[r * cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_shape(&self, expected: (usize, usize)) -> Result<(), NumError> {
        if self.shape != expected {
            return Err(NumError::Shape {
                expected,
                found: self.shape,
            });
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(self.shape.0, self.shape.1)
    }

    /// `out += x · W` for a row vector `x` (len = rows) and `W` of shape `rows x cols`.
    pub fn vec_mat_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.shape.0);
        debug_assert_eq!(out.len(), self.shape.1);
        let cols = self.shape.1;
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.data[i * cols..(i + 1) * cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }

    /// `out += W · dy` (i.e. the input gradient of `x · W`).
    pub fn mat_vec_acc(&self, dy: &[f64], out: &mut [f64]) {
        debug_assert_eq!(dy.len(), self.shape.1);
        debug_assert_eq!(out.len(), self.shape.0);
        let cols = self.shape.1;
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * cols..(i + 1) * cols];
            *o += dot(row, dy);
        }
    }

    /// `self += xᵀ · dy`, the weight gradient of `x · W`.
    pub fn outer_acc(&mut self, x: &[f64], dy: &[f64]) {
        debug_assert_eq!(x.len(), self.shape.0);
        debug_assert_eq!(dy.len(), self.shape.1);
        let cols = self.shape.1;
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &mut self.data[i * cols..(i + 1) * cols];
            for (g, d) in row.iter_mut().zip(dy) {
                *g += xi * d;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, alpha: f64) -> Result<(), NumError> {
        other.check_shape(self.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `-ln σ(x)` without cancellation.
pub fn softplus_neg(x: f64) -> f64 {
    // -ln σ(x) = ln(1 + e^{-x})
    if x > 0.0 {
        libm::log1p(libm::exp(-x))
    } else {
        -x + libm::log1p(libm::exp(x))
    }
}

/// Binary cross-entropy on a logit, and its derivative with respect to the logit.
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    let loss = target * softplus_neg(logit) + (1.0 - target) * softplus_neg(-logit);
    (loss, sigmoid(logit) - target)
}

/// `ln Σ exp(v_i)`, shifted by the maximum.
pub fn logsumexp(v: &[f64]) -> Result<f64, NumError> {
    if v.is_empty() {
        return Err(NumError::Empty);
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(m);
    }
    if !m.is_finite() {
        return Err(NumError::NonFinite("logsumexp input"));
    }
    let s: f64 = v.iter().map(|x| libm::exp(x - m)).sum();
    Ok(m + libm::log(s))
}

pub fn relu_inplace(v: &mut [f64]) {
    v.iter_mut().for_each(|x| {
        if *x < 0.0 {
            *x = 0.0
        }
    });
}

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), NumError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NumError::Count {
                params: params.len(),
                grads: grads.len(),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            g.check_shape(p.shape())?;
            if !g.is_finite() {
                return Err(NumError::NonFinite("gradient"));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
            if !p.is_finite() {
                return Err(NumError::NonFinite("parameter after update"));
            }
        }
        Ok(())
    }
}

/// Maximum relative error between `analytic` and a central-difference estimate of
/// the gradient of `f` at `params`: `|a - c| / max(1, |c|)`.
pub fn grad_check<F>(
    mut f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
) -> Result<f64, NumError>
where
    F: FnMut(&[Tensor]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(NumError::Count {
            params: params.len(),
            grads: analytic.len(),
        });
    }
    for (p, a) in params.iter().zip(analytic) {
        a.check_shape(p.shape())?;
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for t in 0..work.len() {
        for i in 0..work[t].len() {
            let orig = work[t].data[i];
            work[t].data[i] = orig + eps;
            let up = f(&work);
            work[t].data[i] = orig - eps;
            let down = f(&work);
            work[t].data[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(NumError::NonFinite("objective"));
            }
            let central = (up - down) / (2.0 * eps);
            let err = (analytic[t].data[i] - central).abs() / central.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Sum a list of gradient buffers into `acc`, shape by shape.
pub fn accumulate(acc: &mut [Tensor], grads: &[Tensor]) -> Result<(), NumError> {
    if acc.len() != grads.len() {
        return Err(NumError::Count {
            params: acc.len(),
            grads: grads.len(),
        });
    }
    for (a, g) in acc.iter_mut().zip(grads) {
        a.add_scaled(g, 1.0)?;
    }
    Ok(())
}

pub fn zero_grads(params: &[Tensor]) -> Vec<Tensor> {
    params.iter().map(Tensor::zeros_like).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_json_checks_shape() {
        let t = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.5]).unwrap();
        let js = serde_json::to_string(&t).unwrap();
        assert_eq!(js, r#"{"shape":[2,2],"data":[1.0,2.0,3.0,4.5]}"#);
        assert_eq!(serde_json::from_str::<Tensor>(&js).unwrap(), t);
        assert!(serde_json::from_str::<Tensor>(r#"{"shape":[2,2],"data":[1.0]}"#).is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = vec![
            Tensor::scalar(1.0),
            Tensor::from_vec(1, 2, vec![2.0, -3.0]).unwrap(),
        ];
        let g = zero_grads(&p);
        let mut adam = Adam::new(&p, 0.1);
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[1.0]);
        assert_eq!(p[1].data(), &[2.0, -3.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; mhat = 1, vhat = 1 -> delta = lr / (1 + eps)
        let mut p = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(1.0)];
        let mut adam = Adam::new(&p, 0.1);
        adam.step(&mut p, &g).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adam_rejects_bad_input() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut adam = Adam::new(&p, 0.1);
        let bad_shape = vec![Tensor::zeros(1, 2)];
        assert!(matches!(
            adam.step(&mut p, &bad_shape),
            Err(NumError::Shape { .. })
        ));
        let nan = vec![Tensor::scalar(f64::NAN)];
        assert_eq!(
            adam.step(&mut p, &nan),
            Err(NumError::NonFinite("gradient"))
        );
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut rng = seeded_rng(11);
            let mut p = vec![Tensor::uniform(3, 4, 1.0, &mut rng)];
            let mut adam = Adam::new(&p, 0.01);
            for _ in 0..20 {
                let g = vec![Tensor::uniform(3, 4, 1.0, &mut rng)];
                adam.step(&mut p, &g).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a[0]), bits(&b[0]));
    }

    #[test]
    fn grad_check_square() {
        let p = vec![Tensor::scalar(3.0)];
        let f = |ps: &[Tensor]| ps[0].data()[0] * ps[0].data()[0];
        let err = grad_check(f, &p, &[Tensor::scalar(6.0)], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let p = vec![Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap()];
        let w = [3.0, -2.0, 0.25];
        let f = |ps: &[Tensor]| dot(ps[0].data(), &w);
        let a = Tensor::from_vec(1, 3, w.to_vec()).unwrap();
        let err = grad_check(f, &p, &[a], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn grad_check_detects_half_gradient() {
        let p = vec![Tensor::scalar(3.0)];
        let f = |ps: &[Tensor]| ps[0].data()[0] * ps[0].data()[0];
        let err = grad_check(f, &p, &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!((err - 0.5).abs() < 1e-6, "{err}");
    }

    #[test]
    fn logsumexp_cases() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - libm::log(2.0)).abs() < 1e-15);
        let big = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + libm::log(2.0))).abs() < 1e-12);
        assert_eq!(logsumexp(&[]), Err(NumError::Empty));
    }

    #[test]
    fn logsumexp_matches_naive() {
        let mut rng = seeded_rng(5);
        for _ in 0..50 {
            let v: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let naive = libm::log(v.iter().map(|x| libm::exp(*x)).sum::<f64>());
            assert!((logsumexp(&v).unwrap() - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_gradient_matches_difference() {
        for &(x, t) in &[(0.3, 1.0), (-2.0, 0.0), (5.0, 0.0), (-40.0, 1.0)] {
            let (_, d) = bce_with_logit(x, t);
            let h = 1e-6;
            let c = (bce_with_logit(x + h, t).0 - bce_with_logit(x - h, t).0) / (2.0 * h);
            assert!((d - c).abs() < 1e-6);
        }
    }
}
