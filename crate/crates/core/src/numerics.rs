//! Dense linear algebra on `f64`, the nonlinearities used by every block, and
//! the first-order optimizer shared by base training and distillation.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`. All reductions run left to right so
//! results are bit-reproducible.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("matrix entry {bad}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self * x + bias`. Shapes are the caller's responsibility.
    #[inline]
    pub fn affine_into(&self, bias: &[f64], x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = bias[r] + dot(self.row(r), x);
        }
    }

    /// `gx += selfᵀ * gy`.
    #[inline]
    pub fn transpose_mul_acc(&self, gy: &[f64], gx: &mut [f64]) {
        debug_assert_eq!(gy.len(), self.rows);
        debug_assert_eq!(gx.len(), self.cols);
        for (r, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (acc, &w) in gx.iter_mut().zip(self.row(r)) {
                *acc += w * g;
            }
        }
    }

    /// `self += gy ⊗ x`.
    #[inline]
    pub fn outer_acc(&mut self, gy: &[f64], x: &[f64]) {
        debug_assert_eq!(gy.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        let cols = self.cols;
        for (r, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (w, &xi) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *w += g * xi;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += (x - y) * (x - y);
    }
    acc.sqrt()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Checked `W·x + b`.
pub fn affine_forward(w: &Matrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if w.cols != x.len() || w.rows != b.len() {
        return Err(Error::Shape(format!(
            "W is {}x{}, b has {}, x has {}",
            w.rows,
            w.cols,
            b.len(),
            x.len()
        )));
    }
    let mut out = vec![0.0; w.rows];
    w.affine_into(b, x, &mut out);
    Ok(out)
}

/// Cosine similarity. A zero-norm argument is an error rather than 0 so that
/// callers decide how to treat it.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    let na = norm2(a);
    let nb = norm2(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero-norm vector in cosine similarity".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Max over parameters of `|analytic - central difference| / max(1, |analytic|)`.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} params, {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    if step <= 0.0 {
        return Err(Error::Usage("finite-difference step must be positive".into()));
    }
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let up = f(&probe);
        probe[i] = params[i] - step;
        let down = f(&probe);
        probe[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("objective at parameter {i}")));
        }
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Anything that owns trainable `f64` slices in a fixed order.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(Error::Shape(format!(
                "{} values for {expected} parameters",
                flat.len()
            )));
        }
        let mut offset = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
        Ok(())
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |s| s.fill(value));
    }
}

/// Adam moments plus hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        OptimState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer sized for {}, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Update a structured parameter set with gradients of the same structure.
    pub fn step_params<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let mut flat = params.to_flat();
        let g = grads.to_flat();
        self.step(&mut flat, &g)?;
        params.load_flat(&flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, prop_assume, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_examples() {
        let id = Matrix::identity(2);
        assert_eq!(affine_forward(&id, &[0.0, 0.0], &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
        let zero = Matrix::zeros(2, 2);
        assert_eq!(affine_forward(&zero, &[1.0, 1.0], &[5.0, 5.0]).unwrap(), vec![1.0, 1.0]);
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(affine_forward(&w, &[0.0, 0.0], &[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
        assert!(matches!(
            affine_forward(&w, &[0.0], &[1.0, 1.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn grad_check_quadratic() {
        let err = grad_check(|w| w[0] * w[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
        assert!(grad_check(|_| f64::NAN, &[3.0], &[6.0], 1e-5).is_err());
    }

    #[test]
    fn optimizer_examples() {
        let mut p = vec![1.0, -2.0];
        let mut opt = OptimState::new(2, 0.1);
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);

        let mut s = vec![0.5];
        let mut opt = OptimState::new(1, 0.1);
        opt.step(&mut s, &[1.0]).unwrap();
        assert!(s[0] < 0.5);

        let mut w = vec![0.0];
        let mut opt = OptimState::new(1, 0.1);
        for _ in 0..100 {
            let g = 2.0 * (w[0] - 2.0);
            opt.step(&mut w, &[g]).unwrap();
        }
        assert!((w[0] - 2.0).abs() < 0.05, "{}", w[0]);

        assert!(opt.step(&mut [0.0, 0.0], &[0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_self_symmetric_scale(
            a in prop::collection::vec(-10.0f64..10.0, 1..16),
            seed in any::<u64>(),
            scale in 0.01f64..100.0,
        ) {
            prop_assume!(norm2(&a) > 1e-6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            prop_assume!(norm2(&b) > 1e-6);
            prop_assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            let ab = cosine_similarity(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine_similarity(&b, &a).unwrap());
            let scaled: Vec<f64> = a.iter().map(|v| v * scale).collect();
            prop_assert!((cosine_similarity(&scaled, &b).unwrap() - ab).abs() < 1e-12);
        }

        #[test]
        fn affine_is_affine_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Matrix::uniform(4, 3, 1.0, &mut rng);
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(a, c)| alpha * a + beta * c).collect();
            let lhs = affine_forward(&w, &b, &mix).unwrap();
            let fx = affine_forward(&w, &b, &x).unwrap();
            let fy = affine_forward(&w, &b, &y).unwrap();
            for i in 0..4 {
                let rhs = alpha * fx[i] + beta * fy[i] - (alpha + beta - 1.0) * b[i];
                prop_assert!((lhs[i] - rhs).abs() < 1e-10);
            }
        }

        #[test]
        fn zero_gradient_is_identity(p in prop::collection::vec(-5.0f64..5.0, 1..8), steps in 1usize..5) {
            let mut q = p.clone();
            let mut opt = OptimState::new(p.len(), 0.05);
            let zeros = vec![0.0; p.len()];
            for _ in 0..steps {
                opt.step(&mut q, &zeros).unwrap();
            }
            prop_assert_eq!(q, p);
        }
    }
}
