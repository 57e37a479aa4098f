//! Independent reference implementations used as test oracles. None of this
//! goes through the library's numerics: conditioning uses an explicit
//! inverse, sampling uses Cholesky with Box-Muller normals from a separate
//! generator, and the normal CDF is a quadrature of the density.

#![allow(dead_code)]

use minreveal::models::{Dense, MlpModel};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn box_muller(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Draws from N(mean, cov) through a Cholesky factor.
pub struct MvnOracle {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    rng: ChaCha20Rng,
}

impl MvnOracle {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>, seed: u64) -> Self {
        let n = cov.nrows();
        let chol = cov
            .clone()
            .cholesky()
            .map(|c| c.l())
            .unwrap_or_else(|| (cov + DMatrix::identity(n, n) * 1e-12).cholesky().unwrap().l());
        MvnOracle { mean, chol, rng: rng(seed) }
    }

    pub fn draw(&mut self) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| box_muller(&mut self.rng));
        &self.mean + &self.chol * z
    }
}

/// Conditional mean and covariance of `target` given `known = vals`, from
/// the explicit inverse of the known block.
pub fn condition_oracle(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    known: &[usize],
    vals: &[f64],
    target: &[usize],
) -> (DVector<f64>, DMatrix<f64>) {
    let s_tt = DMatrix::from_fn(target.len(), target.len(), |i, j| cov[(target[i], target[j])]);
    let mu_t = DVector::from_fn(target.len(), |i, _| mean[target[i]]);
    if known.is_empty() {
        return (mu_t, s_tt);
    }
    let s_kk = DMatrix::from_fn(known.len(), known.len(), |i, j| cov[(known[i], known[j])]);
    let s_tk = DMatrix::from_fn(target.len(), known.len(), |i, j| cov[(target[i], known[j])]);
    let inv = s_kk.try_inverse().expect("known block invertible");
    let diff = DVector::from_fn(known.len(), |i, _| vals[i] - mean[known[i]]);
    let m = mu_t + &s_tk * &inv * diff;
    let c = s_tt - &s_tk * &inv * s_tk.transpose();
    (m, c)
}

/// Standard normal CDF by composite Simpson integration of the density.
pub fn normal_cdf_simpson(x: f64) -> f64 {
    let a = -12.0;
    if x <= a {
        return 0.0;
    }
    let n = 20_000;
    let h = (x - a) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(a) + pdf(x);
    for i in 1..n {
        let t = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
    }
    s * h / 3.0
}

/// Label that is constant over every vertex of the hidden box, if any.
pub fn vertex_pure_linear(theta_u: &[f64], affine: f64) -> Option<usize> {
    let k = theta_u.len();
    let mut seen = [false; 2];
    for mask in 0u32..(1 << k) {
        let s: f64 = affine
            + theta_u
                .iter()
                .enumerate()
                .map(|(i, t)| if mask >> i & 1 == 1 { *t } else { -*t })
                .sum::<f64>();
        seen[usize::from(s >= 0.0)] = true;
    }
    match seen {
        [true, false] => Some(0),
        [false, true] => Some(1),
        _ => None,
    }
}

/// Random SPD matrix `A A^T + eps I` with entries of `A` in `[-scale, scale]`.
pub fn random_spd(rng: &mut ChaCha20Rng, d: usize, scale: f64, eps: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-scale..scale));
    let m = &a * a.transpose() + DMatrix::identity(d, d) * eps;
    (&m + m.transpose()) * 0.5
}

pub fn random_mlp(rng: &mut ChaCha20Rng, widths: &[usize], classes: usize) -> MlpModel {
    let layers = widths
        .windows(2)
        .map(|w| {
            Dense::new(
                DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-1.0..1.0)),
                DVector::from_fn(w[1], |_, _| rng.random_range(-0.3..0.3)),
            )
            .unwrap()
        })
        .collect();
    MlpModel::new(layers, classes).unwrap()
}

/// Two-class linear discriminant with pooled covariance.
pub fn lda(rows: &[Vec<f64>], labels: &[usize]) -> (Vec<f64>, f64) {
    let d = rows[0].len();
    let mut mu = [DVector::zeros(d), DVector::zeros(d)];
    let mut n = [0usize; 2];
    for (r, &y) in rows.iter().zip(labels) {
        mu[y] += DVector::from_column_slice(r);
        n[y] += 1;
    }
    for c in 0..2 {
        mu[c] /= n[c] as f64;
    }
    let mut s = DMatrix::zeros(d, d);
    for (r, &y) in rows.iter().zip(labels) {
        let v = DVector::from_column_slice(r) - &mu[y];
        s += &v * v.transpose();
    }
    s /= (rows.len() - 2) as f64;
    let w = s.try_inverse().unwrap() * (&mu[1] - &mu[0]);
    let b = -0.5 * w.dot(&(&mu[1] + &mu[0])) + (n[1] as f64 / n[0] as f64).ln();
    (w.iter().copied().collect(), b)
}
