//! Joint Gaussian prior over the normalized features and its conditionals.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Default ridge added to the revealed block before inversion.
pub const DEFAULT_JITTER: f64 = 1e-6;
const MAX_JITTER: f64 = 1e-2;
const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorRepr", into = "PriorRepr")]
pub struct GaussianPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct PriorRepr {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl TryFrom<PriorRepr> for GaussianPrior {
    type Error = Error;

    fn try_from(r: PriorRepr) -> Result<Self> {
        let d = r.mean.len();
        if r.cov.len() != d || r.cov.iter().any(|row| row.len() != d) {
            return Err(Error::Dimension(format!(
                "prior covariance must be {d}x{d}"
            )));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| r.cov[i][j]);
        GaussianPrior::new(DVector::from_vec(r.mean), cov)
    }
}

impl From<GaussianPrior> for PriorRepr {
    fn from(p: GaussianPrior) -> Self {
        let d = p.dim();
        PriorRepr {
            mean: p.mean.iter().copied().collect(),
            cov: (0..d).map(|i| (0..d).map(|j| p.cov[(i, j)]).collect()).collect(),
        }
    }
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension(format!(
                "mean has {d} entries but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > SYMMETRY_TOL {
            return Err(Error::Numerical(format!(
                "covariance is not symmetric (max |S - S^T| = {asym:e})"
            )));
        }
        Ok(GaussianPrior { mean, cov })
    }

    /// Sample mean and population (1/N) covariance of the rows.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Config(format!(
                "fitting a prior needs at least 2 rows, got {}",
                rows.len()
            )));
        }
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = DVector::zeros(d);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= n;
        let cov = symmetrize(cov);
        Ok(GaussianPrior { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Marginal over `target_idx` with no conditioning.
    pub fn marginal(&self, target_idx: &[usize]) -> ConditionalGaussian {
        ConditionalGaussian {
            target_idx: target_idx.to_vec(),
            mean: select_vec(&self.mean, target_idx),
            cov: select(&self.cov, target_idx, target_idx),
        }
    }

    /// Distribution of `X[target_idx]` given `X[revealed_idx] = revealed_vals`.
    ///
    /// `jitter` is added to the diagonal of the revealed block; when the
    /// Cholesky factorization still fails it is escalated tenfold up to 1e-2.
    pub fn condition(
        &self,
        revealed_idx: &[usize],
        revealed_vals: &[f64],
        target_idx: &[usize],
        jitter: f64,
    ) -> Result<ConditionalGaussian> {
        if revealed_idx.len() != revealed_vals.len() {
            return Err(Error::Dimension(format!(
                "{} revealed indices but {} values",
                revealed_idx.len(),
                revealed_vals.len()
            )));
        }
        if !(jitter >= 0.0) {
            return Err(Error::Config(format!("jitter must be >= 0, got {jitter}")));
        }
        let d = self.dim();
        if let Some(&i) = revealed_idx.iter().chain(target_idx).find(|&&i| i >= d) {
            return Err(Error::Dimension(format!("index {i} out of range for {d} features")));
        }
        if let Some(i) = target_idx.iter().find(|i| revealed_idx.contains(i)) {
            return Err(Error::Config(format!(
                "feature {i} is both revealed and a conditioning target"
            )));
        }
        if revealed_idx.is_empty() {
            return Ok(self.marginal(target_idx));
        }

        let s_rr = select(&self.cov, revealed_idx, revealed_idx);
        let chol = factor_with_jitter(&s_rr, jitter)?;
        let s_ru = select(&self.cov, revealed_idx, target_idx);
        let gain_t = chol.solve(&s_ru); // (Σ_RR + λI)⁻¹ Σ_RU
        let resid = DVector::from_column_slice(revealed_vals) - select_vec(&self.mean, revealed_idx);
        let mean = select_vec(&self.mean, target_idx) + gain_t.tr_mul(&resid);
        let cov = select(&self.cov, target_idx, target_idx) - s_ru.tr_mul(&gain_t);
        Ok(ConditionalGaussian {
            target_idx: target_idx.to_vec(),
            mean,
            cov: symmetrize(cov),
        })
    }
}

fn factor_with_jitter(
    block: &DMatrix<f64>,
    jitter: f64,
) -> Result<nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>> {
    let mut lambda = jitter;
    loop {
        let mut m = block.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += lambda;
        }
        if let Some(c) = m.cholesky() {
            return Ok(c);
        }
        if lambda >= MAX_JITTER {
            let eig = block.clone().symmetric_eigenvalues();
            let (lo, hi) = eig
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            return Err(Error::Numerical(format!(
                "revealed covariance block is not invertible even with jitter {lambda:e} \
                 (eigenvalues in [{lo:e}, {hi:e}], condition estimate {:e})",
                hi.abs() / lo.abs().max(f64::MIN_POSITIVE)
            )));
        }
        lambda = (lambda * 10.0).clamp(DEFAULT_JITTER, MAX_JITTER);
    }
}

/// A Gaussian over a subset of features, typically a posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalGaussian {
    target_idx: Vec<usize>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl ConditionalGaussian {
    pub fn new(target_idx: Vec<usize>, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let k = target_idx.len();
        if mean.len() != k || cov.nrows() != k || cov.ncols() != k {
            return Err(Error::Dimension(format!(
                "conditional over {k} features needs a {k}-vector and {k}x{k} matrix"
            )));
        }
        Ok(ConditionalGaussian {
            target_idx,
            mean,
            cov: symmetrize(cov),
        })
    }

    /// Feature indices this distribution covers, in order.
    pub fn target_idx(&self) -> &[usize] {
        &self.target_idx
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.target_idx.len()
    }

    /// Splits off one covered feature as a pivot. The remaining features,
    /// conditioned on `pivot = z`, have mean `rest_mean + gain * (z - pivot_mean)`
    /// and a covariance that does not depend on `z`.
    pub fn pivot(&self, pos: usize) -> PivotSplit {
        let k = self.dim();
        let rest: Vec<usize> = (0..k).filter(|&i| i != pos).collect();
        let pivot_var = self.cov[(pos, pos)].max(0.0);
        let cross = DVector::from_iterator(rest.len(), rest.iter().map(|&i| self.cov[(i, pos)]));
        let mut rest_cov = select(&self.cov, &rest, &rest);
        let gain = if pivot_var > f64::EPSILON * self.cov.amax().max(1.0) {
            let g = &cross / pivot_var;
            rest_cov.ger(-1.0, &g, &cross, 1.0);
            g
        } else {
            DVector::zeros(rest.len())
        };
        PivotSplit {
            pivot_feature: self.target_idx[pos],
            pivot_mean: self.mean[pos],
            pivot_var,
            rest: ConditionalGaussian {
                target_idx: rest.iter().map(|&i| self.target_idx[i]).collect(),
                mean: select_vec(&self.mean, &rest),
                cov: symmetrize(rest_cov),
            },
            gain,
        }
    }

    /// `n` draws as rows of an `n x dim` matrix. The covariance is factored by
    /// eigendecomposition with negative eigenvalues clipped to zero.
    pub fn sample(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let k = self.dim();
        let factor = psd_factor(&self.cov);
        let mut rng = seed::rng(seed);
        let mut out = DMatrix::zeros(n, k);
        let mut eps = DVector::zeros(k);
        for r in 0..n {
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            let draw = &self.mean + &factor * &eps;
            out.row_mut(r).copy_from(&draw.transpose());
        }
        out
    }
}

/// Result of [`ConditionalGaussian::pivot`].
#[derive(Clone, Debug)]
pub struct PivotSplit {
    pub pivot_feature: usize,
    pub pivot_mean: f64,
    pub pivot_var: f64,
    /// Remaining features with their covariance already conditioned on the
    /// pivot and their mean at `pivot = pivot_mean`.
    pub rest: ConditionalGaussian,
    pub gain: DVector<f64>,
}

impl PivotSplit {
    /// Marginal of the pivot feature alone.
    pub fn pivot_marginal(&self) -> ConditionalGaussian {
        ConditionalGaussian {
            target_idx: vec![self.pivot_feature],
            mean: DVector::from_element(1, self.pivot_mean),
            cov: DMatrix::from_element(1, 1, self.pivot_var),
        }
    }

    /// Remaining features conditioned on `pivot = z`.
    pub fn given(&self, z: f64) -> ConditionalGaussian {
        let mut rest = self.rest.clone();
        rest.mean.axpy(z - self.pivot_mean, &self.gain, 1.0);
        rest
    }
}

fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let k = cov.nrows();
    if k == 0 {
        return DMatrix::zeros(0, 0);
    }
    if k == 1 {
        return DMatrix::from_element(1, 1, cov[(0, 0)].max(0.0).sqrt());
    }
    let eig = cov.clone().symmetric_eigen();
    let mut v = eig.eigenvectors;
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        v.column_mut(j).scale_mut(s);
    }
    v
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

pub(crate) fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub(crate) fn select_vec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn prior2(rho: f64) -> GaussianPrior {
        GaussianPrior::new(
            DVector::from_vec(vec![0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]),
        )
        .unwrap()
    }

    /// Random SPD matrix A Aᵀ + 0.5 I.
    fn random_prior(d: usize, seed: u64) -> GaussianPrior {
        let mut rng = seed::rng(seed);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let cov = symmetrize(&a * a.transpose() + DMatrix::identity(d, d) * 0.5);
        let mean = DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
        GaussianPrior::new(mean, cov).unwrap()
    }

    #[test]
    fn fit_two_points() {
        let p = GaussianPrior::fit(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(p.mean().as_slice(), &[0.0, 0.0]);
        assert_eq!(p.cov().as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn fit_repeated_row_is_degenerate() {
        let p = GaussianPrior::fit(&vec![vec![0.3, -0.2]; 5]).unwrap();
        assert!(p.cov().iter().all(|&v| v == 0.0));
        assert!(GaussianPrior::fit(&[vec![1.0]]).is_err());
    }

    #[test]
    fn fit_recovers_known_gaussian() {
        let truth = random_prior(3, 11);
        let draws = truth.marginal(&[0, 1, 2]).sample(100_000, 5);
        let rows: Vec<Vec<f64>> = draws.row_iter().map(|r| r.iter().copied().collect()).collect();
        let fitted = GaussianPrior::fit(&rows).unwrap();
        assert!((fitted.mean() - truth.mean()).amax() < 0.02);
        assert!((fitted.cov() - truth.cov()).amax() < 0.02 * truth.cov().amax().max(1.0));
    }

    #[test]
    fn empty_revealed_is_marginal() {
        let p = random_prior(4, 3);
        let c = p.condition(&[], &[], &[2, 0], DEFAULT_JITTER).unwrap();
        assert_eq!(c.mean()[0], p.mean()[2]);
        assert_eq!(c.mean()[1], p.mean()[0]);
        assert_eq!(c.cov()[(0, 1)], p.cov()[(2, 0)]);
    }

    #[test]
    fn diagonal_prior_ignores_revealed() {
        let p = GaussianPrior::new(
            DVector::from_vec(vec![0.1, 0.2, 0.3]),
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.7, 0.9])),
        )
        .unwrap();
        let c = p.condition(&[0], &[0.9], &[1, 2], 0.0).unwrap();
        assert_eq!(c.mean().as_slice(), &[0.2, 0.3]);
        assert_eq!(c.cov()[(0, 0)], 0.7);
        assert_eq!(c.cov()[(1, 1)], 0.9);
    }

    #[test]
    fn bivariate_closed_form() {
        let c = prior2(0.5).condition(&[0], &[1.0], &[1], 0.0).unwrap();
        assert!((c.mean()[0] - 0.5).abs() < 1e-12);
        assert!((c.cov()[(0, 0)] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn bivariate_matches_rejection_sampling() {
        let draws = prior2(0.5).marginal(&[0, 1]).sample(400_000, 77);
        let kept: Vec<f64> = draws
            .row_iter()
            .filter(|r| (r[0] - 1.0).abs() < 0.05)
            .map(|r| r[1])
            .collect();
        assert!(kept.len() > 1000);
        let n = kept.len() as f64;
        let m = kept.iter().sum::<f64>() / n;
        let v = kept.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        assert!((m - 0.5).abs() < 0.03, "mean {m}");
        assert!((v - 0.75).abs() < 0.03, "var {v}");
    }

    #[test]
    fn singular_block_uses_jitter() {
        // perfectly correlated pair
        let p = GaussianPrior::new(
            DVector::zeros(3),
            DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.5, 1.0, 1.0, 0.5, 0.5, 0.5, 1.0]),
        )
        .unwrap();
        let c = p.condition(&[0, 1], &[0.4, 0.4], &[2], 0.0).unwrap();
        assert!(c.mean()[0].is_finite());
        assert!((c.mean()[0] - 0.2).abs() < 1e-3);
    }

    #[test]
    fn rejects_overlap_and_bad_jitter() {
        let p = random_prior(3, 1);
        assert!(p.condition(&[0], &[0.0], &[0, 1], 0.0).is_err());
        assert!(p.condition(&[0], &[0.0], &[1], -1.0).is_err());
        assert!(p.condition(&[0], &[0.0, 1.0], &[1], 0.0).is_err());
    }

    #[test]
    fn zero_cov_sample_is_mean() {
        let c = ConditionalGaussian::new(
            vec![0, 1],
            DVector::from_vec(vec![0.3, -0.1]),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let s = c.sample(10, 1);
        for r in s.row_iter() {
            assert_eq!(r[0], 0.3);
            assert_eq!(r[1], -0.1);
        }
    }

    #[test]
    fn sample_moments_and_determinism() {
        let c = ConditionalGaussian::new(
            vec![0],
            DVector::from_element(1, 0.5),
            DMatrix::from_element(1, 1, 0.75),
        )
        .unwrap();
        let s = c.sample(100_000, 9);
        let n = s.nrows() as f64;
        let m = s.column(0).sum() / n;
        let v = s.column(0).iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        assert!((m - 0.5).abs() < 0.02);
        assert!((v - 0.75).abs() < 0.03);
        assert_eq!(c.sample(50, 3), c.sample(50, 3));
        assert_ne!(c.sample(50, 3), c.sample(50, 4));
    }

    #[test]
    fn pivot_matches_direct_conditioning() {
        let p = random_prior(5, 21);
        let revealed = [1usize];
        let vals = [0.4];
        let joint = p.condition(&revealed, &vals, &[0, 2, 3, 4], 0.0).unwrap();
        let split = joint.pivot(2); // feature 3
        assert_eq!(split.pivot_feature, 3);
        let via_pivot = split.given(-0.3);
        let direct = p.condition(&[1, 3], &[0.4, -0.3], &[0, 2, 4], 0.0).unwrap();
        assert!((via_pivot.mean() - direct.mean()).amax() < 1e-10);
        assert!((via_pivot.cov() - direct.cov()).amax() < 1e-10);
    }

    #[test]
    fn prior_json_round_trip() {
        let p = random_prior(3, 8);
        let s = serde_json::to_string(&p).unwrap();
        let back: GaussianPrior = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert!(v["mean"].is_array() && v["cov"][0].is_array());
    }

    proptest! {
        #[test]
        fn conditioning_properties(seed in 0u64..10_000, x in prop::collection::vec(-1.0f64..1.0, 3)) {
            let p = random_prior(5, seed);
            let c = p.condition(&[0, 3], &x[..2], &[1, 2, 4], DEFAULT_JITTER).unwrap();
            // symmetry
            prop_assert!((c.cov() - c.cov().transpose()).amax() <= 1e-12);
            // variance never grows
            for (k, &i) in c.target_idx().iter().enumerate() {
                prop_assert!(c.cov()[(k, k)] <= p.cov()[(i, i)] + 1e-8);
            }
            // PSD
            let eig = c.cov().clone().symmetric_eigenvalues();
            prop_assert!(eig.min() >= -1e-8);
            // chaining: R1 = {0}, then R2 = {3, 2}
            let step1 = p.condition(&[0], &x[..1], &[1, 2, 3, 4], 0.0).unwrap();
            let inner = GaussianPrior::new(step1.mean().clone(), step1.cov().clone()).unwrap();
            // positions of features 3 and 2 within step1's targets [1, 2, 3, 4]
            let chained = inner.condition(&[2, 1], &[x[1], x[2]], &[0, 3], 0.0).unwrap();
            let joint = p.condition(&[0, 3, 2], &[x[0], x[1], x[2]], &[1, 4], 0.0).unwrap();
            prop_assert!((chained.mean() - joint.mean()).amax() <= 1e-6);
            prop_assert!((chained.cov() - joint.cov()).amax() <= 1e-6);
        }
    }
}
