//! Distribution of a model's output when some inputs are still hidden.
//!
//! * linear binary models: the score is exactly Gaussian, so the label is
//!   Bernoulli with `p = Phi(m / sigma)`;
//! * binary ReLU networks: first-order Taylor expansion at the posterior mean;
//! * multi-class models: Monte-Carlo class frequencies.

use nalgebra::DVector;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::gaussian::ConditionalGaussian;
use crate::models::{label_from_scores, Model, MlpModel};

/// Mean and variance of a Gaussian pre-threshold score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreDistribution {
    pub mean: f64,
    pub var: f64,
}

impl ScoreDistribution {
    /// Round-off can push the variance slightly negative; it is clipped.
    pub fn new(mean: f64, var: f64) -> Self {
        ScoreDistribution {
            mean,
            var: var.max(0.0),
        }
    }
}

/// Probabilities over class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.len() < 2 || probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Numerical(format!("invalid label distribution {probs:?}")));
        }
        Ok(LabelDistribution { probs })
    }

    /// `Bern(p)` with `p = Pr(label = 1)`.
    pub fn bernoulli(p: f64) -> Self {
        let p = p.clamp(0.0, 1.0);
        LabelDistribution {
            probs: vec![1.0 - p, p],
        }
    }

    pub fn point_mass(label: usize, classes: usize) -> Self {
        let mut probs = vec![0.0; classes];
        probs[label] = 1.0;
        LabelDistribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Most likely label (lowest index on ties) and its probability.
    pub fn mode(&self) -> (usize, f64) {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = k;
            }
        }
        (best, self.probs[best])
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Score distribution of a binary linear model with the features of `cond`
/// hidden. `revealed_term` is `theta_known . x_known + bias`.
pub fn linear_score_dist(
    theta: &[f64],
    cond: &ConditionalGaussian,
    revealed_term: f64,
) -> Result<ScoreDistribution> {
    let theta_u = DVector::from_iterator(
        cond.dim(),
        cond.target_idx().iter().map(|&i| theta.get(i).copied().unwrap_or(f64::NAN)),
    );
    if theta_u.iter().any(|v| v.is_nan()) {
        return Err(Error::Dimension(format!(
            "conditional covers features {:?} beyond the {}-feature model",
            cond.target_idx(),
            theta.len()
        )));
    }
    let mean = revealed_term + theta_u.dot(cond.mean());
    let var = (cond.cov() * &theta_u).dot(&theta_u);
    Ok(ScoreDistribution::new(mean, var))
}

/// Completes `x_fixed` by writing the conditional mean into the hidden slots.
fn complete_at_mean(x_fixed: &[f64], cond: &ConditionalGaussian) -> Vec<f64> {
    let mut x = x_fixed.to_vec();
    for (k, &i) in cond.target_idx().iter().enumerate() {
        x[i] = cond.mean()[k];
    }
    x
}

/// First-order Taylor approximation of a binary network's score around the
/// posterior mean: `N(f(mu), g' Sigma g)` with `g` the input gradient over
/// the hidden features.
pub fn taylor_score_dist(
    model: &MlpModel,
    cond: &ConditionalGaussian,
    x_fixed: &[f64],
) -> Result<ScoreDistribution> {
    if model.classes() != 2 {
        return Err(Error::Config(
            "Taylor score distribution is defined for binary networks".into(),
        ));
    }
    if x_fixed.len() != model.dim() {
        return Err(Error::Dimension(format!(
            "input has {} values, model expects {}",
            x_fixed.len(),
            model.dim()
        )));
    }
    let net = Model::Mlp(model.clone());
    taylor_for(&net, cond, x_fixed)
}

pub(crate) fn taylor_for(
    model: &Model,
    cond: &ConditionalGaussian,
    x_fixed: &[f64],
) -> Result<ScoreDistribution> {
    let x = complete_at_mean(x_fixed, cond);
    let mean = model.score(&x)[0];
    if cond.dim() == 0 {
        return Ok(ScoreDistribution::new(mean, 0.0));
    }
    let grad = model.input_gradient(&x);
    let g = DVector::from_iterator(cond.dim(), cond.target_idx().iter().map(|&i| grad[(0, i)]));
    let var = (cond.cov() * &g).dot(&g);
    Ok(ScoreDistribution::new(mean, var))
}

/// `Bern(Phi(m / sigma))`; a zero-variance score is a point mass on
/// `1{m >= 0}`.
pub fn threshold_dist(sd: ScoreDistribution) -> LabelDistribution {
    if sd.var <= 0.0 {
        return LabelDistribution::bernoulli(if sd.mean >= 0.0 { 1.0 } else { 0.0 });
    }
    LabelDistribution::bernoulli(normal_cdf(sd.mean / sd.var.sqrt()))
}

/// Class frequencies of `predict` over `n` completions drawn from `cond`.
pub fn mc_label_dist(
    model: &Model,
    cond: &ConditionalGaussian,
    x_fixed: &[f64],
    n: usize,
    seed: u64,
) -> Result<LabelDistribution> {
    if n == 0 {
        return Err(Error::Config("Monte-Carlo sample count must be >= 1".into()));
    }
    let mut counts = vec![0usize; model.classes()];
    if cond.dim() == 0 {
        counts[model.predict(x_fixed)] = n;
    } else {
        let draws = cond.sample(n, seed);
        let mut x = x_fixed.to_vec();
        for row in draws.row_iter() {
            for (k, &i) in cond.target_idx().iter().enumerate() {
                x[i] = row[k];
            }
            counts[label_from_scores(&model.score(&x))] += 1;
        }
    }
    let probs = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Ok(LabelDistribution { probs })
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(ld: &LabelDistribution) -> f64 {
    -ld.probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Largest binary entropy compatible with a label probability of at least
/// `1 - delta`: `-(1-delta) ln(1-delta) - delta ln delta`.
pub fn epsilon_bound(delta: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&delta) {
        return Err(Error::Config(format!("delta must be in [0, 0.5), got {delta}")));
    }
    if delta == 0.0 {
        return Ok(0.0);
    }
    Ok(-(1.0 - delta) * (1.0 - delta).ln() - delta * delta.ln())
}
