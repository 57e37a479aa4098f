//! Sequential feature release.
//!
//! Starting from the public features only, the engine repeatedly
//!
//! 1. tests whether the revealed set is already a core set and stops if so;
//! 2. otherwise scores every hidden sensitive feature `j` by the expected
//!    negative entropy of the prediction after revealing it,
//!    `F(X_j) = -(1/T) sum_z H[f(X_j = z, X_rest, X_R = x_R)]`
//!    with `z` drawn from the posterior of `X_j`;
//! 3. asks the oracle for the best feature's value and repeats.
//!
//! Revealing every sensitive feature always certifies, so a run takes at
//! most `|S|` reveals.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coreset::{
    check_delta, pure_linear, test_delta_linear, test_delta_mc, test_delta_nonlinear,
    test_pure_grid, CoreSetResult, GridParams, Method,
};
use crate::data_io::{AuditRecord, Dataset, FeatureSpace};
use crate::error::{Error, Result};
use crate::gaussian::{ConditionalGaussian, GaussianPrior, DEFAULT_JITTER};
use crate::models::Model;
use crate::predictive::{
    entropy, linear_score_dist, mc_label_dist, normal_cdf, taylor_for, threshold_dist,
    LabelDistribution, ScoreDistribution,
};
use crate::seed;

const CERT_STREAM: u64 = u64::MAX;

/// Engine settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PfrConfig {
    /// Failure probability, `0 <= delta < 0.5`.
    pub delta: f64,
    /// Posterior draws `T` per scored feature, and Monte-Carlo draws per
    /// certification.
    pub n_samples: usize,
    pub seed: u64,
    pub grid: GridParams,
    pub jitter: f64,
    /// Failure probability used to certify networks at `delta = 0` when the
    /// grid test is inconclusive.
    pub fallback_delta: f64,
    /// Inner Monte-Carlo draws per posterior sample when scoring multi-class
    /// models.
    pub score_mc_samples: usize,
}

impl Default for PfrConfig {
    fn default() -> Self {
        PfrConfig {
            delta: 0.0,
            n_samples: 1000,
            seed: 0,
            grid: GridParams::default(),
            jitter: DEFAULT_JITTER,
            fallback_delta: 1e-3,
            score_mc_samples: 100,
        }
    }
}

impl PfrConfig {
    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        if self.n_samples == 0 || self.score_mc_samples == 0 {
            return Err(Error::Config("sample counts must be >= 1".into()));
        }
        if !(self.grid.delta_robust > 0.0 && self.grid.delta_robust <= 1.0) {
            return Err(Error::Config(format!(
                "grid delta must be in (0, 1], got {}",
                self.grid.delta_robust
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        if !(self.fallback_delta > 0.0 && self.fallback_delta < 0.5) {
            return Err(Error::Config(format!(
                "fallback delta must be in (0, 0.5), got {}",
                self.fallback_delta
            )));
        }
        Ok(())
    }
}

/// Scores computed before one reveal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub chosen: usize,
    /// `(feature, F(X_feature))` for every hidden feature at that step.
    pub scores: Vec<(usize, f64)>,
}

/// What has been disclosed so far for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RevealState {
    public: Vec<usize>,
    /// Feature values; only public and revealed entries are meaningful.
    x: Vec<f64>,
    revealed: Vec<usize>,
    unrevealed: Vec<usize>,
    trace: Vec<TraceStep>,
}

impl RevealState {
    pub fn new(space: &FeatureSpace, x_public: &[f64]) -> Result<Self> {
        if x_public.len() != space.dim() {
            return Err(Error::Dimension(format!(
                "sample has {} values, feature space has {}",
                x_public.len(),
                space.dim()
            )));
        }
        let mut x = vec![0.0; space.dim()];
        for &i in space.public() {
            x[i] = x_public[i];
        }
        Ok(RevealState {
            public: space.public().to_vec(),
            x,
            revealed: Vec::new(),
            unrevealed: space.sensitive().to_vec(),
            trace: Vec::new(),
        })
    }

    /// Revealed sensitive features in reveal order.
    pub fn revealed(&self) -> &[usize] {
        &self.revealed
    }

    pub fn revealed_values(&self) -> Vec<f64> {
        self.revealed.iter().map(|&i| self.x[i]).collect()
    }

    /// Hidden sensitive features, ascending.
    pub fn unrevealed(&self) -> &[usize] {
        &self.unrevealed
    }

    pub fn public(&self) -> &[usize] {
        &self.public
    }

    pub fn trace(&self) -> &[TraceStep] {
        &self.trace
    }

    /// Known values; hidden entries hold placeholders.
    pub fn values(&self) -> &[f64] {
        &self.x
    }

    /// Public and revealed feature indices.
    pub fn known(&self) -> Vec<usize> {
        self.public.iter().chain(&self.revealed).copied().collect()
    }

    pub fn step(&self) -> usize {
        self.revealed.len()
    }

    fn reveal(&mut self, feature: usize, value: f64, scores: Vec<(usize, f64)>) {
        self.x[feature] = value;
        self.revealed.push(feature);
        self.unrevealed.retain(|&i| i != feature);
        self.trace.push(TraceStep {
            chosen: feature,
            scores,
        });
    }
}

/// Number of sensitive features disclosed.
pub fn leakage(state: &RevealState) -> usize {
    state.revealed.len()
}

/// Supplies the true value of a sensitive feature on request.
pub trait ValueOracle {
    fn value(&mut self, feature: usize) -> Result<f64>;
}

impl<F: FnMut(usize) -> Result<f64>> ValueOracle for F {
    fn value(&mut self, feature: usize) -> Result<f64> {
        self(feature)
    }
}

/// Final certificate and disclosure record of a run.
#[derive(Clone, Debug)]
pub struct PfrOutcome {
    pub result: CoreSetResult,
    pub state: RevealState,
}

/// A run stopped early; `state` holds everything disclosed before the error.
#[derive(Debug)]
pub struct Aborted {
    pub state: RevealState,
    pub error: Error,
}

impl std::fmt::Display for Aborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "aborted after {} reveals: {}", self.state.revealed.len(), self.error)
    }
}

impl std::error::Error for Aborted {}

pub struct Engine<'a> {
    model: &'a Model,
    prior: &'a GaussianPrior,
    space: &'a FeatureSpace,
    cfg: PfrConfig,
}

impl<'a> Engine<'a> {
    pub fn new(
        model: &'a Model,
        prior: &'a GaussianPrior,
        space: &'a FeatureSpace,
        cfg: PfrConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = space.dim();
        if model.dim() != d || prior.dim() != d {
            return Err(Error::Dimension(format!(
                "model has {} inputs, prior {} and feature space {d}",
                model.dim(),
                prior.dim()
            )));
        }
        Ok(Engine {
            model,
            prior,
            space,
            cfg,
        })
    }

    pub fn config(&self) -> &PfrConfig {
        &self.cfg
    }

    pub fn space(&self) -> &FeatureSpace {
        self.space
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn start(&self, x_public: &[f64]) -> Result<RevealState> {
        RevealState::new(self.space, x_public)
    }

    fn posterior(&self, state: &RevealState) -> Result<ConditionalGaussian> {
        let known = state.known();
        let vals: Vec<f64> = known.iter().map(|&i| state.x[i]).collect();
        self.prior
            .condition(&known, &vals, &state.unrevealed, self.cfg.jitter)
    }

    /// Tests the current revealed set with the method matching the model
    /// kind and `delta`. With `delta > 0` a set that passes the pure test is
    /// also accepted, so the stopping rule is monotone in `delta`.
    pub fn certify(&self, state: &RevealState, sample_id: u64) -> Result<CoreSetResult> {
        let hidden = &state.unrevealed;
        let revealed = &state.revealed;
        let delta = self.cfg.delta;
        let cert_seed = seed::derive(&[self.cfg.seed, sample_id, state.step() as u64, CERT_STREAM]);
        match self.model {
            Model::Linear(lin) => {
                let pure = pure_linear(lin, &state.x, hidden, revealed);
                if pure.is_core || delta == 0.0 {
                    return Ok(pure);
                }
                let cond = self.posterior(state)?;
                if lin.classes() == 2 {
                    let theta = lin.theta();
                    let affine = lin.bias()[0]
                        + state.known().iter().map(|&i| theta[i] * state.x[i]).sum::<f64>();
                    test_delta_linear(revealed, &theta, &cond, affine, delta)
                } else {
                    test_delta_mc(self.model, &cond, &state.x, delta, self.cfg.n_samples, cert_seed, revealed)
                }
            }
            Model::Mlp(_) => {
                let grid = || test_pure_grid(self.model, &state.x, hidden, self.cfg.grid, revealed);
                if delta == 0.0 {
                    if let Some(r) = grid() {
                        return Ok(r);
                    }
                    log::debug!(
                        "grid test inconclusive with {} hidden features; certifying at delta {}",
                        hidden.len(),
                        self.cfg.fallback_delta
                    );
                    let cond = self.posterior(state)?;
                    return test_delta_nonlinear(
                        self.model,
                        &cond,
                        &state.x,
                        self.cfg.fallback_delta,
                        self.cfg.n_samples,
                        cert_seed,
                        revealed,
                    );
                }
                let cond = self.posterior(state)?;
                let r = test_delta_nonlinear(
                    self.model,
                    &cond,
                    &state.x,
                    delta,
                    self.cfg.n_samples,
                    cert_seed,
                    revealed,
                )?;
                if r.is_core {
                    return Ok(r);
                }
                Ok(grid().filter(|g| g.is_core).unwrap_or(r))
            }
        }
    }

    /// Predictive label distribution under the current posterior: the
    /// threshold of the (linear or Taylor) score for binary models,
    /// Monte-Carlo frequencies otherwise.
    pub fn label_distribution(&self, state: &RevealState, sample_id: u64) -> Result<LabelDistribution> {
        if state.unrevealed.is_empty() {
            return Ok(LabelDistribution::point_mass(self.model.predict(&state.x), self.model.classes()));
        }
        let cond = self.posterior(state)?;
        match self.model {
            Model::Linear(lin) if lin.classes() == 2 => {
                let theta = lin.theta();
                let affine = lin.bias()[0]
                    + state.known().iter().map(|&i| theta[i] * state.x[i]).sum::<f64>();
                Ok(threshold_dist(linear_score_dist(&theta, &cond, affine)?))
            }
            Model::Mlp(_) if self.model.is_binary() => {
                Ok(threshold_dist(taylor_for(self.model, &cond, &state.x)?))
            }
            _ => {
                let s = seed::derive(&[self.cfg.seed, sample_id, state.step() as u64, CERT_STREAM]);
                mc_label_dist(self.model, &cond, &state.x, self.cfg.n_samples, s)
            }
        }
    }

    /// Re-runs the test named by `result.method` on the final state with a
    /// different seed and `sample_factor` times the Monte-Carlo budget.
    pub fn reverify(
        &self,
        state: &RevealState,
        result: &CoreSetResult,
        seed: u64,
        sample_factor: usize,
    ) -> Result<CoreSetResult> {
        let hidden = &state.unrevealed;
        let revealed = &state.revealed;
        match result.method {
            Method::PureLinear => match self.model {
                Model::Linear(lin) => Ok(pure_linear(lin, &state.x, hidden, revealed)),
                Model::Mlp(_) => Err(Error::Config("pure-linear result for a network".into())),
            },
            Method::PureGrid => test_pure_grid(self.model, &state.x, hidden, self.cfg.grid, revealed)
                .ok_or_else(|| Error::Config("grid test inconclusive on re-verification".into())),
            Method::DeltaLinear => match self.model {
                Model::Linear(lin) => {
                    let theta = lin.theta();
                    let affine = lin.bias()[0]
                        + state.known().iter().map(|&i| theta[i] * state.x[i]).sum::<f64>();
                    test_delta_linear(revealed, &theta, &self.posterior(state)?, affine, result.delta)
                }
                Model::Mlp(_) => Err(Error::Config("delta-linear result for a network".into())),
            },
            Method::DeltaTaylor => test_delta_nonlinear(
                self.model,
                &self.posterior(state)?,
                &state.x,
                result.delta,
                self.cfg.n_samples,
                seed,
                revealed,
            ),
            Method::DeltaMc => test_delta_mc(
                self.model,
                &self.posterior(state)?,
                &state.x,
                result.delta,
                self.cfg.n_samples * sample_factor,
                seed,
                revealed,
            ),
        }
    }

    /// `F(X_j)` for one hidden feature.
    pub fn score_feature(&self, j: usize, state: &RevealState, sample_id: u64) -> Result<f64> {
        let pos = state
            .unrevealed
            .iter()
            .position(|&i| i == j)
            .ok_or_else(|| Error::Config(format!("feature {j} is not hidden")))?;
        let joint = self.posterior(state)?;
        self.score_with(&joint, pos, state, sample_id)
    }

    /// Scores every hidden feature, ascending by index.
    pub fn score_all(&self, state: &RevealState, sample_id: u64) -> Result<Vec<(usize, f64)>> {
        let joint = self.posterior(state)?;
        (0..state.unrevealed.len())
            .map(|pos| Ok((state.unrevealed[pos], self.score_with(&joint, pos, state, sample_id)?)))
            .collect()
    }

    fn score_with(
        &self,
        joint: &ConditionalGaussian,
        pos: usize,
        state: &RevealState,
        sample_id: u64,
    ) -> Result<f64> {
        let split = joint.pivot(pos);
        let j = split.pivot_feature;
        let stream = seed::derive(&[self.cfg.seed, sample_id, state.step() as u64, j as u64]);
        let zs = split.pivot_marginal().sample(self.cfg.n_samples, stream);
        let t = zs.nrows();
        let rest = &split.rest;

        let total: f64 = match self.model {
            Model::Linear(lin) if lin.classes() == 2 => {
                let theta = lin.theta();
                let theta_rest = DVector::from_iterator(rest.dim(), rest.target_idx().iter().map(|&i| theta[i]));
                let affine = lin.bias()[0]
                    + state.known().iter().map(|&i| theta[i] * state.x[i]).sum::<f64>()
                    + theta_rest.dot(rest.mean());
                let slope = theta_rest.dot(&split.gain);
                let var = (rest.cov() * &theta_rest).dot(&theta_rest);
                zs.column(0)
                    .iter()
                    .map(|&z| {
                        let mean = affine + theta[j] * z + slope * (z - split.pivot_mean);
                        binary_entropy(ScoreDistribution::new(mean, var))
                    })
                    .sum()
            }
            Model::Mlp(_) if self.model.is_binary() => {
                let mut total = 0.0;
                let mut x = state.x.clone();
                for &z in zs.column(0).iter() {
                    x[j] = z;
                    let sd = taylor_for(self.model, &split.given(z), &x)?;
                    total += binary_entropy(sd);
                }
                total
            }
            _ => {
                let mut total = 0.0;
                let mut x = state.x.clone();
                for (k, &z) in zs.column(0).iter().enumerate() {
                    x[j] = z;
                    let inner = seed::derive(&[stream, k as u64]);
                    let ld = mc_label_dist(self.model, &split.given(z), &x, self.cfg.score_mc_samples, inner)?;
                    total += entropy(&ld);
                }
                total
            }
        };
        Ok(-total / t as f64)
    }

    /// Runs the certify-or-reveal loop for one sample.
    pub fn run<O: ValueOracle + ?Sized>(
        &self,
        sample_id: u64,
        x_public: &[f64],
        oracle: &mut O,
    ) -> std::result::Result<PfrOutcome, Aborted> {
        let mut state = match self.start(x_public) {
            Ok(s) => s,
            Err(error) => {
                return Err(Aborted {
                    state: RevealState {
                        public: Vec::new(),
                        x: Vec::new(),
                        revealed: Vec::new(),
                        unrevealed: Vec::new(),
                        trace: Vec::new(),
                    },
                    error,
                })
            }
        };
        loop {
            match self.advance(&mut state, sample_id, oracle) {
                Ok(Some(result)) => return Ok(PfrOutcome { result, state }),
                Ok(None) => {}
                Err(error) => return Err(Aborted { state, error }),
            }
        }
    }

    /// One iteration: returns the certificate when done, otherwise reveals
    /// the best-scoring feature.
    pub fn advance<O: ValueOracle + ?Sized>(
        &self,
        state: &mut RevealState,
        sample_id: u64,
        oracle: &mut O,
    ) -> Result<Option<CoreSetResult>> {
        let cert = self.certify(state, sample_id)?;
        if cert.is_core {
            return Ok(Some(cert));
        }
        if state.unrevealed.is_empty() {
            // every test certifies an empty hidden set; kept for safety
            let label = self.model.predict(&state.x);
            return Ok(Some(CoreSetResult {
                revealed: state.revealed.clone(),
                repr_label: Some(label),
                delta: 0.0,
                is_core: true,
                method: cert.method,
                label_dist: Some(LabelDistribution::point_mass(label, self.model.classes())),
            }));
        }
        let scores = self.score_all(state, sample_id)?;
        let (best, _) = scores
            .iter()
            .copied()
            .fold(None, |acc: Option<(usize, f64)>, (i, f)| match acc {
                Some((_, bf)) if f <= bf => acc,
                _ => Some((i, f)),
            })
            .expect("at least one hidden feature");
        let value = oracle.value(best)?;
        if !value.is_finite() {
            return Err(Error::Oracle {
                feature: self.space.names()[best].clone(),
                message: format!("non-finite value {value}"),
            });
        }
        state.reveal(best, value, scores);
        Ok(None)
    }

    /// Runs one dataset row, answering the oracle from the row itself.
    pub fn audit_row(&self, sample_id: usize, row: &[f64], true_label: usize) -> Result<(AuditRecord, PfrOutcome)> {
        let mut oracle = |j: usize| -> Result<f64> { Ok(row[j]) };
        let outcome = self
            .run(sample_id as u64, row, &mut oracle)
            .map_err(|a| a.error)?;
        let record = AuditRecord {
            sample_id,
            delta: self.cfg.delta,
            revealed: outcome
                .state
                .revealed
                .iter()
                .map(|&i| self.space.names()[i].clone())
                .collect(),
            leakage: leakage(&outcome.state),
            repr_label: outcome.result.repr_label.expect("core result carries a label"),
            true_label,
            baseline_label: self.model.predict(row),
            method: outcome.result.method,
        };
        Ok((record, outcome))
    }

    /// Audits every row in parallel; output is ordered by row index.
    pub fn audit(&self, data: &Dataset) -> Result<Vec<(AuditRecord, PfrOutcome)>>
    where
        Self: Sync,
    {
        (0..data.len())
            .into_par_iter()
            .map(|i| self.audit_row(i, &data.rows()[i], data.labels()[i]))
            .collect()
    }
}

fn binary_entropy(sd: ScoreDistribution) -> f64 {
    if sd.var <= 0.0 {
        return 0.0;
    }
    let p = normal_cdf(sd.mean / sd.var.sqrt());
    let q = 1.0 - p;
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    if q > 0.0 {
        h -= q * q.ln();
    }
    h
}
