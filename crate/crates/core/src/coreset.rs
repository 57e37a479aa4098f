//! Core feature set verification and the exhaustive minimum-core baseline.
//!
//! A revealed set `R` is *core* when the model output is `y` with
//! probability at least `1 - delta` over the still-hidden features; with
//! `delta = 0` the output must be constant over the whole box `[-1, 1]^|U|`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::ConditionalGaussian;
use crate::models::{label_from_scores, LinearModel, Model};
use crate::predictive::{
    linear_score_dist, mc_label_dist, taylor_for, threshold_dist, LabelDistribution,
};

/// Largest subset enumeration `opt_min_core` accepts.
pub const OPT_MAX_SENSITIVE: usize = 20;

/// How a verdict was reached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    PureLinear,
    DeltaLinear,
    PureGrid,
    DeltaTaylor,
    DeltaMc,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::PureLinear => "pure-linear",
            Method::DeltaLinear => "delta-linear",
            Method::PureGrid => "pure-grid",
            Method::DeltaTaylor => "delta-taylor",
            Method::DeltaMc => "delta-mc",
        }
    }

    pub fn is_pure(self) -> bool {
        matches!(self, Method::PureLinear | Method::PureGrid)
    }

    pub fn is_monte_carlo(self) -> bool {
        self == Method::DeltaMc
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome of a core-set test.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreSetResult {
    /// Revealed sensitive feature indices.
    pub revealed: Vec<usize>,
    pub repr_label: Option<usize>,
    pub delta: f64,
    pub is_core: bool,
    pub method: Method,
    /// Label distribution the verdict was based on. Pure tests report a
    /// point mass when core and nothing otherwise.
    pub label_dist: Option<LabelDistribution>,
}

impl CoreSetResult {
    /// Probability of the representative (or most likely) label.
    pub fn confidence(&self) -> Option<f64> {
        self.label_dist.as_ref().map(|ld| ld.mode().1)
    }

    fn pure(revealed: &[usize], label: Option<usize>, classes: usize, method: Method) -> Self {
        CoreSetResult {
            revealed: revealed.to_vec(),
            repr_label: label,
            delta: 0.0,
            is_core: label.is_some(),
            method,
            label_dist: label.map(|y| LabelDistribution::point_mass(y, classes)),
        }
    }

    fn from_dist(revealed: &[usize], ld: LabelDistribution, delta: f64, method: Method) -> Self {
        let (label, p) = ld.mode();
        let is_core = p >= 1.0 - delta;
        CoreSetResult {
            revealed: revealed.to_vec(),
            repr_label: is_core.then_some(label),
            delta,
            is_core,
            method,
            label_dist: Some(ld),
        }
    }
}

pub(crate) fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..0.5).contains(&delta) {
        return Err(Error::Config(format!(
            "failure probability delta must be in [0, 0.5), got {delta}"
        )));
    }
    Ok(())
}

/// Pure test for a binary linear model over the box.
///
/// `revealed_affine` is `theta_known . x_known + bias` and `theta_u` the
/// weights of the hidden features; the score ranges over
/// `revealed_affine +/- ||theta_u||_1`.
pub fn test_pure_linear(revealed: &[usize], theta_u: &[f64], revealed_affine: f64) -> CoreSetResult {
    let radius: f64 = theta_u.iter().map(|t| t.abs()).sum();
    let (lo, hi) = (revealed_affine - radius, revealed_affine + radius);
    let label = if lo >= 0.0 {
        Some(1)
    } else if hi < 0.0 {
        Some(0)
    } else {
        None
    };
    CoreSetResult::pure(revealed, label, 2, Method::PureLinear)
}

/// Pure test for any linear model, binary or multi-class. `x` holds the
/// known values; entries at `hidden` are ignored.
///
/// For `L > 2` every pairwise score difference is linear, so the arg-max is
/// constant over the box iff each difference against the candidate label
/// keeps its sign (strictly, for lower-indexed rivals that would win a tie).
pub fn pure_linear(model: &LinearModel, x: &[f64], hidden: &[usize], revealed: &[usize]) -> CoreSetResult {
    let w = model.weights();
    let b = model.bias();
    let known_mask = hidden_mask(x.len(), hidden);
    let affine = |r: usize| -> f64 {
        b[r] + (0..x.len())
            .filter(|&j| known_mask[j])
            .map(|j| w[(r, j)] * x[j])
            .sum::<f64>()
    };
    if model.classes() == 2 {
        let theta_u: Vec<f64> = hidden.iter().map(|&j| w[(0, j)]).collect();
        return test_pure_linear(revealed, &theta_u, affine(0));
    }
    let affines: Vec<f64> = (0..model.classes()).map(affine).collect();
    // candidate: label with hidden features at the box centre
    let cand = label_from_scores(&affines);
    let constant = (0..model.classes()).filter(|&k| k != cand).all(|k| {
        let radius: f64 = hidden.iter().map(|&j| (w[(cand, j)] - w[(k, j)]).abs()).sum();
        let min_gap = affines[cand] - affines[k] - radius;
        if k < cand {
            min_gap > 0.0
        } else {
            min_gap >= 0.0
        }
    });
    CoreSetResult::pure(revealed, constant.then_some(cand), model.classes(), Method::PureLinear)
}

fn hidden_mask(d: usize, hidden: &[usize]) -> Vec<bool> {
    let mut known = vec![true; d];
    for &j in hidden {
        known[j] = false;
    }
    known
}

/// Probabilistic test for a binary linear model: `p = Phi(m_f / sigma_f)`
/// and core iff `max(p, 1 - p) >= 1 - delta`.
pub fn test_delta_linear(
    revealed: &[usize],
    theta: &[f64],
    cond: &ConditionalGaussian,
    revealed_affine: f64,
    delta: f64,
) -> Result<CoreSetResult> {
    check_delta(delta)?;
    let sd = linear_score_dist(theta, cond, revealed_affine)?;
    Ok(CoreSetResult::from_dist(revealed, threshold_dist(sd), delta, Method::DeltaLinear))
}

/// Grid parameters for the pure test of non-linear models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    /// Robustness radius: inputs within this sup-norm distance share a label.
    pub delta_robust: f64,
    /// Maximum number of hidden dimensions enumerated.
    pub cap: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            delta_robust: 0.2,
            cap: 6,
        }
    }
}

/// Evenly spaced points on `[-1, 1]` with spacing at most `2 * delta_robust`,
/// endpoints included, so every box point is within `delta_robust` of one.
pub fn grid_points(delta_robust: f64) -> Vec<f64> {
    // guard against 1/0.2 landing a hair above 5
    let g = ((1.0 / delta_robust) - 1e-9).ceil() as usize + 1;
    let g = g.max(2);
    (0..g)
        .map(|i| -1.0 + 2.0 * i as f64 / (g - 1) as f64)
        .collect()
}

/// Pure test by enumerating grid completions of the hidden features.
/// Returns `None` (inconclusive) when more than `grid.cap` features are hidden.
pub fn test_pure_grid(
    model: &Model,
    x_fixed: &[f64],
    hidden: &[usize],
    grid: GridParams,
    revealed: &[usize],
) -> Option<CoreSetResult> {
    if hidden.len() > grid.cap {
        return None;
    }
    let pts = grid_points(grid.delta_robust);
    let g = pts.len();
    let mut x = x_fixed.to_vec();
    let mut digits = vec![0usize; hidden.len()];
    for &j in hidden {
        x[j] = pts[0];
    }
    let first = model.predict(&x);
    loop {
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == digits.len() {
                return Some(CoreSetResult::pure(revealed, Some(first), model.classes(), Method::PureGrid));
            }
            digits[pos] += 1;
            if digits[pos] < g {
                x[hidden[pos]] = pts[digits[pos]];
                break;
            }
            digits[pos] = 0;
            x[hidden[pos]] = pts[0];
            pos += 1;
        }
        if model.predict(&x) != first {
            return Some(CoreSetResult::pure(revealed, None, model.classes(), Method::PureGrid));
        }
    }
}

/// Probabilistic test for non-linear models: Taylor + threshold for binary
/// networks, Monte-Carlo class frequencies otherwise.
pub fn test_delta_nonlinear(
    model: &Model,
    cond: &ConditionalGaussian,
    x_fixed: &[f64],
    delta: f64,
    n_samples: usize,
    seed: u64,
    revealed: &[usize],
) -> Result<CoreSetResult> {
    check_delta(delta)?;
    if model.is_binary() {
        let sd = taylor_for(model, cond, x_fixed)?;
        Ok(CoreSetResult::from_dist(revealed, threshold_dist(sd), delta, Method::DeltaTaylor))
    } else {
        test_delta_mc(model, cond, x_fixed, delta, n_samples, seed, revealed)
    }
}

/// Monte-Carlo test for any model.
pub fn test_delta_mc(
    model: &Model,
    cond: &ConditionalGaussian,
    x_fixed: &[f64],
    delta: f64,
    n_samples: usize,
    seed: u64,
    revealed: &[usize],
) -> Result<CoreSetResult> {
    check_delta(delta)?;
    let ld = mc_label_dist(model, cond, x_fixed, n_samples, seed)?;
    Ok(CoreSetResult::from_dist(revealed, ld, delta, Method::DeltaMc))
}

/// Pure test by model kind: box extrema for linear models, grid otherwise.
pub fn test_pure(
    model: &Model,
    x: &[f64],
    hidden: &[usize],
    grid: GridParams,
    revealed: &[usize],
) -> Option<CoreSetResult> {
    match model {
        Model::Linear(m) => Some(pure_linear(m, x, hidden, revealed)),
        Model::Mlp(_) => test_pure_grid(model, x, hidden, grid, revealed),
    }
}

/// Lexicographic k-subsets of `0..n`.
pub(crate) fn for_each_subset<F: FnMut(&[usize]) -> bool>(n: usize, k: usize, mut f: F) -> bool {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        if f(&idx) {
            return true;
        }
        // advance
        let mut i = k;
        loop {
            if i == 0 {
                return false;
            }
            i -= 1;
            if idx[i] < n - k + i {
                idx[i] += 1;
                for t in i + 1..k {
                    idx[t] = idx[t - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Smallest pure core set for a fully known sample, trying subsets of the
/// sensitive features by increasing size and lexicographically within a size.
pub fn opt_min_core(
    model: &Model,
    x: &[f64],
    sensitive: &[usize],
    grid: GridParams,
) -> Result<CoreSetResult> {
    if sensitive.len() > OPT_MAX_SENSITIVE {
        return Err(Error::Config(format!(
            "exhaustive search refuses {} sensitive features (limit {OPT_MAX_SENSITIVE})",
            sensitive.len()
        )));
    }
    let s = sensitive.len();
    for k in 0..=s {
        let mut found = None;
        for_each_subset(s, k, |pos| {
            let revealed: Vec<usize> = pos.iter().map(|&p| sensitive[p]).collect();
            let hidden: Vec<usize> = sensitive.iter().copied().filter(|i| !revealed.contains(i)).collect();
            match test_pure(model, x, &hidden, grid, &revealed) {
                Some(r) if r.is_core => {
                    found = Some(r);
                    true
                }
                _ => false,
            }
        });
        if let Some(r) = found {
            return Ok(r);
        }
    }
    unreachable!("revealing every sensitive feature always yields a pure core set")
}
