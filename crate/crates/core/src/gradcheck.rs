//! Exact gradient against central finite differences on random instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::gradient::{exact_gradient, finite_difference_gradient, FD_STEP};
use crate::mdp::{random_mdp, SoftmaxPolicy, StateDist, StateSpace};
use crate::rng::RngStream;

pub const GRADCHECK_THRESHOLD: f64 = 1e-6;

/// Gradients smaller than this in sup norm are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckOptions {
    pub trials: usize,
    /// Inclusive range of state counts.
    pub states: [usize; 2],
    /// Inclusive range of action counts.
    pub actions: [usize; 2],
    /// Inclusive range of discounts.
    pub gamma: [f64; 2],
    /// Regularization strengths drawn uniformly per trial.
    pub lambdas: Vec<f64>,
    /// Logits drawn uniformly from `[-scale, scale]`.
    pub theta_scale: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            states: [2, 8],
            actions: [2, 4],
            gamma: [0.5, 0.95],
            lambdas: vec![0.0, 0.1, 1.0],
            theta_scale: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckTrial {
    pub index: usize,
    pub states: usize,
    pub actions: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub grad_inf: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub trials: Vec<GradcheckTrial>,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

/// `||a - b||_inf / max(||a||_inf, ||b||_inf, RELATIVE_FLOOR)`.
pub fn normwise_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / inf(a).max(inf(b)).max(RELATIVE_FLOOR)
}

fn validate(opts: &GradcheckOptions) -> Result<()> {
    if opts.trials == 0 {
        return Err(domain("gradcheck needs at least one trial"));
    }
    if opts.states[0] == 0 || opts.states[0] > opts.states[1] {
        return Err(domain(format!("bad state range {:?}", opts.states)));
    }
    if opts.actions[0] == 0 || opts.actions[0] > opts.actions[1] {
        return Err(domain(format!("bad action range {:?}", opts.actions)));
    }
    if !(opts.gamma[0] > 0.0 && opts.gamma[0] <= opts.gamma[1] && opts.gamma[1] < 1.0) {
        return Err(domain(format!("bad discount range {:?}", opts.gamma)));
    }
    if opts.lambdas.is_empty() || opts.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(domain("lambdas must be a nonempty list of nonnegative numbers"));
    }
    if !(opts.theta_scale.is_finite() && opts.theta_scale >= 0.0) {
        return Err(domain("theta_scale must be nonnegative"));
    }
    Ok(())
}

pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    validate(opts)?;
    let root = RngStream::new(opts.seed);
    let mut trials = Vec::with_capacity(opts.trials);
    for index in 0..opts.trials {
        let mut rng = root.child(index as u64).rng();
        let n = rng.random_range(opts.states[0]..=opts.states[1]);
        let na = rng.random_range(opts.actions[0]..=opts.actions[1]);
        let gamma = if opts.gamma[0] == opts.gamma[1] { opts.gamma[0] } else { rng.random_range(opts.gamma[0]..=opts.gamma[1]) };
        let lambda = opts.lambdas[rng.random_range(0..opts.lambdas.len())];
        let mdp = random_mdp(&mut rng, n, na, gamma);
        let theta = (0..n * na).map(|_| rng.random_range(-1.0..=1.0) * opts.theta_scale).collect();
        let space = std::sync::Arc::new(StateSpace::clone(mdp.states()));
        let policy = SoftmaxPolicy::from_theta(space, na, theta)?;
        let weights: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = weights.iter().sum();
        let init = StateDist::new(weights.iter().map(|w| w / total).collect())?;
        let exact = exact_gradient(&mdp, &policy, &init, lambda)?;
        let fd = finite_difference_gradient(&mdp, &policy, &init, lambda, FD_STEP)?;
        trials.push(GradcheckTrial {
            index,
            states: n,
            actions: na,
            gamma,
            lambda,
            grad_inf: exact.norm_inf(),
            rel_error: normwise_relative_error(exact.values(), fd.values()),
        });
    }
    let max_rel_error = trials.iter().fold(0.0f64, |m, t| m.max(t.rel_error));
    Ok(GradcheckReport { trials, max_rel_error, threshold: GRADCHECK_THRESHOLD })
}
