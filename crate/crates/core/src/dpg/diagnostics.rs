//! Distribution-mismatch ratios, mismatch coefficient and optimality gap.

use crate::error::Result;
use crate::mdp::Policy;
use crate::suite::Suite;

/// Ratios `d_{i,rho_i}^{ref}(s) / d_{i,mu_i}^{eval}(s)` at one union state,
/// one entry per task containing `s`. `None` marks a zero denominator.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMismatch {
    pub state: String,
    pub ratios: Vec<(usize, Option<f64>)>,
    /// Largest minus smallest supported ratio.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MismatchReport {
    /// States shared by at least two tasks.
    pub states: Vec<StateMismatch>,
    pub max_spread: f64,
    pub unsupported: Vec<String>,
    pub tolerance: f64,
}

impl MismatchReport {
    /// The ratios agree across tasks on every shared, supported state.
    pub fn holds(&self) -> bool {
        self.max_spread <= self.tolerance
    }
}

pub const MISMATCH_TOL: f64 = 1e-9;

pub fn distribution_mismatch(suite: &Suite, reference: &impl Policy, eval: &impl Policy) -> Result<MismatchReport> {
    let reference = reference.to_table();
    let eval = eval.to_table();
    let n = suite.num_states();
    // ratios[s] collects (task, ratio) for every task containing s.
    let mut ratios: Vec<Vec<(usize, Option<f64>)>> = vec![Vec::new(); n];
    for (i, task) in suite.tasks().iter().enumerate() {
        let num = task.evaluate(&reference)?.visitation(&task.rho)?;
        let den = task.evaluate(&eval)?.visitation(&task.mu)?;
        for (s, &g) in task.embedding().iter().enumerate() {
            let r = if den[s] > 0.0 { Some(num[s] / den[s]) } else { None };
            ratios[g].push((i, r));
        }
    }
    let mut states = Vec::new();
    let mut unsupported = Vec::new();
    let mut max_spread: f64 = 0.0;
    for (g, r) in ratios.into_iter().enumerate() {
        if r.len() < 2 {
            continue;
        }
        let supported: Vec<f64> = r.iter().filter_map(|(_, x)| *x).collect();
        if supported.len() < r.len() {
            unsupported.push(suite.space().id(g).to_string());
        }
        let spread = if supported.is_empty() {
            0.0
        } else {
            let hi = supported.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = supported.iter().copied().fold(f64::INFINITY, f64::min);
            hi - lo
        };
        max_spread = max_spread.max(spread);
        states.push(StateMismatch { state: suite.space().id(g).to_string(), ratios: r, spread });
    }
    Ok(MismatchReport { states, max_spread, unsupported, tolerance: MISMATCH_TOL })
}

/// `max_{s, j} d_{j,rho_j}^{oracle}(s) / ((1 - gamma_j) mu_j(s))`. Infinite when
/// the oracle visits a state that `mu_j` does not cover.
pub fn mismatch_coefficient(suite: &Suite, oracle: &impl Policy) -> Result<f64> {
    let table = oracle.to_table();
    let mut worst: f64 = 0.0;
    for task in suite.tasks() {
        let d = task.evaluate(&table)?.visitation(&task.rho)?;
        let scale = 1.0 - task.mdp.gamma();
        for (ds, mu) in d.iter().zip(task.mu.probs()) {
            if *ds <= 0.0 {
                continue;
            }
            worst = worst.max(if *mu > 0.0 { ds / (scale * mu) } else { f64::INFINITY });
        }
    }
    Ok(worst)
}

/// `V(oracle; rho) - V(policy; rho)` with `V` the sum over tasks.
pub fn optimality_gap(suite: &Suite, policy: &impl Policy, oracle: &impl Policy) -> Result<f64> {
    Ok(suite.sum_value(oracle)? - suite.sum_value(policy)?)
}
