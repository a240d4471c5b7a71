//! Optimal reference policy for a suite.
//!
//! Suites whose tasks share one kernel, one discount and one `rho` reduce to a
//! single MDP with summed rewards, which policy iteration solves exactly.
//! Everything else falls back to centralized gradient ascent with a decaying
//! regularizer.

use crate::error::Result;
use crate::mdp::{PolicyEvaluation, PolicyTable, SoftmaxPolicy, TabularMdp};
use crate::suite::{Init, Suite};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    PolicyIteration,
    GradientAscent,
}

#[derive(Debug, Clone)]
pub struct Oracle {
    pub policy: PolicyTable,
    /// `sum_i V_i(rho_i)` under `policy`.
    pub value: f64,
    pub method: OracleMethod,
}

const PI_MAX_ITERS: usize = 10_000;

/// Exact optimum when the suite collapses to one MDP; `None` otherwise.
pub fn policy_iteration(suite: &Suite) -> Result<Option<Oracle>> {
    let tasks = suite.tasks();
    let first = &tasks[0];
    let gamma = first.mdp.gamma();
    if !suite.shared_dynamics()
        || tasks.iter().any(|t| t.mdp.gamma() != gamma || t.rho.probs() != first.rho.probs())
    {
        return Ok(None);
    }
    let n = suite.num_states();
    let na = suite.num_actions();
    let mut reward = vec![0.0; n * na];
    for t in tasks {
        for (acc, r) in reward.iter_mut().zip(t.mdp.rewards()) {
            *acc += r;
        }
    }
    let summed = TabularMdp::new(first.mdp.states().clone(), na, first.mdp.transitions().to_vec(), reward, gamma)?;
    let mut actions = vec![0usize; n];
    for _ in 0..PI_MAX_ITERS {
        let table = PolicyTable::deterministic(suite.space().clone(), na, &actions)?;
        let eval = PolicyEvaluation::new(&summed, &table)?;
        let q = eval.q();
        let mut changed = false;
        for (s, current) in actions.iter_mut().enumerate() {
            let row = &q[s * na..(s + 1) * na];
            let (best, &qbest) = row
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            let qcur = row[*current];
            if qbest > qcur + 1e-12 * (1.0 + qcur.abs()) {
                *current = best;
                changed = true;
            }
        }
        if !changed {
            let value = suite.sum_value(&table)?;
            return Ok(Some(Oracle { policy: table, value, method: OracleMethod::PolicyIteration }));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone)]
pub struct AscentResult {
    pub policy: SoftmaxPolicy,
    /// l2 norm of the final gradient.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_STEP: f64 = 1e8;

/// Centralized ascent on `suite.objective(., lambda, which)` with Armijo
/// backtracking. Stops once the gradient l2 norm is at most `tol`.
pub fn centralized_ascent(
    suite: &Suite,
    start: SoftmaxPolicy,
    lambda: f64,
    which: Init,
    tol: f64,
    max_iters: usize,
) -> Result<AscentResult> {
    let mut policy = start;
    let mut f = suite.objective(&policy, lambda, which)?;
    let mut g = suite.gradient(&policy, lambda, which)?;
    let mut step = 1.0;
    for it in 0..max_iters {
        let gn2: f64 = g.iter().map(|x| x * x).sum();
        let gn = gn2.sqrt();
        if gn <= tol {
            return Ok(AscentResult { policy, grad_norm: gn, iterations: it, converged: true });
        }
        loop {
            let theta: Vec<f64> = policy.theta().iter().zip(&g).map(|(t, d)| t + step * d).collect();
            let trial = SoftmaxPolicy::from_theta(policy.space().clone(), policy.num_actions(), theta)?;
            let ft = suite.objective(&trial, lambda, which)?;
            // Near a stationary point the sufficient increase drops below the
            // rounding of f itself; allow that much slack.
            let slack = 4.0 * f64::EPSILON * f.abs().max(1.0);
            if ft + slack >= f + ARMIJO_C * step * gn2 {
                let gt = suite.gradient(&trial, lambda, which)?;
                if ft >= f || gt.iter().map(|x| x * x).sum::<f64>() < gn2 {
                    policy = trial;
                    f = ft;
                    g = gt;
                    step = (step * 2.0).min(MAX_STEP);
                    break;
                }
            }
            step *= 0.5;
            if step < 1e-20 {
                return Ok(AscentResult { policy, grad_norm: gn, iterations: it, converged: false });
            }
        }
    }
    let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(AscentResult { policy, grad_norm: gn, iterations: max_iters, converged: gn <= tol })
}

const ENUMERATION_LIMIT: usize = 4096;
const REFINE_STATES: usize = 6;

/// Best available maximizer of `sum_i V_i(rho_i)`.
pub fn optimal_policy(suite: &Suite) -> Result<Oracle> {
    if let Some(o) = policy_iteration(suite)? {
        return Ok(o);
    }
    let n = suite.num_states();
    let na = suite.num_actions();
    let mut policy = suite.zeros();
    let mut lambda = 0.1;
    while lambda > 1e-9 {
        policy = centralized_ascent(suite, policy, lambda, Init::Rho, 1e-10, 20_000)?.policy;
        lambda *= 0.1;
    }
    policy = centralized_ascent(suite, policy, 0.0, Init::Rho, 1e-12, 50_000)?.policy;
    if n <= REFINE_STATES {
        policy = coordinate_refine(suite, policy)?;
    }
    let mut best = policy.table();
    let mut best_value = suite.sum_value(&best)?;

    // Small suites: a deterministic policy may beat a stalled ascent.
    if let Some(count) = (0..n).try_fold(1usize, |acc, _| acc.checked_mul(na)) {
        if count <= ENUMERATION_LIMIT {
            let mut actions = vec![0usize; n];
            for mut code in 0..count {
                for a in actions.iter_mut() {
                    *a = code % na;
                    code /= na;
                }
                let table = PolicyTable::deterministic(suite.space().clone(), na, &actions)?;
                let v = suite.sum_value(&table)?;
                if v > best_value {
                    best_value = v;
                    best = table;
                }
            }
        }
    }
    Ok(Oracle { policy: best, value: best_value, method: OracleMethod::GradientAscent })
}

/// Pattern search over single logits on the unregularized objective.
fn coordinate_refine(suite: &Suite, mut policy: SoftmaxPolicy) -> Result<SoftmaxPolicy> {
    let mut f = suite.objective(&policy, 0.0, Init::Rho)?;
    let mut delta = 4.0;
    while delta > 1e-7 {
        let mut improved = false;
        for idx in 0..policy.theta().len() {
            for sign in [1.0, -1.0] {
                let mut theta = policy.theta().to_vec();
                theta[idx] += sign * delta;
                let trial = SoftmaxPolicy::from_theta(policy.space().clone(), policy.num_actions(), theta)?;
                let ft = suite.objective(&trial, 0.0, Init::Rho)?;
                if ft > f {
                    f = ft;
                    policy = trial;
                    improved = true;
                }
            }
        }
        if !improved {
            delta *= 0.5;
        }
    }
    Ok(policy)
}
