//! Exact, finite-difference and score-function gradients of the per-task
//! regularized objective `V(init) - lambda * RE`.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{domain, Result};
use crate::mdp::{relative_entropy, PolicyEvaluation, PolicyTable, SoftmaxPolicy, StateDist, StateSpace, TabularMdp};
use crate::rng::RngStream;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradient with the same shape as a `SoftmaxPolicy`'s theta.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTable {
    space: Arc<StateSpace>,
    num_actions: usize,
    values: Vec<f64>,
}

impl GradientTable {
    pub fn zeros(space: Arc<StateSpace>, num_actions: usize) -> Self {
        let values = vec![0.0; space.len() * num_actions];
        Self { space, num_actions, values }
    }

    pub fn from_values(space: Arc<StateSpace>, num_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != space.len() * num_actions {
            return Err(domain("gradient shape mismatch"));
        }
        Ok(Self { space, num_actions, values })
    }

    pub fn space(&self) -> &Arc<StateSpace> {
        &self.space
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.values.iter().map(|x| x.abs()).sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn add_assign(&mut self, other: &GradientTable) {
        assert_eq!(self.values.len(), other.values.len(), "gradient shape mismatch");
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += y;
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("lambda must be a finite nonnegative number, got {lambda}")))
    }
}

/// `V(init) - lambda * RE(pi)`.
pub fn regularized_objective(mdp: &TabularMdp, policy: &SoftmaxPolicy, init: &StateDist, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let eval = PolicyEvaluation::new(mdp, &policy.table())?;
    let reg = if lambda == 0.0 { 0.0 } else { lambda * relative_entropy(policy) };
    Ok(eval.value(init) - reg)
}

/// Adds `d(s) pi(a|s) A(s,a) / (1-gamma)` into the union-space table `out`.
pub(crate) fn add_value_gradient(eval: &PolicyEvaluation, init: &StateDist, out: &mut [f64]) -> Result<()> {
    let d = eval.visitation(init)?;
    let adv = eval.advantage();
    let na = eval.num_actions();
    let scale = 1.0 / (1.0 - eval.gamma());
    let probs = eval.probs();
    for (s, &gs) in eval.embedding().iter().enumerate() {
        let w = d[s] * scale;
        for a in 0..na {
            out[gs * na + a] += w * probs[s * na + a] * adv[s * na + a];
        }
    }
    Ok(())
}

/// Adds `(lambda/|S|)(1/|A| - pi(a|s))` over every union state into `out`.
pub(crate) fn add_regularizer_gradient(table: &PolicyTable, lambda: f64, out: &mut [f64]) {
    if lambda == 0.0 {
        return;
    }
    let na = table.num_actions();
    let scale = lambda / table.space().len() as f64;
    let uniform = 1.0 / na as f64;
    for (o, p) in out.iter_mut().zip(table.probs()) {
        *o += scale * (uniform - p);
    }
}

/// Gradient of `-lambda * RE` alone.
pub fn regularizer_gradient(policy: &SoftmaxPolicy, lambda: f64) -> Result<GradientTable> {
    check_lambda(lambda)?;
    let mut g = GradientTable::zeros(policy.space().clone(), policy.num_actions());
    add_regularizer_gradient(&policy.table(), lambda, &mut g.values);
    Ok(g)
}

/// Closed-form gradient of `regularized_objective` with respect to theta.
/// Union states outside the task receive only the regularizer term.
pub fn exact_gradient(mdp: &TabularMdp, policy: &SoftmaxPolicy, init: &StateDist, lambda: f64) -> Result<GradientTable> {
    check_lambda(lambda)?;
    let table = policy.table();
    let eval = PolicyEvaluation::new(mdp, &table)?;
    let mut g = GradientTable::zeros(policy.space().clone(), policy.num_actions());
    add_value_gradient(&eval, init, &mut g.values)?;
    add_regularizer_gradient(&table, lambda, &mut g.values);
    Ok(g)
}

/// Coordinate-wise central differences of `f` at `x`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

pub fn finite_difference_gradient(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    init: &StateDist,
    lambda: f64,
    h: f64,
) -> Result<GradientTable> {
    check_lambda(lambda)?;
    let space = policy.space().clone();
    let na = policy.num_actions();
    let values = central_difference(
        |theta| {
            let p = SoftmaxPolicy::from_theta(space.clone(), na, theta.to_vec())?;
            regularized_objective(mdp, &p, init, lambda)
        },
        policy.theta(),
        h,
    )?;
    GradientTable::from_values(space, na, values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    /// Local state index within the generating task.
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub horizon: usize,
}

/// Truncation length after which the discounted tail is below `tol` (relative to `1/(1-gamma)`).
pub fn default_horizon(gamma: f64, tol: f64) -> usize {
    ((tol * (1.0 - gamma)).ln() / gamma.ln()).ceil().max(1.0) as usize
}

fn sample_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn local_probs(mdp: &TabularMdp, table: &PolicyTable) -> Result<Vec<f64>> {
    if table.num_actions() != mdp.num_actions() {
        return Err(domain("policy and task disagree on the action count"));
    }
    let embedding = mdp.embedding(table.space())?;
    Ok(embedding.iter().flat_map(|&g| table.row(g).iter().copied()).collect())
}

/// True for absorbing states that pay nothing, where a rollout can stop early.
fn dead_states(mdp: &TabularMdp) -> Vec<bool> {
    (0..mdp.num_states())
        .map(|s| mdp.is_absorbing(s) && (0..mdp.num_actions()).all(|a| mdp.r(s, a) == 0.0))
        .collect()
}

fn sample_with<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    probs: &[f64],
    init: &StateDist,
    horizon: usize,
    dead: Option<&[bool]>,
    rng: &mut R,
) -> Trajectory {
    let na = mdp.num_actions();
    let mut s = sample_index(rng, init.probs());
    let mut steps = Vec::with_capacity(horizon.min(1024));
    for _ in 0..horizon {
        if dead.is_some_and(|d| d[s]) {
            break;
        }
        let a = sample_index(rng, &probs[s * na..(s + 1) * na]);
        steps.push(Step { state: s, action: a, reward: mdp.r(s, a) });
        s = sample_index(rng, mdp.transition_row(s, a));
    }
    Trajectory { steps, horizon }
}

/// Samples `s0 ~ init`, `a ~ pi`, `s' ~ P` for exactly `horizon` steps.
pub fn sample_trajectory<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    init: &StateDist,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(domain("horizon must be at least 1"));
    }
    if init.len() != mdp.num_states() {
        return Err(domain("init distribution does not match the task's states"));
    }
    let probs = local_probs(mdp, policy)?;
    Ok(sample_with(mdp, &probs, init, horizon, None, rng))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReinforceOptions {
    pub batch: usize,
    /// `None` uses `default_horizon(gamma, 1e-3)`.
    pub horizon: Option<usize>,
    /// Constant subtracted from every return-to-go.
    pub baseline: f64,
}

impl Default for ReinforceOptions {
    fn default() -> Self {
        Self { batch: 16, horizon: None, baseline: 0.0 }
    }
}

/// Score-function estimate `mean over batch of sum_k gamma^k G_k grad log pi(a_k|s_k)`,
/// with `G_k` the every-visit discounted return-to-go, plus the exact
/// regularizer gradient. Trajectory `b` draws from `stream.child(b)`.
pub fn reinforce_gradient(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    init: &StateDist,
    lambda: f64,
    opts: &ReinforceOptions,
    stream: RngStream,
) -> Result<GradientTable> {
    check_lambda(lambda)?;
    if opts.batch == 0 {
        return Err(domain("batch must be at least 1"));
    }
    if init.len() != mdp.num_states() {
        return Err(domain("init distribution does not match the task's states"));
    }
    let gamma = mdp.gamma();
    let horizon = opts.horizon.unwrap_or_else(|| default_horizon(gamma, 1e-3));
    if horizon == 0 {
        return Err(domain("horizon must be at least 1"));
    }
    let table = policy.table();
    let probs = local_probs(mdp, &table)?;
    let embedding = mdp.embedding(policy.space())?;
    let dead = dead_states(mdp);
    let na = mdp.num_actions();
    let dim = policy.theta().len();

    let per_trajectory: Vec<Vec<f64>> = (0..opts.batch)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream.child(b as u64).rng();
            let traj = sample_with(mdp, &probs, init, horizon, Some(&dead), &mut rng);
            let mut g = vec![0.0; dim];
            let mut ret = 0.0;
            let mut returns = vec![0.0; traj.steps.len()];
            for (k, step) in traj.steps.iter().enumerate().rev() {
                ret = step.reward + gamma * ret;
                returns[k] = ret;
            }
            let mut discount = 1.0;
            for (step, ret) in traj.steps.iter().zip(&returns) {
                let w = discount * (ret - opts.baseline);
                let row = &probs[step.state * na..(step.state + 1) * na];
                let base = embedding[step.state] * na;
                for (a, p) in row.iter().enumerate() {
                    let indicator = if a == step.action { 1.0 } else { 0.0 };
                    g[base + a] += w * (indicator - p);
                }
                discount *= gamma;
            }
            g
        })
        .collect();

    let mut values = vec![0.0; dim];
    for g in &per_trajectory {
        for (v, x) in values.iter_mut().zip(g) {
            *v += x;
        }
    }
    let inv = 1.0 / opts.batch as f64;
    values.iter_mut().for_each(|v| *v *= inv);
    add_regularizer_gradient(&table, lambda, &mut values);
    GradientTable::from_values(policy.space().clone(), na, values)
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::mdp::random_mdp;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, n: usize, na: usize, gamma: f64, scale: f64) -> (TabularMdp, SoftmaxPolicy, StateDist) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = random_mdp(&mut rng, n, na, gamma);
        let theta = (0..n * na).map(|_| rng.random_range(-scale..=scale)).collect();
        let pol = SoftmaxPolicy::from_theta(Arc::new(mdp.states().clone()), na, theta).unwrap();
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
        let total: f64 = w.iter().sum();
        (mdp, pol, StateDist::new(w.iter().map(|x| x / total).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn lambda_enters_linearly(seed in any::<u64>(), n in 1usize..7, na in 1usize..5, gamma in 0.1f64..0.95, lambda in 0.0f64..5.0) {
            let (mdp, pol, init) = instance(seed, n, na, gamma, 3.0);
            let with = exact_gradient(&mdp, &pol, &init, lambda).unwrap();
            let without = exact_gradient(&mdp, &pol, &init, 0.0).unwrap();
            let reg = regularizer_gradient(&pol, lambda).unwrap();
            for ((w, o), r) in with.values().iter().zip(without.values()).zip(reg.values()) {
                // One rounding of the sum is the only slack.
                prop_assert!((w - o - r).abs() <= 4.0 * f64::EPSILON * (o.abs() + r.abs()));
            }
        }

        #[test]
        fn per_task_l1_bound(seed in any::<u64>(), n in 1usize..7, na in 1usize..5, gamma in 0.1f64..0.97, lambda in 0.0f64..3.0) {
            let (mdp, pol, init) = instance(seed, n, na, gamma, 6.0);
            let g = exact_gradient(&mdp, &pol, &init, lambda).unwrap();
            prop_assert!(g.norm_l1() <= 1.0 / ((1.0 - gamma) * (1.0 - gamma)) + 2.0 * lambda);
        }

        #[test]
        fn value_gradient_rows_sum_to_zero(seed in any::<u64>(), n in 1usize..7, na in 1usize..5, gamma in 0.1f64..0.95) {
            let (mdp, pol, init) = instance(seed, n, na, gamma, 3.0);
            let g = exact_gradient(&mdp, &pol, &init, 0.0).unwrap();
            for s in 0..n {
                prop_assert!(g.row(s).iter().sum::<f64>().abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn reinforce_mean_converges_to_exact_gradient() {
        let states = StateSpace::new(["a", "b"]).unwrap();
        let transition = vec![0.8, 0.2, 0.1, 0.9, 0.3, 0.7, 0.6, 0.4];
        let mdp = TabularMdp::new(states.clone(), 2, transition, vec![1.0, 0.0, 0.2, 0.5], 0.6).unwrap();
        let pol = SoftmaxPolicy::from_theta(Arc::new(states), 2, vec![0.4, -0.3, 0.1, 0.9]).unwrap();
        let init = StateDist::new(vec![0.7, 0.3]).unwrap();
        let exact = exact_gradient(&mdp, &pol, &init, 0.0).unwrap();

        let horizon = 80;
        let bias = mdp.gamma().powi(horizon as i32) / (1.0 - mdp.gamma()).powi(2);
        let opts = ReinforceOptions { batch: 400, horizon: Some(horizon), baseline: 0.0 };
        let groups = 50;
        let root = RngStream::new(123);
        let means: Vec<Vec<f64>> = (0..groups)
            .map(|j| reinforce_gradient(&mdp, &pol, &init, 0.0, &opts, root.child(j)).unwrap().into_values())
            .collect();
        for c in 0..4 {
            let xs: Vec<f64> = means.iter().map(|m| m[c]).collect();
            let mean = xs.iter().sum::<f64>() / groups as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (groups - 1) as f64;
            let se = (var / groups as f64).sqrt();
            let err = (mean - exact.values()[c]).abs();
            assert!(err <= 3.0 * se + bias, "coordinate {c}: error {err}, se {se}");
            assert!(se < 0.02);
        }
    }
}
