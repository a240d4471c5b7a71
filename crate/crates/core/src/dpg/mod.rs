//! The decentralized policy-gradient loop: every agent mixes its
//! neighbours' parameters and adds its own local gradient step.

pub mod bounds;
pub mod diagnostics;
pub mod oracle;

use rand::Rng;
use rayon::prelude::*;

use crate::consensus::{mix, MixingMatrix};
use crate::error::{domain, DpgError, Result};
use crate::gradient::{add_regularizer_gradient, add_value_gradient, reinforce_gradient, ReinforceOptions};
use crate::mdp::{relative_entropy, SoftmaxPolicy};
use crate::rng::RngStream;
use crate::suite::Suite;

pub use bounds::{
    consensus_error_bound, gradient_bound, lambda_for_epsilon, rate_envelope, smoothness, step_size_bound_thm1,
    step_size_bound_thm2, task_gradient_l1_bound,
};
pub use diagnostics::{distribution_mismatch, mismatch_coefficient, optimality_gap, MismatchReport, StateMismatch};
pub use oracle::{centralized_ascent, optimal_policy, policy_iteration, AscentResult, Oracle, OracleMethod};

/// Parameters larger than this in absolute value abort the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientMode {
    Exact,
    MonteCarlo(ReinforceOptions),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    /// Uniform policies everywhere.
    Zeros,
    /// Entries uniform in `[-scale, scale]`. Per-agent draws unless
    /// `identical`, which breaks the identical-initialization premise of
    /// the consensus bound.
    Random { scale: f64, identical: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `None` uses 0.9 times `step_size_bound_thm1`.
    pub alpha: Option<f64>,
    pub lambda: f64,
    pub iterations: usize,
    pub gradient: GradientMode,
    pub seed: u64,
    pub init: InitMode,
    /// Record metrics every this many iterations (the last state is always recorded).
    pub metrics_every: usize,
    /// Also record `||(1/N) sum_j grad V_j(theta_i; rho_j)||` for every agent `i`.
    pub agent_grad_norms: bool,
    /// Worker threads for per-agent work; 0 uses the global pool.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: None,
            lambda: 0.0,
            iterations: 1000,
            gradient: GradientMode::Exact,
            seed: 0,
            init: InitMode::Zeros,
            metrics_every: 1,
            agent_grad_norms: false,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub k: usize,
    /// `sum_i V_i(theta_i; rho_i)`.
    pub sum_value: f64,
    /// `||(1/N) sum_j grad V_j(theta_bar; rho_j)||`.
    pub avg_grad_norm: f64,
    /// `max_i ||theta_i - theta_bar||`.
    pub consensus_error: f64,
    pub lyapunov: f64,
    pub agent_values: Vec<f64>,
    pub agent_grad_norms: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub alpha: f64,
    pub metrics: Vec<IterationMetrics>,
    pub policies: Vec<SoftmaxPolicy>,
}

impl RunOutput {
    /// `min_k avg_grad_norm` over the recorded iterations.
    pub fn min_grad_norm(&self) -> f64 {
        self.metrics.iter().map(|m| m.avg_grad_norm).fold(f64::INFINITY, f64::min)
    }

    pub fn final_metrics(&self) -> &IterationMetrics {
        self.metrics.last().expect("at least one metrics row")
    }
}

/// Per-agent quantities at the current parameters.
struct AgentEval {
    gradient: Vec<f64>,
    /// `V_i(theta_i; mu_i) - lambda RE(theta_i)`.
    objective: f64,
    value_rho: f64,
}

/// Stepwise driver, also used by `run`.
pub struct Dpg<'a> {
    suite: &'a Suite,
    mixing: &'a MixingMatrix,
    alpha: f64,
    lambda: f64,
    gradient: GradientMode,
    stream: RngStream,
    thetas: Vec<Vec<f64>>,
    k: usize,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Dpg<'a> {
    pub fn new(suite: &'a Suite, mixing: &'a MixingMatrix, config: &RunConfig) -> Result<Self> {
        let n = suite.len();
        if mixing.num_agents() != n {
            return Err(domain(format!("{} agents in the mixing matrix, {n} tasks", mixing.num_agents())));
        }
        if !(config.lambda >= 0.0 && config.lambda.is_finite()) {
            return Err(domain("lambda must be nonnegative"));
        }
        let alpha = match config.alpha {
            Some(a) => a,
            None => 0.9 * step_size_bound_thm1(&suite.gammas(), config.lambda, suite.num_states(), mixing.sigma_n())?,
        };
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(domain(format!("step size must be positive, got {alpha}")));
        }
        if let GradientMode::MonteCarlo(opts) = config.gradient {
            if opts.batch == 0 {
                return Err(domain("Monte-Carlo batch must be at least 1"));
            }
        }
        let stream = RngStream::new(config.seed);
        let dim = suite.num_states() * suite.num_actions();
        let thetas = match config.init {
            InitMode::Zeros => vec![vec![0.0; dim]; n],
            InitMode::Random { scale, identical } => {
                let init_stream = stream.child(u64::MAX);
                (0..n)
                    .map(|i| {
                        let mut rng = init_stream.child(if identical { 0 } else { i as u64 }).rng();
                        (0..dim).map(|_| rng.random_range(-1.0..=1.0) * scale).collect()
                    })
                    .collect()
            }
        };
        let pool = if config.threads > 0 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.threads)
                    .build()
                    .map_err(|e| domain(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self { suite, mixing, alpha, lambda: config.lambda, gradient: config.gradient, stream, thetas, k: 0, pool })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn iteration(&self) -> usize {
        self.k
    }

    pub fn thetas(&self) -> &[Vec<f64>] {
        &self.thetas
    }

    pub fn set_thetas(&mut self, thetas: Vec<Vec<f64>>) -> Result<()> {
        let dim = self.suite.num_states() * self.suite.num_actions();
        if thetas.len() != self.thetas.len() || thetas.iter().any(|t| t.len() != dim) {
            return Err(domain("parameter shape mismatch"));
        }
        self.thetas = thetas;
        Ok(())
    }

    pub fn policy(&self, i: usize) -> SoftmaxPolicy {
        SoftmaxPolicy::from_theta(self.suite.space().clone(), self.suite.num_actions(), self.thetas[i].clone())
            .expect("shape checked at construction")
    }

    pub fn policies(&self) -> Vec<SoftmaxPolicy> {
        (0..self.thetas.len()).map(|i| self.policy(i)).collect()
    }

    pub fn mean_theta(&self) -> Vec<f64> {
        mean(&self.thetas)
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.pool {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }

    fn evaluate_agents(&self) -> Result<Vec<AgentEval>> {
        let k = self.k as u64;
        self.install(|| {
            (0..self.thetas.len())
                .into_par_iter()
                .map(|i| {
                    let task = &self.suite.tasks()[i];
                    let policy = self.policy(i);
                    let table = policy.table();
                    let eval = task.evaluate(&table)?;
                    let re = if self.lambda == 0.0 { 0.0 } else { relative_entropy(&policy) };
                    let gradient = match self.gradient {
                        GradientMode::Exact => {
                            let mut g = vec![0.0; self.thetas[i].len()];
                            add_value_gradient(&eval, &task.mu, &mut g)?;
                            add_regularizer_gradient(&table, self.lambda, &mut g);
                            g
                        }
                        GradientMode::MonteCarlo(opts) => {
                            let stream = self.stream.child(k).child(i as u64);
                            reinforce_gradient(&task.mdp, &policy, &task.mu, self.lambda, &opts, stream)?.into_values()
                        }
                    };
                    Ok(AgentEval {
                        gradient,
                        objective: eval.value(&task.mu) - self.lambda * re,
                        value_rho: eval.value(&task.rho),
                    })
                })
                .collect()
        })
    }

    /// `||(1/N) sum_j grad V_j(theta; rho_j)||`.
    fn averaged_value_gradient_norm(&self, theta: &[f64]) -> Result<f64> {
        let policy = SoftmaxPolicy::from_theta(self.suite.space().clone(), self.suite.num_actions(), theta.to_vec())?;
        let table = policy.table();
        let parts: Vec<Vec<f64>> = self.install(|| {
            self.suite
                .tasks()
                .par_iter()
                .map(|task| {
                    let mut g = vec![0.0; theta.len()];
                    add_value_gradient(&task.evaluate(&table)?, &task.rho, &mut g)?;
                    Ok(g)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let n = parts.len() as f64;
        let mut total = vec![0.0; theta.len()];
        for g in &parts {
            for (t, x) in total.iter_mut().zip(g) {
                *t += x;
            }
        }
        Ok(total.iter().map(|x| (x / n) * (x / n)).sum::<f64>().sqrt())
    }

    /// `(1/(2 alpha)) theta^T ((I - W) kron I) theta`, computed as
    /// `(1/(4 alpha)) sum_ij W_ij ||theta_i - theta_j||^2` to avoid cancellation.
    pub fn consensus_penalty(&self) -> f64 {
        let w = self.mixing.w();
        let n = self.thetas.len();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let wij = w[(i, j)];
                if i == j || wij == 0.0 {
                    continue;
                }
                let d2: f64 = self.thetas[i].iter().zip(&self.thetas[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                total += wij * d2;
            }
        }
        total / (4.0 * self.alpha)
    }

    /// `-sum_i L_i(theta_i; mu_i) + (1/(2 alpha)) ||theta||^2_{I-W}`.
    pub fn lyapunov(&self) -> Result<f64> {
        let evals = self.evaluate_agents()?;
        Ok(-evals.iter().map(|e| e.objective).sum::<f64>() + self.consensus_penalty())
    }

    fn metrics_from(&self, evals: &[AgentEval], agent_grad_norms: bool) -> Result<IterationMetrics> {
        let bar = self.mean_theta();
        let consensus_error = self
            .thetas
            .iter()
            .map(|t| t.iter().zip(&bar).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let agent_values: Vec<f64> = evals.iter().map(|e| e.value_rho).collect();
        let agent_norms = if agent_grad_norms {
            Some(self.thetas.iter().map(|t| self.averaged_value_gradient_norm(t)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(IterationMetrics {
            k: self.k,
            sum_value: agent_values.iter().sum(),
            avg_grad_norm: self.averaged_value_gradient_norm(&bar)?,
            consensus_error,
            lyapunov: -evals.iter().map(|e| e.objective).sum::<f64>() + self.consensus_penalty(),
            agent_values,
            agent_grad_norms: agent_norms,
        })
    }

    pub fn metrics(&self, agent_grad_norms: bool) -> Result<IterationMetrics> {
        let evals = self.evaluate_agents()?;
        self.metrics_from(&evals, agent_grad_norms)
    }

    /// Local gradients `g_i(theta_i^k)` at the current iterate.
    pub fn local_gradients(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.evaluate_agents()?.into_iter().map(|e| e.gradient).collect())
    }

    /// One synchronous round. Returns metrics of the pre-update iterate when
    /// `record` is set, followed by the gradients that were applied.
    pub fn step(&mut self, record: Option<bool>) -> Result<(Option<IterationMetrics>, Vec<Vec<f64>>)> {
        let evals = self.evaluate_agents()?;
        let metrics = match record {
            Some(agent_norms) => Some(self.metrics_from(&evals, agent_norms)?),
            None => None,
        };
        let mut next = mix(&self.thetas, self.mixing)?;
        let gradients: Vec<Vec<f64>> = evals.into_iter().map(|e| e.gradient).collect();
        for (i, (theta, g)) in next.iter_mut().zip(&gradients).enumerate() {
            for (t, x) in theta.iter_mut().zip(g) {
                *t += self.alpha * x;
            }
            let norm = theta.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if !(norm <= DIVERGENCE_THRESHOLD) {
                return Err(DpgError::Divergence { iteration: self.k, agent: i, norm });
            }
        }
        self.thetas = next;
        self.k += 1;
        Ok((metrics, gradients))
    }
}

fn mean(thetas: &[Vec<f64>]) -> Vec<f64> {
    let n = thetas.len() as f64;
    let mut out = vec![0.0; thetas[0].len()];
    for t in thetas {
        for (o, x) in out.iter_mut().zip(t) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Runs `config.iterations` rounds. Metrics rows cover `k = 0..=K` (subject
/// to `metrics_every`), each computed before that round's update.
pub fn run(suite: &Suite, mixing: &MixingMatrix, config: &RunConfig) -> Result<RunOutput> {
    run_with(suite, mixing, config, |_| {})
}

/// As `run`, calling `observe` on every metrics row as it is produced.
pub fn run_with(
    suite: &Suite,
    mixing: &MixingMatrix,
    config: &RunConfig,
    mut observe: impl FnMut(&IterationMetrics),
) -> Result<RunOutput> {
    if config.iterations == 0 {
        return Err(domain("iterations must be at least 1"));
    }
    let every = config.metrics_every.max(1);
    let mut dpg = Dpg::new(suite, mixing, config)?;
    let mut metrics = Vec::new();
    for k in 0..config.iterations {
        let record = (k % every == 0).then_some(config.agent_grad_norms);
        let (m, _) = dpg.step(record)?;
        if let Some(m) = m {
            observe(&m);
            metrics.push(m);
        }
    }
    let last = dpg.metrics(config.agent_grad_norms)?;
    observe(&last);
    metrics.push(last);
    Ok(RunOutput { alpha: dpg.alpha(), metrics, policies: dpg.policies() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::CommGraph;
    use crate::environments::example1_suite;
    use crate::suite::Init;

    #[test]
    fn zero_step_keeps_consensus() {
        let suite = example1_suite(0.9).unwrap();
        let w = MixingMatrix::lazy_metropolis(&CommGraph::ring(2).unwrap()).unwrap();
        let cfg = RunConfig { iterations: 5, ..Default::default() };
        let out = run(&suite, &w, &cfg).unwrap();
        assert_eq!(out.metrics.len(), 6);
        assert!(out.alpha > 0.0);
        assert_eq!(out.metrics[0].k, 0);
        assert_eq!(out.metrics[0].consensus_error, 0.0);
    }

    #[test]
    fn single_agent_is_plain_gradient_ascent() {
        let suite = Suite::with_init(vec![crate::environments::line_world(1, 0.8).unwrap()], |_| {
            crate::mdp::StateDist::point(5, 2).unwrap()
        })
        .unwrap();
        let w = MixingMatrix::lazy_metropolis(&CommGraph::complete(1).unwrap()).unwrap();
        let cfg = RunConfig { alpha: Some(0.3), lambda: 0.01, iterations: 50, ..Default::default() };
        let out = run(&suite, &w, &cfg).unwrap();
        let mut theta = suite.zeros();
        for _ in 0..50 {
            let g = suite.gradient(&theta, 0.01, Init::Mu).unwrap();
            for (t, x) in theta.theta_mut().iter_mut().zip(&g) {
                *t += 0.3 * x;
            }
        }
        assert_eq!(out.policies[0].theta(), theta.theta());
    }

    #[test]
    fn divergence_guard_trips() {
        let suite = example1_suite(0.9).unwrap();
        let w = MixingMatrix::lazy_metropolis(&CommGraph::ring(2).unwrap()).unwrap();
        let cfg = RunConfig { alpha: Some(1e12), iterations: 10, ..Default::default() };
        assert!(matches!(run(&suite, &w, &cfg), Err(DpgError::Divergence { .. })));
    }

    #[test]
    fn metrics_every_thins_rows() {
        let suite = example1_suite(0.9).unwrap();
        let w = MixingMatrix::lazy_metropolis(&CommGraph::ring(2).unwrap()).unwrap();
        let cfg = RunConfig { iterations: 10, metrics_every: 4, ..Default::default() };
        let ks: Vec<usize> = run(&suite, &w, &cfg).unwrap().metrics.iter().map(|m| m.k).collect();
        assert_eq!(ks, vec![0, 4, 8, 10]);
    }
}
