//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero if any criterion fails.
//!
//! Optional arguments filter criteria by substring of their name.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpg_core::consensus::{CommGraph, MixingMatrix};
use dpg_core::dpg::{
    consensus_error_bound, lambda_for_epsilon, mismatch_coefficient, optimal_policy, optimality_gap, rate_envelope,
    run, step_size_bound_thm1, Dpg, InitMode, RunConfig,
};
use dpg_core::environments::{conflict_suite, example1_suite, example2_suite, shared_goal_suite, Cell, ConflictKind};
use dpg_core::gradcheck::{gradcheck, GradcheckOptions};
use dpg_core::mdp::{
    advantage, discounted_visitation, greedy_rollout, random_mdp, relative_entropy, value_function, SoftmaxPolicy,
    StateDist,
};
use dpg_core::suite::Suite;
use dpg_core::verify::{verify_example1, verify_example2};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

const LINE_GAMMAS: [f64; 3] = [0.5, 0.9, 0.99];
const STOCHASTIC_PS: [f64; 3] = [0.6, 0.75, 0.9];

fn half_root() -> f64 {
    0.5f64.sqrt()
}

fn ring(n: usize) -> MixingMatrix {
    MixingMatrix::lazy_metropolis(&CommGraph::ring(n).unwrap()).unwrap()
}

fn mean_policy(suite: &Suite, policies: &[SoftmaxPolicy]) -> SoftmaxPolicy {
    let n = policies.len() as f64;
    let mut bar = vec![0.0; policies[0].theta().len()];
    for pol in policies {
        for (b, x) in bar.iter_mut().zip(pol.theta()) {
            *b += x / n;
        }
    }
    SoftmaxPolicy::from_theta(suite.space().clone(), suite.num_actions(), bar).unwrap()
}

fn example1_analytics() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for gamma in LINE_GAMMAS {
        let rep = verify_example1(gamma).unwrap();
        let worst = rep.checks.iter().filter(|c| c.tolerance > 0.0).map(|c| c.abs_error).fold(0.0, f64::max);
        pass &= rep.all_pass();
        notes.push(format!("gamma={gamma} checks={} worst_err={worst:.1e}", rep.checks.len()));
    }
    Outcome::new(pass, notes.join("; "))
}

fn example2_stationary_points() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for p in STOCHASTIC_PS {
        let rep = verify_example2(p, half_root()).unwrap();
        pass &= rep.all_pass();
        let failed: Vec<&str> = rep.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        notes.push(format!(
            "p={p} checks={} failed={failed:?} flagged_printed_forms={}",
            rep.checks.len(),
            rep.discrepancies.len()
        ));
    }
    Outcome::new(pass, notes.join("; "))
}

fn gradient_oracle() -> Outcome {
    let opts = GradcheckOptions::default();
    let rep = gradcheck(&opts).unwrap();
    let sizes_ok = rep.trials.iter().all(|t| t.states <= 8 && t.actions <= 4);
    let pass = rep.trials.len() >= 100 && sizes_ok && rep.max_rel_error < 1e-6;
    Outcome::new(pass, format!("trials={} max_rel_error={:.3e} threshold=1e-6", rep.trials.len(), rep.max_rel_error))
}

fn lyapunov_descent() -> Outcome {
    let suite = example1_suite(0.9).unwrap();
    let w = ring(2);
    let mut notes = Vec::new();
    let mut pass = true;
    for init in [InitMode::Zeros, InitMode::Random { scale: 1.0, identical: false }] {
        let cfg = RunConfig { lambda: 0.01, iterations: 10_000, init, ..Default::default() };
        let mut dpg = Dpg::new(&suite, &w, &cfg).unwrap();
        let bound = step_size_bound_thm1(&suite.gammas(), 0.01, suite.num_states(), w.sigma_n()).unwrap();
        pass &= (dpg.alpha() - 0.9 * bound).abs() <= 1e-15 * bound;
        let mut prev = dpg.lyapunov().unwrap();
        let mut worst = f64::NEG_INFINITY;
        let mut violations = 0;
        for _ in 0..10_000 {
            dpg.step(None).unwrap();
            let xi = dpg.lyapunov().unwrap();
            worst = worst.max(xi - prev);
            if xi - prev > 1e-10 {
                violations += 1;
            }
            prev = xi;
        }
        pass &= violations == 0;
        notes.push(format!("{init:?}: alpha={:.3e} max_increase={worst:.3e} violations={violations}", dpg.alpha()));
    }
    Outcome::new(pass, notes.join("; "))
}

fn consensus_bound() -> Outcome {
    let grid = shared_goal_suite(5, &[Cell(0, 4), Cell(4, 4), Cell(4, 0), Cell(2, 2)], 0.9).unwrap();
    let suite = &grid.suite;
    let w = ring(4);
    let mut notes = Vec::new();
    let mut pass = suite.unit_rewards();
    for lambda in [0.0, 0.01] {
        let cfg = RunConfig { lambda, iterations: 10_000, init: InitMode::Zeros, ..Default::default() };
        let mut dpg = Dpg::new(suite, &w, &cfg).unwrap();
        let bound = consensus_error_bound(dpg.alpha(), &suite.gammas(), lambda, w.sigma2()).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            dpg.step(None).unwrap();
            let bar = dpg.mean_theta();
            let err = dpg
                .thetas()
                .iter()
                .map(|t| t.iter().zip(&bar).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            worst = worst.max(err);
        }
        pass &= worst <= bound;
        notes.push(format!("lambda={lambda}: max_consensus_error={worst:.3e} bound={bound:.3e}"));
    }
    Outcome::new(pass, notes.join("; "))
}

fn rate_shape() -> Outcome {
    let suite = example1_suite(0.9).unwrap();
    let w = ring(2);
    let lambda = 0.01;
    let iterations = 10_000;
    let bound = step_size_bound_thm1(&suite.gammas(), lambda, suite.num_states(), w.sigma_n()).unwrap();
    let re0 = relative_entropy(&suite.zeros());
    let mut notes = Vec::new();
    let mut pass = true;
    for frac in [0.3, 0.6, 0.9] {
        let alpha = frac * bound;
        let cfg = RunConfig { alpha: Some(alpha), lambda, iterations, ..Default::default() };
        let out = run(&suite, &w, &cfg).unwrap();
        let envelope = rate_envelope(iterations, alpha, &suite.gammas(), lambda, re0, w.sigma2()).unwrap();
        let running_min = out.metrics.iter().map(|m| m.avg_grad_norm.powi(2)).fold(f64::INFINITY, f64::min);
        pass &= running_min <= envelope;
        notes.push(format!("alpha={alpha:.3e}: min_sq_grad={running_min:.4e} envelope={envelope:.4e}"));
    }
    Outcome::new(pass, notes.join("; "))
}

fn global_optimality() -> Outcome {
    let epsilon = 0.05;
    let grid = shared_goal_suite(5, &[Cell(0, 4), Cell(4, 4)], 0.9).unwrap();
    let suite = &grid.suite;
    let oracle = optimal_policy(suite).unwrap();
    let coeff = mismatch_coefficient(suite, &oracle.policy).unwrap();
    let lambda = lambda_for_epsilon(epsilon, suite.len(), coeff).unwrap();
    let cfg = RunConfig { alpha: Some(1.0), lambda, iterations: 100_000, metrics_every: 10_000, ..Default::default() };
    let out = run(suite, &ring(2), &cfg).unwrap();
    let gaps: Vec<f64> = out.policies.iter().map(|p| optimality_gap(suite, p, &oracle.policy).unwrap()).collect();
    let worst = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Outcome::new(
        suite.shared_dynamics() && worst < epsilon,
        format!(
            "oracle={:?} value={:.5} coeff={coeff:.3} lambda={lambda:.3e} gaps=[{}] epsilon={epsilon}",
            oracle.method,
            oracle.value,
            gaps.iter().map(|g| format!("{g:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn stationary_point_trapping() -> Outcome {
    let (p, gamma) = (0.75, half_root());
    let suite = example2_suite(p, gamma).unwrap();
    let cfg = RunConfig { lambda: 0.0, iterations: 10_000, init: InitMode::Zeros, ..Default::default() };
    let out = run(&suite, &ring(2), &cfg).unwrap();
    let last = out.final_metrics();
    let target = (4.0 - 8.0 * p) / 3.0;
    let general = gamma * (2.0 - 4.0 * p) / (2.0 - gamma * gamma);
    let at_mean = suite.sum_value(&mean_policy(&suite, &out.policies)).unwrap();
    let pass = last.avg_grad_norm < 1e-6 && (last.sum_value - target).abs() <= 1e-3;
    Outcome::new(
        pass,
        format!(
            "grad_norm={:.3e} sum_value={:.6} target (4-8p)/3={target:.6} |diff|={:.3e} tol=1e-3; \
             sum_value at mean parameter={at_mean:.6}; closed form gamma(2-4p)/(2-gamma^2)={general:.6}",
            last.avg_grad_norm,
            last.sum_value,
            (last.sum_value - target).abs()
        ),
    )
}

fn conflict_suites() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for kind in [ConflictKind::None, ConflictKind::Resolvable, ConflictKind::Unresolvable] {
        let grid = conflict_suite(kind, 0.9).unwrap();
        let suite = &grid.suite;
        let cfg = RunConfig { alpha: Some(0.2), lambda: 1e-3, iterations: 20_000, metrics_every: 20_000, ..Default::default() };
        let out = run(suite, &ring(4), &cfg).unwrap();
        let mean = mean_policy(suite, &out.policies);
        let start = grid.start.id();
        let rollouts: Vec<_> =
            suite.tasks().iter().map(|t| greedy_rollout(&t.mdp, &mean, &start, 25).unwrap()).collect();
        let reached: Vec<bool> = rollouts.iter().map(|r| r.reached_goal()).collect();
        let ok = match kind {
            ConflictKind::None | ConflictKind::Resolvable => reached.iter().all(|r| *r),
            // Tasks 2 and 3 are the mutually conflicting pair.
            ConflictKind::Unresolvable => {
                reached.iter().filter(|r| !**r).count() == 1 && reached[0] && reached[3] && (reached[1] != reached[2])
            }
        };
        pass &= ok;
        let marks: String = rollouts
            .iter()
            .map(|r| if r.reached_goal() { 'G' } else if r.hit_obstacle() { 'X' } else { '?' })
            .collect();
        notes.push(format!("{kind:?}: {marks}"));
    }
    Outcome::new(pass, notes.join("; "))
}

fn mixing_spectra() -> Outcome {
    let sigma2 = ring(4).sigma2();
    let mut pass = (sigma2 - 2.0 / 3.0).abs() <= 1e-10;
    let mut worst: f64 = 0.0;
    for n in 2..=64 {
        for graph in [CommGraph::ring(n), CommGraph::star(n), CommGraph::complete(n)] {
            worst = worst.max(MixingMatrix::lazy_metropolis(&graph.unwrap()).unwrap().stochastic_residual());
        }
    }
    pass &= worst < 1e-12;
    Outcome::new(pass, format!("ring4 sigma2={sigma2:.15} (2/3) max_residual={worst:.2e} over N=2..64"))
}

fn performance_difference() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let na = rng.random_range(1..=4);
        let gamma = rng.random_range(0.05..0.98);
        let mdp = random_mdp(&mut rng, n, na, gamma);
        let space = Arc::new(mdp.states().clone());
        let mut draw = || {
            let theta = (0..n * na).map(|_| rng.random_range(-3.0..3.0)).collect();
            SoftmaxPolicy::from_theta(space.clone(), na, theta).unwrap()
        };
        let (pi, other) = (draw(), draw());
        let weights: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = weights.iter().sum();
        let rho = StateDist::new(weights.iter().map(|x| x / total).collect()).unwrap();
        let lhs = rho.dot(&value_function(&mdp, &pi).unwrap()) - rho.dot(&value_function(&mdp, &other).unwrap());
        let d = discounted_visitation(&mdp, &pi, &rho).unwrap();
        let adv = advantage(&mdp, &other).unwrap();
        let probs = pi.table();
        let rhs: f64 = (0..n)
            .map(|s| d[s] * (0..na).map(|a| probs.row(s)[a] * adv[s * na + a]).sum::<f64>())
            .sum::<f64>()
            / (1.0 - gamma);
        worst = worst.max((lhs - rhs).abs());
    }
    Outcome::new(worst <= 1e-9, format!("triples=200 max_abs_error={worst:.3e} tol=1e-9"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("example1_analytics", Duration::from_secs(1), example1_analytics),
        ("example2_stationary_points", Duration::from_secs(1), example2_stationary_points),
        ("gradient_oracle", Duration::from_secs(30), gradient_oracle),
        ("lyapunov_descent", Duration::from_secs(60), lyapunov_descent),
        ("consensus_bound", Duration::from_secs(120), consensus_bound),
        ("rate_shape", Duration::from_secs(120), rate_shape),
        ("global_optimality", Duration::from_secs(600), global_optimality),
        ("stationary_point_trapping", Duration::from_secs(60), stationary_point_trapping),
        ("conflict_suites", Duration::from_secs(600), conflict_suites),
        ("mixing_spectra", Duration::from_secs(5), mixing_spectra),
        ("performance_difference", Duration::from_secs(10), performance_difference),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (name, limit, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let in_time = elapsed < limit;
        let pass = outcome.pass && in_time;
        let timing = format!("{:.2}s (limit {}s{})", elapsed.as_secs_f64(), limit.as_secs(), if in_time { "" } else { ", exceeded" });
        println!("{} {name}: {} [{timing}]", if pass { "PASS" } else { "FAIL" }, outcome.detail);
        if !pass {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} failed: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
    println!("acceptance: all passed");
}
