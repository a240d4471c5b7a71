//! `dpg`: experiment runner and reproduction harness.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 divergence,
//! 3 inconclusive premise, 4 a check failed.

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use dpg_core::dpg::{
    consensus_error_bound, distribution_mismatch, optimal_policy, optimality_gap, run_with, step_size_bound_thm1,
};
use dpg_core::environments::{shared_goal_suite, Cell};
use dpg_core::gradcheck::{gradcheck, GradcheckOptions};
use dpg_core::mdp::{greedy_rollout, Rollout, RolloutEnd, SoftmaxPolicy};
use dpg_core::suite::Suite;
use dpg_core::verify::{verify_example1, verify_example2, verify_proposition1, VerificationReport};
use dpg_core::DpgError;

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGENCE: u8 = 2;
const EXIT_INCONCLUSIVE: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "dpg", version, about = "Decentralized softmax policy gradient for tabular multi-task RL")]
struct Cli {
    /// Print only the final verdict.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment document and write metrics, policies and a summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the document's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the document's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Numerical checks of the line-world examples and the optimality-gap bound.
    Verify {
        which: Which,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        p: Option<f64>,
        /// Experiment document supplying the suite and lambda for `prop1`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report as JSON here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Exact gradient against central finite differences on random MDPs.
    Gradcheck {
        /// JSON options document (trials, states, actions, gamma, lambdas, theta_scale, seed).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a policy table on a suite and print greedy paths.
    Eval {
        /// CSV with header `state,action,prob`.
        policy: PathBuf,
        /// Experiment document supplying the suite.
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Example1,
    Example2,
    Prop1,
    All,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }
}

impl From<DpgError> for Failure {
    fn from(e: DpgError) -> Self {
        let code = if matches!(e, DpgError::Divergence { .. }) { EXIT_DIVERGENCE } else { EXIT_CONFIG };
        Self { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out_dir } => cmd_run(&config, seed, out_dir, cli.quiet),
        Command::Verify { which, gamma, p, config, out_dir } => cmd_verify(which, gamma, p, config, out_dir, cli.quiet),
        Command::Gradcheck { config, trials, seed } => cmd_gradcheck(config, trials, seed, cli.quiet),
        Command::Eval { policy, config } => cmd_eval(&policy, &config, cli.quiet),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::config(format!("{}: {e}", path.display()))
}

fn rollout_json(r: &Rollout) -> serde_json::Value {
    json!({
        "path": r.states,
        "actions": r.actions,
        "end": end_label(&r.end),
        "reached_goal": r.reached_goal(),
        "hit_obstacle": r.hit_obstacle(),
    })
}

fn end_label(end: &RolloutEnd) -> String {
    match end {
        RolloutEnd::Absorbed { reward, .. } if *reward > 0.0 => "goal".into(),
        RolloutEnd::Absorbed { reward, .. } if *reward < 0.0 => "obstacle".into(),
        RolloutEnd::Absorbed { .. } => "absorbed".into(),
        RolloutEnd::Revisit { state } => format!("revisit {state}"),
        RolloutEnd::StepLimit => "step limit".into(),
    }
}

fn cmd_run(path: &Path, seed: Option<u64>, out_dir: Option<PathBuf>, quiet: bool) -> Result<u8, Failure> {
    let mut exp = config::load(path).map_err(|e| Failure::config(e.0))?;
    if let Some(s) = seed {
        exp.config.seed = s;
        exp.doc.seed = s;
    }
    let dir = out_dir.unwrap_or_else(|| exp.doc.outputs.dir.clone());
    std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    let n = exp.suite.len();
    let metrics_path = dir.join(&exp.doc.outputs.metrics);
    let mut writer =
        output::metrics_writer(&metrics_path, n, exp.config.agent_grad_norms).map_err(|e| io_failure(&metrics_path, e))?;

    let started = Instant::now();
    let mut write_err = None;
    let iterations = exp.config.iterations;
    let report_every = (iterations / 10).max(1);
    let result = run_with(&exp.suite, &exp.mixing, &exp.config, |m| {
        if write_err.is_none() {
            if let Err(e) = output::write_metrics_row(&mut writer, m) {
                write_err = Some(e);
            }
        }
        if !quiet && (m.k % report_every == 0 || m.k == iterations) {
            eprintln!(
                "k={:>8}  sum_value={:+.6e}  grad_norm={:.3e}  consensus={:.3e}",
                m.k, m.sum_value, m.avg_grad_norm, m.consensus_error
            );
        }
    });
    let wall = started.elapsed().as_secs_f64();
    if let Some(e) = write_err {
        return Err(io_failure(&metrics_path, e));
    }
    writer.flush().map_err(|e| io_failure(&metrics_path, e))?;
    let out = result?;

    let prefix = &exp.doc.outputs.policy_prefix;
    for (i, pol) in out.policies.iter().enumerate() {
        let p = dir.join(format!("{prefix}_agent_{i}.csv"));
        output::write_policy(&p, &pol.table()).map_err(|e| io_failure(&p, e))?;
    }
    let mean = mean_policy(&exp.suite, &out.policies)?;
    let mean_path = dir.join(format!("{prefix}_mean.csv"));
    output::write_policy(&mean_path, &mean.table()).map_err(|e| io_failure(&mean_path, e))?;

    let last = out.final_metrics();
    let gammas = exp.suite.gammas();
    let bound = step_size_bound_thm1(&gammas, exp.config.lambda, exp.suite.num_states(), exp.mixing.sigma_n())?;
    let mut summary = json!({
        "seed": exp.config.seed,
        "alpha": out.alpha,
        "lambda": exp.config.lambda,
        "iterations": iterations,
        "agents": n,
        "final_sum_value": last.sum_value,
        "final_agent_values": last.agent_values,
        "final_grad_norm": last.avg_grad_norm,
        "min_grad_norm": out.min_grad_norm(),
        "final_consensus_error": last.consensus_error,
        "wall_time_s": wall,
        "bounds": {
            "sigma2": exp.mixing.sigma2(),
            "sigma_n": exp.mixing.sigma_n(),
            "step_size": bound,
            "consensus_error": consensus_error_bound(out.alpha, &gammas, exp.config.lambda, exp.mixing.sigma2())?,
        },
    });
    let diag = exp.doc.diagnostics;
    if diag.oracle_gap || diag.mismatch {
        let oracle = optimal_policy(&exp.suite)?;
        if diag.oracle_gap {
            let agents = out
                .policies
                .iter()
                .map(|p| optimality_gap(&exp.suite, p, &oracle.policy))
                .collect::<Result<Vec<_>, _>>()?;
            summary["oracle"] = json!({
                "method": format!("{:?}", oracle.method),
                "value": oracle.value,
                "gap_mean_policy": optimality_gap(&exp.suite, &mean, &oracle.policy)?,
                "gap_agents": agents,
            });
        }
        if diag.mismatch {
            let rep = distribution_mismatch(&exp.suite, &oracle.policy, &mean)?;
            summary["mismatch"] = json!({
                "max_spread": rep.max_spread,
                "holds": rep.holds(),
                "unsupported": rep.unsupported,
            });
        }
    }
    if diag.rollouts {
        let paths = exp
            .suite
            .tasks()
            .iter()
            .zip(&exp.starts)
            .map(|(t, s)| Ok(rollout_json(&greedy_rollout(&t.mdp, &mean, s, t.mdp.num_states())?)))
            .collect::<Result<Vec<_>, DpgError>>()?;
        summary["rollouts"] = json!(paths);
    }
    let summary_path = dir.join(&exp.doc.outputs.summary);
    output::write_json(&summary_path, &summary).map_err(|e| io_failure(&summary_path, e))?;
    if !quiet {
        println!("{}", serde_json::to_string_pretty(&summary).expect("serializes"));
    } else {
        println!("final_sum_value {:.16e}", last.sum_value);
    }
    Ok(0)
}

fn mean_policy(suite: &Suite, policies: &[SoftmaxPolicy]) -> Result<SoftmaxPolicy, Failure> {
    let n = policies.len() as f64;
    let mut theta = vec![0.0; policies[0].theta().len()];
    for p in policies {
        for (t, x) in theta.iter_mut().zip(p.theta()) {
            *t += x / n;
        }
    }
    Ok(SoftmaxPolicy::from_theta(suite.space().clone(), suite.num_actions(), theta)?)
}

const DEFAULT_GAMMAS: [f64; 3] = [0.5, 0.9, 0.99];
const DEFAULT_PS: [f64; 3] = [0.6, 0.75, 0.9];
const DEFAULT_PROP1_LAMBDA: f64 = 0.01;

fn cmd_verify(
    which: Which,
    gamma: Option<f64>,
    p: Option<f64>,
    config_path: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    quiet: bool,
) -> Result<u8, Failure> {
    let (name, title) = match which {
        Which::Example1 => ("example1", "example1"),
        Which::Example2 => ("example2", "example2"),
        Which::Prop1 => ("prop1", "proposition1"),
        Which::All => ("all", "all"),
    };
    let mut report = VerificationReport::new(title);
    if matches!(which, Which::Example1 | Which::All) {
        let gammas: Vec<f64> = gamma.map_or(DEFAULT_GAMMAS.to_vec(), |g| vec![g]);
        for g in gammas {
            report.absorb(verify_example1(g)?);
        }
    }
    if matches!(which, Which::Example2 | Which::All) {
        let ps: Vec<f64> = p.map_or(DEFAULT_PS.to_vec(), |x| vec![x]);
        let g = if matches!(which, Which::Example2) { gamma.unwrap_or(0.5f64.sqrt()) } else { 0.5f64.sqrt() };
        for x in ps {
            report.absorb(verify_example2(x, g)?);
        }
    }
    if matches!(which, Which::Prop1 | Which::All) {
        let (suite, lambda) = match &config_path {
            Some(path) => {
                let exp = config::load(path).map_err(|e| Failure::config(e.0))?;
                if exp.doc.lambda <= 0.0 {
                    return Err(Failure::config(format!("{}: prop1 needs lambda > 0", path.display())));
                }
                (exp.suite, exp.doc.lambda)
            }
            None => (shared_goal_suite(3, &[Cell(0, 2), Cell(2, 2)], 0.9)?.suite, DEFAULT_PROP1_LAMBDA),
        };
        report.absorb(verify_proposition1(&suite, lambda)?);
    }
    if quiet {
        println!("all_pass: {}", report.all_pass());
    } else {
        print!("{}", report.to_table());
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        let path = dir.join(format!("verify_{name}.json"));
        std::fs::write(&path, report.to_json() + "\n").map_err(|e| io_failure(&path, e))?;
    }
    Ok(if report.is_inconclusive() {
        EXIT_INCONCLUSIVE
    } else if report.all_pass() {
        0
    } else {
        EXIT_CHECK_FAILED
    })
}

fn cmd_gradcheck(config_path: Option<PathBuf>, trials: Option<usize>, seed: Option<u64>, quiet: bool) -> Result<u8, Failure> {
    let mut opts = match &config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            serde_json::from_str::<GradcheckOptions>(&text)
                .map_err(|e| Failure::config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))?
        }
        None => GradcheckOptions::default(),
    };
    if let Some(t) = trials {
        opts.trials = t;
    }
    if let Some(s) = seed {
        opts.seed = s;
    }
    let report = gradcheck(&opts)?;
    if !quiet {
        println!("trial  states  actions  gamma     lambda  grad_inf    rel_error");
        for t in &report.trials {
            println!(
                "{:>5}  {:>6}  {:>7}  {:.4}  {:>7}  {:.3e}  {:.6e}",
                t.index, t.states, t.actions, t.gamma, t.lambda, t.grad_inf, t.rel_error
            );
        }
    }
    println!(
        "max relative error {:.6e} (threshold {:.0e}): {}",
        report.max_rel_error,
        report.threshold,
        if report.pass() { "PASS" } else { "FAIL" }
    );
    Ok(if report.pass() { 0 } else { EXIT_CHECK_FAILED })
}

fn cmd_eval(policy: &Path, config_path: &Path, quiet: bool) -> Result<u8, Failure> {
    let exp = config::load(config_path).map_err(|e| Failure::config(e.0))?;
    let table = output::read_policy(policy, exp.suite.space(), exp.suite.num_actions()).map_err(Failure::config)?;
    let values = exp.suite.task_values(&table)?;
    for (i, (task, start)) in exp.suite.tasks().iter().zip(&exp.starts).enumerate() {
        let r = greedy_rollout(&task.mdp, &table, start, task.mdp.num_states())?;
        println!("task {i} ({}): V(rho) = {:.12e}", task.mdp.name(), values[i]);
        if !quiet {
            println!("  path: {}  [{}]", r.states.join(" -> "), end_label(&r.end));
        }
    }
    println!("sum V(rho) = {:.12e}", values.iter().sum::<f64>());
    Ok(0)
}
