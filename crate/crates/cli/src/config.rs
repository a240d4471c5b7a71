//! Experiment documents: one JSON object, unknown keys rejected, validated
//! in full before any compute starts.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dpg_core::consensus::{GraphSpec, MixingMatrix, Topology};
use dpg_core::dpg::{GradientMode, InitMode, RunConfig};
use dpg_core::environments::{
    conflict_suite, example1_suite, example2_suite, gridworld, shared_goal_suite, Cell, ConflictKind, GridSpec,
};
use dpg_core::gradient::ReinforceOptions;
use dpg_core::mdp::{MdpDocument, StateDist};
use dpg_core::suite::Suite;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentDoc {
    pub suite: SuiteSpec,
    /// Defaults to a ring over the tasks.
    #[serde(default)]
    pub graph: Option<GraphSpec>,
    /// Explicit weights; replaces lazy Metropolis weights on `graph`.
    #[serde(default)]
    pub mixing_matrix: Option<Vec<Vec<f64>>>,
    /// Defaults to 0.9 times the step-size bound.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub lambda: f64,
    pub iterations: usize,
    #[serde(default)]
    pub gradient: GradientSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default = "one")]
    pub metrics_every: usize,
    #[serde(default)]
    pub agent_grad_norms: bool,
    #[serde(default)]
    pub outputs: OutputSpec,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SuiteSpec {
    /// Deterministic two-task line world, start S3.
    Example1 { gamma: f64 },
    /// Stochastic two-task line world, start S3.
    Example2 { p: f64, gamma: f64 },
    /// Four-task 5x5 conflict grid, start at the top-left corner.
    Conflict { conflict: ConflictKind, gamma: f64 },
    /// Shared-kernel grid with one task per goal, uniform start.
    SharedGoal { size: usize, goals: Vec<Cell>, gamma: f64 },
    Tasks { tasks: Vec<TaskSpec> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// `start` gives a point-mass `rho = mu`; otherwise uniform.
    Grid { grid: GridSpec, gamma: f64, #[serde(default)] start: Option<Cell> },
    /// `initial` gives `rho = mu`; empty means uniform.
    Mdp { mdp: MdpDocument },
    /// Path relative to the experiment document.
    MdpFile { path: PathBuf },
}

// Empty struct variants so that stray keys next to the tag are rejected;
// unit variants would ignore them.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum GradientSpec {
    Exact {},
    MonteCarlo {
        #[serde(default = "default_batch")]
        batch: usize,
        #[serde(default)]
        horizon: Option<usize>,
        #[serde(default)]
        baseline: f64,
    },
}

impl Default for GradientSpec {
    fn default() -> Self {
        Self::Exact {}
    }
}

fn default_batch() -> usize {
    ReinforceOptions::default().batch
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    Zeros {},
    Random {
        scale: f64,
        #[serde(default)]
        identical: bool,
    },
}

impl Default for InitSpec {
    fn default() -> Self {
        Self::Zeros {}
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    /// Relative to the working directory; `--out-dir` overrides.
    pub dir: PathBuf,
    pub metrics: String,
    pub summary: String,
    /// Agent `i` goes to `{policy_prefix}_agent_{i}.csv`, the softmax of the
    /// network average to `{policy_prefix}_mean.csv`.
    pub policy_prefix: String,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), metrics: "metrics.csv".into(), summary: "summary.json".into(), policy_prefix: "policy".into() }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSpec {
    /// Optimality gap of every agent and the average against the oracle.
    pub oracle_gap: bool,
    /// Distribution-mismatch spread between the oracle and the final average.
    pub mismatch: bool,
    /// Greedy rollout of the final average from each task's start.
    pub rollouts: bool,
}

/// A validated experiment, ready to run.
pub struct Experiment {
    pub doc: ExperimentDoc,
    pub suite: Suite,
    pub mixing: MixingMatrix,
    pub config: RunConfig,
    /// Most likely start state of each task.
    pub starts: Vec<String>,
}

fn anchored(path: &Path, err: &serde_json::Error) -> ConfigError {
    ConfigError(format!("{}:{}:{}: {}", path.display(), err.line(), err.column(), err))
}

fn semantic(path: &Path, msg: impl fmt::Display) -> ConfigError {
    ConfigError(format!("{}: {}", path.display(), msg))
}

pub fn parse(text: &str, path: &Path) -> Result<ExperimentDoc, ConfigError> {
    serde_json::from_str(text).map_err(|e| anchored(path, &e))
}

pub fn load(path: &Path) -> Result<Experiment, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| semantic(path, e))?;
    let doc = parse(&text, path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    build(doc, base).map_err(|e| semantic(path, e))
}

fn first_max(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

fn build_suite(spec: &SuiteSpec, base: &Path) -> Result<Suite, String> {
    let s = match spec {
        SuiteSpec::Example1 { gamma } => example1_suite(*gamma),
        SuiteSpec::Example2 { p, gamma } => example2_suite(*p, *gamma),
        SuiteSpec::Conflict { conflict, gamma } => conflict_suite(*conflict, *gamma).map(|g| g.suite),
        SuiteSpec::SharedGoal { size, goals, gamma } => shared_goal_suite(*size, goals, *gamma).map(|g| g.suite),
        SuiteSpec::Tasks { tasks } => {
            if tasks.is_empty() {
                return Err("suite.tasks is empty".into());
            }
            let mut entries = Vec::with_capacity(tasks.len());
            for (i, t) in tasks.iter().enumerate() {
                let ctx = |e: &dyn fmt::Display| format!("suite.tasks[{i}]: {e}");
                let (mdp, init) = match t {
                    TaskSpec::Grid { grid, gamma, start } => {
                        let mdp = gridworld(grid, *gamma).map_err(|e| ctx(&e))?;
                        let init = match start {
                            Some(c) => {
                                if c.row() >= grid.height || c.col() >= grid.width {
                                    return Err(ctx(&format!("start {c:?} lies outside the grid")));
                                }
                                Some(StateDist::point(mdp.num_states(), grid.index(*c)).map_err(|e| ctx(&e))?)
                            }
                            None => None,
                        };
                        (mdp, init)
                    }
                    TaskSpec::Mdp { mdp } => mdp.clone().into_mdp().map_err(|e| ctx(&e))?,
                    TaskSpec::MdpFile { path } => {
                        let full = base.join(path);
                        let text = std::fs::read_to_string(&full).map_err(|e| ctx(&format!("{}: {e}", full.display())))?;
                        let doc: MdpDocument = serde_json::from_str(&text)
                            .map_err(|e| ctx(&format!("{}:{}:{}: {e}", full.display(), e.line(), e.column())))?;
                        doc.into_mdp().map_err(|e| ctx(&e))?
                    }
                };
                let mdp = if mdp.name().is_empty() { mdp.named(format!("task-{}", i + 1)) } else { mdp };
                let init = init.unwrap_or_else(|| StateDist::uniform(mdp.num_states()));
                entries.push((mdp, init.clone(), init));
            }
            Suite::new(entries)
        }
    };
    s.map_err(|e| format!("suite: {e}"))
}

fn build_mixing(doc: &ExperimentDoc, n: usize) -> Result<MixingMatrix, String> {
    let graph = match &doc.graph {
        Some(g) => {
            if g.n != n {
                return Err(format!("graph.n = {} but the suite has {n} tasks", g.n));
            }
            g.build().map_err(|e| format!("graph: {e}"))?
        }
        None => GraphSpec { topology: Topology::Ring, n, edges: Vec::new() }.build().map_err(|e| format!("graph: {e}"))?,
    };
    match &doc.mixing_matrix {
        Some(rows) => {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(format!("mixing_matrix must be {n}x{n}"));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            MixingMatrix::from_rows(n, &flat, Some(&graph)).map_err(|e| format!("mixing_matrix: {e}"))
        }
        None => MixingMatrix::lazy_metropolis(&graph).map_err(|e| format!("graph: {e}")),
    }
}

fn threads_from_env() -> Result<usize, String> {
    match std::env::var("DPG_THREADS") {
        Ok(v) if !v.trim().is_empty() => v.trim().parse().map_err(|_| format!("DPG_THREADS must be a nonnegative integer, got `{v}`")),
        _ => Ok(0),
    }
}

pub fn build(doc: ExperimentDoc, base: &Path) -> Result<Experiment, String> {
    let suite = build_suite(&doc.suite, base)?;
    let mixing = build_mixing(&doc, suite.len())?;
    if let Some(a) = doc.alpha {
        if !(a > 0.0 && a.is_finite()) {
            return Err(format!("alpha must be positive, got {a}"));
        }
    }
    if !(doc.lambda >= 0.0 && doc.lambda.is_finite()) {
        return Err(format!("lambda must be nonnegative, got {}", doc.lambda));
    }
    if doc.metrics_every == 0 {
        return Err("metrics_every must be at least 1".into());
    }
    let gradient = match doc.gradient {
        GradientSpec::Exact {} => GradientMode::Exact,
        GradientSpec::MonteCarlo { batch, horizon, baseline } => {
            if batch == 0 {
                return Err("gradient.batch must be at least 1".into());
            }
            GradientMode::MonteCarlo(ReinforceOptions { batch, horizon, baseline })
        }
    };
    let init = match doc.init {
        InitSpec::Zeros {} => InitMode::Zeros,
        InitSpec::Random { scale, identical } => {
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(format!("init.scale must be nonnegative, got {scale}"));
            }
            InitMode::Random { scale, identical }
        }
    };
    let config = RunConfig {
        alpha: doc.alpha,
        lambda: doc.lambda,
        iterations: doc.iterations,
        gradient,
        seed: doc.seed,
        init,
        metrics_every: doc.metrics_every,
        agent_grad_norms: doc.agent_grad_norms,
        threads: threads_from_env()?,
    };
    let starts = suite
        .tasks()
        .iter()
        .map(|t| t.mdp.states().id(first_max(t.rho.probs())).to_string())
        .collect();
    Ok(Experiment { doc, suite, mixing, config, starts })
}
