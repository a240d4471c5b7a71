//! CSV and JSON artifacts.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;

use dpg_core::dpg::IterationMetrics;
use dpg_core::mdp::{PolicyTable, StateSpace};

/// Accepted deviation of a row sum from 1 when reading policy tables.
pub const ROW_SUM_TOL: f64 = 1e-6;

pub type CsvWriter = csv::Writer<BufWriter<File>>;

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn metrics_writer(path: &Path, agents: usize, agent_grad_norms: bool) -> csv::Result<CsvWriter> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header: Vec<String> =
        ["k", "sum_value", "avg_grad_norm", "consensus_error", "lyapunov"].iter().map(|s| s.to_string()).collect();
    header.extend((0..agents).map(|i| format!("value_agent_{i}")));
    if agent_grad_norms {
        header.extend((0..agents).map(|i| format!("grad_norm_agent_{i}")));
    }
    w.write_record(&header)?;
    Ok(w)
}

pub fn write_metrics_row(w: &mut CsvWriter, m: &IterationMetrics) -> csv::Result<()> {
    let mut row = vec![m.k.to_string(), num(m.sum_value), num(m.avg_grad_norm), num(m.consensus_error), num(m.lyapunov)];
    row.extend(m.agent_values.iter().map(|v| num(*v)));
    if let Some(norms) = &m.agent_grad_norms {
        row.extend(norms.iter().map(|v| num(*v)));
    }
    w.write_record(&row)
}

pub fn write_policy(path: &Path, table: &PolicyTable) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["state", "action", "prob"])?;
    let na = table.num_actions();
    for (s, id) in table.space().ids().iter().enumerate() {
        for (a, p) in table.row(s).iter().enumerate().take(na) {
            w.write_record([id.clone(), a.to_string(), num(*p)])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PolicyRow {
    state: String,
    action: usize,
    prob: f64,
}

/// Reads a `state,action,prob` table. Every state of `space` and every
/// action must appear exactly once; unknown states are errors.
pub fn read_policy(path: &Path, space: &Arc<StateSpace>, num_actions: usize) -> Result<PolicyTable, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut seen: HashMap<(usize, usize), ()> = HashMap::new();
    let mut probs = vec![f64::NAN; space.len() * num_actions];
    for (line, row) in reader.deserialize::<PolicyRow>().enumerate() {
        let row = row.map_err(|e| format!("{}: {e}", path.display()))?;
        let at = || format!("{}: record {}", path.display(), line + 1);
        let s = space.get(&row.state).ok_or_else(|| format!("{}: state `{}` is not in the suite", at(), row.state))?;
        if row.action >= num_actions {
            return Err(format!("{}: action {} out of range (suite has {num_actions})", at(), row.action));
        }
        if seen.insert((s, row.action), ()).is_some() {
            return Err(format!("{}: duplicate entry for ({}, {})", at(), row.state, row.action));
        }
        probs[s * num_actions + row.action] = row.prob;
    }
    if let Some(i) = probs.iter().position(|p| p.is_nan()) {
        return Err(format!(
            "{}: missing entry for state `{}` action {}",
            path.display(),
            space.id(i / num_actions),
            i % num_actions
        ));
    }
    // Hand-written tables carry rounded entries; renormalize rows that are
    // close enough to stochastic.
    for (s, row) in probs.chunks_mut(num_actions).enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOL {
            return Err(format!("{}: row for state `{}` sums to {total}", path.display(), space.id(s)));
        }
        row.iter_mut().for_each(|p| *p /= total);
    }
    PolicyTable::new(space.clone(), num_actions, probs).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    std::fs::write(path, text + "\n")
}
