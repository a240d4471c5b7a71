//! Builders for the line-world counterexamples and GridWorld suites.
//!
//! Rewards for entering a state are folded into `R[s][a]` as the expected
//! entry bonus over successors. Terminal states are absorbing and pay nothing.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::mdp::{StateDist, StateSpace, TabularMdp};
use crate::suite::Suite;

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const GRID_LEFT: usize = 2;
pub const GRID_RIGHT: usize = 3;

pub const LINE_STATES: [&str; 5] = ["S1", "S2", "S3", "S4", "S5"];

fn line_states() -> StateSpace {
    StateSpace::new(LINE_STATES).expect("distinct ids")
}

fn check_task(task: u8) -> Result<()> {
    if task == 1 || task == 2 {
        Ok(())
    } else {
        Err(domain(format!("line-world task must be 1 or 2, got {task}")))
    }
}

/// Entry bonus of S1 and S5 for each task.
fn line_bonus(task: u8) -> [f64; 5] {
    if task == 1 {
        [1.0, 0.0, 0.0, 0.0, -1.0]
    } else {
        [-1.0, 0.0, 0.0, 0.0, 1.0]
    }
}

/// Assembles a 5-state, 2-action line task from successor rows.
fn line_task(task: u8, gamma: f64, next: impl Fn(usize, usize) -> [f64; 5]) -> Result<TabularMdp> {
    let bonus = line_bonus(task);
    let mut transition = Vec::with_capacity(50);
    let mut reward = Vec::with_capacity(10);
    for s in 0..5 {
        for a in [LEFT, RIGHT] {
            let row = if s == 0 || s == 4 {
                let mut r = [0.0; 5];
                r[s] = 1.0;
                r
            } else {
                next(s, a)
            };
            let r = if s == 0 || s == 4 { 0.0 } else { row.iter().zip(&bonus).map(|(p, b)| p * b).sum() };
            transition.extend_from_slice(&row);
            reward.push(r);
        }
    }
    Ok(TabularMdp::new(line_states(), 2, transition, reward, gamma)?.named(format!("line-{task}")))
}

fn step(to: usize) -> [f64; 5] {
    let mut r = [0.0; 5];
    r[to] = 1.0;
    r
}

/// Deterministic five-state line. Task 2 swaps the effect of L and R at S2 and S4.
pub fn line_world(task: u8, gamma: f64) -> Result<TabularMdp> {
    check_task(task)?;
    line_task(task, gamma, |s, a| {
        let reversed = task == 2 && (s == 1 || s == 3);
        let left = (a == LEFT) != reversed;
        step(if left { s - 1 } else { s + 1 })
    })
}

/// Line world where S2 and S4 move randomly regardless of the action.
pub fn stochastic_line_world(task: u8, p: f64, gamma: f64) -> Result<TabularMdp> {
    check_task(task)?;
    if !(p > 0.5 && p <= 1.0) {
        return Err(domain(format!("p must lie in (0.5, 1], got {p}")));
    }
    let q = 1.0 - p;
    let mdp = line_task(task, gamma, |s, a| match (task, s) {
        (1, 1) => [q, 0.0, p, 0.0, 0.0],
        (1, 3) => [0.0, 0.0, q, 0.0, p],
        (2, 1) => [p, 0.0, q, 0.0, 0.0],
        (2, 3) => [0.0, 0.0, p, 0.0, q],
        _ => step(if a == LEFT { s - 1 } else { s + 1 }),
    })?;
    Ok(mdp.named(format!("stochastic-line-{task}")))
}

fn s3_point() -> StateDist {
    StateDist::point(5, 2).expect("in range")
}

/// Both deterministic line tasks, `rho = mu = ` point mass at S3.
pub fn example1_suite(gamma: f64) -> Result<Suite> {
    Suite::with_init(vec![line_world(1, gamma)?, line_world(2, gamma)?], |_| s3_point())
}

/// Both stochastic line tasks, `rho = mu = ` point mass at S3.
pub fn example2_suite(p: f64, gamma: f64) -> Result<Suite> {
    Suite::with_init(
        vec![stochastic_line_world(1, p, gamma)?, stochastic_line_world(2, p, gamma)?],
        |_| s3_point(),
    )
}

/// Grid cell as `[row, col]`; row 0 is the top.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell(pub usize, pub usize);

impl Cell {
    pub fn row(self) -> usize {
        self.0
    }

    pub fn col(self) -> usize {
        self.1
    }

    pub fn id(self) -> String {
        format!("r{}c{}", self.0, self.1)
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.0.abs_diff(other.0) + self.1.abs_diff(other.1)
    }
}

fn one() -> f64 {
    1.0
}

fn minus_one() -> f64 {
    -1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub goals: Vec<Cell>,
    #[serde(default)]
    pub obstacles: Vec<Cell>,
    /// Extra absorbing cells with no reward, e.g. another task's goal in a
    /// shared-dynamics suite.
    #[serde(default)]
    pub terminals: Vec<Cell>,
    #[serde(default)]
    pub step_reward: f64,
    #[serde(default = "one")]
    pub goal_reward: f64,
    #[serde(default = "minus_one")]
    pub obstacle_reward: f64,
    #[serde(default)]
    pub slip: f64,
    /// Declare and check the [0,1] reward convention.
    #[serde(default)]
    pub unit_rewards: bool,
}

impl GridSpec {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            goals: Vec::new(),
            obstacles: Vec::new(),
            terminals: Vec::new(),
            step_reward: 0.0,
            goal_reward: 1.0,
            obstacle_reward: -1.0,
            slip: 0.0,
            unit_rewards: false,
        }
    }

    pub fn goals(mut self, cells: &[Cell]) -> Self {
        self.goals = cells.to_vec();
        self
    }

    pub fn obstacles(mut self, cells: &[Cell]) -> Self {
        self.obstacles = cells.to_vec();
        self
    }

    pub fn terminals(mut self, cells: &[Cell]) -> Self {
        self.terminals = cells.to_vec();
        self
    }

    pub fn unit(mut self) -> Self {
        self.unit_rewards = true;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(domain("grid must have at least one cell"));
        }
        if !(0.0..=1.0).contains(&self.slip) {
            return Err(domain(format!("slip {} not in [0,1]", self.slip)));
        }
        let all = self.goals.iter().chain(&self.obstacles).chain(&self.terminals);
        for c in all.clone() {
            if c.0 >= self.height || c.1 >= self.width {
                return Err(domain(format!("cell {:?} outside the {}x{} grid", c, self.height, self.width)));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for c in all {
            if !seen.insert(*c) {
                return Err(domain(format!("cell {c:?} listed twice among goals/obstacles/terminals")));
            }
        }
        Ok(())
    }

    pub fn index(&self, c: Cell) -> usize {
        c.0 * self.width + c.1
    }

    pub fn cell(&self, i: usize) -> Cell {
        Cell(i / self.width, i % self.width)
    }

    fn target(&self, c: Cell, a: usize) -> Cell {
        let Cell(r, col) = c;
        match a {
            UP if r > 0 => Cell(r - 1, col),
            DOWN if r + 1 < self.height => Cell(r + 1, col),
            GRID_LEFT if col > 0 => Cell(r, col - 1),
            GRID_RIGHT if col + 1 < self.width => Cell(r, col + 1),
            _ => c,
        }
    }
}

/// One state per cell (`r{row}c{col}`, row-major), actions up/down/left/right.
/// Off-grid moves bounce in place; goals, obstacles and terminals absorb.
pub fn gridworld(spec: &GridSpec, gamma: f64) -> Result<TabularMdp> {
    spec.validate()?;
    let n = spec.width * spec.height;
    let mut entry = vec![0.0; n];
    let mut absorbing = vec![false; n];
    for c in &spec.goals {
        entry[spec.index(*c)] = spec.goal_reward;
        absorbing[spec.index(*c)] = true;
    }
    for c in &spec.obstacles {
        entry[spec.index(*c)] = spec.obstacle_reward;
        absorbing[spec.index(*c)] = true;
    }
    for c in &spec.terminals {
        absorbing[spec.index(*c)] = true;
    }
    let mut transition = vec![0.0; n * 4 * n];
    let mut reward = vec![0.0; n * 4];
    for s in 0..n {
        for a in 0..4 {
            let row = &mut transition[(s * 4 + a) * n..(s * 4 + a + 1) * n];
            if absorbing[s] {
                row[s] = 1.0;
                continue;
            }
            let c = spec.cell(s);
            row[spec.index(spec.target(c, a))] += 1.0 - spec.slip;
            if spec.slip > 0.0 {
                for b in 0..4 {
                    row[spec.index(spec.target(c, b))] += spec.slip / 4.0;
                }
            }
            let r: f64 = row.iter().zip(&entry).map(|(p, e)| p * e).sum();
            reward[s * 4 + a] = r + spec.step_reward;
        }
    }
    let states = StateSpace::new((0..n).map(|i| spec.cell(i).id()))?;
    let mdp = TabularMdp::new(states, 4, transition, reward, gamma)?;
    if spec.unit_rewards {
        mdp.with_unit_rewards()
    } else {
        Ok(mdp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConflictKind {
    None,
    Resolvable,
    Unresolvable,
}

/// A GridWorld suite together with its per-task specs and the common start.
#[derive(Debug, Clone)]
pub struct GridSuite {
    pub suite: Suite,
    pub specs: Vec<GridSpec>,
    pub start: Cell,
}

/// 5x5, four tasks starting at the top-left corner. Each task has its own
/// goal and obstacle; cells are absorbing only in the task that labels them.
///
/// * `none`: no cell is labeled by two tasks.
/// * `resolvable`: task 2's obstacle is task 3's goal, but task 2 finishes
///   before it can reach that cell along the shared route.
/// * `unresolvable`: tasks 2 and 3 each have the other's goal as obstacle,
///   so one of them must fail.
pub fn conflict_suite(kind: ConflictKind, gamma: f64) -> Result<GridSuite> {
    let (goals, obstacles) = match kind {
        ConflictKind::None => (
            [Cell(0, 2), Cell(0, 4), Cell(2, 4), Cell(4, 4)],
            [Cell(1, 2), Cell(1, 3), Cell(2, 3), Cell(3, 3)],
        ),
        ConflictKind::Resolvable => (
            [Cell(0, 2), Cell(0, 4), Cell(2, 4), Cell(4, 4)],
            [Cell(1, 2), Cell(2, 4), Cell(2, 3), Cell(3, 3)],
        ),
        ConflictKind::Unresolvable => (
            [Cell(0, 1), Cell(0, 2), Cell(0, 3), Cell(0, 4)],
            [Cell(2, 1), Cell(0, 3), Cell(0, 2), Cell(2, 3)],
        ),
    };
    let start = Cell(0, 0);
    let specs: Vec<GridSpec> = goals
        .iter()
        .zip(&obstacles)
        .map(|(g, o)| GridSpec::new(5, 5).goals(&[*g]).obstacles(&[*o]))
        .collect();
    let tasks = specs
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(gridworld(s, gamma)?.named(format!("task-{}", i + 1))))
        .collect::<Result<Vec<_>>>()?;
    let start_index = specs[0].index(start);
    let suite = Suite::with_init(tasks, |m| StateDist::point(m.num_states(), start_index).expect("in range"))?;
    Ok(GridSuite { suite, specs, start })
}

/// `size x size` grid, one task per goal. Every goal cell is absorbing in
/// every task, so all tasks share one kernel; rewards are in [0,1] and
/// `rho = mu` is uniform over all cells.
pub fn shared_goal_suite(size: usize, goals: &[Cell], gamma: f64) -> Result<GridSuite> {
    if goals.is_empty() {
        return Err(domain("at least one goal required"));
    }
    let specs: Vec<GridSpec> = goals
        .iter()
        .map(|g| {
            let others: Vec<Cell> = goals.iter().copied().filter(|c| c != g).collect();
            GridSpec::new(size, size).goals(&[*g]).terminals(&others).unit()
        })
        .collect();
    let tasks = specs
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(gridworld(s, gamma)?.named(format!("task-{}", i + 1))))
        .collect::<Result<Vec<_>>>()?;
    let suite = Suite::with_init(tasks, |m| StateDist::uniform(m.num_states()))?;
    Ok(GridSuite { suite, specs, start: Cell(0, 0) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_world_moves() {
        let t1 = line_world(1, 0.9).unwrap();
        let t2 = line_world(2, 0.9).unwrap();
        assert_eq!(t1.p(1, LEFT, 0), 1.0);
        assert_eq!(t2.p(1, LEFT, 2), 1.0);
        assert_eq!(t2.p(2, LEFT, 1), 1.0);
        for t in [&t1, &t2] {
            assert!(t.is_absorbing(0) && t.is_absorbing(4));
            assert_eq!(t.r(0, LEFT), 0.0);
        }
        assert_eq!(t1.r(1, LEFT), 1.0);
        assert_eq!(t2.r(3, LEFT), 1.0);
        assert!(line_world(3, 0.9).is_err());
    }

    #[test]
    fn stochastic_rows_and_rewards() {
        let p = 0.75;
        let t1 = stochastic_line_world(1, p, 0.7).unwrap();
        let t2 = stochastic_line_world(2, p, 0.7).unwrap();
        for a in [LEFT, RIGHT] {
            assert_eq!(t1.transition_row(1, a), &[0.25, 0.0, 0.75, 0.0, 0.0]);
            assert_eq!(t2.transition_row(3, a), &[0.0, 0.0, 0.75, 0.0, 0.25]);
            let r1: Vec<f64> = (0..5).map(|s| t1.r(s, a)).collect();
            let r2: Vec<f64> = (0..5).map(|s| t2.r(s, a)).collect();
            assert_eq!(r1, vec![0.0, 0.25, 0.0, -0.75, 0.0]);
            assert_eq!(r2, vec![0.0, -0.75, 0.0, 0.25, 0.0]);
        }
        let t1 = stochastic_line_world(1, 1.0, 0.7).unwrap();
        assert_eq!(t1.p(1, LEFT, 2), 1.0);
        assert!(stochastic_line_world(1, 0.5, 0.7).is_err());
        assert!(stochastic_line_world(1, 1.1, 0.7).is_err());
    }

    #[test]
    fn grid_bounce_and_absorption() {
        let spec = GridSpec::new(2, 1).goals(&[Cell(0, 1)]);
        let g = gridworld(&spec, 0.9).unwrap();
        assert_eq!(g.p(0, GRID_RIGHT, 1), 1.0);
        assert_eq!(g.r(0, GRID_RIGHT), 1.0);
        assert!(g.is_absorbing(1));
        assert_eq!(g.r(1, UP), 0.0);

        let g = gridworld(&GridSpec::new(3, 3), 0.9).unwrap();
        assert_eq!(g.p(0, UP, 0), 1.0);
        assert_eq!(g.p(0, GRID_LEFT, 0), 1.0);
        assert_eq!(g.p(8, DOWN, 8), 1.0);
        assert_eq!(g.p(8, GRID_RIGHT, 8), 1.0);
        assert_eq!(g.states().id(5), "r1c2");
    }

    #[test]
    fn slip_spreads_mass() {
        let mut spec = GridSpec::new(3, 3);
        spec.slip = 0.2;
        let g = gridworld(&spec, 0.9).unwrap();
        // Centre cell, action up: 0.8 + 0.05 up, 0.05 to each other neighbour.
        assert!((g.p(4, UP, 1) - 0.85).abs() < 1e-15);
        assert!((g.p(4, UP, 7) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn grid_spec_validation() {
        assert!(gridworld(&GridSpec::new(2, 2).goals(&[Cell(0, 0)]).obstacles(&[Cell(0, 0)]), 0.9).is_err());
        assert!(gridworld(&GridSpec::new(2, 2).goals(&[Cell(2, 0)]), 0.9).is_err());
        assert!(gridworld(&GridSpec::new(2, 2).obstacles(&[Cell(0, 0)]).unit(), 0.9).is_err());
        let spec: GridSpec = serde_json::from_str(r#"{"width":3,"height":2,"goals":[[1,2]]}"#).unwrap();
        assert_eq!(spec.goals, vec![Cell(1, 2)]);
        assert_eq!(spec.obstacle_reward, -1.0);
        assert!(serde_json::from_str::<GridSpec>(r#"{"width":3,"height":2,"goal":[[1,2]]}"#).is_err());
    }

    #[test]
    fn conflict_suite_labels() {
        let none = conflict_suite(ConflictKind::None, 0.9).unwrap();
        let labels = |s: &GridSuite| -> (Vec<Cell>, Vec<Cell>) {
            (s.specs.iter().flat_map(|x| x.goals.clone()).collect(), s.specs.iter().flat_map(|x| x.obstacles.clone()).collect())
        };
        let (g, o) = labels(&none);
        assert!(g.iter().all(|c| !o.contains(c)));
        let (g, o) = labels(&conflict_suite(ConflictKind::Resolvable, 0.9).unwrap());
        assert_eq!(g.iter().filter(|c| o.contains(c)).count(), 1);
        let s = conflict_suite(ConflictKind::Unresolvable, 0.9).unwrap();
        let (a, b) = (&s.specs[1], &s.specs[2]);
        assert_eq!(a.goals, b.obstacles);
        assert_eq!(b.goals, a.obstacles);
        assert!(s.suite.shared_state_space());
    }

    #[test]
    fn shared_goal_suite_shares_dynamics() {
        let s = shared_goal_suite(5, &[Cell(0, 4), Cell(4, 4)], 0.9).unwrap();
        assert!(s.suite.shared_dynamics());
        assert!(s.suite.unit_rewards());
    }
}
