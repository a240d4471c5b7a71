//! A multi-task suite: tasks over a common union state space, each with an
//! evaluation distribution `rho` and a training distribution `mu`.

use std::sync::Arc;

use crate::error::{domain, Result};
use crate::gradient::{add_regularizer_gradient, add_value_gradient};
use crate::mdp::{relative_entropy, Policy, PolicyEvaluation, PolicyTable, SoftmaxPolicy, StateDist, StateSpace, TabularMdp};

#[derive(Debug, Clone)]
pub struct Task {
    pub mdp: TabularMdp,
    pub rho: StateDist,
    pub mu: StateDist,
    embedding: Vec<usize>,
}

impl Task {
    /// Local-to-union state index map.
    pub fn embedding(&self) -> &[usize] {
        &self.embedding
    }

    pub fn evaluate(&self, table: &PolicyTable) -> Result<PolicyEvaluation> {
        PolicyEvaluation::with_embedding(&self.mdp, &self.embedding, table)
    }
}

/// Which initial distribution to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Rho,
    Mu,
}

#[derive(Debug, Clone)]
pub struct Suite {
    space: Arc<StateSpace>,
    num_actions: usize,
    tasks: Vec<Task>,
}

impl Suite {
    /// Each entry is `(task, rho, mu)`.
    pub fn new(tasks: Vec<(TabularMdp, StateDist, StateDist)>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(domain("a suite needs at least one task"));
        }
        let num_actions = tasks[0].0.num_actions();
        if tasks.iter().any(|(m, _, _)| m.num_actions() != num_actions) {
            return Err(domain("all tasks must share the action count"));
        }
        let space = Arc::new(StateSpace::union(tasks.iter().map(|(m, _, _)| m)));
        let tasks = tasks
            .into_iter()
            .map(|(mdp, rho, mu)| {
                if rho.len() != mdp.num_states() || mu.len() != mdp.num_states() {
                    return Err(domain(format!("task `{}`: rho/mu size differs from its state count", mdp.name())));
                }
                let embedding = mdp.embedding(&space)?;
                Ok(Task { mdp, rho, mu, embedding })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { space, num_actions, tasks })
    }

    /// Same tasks, `rho` and `mu` both replaced by `init`.
    pub fn with_init(tasks: Vec<TabularMdp>, init: impl Fn(&TabularMdp) -> StateDist) -> Result<Self> {
        Self::new(tasks.into_iter().map(|m| {
            let d = init(&m);
            (m, d.clone(), d)
        }).collect())
    }

    pub fn space(&self) -> &Arc<StateSpace> {
        &self.space
    }

    pub fn num_states(&self) -> usize {
        self.space.len()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.mdp.gamma()).collect()
    }

    /// Every task enumerates the full union space in the same order.
    pub fn shared_state_space(&self) -> bool {
        self.tasks.iter().all(|t| t.mdp.states().ids() == self.space.ids())
    }

    /// Shared state space and identical kernels.
    pub fn shared_dynamics(&self) -> bool {
        self.shared_state_space() && self.tasks.iter().all(|t| t.mdp.same_dynamics(&self.tasks[0].mdp))
    }

    pub fn unit_rewards(&self) -> bool {
        self.tasks.iter().all(|t| t.mdp.unit_rewards())
    }

    pub fn zeros(&self) -> SoftmaxPolicy {
        SoftmaxPolicy::zeros(self.space.clone(), self.num_actions)
    }

    fn init(task: &Task, which: Init) -> &StateDist {
        match which {
            Init::Rho => &task.rho,
            Init::Mu => &task.mu,
        }
    }

    /// `V_i(rho_i)` per task.
    pub fn task_values(&self, policy: &impl Policy) -> Result<Vec<f64>> {
        let table = policy.to_table();
        self.tasks.iter().map(|t| Ok(t.evaluate(&table)?.value(&t.rho))).collect()
    }

    /// `sum_i V_i(rho_i)`.
    pub fn sum_value(&self, policy: &impl Policy) -> Result<f64> {
        Ok(self.task_values(policy)?.iter().sum())
    }

    /// `sum_i (V_i(init_i) - lambda RE)`.
    pub fn objective(&self, policy: &SoftmaxPolicy, lambda: f64, which: Init) -> Result<f64> {
        let table = policy.table();
        let mut total = 0.0;
        for t in &self.tasks {
            total += t.evaluate(&table)?.value(Self::init(t, which));
        }
        if lambda != 0.0 {
            total -= self.tasks.len() as f64 * lambda * relative_entropy(policy);
        }
        Ok(total)
    }

    /// Gradient of `objective` as a flat theta-shaped vector.
    pub fn gradient(&self, policy: &SoftmaxPolicy, lambda: f64, which: Init) -> Result<Vec<f64>> {
        let table = policy.table();
        let mut g = vec![0.0; policy.theta().len()];
        for t in &self.tasks {
            let eval = t.evaluate(&table)?;
            add_value_gradient(&eval, Self::init(t, which), &mut g)?;
        }
        add_regularizer_gradient(&table, self.tasks.len() as f64 * lambda, &mut g);
        Ok(g)
    }
}
