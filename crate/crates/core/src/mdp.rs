//! Tabular MDPs, softmax policies and exact policy evaluation.
//!
//! Transition tensors are stored row-stochastic: `P[s][a][s']`. All
//! evaluation is done with dense LU solves.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, DpgError, Result};

/// Tolerance for "sums to one" checks on distributions and kernels.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Ordered set of state ids.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl StateSpace {
    pub fn new<I, S>(ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(domain(format!("duplicate state id `{id}`")));
            }
        }
        Ok(Self { ids, index })
    }

    /// Union of the tasks' state sets, in first-seen order.
    pub fn union<'a, I>(mdps: I) -> Self
    where
        I: IntoIterator<Item = &'a TabularMdp>,
    {
        let mut ids = Vec::new();
        let mut index = HashMap::new();
        for mdp in mdps {
            for id in mdp.states().ids() {
                if !index.contains_key(id) {
                    index.insert(id.clone(), ids.len());
                    ids.push(id.clone());
                }
            }
        }
        Self { ids, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.get(id).ok_or_else(|| DpgError::UnknownState(id.to_string()))
    }
}

/// One task: states, shared action count, kernel, expected rewards, discount.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    name: String,
    states: StateSpace,
    num_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    unit_rewards: bool,
}

impl TabularMdp {
    /// `transition` is flat `[s][a][s']`, `reward` is flat `[s][a]`.
    pub fn new(
        states: StateSpace,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let n = states.len();
        if n == 0 {
            return Err(DpgError::InvalidMdp("no states".into()));
        }
        if num_actions == 0 {
            return Err(DpgError::InvalidMdp("no actions".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(DpgError::InvalidMdp(format!("discount {gamma} not in (0,1)")));
        }
        if transition.len() != n * num_actions * n {
            return Err(DpgError::InvalidMdp(format!(
                "transition tensor has {} entries, expected {}",
                transition.len(),
                n * num_actions * n
            )));
        }
        if reward.len() != n * num_actions {
            return Err(DpgError::InvalidMdp(format!(
                "reward table has {} entries, expected {}",
                reward.len(),
                n * num_actions
            )));
        }
        for s in 0..n {
            for a in 0..num_actions {
                let row = &transition[(s * num_actions + a) * n..(s * num_actions + a + 1) * n];
                if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
                    return Err(DpgError::InvalidMdp(format!(
                        "P[{}][{a}] has invalid entry {p}",
                        states.id(s)
                    )));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(DpgError::InvalidMdp(format!(
                        "P[{}][{a}] sums to {total}",
                        states.id(s)
                    )));
                }
                let r = reward[s * num_actions + a];
                if !r.is_finite() {
                    return Err(DpgError::InvalidMdp(format!("R[{}][{a}] = {r}", states.id(s))));
                }
            }
        }
        Ok(Self {
            name: String::new(),
            states,
            num_actions,
            transition,
            reward,
            gamma,
            unit_rewards: false,
        })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Declares the [0,1] reward convention and checks it.
    pub fn with_unit_rewards(mut self) -> Result<Self> {
        if let Some(r) = self.reward.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(DpgError::InvalidMdp(format!(
                "reward {r} outside [0,1] under the unit-reward convention"
            )));
        }
        self.unit_rewards = true;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn states(&self) -> &StateSpace {
        &self.states
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn unit_rewards(&self) -> bool {
        self.unit_rewards
    }

    pub fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        let n = self.num_states();
        self.transition[(s * self.num_actions + a) * n + next]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.num_states();
        let start = (s * self.num_actions + a) * n;
        &self.transition[start..start + n]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    /// Flat `[s][a][s']` kernel.
    pub fn transitions(&self) -> &[f64] {
        &self.transition
    }

    /// Every action keeps the agent in `s`.
    pub fn is_absorbing(&self, s: usize) -> bool {
        (0..self.num_actions).all(|a| self.p(s, a, s) == 1.0)
    }

    /// Index of each local state inside `space`.
    pub fn embedding(&self, space: &StateSpace) -> Result<Vec<usize>> {
        self.states.ids().iter().map(|id| space.index_of(id)).collect()
    }

    /// Same state ids in the same order and the same kernel.
    pub fn same_dynamics(&self, other: &TabularMdp) -> bool {
        self.states.ids() == other.states.ids()
            && self.num_actions == other.num_actions
            && self.transition == other.transition
    }

    pub fn to_document(&self, initial: Option<&StateDist>) -> MdpDocument {
        let n = self.num_states();
        let mut transitions = Vec::new();
        let mut rewards = Vec::new();
        for s in 0..n {
            for a in 0..self.num_actions {
                for next in 0..n {
                    let p = self.p(s, a, next);
                    if p != 0.0 {
                        transitions.push(TransitionEntry {
                            s: self.states.id(s).to_string(),
                            a,
                            next: self.states.id(next).to_string(),
                            p,
                        });
                    }
                }
                let r = self.r(s, a);
                if r != 0.0 {
                    rewards.push(RewardEntry { s: self.states.id(s).to_string(), a, r });
                }
            }
        }
        let initial = initial
            .map(|d| {
                d.probs()
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p != 0.0)
                    .map(|(s, p)| InitialEntry { s: self.states.id(s).to_string(), p: *p })
                    .collect()
            })
            .unwrap_or_default();
        MdpDocument {
            name: (!self.name.is_empty()).then(|| self.name.clone()),
            states: self.states.ids().to_vec(),
            num_actions: self.num_actions,
            gamma: self.gamma,
            unit_rewards: self.unit_rewards,
            transitions,
            rewards,
            initial,
        }
    }
}

/// Probability vector over one task's states.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDist(Vec<f64>);

impl StateDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(domain("empty distribution"));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(domain(format!("distribution has invalid entry {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return Err(domain(format!("distribution sums to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn point(n: usize, i: usize) -> Result<Self> {
        if i >= n {
            return Err(domain(format!("point mass index {i} out of range {n}")));
        }
        let mut probs = vec![0.0; n];
        probs[i] = 1.0;
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution over zero states");
        Self(vec![1.0 / n as f64; n])
    }

    /// Builds a distribution over `mdp`'s states from `(state id, mass)` pairs.
    pub fn from_pairs(mdp: &TabularMdp, pairs: &[(String, f64)]) -> Result<Self> {
        let mut probs = vec![0.0; mdp.num_states()];
        for (id, p) in pairs {
            probs[mdp.states().index_of(id)?] += p;
        }
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, v: &[f64]) -> f64 {
        self.0.iter().zip(v).map(|(p, x)| p * x).sum()
    }
}

/// Explicit action probabilities over a state space. Allows exact 0/1 entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    space: Arc<StateSpace>,
    num_actions: usize,
    probs: Vec<f64>,
}

fn check_row(row: &[f64]) -> Result<()> {
    if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(domain(format!("policy row has invalid entry {p}")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(domain(format!("policy row sums to {total}")));
    }
    Ok(())
}

impl PolicyTable {
    pub fn new(space: Arc<StateSpace>, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if num_actions == 0 || probs.len() != space.len() * num_actions {
            return Err(domain(format!(
                "policy table has {} entries, expected {}",
                probs.len(),
                space.len() * num_actions
            )));
        }
        for row in probs.chunks(num_actions) {
            check_row(row)?;
        }
        Ok(Self { space, num_actions, probs })
    }

    pub fn uniform(space: Arc<StateSpace>, num_actions: usize) -> Self {
        let probs = vec![1.0 / num_actions as f64; space.len() * num_actions];
        Self { space, num_actions, probs }
    }

    pub fn deterministic(space: Arc<StateSpace>, num_actions: usize, actions: &[usize]) -> Result<Self> {
        if actions.len() != space.len() {
            return Err(domain("one action per state required"));
        }
        let mut probs = vec![0.0; space.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(domain(format!("action {a} out of range")));
            }
            probs[s * num_actions + a] = 1.0;
        }
        Ok(Self { space, num_actions, probs })
    }

    pub fn set_row(&mut self, state: &str, row: &[f64]) -> Result<()> {
        let s = self.space.index_of(state)?;
        if row.len() != self.num_actions {
            return Err(domain("row length differs from action count"));
        }
        check_row(row)?;
        self.probs[s * self.num_actions..(s + 1) * self.num_actions].copy_from_slice(row);
        Ok(())
    }

    pub fn space(&self) -> &Arc<StateSpace> {
        &self.space
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    /// Most probable action, ties to the lowest index.
    pub fn greedy_action(&self, s: usize) -> usize {
        argmax(self.row(s))
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Softmax parameter table over a (union) state space.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    space: Arc<StateSpace>,
    num_actions: usize,
    theta: Vec<f64>,
}

pub(crate) fn softmax_into(theta: &[f64], out: &mut [f64]) {
    let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, t) in out.iter_mut().zip(theta) {
        *o = (t - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_sum_exp(theta: &[f64]) -> f64 {
    let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + theta.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

impl SoftmaxPolicy {
    pub fn zeros(space: Arc<StateSpace>, num_actions: usize) -> Self {
        let theta = vec![0.0; space.len() * num_actions];
        Self { space, num_actions, theta }
    }

    pub fn from_theta(space: Arc<StateSpace>, num_actions: usize, theta: Vec<f64>) -> Result<Self> {
        if num_actions == 0 || theta.len() != space.len() * num_actions {
            return Err(domain(format!(
                "theta has {} entries, expected {}",
                theta.len(),
                space.len() * num_actions
            )));
        }
        Ok(Self { space, num_actions, theta })
    }

    pub fn space(&self) -> &Arc<StateSpace> {
        &self.space
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    pub fn theta_row(&self, s: usize) -> &[f64] {
        &self.theta[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn probs_at(&self, s: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_actions];
        softmax_into(self.theta_row(s), &mut out);
        out
    }

    /// Log-probabilities computed without taking the log of a rounded probability.
    pub fn log_probs_at(&self, s: usize) -> Vec<f64> {
        let row = self.theta_row(s);
        let lse = log_sum_exp(row);
        row.iter().map(|t| t - lse).collect()
    }

    pub fn policy_probs(&self, state: &str) -> Result<Vec<f64>> {
        Ok(self.probs_at(self.space.index_of(state)?))
    }

    pub fn table(&self) -> PolicyTable {
        let mut probs = vec![0.0; self.theta.len()];
        for (t, p) in self.theta.chunks(self.num_actions).zip(probs.chunks_mut(self.num_actions)) {
            softmax_into(t, p);
        }
        PolicyTable { space: self.space.clone(), num_actions: self.num_actions, probs }
    }
}

/// Anything that induces a probability table.
pub trait Policy {
    fn to_table(&self) -> Cow<'_, PolicyTable>;
}

impl Policy for PolicyTable {
    fn to_table(&self) -> Cow<'_, PolicyTable> {
        Cow::Borrowed(self)
    }
}

impl Policy for SoftmaxPolicy {
    fn to_table(&self) -> Cow<'_, PolicyTable> {
        Cow::Owned(self.table())
    }
}

/// V, Q and the policy kernel of one task under one policy.
#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    gamma: f64,
    num_actions: usize,
    embedding: Vec<usize>,
    probs: Vec<f64>,
    p_pi: DMatrix<f64>,
    values: Vec<f64>,
    q: Vec<f64>,
}

impl PolicyEvaluation {
    pub fn new(mdp: &TabularMdp, policy: &PolicyTable) -> Result<Self> {
        let embedding = mdp.embedding(policy.space())?;
        Self::with_embedding(mdp, &embedding, policy)
    }

    /// `embedding[s]` is the policy-space index of local state `s`.
    pub fn with_embedding(mdp: &TabularMdp, embedding: &[usize], policy: &PolicyTable) -> Result<Self> {
        let n = mdp.num_states();
        let na = mdp.num_actions();
        if policy.num_actions() != na {
            return Err(domain(format!(
                "policy has {} actions, task has {na}",
                policy.num_actions()
            )));
        }
        let gamma = mdp.gamma();
        let mut probs = Vec::with_capacity(n * na);
        let mut p_pi = DMatrix::zeros(n, n);
        let mut r_pi = DVector::zeros(n);
        for s in 0..n {
            let row = policy.row(embedding[s]);
            probs.extend_from_slice(row);
            for (a, &pa) in row.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                r_pi[s] += pa * mdp.r(s, a);
                for (next, &p) in mdp.transition_row(s, a).iter().enumerate() {
                    if p != 0.0 {
                        p_pi[(s, next)] += pa * p;
                    }
                }
            }
        }
        let system = DMatrix::identity(n, n) - &p_pi * gamma;
        let values = system
            .lu()
            .solve(&r_pi)
            .ok_or_else(|| DpgError::Singular("I - gamma P^pi".into()))?;
        let values: Vec<f64> = values.iter().copied().collect();
        let mut q = Vec::with_capacity(n * na);
        for s in 0..n {
            for a in 0..na {
                let next: f64 = mdp.transition_row(s, a).iter().zip(&values).map(|(p, v)| p * v).sum();
                q.push(mdp.r(s, a) + gamma * next);
            }
        }
        Ok(Self { gamma, num_actions: na, embedding: embedding.to_vec(), probs, p_pi, values, q })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn embedding(&self) -> &[usize] {
        &self.embedding
    }

    /// Local action probabilities, `[s][a]`.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Row-stochastic `P^pi[s][s']`.
    pub fn policy_transition(&self) -> &DMatrix<f64> {
        &self.p_pi
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, init: &StateDist) -> f64 {
        init.dot(&self.values)
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn advantage(&self) -> Vec<f64> {
        self.q
            .iter()
            .enumerate()
            .map(|(i, q)| q - self.values[i / self.num_actions])
            .collect()
    }

    /// Normalized discounted visitation `(1-gamma) (I - gamma P^pi)^{-T} init`.
    pub fn visitation(&self, init: &StateDist) -> Result<Vec<f64>> {
        let n = self.values.len();
        if init.len() != n {
            return Err(domain(format!("init has {} entries, task has {n}", init.len())));
        }
        let system = DMatrix::identity(n, n) - self.p_pi.transpose() * self.gamma;
        let rhs = DVector::from_iterator(n, init.probs().iter().map(|p| (1.0 - self.gamma) * p));
        let d = system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| DpgError::Singular("I - gamma P^pi^T".into()))?;
        Ok(d.iter().copied().collect())
    }

    /// `(I - gamma P^pi)^{-1}`; row `s0` times `(1-gamma)` is `d(.|s0)`.
    pub fn resolvent(&self) -> Result<DMatrix<f64>> {
        let n = self.values.len();
        (DMatrix::identity(n, n) - &self.p_pi * self.gamma)
            .try_inverse()
            .ok_or_else(|| DpgError::Singular("I - gamma P^pi".into()))
    }
}

pub fn policy_transition(mdp: &TabularMdp, policy: &impl Policy) -> Result<DMatrix<f64>> {
    Ok(PolicyEvaluation::new(mdp, &policy.to_table())?.p_pi)
}

pub fn value_function(mdp: &TabularMdp, policy: &impl Policy) -> Result<Vec<f64>> {
    Ok(PolicyEvaluation::new(mdp, &policy.to_table())?.values)
}

/// `Q[s][a]`, flat.
pub fn q_function(mdp: &TabularMdp, policy: &impl Policy) -> Result<Vec<f64>> {
    Ok(PolicyEvaluation::new(mdp, &policy.to_table())?.q)
}

/// `A[s][a] = Q[s][a] - V[s]`, flat.
pub fn advantage(mdp: &TabularMdp, policy: &impl Policy) -> Result<Vec<f64>> {
    Ok(PolicyEvaluation::new(mdp, &policy.to_table())?.advantage())
}

pub fn discounted_visitation(mdp: &TabularMdp, policy: &impl Policy, init: &StateDist) -> Result<Vec<f64>> {
    PolicyEvaluation::new(mdp, &policy.to_table())?.visitation(init)
}

/// Mean KL divergence from the uniform action distribution, over every state
/// of the policy's space.
pub fn relative_entropy(policy: &SoftmaxPolicy) -> f64 {
    let na = policy.num_actions();
    let ln_a = (na as f64).ln();
    let total: f64 = policy
        .theta()
        .chunks(na)
        .map(|row| {
            let mean = row.iter().sum::<f64>() / na as f64;
            (log_sum_exp(row) - mean - ln_a).max(0.0)
        })
        .sum();
    total / policy.space().len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub enum RolloutEnd {
    /// Entered an absorbing state; `reward` is the reward collected on entry.
    Absorbed { state: String, reward: f64 },
    Revisit { state: String },
    StepLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub states: Vec<String>,
    pub actions: Vec<usize>,
    pub end: RolloutEnd,
}

impl Rollout {
    /// Ended in an absorbing state with positive entry reward.
    pub fn reached_goal(&self) -> bool {
        matches!(self.end, RolloutEnd::Absorbed { reward, .. } if reward > 0.0)
    }

    pub fn hit_obstacle(&self) -> bool {
        matches!(self.end, RolloutEnd::Absorbed { reward, .. } if reward < 0.0)
    }
}

/// Follows the most probable action and the most likely successor, ties to
/// the lowest index, until absorption, a repeated state, or `max_steps`.
pub fn greedy_rollout(mdp: &TabularMdp, policy: &impl Policy, start: &str, max_steps: usize) -> Result<Rollout> {
    let table = policy.to_table();
    let embedding = mdp.embedding(table.space())?;
    let mut s = mdp.states().index_of(start)?;
    let mut states = vec![start.to_string()];
    let mut actions = Vec::new();
    let mut seen = vec![false; mdp.num_states()];
    seen[s] = true;
    if mdp.is_absorbing(s) {
        let state = start.to_string();
        return Ok(Rollout { states, actions, end: RolloutEnd::Absorbed { state, reward: 0.0 } });
    }
    for _ in 0..max_steps {
        let a = table.greedy_action(embedding[s]);
        let reward = mdp.r(s, a);
        let next = argmax(mdp.transition_row(s, a));
        actions.push(a);
        let id = mdp.states().id(next).to_string();
        states.push(id.clone());
        if mdp.is_absorbing(next) {
            return Ok(Rollout { states, actions, end: RolloutEnd::Absorbed { state: id, reward } });
        }
        if seen[next] {
            return Ok(Rollout { states, actions, end: RolloutEnd::Revisit { state: id } });
        }
        seen[next] = true;
        s = next;
    }
    Ok(Rollout { states, actions, end: RolloutEnd::StepLimit })
}

/// Random MDP with [0,1] rewards and sparse random kernels.
pub fn random_mdp<R: Rng + ?Sized>(rng: &mut R, num_states: usize, num_actions: usize, gamma: f64) -> TabularMdp {
    let states = StateSpace::new((0..num_states).map(|i| format!("s{i}"))).expect("distinct ids");
    let mut transition = Vec::with_capacity(num_states * num_actions * num_states);
    for _ in 0..num_states * num_actions {
        let mut row: Vec<f64> = (0..num_states)
            .map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random::<f64>() })
            .collect();
        if row.iter().all(|p| *p == 0.0) {
            row[rng.random_range(0..num_states)] = 1.0;
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
        transition.extend(row);
    }
    let reward = (0..num_states * num_actions).map(|_| rng.random::<f64>()).collect();
    TabularMdp::new(states, num_actions, transition, reward, gamma)
        .and_then(TabularMdp::with_unit_rewards)
        .expect("valid random MDP")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionEntry {
    pub s: String,
    pub a: usize,
    #[serde(rename = "s'")]
    pub next: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardEntry {
    pub s: String,
    pub a: usize,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialEntry {
    pub s: String,
    pub p: f64,
}

/// Interchange document for one task. Omitted transitions and rewards are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub states: Vec<String>,
    pub num_actions: usize,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unit_rewards: bool,
    pub transitions: Vec<TransitionEntry>,
    #[serde(default)]
    pub rewards: Vec<RewardEntry>,
    #[serde(default)]
    pub initial: Vec<InitialEntry>,
}

impl MdpDocument {
    /// Returns the task and its initial distribution, if one was given.
    pub fn into_mdp(self) -> Result<(TabularMdp, Option<StateDist>)> {
        let states = StateSpace::new(self.states)?;
        let n = states.len();
        let na = self.num_actions;
        let mut transition = vec![0.0; n * na * n];
        for t in &self.transitions {
            if t.a >= na {
                return Err(DpgError::InvalidMdp(format!("action {} out of range", t.a)));
            }
            let s = states.index_of(&t.s)?;
            let next = states.index_of(&t.next)?;
            let slot = &mut transition[(s * na + t.a) * n + next];
            if *slot != 0.0 {
                return Err(DpgError::InvalidMdp(format!(
                    "duplicate transition ({}, {}, {})",
                    t.s, t.a, t.next
                )));
            }
            *slot = t.p;
        }
        let mut reward = vec![0.0; n * na];
        let mut seen = vec![false; n * na];
        for r in &self.rewards {
            if r.a >= na {
                return Err(DpgError::InvalidMdp(format!("action {} out of range", r.a)));
            }
            let i = states.index_of(&r.s)? * na + r.a;
            if std::mem::replace(&mut seen[i], true) {
                return Err(DpgError::InvalidMdp(format!("duplicate reward ({}, {})", r.s, r.a)));
            }
            reward[i] = r.r;
        }
        let mut mdp = TabularMdp::new(states, na, transition, reward, self.gamma)?;
        if let Some(name) = self.name {
            mdp = mdp.named(name);
        }
        if self.unit_rewards {
            mdp = mdp.with_unit_rewards()?;
        }
        let init = if self.initial.is_empty() {
            None
        } else {
            let pairs: Vec<(String, f64)> = self.initial.into_iter().map(|e| (e.s, e.p)).collect();
            Some(StateDist::from_pairs(&mdp, &pairs)?)
        };
        Ok((mdp, init))
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        mdp: TabularMdp,
        pi: SoftmaxPolicy,
        other: SoftmaxPolicy,
        rho: StateDist,
    }

    fn instance(seed: u64, n: usize, na: usize, gamma: f64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = random_mdp(&mut rng, n, na, gamma);
        let space = Arc::new(mdp.states().clone());
        let mut logits = || (0..n * na).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();
        let pi = SoftmaxPolicy::from_theta(space.clone(), na, logits()).unwrap();
        let other = SoftmaxPolicy::from_theta(space, na, logits()).unwrap();
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
        let total: f64 = w.iter().sum();
        let rho = StateDist::new(w.iter().map(|x| x / total).collect()).unwrap();
        Instance { mdp, pi, other, rho }
    }

    fn dims() -> impl Strategy<Value = (u64, usize, usize, f64)> {
        (any::<u64>(), 1usize..7, 1usize..5, 0.05f64..0.97)
    }

    proptest! {
        #[test]
        fn rows_are_distributions_and_shift_invariant(seed in any::<u64>(), na in 1usize..6, shift in -50.0f64..50.0) {
            let inst = instance(seed, 3, na, 0.5);
            let mut shifted = inst.pi.theta().to_vec();
            shifted[..na].iter_mut().for_each(|t| *t += shift);
            let moved = SoftmaxPolicy::from_theta(inst.pi.space().clone(), na, shifted).unwrap();
            for s in 0..3 {
                let row = inst.pi.probs_at(s);
                prop_assert!(row.iter().all(|p| *p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            for (a, b) in inst.pi.probs_at(0).iter().zip(moved.probs_at(0)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn linear_solve_matches_power_series((seed, n, na, gamma) in dims(), horizon in 0usize..80) {
            let inst = instance(seed, n, na, gamma);
            let eval = PolicyEvaluation::new(&inst.mdp, &inst.pi.table()).unwrap();
            let p = eval.policy_transition();
            let probs = eval.probs();
            let r_pi: Vec<f64> = (0..n).map(|s| (0..na).map(|a| probs[s * na + a] * inst.mdp.r(s, a)).sum()).collect();
            let mut term = r_pi.clone();
            let mut series = r_pi;
            let mut scale = 1.0;
            for _ in 0..horizon {
                term = (0..n).map(|s| (0..n).map(|t| p[(s, t)] * term[t]).sum()).collect();
                scale *= gamma;
                for (acc, x) in series.iter_mut().zip(&term) {
                    *acc += scale * x;
                }
            }
            let tail = gamma.powi(horizon as i32 + 1) / (1.0 - gamma);
            for (v, s) in eval.values().iter().zip(&series) {
                prop_assert!((v - s).abs() <= tail + 1e-12, "gap {} tail {}", (v - s).abs(), tail);
            }
        }

        #[test]
        fn performance_difference_identity((seed, n, na, gamma) in dims()) {
            let inst = instance(seed, n, na, gamma);
            let v = value_function(&inst.mdp, &inst.pi).unwrap();
            let v_other = value_function(&inst.mdp, &inst.other).unwrap();
            let d = discounted_visitation(&inst.mdp, &inst.pi, &inst.rho).unwrap();
            let adv = advantage(&inst.mdp, &inst.other).unwrap();
            let table = inst.pi.table();
            let rhs: f64 = (0..n)
                .map(|s| d[s] * (0..na).map(|a| table.row(s)[a] * adv[s * na + a]).sum::<f64>())
                .sum::<f64>()
                / (1.0 - gamma);
            let lhs = inst.rho.dot(&v) - inst.rho.dot(&v_other);
            prop_assert!((lhs - rhs).abs() <= 1e-9, "lhs {lhs} rhs {rhs}");
        }

        #[test]
        fn unit_reward_bounds((seed, n, na, gamma) in dims()) {
            let inst = instance(seed, n, na, gamma);
            let eval = PolicyEvaluation::new(&inst.mdp, &inst.pi.table()).unwrap();
            let cap = 1.0 / (1.0 - gamma);
            for v in eval.values() {
                prop_assert!(*v >= -1e-12 && *v <= cap + 1e-12);
            }
            let adv = eval.advantage();
            for a in &adv {
                prop_assert!(a.abs() <= cap + 1e-12);
            }
            for s in 0..n {
                let expected: f64 = (0..na).map(|a| eval.probs()[s * na + a] * adv[s * na + a]).sum();
                prop_assert!(expected.abs() <= 1e-10 * cap);
            }
            let d = eval.visitation(&inst.rho).unwrap();
            prop_assert!(d.iter().all(|x| *x >= -1e-12));
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }

        #[test]
        fn visitation_ignores_unreachable_padding((seed, n, na, gamma) in dims(), pad in 1usize..4) {
            let inst = instance(seed, n, na, gamma);
            let big = n + pad;
            let ids = (0..n).map(|i| format!("s{i}")).chain((0..pad).map(|i| format!("pad{i}")));
            let mut transition = vec![0.0; big * na * big];
            let mut reward = vec![0.0; big * na];
            for s in 0..big {
                for a in 0..na {
                    let row = &mut transition[(s * na + a) * big..(s * na + a + 1) * big];
                    if s < n {
                        row[..n].copy_from_slice(inst.mdp.transition_row(s, a));
                        reward[s * na + a] = inst.mdp.r(s, a);
                    } else {
                        // Padding states lead back into the original block.
                        row[(s + a) % big] = 1.0;
                        reward[s * na + a] = 1.0;
                    }
                }
            }
            let padded = TabularMdp::new(StateSpace::new(ids).unwrap(), na, transition, reward, gamma).unwrap();
            let mut theta = inst.pi.theta().to_vec();
            theta.extend((0..pad * na).map(|i| i as f64 * 0.37));
            let pol = SoftmaxPolicy::from_theta(Arc::new(padded.states().clone()), na, theta).unwrap();
            let mut init = inst.rho.probs().to_vec();
            init.resize(big, 0.0);
            let d_big = discounted_visitation(&padded, &pol, &StateDist::new(init).unwrap()).unwrap();
            let d = discounted_visitation(&inst.mdp, &inst.pi, &inst.rho).unwrap();
            for s in 0..n {
                prop_assert!((d[s] - d_big[s]).abs() <= 1e-12);
            }
            prop_assert!(d_big[n..].iter().all(|x| x.abs() <= 1e-12));
        }
    }
}
