//! Contextual linear MDPs, Markov policies, trajectories and datasets.
//!
//! Stages are 0-based throughout the crate: a model with horizon `H` has
//! stages `0..H`, and the value clipping ceiling at stage `h` is `H - h`.
//! Rewards live in `[0, 1]`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Tolerance used when checking that transition rows are distributions.
pub const TRANSITION_TOL: f64 = 1e-9;
/// Tolerance used when checking that policy rows are distributions.
pub const POLICY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    TabularOneHot,
    Explicit,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureKind::TabularOneHot => f.write_str("tabular-one-hot"),
            FeatureKind::Explicit => f.write_str("explicit"),
        }
    }
}

/// Known feature map `phi(x, a)` over a finite state-action space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    dim: usize,
    num_states: usize,
    num_actions: usize,
    kind: FeatureKind,
    // row-major: ((x * A + a) * d + j)
    table: Vec<f64>,
}

impl FeatureMap {
    /// One-hot features with `d = |S|·|A|`; pair `(x, a)` maps to basis vector `x·|A| + a`.
    pub fn one_hot(num_states: usize, num_actions: usize) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(invalid("one-hot features need |S| >= 1 and |A| >= 1"));
        }
        let dim = num_states * num_actions;
        let mut table = vec![0.0; dim * dim];
        for pair in 0..dim {
            table[pair * dim + pair] = 1.0;
        }
        Ok(Self {
            dim,
            num_states,
            num_actions,
            kind: FeatureKind::TabularOneHot,
            table,
        })
    }

    /// Explicit features, `rows[x * |A| + a]` is `phi(x, a)`.
    pub fn explicit(num_states: usize, num_actions: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(invalid("explicit features need |S| >= 1 and |A| >= 1"));
        }
        if rows.len() != num_states * num_actions {
            return Err(invalid(format!(
                "expected {} feature rows, got {}",
                num_states * num_actions,
                rows.len()
            )));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(invalid("feature dimension must be positive"));
        }
        let mut table = Vec::with_capacity(dim * rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(invalid(format!("feature row {i} has length {}, expected {dim}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("feature row {i} is not finite")));
            }
            table.extend_from_slice(row);
        }
        Ok(Self {
            dim,
            num_states,
            num_actions,
            kind: FeatureKind::Explicit,
            table,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn phi(&self, x: usize, a: usize) -> &[f64] {
        let start = (x * self.num_actions + a) * self.dim;
        &self.table[start..start + self.dim]
    }

    pub fn phi_vector(&self, x: usize, a: usize) -> DVector<f64> {
        DVector::from_column_slice(self.phi(x, a))
    }

    /// Feature-map invariant violations (norm bound, one-hot structure).
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for x in 0..self.num_states {
            for a in 0..self.num_actions {
                let norm = self.phi(x, a).iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1.0 + TRANSITION_TOL {
                    out.push(Violation::FeatureNorm { x, a, norm });
                }
            }
        }
        if self.kind == FeatureKind::TabularOneHot {
            let expected = FeatureMap::one_hot(self.num_states, self.num_actions)
                .map(|m| m.table)
                .unwrap_or_default();
            if self.dim != self.num_states * self.num_actions || self.table != expected {
                out.push(Violation::OneHotStructure);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    /// The observed reward equals the mean `phi·theta`.
    #[default]
    Deterministic,
    /// The observed reward is Bernoulli with mean `phi·theta`.
    Bernoulli,
}

/// One violated model invariant with its witness.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    FeatureNorm { x: usize, a: usize, norm: f64 },
    OneHotStructure,
    NegativeTransition { h: usize, x: usize, a: usize, next: usize, value: f64 },
    TransitionNotNormalized { h: usize, x: usize, a: usize, sum: f64 },
    RewardOutOfRange { h: usize, x: usize, a: usize, reward: f64 },
    MeasureNorm { h: usize, norm: f64, bound: f64 },
    ThetaNorm { h: usize, norm: f64, bound: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::FeatureNorm { x, a, norm } => {
                write!(f, "feature norm exceeds 1 at (x={x}, a={a}): {norm}")
            }
            Violation::OneHotStructure => write!(f, "tabular-one-hot features are not distinct basis vectors"),
            Violation::NegativeTransition { h, x, a, next, value } => write!(
                f,
                "negative transition probability at (h={h}, x={x}, a={a}) -> {next}: {value}"
            ),
            Violation::TransitionNotNormalized { h, x, a, sum } => {
                write!(f, "transition not normalized at (h={h}, x={x}, a={a}): sum {sum}")
            }
            Violation::RewardOutOfRange { h, x, a, reward } => {
                write!(f, "reward out of [0,1] at (h={h}, x={x}, a={a}): {reward}")
            }
            Violation::MeasureNorm { h, norm, bound } => {
                write!(f, "measure column-sum norm at h={h} is {norm} > {bound}")
            }
            Violation::ThetaNorm { h, norm, bound } => {
                write!(f, "theta norm at h={h} is {norm} > {bound}")
            }
        }
    }
}

/// Every violated invariant of a model; empty iff the model is valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(ToString::to_string).collect()
    }
}

/// One context of a contextual linear MDP.
///
/// `P_h(x'|x,a) = phi(x,a)·mu_h[:, x']` and `r_h(x,a) = phi(x,a)·theta_h`.
/// Dense transition and reward tables are cached at construction.
#[derive(Debug, Clone)]
pub struct LinearMdp {
    horizon: usize,
    initial_state: usize,
    features: Arc<FeatureMap>,
    mu: Vec<DMatrix<f64>>,
    theta: Vec<DVector<f64>>,
    reward_mode: RewardMode,
    // [h][x][a][x']
    transitions: Vec<f64>,
    // [h][x][a]
    rewards: Vec<f64>,
}

impl PartialEq for LinearMdp {
    fn eq(&self, other: &Self) -> bool {
        self.horizon == other.horizon
            && self.initial_state == other.initial_state
            && self.features == other.features
            && self.mu == other.mu
            && self.theta == other.theta
            && self.reward_mode == other.reward_mode
    }
}

impl LinearMdp {
    /// Builds a model after checking shapes. Distributional invariants are
    /// not enforced here; use [`validate_model`].
    pub fn new(
        features: Arc<FeatureMap>,
        horizon: usize,
        initial_state: usize,
        mu: Vec<DMatrix<f64>>,
        theta: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let d = features.dim();
        let s = features.num_states();
        if horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        if initial_state >= s {
            return Err(invalid(format!("initial state {initial_state} out of range 0..{s}")));
        }
        if mu.len() != horizon || theta.len() != horizon {
            return Err(invalid(format!(
                "expected {horizon} stages of mu and theta, got {} and {}",
                mu.len(),
                theta.len()
            )));
        }
        for (h, m) in mu.iter().enumerate() {
            if m.nrows() != d || m.ncols() != s {
                return Err(invalid(format!(
                    "mu at stage {h} is {}x{}, expected {d}x{s}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        for (h, t) in theta.iter().enumerate() {
            if t.len() != d {
                return Err(invalid(format!("theta at stage {h} has length {}, expected {d}", t.len())));
            }
        }
        let mut model = Self {
            horizon,
            initial_state,
            features,
            mu,
            theta,
            reward_mode: RewardMode::Deterministic,
            transitions: Vec::new(),
            rewards: Vec::new(),
        };
        model.rebuild_tables();
        Ok(model)
    }

    /// Tabular model with one-hot features from dense tables
    /// `transitions[h][x][a][x']` and `rewards[h][x][a]`.
    pub fn tabular(
        initial_state: usize,
        transitions: &[Vec<Vec<Vec<f64>>>],
        rewards: &[Vec<Vec<f64>>],
    ) -> Result<Self> {
        let horizon = transitions.len();
        if horizon == 0 || rewards.len() != horizon {
            return Err(invalid("tabular model needs matching, nonempty transition and reward stages"));
        }
        let s = transitions[0].len();
        let a = transitions[0].first().map_or(0, Vec::len);
        let features = Arc::new(FeatureMap::one_hot(s, a)?);
        let d = s * a;
        let mut mu = Vec::with_capacity(horizon);
        let mut theta = Vec::with_capacity(horizon);
        for h in 0..horizon {
            let mut m = DMatrix::zeros(d, s);
            let mut t = DVector::zeros(d);
            if transitions[h].len() != s || rewards[h].len() != s {
                return Err(invalid(format!("stage {h} has the wrong number of states")));
            }
            for x in 0..s {
                if transitions[h][x].len() != a || rewards[h][x].len() != a {
                    return Err(invalid(format!("stage {h} state {x} has the wrong number of actions")));
                }
                for act in 0..a {
                    let row = &transitions[h][x][act];
                    if row.len() != s {
                        return Err(invalid(format!("transition row ({h},{x},{act}) has wrong length")));
                    }
                    for (next, p) in row.iter().enumerate() {
                        m[(x * a + act, next)] = *p;
                    }
                    t[x * a + act] = rewards[h][x][act];
                }
            }
            mu.push(m);
            theta.push(t);
        }
        Self::new(features, horizon, initial_state, mu, theta)
    }

    pub fn with_reward_mode(mut self, mode: RewardMode) -> Self {
        self.reward_mode = mode;
        self
    }

    fn rebuild_tables(&mut self) {
        let (hz, s, a) = (self.horizon, self.num_states(), self.num_actions());
        let mut transitions = vec![0.0; hz * s * a * s];
        let mut rewards = vec![0.0; hz * s * a];
        for h in 0..hz {
            for x in 0..s {
                for act in 0..a {
                    let phi = self.features.phi(x, act);
                    let base = ((h * s + x) * a + act) * s;
                    for next in 0..s {
                        transitions[base + next] =
                            phi.iter().enumerate().map(|(j, f)| f * self.mu[h][(j, next)]).sum();
                    }
                    rewards[(h * s + x) * a + act] =
                        phi.iter().zip(self.theta[h].iter()).map(|(f, t)| f * t).sum();
                }
            }
        }
        self.transitions = transitions;
        self.rewards = rewards;
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.features.num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.features.num_actions()
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn features(&self) -> &Arc<FeatureMap> {
        &self.features
    }

    pub fn mu(&self, h: usize) -> &DMatrix<f64> {
        &self.mu[h]
    }

    pub fn theta(&self, h: usize) -> &DVector<f64> {
        &self.theta[h]
    }

    pub fn reward_mode(&self) -> RewardMode {
        self.reward_mode
    }

    /// Unchecked cached transition row; callers guarantee indices are in range.
    pub fn transition_row(&self, h: usize, x: usize, a: usize) -> &[f64] {
        let s = self.num_states();
        let base = ((h * s + x) * self.num_actions() + a) * s;
        &self.transitions[base..base + s]
    }

    /// Unchecked cached mean reward.
    pub fn reward(&self, h: usize, x: usize, a: usize) -> f64 {
        self.rewards[(h * self.num_states() + x) * self.num_actions() + a]
    }

    fn check_index(&self, h: usize, x: usize, a: usize) -> Result<()> {
        if h >= self.horizon {
            return Err(invalid(format!("stage {h} out of range 0..{}", self.horizon)));
        }
        if x >= self.num_states() {
            return Err(invalid(format!("state {x} out of range 0..{}", self.num_states())));
        }
        if a >= self.num_actions() {
            return Err(invalid(format!("action {a} out of range 0..{}", self.num_actions())));
        }
        Ok(())
    }

    /// Checks that two models share features, spaces, horizon and initial state.
    pub fn same_structure(&self, other: &LinearMdp) -> bool {
        self.horizon == other.horizon
            && self.initial_state == other.initial_state
            && (Arc::ptr_eq(&self.features, &other.features) || self.features == other.features)
    }
}

pub fn validate_model(model: &LinearMdp) -> ValidationReport {
    let mut violations = model.features.violations();
    let (s, a) = (model.num_states(), model.num_actions());
    let d = model.features.dim();
    let bound = (d as f64).sqrt();
    for h in 0..model.horizon {
        for x in 0..s {
            for act in 0..a {
                let row = model.transition_row(h, x, act);
                for (next, p) in row.iter().enumerate() {
                    if *p < -TRANSITION_TOL {
                        violations.push(Violation::NegativeTransition { h, x, a: act, next, value: *p });
                    }
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > TRANSITION_TOL {
                    violations.push(Violation::TransitionNotNormalized { h, x, a: act, sum });
                }
                let r = model.reward(h, x, act);
                if !(-TRANSITION_TOL..=1.0 + TRANSITION_TOL).contains(&r) {
                    violations.push(Violation::RewardOutOfRange { h, x, a: act, reward: r });
                }
            }
        }
        // norm of the total measure mu_h(S) = sum over next states of the columns
        let total: DVector<f64> = model.mu[h].column_sum();
        let norm = total.norm();
        if norm > bound + TRANSITION_TOL {
            violations.push(Violation::MeasureNorm { h, norm, bound });
        }
        let tnorm = model.theta[h].norm();
        if tnorm > bound + TRANSITION_TOL {
            violations.push(Violation::ThetaNorm { h, norm: tnorm, bound });
        }
    }
    ValidationReport { violations }
}

pub fn transition_distribution(model: &LinearMdp, h: usize, x: usize, a: usize) -> Result<Vec<f64>> {
    model.check_index(h, x, a)?;
    Ok(model.transition_row(h, x, a).to_vec())
}

pub fn mean_reward(model: &LinearMdp, h: usize, x: usize, a: usize) -> Result<f64> {
    model.check_index(h, x, a)?;
    Ok(model.reward(h, x, a))
}

/// A finite family of contexts and the sampling law over them.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFamily {
    contexts: Vec<LinearMdp>,
    weights: Vec<f64>,
}

impl ContextFamily {
    pub fn uniform(contexts: Vec<LinearMdp>) -> Result<Self> {
        let n = contexts.len();
        Self::new(contexts, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn new(contexts: Vec<LinearMdp>, weights: Vec<f64>) -> Result<Self> {
        if contexts.is_empty() {
            return Err(invalid("a context family needs at least one context"));
        }
        if weights.len() != contexts.len() {
            return Err(invalid("one weight per context is required"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid("context weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("context weights sum to {total}, expected 1")));
        }
        let first = &contexts[0];
        if contexts.iter().any(|c| !c.same_structure(first)) {
            return Err(invalid("contexts must share features, spaces, horizon and initial state"));
        }
        Ok(Self { contexts, weights })
    }

    pub fn contexts(&self) -> &[LinearMdp] {
        &self.contexts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    pub fn first(&self) -> &LinearMdp {
        &self.contexts[0]
    }

    pub fn horizon(&self) -> usize {
        self.first().horizon()
    }

    pub fn num_states(&self) -> usize {
        self.first().num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.first().num_actions()
    }
}

/// Stage-wise stochastic policy `pi_h(·|x)`, stored row-major by `(h, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovPolicy {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl MarkovPolicy {
    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        let p = 1.0 / num_actions as f64;
        Self {
            horizon,
            num_states,
            num_actions,
            probs: vec![p; horizon * num_states * num_actions],
        }
    }

    /// Deterministic policy, `actions[h * |S| + x]` is the action at `(h, x)`.
    pub fn deterministic(horizon: usize, num_states: usize, num_actions: usize, actions: &[usize]) -> Result<Self> {
        if actions.len() != horizon * num_states {
            return Err(invalid(format!(
                "expected {} actions, got {}",
                horizon * num_states,
                actions.len()
            )));
        }
        let mut probs = vec![0.0; horizon * num_states * num_actions];
        for (row, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(invalid(format!("action {a} out of range 0..{num_actions}")));
            }
            probs[row * num_actions + a] = 1.0;
        }
        Ok(Self {
            horizon,
            num_states,
            num_actions,
            probs,
        })
    }

    /// Same action everywhere.
    pub fn constant(horizon: usize, num_states: usize, num_actions: usize, action: usize) -> Result<Self> {
        Self::deterministic(horizon, num_states, num_actions, &vec![action; horizon * num_states])
    }

    pub fn from_rows(horizon: usize, num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != horizon * num_states * num_actions {
            return Err(invalid("policy table has the wrong size"));
        }
        let policy = Self {
            horizon,
            num_states,
            num_actions,
            probs,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        for h in 0..self.horizon {
            for x in 0..self.num_states {
                let row = self.row(h, x);
                let sum: f64 = row.iter().sum();
                if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > POLICY_TOL {
                    return Err(invalid(format!("policy row (h={h}, x={x}) is not a distribution")));
                }
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, h: usize, x: usize) -> &[f64] {
        let start = (h * self.num_states + x) * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }

    pub fn row_mut(&mut self, h: usize, x: usize) -> &mut [f64] {
        let start = (h * self.num_states + x) * self.num_actions;
        &mut self.probs[start..start + self.num_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn same_shape(&self, other: &MarkovPolicy) -> bool {
        self.horizon == other.horizon && self.num_states == other.num_states && self.num_actions == other.num_actions
    }

    pub fn matches_model(&self, model: &LinearMdp) -> bool {
        self.horizon == model.horizon() && self.num_states == model.num_states() && self.num_actions == model.num_actions()
    }

    /// Action chosen at `(h, x)` if the row is a point mass.
    pub fn deterministic_action(&self, h: usize, x: usize) -> Option<usize> {
        let row = self.row(h, x);
        let mut found = None;
        for (a, p) in row.iter().enumerate() {
            if *p == 1.0 {
                found = Some(a);
            } else if *p != 0.0 {
                return None;
            }
        }
        found
    }
}

/// `max_{h, s} ||p_h(·|s) - q_h(·|s)||_1`.
pub fn policy_distance(p: &MarkovPolicy, q: &MarkovPolicy) -> Result<f64> {
    if !p.same_shape(q) {
        return Err(invalid("policies have different (H, |S|, |A|) shapes"));
    }
    let mut dist: f64 = 0.0;
    for h in 0..p.horizon {
        for x in 0..p.num_states {
            let l1: f64 = p.row(h, x).iter().zip(q.row(h, x)).map(|(a, b)| (a - b).abs()).sum();
            dist = dist.max(l1);
        }
    }
    Ok(dist)
}

/// One transition `(x_h, a_h, r_h, x_{h+1})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn check(&self, horizon: usize, initial_state: usize) -> Result<()> {
        if self.steps.len() != horizon {
            return Err(invalid(format!("trajectory has {} steps, expected {horizon}", self.steps.len())));
        }
        if self.steps[0].state != initial_state {
            return Err(invalid("trajectory does not start at the initial state"));
        }
        for w in self.steps.windows(2) {
            if w[0].next_state != w[1].state {
                return Err(invalid("trajectory steps are not chained"));
            }
        }
        Ok(())
    }
}

/// `K` trajectories collected from one context.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextDataset {
    pub context_id: usize,
    pub horizon: usize,
    pub trajectories: Vec<Trajectory>,
}

impl ContextDataset {
    pub fn new(context_id: usize, horizon: usize, trajectories: Vec<Trajectory>) -> Result<Self> {
        if let Some(t) = trajectories.iter().find(|t| t.steps.len() != horizon) {
            return Err(invalid(format!(
                "trajectory with {} steps in a dataset of horizon {horizon}",
                t.steps.len()
            )));
        }
        Ok(Self {
            context_id,
            horizon,
            trajectories,
        })
    }

    pub fn num_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    /// Every trajectory contributes its step `h` to stage `h`.
    pub fn stage_datasets(&self) -> Vec<StageDataset> {
        (0..self.horizon)
            .map(|h| StageDataset {
                stage: h,
                tuples: self.trajectories.iter().map(|t| t.steps[h]).collect(),
            })
            .collect()
    }

    /// Concatenates datasets in order under a new id.
    pub fn merge(context_id: usize, parts: &[ContextDataset]) -> Result<Self> {
        let horizon = parts.first().map(|p| p.horizon).ok_or_else(|| invalid("nothing to merge"))?;
        if parts.iter().any(|p| p.horizon != horizon) {
            return Err(invalid("merged datasets must share a horizon"));
        }
        let trajectories = parts.iter().flat_map(|p| p.trajectories.iter().cloned()).collect();
        Ok(Self {
            context_id,
            horizon,
            trajectories,
        })
    }
}

/// Regression tuples for a single stage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageDataset {
    pub stage: usize,
    pub tuples: Vec<Step>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(h: usize) -> LinearMdp {
        // two states, two actions; action 0 stays, action 1 moves
        let stage_p = vec![
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        ];
        let stage_r = vec![vec![0.0, 1.0], vec![0.5, 0.25]];
        LinearMdp::tabular(0, &vec![stage_p; h], &vec![stage_r; h]).unwrap()
    }

    #[test]
    fn tabular_model_is_valid() {
        let m = chain(3);
        assert!(validate_model(&m).is_valid(), "{:?}", validate_model(&m).messages());
    }

    #[test]
    fn reward_violation_is_reported() {
        let m = chain(2);
        let mut theta: Vec<_> = (0..2).map(|h| m.theta(h).clone()).collect();
        theta[1][3] = 1.5;
        let mu: Vec<_> = (0..2).map(|h| m.mu(h).clone()).collect();
        let bad = LinearMdp::new(m.features().clone(), 2, 0, mu, theta).unwrap();
        let report = validate_model(&bad);
        assert!(report.violations.iter().any(|v| matches!(
            v,
            Violation::RewardOutOfRange { h: 1, x: 1, a: 1, reward } if (*reward - 1.5).abs() < 1e-12
        )));
        assert!(report.messages().iter().any(|m| m.contains("reward out of [0,1]")));
    }

    #[test]
    fn unnormalized_transition_is_reported() {
        let m = chain(1);
        let mut mu = m.mu(0).clone();
        // scale the row of pair (0, 0) so its distribution sums to 0.9
        for next in 0..2 {
            mu[(0, next)] *= 0.9;
        }
        let bad = LinearMdp::new(m.features().clone(), 1, 0, vec![mu], vec![m.theta(0).clone()]).unwrap();
        let report = validate_model(&bad);
        assert!(report.violations.iter().any(|v| matches!(
            v,
            Violation::TransitionNotNormalized { h: 0, x: 0, a: 0, sum } if (*sum - 0.9).abs() < 1e-12
        )));
        assert!(report.messages().iter().any(|m| m.contains("transition not normalized")));
    }

    #[test]
    fn deterministic_chain_transition_is_point_mass() {
        let m = chain(2);
        assert_eq!(transition_distribution(&m, 0, 0, 0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(transition_distribution(&m, 0, 0, 1).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn out_of_range_arguments_are_errors() {
        let m = chain(2);
        assert!(transition_distribution(&m, 2, 0, 0).is_err());
        assert!(transition_distribution(&m, 0, 2, 0).is_err());
        assert!(mean_reward(&m, 0, 0, 2).is_err());
    }

    #[test]
    fn zero_theta_gives_zero_reward() {
        let m = chain(1);
        let z = LinearMdp::new(
            m.features().clone(),
            1,
            0,
            vec![m.mu(0).clone()],
            vec![DVector::zeros(4)],
        )
        .unwrap();
        for x in 0..2 {
            for a in 0..2 {
                assert_eq!(mean_reward(&z, 0, x, a).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn policy_distance_examples() {
        let p = MarkovPolicy::constant(1, 1, 3, 0).unwrap();
        let q = MarkovPolicy::constant(1, 1, 3, 1).unwrap();
        assert_eq!(policy_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(policy_distance(&p, &q).unwrap(), 2.0);
        let u = MarkovPolicy::uniform(1, 1, 3);
        // |1/3 - 1| + 1/3 + 1/3
        let expected = (1.0f64 / 3.0 - 1.0).abs() + 1.0 / 3.0 + 1.0 / 3.0;
        assert!((policy_distance(&u, &p).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 4.0 / 3.0).abs() < 1e-15);
        let other = MarkovPolicy::uniform(2, 1, 3);
        assert!(policy_distance(&u, &other).is_err());
    }

    #[test]
    fn trajectory_chain_check() {
        let t = Trajectory {
            steps: vec![
                Step { state: 0, action: 0, reward: 0.0, next_state: 1 },
                Step { state: 0, action: 0, reward: 0.0, next_state: 1 },
            ],
        };
        assert!(t.check(2, 0).is_err());
        let ok = Trajectory {
            steps: vec![
                Step { state: 0, action: 1, reward: 0.0, next_state: 1 },
                Step { state: 1, action: 0, reward: 0.0, next_state: 1 },
            ],
        };
        assert!(ok.check(2, 0).is_ok());
        assert!(ok.check(2, 1).is_err());
    }

    #[test]
    fn family_rejects_bad_weights() {
        let m = chain(1);
        assert!(ContextFamily::new(vec![m.clone(), m.clone()], vec![0.7, 0.7]).is_err());
        assert!(ContextFamily::new(vec![m.clone(), m.clone()], vec![0.25, 0.75]).is_ok());
        assert!(ContextFamily::new(vec![m.clone(), chain(2)], vec![0.5, 0.5]).is_err());
    }
}
