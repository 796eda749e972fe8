//! Ground-truth dynamic programming: policy values, occupancy measures, the
//! zero-shot optimal policy over a context family, and the occupancy-weighted
//! average MDP that a context-free learner effectively sees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::model::{ContextFamily, LinearMdp, MarkovPolicy};

/// Default cap on the number of deterministic policies enumerated.
pub const DEFAULT_ENUMERATION_BUDGET: u128 = 1 << 20;

/// Ties closer than this are resolved towards the lower encoded index.
pub const TIE_TOL: f64 = 1e-12;

/// `V_h(x)` for `h in 0..=H` (with `V_H = 0`) and `Q_h(x, a)` for `h in 0..H`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTables {
    pub v: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    num_actions: usize,
}

impl ValueTables {
    pub fn q(&self, h: usize, x: usize, a: usize) -> f64 {
        self.q[h][x * self.num_actions + a]
    }

    pub fn initial_value(&self, x1: usize) -> f64 {
        self.v[0][x1]
    }
}

/// `(B_h f)(x, a) = r_h(x, a) + sum_x' P_h(x'|x, a) f(x')`, flattened by `x·|A| + a`.
pub fn bellman_backup(model: &LinearMdp, h: usize, next_values: &[f64]) -> Vec<f64> {
    let (s, a) = (model.num_states(), model.num_actions());
    let mut out = Vec::with_capacity(s * a);
    for x in 0..s {
        for act in 0..a {
            let row = model.transition_row(h, x, act);
            let expected: f64 = row.iter().zip(next_values).map(|(p, v)| p * v).sum();
            out.push(model.reward(h, x, act) + expected);
        }
    }
    out
}

fn check_policy(model: &LinearMdp, policy: &MarkovPolicy) -> Result<()> {
    if !policy.matches_model(model) {
        return Err(invalid(format!(
            "policy shape (H={}, S={}, A={}) does not match model (H={}, S={}, A={})",
            policy.horizon(),
            policy.num_states(),
            policy.num_actions(),
            model.horizon(),
            model.num_states(),
            model.num_actions()
        )));
    }
    Ok(())
}

pub fn exact_values(model: &LinearMdp, policy: &MarkovPolicy) -> Result<ValueTables> {
    check_policy(model, policy)?;
    Ok(values_unchecked(model, policy))
}

fn values_unchecked(model: &LinearMdp, policy: &MarkovPolicy) -> ValueTables {
    let (hz, s, a) = (model.horizon(), model.num_states(), model.num_actions());
    let mut v = vec![vec![0.0; s]; hz + 1];
    let mut q = vec![Vec::new(); hz];
    for h in (0..hz).rev() {
        let qh = bellman_backup(model, h, &v[h + 1]);
        for x in 0..s {
            v[h][x] = qh[x * a..(x + 1) * a]
                .iter()
                .zip(policy.row(h, x))
                .map(|(qv, p)| qv * p)
                .sum();
        }
        q[h] = qh;
    }
    ValueTables { v, q, num_actions: a }
}

/// Initial-state value of a policy, the quantity averaged over contexts.
pub fn policy_value(model: &LinearMdp, policy: &MarkovPolicy) -> Result<f64> {
    Ok(exact_values(model, policy)?.initial_value(model.initial_state()))
}

/// `sum_c w_c V^pi_{c,0}(x1)`.
pub fn family_value(family: &ContextFamily, policy: &MarkovPolicy) -> Result<f64> {
    let mut total = 0.0;
    for (model, w) in family.contexts().iter().zip(family.weights()) {
        total += w * policy_value(model, policy)?;
    }
    Ok(total)
}

/// Stage-wise state-action distributions induced by a policy from `x1`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTables {
    /// `stages[h][x·|A| + a]`
    pub stages: Vec<Vec<f64>>,
    num_actions: usize,
}

impl OccupancyTables {
    pub fn get(&self, h: usize, x: usize, a: usize) -> f64 {
        self.stages[h][x * self.num_actions + a]
    }

    /// Marginal over states at stage `h`.
    pub fn state_marginal(&self, h: usize) -> Vec<f64> {
        self.stages[h].chunks(self.num_actions).map(|c| c.iter().sum()).collect()
    }

    /// `sum_{x,a} occ_h(x,a)·f(x,a)` for a table flattened by `x·|A| + a`.
    pub fn expectation(&self, h: usize, table: &[f64]) -> f64 {
        self.stages[h].iter().zip(table).map(|(o, f)| o * f).sum()
    }
}

pub fn occupancy(model: &LinearMdp, policy: &MarkovPolicy) -> Result<OccupancyTables> {
    check_policy(model, policy)?;
    let (hz, s, a) = (model.horizon(), model.num_states(), model.num_actions());
    let mut state_dist = vec![0.0; s];
    state_dist[model.initial_state()] = 1.0;
    let mut stages = Vec::with_capacity(hz);
    for h in 0..hz {
        let mut occ = vec![0.0; s * a];
        let mut next = vec![0.0; s];
        for x in 0..s {
            if state_dist[x] == 0.0 {
                continue;
            }
            for (act, p) in policy.row(h, x).iter().enumerate() {
                let mass = state_dist[x] * p;
                occ[x * a + act] = mass;
                if mass == 0.0 {
                    continue;
                }
                for (n, pn) in model.transition_row(h, x, act).iter().enumerate() {
                    next[n] += mass * pn;
                }
            }
        }
        stages.push(occ);
        state_dist = next;
    }
    Ok(OccupancyTables { stages, num_actions: a })
}

/// Per-context optimal policy by backward induction (lowest action on ties).
pub fn optimal_values(model: &LinearMdp) -> (MarkovPolicy, ValueTables) {
    let (hz, s, a) = (model.horizon(), model.num_states(), model.num_actions());
    let mut v = vec![vec![0.0; s]; hz + 1];
    let mut q = vec![Vec::new(); hz];
    let mut actions = vec![0usize; hz * s];
    for h in (0..hz).rev() {
        let qh = bellman_backup(model, h, &v[h + 1]);
        for x in 0..s {
            let (best_a, best_q) = argmax_lexicographic(&qh[x * a..(x + 1) * a]);
            actions[h * s + x] = best_a;
            v[h][x] = best_q;
        }
        q[h] = qh;
    }
    let policy = MarkovPolicy::deterministic(hz, s, a, &actions).expect("actions in range");
    (policy, ValueTables { v, q, num_actions: a })
}

/// First index whose value beats every earlier one by more than [`TIE_TOL`].
pub fn argmax_lexicographic(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > best.1 + TIE_TOL {
            best = (i, *v);
        }
    }
    best
}

/// Number of deterministic Markov policies, `|A|^(|S|·H)`, saturating.
pub fn deterministic_policy_count(horizon: usize, num_states: usize, num_actions: usize) -> u128 {
    let mut total: u128 = 1;
    for _ in 0..horizon * num_states {
        total = total.saturating_mul(num_actions as u128);
    }
    total
}

/// Decodes the `index`-th deterministic policy in lexicographic order of the
/// action vector over `(h, x)` (stage-major, first entry most significant).
pub fn deterministic_policy_at(horizon: usize, num_states: usize, num_actions: usize, index: u128) -> MarkovPolicy {
    let len = horizon * num_states;
    let mut actions = vec![0usize; len];
    let mut rest = index;
    for slot in (0..len).rev() {
        actions[slot] = (rest % num_actions as u128) as usize;
        rest /= num_actions as u128;
    }
    MarkovPolicy::deterministic(horizon, num_states, num_actions, &actions).expect("decoded actions in range")
}

/// Best achievable expected initial value over the family, and a policy attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct ZsgOptimum {
    pub policy: MarkovPolicy,
    pub value: f64,
    /// False when the hill-climbing fallback produced the policy.
    pub exact: bool,
}

/// Exhaustive search over deterministic Markov policies.
///
/// The objective is linear in each `(h, x)` action distribution with the
/// others held fixed, so a deterministic maximizer always exists.
pub fn optimal_zsg_policy(family: &ContextFamily, budget: u128) -> Result<(MarkovPolicy, f64)> {
    let (hz, s, a) = (family.horizon(), family.num_states(), family.num_actions());
    let total = deterministic_policy_count(hz, s, a);
    if total > budget {
        return Err(Error::Capacity {
            what: "deterministic policy enumeration",
            required: total,
            budget,
        });
    }
    let total = total as u64;
    let values: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|i| {
            let pi = deterministic_policy_at(hz, s, a, i as u128);
            family_value_unchecked(family, &pi)
        })
        .collect();
    let (best, value) = argmax_lexicographic(&values);
    Ok((deterministic_policy_at(hz, s, a, best as u128), value))
}

fn family_value_unchecked(family: &ContextFamily, policy: &MarkovPolicy) -> f64 {
    family
        .contexts()
        .iter()
        .zip(family.weights())
        .map(|(m, w)| w * values_unchecked(m, policy).initial_value(m.initial_state()))
        .sum()
}

/// Coordinate ascent over `(h, x)` blocks from random deterministic starts.
pub fn search_zsg_policy(family: &ContextFamily, restarts: usize, seed: u64) -> (MarkovPolicy, f64) {
    let (hz, s, a) = (family.horizon(), family.num_states(), family.num_actions());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let mut actions: Vec<usize> = (0..hz * s).map(|_| rng.random_range(0..a)).collect();
        let eval = |acts: &[usize]| {
            let pi = MarkovPolicy::deterministic(hz, s, a, acts).expect("in range");
            family_value_unchecked(family, &pi)
        };
        let mut current = eval(&actions);
        loop {
            let mut improved = false;
            for slot in 0..actions.len() {
                let keep = actions[slot];
                for cand in 0..a {
                    if cand == keep {
                        continue;
                    }
                    actions[slot] = cand;
                    let v = eval(&actions);
                    if v > current + TIE_TOL {
                        current = v;
                        improved = true;
                        break;
                    }
                    actions[slot] = keep;
                }
            }
            if !improved {
                break;
            }
        }
        if best.as_ref().is_none_or(|(_, v)| current > *v + TIE_TOL) {
            best = Some((actions, current));
        }
    }
    let (actions, value) = best.expect("at least one restart");
    (MarkovPolicy::deterministic(hz, s, a, &actions).expect("in range"), value)
}

/// Exact optimum when enumeration fits the budget, otherwise the
/// hill-climbing fallback (20 restarts) flagged as inexact.
pub fn zsg_optimum(family: &ContextFamily, budget: u128, seed: u64) -> ZsgOptimum {
    match optimal_zsg_policy(family, budget) {
        Ok((policy, value)) => ZsgOptimum { policy, value, exact: true },
        Err(_) => {
            let (policy, value) = search_zsg_policy(family, 20, seed);
            ZsgOptimum { policy, value, exact: false }
        }
    }
}

/// `E_c V^{pi*}_c - E_c V^pi_c` against a precomputed optimum.
pub fn subopt_against(optimum: &ZsgOptimum, family: &ContextFamily, policy: &MarkovPolicy) -> Result<f64> {
    Ok(optimum.value - family_value(family, policy)?)
}

pub fn subopt(family: &ContextFamily, policy: &MarkovPolicy, budget: u128) -> Result<f64> {
    let (_, best) = optimal_zsg_policy(family, budget)?;
    Ok(best - family_value(family, policy)?)
}

/// The tabular average MDP plus the `(h, x, a)` triples no context's
/// behavior ever reaches; those carry a uniform transition and reward 0.
#[derive(Debug, Clone)]
pub struct AverageMdp {
    pub model: LinearMdp,
    pub unreachable: Vec<(usize, usize, usize)>,
}

pub fn average_mdp(family: &ContextFamily, behaviors: &[MarkovPolicy]) -> Result<AverageMdp> {
    if behaviors.len() != family.len() {
        return Err(invalid(format!(
            "{} behaviors supplied for {} contexts",
            behaviors.len(),
            family.len()
        )));
    }
    let occs = family
        .contexts()
        .iter()
        .zip(behaviors)
        .map(|(m, b)| occupancy(m, b))
        .collect::<Result<Vec<_>>>()?;
    let (hz, s, a) = (family.horizon(), family.num_states(), family.num_actions());
    let mut transitions = vec![vec![vec![vec![0.0; s]; a]; s]; hz];
    let mut rewards = vec![vec![vec![0.0; a]; s]; hz];
    let mut unreachable = Vec::new();
    for h in 0..hz {
        for x in 0..s {
            for act in 0..a {
                let mut mass = 0.0;
                let mut p = vec![0.0; s];
                let mut r = 0.0;
                for ((model, w), occ) in family.contexts().iter().zip(family.weights()).zip(&occs) {
                    let m = w * occ.get(h, x, act);
                    if m == 0.0 {
                        continue;
                    }
                    mass += m;
                    r += m * model.reward(h, x, act);
                    for (acc, pn) in p.iter_mut().zip(model.transition_row(h, x, act)) {
                        *acc += m * pn;
                    }
                }
                if mass > 0.0 {
                    transitions[h][x][act] = p.iter().map(|v| v / mass).collect();
                    rewards[h][x][act] = r / mass;
                } else {
                    transitions[h][x][act] = vec![1.0 / s as f64; s];
                    rewards[h][x][act] = 0.0;
                    unreachable.push((h, x, act));
                }
            }
        }
    }
    let model = LinearMdp::tabular(family.first().initial_state(), &transitions, &rewards)?
        .with_reward_mode(family.first().reward_mode());
    Ok(AverageMdp { model, unreachable })
}
