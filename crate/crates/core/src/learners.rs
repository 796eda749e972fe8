//! Offline learners: pessimistic empirical risk minimization over a finite
//! policy class, sequential exponentiated-weights optimization with
//! pessimistic critics, context-free pessimistic value iteration, and the
//! context-grouping variants.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envgen::rng_for;
use crate::error::{invalid, Error, Result};
use crate::exact::{
    argmax_lexicographic, average_mdp, deterministic_policy_at, deterministic_policy_count, policy_value,
};
use crate::model::{policy_distance, ContextDataset, ContextFamily, FeatureMap, LinearMdp, MarkovPolicy, StageDataset};
use crate::ppe::{generic_ppe, LinearPpe, LinearPpeConfig, PessimisticEstimate, StageOracle};

/// Default cap on `N · n · H` pessimistic evaluations for PERM and on the
/// size of an all-deterministic class.
pub const DEFAULT_PERM_BUDGET: u128 = 1 << 24;

/// Logit levels used by the softmax-grid class.
const SOFTMAX_LEVELS: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassKind {
    Explicit,
    AllDeterministic,
    SoftmaxGrid,
}

/// A finite, pairwise-distinct list of Markov policies of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyClass {
    kind: ClassKind,
    members: Vec<MarkovPolicy>,
}

impl PolicyClass {
    pub fn explicit(members: Vec<MarkovPolicy>) -> Result<Self> {
        let first = members.first().ok_or_else(|| invalid("policy class must be nonempty"))?;
        for (i, p) in members.iter().enumerate() {
            p.validate()?;
            if !p.same_shape(first) {
                return Err(invalid(format!("class member {i} has a different shape")));
            }
            for (j, q) in members[..i].iter().enumerate() {
                if policy_distance(p, q)? == 0.0 {
                    return Err(invalid(format!("class members {j} and {i} coincide")));
                }
            }
        }
        Ok(Self {
            kind: ClassKind::Explicit,
            members,
        })
    }

    /// Every deterministic Markov policy, in lexicographic order.
    pub fn all_deterministic(horizon: usize, num_states: usize, num_actions: usize, budget: u128) -> Result<Self> {
        let total = deterministic_policy_count(horizon, num_states, num_actions);
        if total > budget {
            return Err(Error::Capacity {
                what: "deterministic policy class",
                required: total,
                budget,
            });
        }
        let members = (0..total)
            .map(|i| deterministic_policy_at(horizon, num_states, num_actions, i))
            .collect();
        Ok(Self {
            kind: ClassKind::AllDeterministic,
            members,
        })
    }

    /// `size` distinct policies whose rows are softmaxes of logits drawn from
    /// a small integer grid.
    pub fn softmax_grid(horizon: usize, num_states: usize, num_actions: usize, size: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(invalid("softmax-grid class size must be positive"));
        }
        let distinct_rows = (SOFTMAX_LEVELS.len() as f64).powi(num_actions as i32);
        let distinct = distinct_rows.powi((horizon * num_states) as i32);
        if (size as f64) > distinct {
            return Err(invalid(format!("softmax grid has fewer than {size} distinct members")));
        }
        let mut rng = rng_for(seed, 0xc1a55, 0);
        let mut members: Vec<MarkovPolicy> = Vec::with_capacity(size);
        let mut attempts = 0usize;
        while members.len() < size {
            attempts += 1;
            if attempts > size * 1000 {
                return Err(invalid("softmax grid draw did not produce enough distinct members"));
            }
            let mut probs = Vec::with_capacity(horizon * num_states * num_actions);
            for _ in 0..horizon * num_states {
                let logits: Vec<f64> = (0..num_actions)
                    .map(|_| SOFTMAX_LEVELS[rng.random_range(0..SOFTMAX_LEVELS.len())])
                    .collect();
                probs.extend(softmax(&logits));
            }
            let cand = MarkovPolicy::from_rows(horizon, num_states, num_actions, probs)?;
            if members.iter().all(|m| policy_distance(m, &cand).map(|d| d > 0.0).unwrap_or(false)) {
                members.push(cand);
            }
        }
        Ok(Self {
            kind: ClassKind::SoftmaxGrid,
            members,
        })
    }

    /// All deterministic policies when they fit `budget`, else a softmax
    /// grid of `fallback_size` members.
    pub fn default_for(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        budget: u128,
        fallback_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if deterministic_policy_count(horizon, num_states, num_actions) <= budget {
            Self::all_deterministic(horizon, num_states, num_actions, budget)
        } else {
            Self::softmax_grid(horizon, num_states, num_actions, fallback_size, seed)
        }
    }

    pub fn kind(&self) -> ClassKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[MarkovPolicy] {
        &self.members
    }

    /// Index of a member equal to `policy`, if any.
    pub fn position(&self, policy: &MarkovPolicy) -> Option<usize> {
        self.members.iter().position(|m| m == policy)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

fn check_datasets(datasets: &[ContextDataset]) -> Result<usize> {
    let first = datasets.first().ok_or_else(|| invalid("at least one context dataset is required"))?;
    if datasets.iter().any(|d| d.horizon != first.horizon) {
        return Err(invalid("context datasets must share a horizon"));
    }
    if first.horizon == 0 {
        return Err(invalid("horizon must be positive"));
    }
    Ok(first.horizon)
}

#[derive(Debug, Clone)]
pub struct PermOutput {
    pub policy: MarkovPolicy,
    pub index: usize,
    /// Average pessimistic initial value of every class member.
    pub values: Vec<f64>,
    /// Confidence level handed to each evaluation.
    pub delta: f64,
    /// `Γ_{i,h}` tables, indexed `[context][stage][x·|A| + a]`.
    pub uncertainties: Vec<Vec<Vec<f64>>>,
}

/// Maximizes the average pessimistic initial value over `class`, evaluating
/// every member on every context with confidence `δ / (3 n H N)`.
pub fn perm(
    datasets: &[ContextDataset],
    class: &PolicyClass,
    delta: f64,
    ppe: &LinearPpeConfig,
    features: &FeatureMap,
    initial_state: usize,
    budget: u128,
) -> Result<PermOutput> {
    let hz = check_datasets(datasets)?;
    let (n, big_n) = (datasets.len(), class.size());
    let work = (big_n as u128) * (n as u128) * (hz as u128);
    if work > budget {
        return Err(Error::Capacity {
            what: "PERM evaluations (class size x contexts x horizon)",
            required: work,
            budget,
        });
    }
    if class.members()[0].horizon() != hz
        || class.members()[0].num_states() != features.num_states()
        || class.members()[0].num_actions() != features.num_actions()
    {
        return Err(invalid("policy class shape does not match the data"));
    }
    let split = delta / (3.0 * n as f64 * hz as f64 * big_n as f64);
    let cfg = ppe.with_delta(split);
    let evaluators = datasets
        .par_iter()
        .map(|d| LinearPpe::new(&d.stage_datasets(), features, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let values = class
        .members()
        .par_iter()
        .map(|pi| {
            let mut total = 0.0;
            for e in &evaluators {
                total += e.evaluate(pi)?.initial_value(initial_state);
            }
            Ok(total / n as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (index, _) = argmax_lexicographic(&values);
    Ok(PermOutput {
        policy: class.members()[index].clone(),
        index,
        values,
        delta: split,
        uncertainties: evaluators.iter().map(|e| e.uncertainties()).collect(),
    })
}

/// PERM with arbitrary stage oracles, one list of `H` oracles per context.
/// Reported uncertainties are those of the oracles at the zero test function.
pub fn perm_with_oracles(
    oracles: &[Vec<&dyn StageOracle>],
    class: &PolicyClass,
    initial_state: usize,
) -> Result<PermOutput> {
    if oracles.is_empty() {
        return Err(invalid("at least one context is required"));
    }
    let n = oracles.len();
    let mut values = Vec::with_capacity(class.size());
    for pi in class.members() {
        let mut total = 0.0;
        for ctx in oracles {
            total += generic_ppe(ctx, pi)?.initial_value(initial_state);
        }
        values.push(total / n as f64);
    }
    let (index, _) = argmax_lexicographic(&values);
    let zero = vec![0.0; class.members()[0].num_states()];
    Ok(PermOutput {
        policy: class.members()[index].clone(),
        index,
        values,
        delta: f64::NAN,
        uncertainties: oracles
            .iter()
            .map(|ctx| ctx.iter().map(|o| o.apply(&zero).uncertainty).collect())
            .collect(),
    })
}

/// Stage `h` takes step `h` of trajectories `τ·H + h`, `τ < ⌊K/H⌋`, so each
/// trajectory feeds at most one stage.
pub fn split_for_pppo(dataset: &ContextDataset) -> Result<Vec<StageDataset>> {
    let (k, hz) = (dataset.num_trajectories(), dataset.horizon);
    if hz == 0 || k < hz {
        return Err(invalid(format!("data splitting needs K >= H, got K={k}, H={hz}")));
    }
    let blocks = k / hz;
    Ok((0..hz)
        .map(|h| StageDataset {
            stage: h,
            tuples: (0..blocks).map(|tau| dataset.trajectories[tau * hz + h].steps[h]).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PppoConfig {
    /// Step size; `1/sqrt(H² n)` when unset.
    pub alpha: Option<f64>,
    /// Seed of the final uniform draw among the iterates.
    pub seed: u64,
    pub delta: f64,
}

impl PppoConfig {
    pub fn new(seed: u64, delta: f64) -> Self {
        Self {
            alpha: None,
            seed,
            delta,
        }
    }

    pub fn step_size(&self, horizon: usize, n: usize) -> f64 {
        self.alpha
            .unwrap_or_else(|| 1.0 / ((horizon * horizon * n) as f64).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct PppoOutput {
    pub policy: MarkovPolicy,
    /// 0-based position of the returned policy among `π_1..π_n`.
    pub selected: usize,
    pub iterates: Vec<MarkovPolicy>,
    /// Pessimistic initial value of `π_i` on context `i`.
    pub value_trace: Vec<f64>,
    pub alpha: f64,
    pub delta: f64,
    /// `Γ_{i,h}` tables, indexed `[context][stage][x·|A| + a]`.
    pub uncertainties: Vec<Vec<Vec<f64>>>,
}

/// `π_h(·|x) ∝ π_h(·|x) · exp(α Q̂_h(x, ·))` for every row.
pub fn exponentiated_update(prior: &MarkovPolicy, q: &PessimisticEstimate, alpha: f64) -> Result<MarkovPolicy> {
    if q.horizon() != prior.horizon() {
        return Err(invalid("critic and policy horizons differ"));
    }
    let (hz, s, a) = (prior.horizon(), prior.num_states(), prior.num_actions());
    let mut next = prior.clone();
    for h in 0..hz {
        for x in 0..s {
            let qrow = &q.stages[h].q[x * a..(x + 1) * a];
            let row = closed_form_row(prior.row(h, x), qrow, alpha);
            next.row_mut(h, x).copy_from_slice(&row);
        }
    }
    Ok(next)
}

fn closed_form_row(prior: &[f64], q: &[f64], alpha: f64) -> Vec<f64> {
    let top = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = prior.iter().zip(q).map(|(p, qv)| p * (alpha * (qv - top)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Sequential exponentiated-weights optimization over the contexts in order,
/// each context evaluated on its split data with confidence `δ / (n H)`.
pub fn pppo(
    datasets: &[ContextDataset],
    config: &PppoConfig,
    ppe: &LinearPpeConfig,
    features: &FeatureMap,
    initial_state: usize,
) -> Result<PppoOutput> {
    let hz = check_datasets(datasets)?;
    let n = datasets.len();
    let alpha = config.step_size(hz, n);
    if !(alpha > 0.0) {
        return Err(invalid("PPPO step size must be positive"));
    }
    let split = config.delta / (n as f64 * hz as f64);
    let cfg = ppe.with_delta(split);
    let evaluators = datasets
        .par_iter()
        .map(|d| split_for_pppo(d).and_then(|stages| LinearPpe::new(&stages, features, &cfg)))
        .collect::<Result<Vec<_>>>()?;
    let (s, a) = (features.num_states(), features.num_actions());
    let mut current = MarkovPolicy::uniform(hz, s, a);
    let mut critic: Option<PessimisticEstimate> = None;
    let mut iterates = Vec::with_capacity(n);
    let mut value_trace = Vec::with_capacity(n);
    for e in &evaluators {
        if let Some(q) = &critic {
            current = exponentiated_update(&current, q, alpha)?;
        }
        let est = e.evaluate(&current)?;
        value_trace.push(est.initial_value(initial_state));
        iterates.push(current.clone());
        critic = Some(est);
    }
    let selected = rng_for(config.seed, 0x9990, n as u64).random_range(0..n);
    Ok(PppoOutput {
        policy: iterates[selected].clone(),
        selected,
        iterates,
        value_trace,
        alpha,
        delta: split,
        uncertainties: evaluators.iter().map(|e| e.uncertainties()).collect(),
    })
}

/// Closed-form proximal row and a derivative-free maximizer of
/// `<q, p> - KL(p || prior) / α` over the simplex.
pub fn kl_update_check(prior: &[f64], q: &[f64], alpha: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if prior.is_empty() || prior.len() != q.len() {
        return Err(invalid("prior and q must have the same nonzero length"));
    }
    if !(alpha > 0.0) {
        return Err(invalid("alpha must be positive"));
    }
    if prior.iter().any(|p| !(*p >= 0.0)) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid("prior must be a distribution"));
    }
    let closed = closed_form_row(prior, q, alpha);
    Ok((closed, simplex_search(prior, q, alpha)))
}

fn proximal_objective(p: &[f64], prior: &[f64], q: &[f64], alpha: f64) -> f64 {
    let mut lin = 0.0;
    let mut kl = 0.0;
    for ((pi, qi), mi) in p.iter().zip(q).zip(prior) {
        lin += pi * qi;
        if *pi > 0.0 {
            kl += pi * (pi / mi).ln();
        }
    }
    lin - kl / alpha
}

/// Coarse lattice scan over the prior's support, then pairwise
/// mass-transfer pattern search with step halving.
fn simplex_search(prior: &[f64], q: &[f64], alpha: f64) -> Vec<f64> {
    let support: Vec<usize> = (0..prior.len()).filter(|i| prior[*i] > 0.0).collect();
    let k = support.len();
    let embed = |sub: &[f64]| {
        let mut p = vec![0.0; prior.len()];
        for (i, v) in support.iter().zip(sub) {
            p[*i] = *v;
        }
        p
    };
    let f = |sub: &[f64]| proximal_objective(&embed(sub), prior, q, alpha);
    let resolution = 20usize;
    let mut best = vec![1.0 / k as f64; k];
    let mut best_val = f(&best);
    let mut counts = vec![0usize; k];
    lattice(&mut counts, 0, resolution, &mut |c| {
        let p: Vec<f64> = c.iter().map(|v| *v as f64 / resolution as f64).collect();
        let v = f(&p);
        if v > best_val {
            best_val = v;
            best = p;
        }
    });
    let mut step = 0.5 / resolution as f64;
    while step > 1e-12 {
        let mut improved = true;
        while improved {
            improved = false;
            for i in 0..k {
                for j in 0..k {
                    if i == j {
                        continue;
                    }
                    let moved = step.min(best[j]);
                    if moved <= 0.0 {
                        continue;
                    }
                    let mut cand = best.clone();
                    cand[i] += moved;
                    cand[j] -= moved;
                    let v = f(&cand);
                    if v > best_val {
                        best_val = v;
                        best = cand;
                        improved = true;
                    }
                }
            }
        }
        step *= 0.5;
    }
    embed(&best)
}

fn lattice(counts: &mut Vec<usize>, slot: usize, remaining: usize, visit: &mut dyn FnMut(&[usize])) {
    if slot + 1 == counts.len() {
        counts[slot] = remaining;
        visit(counts);
        return;
    }
    for c in 0..=remaining {
        counts[slot] = c;
        lattice(counts, slot + 1, remaining - c, visit);
    }
}

#[derive(Debug, Clone)]
pub struct PeviOutput {
    pub policy: MarkovPolicy,
    pub estimate: PessimisticEstimate,
    /// `Γ_h` tables on the merged data.
    pub uncertainties: Vec<Vec<f64>>,
}

/// Pessimistic value iteration on a single merged dataset with a greedy,
/// lowest-index tie-break.
pub fn pevi_merged(
    merged: &ContextDataset,
    delta: f64,
    ppe: &LinearPpeConfig,
    features: &FeatureMap,
) -> Result<PeviOutput> {
    let hz = merged.horizon;
    if hz == 0 || merged.num_trajectories() == 0 {
        return Err(invalid("PEVI needs a nonempty merged dataset"));
    }
    let cfg = ppe.with_delta(delta);
    let evaluator = LinearPpe::new(&merged.stage_datasets(), features, &cfg)?;
    let (s, a) = (features.num_states(), features.num_actions());
    let mut actions = vec![0usize; hz * s];
    let mut policy = MarkovPolicy::uniform(hz, s, a);
    let mut next_v = vec![0.0; s];
    for h in (0..hz).rev() {
        let (_, out) = evaluator.oracles()[h].fit(&next_v);
        let ceiling = (hz - h) as f64;
        for x in 0..s {
            let q: Vec<f64> = (0..a)
                .map(|act| {
                    let i = x * a + act;
                    (out.applied_bellman[i] - out.uncertainty[i]).min(ceiling).max(0.0)
                })
                .collect();
            let (best, value) = argmax_lexicographic(&q);
            actions[h * s + x] = best;
            next_v[x] = value;
        }
        policy = MarkovPolicy::deterministic(hz, s, a, &actions)?;
    }
    let estimate = evaluator.evaluate(&policy)?;
    Ok(PeviOutput {
        policy,
        estimate,
        uncertainties: evaluator.uncertainties(),
    })
}

/// `m` groups of `n/m` consecutive contexts, each merged into one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDatasets {
    pub groups: Vec<ContextDataset>,
    pub group_size: usize,
}

pub fn group_contexts(datasets: &[ContextDataset], m: usize) -> Result<GroupedDatasets> {
    let n = datasets.len();
    if m == 0 || n == 0 || !n.is_multiple_of(m) {
        return Err(invalid(format!("cannot split {n} contexts into {m} equal groups")));
    }
    let size = n / m;
    let groups = datasets
        .chunks(size)
        .enumerate()
        .map(|(j, part)| {
            if size == 1 {
                Ok(part[0].clone())
            } else {
                ContextDataset::merge(j, part)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupedDatasets { groups, group_size: size })
}

pub fn perm_mv(
    datasets: &[ContextDataset],
    m: usize,
    class: &PolicyClass,
    delta: f64,
    ppe: &LinearPpeConfig,
    features: &FeatureMap,
    initial_state: usize,
    budget: u128,
) -> Result<PermOutput> {
    let grouped = group_contexts(datasets, m)?;
    perm(&grouped.groups, class, delta, ppe, features, initial_state, budget)
}

pub fn pppo_mv(
    datasets: &[ContextDataset],
    m: usize,
    config: &PppoConfig,
    ppe: &LinearPpeConfig,
    features: &FeatureMap,
    initial_state: usize,
) -> Result<PppoOutput> {
    let grouped = group_contexts(datasets, m)?;
    pppo(&grouped.groups, config, ppe, features, initial_state)
}

/// `|(1/n) Σ_i V^π_i - (1/m) Σ_j V'^π_j|`, where `V'_j` is the value in the
/// average MDP of group `j` under the contexts' behaviors.
pub fn grouping_gap(
    contexts: &[LinearMdp],
    behaviors: &[MarkovPolicy],
    m: usize,
    policy: &MarkovPolicy,
) -> Result<f64> {
    let n = contexts.len();
    if m == 0 || n == 0 || !n.is_multiple_of(m) || behaviors.len() != n {
        return Err(invalid(format!("cannot split {n} contexts into {m} equal groups")));
    }
    let size = n / m;
    let mut per_context = 0.0;
    for c in contexts {
        per_context += policy_value(c, policy)?;
    }
    let mut per_group = 0.0;
    for (cs, bs) in contexts.chunks(size).zip(behaviors.chunks(size)) {
        let fam = ContextFamily::uniform(cs.to_vec())?;
        per_group += policy_value(&average_mdp(&fam, bs)?.model, policy)?;
    }
    Ok((per_context / n as f64 - per_group / m as f64).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envgen::{collect_dataset, figure1_instance, uniform_behaviors};
    use crate::exact::family_value;

    fn figure1_uniform(k: usize, seed: u64) -> (ContextFamily, Vec<ContextDataset>) {
        let f1 = figure1_instance(0.1).unwrap();
        let behaviors = uniform_behaviors(&f1.family);
        let data = f1
            .family
            .contexts()
            .iter()
            .zip(&behaviors)
            .enumerate()
            .map(|(i, (m, b))| collect_dataset(m, b, k, seed + i as u64, i).unwrap())
            .collect();
        (f1.family, data)
    }

    #[test]
    fn all_deterministic_class_sizes() {
        assert_eq!(PolicyClass::all_deterministic(1, 1, 3, 100).unwrap().size(), 3);
        assert_eq!(PolicyClass::all_deterministic(2, 2, 2, 100).unwrap().size(), 16);
        assert!(matches!(
            PolicyClass::all_deterministic(3, 3, 3, 100),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn softmax_grid_is_distinct_and_seeded() {
        let a = PolicyClass::softmax_grid(2, 2, 3, 25, 4).unwrap();
        let b = PolicyClass::softmax_grid(2, 2, 3, 25, 4).unwrap();
        assert_eq!(a, b);
        assert!(PolicyClass::explicit(a.members().to_vec()).is_ok());
        assert_eq!(PolicyClass::default_for(4, 4, 4, 1000, 10, 0).unwrap().kind(), ClassKind::SoftmaxGrid);
    }

    #[test]
    fn duplicate_members_are_rejected() {
        let p = MarkovPolicy::uniform(1, 1, 2);
        assert!(PolicyClass::explicit(vec![p.clone(), p]).is_err());
    }

    #[test]
    fn perm_recovers_middle_arm_under_uniform_coverage() {
        let (_, data) = figure1_uniform(20_000, 3);
        let class = PolicyClass::all_deterministic(1, 1, 3, 100).unwrap();
        let f = FeatureMap::one_hot(1, 3).unwrap();
        let out = perm(&data, &class, 0.1, &LinearPpeConfig::default(), &f, 0, DEFAULT_PERM_BUDGET).unwrap();
        assert_eq!(out.index, 1);
        for v in &out.values {
            assert!(out.values[out.index] >= *v);
        }
    }

    #[test]
    fn perm_on_empty_data_returns_first_member() {
        let data = vec![ContextDataset::new(0, 1, vec![]).unwrap()];
        let class = PolicyClass::all_deterministic(1, 1, 3, 100).unwrap();
        let f = FeatureMap::one_hot(1, 3).unwrap();
        let out = perm(&data, &class, 0.1, &LinearPpeConfig::default(), &f, 0, DEFAULT_PERM_BUDGET).unwrap();
        assert_eq!(out.index, 0);
        assert!(out.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn perm_budget_is_enforced() {
        let (_, data) = figure1_uniform(10, 3);
        let class = PolicyClass::all_deterministic(1, 1, 3, 100).unwrap();
        let f = FeatureMap::one_hot(1, 3).unwrap();
        let r = perm(&data, &class, 0.1, &LinearPpeConfig::default(), &f, 0, 5);
        assert!(matches!(r, Err(Error::Capacity { required: 6, .. })));
    }

    #[test]
    fn split_examples() {
        let (_, data) = figure1_uniform(10, 1);
        let mut d = data[0].clone();
        d.horizon = 1;
        assert_eq!(split_for_pppo(&d).unwrap()[0].tuples.len(), 10);
        let short = ContextDataset::new(0, 1, vec![]).unwrap();
        assert!(split_for_pppo(&short).is_err());
    }

    #[test]
    fn pppo_single_context_returns_uniform() {
        let (_, data) = figure1_uniform(100, 2);
        let f = FeatureMap::one_hot(1, 3).unwrap();
        let out = pppo(&data[..1], &PppoConfig::new(0, 0.1), &LinearPpeConfig::default(), &f, 0).unwrap();
        assert_eq!(out.policy, MarkovPolicy::uniform(1, 1, 3));
        assert_eq!(out.selected, 0);
    }

    #[test]
    fn pppo_rows_stay_distributions() {
        let (_, data) = figure1_uniform(2000, 5);
        let cycle: Vec<ContextDataset> = (0..20).map(|i| data[i % 2].clone()).collect();
        let f = FeatureMap::one_hot(1, 3).unwrap();
        let cfg = PppoConfig {
            alpha: Some(3.0),
            ..PppoConfig::new(1, 0.1)
        };
        let out = pppo(&cycle, &cfg, &LinearPpeConfig::default(), &f, 0).unwrap();
        for it in &out.iterates {
            let row = it.row(0, 0);
            assert!(row.iter().all(|p| *p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // the middle arm gains mass once the critic sees both contexts
        assert!(out.iterates[19].row(0, 0)[1] > 1.0 / 3.0);
    }

    #[test]
    fn constant_critic_keeps_rows() {
        let row = closed_form_row(&[0.2, 0.3, 0.5], &[0.7, 0.7, 0.7], 2.0);
        for (a, b) in row.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_check_zero_advantage_returns_prior() {
        let prior = [0.25, 0.25, 0.5];
        let (closed, brute) = kl_update_check(&prior, &[0.0; 3], 1.0).unwrap();
        assert_eq!(closed, prior.to_vec());
        let l1: f64 = brute.iter().zip(&prior).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 < 1e-3);
    }

    #[test]
    fn kl_check_softmax_example() {
        let (closed, brute) = kl_update_check(&[1.0 / 3.0; 3], &[1.0, 0.0, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        let expected = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for (c, x) in closed.iter().zip(expected) {
            assert!((c - x).abs() < 1e-12);
        }
        let l1: f64 = brute.iter().zip(&closed).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 < 1e-3);
    }

    #[test]
    fn kl_check_large_alpha_approaches_argmax() {
        let (closed, brute) = kl_update_check(&[0.25; 4], &[0.1, 0.9, 0.3, 0.2], 200.0).unwrap();
        assert!(closed[1] > 0.999);
        assert!(brute[1] > 0.99);
    }

    #[test]
    fn pevi_picks_an_outer_arm_on_skewed_data() {
        let f1 = figure1_instance(0.1).unwrap();
        let parts: Vec<ContextDataset> = f1
            .family
            .contexts()
            .iter()
            .zip(&f1.behaviors)
            .enumerate()
            .map(|(i, (m, b))| collect_dataset(m, b, 20_000, 9 + i as u64, i).unwrap())
            .collect();
        let merged = ContextDataset::merge(0, &parts).unwrap();
        let f = FeatureMap::one_hot(1, 3).unwrap();
        let out = pevi_merged(&merged, 0.1, &LinearPpeConfig::default(), &f).unwrap();
        let a = out.policy.deterministic_action(0, 0).unwrap();
        assert!(a == 0 || a == 2);
        assert!((family_value(&f1.family, &out.policy).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn grouping_with_singletons_is_identity() {
        let (_, data) = figure1_uniform(50, 7);
        let g = group_contexts(&data, 2).unwrap();
        assert_eq!(g.groups, data);
        assert!(group_contexts(&data, 3).is_err());
        let one = group_contexts(&data, 1).unwrap();
        assert_eq!(one.groups[0].num_trajectories(), 100);
    }

    #[test]
    fn grouping_gap_vanishes_on_identical_contexts() {
        let f1 = figure1_instance(0.1).unwrap();
        let c = f1.family.contexts()[0].clone();
        let contexts = vec![c; 8];
        let behaviors = vec![MarkovPolicy::uniform(1, 1, 3); 8];
        let pi = MarkovPolicy::constant(1, 1, 3, 1).unwrap();
        assert!(grouping_gap(&contexts, &behaviors, 4, &pi).unwrap() < 1e-9);
    }
}
