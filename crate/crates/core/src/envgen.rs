//! Context families (seeded random and the three-armed counterexample),
//! offline data collection under Markov behavior policies, and exploration
//! quality of a behavior policy.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{invalid, Result};
use crate::exact::{self, occupancy, optimal_values, DEFAULT_ENUMERATION_BUDGET};
use crate::model::{
    ContextDataset, ContextFamily, FeatureKind, FeatureMap, LinearMdp, MarkovPolicy, RewardMode, Step, Trajectory,
};

/// SplitMix64 finalizer over a combined key; used to derive independent
/// per-context and per-trajectory streams from one master seed.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(master) ^ a) ^ b.rotate_left(32))
}

pub fn rng_for(master: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, a, b))
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContextLaw {
    /// Every draw is a fresh random context.
    IidRandom,
    /// Draws are i.i.d. picks (by weight) from a fixed list.
    ExplicitList(ContextFamily),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyGenerator {
    pub seed: u64,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// Feature dimension; ignored (forced to `|S|·|A|`) for one-hot features.
    pub dim: usize,
    pub feature_kind: FeatureKind,
    pub context_law: ContextLaw,
    /// Dirichlet concentration of transition rows; small values give sharp, diverse contexts.
    pub dirichlet_alpha: f64,
    /// Mean rewards are uniform on `[0.5 - spread/2, 0.5 + spread/2]`.
    pub reward_spread: f64,
    pub reward_mode: RewardMode,
}

impl FamilyGenerator {
    /// One-hot random generator with moderate sharpness and full reward spread.
    pub fn tabular(seed: u64, num_states: usize, num_actions: usize, horizon: usize) -> Self {
        Self {
            seed,
            num_states,
            num_actions,
            horizon,
            dim: num_states * num_actions,
            feature_kind: FeatureKind::TabularOneHot,
            context_law: ContextLaw::IidRandom,
            dirichlet_alpha: 1.0,
            reward_spread: 1.0,
            reward_mode: RewardMode::Deterministic,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    fn check(&self) -> Result<()> {
        if self.num_states == 0 || self.num_actions == 0 || self.horizon == 0 {
            return Err(invalid("generator shape entries must be positive"));
        }
        if self.feature_kind == FeatureKind::Explicit && self.dim == 0 {
            return Err(invalid("explicit features need d >= 1"));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(invalid("dirichlet_alpha must be positive"));
        }
        if !(0.0..=1.0).contains(&self.reward_spread) {
            return Err(invalid("reward_spread must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Feature map shared by every context this generator produces.
    pub fn feature_map(&self) -> Result<Arc<FeatureMap>> {
        self.check()?;
        match self.feature_kind {
            FeatureKind::TabularOneHot => Ok(Arc::new(FeatureMap::one_hot(self.num_states, self.num_actions)?)),
            FeatureKind::Explicit => {
                // simplex-valued features: convex weights over d latent anchors
                let mut rng = rng_for(self.seed, u64::MAX, 0);
                let rows = (0..self.num_states * self.num_actions)
                    .map(|_| draw_simplex(self.dim, 1.0, &mut rng))
                    .collect();
                Ok(Arc::new(FeatureMap::explicit(self.num_states, self.num_actions, rows)?))
            }
        }
    }

    fn random_context(&self, features: &Arc<FeatureMap>, index: u64) -> Result<LinearMdp> {
        let mut rng = rng_for(self.seed, index, 1);
        let d = features.dim();
        let s = self.num_states;
        let lo = 0.5 - self.reward_spread / 2.0;
        let mut mu = Vec::with_capacity(self.horizon);
        let mut theta = Vec::with_capacity(self.horizon);
        for _ in 0..self.horizon {
            let mut m = DMatrix::zeros(d, s);
            for j in 0..d {
                let row = draw_simplex(s, self.dirichlet_alpha, &mut rng);
                for (next, p) in row.into_iter().enumerate() {
                    m[(j, next)] = p;
                }
            }
            let t = DVector::from_fn(d, |_, _| lo + self.reward_spread * rng.random::<f64>());
            mu.push(m);
            theta.push(t);
        }
        Ok(LinearMdp::new(features.clone(), self.horizon, 0, mu, theta)?.with_reward_mode(self.reward_mode))
    }
}

fn draw_simplex<R: Rng + ?Sized>(k: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let mut v: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    // renormalize so rows sum to one to working precision
    let total: f64 = v.iter().sum();
    if !(total > 0.0) || v.iter().any(|p| !p.is_finite()) {
        // extreme concentrations can underflow; fall back to a point mass
        let i = rng.random_range(0..k);
        v = vec![0.0; k];
        v[i] = 1.0;
        return v;
    }
    v.iter_mut().for_each(|p| *p /= total);
    v
}

/// Draws `n` contexts; deterministic in `(gen, n)`. The returned family has
/// uniform weights over the draws.
pub fn sample_contexts(gen: &FamilyGenerator, n: usize) -> Result<ContextFamily> {
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    match &gen.context_law {
        ContextLaw::IidRandom => {
            let features = gen.feature_map()?;
            let contexts = (0..n as u64)
                .map(|i| gen.random_context(&features, i))
                .collect::<Result<Vec<_>>>()?;
            ContextFamily::uniform(contexts)
        }
        ContextLaw::ExplicitList(pool) => {
            let mut rng = rng_for(gen.seed, 0, 2);
            let contexts = (0..n)
                .map(|_| pool.contexts()[sample_index(pool.weights(), &mut rng)].clone())
                .collect();
            ContextFamily::uniform(contexts)
        }
    }
}

/// Rolls out `k` trajectories of `behavior` in `model`. Trajectory `t` uses
/// its own stream derived from `(seed, context_id, t)`, so the output does not
/// depend on scheduling.
pub fn collect_dataset(
    model: &LinearMdp,
    behavior: &MarkovPolicy,
    k: usize,
    seed: u64,
    context_id: usize,
) -> Result<ContextDataset> {
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    if !behavior.matches_model(model) {
        return Err(invalid("behavior policy shape does not match the model"));
    }
    let trajectories = (0..k)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(seed, context_id as u64, t as u64);
            roll_out(model, behavior, &mut rng)
        })
        .collect();
    ContextDataset::new(context_id, model.horizon(), trajectories)
}

fn roll_out<R: Rng + ?Sized>(model: &LinearMdp, behavior: &MarkovPolicy, rng: &mut R) -> Trajectory {
    let mut x = model.initial_state();
    let mut steps = Vec::with_capacity(model.horizon());
    for h in 0..model.horizon() {
        let a = sample_index(behavior.row(h, x), rng);
        let mean = model.reward(h, x, a);
        let reward = match model.reward_mode() {
            RewardMode::Deterministic => mean,
            RewardMode::Bernoulli => {
                if rng.random::<f64>() < mean.clamp(0.0, 1.0) {
                    1.0
                } else {
                    0.0
                }
            }
        };
        let next = sample_index(model.transition_row(h, x, a), rng);
        steps.push(Step {
            state: x,
            action: a,
            reward,
            next_state: next,
        });
        x = next;
    }
    Trajectory { steps }
}

/// Collects one dataset per context; context `i` gets id `i`.
pub fn collect_family(
    family: &ContextFamily,
    behaviors: &[MarkovPolicy],
    k: usize,
    seed: u64,
) -> Result<Vec<ContextDataset>> {
    if behaviors.len() != family.len() {
        return Err(invalid("one behavior policy per context is required"));
    }
    family
        .contexts()
        .iter()
        .zip(behaviors)
        .enumerate()
        .map(|(i, (m, b))| collect_dataset(m, b, k, seed, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationConstants {
    /// `d · lambda_min(Sigma_h)` for each stage.
    pub per_stage: Vec<f64>,
    pub min: f64,
}

/// Feature second-moment matrix `Sigma_h = E_{behavior}[phi phi^T]` at each stage.
pub fn feature_covariances(model: &LinearMdp, behavior: &MarkovPolicy) -> Result<Vec<DMatrix<f64>>> {
    let occ = occupancy(model, behavior)?;
    let f = model.features();
    let d = f.dim();
    let mut out = Vec::with_capacity(model.horizon());
    for h in 0..model.horizon() {
        let mut sigma = DMatrix::zeros(d, d);
        for x in 0..model.num_states() {
            for a in 0..model.num_actions() {
                let w = occ.get(h, x, a);
                if w == 0.0 {
                    continue;
                }
                let phi = f.phi_vector(x, a);
                sigma += w * &phi * phi.transpose();
            }
        }
        out.push(sigma);
    }
    Ok(out)
}

pub fn exploration_constants(model: &LinearMdp, behavior: &MarkovPolicy) -> Result<ExplorationConstants> {
    let d = model.features().dim() as f64;
    let per_stage: Vec<f64> = if model.features().kind() == FeatureKind::TabularOneHot {
        // Sigma_h is diagonal with the occupancy on its diagonal
        let occ = occupancy(model, behavior)?;
        occ.stages
            .iter()
            .map(|s| d * s.iter().copied().fold(f64::INFINITY, f64::min))
            .collect()
    } else {
        feature_covariances(model, behavior)?
            .into_iter()
            .map(|sigma| {
                let eig = SymmetricEigen::new(sigma);
                d * eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min).max(0.0)
            })
            .collect()
    };
    let min = per_stage.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ExplorationConstants { per_stage, min })
}

/// The two-context, three-action, single-state counterexample family with
/// its skewed behaviors. Rewards are stored on `[0, 1]`: signed-scale
/// `{-1, 0, 1}` maps to `{0, 0.5, 1}`.
#[derive(Debug, Clone)]
pub struct Figure1 {
    pub family: ContextFamily,
    pub behaviors: Vec<MarkovPolicy>,
}

/// Maps a `[0, 1]` reward or value on the counterexample back to `[-1, 1]`.
pub fn to_signed_scale(x: f64) -> f64 {
    2.0 * x - 1.0
}

pub fn figure1_instance(epsilon: f64) -> Result<Figure1> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(invalid("epsilon must lie in (0, 1)"));
    }
    let context = |r: [f64; 3]| {
        let p = vec![vec![vec![vec![1.0]; 3]]];
        let rewards = vec![vec![r.to_vec()]];
        LinearMdp::tabular(0, &p, &rewards)
    };
    // signed rewards v = (1, 0, -1), w = (-1, 1, 1)
    let v = context([1.0, 0.5, 0.0])?;
    let w = context([0.0, 1.0, 1.0])?;
    let family = ContextFamily::uniform(vec![v, w])?;
    let behaviors = vec![
        MarkovPolicy::from_rows(1, 1, 3, vec![1.0 - epsilon, epsilon, 0.0])?,
        MarkovPolicy::from_rows(1, 1, 3, vec![0.0, 0.0, 1.0])?,
    ];
    Ok(Figure1 { family, behaviors })
}

/// Uniform behaviors for every context of a family.
pub fn uniform_behaviors(family: &ContextFamily) -> Vec<MarkovPolicy> {
    vec![MarkovPolicy::uniform(family.horizon(), family.num_states(), family.num_actions()); family.len()]
}

#[derive(Debug, Clone)]
pub enum DivergenceSearch {
    Found {
        /// Number of candidate families examined, including the winner.
        attempts: usize,
        seed: u64,
        family: ContextFamily,
        average_optimal: MarkovPolicy,
        zsg_optimal: MarkovPolicy,
        gap: f64,
    },
    Exhausted {
        attempts: usize,
        best_gap: f64,
    },
}

/// Scans seeded random families (uniform behaviors) for one whose
/// average-MDP optimal policy is at least `margin` suboptimal in the
/// zero-shot sense. Candidate `t` uses seed `gen.seed + t`.
pub fn find_divergent_instance(
    gen: &FamilyGenerator,
    contexts_per_family: usize,
    margin: f64,
    budget: usize,
) -> Result<DivergenceSearch> {
    let mut best_gap = f64::NEG_INFINITY;
    for t in 0..budget {
        let seed = gen.seed.wrapping_add(t as u64);
        let family = sample_contexts(&gen.with_seed(seed), contexts_per_family)?;
        let behaviors = uniform_behaviors(&family);
        let avg = exact::average_mdp(&family, &behaviors)?;
        let (average_optimal, _) = optimal_values(&avg.model);
        let (zsg_optimal, best) = exact::optimal_zsg_policy(&family, DEFAULT_ENUMERATION_BUDGET)?;
        let gap = best - exact::family_value(&family, &average_optimal)?;
        best_gap = best_gap.max(gap);
        if gap >= margin {
            return Ok(DivergenceSearch::Found {
                attempts: t + 1,
                seed,
                family,
                average_optimal,
                zsg_optimal,
                gap,
            });
        }
    }
    Ok(DivergenceSearch::Exhausted { attempts: budget, best_gap })
}

/// Pearson goodness-of-fit of one `(h, x, a)` cell's next-state counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTest {
    pub h: usize,
    pub x: usize,
    pub a: usize,
    pub visits: usize,
    pub statistic: f64,
    pub dof: usize,
    /// Chi-squared quantile at the requested level; `None` when `dof = 0`.
    pub critical: Option<f64>,
}

impl CellTest {
    pub fn passes(&self) -> bool {
        self.critical.is_none_or(|c| self.statistic <= c)
    }
}

/// Chi-squared test of every cell with at least `min_visits` visits in the
/// union of `datasets`, against `model`'s transition rows. Categories whose
/// expected count is below 5 are pooled into one bin.
pub fn transition_fit_tests(
    datasets: &[ContextDataset],
    model: &LinearMdp,
    min_visits: usize,
    level: f64,
) -> Vec<CellTest> {
    let (hz, s, a) = (model.horizon(), model.num_states(), model.num_actions());
    let mut counts = vec![0usize; hz * s * a * s];
    for ds in datasets {
        for t in &ds.trajectories {
            for (h, st) in t.steps.iter().enumerate() {
                counts[((h * s + st.state) * a + st.action) * s + st.next_state] += 1;
            }
        }
    }
    let mut out = Vec::new();
    for h in 0..hz {
        for x in 0..s {
            for act in 0..a {
                let base = ((h * s + x) * a + act) * s;
                let cell = &counts[base..base + s];
                let visits: usize = cell.iter().sum();
                if visits < min_visits {
                    continue;
                }
                let probs = model.transition_row(h, x, act);
                let (statistic, dof) = pearson(cell, probs, visits);
                let critical = (dof > 0).then(|| {
                    ChiSquared::new(dof as f64)
                        .expect("positive dof")
                        .inverse_cdf(level)
                });
                out.push(CellTest {
                    h,
                    x,
                    a: act,
                    visits,
                    statistic,
                    dof,
                    critical,
                });
            }
        }
    }
    out
}

fn pearson(counts: &[usize], probs: &[f64], visits: usize) -> (f64, usize) {
    let n = visits as f64;
    let mut stat = 0.0;
    let mut bins = 0usize;
    let (mut pooled_obs, mut pooled_exp) = (0.0, 0.0);
    let mut impossible = 0usize;
    for (c, p) in counts.iter().zip(probs) {
        let e = n * p;
        if *p <= 0.0 {
            impossible += c;
            continue;
        }
        if e < 5.0 {
            pooled_obs += *c as f64;
            pooled_exp += e;
            continue;
        }
        stat += (*c as f64 - e).powi(2) / e;
        bins += 1;
    }
    if pooled_exp > 0.0 {
        stat += (pooled_obs - pooled_exp).powi(2) / pooled_exp;
        bins += 1;
    }
    if impossible > 0 {
        return (f64::INFINITY, bins.saturating_sub(1).max(1));
    }
    (stat, bins.saturating_sub(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_model;

    #[test]
    fn sampling_is_deterministic() {
        let gen = FamilyGenerator::tabular(7, 3, 2, 2);
        let a = sample_contexts(&gen, 3).unwrap();
        let b = sample_contexts(&gen, 3).unwrap();
        assert_eq!(a, b);
        let c = sample_contexts(&gen.with_seed(8), 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn singleton_family_has_unit_weight() {
        let fam = sample_contexts(&FamilyGenerator::tabular(1, 2, 2, 2), 1).unwrap();
        assert_eq!(fam.weights(), &[1.0]);
    }

    #[test]
    fn sampled_contexts_are_valid() {
        for kind in [FeatureKind::TabularOneHot, FeatureKind::Explicit] {
            let mut gen = FamilyGenerator::tabular(3, 4, 3, 3);
            gen.feature_kind = kind;
            gen.dim = 5;
            gen.dirichlet_alpha = 0.3;
            let fam = sample_contexts(&gen, 6).unwrap();
            for m in fam.contexts() {
                let r = validate_model(m);
                assert!(r.is_valid(), "{kind}: {:?}", r.messages());
            }
        }
    }

    #[test]
    fn explicit_list_law_draws_from_pool() {
        let pool = figure1_instance(0.1).unwrap().family;
        let mut gen = FamilyGenerator::tabular(5, 1, 3, 1);
        gen.context_law = ContextLaw::ExplicitList(pool.clone());
        let fam = sample_contexts(&gen, 20).unwrap();
        assert!(fam.contexts().iter().all(|c| pool.contexts().contains(c)));
        assert!(fam.contexts().contains(&pool.contexts()[0]));
        assert!(fam.contexts().contains(&pool.contexts()[1]));
    }

    #[test]
    fn invalid_generator_shape_is_rejected() {
        let mut gen = FamilyGenerator::tabular(1, 0, 2, 2);
        assert!(sample_contexts(&gen, 1).is_err());
        gen.num_states = 2;
        gen.dirichlet_alpha = 0.0;
        assert!(sample_contexts(&gen, 1).is_err());
        assert!(sample_contexts(&FamilyGenerator::tabular(1, 2, 2, 2), 0).is_err());
    }

    #[test]
    fn deterministic_model_gives_identical_trajectories() {
        let p = vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]];
        let r = vec![vec![0.25], vec![0.75]];
        let m = LinearMdp::tabular(0, &vec![p; 3], &vec![r; 3]).unwrap();
        let ds = collect_dataset(&m, &MarkovPolicy::uniform(3, 2, 1), 25, 9, 0).unwrap();
        assert!(ds.trajectories.iter().all(|t| t == &ds.trajectories[0]));
        assert_eq!(ds.trajectories[0].steps.iter().map(|s| s.state).collect::<Vec<_>>(), vec![0, 1, 0]);
        ds.trajectories[0].check(3, 0).unwrap();
    }

    #[test]
    fn collection_is_seed_deterministic() {
        let fam = sample_contexts(&FamilyGenerator::tabular(2, 3, 2, 3), 1).unwrap();
        let b = MarkovPolicy::uniform(3, 3, 2);
        let a1 = collect_dataset(fam.first(), &b, 50, 4, 0).unwrap();
        let a2 = collect_dataset(fam.first(), &b, 50, 4, 0).unwrap();
        let a3 = collect_dataset(fam.first(), &b, 50, 5, 0).unwrap();
        assert_eq!(a1, a2);
        assert_ne!(a1, a3);
        for t in &a1.trajectories {
            t.check(3, 0).unwrap();
        }
    }

    #[test]
    fn skewed_behavior_frequencies() {
        let f1 = figure1_instance(0.1).unwrap();
        let ds = collect_dataset(&f1.family.contexts()[0], &f1.behaviors[0], 10_000, 11, 0).unwrap();
        let mut freq = [0.0f64; 3];
        for t in &ds.trajectories {
            freq[t.steps[0].action] += 1.0 / 10_000.0;
        }
        assert!((freq[0] - 0.9).abs() < 0.02);
        assert!((freq[1] - 0.1).abs() < 0.02);
        assert_eq!(freq[2], 0.0);
    }

    #[test]
    fn figure1_parameter_substitution() {
        let f1 = figure1_instance(0.5).unwrap();
        assert_eq!(f1.behaviors[0].row(0, 0), &[0.5, 0.5, 0.0]);
        assert!(figure1_instance(0.0).is_err());
        assert!(figure1_instance(1.0).is_err());
        // signed-scale rewards from the counterexample
        let v = &f1.family.contexts()[0];
        let w = &f1.family.contexts()[1];
        let signed = |m: &LinearMdp| (0..3).map(|a| to_signed_scale(m.reward(0, 0, a))).collect::<Vec<_>>();
        assert_eq!(signed(v), vec![1.0, 0.0, -1.0]);
        assert_eq!(signed(w), vec![-1.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_bandit_exploration_constant_is_one() {
        let p = vec![vec![vec![vec![1.0]; 3]]];
        let m = LinearMdp::tabular(0, &p, &[vec![vec![0.1, 0.2, 0.3]]]).unwrap();
        let c = exploration_constants(&m, &MarkovPolicy::uniform(1, 1, 3)).unwrap();
        assert!((c.min - 1.0).abs() < 1e-12);
    }

    #[test]
    fn skewed_behavior_has_zero_exploration_constant() {
        let f1 = figure1_instance(0.01).unwrap();
        let c = exploration_constants(&f1.family.contexts()[0], &f1.behaviors[0]).unwrap();
        assert_eq!(c.min, 0.0);
    }

    #[test]
    fn zero_margin_returns_first_candidate() {
        let gen = FamilyGenerator::tabular(100, 2, 2, 2);
        match find_divergent_instance(&gen, 2, 0.0, 5).unwrap() {
            DivergenceSearch::Found { attempts, seed, .. } => {
                assert_eq!(attempts, 1);
                assert_eq!(seed, 100);
            }
            other => panic!("expected a hit, got {other:?}"),
        }
    }

    #[test]
    fn single_stage_search_fails_under_uniform_coverage() {
        let gen = FamilyGenerator::tabular(0, 2, 2, 1);
        match find_divergent_instance(&gen, 2, 0.05, 300).unwrap() {
            DivergenceSearch::Exhausted { attempts, best_gap } => {
                assert_eq!(attempts, 300);
                assert!(best_gap.abs() < 1e-12, "bandit gap {best_gap}");
            }
            other => panic!("bandit search unexpectedly succeeded: {other:?}"),
        }
    }

    #[test]
    fn pearson_pools_sparse_categories() {
        let (stat, dof) = pearson(&[50, 48, 1, 1], &[0.5, 0.48, 0.01, 0.01], 100);
        assert_eq!(dof, 2);
        assert!(stat.abs() < 1e-12);
        let (stat, _) = pearson(&[99, 1], &[1.0, 0.0], 100);
        assert!(stat.is_infinite());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 1), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(5, 6, 7), derive_seed(5, 6, 7));
    }
}
