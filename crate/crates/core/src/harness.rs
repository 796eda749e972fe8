//! Experiment runner: builds populations, collects data, runs learners,
//! scores them with exact suboptimality and error-decomposition proxies,
//! and summarizes sweeps over `(n, K)`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envgen::{
    collect_dataset, derive_seed, figure1_instance, rng_for, sample_contexts, sample_index, uniform_behaviors,
    ContextLaw, FamilyGenerator,
};
use crate::error::{invalid, Error, Result};
use crate::exact::{average_mdp, family_value, occupancy, subopt_against, zsg_optimum, ZsgOptimum};
use crate::io::{read_env_spec, EnvSpec};
use crate::learners::{
    group_contexts, grouping_gap, perm, perm_with_oracles, pevi_merged, pppo, PolicyClass, PppoConfig,
    DEFAULT_PERM_BUDGET,
};
use crate::model::{ContextDataset, ContextFamily, FeatureKind, LinearMdp, MarkovPolicy, RewardMode};
use crate::ppe::{calibrate_beta, exact_oracles, CalibrationReport, LinearPpeConfig, StageOracle};

/// Metrics CSV header.
pub const CSV_COLUMNS: &str = "learner,n,K,m,seed,subopt,sl_proxy,rl_proxy,wall_time";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    #[serde(default)]
    pub dim: usize,
    pub feature_kind: FeatureKind,
    pub dirichlet_alpha: f64,
    pub reward_spread: f64,
    #[serde(default)]
    pub reward_mode: RewardMode,
}

impl GeneratorSpec {
    pub fn tabular(seed: u64, num_states: usize, num_actions: usize, horizon: usize) -> Self {
        Self::from_generator(&FamilyGenerator::tabular(seed, num_states, num_actions, horizon))
    }

    pub fn from_generator(gen: &FamilyGenerator) -> Self {
        Self {
            seed: gen.seed,
            num_states: gen.num_states,
            num_actions: gen.num_actions,
            horizon: gen.horizon,
            dim: gen.dim,
            feature_kind: gen.feature_kind,
            dirichlet_alpha: gen.dirichlet_alpha,
            reward_spread: gen.reward_spread,
            reward_mode: gen.reward_mode,
        }
    }

    pub fn to_generator(&self) -> FamilyGenerator {
        FamilyGenerator {
            seed: self.seed,
            num_states: self.num_states,
            num_actions: self.num_actions,
            horizon: self.horizon,
            dim: if self.feature_kind == FeatureKind::TabularOneHot {
                self.num_states * self.num_actions
            } else {
                self.dim
            },
            feature_kind: self.feature_kind,
            context_law: ContextLaw::IidRandom,
            dirichlet_alpha: self.dirichlet_alpha,
            reward_spread: self.reward_spread,
            reward_mode: self.reward_mode,
        }
    }
}

/// Where the context population comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FamilySource {
    /// `population_size` random contexts; redrawn per repetition unless fixed.
    Generator {
        generator: GeneratorSpec,
        population_size: usize,
        fixed_population: bool,
    },
    /// The two-context bandit counterexample on the `[0, 1]` reward scale.
    Figure1 { epsilon: f64 },
    SpecFile { path: String },
    Inline { spec: EnvSpec },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BehaviorChoice {
    Uniform,
    /// Behaviors shipped with the source (the skewed counterexample
    /// behaviors, or those listed in a spec file).
    Native,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextSampling {
    /// i.i.d. by population weight.
    Iid,
    /// Training context `i` is population member `i mod |population|`.
    Cycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    Perm,
    Pppo,
    Pevi,
    PermMv,
    PppoMv,
}

impl LearnerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerKind::Perm => "perm",
            LearnerKind::Pppo => "pppo",
            LearnerKind::Pevi => "pevi",
            LearnerKind::PermMv => "perm-mv",
            LearnerKind::PppoMv => "pppo-mv",
        }
    }

    pub fn is_grouped(&self) -> bool {
        matches!(self, LearnerKind::PermMv | LearnerKind::PppoMv)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "perm" => Ok(LearnerKind::Perm),
            "pppo" => Ok(LearnerKind::Pppo),
            "pevi" => Ok(LearnerKind::Pevi),
            "perm-mv" => Ok(LearnerKind::PermMv),
            "pppo-mv" => Ok(LearnerKind::PppoMv),
            other => Err(invalid(format!("unknown learner {other:?}"))),
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ClassChoice {
    /// All deterministic policies within the budget, else a softmax grid.
    Default { fallback_size: usize },
    AllDeterministic,
    SoftmaxGrid { size: usize },
    /// Flattened `[h][x][a]` probabilities per member.
    Explicit { members: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMode {
    /// Ridge regression with elliptical bonus.
    Linear,
    /// True Bellman backups with zero uncertainty (PERM only).
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlProxyMode {
    /// `log N` = log of the class size.
    FiniteClass,
    /// `log N = |A||S|H log(1 + |A| H n)`.
    Covering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: FamilySource,
    pub behavior: BehaviorChoice,
    pub sampling: ContextSampling,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub m: usize,
    pub learners: Vec<LearnerKind>,
    /// `delta` here is the learners' overall confidence level.
    pub ppe: LinearPpeConfig,
    pub class: ClassChoice,
    pub class_budget: u64,
    pub pppo_alpha: Option<f64>,
    pub seed: u64,
    pub repetitions: usize,
    pub zsg_budget: u64,
    pub oracle: OracleMode,
    pub sl_proxy: SlProxyMode,
    /// Record measured wall time; off by default so output is reproducible.
    pub timing: bool,
}

impl ExperimentConfig {
    pub fn new(source: FamilySource, n: usize, k: usize, learners: Vec<LearnerKind>) -> Self {
        Self {
            source,
            behavior: BehaviorChoice::Uniform,
            sampling: ContextSampling::Iid,
            n,
            k,
            m: n,
            learners,
            ppe: LinearPpeConfig::default(),
            class: ClassChoice::Default { fallback_size: 64 },
            class_budget: 1 << 16,
            pppo_alpha: None,
            seed: 0,
            repetitions: 1,
            zsg_budget: 1 << 20,
            oracle: OracleMode::Linear,
            sl_proxy: SlProxyMode::FiniteClass,
            timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("n must be at least 1"));
        }
        if self.repetitions == 0 {
            return Err(invalid("repetitions must be at least 1"));
        }
        if self.learners.is_empty() {
            return Err(invalid("at least one learner is required"));
        }
        if self.learners.iter().any(|l| l.is_grouped()) && (self.m == 0 || !self.n.is_multiple_of(self.m)) {
            return Err(invalid(format!("m={} must divide n={}", self.m, self.n)));
        }
        if self.oracle == OracleMode::Exact && self.learners.iter().any(|l| *l != LearnerKind::Perm) {
            return Err(invalid("the exact oracle mode supports PERM only"));
        }
        self.ppe.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub learner: LearnerKind,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub m: usize,
    pub seed: u64,
    pub subopt: f64,
    pub sl_proxy: f64,
    pub rl_proxy: f64,
    pub wall_time: f64,
}

/// One learner run: the metrics row plus the policy and diagnostics.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: MetricsRecord,
    pub policy: MarkovPolicy,
    /// Exact zero-shot value of every PPPO iterate.
    pub value_trace: Option<Vec<f64>>,
    /// Measured context-grouping approximation gap.
    pub grouping_gap: Option<f64>,
    pub optimum: ZsgOptimum,
    /// Population used for scoring.
    pub population: ContextFamily,
}

struct Population {
    family: ContextFamily,
    behaviors: Vec<MarkovPolicy>,
}

fn load_source(config: &ExperimentConfig) -> Result<Option<EnvSpec>> {
    match &config.source {
        FamilySource::SpecFile { path } => Ok(Some(read_env_spec(&std::fs::read_to_string(path)?)?)),
        FamilySource::Inline { spec } => Ok(Some(spec.clone())),
        _ => Ok(None),
    }
}

fn population(config: &ExperimentConfig, spec: Option<&EnvSpec>, rep_seed: u64) -> Result<Population> {
    let (family, native) = match &config.source {
        FamilySource::Generator {
            generator,
            population_size,
            fixed_population,
        } => {
            let seed = if *fixed_population {
                generator.seed
            } else {
                derive_seed(generator.seed, rep_seed, 0x0909)
            };
            (sample_contexts(&generator.to_generator().with_seed(seed), *population_size)?, None)
        }
        FamilySource::Figure1 { epsilon } => {
            let f1 = figure1_instance(*epsilon)?;
            (f1.family, Some(f1.behaviors))
        }
        FamilySource::SpecFile { .. } | FamilySource::Inline { .. } => {
            let spec = spec.ok_or_else(|| invalid("environment spec was not loaded"))?;
            (spec.to_family()?, spec.to_behaviors()?)
        }
    };
    let behaviors = match config.behavior {
        BehaviorChoice::Uniform => uniform_behaviors(&family),
        BehaviorChoice::Native => native.ok_or_else(|| invalid("the family source ships no behaviors"))?,
    };
    if behaviors.len() != family.len() {
        return Err(invalid("one behavior per population member is required"));
    }
    Ok(Population { family, behaviors })
}

fn build_class(config: &ExperimentConfig, hz: usize, s: usize, a: usize) -> Result<PolicyClass> {
    let budget = config.class_budget as u128;
    match &config.class {
        ClassChoice::Default { fallback_size } => {
            PolicyClass::default_for(hz, s, a, budget, *fallback_size, config.seed)
        }
        ClassChoice::AllDeterministic => PolicyClass::all_deterministic(hz, s, a, budget),
        ClassChoice::SoftmaxGrid { size } => PolicyClass::softmax_grid(hz, s, a, *size, config.seed),
        ClassChoice::Explicit { members } => PolicyClass::explicit(
            members
                .iter()
                .map(|p| MarkovPolicy::from_rows(hz, s, a, p.clone()))
                .collect::<Result<Vec<_>>>()?,
        ),
    }
}

fn sl_proxy_perm(mode: SlProxyMode, class_size: usize, delta: f64, n: usize, hz: usize, s: usize, a: usize) -> f64 {
    let log_n = match mode {
        SlProxyMode::FiniteClass => (class_size as f64).ln(),
        SlProxyMode::Covering => (a * s * hz) as f64 * (1.0 + (a * hz * n) as f64).ln(),
    };
    ((6.0 / delta).ln() + log_n).max(0.0).sqrt() / (n as f64).sqrt()
}

fn sl_proxy_pppo(hz: usize, a: usize, n: usize) -> f64 {
    hz as f64 * ((a as f64).ln() / n as f64).sqrt()
}

/// `(2/n) Σ_i Σ_h E_{i, π*}[Γ_{i,h}]` with exact occupancies.
fn rl_proxy(models: &[LinearMdp], uncertainties: &[Vec<Vec<f64>>], optimal: &MarkovPolicy) -> Result<f64> {
    let mut total = 0.0;
    for (m, gammas) in models.iter().zip(uncertainties) {
        let occ = occupancy(m, optimal)?;
        for (h, g) in gammas.iter().enumerate() {
            total += occ.expectation(h, g);
        }
    }
    Ok(2.0 * total / models.len() as f64)
}

/// Average MDP of each consecutive group of `size` training contexts.
fn group_models(models: &[LinearMdp], behaviors: &[MarkovPolicy], size: usize) -> Result<Vec<LinearMdp>> {
    models
        .chunks(size)
        .zip(behaviors.chunks(size))
        .map(|(cs, bs)| Ok(average_mdp(&ContextFamily::uniform(cs.to_vec())?, bs)?.model))
        .collect()
}

fn run_repetition(config: &ExperimentConfig, spec: Option<&EnvSpec>, rep: usize) -> Result<Vec<RunOutcome>> {
    let rep_seed = derive_seed(config.seed, rep as u64, 0);
    let pop = population(config, spec, rep_seed)?;
    let first = pop.family.first();
    let (hz, s, a, x1) = (first.horizon(), first.num_states(), first.num_actions(), first.initial_state());
    let features = first.features().clone();
    if config.learners.iter().any(|l| matches!(l, LearnerKind::Pppo | LearnerKind::PppoMv)) && config.k < hz {
        return Err(invalid(format!("PPPO needs K >= H, got K={} and H={hz}", config.k)));
    }
    let mut rng = rng_for(rep_seed, 0x5a, 0);
    let picks: Vec<usize> = (0..config.n)
        .map(|i| match config.sampling {
            ContextSampling::Iid => sample_index(pop.family.weights(), &mut rng),
            ContextSampling::Cycle => i % pop.family.len(),
        })
        .collect();
    let models: Vec<LinearMdp> = picks.iter().map(|p| pop.family.contexts()[*p].clone()).collect();
    let behaviors: Vec<MarkovPolicy> = picks.iter().map(|p| pop.behaviors[*p].clone()).collect();
    let datasets = models
        .par_iter()
        .zip(behaviors.par_iter())
        .enumerate()
        .map(|(i, (m, b))| collect_dataset(m, b, config.k, derive_seed(rep_seed, 1, i as u64), i))
        .collect::<Result<Vec<_>>>()?;
    let optimum = zsg_optimum(&pop.family, config.zsg_budget as u128, rep_seed);
    let delta = config.ppe.delta;
    let mut out = Vec::with_capacity(config.learners.len());
    for learner in &config.learners {
        let started = Instant::now();
        let mut value_trace = None;
        let mut gap = None;
        let (policy, sl, rl) = match learner {
            LearnerKind::Perm | LearnerKind::PermMv => {
                let class = build_class(config, hz, s, a)?;
                let (train_models, train_data, count) = if *learner == LearnerKind::PermMv {
                    let g = group_contexts(&datasets, config.m)?;
                    (group_models(&models, &behaviors, g.group_size)?, g.groups, config.m)
                } else {
                    (models.clone(), datasets.clone(), config.n)
                };
                let res = match config.oracle {
                    OracleMode::Linear => perm(
                        &train_data,
                        &class,
                        delta,
                        &config.ppe,
                        &features,
                        x1,
                        DEFAULT_PERM_BUDGET,
                    )?,
                    OracleMode::Exact => {
                        let owned: Vec<_> = train_models.iter().map(exact_oracles).collect();
                        let refs: Vec<Vec<&dyn StageOracle>> = owned
                            .iter()
                            .map(|os| os.iter().map(|o| o as &dyn StageOracle).collect())
                            .collect();
                        perm_with_oracles(&refs, &class, x1)?
                    }
                };
                let sl = sl_proxy_perm(config.sl_proxy, class.size(), delta, count, hz, s, a);
                let rl = rl_proxy(&train_models, &res.uncertainties, &optimum.policy)?;
                if *learner == LearnerKind::PermMv {
                    gap = Some(grouping_gap(&models, &behaviors, config.m, &res.policy)?);
                }
                (res.policy, sl, rl)
            }
            LearnerKind::Pppo | LearnerKind::PppoMv => {
                let cfg = PppoConfig {
                    alpha: config.pppo_alpha,
                    seed: derive_seed(rep_seed, 2, 0),
                    delta,
                };
                let (train_models, train_data, count) = if *learner == LearnerKind::PppoMv {
                    let g = group_contexts(&datasets, config.m)?;
                    (group_models(&models, &behaviors, g.group_size)?, g.groups, config.m)
                } else {
                    (models.clone(), datasets.clone(), config.n)
                };
                let res = pppo(&train_data, &cfg, &config.ppe, &features, x1)?;
                value_trace = Some(
                    res.iterates
                        .iter()
                        .map(|p| family_value(&pop.family, p))
                        .collect::<Result<Vec<_>>>()?,
                );
                let rl = rl_proxy(&train_models, &res.uncertainties, &optimum.policy)?;
                if *learner == LearnerKind::PppoMv {
                    gap = Some(grouping_gap(&models, &behaviors, config.m, &res.policy)?);
                }
                (res.policy, sl_proxy_pppo(hz, a, count), rl)
            }
            LearnerKind::Pevi => {
                let merged = ContextDataset::merge(0, &datasets)?;
                let res = pevi_merged(&merged, delta, &config.ppe, &features)?;
                let avg = average_mdp(&ContextFamily::uniform(models.clone())?, &behaviors)?.model;
                let rl = rl_proxy(&[avg], &[res.uncertainties], &optimum.policy)?;
                (res.policy, 0.0, rl)
            }
        };
        let subopt = subopt_against(&optimum, &pop.family, &policy)?;
        let wall_time = if config.timing {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        out.push(RunOutcome {
            record: MetricsRecord {
                learner: *learner,
                n: config.n,
                k: config.k,
                m: if learner.is_grouped() { config.m } else { config.n },
                seed: rep_seed,
                subopt,
                sl_proxy: sl,
                rl_proxy: rl,
                wall_time,
            },
            policy,
            value_trace,
            grouping_gap: gap,
            optimum: optimum.clone(),
            population: pop.family.clone(),
        });
    }
    Ok(out)
}

/// Runs every repetition (concurrently) and returns outcomes ordered by
/// repetition, then by learner order in the config.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunOutcome>> {
    config.validate()?;
    let spec = load_source(config)?;
    let per_rep = (0..config.repetitions)
        .into_par_iter()
        .map(|r| run_repetition(config, spec.as_ref(), r))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_rep.into_iter().flatten().collect())
}

pub fn records(outcomes: &[RunOutcome]) -> Vec<MetricsRecord> {
    outcomes.iter().map(|o| o.record.clone()).collect()
}

pub fn write_metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_COLUMNS);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.learner, r.n, r.k, r.m, r.seed, r.subopt, r.sl_proxy, r.rl_proxy, r.wall_time
        );
    }
    out
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_COLUMNS => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {CSV_COLUMNS}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Parse {
            line: i + 1,
            message: format!("bad {what}"),
        };
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 9 {
            return Err(bad("column count"));
        }
        out.push(MetricsRecord {
            learner: LearnerKind::parse(c[0]).map_err(|_| bad("learner"))?,
            n: c[1].parse().map_err(|_| bad("n"))?,
            k: c[2].parse().map_err(|_| bad("K"))?,
            m: c[3].parse().map_err(|_| bad("m"))?,
            seed: c[4].parse().map_err(|_| bad("seed"))?,
            subopt: c[5].parse().map_err(|_| bad("subopt"))?,
            sl_proxy: c[6].parse().map_err(|_| bad("sl_proxy"))?,
            rl_proxy: c[7].parse().map_err(|_| bad("rl_proxy"))?,
            wall_time: c[8].parse().map_err(|_| bad("wall_time"))?,
        });
    }
    Ok(out)
}

/// How the plateau is removed before the log-log fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AsymptoteMode {
    /// Subtract the smallest cell mean along the axis; that cell drops out.
    MinObserved,
    /// Fit the raw means.
    Zero,
}

impl fmt::Display for AsymptoteMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AsymptoteMode::MinObserved => "min-observed",
            AsymptoteMode::Zero => "zero",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub learner: LearnerKind,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub reps: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    N,
    K,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::N => "n",
            Axis::K => "K",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub learner: LearnerKind,
    pub axis: Axis,
    /// Value of the other axis the fit is taken at.
    pub at: usize,
    pub slope: Option<f64>,
    pub asymptote: f64,
    pub mode: AsymptoteMode,
    pub points: usize,
}

/// Per-cell mean and standard error of SubOpt, in order of first appearance.
pub fn cell_summaries(records: &[MetricsRecord]) -> Vec<CellSummary> {
    let mut order: Vec<(LearnerKind, usize, usize, usize)> = Vec::new();
    let mut groups: BTreeMap<(LearnerKind, usize, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        let key = (r.learner, r.n, r.k, r.m);
        if !groups.contains_key(&key) {
            order.push(key);
        }
        groups.entry(key).or_default().push(r.subopt);
    }
    order
        .into_iter()
        .map(|key| {
            let xs = &groups[&key];
            let reps = xs.len();
            let mean = xs.iter().sum::<f64>() / reps as f64;
            let stderr = if reps > 1 {
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
                (var / reps as f64).sqrt()
            } else {
                0.0
            };
            CellSummary {
                learner: key.0,
                n: key.1,
                k: key.2,
                m: key.3,
                reps,
                mean,
                stderr,
            }
        })
        .collect()
}

/// Least-squares slope of `log(y - asymptote)` against `log x`; points with
/// a non-positive shifted value are dropped. `None` below two points.
pub fn fit_log_slope(points: &[(f64, f64)], mode: AsymptoteMode) -> (Option<f64>, f64, usize) {
    let asymptote = match mode {
        AsymptoteMode::MinObserved => points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        AsymptoteMode::Zero => 0.0,
    };
    let used: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && y - asymptote > 0.0)
        .map(|(x, y)| (x.ln(), (y - asymptote).ln()))
        .collect();
    let asymptote = if asymptote.is_finite() { asymptote } else { 0.0 };
    if used.len() < 2 {
        return (None, asymptote, used.len());
    }
    let k = used.len() as f64;
    let mx = used.iter().map(|p| p.0).sum::<f64>() / k;
    let my = used.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = used.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return (None, asymptote, used.len());
    }
    let sxy: f64 = used.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (Some(sxy / sxx), asymptote, used.len())
}

/// Slope along `n` at the largest `K`, and along `K` at the largest `n`, for
/// every learner present. Only axes with at least two distinct values are fit.
pub fn slope_fits(cells: &[CellSummary], mode: AsymptoteMode) -> Vec<SlopeFit> {
    let mut learners: Vec<LearnerKind> = Vec::new();
    for c in cells {
        if !learners.contains(&c.learner) {
            learners.push(c.learner);
        }
    }
    let mut out = Vec::new();
    for l in learners {
        let mine: Vec<&CellSummary> = cells.iter().filter(|c| c.learner == l).collect();
        let max_k = mine.iter().map(|c| c.k).max().unwrap_or(0);
        let max_n = mine.iter().map(|c| c.n).max().unwrap_or(0);
        for (axis, at) in [(Axis::N, max_k), (Axis::K, max_n)] {
            let mut pts: Vec<(f64, f64)> = mine
                .iter()
                .filter(|c| match axis {
                    Axis::N => c.k == at,
                    Axis::K => c.n == at,
                })
                .map(|c| {
                    let x = match axis {
                        Axis::N => c.n,
                        Axis::K => c.k,
                    };
                    (x as f64, c.mean)
                })
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            pts.dedup_by(|a, b| a.0 == b.0);
            if pts.len() < 2 {
                continue;
            }
            let (slope, asymptote, points) = fit_log_slope(&pts, mode);
            out.push(SlopeFit {
                learner: l,
                axis,
                at,
                slope,
                asymptote,
                mode,
                points,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub n_values: Vec<usize>,
    #[serde(rename = "K_values")]
    pub k_values: Vec<usize>,
    pub asymptote: AsymptoteMode,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub records: Vec<MetricsRecord>,
    pub cells: Vec<CellSummary>,
    pub slopes: Vec<SlopeFit>,
}

/// Runs the base config on every `(n, K)` cell, `n` outer, `K` inner.
/// Cells share repetition seeds.
pub fn sweep(config: &SweepConfig) -> Result<SweepOutput> {
    if config.n_values.is_empty() || config.k_values.is_empty() {
        return Err(invalid("sweep grid must be nonempty"));
    }
    let mut all = Vec::new();
    for &n in &config.n_values {
        for &k in &config.k_values {
            let mut cfg = config.base.clone();
            cfg.n = n;
            cfg.k = k;
            if !cfg.learners.iter().any(|l| l.is_grouped()) {
                cfg.m = n;
            }
            all.extend(records(&run_experiment(&cfg)?));
        }
    }
    let cells = cell_summaries(&all);
    let slopes = slope_fits(&cells, config.asymptote);
    Ok(SweepOutput {
        records: all,
        cells,
        slopes,
    })
}

pub fn write_cells_csv(cells: &[CellSummary]) -> String {
    let mut out = String::from("learner,n,K,m,reps,mean_subopt,stderr_subopt\n");
    for c in cells {
        let _ = writeln!(out, "{},{},{},{},{},{},{}", c.learner, c.n, c.k, c.m, c.reps, c.mean, c.stderr);
    }
    out
}

pub fn write_slopes_csv(slopes: &[SlopeFit]) -> String {
    let mut out = String::from("learner,axis,at,slope,asymptote,asymptote_mode,points\n");
    for s in slopes {
        let slope = s.slope.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.learner, s.axis, s.at, slope, s.asymptote, s.mode, s.points
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionRow {
    pub record: MetricsRecord,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    pub rows: Vec<DecompositionRow>,
    pub slack: f64,
    pub violation_rate: f64,
}

/// Checks `subopt <= sl_proxy + rl_proxy + slack` for every record.
pub fn decomposition_report(records: &[MetricsRecord], slack: f64) -> DecompositionReport {
    let rows: Vec<DecompositionRow> = records
        .iter()
        .map(|r| {
            let bound = r.sl_proxy + r.rl_proxy;
            DecompositionRow {
                record: r.clone(),
                bound,
                holds: r.subopt <= bound + slack,
            }
        })
        .collect();
    let violations = rows.iter().filter(|r| !r.holds).count();
    let violation_rate = if rows.is_empty() {
        0.0
    } else {
        violations as f64 / rows.len() as f64
    };
    DecompositionReport {
        rows,
        slack,
        violation_rate,
    }
}

impl DecompositionReport {
    pub fn to_table(&self) -> String {
        let mut out = String::from("learner,n,K,m,seed,subopt,sl_proxy,rl_proxy,bound,holds\n");
        for row in &self.rows {
            let r = &row.record;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.learner, r.n, r.k, r.m, r.seed, r.subopt, r.sl_proxy, r.rl_proxy, row.bound, row.holds
            );
        }
        let _ = writeln!(out, "# slack={} violation_rate={}", self.slack, self.violation_rate);
        out
    }
}

/// β calibration on `held_out` fresh population draws of the config's
/// source, evaluating the uniform policy under the configured behaviors.
pub fn calibrate_for(
    config: &ExperimentConfig,
    held_out: usize,
    redraws: usize,
    exponents: std::ops::RangeInclusive<i32>,
) -> Result<CalibrationReport> {
    let spec = load_source(config)?;
    let mut models = Vec::new();
    let mut behaviors = Vec::new();
    for j in 0..held_out.max(1) {
        let pop = population(config, spec.as_ref(), derive_seed(config.seed, 0xca1, j as u64))?;
        let pick = j % pop.family.len();
        models.push(pop.family.contexts()[pick].clone());
        behaviors.push(pop.behaviors[pick].clone());
    }
    let first = &models[0];
    let pi = MarkovPolicy::uniform(first.horizon(), first.num_states(), first.num_actions());
    calibrate_beta(
        &models,
        &behaviors,
        &pi,
        &config.ppe,
        config.k,
        redraws,
        exponents,
        derive_seed(config.seed, 0xca1, u64::MAX),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn figure1_config(learners: Vec<LearnerKind>) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(FamilySource::Figure1 { epsilon: 0.1 }, 2, 2000, learners);
        cfg.sampling = ContextSampling::Cycle;
        cfg.repetitions = 3;
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn csv_has_exact_columns_and_round_trips() {
        let cfg = figure1_config(vec![LearnerKind::Perm, LearnerKind::Pevi]);
        let recs = records(&run_experiment(&cfg).unwrap());
        let text = write_metrics_csv(&recs);
        assert!(text.starts_with("learner,n,K,m,seed,subopt,sl_proxy,rl_proxy,wall_time\n"));
        assert_eq!(read_metrics_csv(&text).unwrap(), recs);
        assert_eq!(recs.len(), 6);
        assert!(recs.iter().all(|r| r.subopt >= -1e-9 && r.wall_time == 0.0));
    }

    #[test]
    fn runs_are_byte_identical() {
        let cfg = figure1_config(vec![LearnerKind::Perm, LearnerKind::Pppo, LearnerKind::Pevi]);
        let a = write_metrics_csv(&records(&run_experiment(&cfg).unwrap()));
        let b = write_metrics_csv(&records(&run_experiment(&cfg).unwrap()));
        assert_eq!(a, b);
    }

    #[test]
    fn grouped_learners_need_divisible_m() {
        let mut cfg = figure1_config(vec![LearnerKind::PermMv]);
        cfg.n = 4;
        cfg.m = 3;
        assert!(cfg.validate().is_err());
        cfg.m = 2;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn single_cell_sweep_has_no_slopes() {
        let out = sweep(&SweepConfig {
            base: figure1_config(vec![LearnerKind::Perm]),
            n_values: vec![2],
            k_values: vec![500],
            asymptote: AsymptoteMode::MinObserved,
        })
        .unwrap();
        assert_eq!(out.cells.len(), 1);
        assert!(out.slopes.is_empty());
        assert_eq!(write_slopes_csv(&out.slopes).lines().count(), 1);
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let pts: Vec<(f64, f64)> = [4.0, 16.0, 64.0, 256.0].iter().map(|x: &f64| (*x, 3.0 * x.powf(-0.5))).collect();
        let (s, a, used) = fit_log_slope(&pts, AsymptoteMode::Zero);
        assert!((s.unwrap() + 0.5).abs() < 1e-12);
        assert_eq!((a, used), (0.0, 4));
        let (s, a, used) = fit_log_slope(&pts, AsymptoteMode::MinObserved);
        assert_eq!(used, 3);
        assert!((a - 3.0 / 16.0).abs() < 1e-15);
        assert!(s.unwrap() < -0.5);
    }

    #[test]
    fn decomposition_counts_violations() {
        let mk = |subopt: f64| MetricsRecord {
            learner: LearnerKind::Perm,
            n: 1,
            k: 1,
            m: 1,
            seed: 0,
            subopt,
            sl_proxy: 0.1,
            rl_proxy: 0.1,
            wall_time: 0.0,
        };
        let rep = decomposition_report(&[mk(0.1), mk(0.26), mk(0.24)], 0.05);
        assert!((rep.violation_rate - 1.0 / 3.0).abs() < 1e-15);
    }
}
