//! Pessimistic policy evaluation.
//!
//! A stage oracle maps a test function `V` over next states to an empirical
//! Bellman application `(B̂V)(x, a)` and an uncertainty `Γ(x, a) >= 0`. The
//! backward loop clips `B̂V - Γ` into `[0, H - h]` and averages under the
//! evaluated policy. The linear oracle is ridge regression on the stage's
//! tuples with the elliptical bonus `β·||phi||_{Λ^{-1}}`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::envgen::{collect_dataset, derive_seed};
use crate::error::{invalid, Error, Result};
use crate::exact::{bellman_backup, exact_values};
use crate::model::{FeatureMap, LinearMdp, MarkovPolicy, StageDataset};

/// Slack used by the audits when comparing floating-point bounds.
pub const AUDIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearPpeConfig {
    /// Ridge regularization `λ`.
    pub lambda: f64,
    /// Constant `c` in `β = c·d·H·sqrt(log(2dHK/δ))`.
    pub beta_constant: f64,
    /// Confidence level handed to the oracle.
    pub delta: f64,
}

impl Default for LinearPpeConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            beta_constant: 1.0,
            delta: 0.1,
        }
    }
}

impl LinearPpeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(invalid("lambda must be positive"));
        }
        if !(self.beta_constant > 0.0) {
            return Err(invalid("beta_constant must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn with_delta(self, delta: f64) -> Self {
        Self { delta, ..self }
    }
}

/// `c · d · H · sqrt(log(2 d H K / δ))`.
pub fn beta_schedule(config: &LinearPpeConfig, dim: usize, horizon: usize, k: usize) -> f64 {
    let (d, h, k) = (dim as f64, horizon as f64, k.max(1) as f64);
    config.beta_constant * d * h * (2.0 * d * h * k / config.delta).ln().sqrt()
}

/// Tables are flattened by `x·|A| + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub applied_bellman: Vec<f64>,
    pub uncertainty: Vec<f64>,
}

/// One stage of the pessimistic evaluation loop.
pub trait StageOracle {
    fn apply(&self, test_function: &[f64]) -> OracleOutput;
}

impl<F> StageOracle for F
where
    F: Fn(&[f64]) -> OracleOutput,
{
    fn apply(&self, test_function: &[f64]) -> OracleOutput {
        self(test_function)
    }
}

/// Ridge-regression oracle for one stage of one dataset.
///
/// Sufficient statistics are aggregated per `(x, a)` pair, so each
/// application costs `O(|S|²|A| + d²)` regardless of the dataset size.
#[derive(Debug, Clone)]
pub struct LinearOracle {
    num_states: usize,
    num_actions: usize,
    features: FeatureMap,
    lambda_matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    reward_sums: Vec<f64>,
    // [pair][x']
    next_counts: Vec<f64>,
    visited: Vec<usize>,
    gamma: Vec<f64>,
    beta: f64,
}

impl LinearOracle {
    pub fn new(stage: &StageDataset, features: &FeatureMap, lambda: f64, beta: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(invalid("lambda must be positive"));
        }
        let (s, a, d) = (features.num_states(), features.num_actions(), features.dim());
        let pairs = s * a;
        let mut counts = vec![0usize; pairs];
        let mut reward_sums = vec![0.0; pairs];
        let mut next_counts = vec![0.0; pairs * s];
        for t in &stage.tuples {
            if t.state >= s || t.action >= a || t.next_state >= s {
                return Err(invalid(format!("tuple {t:?} out of range for |S|={s}, |A|={a}")));
            }
            let p = t.state * a + t.action;
            counts[p] += 1;
            reward_sums[p] += t.reward;
            next_counts[p * s + t.next_state] += 1.0;
        }
        let mut lambda_matrix = DMatrix::<f64>::identity(d, d) * lambda;
        for x in 0..s {
            for act in 0..a {
                let n = counts[x * a + act];
                if n == 0 {
                    continue;
                }
                let phi = features.phi(x, act);
                for i in 0..d {
                    if phi[i] == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        lambda_matrix[(i, j)] += n as f64 * phi[i] * phi[j];
                    }
                }
            }
        }
        let chol = Cholesky::new(lambda_matrix.clone())
            .ok_or_else(|| Error::Contract("ridge Gram matrix is not positive definite".into()))?;
        let mut gamma = Vec::with_capacity(pairs);
        for x in 0..s {
            for act in 0..a {
                let phi = features.phi_vector(x, act);
                let solved = chol.solve(&phi);
                gamma.push(beta * phi.dot(&solved).max(0.0).sqrt());
            }
        }
        let visited = (0..pairs).filter(|p| counts[*p] > 0).collect();
        Ok(Self {
            num_states: s,
            num_actions: a,
            features: features.clone(),
            lambda_matrix,
            chol,
            reward_sums,
            next_counts,
            visited,
            gamma,
            beta,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `Λ = sum phi phi^T + λI`.
    pub fn lambda_matrix(&self) -> &DMatrix<f64> {
        &self.lambda_matrix
    }

    /// `Γ(x, a)`; independent of the test function.
    pub fn uncertainty(&self) -> &[f64] {
        &self.gamma
    }

    /// Ridge weights for regression targets `r + V(x')`.
    pub fn weights(&self, test_function: &[f64]) -> DVector<f64> {
        let s = self.num_states;
        let mut rhs = DVector::zeros(self.features.dim());
        for &p in &self.visited {
            let (x, act) = (p / self.num_actions, p % self.num_actions);
            let counts = &self.next_counts[p * s..(p + 1) * s];
            let target: f64 = self.reward_sums[p]
                + counts
                    .iter()
                    .zip(test_function)
                    .filter(|(c, _)| **c > 0.0)
                    .map(|(c, v)| c * v)
                    .sum::<f64>();
            for (r, f) in rhs.iter_mut().zip(self.features.phi(x, act)) {
                *r += f * target;
            }
        }
        self.chol.solve(&rhs)
    }

    pub fn fit(&self, test_function: &[f64]) -> (DVector<f64>, OracleOutput) {
        let w = self.weights(test_function);
        let mut applied = Vec::with_capacity(self.num_states * self.num_actions);
        for x in 0..self.num_states {
            for act in 0..self.num_actions {
                applied.push(self.features.phi(x, act).iter().zip(w.iter()).map(|(f, wj)| f * wj).sum());
            }
        }
        (
            w,
            OracleOutput {
                applied_bellman: applied,
                uncertainty: self.gamma.clone(),
            },
        )
    }
}

impl StageOracle for LinearOracle {
    fn apply(&self, test_function: &[f64]) -> OracleOutput {
        self.fit(test_function).1
    }
}

/// True Bellman backup of a known model with zero uncertainty.
#[derive(Debug, Clone, Copy)]
pub struct ExactOracle<'a> {
    pub model: &'a LinearMdp,
    pub stage: usize,
}

impl StageOracle for ExactOracle<'_> {
    fn apply(&self, test_function: &[f64]) -> OracleOutput {
        let applied_bellman = bellman_backup(self.model, self.stage, test_function);
        let uncertainty = vec![0.0; applied_bellman.len()];
        OracleOutput {
            applied_bellman,
            uncertainty,
        }
    }
}

pub fn exact_oracles(model: &LinearMdp) -> Vec<ExactOracle<'_>> {
    (0..model.horizon()).map(|stage| ExactOracle { model, stage }).collect()
}

/// Ridge weights, Gram matrix and oracle output for one stage.
#[derive(Debug, Clone)]
pub struct RidgeFit {
    pub w: DVector<f64>,
    pub lambda_matrix: DMatrix<f64>,
    pub output: OracleOutput,
}

pub fn linear_oracle_fit(
    stage: &StageDataset,
    test_function: &[f64],
    lambda: f64,
    beta: f64,
    features: &FeatureMap,
) -> Result<RidgeFit> {
    if test_function.len() != features.num_states() {
        return Err(invalid("test function must have one entry per state"));
    }
    let oracle = LinearOracle::new(stage, features, lambda, beta)?;
    let (w, output) = oracle.fit(test_function);
    Ok(RidgeFit {
        w,
        lambda_matrix: oracle.lambda_matrix().clone(),
        output,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageEstimate {
    /// `V̂_h(x)`
    pub v: Vec<f64>,
    /// `Q̂_h(x, a)`, flattened
    pub q: Vec<f64>,
    /// `Γ_h(x, a)`, flattened
    pub gamma: Vec<f64>,
    /// `(B̂_h V̂_{h+1})(x, a)`, flattened
    pub bellman_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PessimisticEstimate {
    pub stages: Vec<StageEstimate>,
    /// `(ŵ_h, Λ_h)` per stage when produced by the linear instantiation.
    pub fits: Option<Vec<(DVector<f64>, DMatrix<f64>)>>,
    num_actions: usize,
}

impl PessimisticEstimate {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn q(&self, h: usize, x: usize, a: usize) -> f64 {
        self.stages[h].q[x * self.num_actions + a]
    }

    /// `V̂_h`, with `V̂_H ≡ 0`.
    pub fn values(&self, h: usize) -> Vec<f64> {
        match self.stages.get(h) {
            Some(s) => s.v.clone(),
            None => vec![0.0; self.stages[0].v.len()],
        }
    }

    pub fn initial_value(&self, x1: usize) -> f64 {
        self.stages[0].v[x1]
    }
}

fn clip_q(bellman_hat: &[f64], gamma: &[f64], ceiling: f64) -> Vec<f64> {
    bellman_hat
        .iter()
        .zip(gamma)
        .map(|(b, g)| (b - g).min(ceiling).max(0.0))
        .collect()
}

fn average_under(policy: &MarkovPolicy, h: usize, q: &[f64]) -> Vec<f64> {
    let a = policy.num_actions();
    (0..policy.num_states())
        .map(|x| q[x * a..(x + 1) * a].iter().zip(policy.row(h, x)).map(|(qv, p)| qv * p).sum())
        .collect()
}

/// Backward pessimistic evaluation with pluggable stage oracles.
pub fn generic_ppe(oracles: &[&dyn StageOracle], policy: &MarkovPolicy) -> Result<PessimisticEstimate> {
    let hz = oracles.len();
    if hz != policy.horizon() {
        return Err(invalid(format!("{hz} stage oracles for a horizon-{} policy", policy.horizon())));
    }
    let (s, a) = (policy.num_states(), policy.num_actions());
    let mut stages: Vec<StageEstimate> = Vec::with_capacity(hz);
    let mut next_v = vec![0.0; s];
    for h in (0..hz).rev() {
        let out = oracles[h].apply(&next_v);
        if out.applied_bellman.len() != s * a || out.uncertainty.len() != s * a {
            return Err(Error::Contract(format!("oracle at stage {h} returned tables of the wrong size")));
        }
        if let Some(g) = out.uncertainty.iter().find(|g| !(**g >= 0.0)) {
            return Err(Error::Contract(format!("oracle at stage {h} returned uncertainty {g}")));
        }
        let q = clip_q(&out.applied_bellman, &out.uncertainty, (hz - h) as f64);
        let v = average_under(policy, h, &q);
        next_v = v.clone();
        stages.push(StageEstimate {
            v,
            q,
            gamma: out.uncertainty,
            bellman_hat: out.applied_bellman,
        });
    }
    stages.reverse();
    Ok(PessimisticEstimate {
        stages,
        fits: None,
        num_actions: a,
    })
}

/// Per-stage linear oracles for one context's stage datasets, reusable
/// across every policy evaluated on that data.
#[derive(Debug, Clone)]
pub struct LinearPpe {
    oracles: Vec<LinearOracle>,
    beta: f64,
}

impl LinearPpe {
    /// `β` uses `K` = the largest stage dataset (at least 1).
    pub fn new(stages: &[StageDataset], features: &FeatureMap, config: &LinearPpeConfig) -> Result<Self> {
        config.validate()?;
        if stages.is_empty() {
            return Err(invalid("at least one stage dataset is required"));
        }
        let k = stages.iter().map(|s| s.tuples.len()).max().unwrap_or(0).max(1);
        let beta = beta_schedule(config, features.dim(), stages.len(), k);
        let oracles = stages
            .iter()
            .map(|st| LinearOracle::new(st, features, config.lambda, beta))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { oracles, beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn oracles(&self) -> &[LinearOracle] {
        &self.oracles
    }

    /// `Γ_h` tables, one per stage.
    pub fn uncertainties(&self) -> Vec<Vec<f64>> {
        self.oracles.iter().map(|o| o.uncertainty().to_vec()).collect()
    }

    pub fn evaluate(&self, policy: &MarkovPolicy) -> Result<PessimisticEstimate> {
        let hz = self.oracles.len();
        if hz != policy.horizon() {
            return Err(invalid(format!("{hz} stages of data for a horizon-{} policy", policy.horizon())));
        }
        let s = policy.num_states();
        let mut stages: Vec<StageEstimate> = Vec::with_capacity(hz);
        let mut fits = Vec::with_capacity(hz);
        let mut next_v = vec![0.0; s];
        for h in (0..hz).rev() {
            let (w, out) = self.oracles[h].fit(&next_v);
            let q = clip_q(&out.applied_bellman, &out.uncertainty, (hz - h) as f64);
            let v = average_under(policy, h, &q);
            next_v = v.clone();
            fits.push((w, self.oracles[h].lambda_matrix().clone()));
            stages.push(StageEstimate {
                v,
                q,
                gamma: out.uncertainty,
                bellman_hat: out.applied_bellman,
            });
        }
        stages.reverse();
        fits.reverse();
        Ok(PessimisticEstimate {
            stages,
            fits: Some(fits),
            num_actions: policy.num_actions(),
        })
    }
}

pub fn ppe_linear(
    stages: &[StageDataset],
    policy: &MarkovPolicy,
    config: &LinearPpeConfig,
    features: &FeatureMap,
) -> Result<PessimisticEstimate> {
    LinearPpe::new(stages, features, config)?.evaluate(policy)
}

/// Estimation errors `ι_h = B_h V̂_{h+1} - Q̂_h` under the true model, and
/// whether the oracle's confidence event held along the backward chain.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub iota: Vec<Vec<f64>>,
    /// `|B̂V̂ - BV̂| <= Γ` at every `(h, x, a)`.
    pub oracle_event: bool,
    /// Cells with `ι < 0`.
    pub lower_violations: Vec<(usize, usize, usize)>,
    /// Cells with `ι > 2Γ`.
    pub upper_violations: Vec<(usize, usize, usize)>,
}

impl AuditReport {
    pub fn bracket_holds(&self) -> bool {
        self.lower_violations.is_empty() && self.upper_violations.is_empty()
    }
}

pub fn estimation_error_audit(model: &LinearMdp, estimate: &PessimisticEstimate) -> Result<AuditReport> {
    let hz = model.horizon();
    if estimate.horizon() != hz {
        return Err(invalid("estimate and model horizons differ"));
    }
    let a = model.num_actions();
    let mut iota = Vec::with_capacity(hz);
    let mut oracle_event = true;
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for h in 0..hz {
        let next = estimate.values(h + 1);
        let true_backup = bellman_backup(model, h, &next);
        let st = &estimate.stages[h];
        let mut row = Vec::with_capacity(true_backup.len());
        for (i, b) in true_backup.iter().enumerate() {
            let err = (st.bellman_hat[i] - b).abs();
            if err > st.gamma[i] + AUDIT_TOL {
                oracle_event = false;
            }
            let value = b - st.q[i];
            if value < -AUDIT_TOL {
                lower.push((h, i / a, i % a));
            }
            if value > 2.0 * st.gamma[i] + AUDIT_TOL {
                upper.push((h, i / a, i % a));
            }
            row.push(value);
        }
        iota.push(row);
    }
    Ok(AuditReport {
        iota,
        oracle_event,
        lower_violations: lower,
        upper_violations: upper,
    })
}

/// `(h, x)` cells where `V̂_h(x) > V^π_h(x) + tol`.
pub fn pessimism_violations(
    model: &LinearMdp,
    estimate: &PessimisticEstimate,
    policy: &MarkovPolicy,
) -> Result<Vec<(usize, usize)>> {
    let truth = exact_values(model, policy)?;
    let mut out = Vec::new();
    for (h, st) in estimate.stages.iter().enumerate() {
        for (x, v) in st.v.iter().enumerate() {
            if *v > truth.v[h][x] + AUDIT_TOL {
                out.push((h, x));
            }
        }
    }
    Ok(out)
}

/// Outcome of one dataset redraw on a known context.
#[derive(Debug, Clone, PartialEq)]
pub struct RedrawOutcome {
    pub oracle_event: bool,
    pub pessimism_violations: usize,
    pub bracket_violations: usize,
}

/// Draws a fresh dataset of `k` trajectories and audits the linear
/// evaluation of `policy` on it.
pub fn audit_redraw(
    model: &LinearMdp,
    behavior: &MarkovPolicy,
    policy: &MarkovPolicy,
    config: &LinearPpeConfig,
    k: usize,
    seed: u64,
) -> Result<RedrawOutcome> {
    let ds = collect_dataset(model, behavior, k, seed, 0)?;
    let est = ppe_linear(&ds.stage_datasets(), policy, config, model.features())?;
    let audit = estimation_error_audit(model, &est)?;
    Ok(RedrawOutcome {
        oracle_event: audit.oracle_event,
        pessimism_violations: pessimism_violations(model, &est, policy)?.len(),
        bracket_violations: audit.lower_violations.len() + audit.upper_violations.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// Smallest grid constant reaching the target coverage, or the largest
    /// grid value if none does.
    pub beta_constant: f64,
    pub reached_target: bool,
    pub target: f64,
    /// `(c, worst coverage across the held-out contexts)` for every grid value tried.
    pub coverage: Vec<(f64, f64)>,
}

/// Picks the smallest `c = 2^e`, `e` in `exponents` (ascending), whose
/// empirical confidence-event frequency over `redraws` datasets is at least
/// `1 - δ` on every held-out context.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_beta(
    models: &[LinearMdp],
    behaviors: &[MarkovPolicy],
    policy: &MarkovPolicy,
    base: &LinearPpeConfig,
    k: usize,
    redraws: usize,
    exponents: std::ops::RangeInclusive<i32>,
    seed: u64,
) -> Result<CalibrationReport> {
    base.validate()?;
    if models.is_empty() || models.len() != behaviors.len() {
        return Err(invalid("calibration needs one behavior per held-out context"));
    }
    if redraws == 0 {
        return Err(invalid("calibration needs at least one redraw"));
    }
    let data: Vec<Vec<Vec<StageDataset>>> = models
        .iter()
        .zip(behaviors)
        .enumerate()
        .map(|(j, (m, b))| {
            (0..redraws)
                .map(|r| collect_dataset(m, b, k, derive_seed(seed, j as u64, r as u64), j).map(|d| d.stage_datasets()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let target = 1.0 - base.delta;
    let mut coverage = Vec::new();
    let mut last = None;
    for e in exponents {
        let c = 2f64.powi(e);
        let cfg = LinearPpeConfig {
            beta_constant: c,
            ..*base
        };
        let mut worst = f64::INFINITY;
        for (m, sets) in models.iter().zip(&data) {
            let mut hits = 0usize;
            for stages in sets {
                let est = ppe_linear(stages, policy, &cfg, m.features())?;
                if estimation_error_audit(m, &est)?.oracle_event {
                    hits += 1;
                }
            }
            worst = worst.min(hits as f64 / redraws as f64);
        }
        coverage.push((c, worst));
        last = Some(c);
        if worst >= target {
            return Ok(CalibrationReport {
                beta_constant: c,
                reached_target: true,
                target,
                coverage,
            });
        }
    }
    Ok(CalibrationReport {
        beta_constant: last.ok_or_else(|| invalid("empty exponent grid"))?,
        reached_target: false,
        target,
        coverage,
    })
}
