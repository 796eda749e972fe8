//! File formats: JSON environment specs, CSV dataset blocks and policy files
//! with a provenance header. Floats are written in shortest round-trip form,
//! so every write/read cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::model::{
    ContextDataset, ContextFamily, FeatureKind, FeatureMap, LinearMdp, MarkovPolicy, RewardMode, Step, Trajectory,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    /// `mu[h][i][x']`, a `d × |S|` matrix per stage.
    pub mu: Vec<Vec<Vec<f64>>>,
    /// `theta[h][i]`
    pub theta: Vec<Vec<f64>>,
}

/// A finite context family plus optional per-context behavior policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub initial_state: usize,
    pub feature_kind: FeatureKind,
    /// `phi(x, a)` rows in `x·|A| + a` order; omitted for one-hot features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub reward_mode: RewardMode,
    pub weights: Vec<f64>,
    pub contexts: Vec<ContextSpec>,
    /// Flattened `[h][x][a]` action probabilities, one per context.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behaviors: Option<Vec<Vec<f64>>>,
}

impl EnvSpec {
    pub fn from_family(family: &ContextFamily, behaviors: Option<&[MarkovPolicy]>) -> Self {
        let first = family.first();
        let f = first.features();
        let features = match f.kind() {
            FeatureKind::TabularOneHot => None,
            FeatureKind::Explicit => Some(
                (0..f.num_states())
                    .flat_map(|x| (0..f.num_actions()).map(move |a| (x, a)))
                    .map(|(x, a)| f.phi(x, a).to_vec())
                    .collect(),
            ),
        };
        let contexts = family
            .contexts()
            .iter()
            .map(|m| ContextSpec {
                mu: (0..m.horizon())
                    .map(|h| {
                        let mu = m.mu(h);
                        (0..mu.nrows()).map(|i| mu.row(i).iter().copied().collect()).collect()
                    })
                    .collect(),
                theta: (0..m.horizon()).map(|h| m.theta(h).iter().copied().collect()).collect(),
            })
            .collect();
        Self {
            horizon: first.horizon(),
            num_states: first.num_states(),
            num_actions: first.num_actions(),
            initial_state: first.initial_state(),
            feature_kind: f.kind(),
            features,
            reward_mode: first.reward_mode(),
            weights: family.weights().to_vec(),
            contexts,
            behaviors: behaviors.map(|bs| bs.iter().map(|b| b.probs().to_vec()).collect()),
        }
    }

    pub fn to_family(&self) -> Result<ContextFamily> {
        let features = Arc::new(match self.feature_kind {
            FeatureKind::TabularOneHot => FeatureMap::one_hot(self.num_states, self.num_actions)?,
            FeatureKind::Explicit => FeatureMap::explicit(
                self.num_states,
                self.num_actions,
                self.features
                    .clone()
                    .ok_or_else(|| invalid("explicit feature kind requires a features table"))?,
            )?,
        });
        let d = features.dim();
        let contexts = self
            .contexts
            .iter()
            .enumerate()
            .map(|(c, spec)| {
                if spec.mu.len() != self.horizon || spec.theta.len() != self.horizon {
                    return Err(invalid(format!("context {c} does not list {} stages", self.horizon)));
                }
                let mut mu = Vec::with_capacity(self.horizon);
                for rows in &spec.mu {
                    if rows.len() != d || rows.iter().any(|r| r.len() != self.num_states) {
                        return Err(invalid(format!("context {c}: mu must be {d} x {}", self.num_states)));
                    }
                    mu.push(DMatrix::from_fn(d, self.num_states, |i, j| rows[i][j]));
                }
                let theta = spec.theta.iter().map(|t| DVector::from_vec(t.clone())).collect();
                Ok(LinearMdp::new(features.clone(), self.horizon, self.initial_state, mu, theta)?
                    .with_reward_mode(self.reward_mode))
            })
            .collect::<Result<Vec<_>>>()?;
        ContextFamily::new(contexts, self.weights.clone())
    }

    pub fn to_behaviors(&self) -> Result<Option<Vec<MarkovPolicy>>> {
        self.behaviors
            .as_ref()
            .map(|bs| {
                bs.iter()
                    .map(|p| MarkovPolicy::from_rows(self.horizon, self.num_states, self.num_actions, p.clone()))
                    .collect()
            })
            .transpose()
    }
}

pub fn write_env_spec(spec: &EnvSpec) -> Result<String> {
    Ok(serde_json::to_string_pretty(spec)?)
}

pub fn read_env_spec(text: &str) -> Result<EnvSpec> {
    Ok(serde_json::from_str(text)?)
}

pub const DATASET_COLUMNS: &str = "trajectory_id,h,state,action,reward,next_state";

/// One block per dataset: a `dataset context_id=.. K=.. H=..` line, the
/// column header, then one row per step.
pub fn write_datasets(datasets: &[ContextDataset]) -> String {
    let mut out = String::new();
    for ds in datasets {
        let _ = writeln!(
            out,
            "dataset context_id={} K={} H={}",
            ds.context_id,
            ds.num_trajectories(),
            ds.horizon
        );
        out.push_str(DATASET_COLUMNS);
        out.push('\n');
        for (t, traj) in ds.trajectories.iter().enumerate() {
            for (h, s) in traj.steps.iter().enumerate() {
                let _ = writeln!(out, "{t},{h},{},{},{},{}", s.state, s.action, s.reward, s.next_state);
            }
        }
    }
    out
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn key_values(text: &str, line: usize) -> Result<BTreeMap<String, String>> {
    text.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| parse_err(line, format!("expected key=value, got {kv:?}")))
        })
        .collect()
}

fn field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, line: usize) -> Result<T> {
    map.get(key)
        .ok_or_else(|| parse_err(line, format!("missing {key}")))?
        .parse()
        .map_err(|_| parse_err(line, format!("bad value for {key}")))
}

fn num<T: std::str::FromStr>(cell: &str, name: &str, line: usize) -> Result<T> {
    cell.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("bad {name}: {cell:?}")))
}

pub fn read_datasets(text: &str) -> Result<Vec<ContextDataset>> {
    let mut out = Vec::new();
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();
    while let Some((ln, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let rest = line
            .strip_prefix("dataset")
            .ok_or_else(|| parse_err(ln, "expected a dataset header"))?;
        let kv = key_values(rest, ln)?;
        let (id, k, hz): (usize, usize, usize) = (field(&kv, "context_id", ln)?, field(&kv, "K", ln)?, field(&kv, "H", ln)?);
        match lines.next() {
            Some((_, l)) if l.trim() == DATASET_COLUMNS => {}
            Some((l, _)) => return Err(parse_err(l, "expected the dataset column header")),
            None => return Err(parse_err(ln, "missing column header")),
        }
        let mut trajectories = vec![Trajectory { steps: Vec::with_capacity(hz) }; k];
        for _ in 0..k * hz {
            let (l, row) = lines.next().ok_or_else(|| parse_err(ln, "dataset block ended early"))?;
            let cells: Vec<&str> = row.split(',').collect();
            if cells.len() != 6 {
                return Err(parse_err(l, format!("expected 6 columns, got {}", cells.len())));
            }
            let t: usize = num(cells[0], "trajectory_id", l)?;
            let h: usize = num(cells[1], "h", l)?;
            let traj = trajectories
                .get_mut(t)
                .ok_or_else(|| parse_err(l, format!("trajectory_id {t} >= K")))?;
            if h != traj.steps.len() {
                return Err(parse_err(l, format!("stage {h} out of order in trajectory {t}")));
            }
            traj.steps.push(Step {
                state: num(cells[2], "state", l)?,
                action: num(cells[3], "action", l)?,
                reward: num(cells[4], "reward", l)?,
                next_state: num(cells[5], "next_state", l)?,
            });
        }
        out.push(ContextDataset::new(id, hz, trajectories).map_err(|e| parse_err(ln, e.to_string()))?);
    }
    Ok(out)
}

/// Provenance written as `# key=value` lines ahead of the policy table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub entries: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(learner: &str, seed: u64, config_digest: &str) -> Self {
        let mut entries = BTreeMap::new();
        entries.insert("learner".into(), learner.into());
        entries.insert("seed".into(), seed.to_string());
        entries.insert("config_digest".into(), config_digest.into());
        Self { entries }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.entries.insert(key.into(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }
}

/// SHA-256 of the serialized configuration, hex encoded.
pub fn config_digest<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_policy(policy: &MarkovPolicy, provenance: &Provenance) -> String {
    let mut out = String::new();
    for (k, v) in &provenance.entries {
        let _ = writeln!(out, "# {k}={v}");
    }
    let _ = writeln!(
        out,
        "# shape H={} S={} A={}",
        policy.horizon(),
        policy.num_states(),
        policy.num_actions()
    );
    out.push_str("h,state");
    for a in 0..policy.num_actions() {
        let _ = write!(out, ",p{a}");
    }
    out.push('\n');
    for h in 0..policy.horizon() {
        for x in 0..policy.num_states() {
            let _ = write!(out, "{h},{x}");
            for p in policy.row(h, x) {
                let _ = write!(out, ",{p}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn read_policy(text: &str) -> Result<(MarkovPolicy, Provenance)> {
    let mut provenance = Provenance::default();
    let mut shape: Option<(usize, usize, usize)> = None;
    let mut probs = Vec::new();
    let mut expected = 0usize;
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            let c = c.trim();
            if let Some(rest) = c.strip_prefix("shape") {
                let kv = key_values(rest, ln)?;
                shape = Some((field(&kv, "H", ln)?, field(&kv, "S", ln)?, field(&kv, "A", ln)?));
            } else if let Some((k, v)) = c.split_once('=') {
                provenance.entries.insert(k.to_string(), v.to_string());
            }
            continue;
        }
        let (hz, s, a) = shape.ok_or_else(|| parse_err(ln, "policy table before the shape line"))?;
        if !header_seen {
            if !line.starts_with("h,state") {
                return Err(parse_err(ln, "expected the policy column header"));
            }
            header_seen = true;
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != a + 2 {
            return Err(parse_err(ln, format!("expected {} columns", a + 2)));
        }
        let (h, x): (usize, usize) = (num(cells[0], "h", ln)?, num(cells[1], "state", ln)?);
        if h * s + x != expected || h >= hz {
            return Err(parse_err(ln, "policy rows must be listed in (h, state) order"));
        }
        expected += 1;
        for c in &cells[2..] {
            probs.push(num::<f64>(c, "probability", ln)?);
        }
    }
    let (hz, s, a) = shape.ok_or_else(|| parse_err(0, "missing shape line"))?;
    if expected != hz * s {
        return Err(parse_err(0, format!("expected {} policy rows, found {expected}", hz * s)));
    }
    Ok((MarkovPolicy::from_rows(hz, s, a, probs)?, provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envgen::{collect_dataset, figure1_instance, sample_contexts, FamilyGenerator};

    #[test]
    fn env_spec_round_trip_is_exact() {
        let mut gen = FamilyGenerator::tabular(3, 2, 2, 2);
        gen.feature_kind = FeatureKind::Explicit;
        gen.dim = 3;
        let fam = sample_contexts(&gen, 3).unwrap();
        let bs = vec![MarkovPolicy::uniform(2, 2, 2); 3];
        let spec = EnvSpec::from_family(&fam, Some(&bs));
        let back = read_env_spec(&write_env_spec(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.to_family().unwrap(), fam);
        assert_eq!(back.to_behaviors().unwrap().unwrap(), bs);
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let f1 = figure1_instance(0.1).unwrap();
        let a = collect_dataset(&f1.family.contexts()[0], &f1.behaviors[0], 25, 1, 0).unwrap();
        let b = collect_dataset(&f1.family.contexts()[1], &f1.behaviors[1], 7, 2, 1).unwrap();
        let text = write_datasets(&[a.clone(), b.clone()]);
        assert_eq!(read_datasets(&text).unwrap(), vec![a, b]);
    }

    #[test]
    fn dataset_reader_reports_line_numbers() {
        let text = "dataset context_id=0 K=1 H=1\ntrajectory_id,h,state,action,reward,next_state\n0,0,0,x,1,0\n";
        match read_datasets(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn policy_round_trip_is_exact() {
        let pi = MarkovPolicy::from_rows(2, 1, 3, vec![0.1, 0.2, 0.7, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        let prov = Provenance::new("pppo", 42, "abc").with("n", 5);
        let (back, p) = read_policy(&write_policy(&pi, &prov)).unwrap();
        assert_eq!(back, pi);
        assert_eq!(p, prov);
    }

    #[test]
    fn digest_is_stable() {
        let a = config_digest(&vec![1, 2, 3]).unwrap();
        assert_eq!(a, config_digest(&vec![1, 2, 3]).unwrap());
        assert_ne!(a, config_digest(&vec![1, 2]).unwrap());
        assert_eq!(a.len(), 64);
    }
}
