#![allow(dead_code)]

use offline_zsg::envgen::{sample_contexts, FamilyGenerator};
use offline_zsg::model::{FeatureKind, LinearMdp, MarkovPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tabular(seed: u64, s: usize, a: usize, h: usize) -> LinearMdp {
    sample_contexts(&FamilyGenerator::tabular(seed, s, a, h), 1).unwrap().contexts()[0].clone()
}

pub fn random_explicit(seed: u64, s: usize, a: usize, h: usize, d: usize) -> LinearMdp {
    let mut gen = FamilyGenerator::tabular(seed, s, a, h);
    gen.feature_kind = FeatureKind::Explicit;
    gen.dim = d;
    sample_contexts(&gen, 1).unwrap().contexts()[0].clone()
}

pub fn random_policy(seed: u64, h: usize, s: usize, a: usize) -> MarkovPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = Vec::with_capacity(h * s * a);
    for _ in 0..h * s {
        let w: Vec<f64> = (0..a).map(|_| rng.random::<f64>() + 0.01).collect();
        let total: f64 = w.iter().sum();
        probs.extend(w.iter().map(|x| x / total));
    }
    MarkovPolicy::from_rows(h, s, a, probs).unwrap()
}

/// Sum over every state-action path of its probability times `f(h, x, a)`,
/// accumulated per stage. Returns `(expected return, per-stage occupancy)`.
pub fn enumerate_paths(model: &LinearMdp, policy: &MarkovPolicy) -> (f64, Vec<Vec<f64>>) {
    let (hz, s, a) = (model.horizon(), model.num_states(), model.num_actions());
    let mut occ = vec![vec![0.0; s * a]; hz];
    let mut total = 0.0;
    fn walk(
        model: &LinearMdp,
        policy: &MarkovPolicy,
        h: usize,
        x: usize,
        prob: f64,
        ret: f64,
        occ: &mut Vec<Vec<f64>>,
        total: &mut f64,
    ) {
        if h == model.horizon() {
            *total += prob * ret;
            return;
        }
        let a = model.num_actions();
        for act in 0..a {
            let pa = prob * policy.row(h, x)[act];
            if pa == 0.0 {
                continue;
            }
            occ[h][x * a + act] += pa;
            let r = model.reward(h, x, act);
            for (next, pn) in model.transition_row(h, x, act).iter().enumerate() {
                if *pn > 0.0 {
                    walk(model, policy, h + 1, next, pa * pn, ret + r, occ, total);
                }
            }
        }
    }
    walk(model, policy, 0, model.initial_state(), 1.0, 0.0, &mut occ, &mut total);
    let _ = s;
    (total, occ)
}

/// Number of state-action paths of length `H`.
pub fn path_count(s: usize, a: usize, h: usize) -> usize {
    (a * s).pow(h as u32) / s
}
