//! Independent oracles shared by the property and acceptance suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use fedafd_core::model::{Architecture, LayerSpec};
use fedafd_core::submodel::{self, kept_count, ScoreMap, SCORE_EPSILON};
use fedafd_core::SubModelSpec;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random MLP or CNN with small prunable layers.
pub fn random_arch(rng: &mut ChaCha8Rng) -> Architecture {
    if rng.random_bool(0.5) {
        let depth = rng.random_range(1..=3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=7)).collect();
        Architecture::mlp(rng.random_range(1..=6), &hidden, rng.random_range(2..=4)).unwrap()
    } else if rng.random_bool(0.5) {
        Architecture::cnn(rng.random_range(4..=7), rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(2..=4)).unwrap()
    } else {
        // Two stacked convolutions, both prunable, feeding a dense head.
        let c = rng.random_range(1..=2);
        let f1 = rng.random_range(1..=4);
        let f2 = rng.random_range(1..=3);
        Architecture::new(
            vec![c, 6, 6],
            vec![
                LayerSpec::conv2d(c, f1, 2, 2).prunable(),
                LayerSpec::relu(),
                LayerSpec::conv2d(f1, f2, 3, 2).prunable(),
                LayerSpec::relu(),
                LayerSpec::max_pool(),
                LayerSpec::dense(f2 * 2, 3),
                LayerSpec::softmax(),
            ],
        )
        .unwrap()
    }
}

/// Arbitrary non-empty kept set for every prunable layer.
pub fn random_spec(arch: &Architecture, rng: &mut ChaCha8Rng) -> SubModelSpec {
    let kept = arch
        .prunable_layers()
        .map(|i| {
            let n = arch.layers()[i].kind.units().unwrap();
            let k = rng.random_range(1..=n);
            let mut v = index::sample(rng, n, k).into_vec();
            v.sort_unstable();
            (i, v)
        })
        .collect();
    SubModelSpec::from_layers(kept)
}

/// Exact keep probability of each unit under sequential draws without
/// replacement, unit weight `score + SCORE_EPSILON`, by enumerating every
/// ordered draw sequence.
pub fn keep_marginals_exact(scores: &[f64], k: usize) -> Vec<f64> {
    let w: Vec<f64> = scores.iter().map(|s| s + SCORE_EPSILON).collect();
    let mut marg = vec![0.0; w.len()];
    fn rec(w: &[f64], k: usize, taken: &mut Vec<usize>, p: f64, marg: &mut [f64]) {
        if taken.len() == k {
            for &i in taken.iter() {
                marg[i] += p;
            }
            return;
        }
        let rest: f64 = (0..w.len()).filter(|i| !taken.contains(i)).map(|i| w[i]).sum();
        for i in 0..w.len() {
            if taken.contains(&i) {
                continue;
            }
            taken.push(i);
            rec(w, k, taken, p * w[i] / rest, marg);
            taken.pop();
        }
    }
    rec(&w, k, &mut Vec::new(), 1.0, &mut marg);
    marg
}

/// Straight-line transcription of the AFD loop: random first plan; replay
/// after a recorded improvement; score-weighted draw otherwise; scores grow
/// by the relative loss gain on strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceAfd {
    pub scores: BTreeMap<usize, Vec<f64>>,
    pub l: f64,
    pub recorded: bool,
    pub last_recorded_spec: Option<SubModelSpec>,
    pub first: bool,
}

impl ReferenceAfd {
    pub fn new(arch: &Architecture) -> Self {
        let scores = arch
            .prunable_layers()
            .map(|i| (i, vec![0.0; arch.layers()[i].kind.units().unwrap()]))
            .collect();
        Self {
            scores,
            l: 0.0,
            recorded: false,
            last_recorded_spec: None,
            first: true,
        }
    }

    pub fn plan(&self, arch: &Architecture, fdr: f64, rng: &mut ChaCha8Rng) -> SubModelSpec {
        if self.first {
            submodel::select_random(arch, fdr, rng)
        } else if self.recorded {
            self.last_recorded_spec.clone().unwrap()
        } else {
            submodel::select_weighted(arch, &ScoreMap::from_layers(self.scores.clone()), fdr, rng).unwrap()
        }
    }

    pub fn feedback(&mut self, spec: &SubModelSpec, loss: f64) {
        if !self.first && loss < self.l {
            let gain = (self.l - loss) / self.l;
            for (layer, kept) in spec.layers() {
                let s = self.scores.get_mut(layer).unwrap();
                for &u in kept {
                    s[u] += gain;
                }
            }
            self.recorded = true;
            self.last_recorded_spec = Some(spec.clone());
        } else {
            self.recorded = false;
        }
        self.l = loss;
        self.first = false;
    }
}

/// Loss sequence with plateaus, exact repeats and occasional zeros.
pub fn random_losses(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut cur: f64 = rng.random_range(0.5..3.0);
    for _ in 0..len {
        match rng.random_range(0..10) {
            0 => {}
            1 => cur = 0.0,
            2..=6 => cur *= rng.random_range(0.6..1.0),
            _ => cur = cur.max(0.05) * rng.random_range(1.0..1.5),
        }
        out.push(cur);
    }
    out
}

pub fn kept(n: usize, fdr: f64) -> usize {
    kept_count(n, fdr)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
