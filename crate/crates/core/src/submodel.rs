//! Sub-model construction: which units survive a dropout round, slicing the
//! global parameters down to them, and writing trained slices back.
//!
//! A prunable unit is a hidden dense neuron or a conv output filter. Dropping
//! a unit removes its row (or filter slice) and bias in its own layer and the
//! matching input columns (or input channels) of the next parameterized layer.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{Architecture, LayerKind, LayerParams, LayerSpec, ModelError, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smoothing added to every score so zero-score units stay selectable.
pub const SCORE_EPSILON: f64 = 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SubModelError {
    #[error("federated dropout rate must be in [0, 1), got {0}")]
    InvalidFdr(f64),
    #[error("sub-model spec does not match the architecture: {0}")]
    InconsistentSpec(String),
    #[error("score map does not match the architecture: {0}")]
    InconsistentScores(String),
    #[error("trained sub-model does not match the spec: {0}")]
    ShapeMismatch(String),
    #[error("score update requires 0 < l_cur < l_prev, got l_prev={l_prev}, l_cur={l_cur}")]
    ContractViolation { l_prev: f64, l_cur: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Validated federated dropout rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdrConfig {
    fdr: f64,
}

impl FdrConfig {
    pub const RECOMMENDED: (f64, f64) = (0.10, 0.50);

    pub fn new(fdr: f64) -> Result<Self, SubModelError> {
        if !(0.0..1.0).contains(&fdr) {
            return Err(SubModelError::InvalidFdr(fdr));
        }
        Ok(Self { fdr })
    }

    pub fn value(&self) -> f64 {
        self.fdr
    }

    /// Advisory message when the rate lies outside the usual 10%-50% band.
    pub fn warning(&self) -> Option<String> {
        let (lo, hi) = Self::RECOMMENDED;
        (self.fdr != 0.0 && !(lo..=hi).contains(&self.fdr)).then(|| {
            format!(
                "fdr {} is outside the recommended 10%-50% range; tune it to the model size",
                self.fdr
            )
        })
    }
}

/// Units kept per layer for a layer of `n` units at dropout rate `fdr`.
pub fn kept_count(n: usize, fdr: f64) -> usize {
    (((1.0 - fdr) * n as f64).round() as usize).clamp(1, n)
}

/// Per-prunable-layer importance scores, one per unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    scores: BTreeMap<usize, Vec<f64>>,
}

impl ScoreMap {
    pub fn zeros(arch: &Architecture) -> Self {
        let scores = arch
            .prunable_layers()
            .map(|i| (i, vec![0.0; arch.layers()[i].kind.units().unwrap_or(0)]))
            .collect();
        Self { scores }
    }

    pub fn from_layers(scores: BTreeMap<usize, Vec<f64>>) -> Self {
        Self { scores }
    }

    pub fn layer(&self, i: usize) -> Option<&[f64]> {
        self.scores.get(&i).map(Vec::as_slice)
    }

    pub fn layers(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.scores
    }

    fn check(&self, arch: &Architecture) -> Result<(), SubModelError> {
        let prunable: Vec<usize> = arch.prunable_layers().collect();
        if self.scores.keys().copied().collect::<Vec<_>>() != prunable {
            return Err(SubModelError::InconsistentScores(format!(
                "scores cover layers {:?}, prunable layers are {prunable:?}",
                self.scores.keys().collect::<Vec<_>>()
            )));
        }
        for (&i, s) in &self.scores {
            let n = arch.layers()[i].kind.units().unwrap_or(0);
            if s.len() != n {
                return Err(SubModelError::InconsistentScores(format!(
                    "layer {i} has {n} units but {} scores",
                    s.len()
                )));
            }
        }
        Ok(())
    }
}

/// Sorted kept-unit indices for every prunable layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubModelSpec {
    kept: BTreeMap<usize, Vec<usize>>,
}

impl SubModelSpec {
    /// Keeps every unit.
    pub fn full(arch: &Architecture) -> Self {
        let kept = arch
            .prunable_layers()
            .map(|i| (i, (0..arch.layers()[i].kind.units().unwrap_or(0)).collect()))
            .collect();
        Self { kept }
    }

    pub fn from_layers(kept: BTreeMap<usize, Vec<usize>>) -> Self {
        Self { kept }
    }

    pub fn kept(&self, layer: usize) -> Option<&[usize]> {
        self.kept.get(&layer).map(Vec::as_slice)
    }

    pub fn layers(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.kept
    }

    /// `{"<layer index>": [kept indices], ...}`
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.kept).expect("map of integer lists serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        Ok(Self {
            kept: serde_json::from_str(s)?,
        })
    }

    /// Short stable hash of the JSON form, used in logs.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn check(&self, arch: &Architecture) -> Result<(), SubModelError> {
        let prunable: Vec<usize> = arch.prunable_layers().collect();
        if self.kept.keys().copied().collect::<Vec<_>>() != prunable {
            return Err(SubModelError::InconsistentSpec(format!(
                "spec covers layers {:?}, prunable layers are {prunable:?}",
                self.kept.keys().collect::<Vec<_>>()
            )));
        }
        for (&i, k) in &self.kept {
            let n = arch.layers()[i].kind.units().unwrap_or(0);
            if k.is_empty() {
                return Err(SubModelError::InconsistentSpec(format!("layer {i} keeps no units")));
            }
            if k.windows(2).any(|w| w[0] >= w[1]) || k.iter().any(|&u| u >= n) {
                return Err(SubModelError::InconsistentSpec(format!(
                    "layer {i} kept indices must be strictly increasing and below {n}"
                )));
            }
        }
        Ok(())
    }
}

/// Uniformly random sub-model with `kept_count` units per prunable layer.
pub fn select_random<R: Rng + ?Sized>(arch: &Architecture, fdr: f64, rng: &mut R) -> SubModelSpec {
    let kept = arch
        .prunable_layers()
        .map(|i| {
            let n = arch.layers()[i].kind.units().unwrap_or(0);
            let mut idx = rand::seq::index::sample(rng, n, kept_count(n, fdr)).into_vec();
            idx.sort_unstable();
            (i, idx)
        })
        .collect();
    SubModelSpec { kept }
}

/// Sub-model drawn by sequential weighted sampling without replacement:
/// each draw picks a remaining unit with probability proportional to
/// `score + SCORE_EPSILON`, then removes it.
pub fn select_weighted<R: Rng + ?Sized>(
    arch: &Architecture,
    scores: &ScoreMap,
    fdr: f64,
    rng: &mut R,
) -> Result<SubModelSpec, SubModelError> {
    scores.check(arch)?;
    let kept = scores
        .scores
        .iter()
        .map(|(&i, s)| (i, weighted_without_replacement(s, kept_count(s.len(), fdr), rng)))
        .collect();
    Ok(SubModelSpec { kept })
}

fn weighted_without_replacement<R: Rng + ?Sized>(scores: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let mut pool: Vec<(usize, f64)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (i, s + SCORE_EPSILON))
        .collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = pool.iter().map(|&(_, w)| w).sum();
        let mut r = rng.random::<f64>() * total;
        // Falls back to the last unit when rounding leaves r past the end.
        let mut pick = pool.len() - 1;
        for (j, &(_, w)) in pool.iter().enumerate() {
            if r < w {
                pick = j;
                break;
            }
            r -= w;
        }
        out.push(pool.remove(pick).0);
    }
    out.sort_unstable();
    out
}

/// Global flat indices addressed by a sub-model, in sub-model order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerIndex {
    pub weights: Vec<usize>,
    pub biases: Vec<usize>,
}

/// Computes the sub-architecture and, for every parameterized layer, which
/// global coordinates the sub-model's tensors map to.
pub fn coordinate_map(arch: &Architecture, spec: &SubModelSpec) -> Result<(Architecture, Vec<LayerIndex>), SubModelError> {
    spec.check(arch)?;
    let all = |n: usize| (0..n).collect::<Vec<_>>();
    let mut index = Vec::new();
    let mut layers = Vec::with_capacity(arch.layers().len());
    // Kept output units of the most recent parameterized layer.
    let mut prev_kept: Option<Vec<usize>> = None;
    for (i, l) in arch.layers().iter().enumerate() {
        let kind = match l.kind {
            LayerKind::Dense { in_units, out_units } => {
                let rows = spec.kept(i).map_or_else(|| all(out_units), <[usize]>::to_vec);
                let in_shape = arch.input_shape_of(i);
                let cols = match (&prev_kept, in_shape) {
                    (None, _) => all(in_units),
                    (Some(k), [_, h, w]) => k.iter().flat_map(|&c| c * h * w..(c + 1) * h * w).collect(),
                    (Some(k), _) => k.clone(),
                };
                index.push(LayerIndex {
                    weights: rows
                        .iter()
                        .flat_map(|&r| cols.iter().map(move |&c| r * in_units + c))
                        .collect(),
                    biases: rows.clone(),
                });
                let kind = LayerKind::Dense {
                    in_units: cols.len(),
                    out_units: rows.len(),
                };
                prev_kept = Some(rows);
                kind
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => {
                let outs = spec.kept(i).map_or_else(|| all(out_channels), <[usize]>::to_vec);
                let ins = prev_kept.clone().unwrap_or_else(|| all(in_channels));
                let kk = kernel_h * kernel_w;
                let mut w = Vec::with_capacity(outs.len() * ins.len() * kk);
                for &o in &outs {
                    for &c in &ins {
                        let base = (o * in_channels + c) * kk;
                        w.extend(base..base + kk);
                    }
                }
                index.push(LayerIndex {
                    weights: w,
                    biases: outs.clone(),
                });
                let kind = LayerKind::Conv2d {
                    in_channels: ins.len(),
                    out_channels: outs.len(),
                    kernel_h,
                    kernel_w,
                };
                prev_kept = Some(outs);
                kind
            }
            other => other,
        };
        layers.push(LayerSpec { kind, prunable: l.prunable });
    }
    let sub_arch = Architecture::new(arch.input_shape().to_vec(), layers)?;
    Ok((sub_arch, index))
}

/// Slices the global parameters down to the sub-model described by `spec`.
pub fn extract<T: Scalar>(
    global: &ModelParams<T>,
    arch: &Architecture,
    spec: &SubModelSpec,
) -> Result<(ModelParams<T>, Architecture), SubModelError> {
    global.check(arch)?;
    let (sub_arch, index) = coordinate_map(arch, spec)?;
    let shapes = sub_arch.param_shapes();
    let layers = global
        .layers
        .iter()
        .zip(&index)
        .zip(shapes)
        .map(|((g, ix), (ws, bs))| {
            let gather = |t: &Tensor<T>, idx: &[usize], shape: Vec<usize>| {
                Tensor::new(shape, idx.iter().map(|&j| t[j]).collect()).expect("index map matches sub shape")
            };
            LayerParams {
                weights: gather(&g.weights, &ix.weights, ws),
                biases: gather(&g.biases, &ix.biases, bs),
            }
        })
        .collect();
    Ok((ModelParams { layers }, sub_arch))
}

/// Writes trained sub-model parameters back into a copy of `global`.
pub fn lift<T: Scalar>(
    global: &ModelParams<T>,
    arch: &Architecture,
    spec: &SubModelSpec,
    trained: &ModelParams<T>,
) -> Result<ModelParams<T>, SubModelError> {
    global.check(arch)?;
    let (sub_arch, index) = coordinate_map(arch, spec)?;
    trained
        .check(&sub_arch)
        .map_err(|e| SubModelError::ShapeMismatch(e.to_string()))?;
    let mut out = global.clone();
    for ((o, t), ix) in out.layers.iter_mut().zip(&trained.layers).zip(&index) {
        for (&j, &v) in ix.weights.iter().zip(t.weights.values()) {
            o.weights[j] = v;
        }
        for (&j, &v) in ix.biases.iter().zip(t.biases.values()) {
            o.biases[j] = v;
        }
    }
    Ok(out)
}

/// Adds `(l_prev - l_cur) / l_prev` to the score of every kept unit.
pub fn update_score_map(map: &ScoreMap, spec: &SubModelSpec, l_prev: f64, l_cur: f64) -> Result<ScoreMap, SubModelError> {
    if !(l_prev > 0.0 && l_cur < l_prev && l_cur >= 0.0) {
        return Err(SubModelError::ContractViolation { l_prev, l_cur });
    }
    if map.scores.keys().ne(spec.kept.keys()) {
        return Err(SubModelError::InconsistentSpec(
            "spec and score map cover different layers".into(),
        ));
    }
    let inc = (l_prev - l_cur) / l_prev;
    let mut out = map.clone();
    for (i, kept) in &spec.kept {
        let s = out.scores.get_mut(i).expect("same keys");
        for &u in kept {
            let slot = s
                .get_mut(u)
                .ok_or_else(|| SubModelError::InconsistentSpec(format!("unit {u} out of range in layer {i}")))?;
            *slot += inc;
        }
    }
    Ok(out)
}
