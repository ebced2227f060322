//! Top-k sparsification with momentum correction, residual accumulation and
//! global-norm clipping.

use serde::{Deserialize, Serialize};

use super::{read_f64s, BlobMeta, Codec, CompressedBlob, CompressionError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgcConfig {
    /// Fraction of coordinates sent per tensor, in (0, 1].
    pub ratio: f64,
    pub clip_norm: f64,
    pub momentum: f64,
}

impl Default for DgcConfig {
    fn default() -> Self {
        Self {
            ratio: 0.25,
            clip_norm: 1.0,
            momentum: 0.9,
        }
    }
}

impl DgcConfig {
    pub fn new(ratio: f64, clip_norm: f64, momentum: f64) -> Result<Self, CompressionError> {
        let c = Self {
            ratio,
            clip_norm,
            momentum,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CompressionError> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(CompressionError::InvalidRatio(self.ratio));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(CompressionError::InvalidClip(self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CompressionError::InvalidMomentum(self.momentum));
        }
        Ok(())
    }

    /// Coordinates sent for a tensor of `n` values.
    pub fn k_for(&self, n: usize) -> usize {
        ((self.ratio * n as f64).round() as usize).clamp(1, n.max(1))
    }
}

/// Per-client residual and momentum accumulators, one per tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct DgcState<T: Scalar = f64> {
    pub config: DgcConfig,
    residual: Vec<Tensor<T>>,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> DgcState<T> {
    pub fn new(shapes: &[Vec<usize>], config: DgcConfig) -> Self {
        let zeros: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        Self {
            config,
            residual: zeros.clone(),
            velocity: zeros,
        }
    }

    pub fn matches(&self, shapes: &[Vec<usize>]) -> bool {
        self.residual.len() == shapes.len() && self.residual.iter().zip(shapes).all(|(r, s)| r.shape() == s.as_slice())
    }

    pub fn residual(&self) -> &[Tensor<T>] {
        &self.residual
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }
}

/// Clips `grads` to the configured global L2 norm, folds them into the
/// momentum and residual accumulators, and emits the top-k residual entries
/// of every tensor (ties to the lower index). Sent entries are zeroed in the
/// residual.
pub fn dgc_encode<T: Scalar>(grads: &[Tensor<T>], state: &mut DgcState<T>) -> Result<Vec<CompressedBlob>, CompressionError> {
    state.config.validate()?;
    if grads.len() != state.residual.len() || grads.iter().zip(&state.residual).any(|(g, r)| !g.same_shape(r)) {
        return Err(CompressionError::ShapeMismatch(
            "gradients do not match the accumulator shapes".into(),
        ));
    }
    let norm = grads.iter().map(|g| g.sum_squares()).sum::<T>().sqrt();
    let clip = T::of(state.config.clip_norm);
    let scale = if norm > clip { clip / norm } else { T::one() };
    let m = T::of(state.config.momentum);

    let mut out = Vec::with_capacity(grads.len());
    for ((g, u), acc) in grads.iter().zip(&mut state.velocity).zip(&mut state.residual) {
        for ((ui, ai), &gi) in u.values_mut().iter_mut().zip(acc.values_mut()).zip(g.values()) {
            *ui = m * *ui + gi * scale;
            *ai += *ui;
        }
        let k = state.config.k_for(acc.len());
        let mut order: Vec<usize> = (0..acc.len()).collect();
        let a = acc.values();
        order.sort_by(|&i, &j| {
            a[j].abs()
                .partial_cmp(&a[i].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        });
        let mut chosen = order[..k].to_vec();
        chosen.sort_unstable();
        let payload = super::f64_bytes(chosen.iter().map(|&i| a[i].as_f64()));
        for &i in &chosen {
            acc[i] = T::zero();
        }
        out.push(CompressedBlob {
            meta: BlobMeta::TopKSparse {
                shape: g.shape().to_vec(),
                indices: chosen.into_iter().map(|i| i as u32).collect(),
            },
            payload,
        });
    }
    Ok(out)
}

/// Scatters a sparse blob into a dense zero tensor.
pub fn dgc_decode<T: Scalar>(blob: &CompressedBlob) -> Result<Tensor<T>, CompressionError> {
    let BlobMeta::TopKSparse { shape, indices } = &blob.meta else {
        return Err(CompressionError::WrongCodec {
            expected: Codec::TopKSparse,
            actual: blob.codec(),
        });
    };
    let values = read_f64s(&blob.payload)?;
    if values.len() != indices.len() {
        return Err(CompressionError::Malformed(format!(
            "{} indices but {} values",
            indices.len(),
            values.len()
        )));
    }
    let mut t = Tensor::zeros(shape.clone());
    for (&i, v) in indices.iter().zip(values) {
        let slot = t.values_mut().get_mut(i as usize).ok_or_else(|| CompressionError::Malformed("index out of range".into()))?;
        *slot = T::of(v);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(n: usize, ratio: f64, clip: f64, m: f64) -> DgcState<f64> {
        DgcState::new(&[vec![n]], DgcConfig::new(ratio, clip, m).unwrap())
    }

    #[test]
    fn picks_largest_magnitudes() {
        let g = Tensor::vector(vec![0.1, -0.5, 0.05, 0.9]);
        let mut st = state(4, 0.5, 10.0, 0.0);
        let blobs = dgc_encode(&[g], &mut st).unwrap();
        let BlobMeta::TopKSparse { indices, .. } = &blobs[0].meta else { panic!() };
        assert_eq!(indices, &[1, 3]);
        assert_eq!(dgc_decode::<f64>(&blobs[0]).unwrap().values(), &[0.0, -0.5, 0.0, 0.9]);
        assert_eq!(st.residual()[0].values(), &[0.1, 0.0, 0.05, 0.0]);
    }

    #[test]
    fn full_ratio_without_momentum_is_lossless_after_clip() {
        let g = Tensor::vector(vec![3.0, -4.0]);
        let mut st = state(2, 1.0, 1.0, 0.0);
        let blobs = dgc_encode(&[g], &mut st).unwrap();
        let d = dgc_decode::<f64>(&blobs[0]).unwrap();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] + 0.8).abs() < 1e-15);
        let g = Tensor::vector(vec![0.3, -0.4]);
        let mut st = state(2, 1.0, f64::INFINITY, 0.0);
        let blobs = dgc_encode(std::slice::from_ref(&g), &mut st).unwrap();
        assert_eq!(dgc_decode::<f64>(&blobs[0]).unwrap(), g);
    }

    #[test]
    fn unsent_coordinates_accumulate() {
        let mut st = state(3, 1.0 / 3.0, f64::INFINITY, 0.0);
        dgc_encode(&[Tensor::vector(vec![1.0, 0.2, 0.1])], &mut st).unwrap();
        let blobs = dgc_encode(&[Tensor::vector(vec![1.0, 0.3, 0.1])], &mut st).unwrap();
        // Round 1 sends coord 0; round 2 residual is [1.0, 0.5, 0.2] and sends coord 0 again.
        assert_eq!(dgc_decode::<f64>(&blobs[0]).unwrap().values(), &[1.0, 0.0, 0.0]);
        assert_eq!(st.residual()[0].values(), &[0.0, 0.2 + 0.3, 0.1 + 0.1]);
    }

    #[test]
    fn momentum_correction() {
        let mut st = state(2, 0.5, f64::INFINITY, 0.9);
        dgc_encode(&[Tensor::vector(vec![1.0, 0.5])], &mut st).unwrap();
        let blobs = dgc_encode(&[Tensor::vector(vec![0.0, 0.0])], &mut st).unwrap();
        // u = [0.9, 0.45]; acc = [0, 0.5] + u.
        assert_eq!(st.velocity()[0].values(), &[0.9, 0.45]);
        assert_eq!(dgc_decode::<f64>(&blobs[0]).unwrap().values(), &[0.0, 0.95]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let mut st = state(4, 0.5, f64::INFINITY, 0.0);
        let blobs = dgc_encode(&[Tensor::vector(vec![1.0, -1.0, 1.0, 1.0])], &mut st).unwrap();
        let BlobMeta::TopKSparse { indices, .. } = &blobs[0].meta else { panic!() };
        assert_eq!(indices, &[0, 1]);
    }

    #[test]
    fn config_validation() {
        assert_eq!(DgcConfig::new(0.0, 1.0, 0.9), Err(CompressionError::InvalidRatio(0.0)));
        assert_eq!(DgcConfig::new(1.5, 1.0, 0.9), Err(CompressionError::InvalidRatio(1.5)));
        assert_eq!(DgcConfig::new(0.5, 0.0, 0.9), Err(CompressionError::InvalidClip(0.0)));
        assert_eq!(DgcConfig::new(0.5, 1.0, 1.0), Err(CompressionError::InvalidMomentum(1.0)));
    }

    #[test]
    fn shape_mismatch() {
        let mut st = state(3, 0.5, 1.0, 0.0);
        assert!(matches!(
            dgc_encode(&[Tensor::vector(vec![1.0, 2.0])], &mut st),
            Err(CompressionError::ShapeMismatch(_))
        ));
    }
}
