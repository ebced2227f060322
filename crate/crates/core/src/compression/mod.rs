//! Payload codecs.
//!
//! Wire layout (all little-endian). The codec tag, tensor shape and the
//! Hadamard sign seed travel out of band: both ends derive them from the
//! round and the sub-model spec, so they are not charged to the payload.
//!
//! | codec            | bytes                                               | size            |
//! |------------------|-----------------------------------------------------|-----------------|
//! | `Raw`            | `n` x f64                                           | `8n`            |
//! | `Quant8Hadamard` | min f64, max f64, `padded_n` x u8                   | `padded_n + 16` |
//! | `TopKSparse`     | original len u32, k u32, k x u32 index, k x f64     | `12k + 8`       |

mod dgc;
mod hadamard;
mod quant8;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use dgc::{dgc_decode, dgc_encode, DgcConfig, DgcState};
pub use hadamard::{hadamard_rotate, hadamard_unrotate, random_signs, rotate_with_signs, unrotate_with_signs};
pub use quant8::{quant8_decode, quant8_decode_rotated, quant8_encode};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CompressionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sparsity ratio must be in (0, 1], got {0}")]
    InvalidRatio(f64),
    #[error("clip norm must be positive, got {0}")]
    InvalidClip(f64),
    #[error("momentum must be in [0, 1), got {0}")]
    InvalidMomentum(f64),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("expected a {expected:?} blob, got {actual:?}")]
    WrongCodec { expected: Codec, actual: Codec },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Codec {
    Raw,
    Quant8Hadamard,
    TopKSparse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BlobMeta {
    Raw {
        shape: Vec<usize>,
    },
    Quant8Hadamard {
        shape: Vec<usize>,
        min: f64,
        max: f64,
        sign_seed: u64,
    },
    TopKSparse {
        shape: Vec<usize>,
        indices: Vec<u32>,
    },
}

/// Encoded tensor: codec metadata plus the byte payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressedBlob {
    pub meta: BlobMeta,
    pub payload: Vec<u8>,
}

impl CompressedBlob {
    pub fn codec(&self) -> Codec {
        match self.meta {
            BlobMeta::Raw { .. } => Codec::Raw,
            BlobMeta::Quant8Hadamard { .. } => Codec::Quant8Hadamard,
            BlobMeta::TopKSparse { .. } => Codec::TopKSparse,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match &self.meta {
            BlobMeta::Raw { shape } | BlobMeta::Quant8Hadamard { shape, .. } | BlobMeta::TopKSparse { shape, .. } => shape,
        }
    }

    /// Serializes to the documented wire layout; its length is
    /// [`payload_size_bytes`].
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(payload_size_bytes(self));
        match &self.meta {
            BlobMeta::Raw { .. } => {}
            BlobMeta::Quant8Hadamard { min, max, .. } => {
                out.extend_from_slice(&min.to_le_bytes());
                out.extend_from_slice(&max.to_le_bytes());
            }
            BlobMeta::TopKSparse { shape, indices } => {
                let n: usize = shape.iter().product();
                out.extend_from_slice(&(n as u32).to_le_bytes());
                out.extend_from_slice(&(indices.len() as u32).to_le_bytes());
                for i in indices {
                    out.extend_from_slice(&i.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses wire bytes given the out-of-band codec, shape and sign seed.
    pub fn from_wire(codec: Codec, shape: Vec<usize>, sign_seed: u64, bytes: &[u8]) -> Result<Self, CompressionError> {
        let n: usize = shape.iter().product();
        let short = |need: usize| CompressionError::Malformed(format!("need {need} bytes, got {}", bytes.len()));
        match codec {
            Codec::Raw => {
                if bytes.len() != 8 * n {
                    return Err(short(8 * n));
                }
                Ok(Self {
                    meta: BlobMeta::Raw { shape },
                    payload: bytes.to_vec(),
                })
            }
            Codec::Quant8Hadamard => {
                let padded = n.next_power_of_two();
                if bytes.len() != padded + 16 {
                    return Err(short(padded + 16));
                }
                Ok(Self {
                    meta: BlobMeta::Quant8Hadamard {
                        shape,
                        min: LittleEndian::read_f64(&bytes[0..8]),
                        max: LittleEndian::read_f64(&bytes[8..16]),
                        sign_seed,
                    },
                    payload: bytes[16..].to_vec(),
                })
            }
            Codec::TopKSparse => {
                if bytes.len() < 8 {
                    return Err(short(8));
                }
                let len = LittleEndian::read_u32(&bytes[0..4]) as usize;
                let k = LittleEndian::read_u32(&bytes[4..8]) as usize;
                if len != n {
                    return Err(CompressionError::ShapeMismatch(format!("header says {len} values, shape has {n}")));
                }
                if bytes.len() != 8 + 12 * k {
                    return Err(short(8 + 12 * k));
                }
                let mut indices = vec![0u32; k];
                LittleEndian::read_u32_into(&bytes[8..8 + 4 * k], &mut indices);
                if indices.iter().any(|&i| i as usize >= n) {
                    return Err(CompressionError::Malformed("sparse index out of range".into()));
                }
                Ok(Self {
                    meta: BlobMeta::TopKSparse { shape, indices },
                    payload: bytes[8 + 4 * k..].to_vec(),
                })
            }
        }
    }
}

/// Exact wire size of a blob, derived from its metadata and payload lengths.
pub fn payload_size_bytes(blob: &CompressedBlob) -> usize {
    match &blob.meta {
        BlobMeta::Raw { .. } => blob.payload.len(),
        BlobMeta::Quant8Hadamard { .. } => blob.payload.len() + 16,
        BlobMeta::TopKSparse { indices, .. } => indices.len() * 4 + blob.payload.len() + 8,
    }
}

pub fn raw_encode<T: Scalar>(t: &Tensor<T>) -> CompressedBlob {
    CompressedBlob {
        meta: BlobMeta::Raw {
            shape: t.shape().to_vec(),
        },
        payload: f64_bytes(t.values().iter().map(|v| v.as_f64())),
    }
}

pub fn raw_decode<T: Scalar>(blob: &CompressedBlob) -> Result<Tensor<T>, CompressionError> {
    let BlobMeta::Raw { shape } = &blob.meta else {
        return Err(CompressionError::WrongCodec {
            expected: Codec::Raw,
            actual: blob.codec(),
        });
    };
    let values = read_f64s(&blob.payload)?.into_iter().map(T::of).collect();
    Tensor::new(shape.clone(), values).map_err(|e| CompressionError::ShapeMismatch(e.to_string()))
}

/// Decodes any blob back to a dense tensor.
pub fn decode<T: Scalar>(blob: &CompressedBlob) -> Result<Tensor<T>, CompressionError> {
    match blob.codec() {
        Codec::Raw => raw_decode(blob),
        Codec::Quant8Hadamard => quant8_decode(blob),
        Codec::TopKSparse => dgc_decode(blob),
    }
}

fn f64_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(f64::to_le_bytes).collect()
}

fn read_f64s(bytes: &[u8]) -> Result<Vec<f64>, CompressionError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(CompressionError::Malformed(format!("{} bytes is not a whole number of f64s", bytes.len())));
    }
    let mut out = vec![0.0; bytes.len() / 8];
    LittleEndian::read_f64_into(bytes, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_sizes_and_round_trip() {
        let t = Tensor::vector((0..100).map(|i| i as f64 * 0.37 - 3.0).collect());
        let b = raw_encode(&t);
        assert_eq!(payload_size_bytes(&b), 800);
        assert_eq!(raw_decode::<f64>(&b).unwrap(), t);
        assert_eq!(b.to_wire().len(), 800);
    }

    #[test]
    fn size_formulas() {
        let t = Tensor::vector(vec![0.5f64; 100]);
        let q = quant8_encode(&t, 1);
        assert_eq!(payload_size_bytes(&q), 144);
        assert_eq!(q.to_wire().len(), 144);

        let g = Tensor::vector((0..40).map(|i| i as f64).collect::<Vec<_>>());
        let mut st = DgcState::new(&[g.shape().to_vec()], DgcConfig::new(0.25, f64::INFINITY, 0.0).unwrap());
        let blobs = dgc_encode(&[g], &mut st).unwrap();
        assert_eq!(payload_size_bytes(&blobs[0]), 10 * 12 + 8);
        assert_eq!(blobs[0].to_wire().len(), 128);
    }

    #[test]
    fn wire_round_trip_every_codec() {
        let t = Tensor::new(vec![3, 7], (0..21).map(|i| (i as f64).sin()).collect()).unwrap();
        let mut st = DgcState::new(&[vec![3, 7]], DgcConfig::new(0.3, 10.0, 0.9).unwrap());
        let blobs = [raw_encode(&t), quant8_encode(&t, 77), dgc_encode(std::slice::from_ref(&t), &mut st).unwrap().remove(0)];
        for b in blobs {
            let back = CompressedBlob::from_wire(b.codec(), b.shape().to_vec(), 77, &b.to_wire()).unwrap();
            assert_eq!(back, b);
        }
    }

    #[test]
    fn malformed_wire_rejected() {
        assert!(CompressedBlob::from_wire(Codec::Raw, vec![3], 0, &[0; 23]).is_err());
        assert!(CompressedBlob::from_wire(Codec::Quant8Hadamard, vec![3], 0, &[0; 19]).is_err());
        let mut bad = vec![];
        bad.extend_from_slice(&3u32.to_le_bytes());
        bad.extend_from_slice(&1u32.to_le_bytes());
        bad.extend_from_slice(&9u32.to_le_bytes());
        bad.extend_from_slice(&1f64.to_le_bytes());
        assert!(CompressedBlob::from_wire(Codec::TopKSparse, vec![3], 0, &bad).is_err());
    }

    #[test]
    fn quant8_beats_raw_from_64_values() {
        for n in 1..2048usize {
            let quant = n.next_power_of_two() + 16;
            if n >= 64 {
                assert!(quant < 8 * n, "n={n}");
            }
        }
    }
}
