use super::hadamard::{hadamard_rotate, hadamard_unrotate};
use super::{BlobMeta, Codec, CompressedBlob, CompressionError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LEVELS: f64 = 255.0;

/// Randomised Hadamard rotation followed by 8-bit uniform quantization over
/// the rotated vector's `[min, max]`.
pub fn quant8_encode<T: Scalar>(t: &Tensor<T>, sign_seed: u64) -> CompressedBlob {
    let rotated: Vec<f64> = hadamard_rotate(t.values(), sign_seed).into_iter().map(Scalar::as_f64).collect();
    let min = rotated.iter().copied().fold(f64::INFINITY, f64::min);
    let max = rotated.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let payload = rotated
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - min) / range * LEVELS).round().clamp(0.0, LEVELS) as u8
            } else {
                0
            }
        })
        .collect();
    CompressedBlob {
        meta: BlobMeta::Quant8Hadamard {
            shape: t.shape().to_vec(),
            min,
            max,
            sign_seed,
        },
        payload,
    }
}

/// Dequantized values in rotated space (length is the padded size).
pub fn quant8_decode_rotated(blob: &CompressedBlob) -> Result<Vec<f64>, CompressionError> {
    let BlobMeta::Quant8Hadamard { min, max, .. } = blob.meta else {
        return Err(CompressionError::WrongCodec {
            expected: Codec::Quant8Hadamard,
            actual: blob.codec(),
        });
    };
    let step = (max - min) / LEVELS;
    Ok(blob.payload.iter().map(|&q| min + f64::from(q) * step).collect())
}

pub fn quant8_decode<T: Scalar>(blob: &CompressedBlob) -> Result<Tensor<T>, CompressionError> {
    let rotated = quant8_decode_rotated(blob)?;
    let BlobMeta::Quant8Hadamard { shape, sign_seed, .. } = &blob.meta else {
        unreachable!("checked above");
    };
    let n: usize = shape.iter().product();
    if rotated.len() != n.max(1).next_power_of_two() {
        return Err(CompressionError::Malformed(format!(
            "{} quantized values for a tensor of {n}",
            rotated.len()
        )));
    }
    let rotated: Vec<T> = rotated.into_iter().map(T::of).collect();
    Tensor::new(shape.clone(), hadamard_unrotate(&rotated, *sign_seed, n))
        .map_err(|e| CompressionError::ShapeMismatch(e.to_string()))
}
