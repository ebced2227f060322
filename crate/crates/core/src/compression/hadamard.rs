use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// Seeded ±1 diagonal of length `n`.
pub fn random_signs<T: Scalar>(n: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| if rng.random::<bool>() { T::one() } else { -T::one() })
        .collect()
}

/// `(1/sqrt(n)) * H_n * D * x`, zero-padding `x` to the next power of two.
pub fn hadamard_rotate<T: Scalar>(x: &[T], sign_seed: u64) -> Vec<T> {
    let n = x.len().max(1).next_power_of_two();
    rotate_with_signs(x, &random_signs(n, sign_seed))
}

/// Inverse of [`hadamard_rotate`], truncated back to `len` values.
pub fn hadamard_unrotate<T: Scalar>(y: &[T], sign_seed: u64, len: usize) -> Vec<T> {
    unrotate_with_signs(y, &random_signs(y.len(), sign_seed), len)
}

pub fn rotate_with_signs<T: Scalar>(x: &[T], signs: &[T]) -> Vec<T> {
    let n = signs.len();
    assert!(n.is_power_of_two() && x.len() <= n, "signs must cover the padded length");
    let mut v: Vec<T> = (0..n).map(|i| x.get(i).map_or(T::zero(), |&xi| xi * signs[i])).collect();
    fwht_normalized(&mut v);
    v
}

pub fn unrotate_with_signs<T: Scalar>(y: &[T], signs: &[T], len: usize) -> Vec<T> {
    assert_eq!(y.len(), signs.len());
    let mut v = y.to_vec();
    // The normalised transform is its own inverse.
    fwht_normalized(&mut v);
    v.iter().zip(signs).take(len).map(|(&a, &s)| a * s).collect()
}

fn fwht_normalized<T: Scalar>(v: &mut [T]) {
    let n = v.len();
    let mut h = 1;
    while h < n {
        for block in v.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
    let scale = T::one() / T::of(n as f64).sqrt();
    v.iter_mut().for_each(|a| *a *= scale);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn h2_of_unit_vector() {
        let y = rotate_with_signs(&[1.0f64, 0.0], &[1.0, 1.0]);
        let r = 1.0 / 2f64.sqrt();
        assert!((y[0] - r).abs() < 1e-15 && (y[1] - r).abs() < 1e-15);
    }

    #[test]
    fn h4_of_ones() {
        let y = rotate_with_signs(&[1.0f64; 4], &[1.0; 4]);
        assert_eq!(y, vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn norm_preserved_and_inverse_exact() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..100).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y = hadamard_rotate(&x, 42);
        assert_eq!(y.len(), 128);
        let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((nx - ny).abs() < 1e-10);
        let back = hadamard_unrotate(&y, 42, 100);
        assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn seed_changes_signs() {
        assert_ne!(random_signs::<f64>(64, 1), random_signs::<f64>(64, 2));
        assert_eq!(random_signs::<f64>(64, 1), random_signs::<f64>(64, 1));
    }
}
