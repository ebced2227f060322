use rand::seq::SliceRandom;
use rand::Rng;

use super::layers::{backward, forward};
use super::{Architecture, Batch, ModelError, ModelParams};
use crate::scalar::Scalar;

/// Mean softmax cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad<T: Scalar>(
    arch: &Architecture,
    params: &ModelParams<T>,
    batch: &Batch<T>,
) -> Result<(T, ModelParams<T>), ModelError> {
    let (logits, cache) = forward(arch, params, batch)?;
    let classes = arch.num_classes();
    let n = batch.len();
    let inv_n = T::one() / T::of(n as f64);
    let mut d = Vec::with_capacity(n * classes);
    let mut total = T::zero();
    for (row, &label) in logits.values().chunks_exact(classes).zip(&batch.labels) {
        let (log_z, probs) = log_softmax(row);
        total += log_z - row[label];
        for (k, p) in probs.into_iter().enumerate() {
            let target = if k == label { T::one() } else { T::zero() };
            d.push((p - target) * inv_n);
        }
    }
    let grads = backward(arch, params, &cache, d);
    Ok((total * inv_n, grads))
}

/// Returns `(log sum exp(row), softmax(row))`.
fn log_softmax<T: Scalar>(row: &[T]) -> (T, Vec<T>) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: T = exps.iter().copied().sum();
    let probs = exps.into_iter().map(|e| e / s).collect();
    (m + s.ln(), probs)
}

/// Plain SGD: `param - lr * grad` for every coordinate.
pub fn sgd_step<T: Scalar>(params: &ModelParams<T>, grads: &ModelParams<T>, lr: T) -> Result<ModelParams<T>, ModelError> {
    params.zip_with(grads, |p, g| p - lr * g)
}

/// Runs `epochs` passes of shuffled mini-batch SGD over `shard` and returns
/// the updated parameters with the mean training loss of the final epoch.
///
/// Indices inside each mini-batch are kept in ascending order so a batch
/// covering the whole shard reproduces [`loss_and_grad`] on the shard exactly.
pub fn local_train<T: Scalar, R: Rng + ?Sized>(
    arch: &Architecture,
    params: &ModelParams<T>,
    shard: &Batch<T>,
    epochs: usize,
    batch_size: usize,
    lr: T,
    rng: &mut R,
) -> Result<(ModelParams<T>, T), ModelError> {
    if shard.is_empty() {
        return Err(ModelError::EmptyShard);
    }
    if epochs == 0 {
        return Err(ModelError::NonPositive("epochs"));
    }
    if batch_size == 0 {
        return Err(ModelError::NonPositive("batch_size"));
    }
    let mut params = params.clone();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut epoch_loss = T::zero();
    for _ in 0..epochs {
        order.shuffle(rng);
        epoch_loss = T::zero();
        for chunk in order.chunks(batch_size) {
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            let mb = shard.select(&idx);
            let (loss, grads) = loss_and_grad(arch, &params, &mb)?;
            epoch_loss += loss * T::of(idx.len() as f64);
            params = sgd_step(&params, &grads, lr)?;
        }
    }
    Ok((params, epoch_loss / T::of(shard.len() as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Top-1 accuracy and mean cross-entropy over `data`.
pub fn evaluate<T: Scalar>(arch: &Architecture, params: &ModelParams<T>, data: &Batch<T>) -> Result<Evaluation, ModelError> {
    const CHUNK: usize = 512;
    let classes = arch.num_classes();
    let mut correct = 0usize;
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let b = data.select(chunk);
        let (logits, _) = forward(arch, params, &b)?;
        for (row, &label) in logits.values().chunks_exact(classes).zip(&b.labels) {
            let (log_z, _) = log_softmax(row);
            loss += (log_z - row[label]).as_f64();
            let best = (0..classes)
                .reduce(|a, k| if row[k] > row[a] { k } else { a })
                .unwrap_or(0);
            if best == label {
                correct += 1;
            }
        }
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerParams, LayerSpec};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec_params(w: Vec<f64>) -> ModelParams<f64> {
        ModelParams {
            layers: vec![LayerParams {
                weights: Tensor::new(vec![1, w.len()], w).unwrap(),
                biases: Tensor::vector(vec![0.0]),
            }],
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let p = vec_params(vec![1.0, 2.0]);
        let g = vec_params(vec![0.5, -1.0]);
        let out = sgd_step(&p, &g, 0.1).unwrap();
        assert_eq!(out.layers[0].weights.values(), &[1.0 - 0.1 * 0.5, 2.0 + 0.1 * 1.0]);
        assert!((out.layers[0].weights[0] - 0.95).abs() < 1e-15);
        assert!((out.layers[0].weights[1] - 2.1).abs() < 1e-15);
    }

    #[test]
    fn sgd_identity_cases() {
        let p = vec_params(vec![1.0, 2.0]);
        let g = vec_params(vec![0.5, -1.0]);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
        assert_eq!(sgd_step(&p, &p.zeros_like(), 0.3).unwrap(), p);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let p = vec_params(vec![1.0, 2.0]);
        let g = vec_params(vec![1.0]);
        assert!(sgd_step(&p, &g, 0.1).is_err());
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let arch = Architecture::new(vec![2], vec![LayerSpec::dense(2, 5), LayerSpec::softmax()]).unwrap();
        let p = ModelParams::<f64>::zeros(&arch);
        let b = Batch::new(Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 1.0]]).unwrap(), vec![1, 4]).unwrap();
        let (loss, _) = loss_and_grad(&arch, &p, &b).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit_has_vanishing_loss() {
        let arch = Architecture::new(vec![1], vec![LayerSpec::dense(1, 2), LayerSpec::softmax()]).unwrap();
        let p = ModelParams {
            layers: vec![LayerParams {
                weights: Tensor::new(vec![2, 1], vec![40.0, -40.0]).unwrap(),
                biases: Tensor::vector(vec![0.0, 0.0]),
            }],
        };
        let b = Batch::new(Tensor::new(vec![1, 1], vec![1.0]).unwrap(), vec![0]).unwrap();
        let (loss, grads) = loss_and_grad(&arch, &p, &b).unwrap();
        assert!(loss < 1e-6);
        assert!(grads.tensors().flat_map(|t| t.values()).all(|g: &f64| g.abs() < 1e-6));
    }

    fn toy_shard(rng: &mut ChaCha8Rng, n: usize) -> Batch<f64> {
        use rand::Rng;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -1.5 } else { 1.5 };
            x.push(centre + rng.random_range(-0.5..0.5));
            x.push(centre + rng.random_range(-0.5..0.5));
            y.push(c);
        }
        Batch::new(Tensor::new(vec![n, 2], x).unwrap(), y).unwrap()
    }

    #[test]
    fn full_batch_epoch_is_one_sgd_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let arch = Architecture::mlp(2, &[4], 2).unwrap();
        let p = ModelParams::<f64>::init(&arch, &mut rng);
        let shard = toy_shard(&mut rng, 7);
        let (trained, loss) = local_train(&arch, &p, &shard, 1, 32, 0.1, &mut rng).unwrap();
        let (l0, g) = loss_and_grad(&arch, &p, &shard).unwrap();
        assert_eq!(trained, sgd_step(&p, &g, 0.1).unwrap());
        assert!((loss - l0).abs() < 1e-15);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let arch = Architecture::mlp(2, &[8], 2).unwrap();
        let p = ModelParams::<f64>::init(&arch, &mut rng);
        let shard = toy_shard(&mut rng, 40);
        let (initial, _) = loss_and_grad(&arch, &p, &shard).unwrap();
        let run = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            local_train(&arch, &p, &shard, 20, 10, 0.1, &mut r).unwrap()
        };
        let (a, la) = run(1);
        let (b, lb) = run(1);
        assert_eq!(a, b);
        assert_eq!(la.to_bits(), lb.to_bits());
        let (fin, _) = loss_and_grad(&arch, &a, &shard).unwrap();
        assert!(fin < initial, "{fin} >= {initial}");
        assert!(la < initial);
    }

    #[test]
    fn empty_and_zero_arguments_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let arch = Architecture::mlp(2, &[3], 2).unwrap();
        let p = ModelParams::<f64>::zeros(&arch);
        let shard = toy_shard(&mut rng, 4);
        assert_eq!(
            local_train(&arch, &p, &shard, 0, 2, 0.1, &mut rng).unwrap_err(),
            ModelError::NonPositive("epochs")
        );
        assert_eq!(
            local_train(&arch, &p, &shard, 1, 0, 0.1, &mut rng).unwrap_err(),
            ModelError::NonPositive("batch_size")
        );
        let empty = Batch {
            inputs: Tensor::zeros(vec![1, 2]),
            labels: vec![],
        };
        assert_eq!(
            local_train(&arch, &p, &empty, 1, 2, 0.1, &mut rng).unwrap_err(),
            ModelError::EmptyShard
        );
    }

    #[test]
    fn evaluate_counts_top1() {
        let arch = Architecture::new(vec![2], vec![LayerSpec::dense(2, 2), LayerSpec::softmax()]).unwrap();
        let p = ModelParams {
            layers: vec![LayerParams {
                weights: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
                biases: Tensor::vector(vec![0.0, 0.0]),
            }],
        };
        let b = Batch::new(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap(),
            vec![0, 1, 1],
        )
        .unwrap();
        let e = evaluate(&arch, &p, &b).unwrap();
        assert!((e.accuracy - 2.0 / 3.0).abs() < 1e-15);
    }
}
