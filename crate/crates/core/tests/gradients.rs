//! Analytic gradients against central finite differences.

use fedafd_core::model::{loss_and_grad, Architecture, Batch, LayerSpec, ModelParams};
use fedafd_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
/// Denominator floor so coordinates with vanishing gradient compare absolutely.
const FLOOR: f64 = 1e-5;

fn random_batch(shape: &[usize], n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Batch<f64> {
    let size: usize = shape.iter().product();
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let xs = (0..n * size).map(|_| rng.random_range(-1.5..1.5)).collect();
    let ys = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(Tensor::new(full, xs).unwrap(), ys).unwrap()
}

/// Worst relative error over every parameter, in `ModelParams::tensors` order.
fn worst_error(arch: &Architecture, params: &ModelParams<f64>, batch: &Batch<f64>) -> (f64, usize, usize) {
    let (_, grads) = loss_and_grad(arch, params, batch).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().map(|t| t.values().to_vec()).collect();
    let mut worst = (0.0, 0, 0);
    for (ti, tensor) in analytic.iter().enumerate() {
        for (j, &a) in tensor.iter().enumerate() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.tensors_mut().nth(ti).unwrap().values_mut()[j] += H;
            minus.tensors_mut().nth(ti).unwrap().values_mut()[j] -= H;
            let lp = loss_and_grad(arch, &plus, batch).unwrap().0;
            let lm = loss_and_grad(arch, &minus, batch).unwrap().0;
            let numeric = (lp - lm) / (2.0 * H);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if rel > worst.0 {
                worst = (rel, ti, j);
            }
        }
    }
    worst
}

fn check(name: &str, arch: &Architecture, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Zero initial biases can put a ReLU input exactly on its kink.
        let mut params = ModelParams::init(arch, &mut rng);
        for layer in &mut params.layers {
            for b in layer.biases.values_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        let batch = random_batch(arch.input_shape(), 5, arch.num_classes(), &mut rng);
        let (rel, ti, j) = worst_error(arch, &params, &batch);
        assert!(rel <= REL_TOL, "{name} seed {seed}: tensor {ti} coordinate {j} relative error {rel:e}");
    }
}

#[test]
fn dense_mlp_matches_finite_differences() {
    let arch = Architecture::mlp(6, &[5, 4], 3).unwrap();
    check("mlp", &arch, 0..20);
}

#[test]
fn small_cnn_matches_finite_differences() {
    let arch = Architecture::cnn(6, 2, 5, 3).unwrap();
    check("cnn", &arch, 0..20);
}

#[test]
fn multi_channel_conv_stack_matches_finite_differences() {
    let arch = Architecture::new(
        vec![2, 7, 7],
        vec![
            LayerSpec::conv2d(2, 3, 2, 3).prunable(),
            LayerSpec::relu(),
            LayerSpec::max_pool(),
            LayerSpec::conv2d(3, 2, 2, 1),
            LayerSpec::relu(),
            LayerSpec::dense(2 * 2 * 2, 4),
            LayerSpec::softmax(),
        ],
    )
    .unwrap();
    check("conv stack", &arch, 0..20);
}
