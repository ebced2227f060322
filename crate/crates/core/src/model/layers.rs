use super::{Architecture, Batch, LayerKind, LayerParams, ModelError, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Activations recorded during [`forward`] for use by the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Scalar> {
    /// Input to every layer, batch-leading.
    inputs: Vec<Vec<T>>,
    /// For each max-pool layer, the flat input index chosen for every output.
    pool_argmax: Vec<Option<Vec<usize>>>,
    batch: usize,
}

/// Runs the network and returns pre-softmax logits `[batch, classes]`.
pub fn forward<T: Scalar>(
    arch: &Architecture,
    params: &ModelParams<T>,
    batch: &Batch<T>,
) -> Result<(Tensor<T>, ForwardCache<T>), ModelError> {
    params.check(arch)?;
    let n = batch.len();
    if n == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if batch.inputs.shape()[1..] != *arch.input_shape() {
        return Err(ModelError::ShapeMismatch {
            layer: 0,
            detail: format!(
                "input examples have shape {:?}, architecture expects {:?}",
                &batch.inputs.shape()[1..],
                arch.input_shape()
            ),
        });
    }
    let classes = arch.num_classes();
    if let Some(&label) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(ModelError::LabelOutOfRange { label, classes });
    }

    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(arch.layers().len()),
        pool_argmax: Vec::with_capacity(arch.layers().len()),
        batch: n,
    };
    let mut x = batch.inputs.values().to_vec();
    let mut p = 0;
    for (i, spec) in arch.layers().iter().enumerate() {
        let in_shape = arch.input_shape_of(i);
        let mut argmax = None;
        let y = match spec.kind {
            LayerKind::Dense { in_units, out_units } => {
                let y = dense_forward(&params.layers[p], &x, n, in_units, out_units);
                p += 1;
                y
            }
            LayerKind::Conv2d { .. } => {
                let y = conv_forward(&params.layers[p], &x, n, in_shape, arch.output_shape(i));
                p += 1;
                y
            }
            LayerKind::MaxPool2x2 => {
                let (y, idx) = pool_forward(&x, n, in_shape, arch.output_shape(i));
                argmax = Some(idx);
                y
            }
            LayerKind::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
            LayerKind::SoftmaxOutput => x.clone(),
        };
        cache.inputs.push(std::mem::replace(&mut x, y));
        cache.pool_argmax.push(argmax);
    }
    let logits = Tensor::new(vec![n, classes], x)?;
    Ok((logits, cache))
}

/// Backpropagates `d_logits` (already scaled by 1/batch) and returns
/// parameter gradients.
pub(super) fn backward<T: Scalar>(
    arch: &Architecture,
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    d_logits: Vec<T>,
) -> ModelParams<T> {
    let n = cache.batch;
    let mut grads = params.zeros_like();
    let mut p = params.layers.len();
    let mut dy = d_logits;
    for i in (0..arch.layers().len()).rev() {
        let x = &cache.inputs[i];
        let in_shape = arch.input_shape_of(i);
        dy = match arch.layers()[i].kind {
            LayerKind::Dense { in_units, out_units } => {
                p -= 1;
                dense_backward(&params.layers[p], &mut grads.layers[p], x, &dy, n, in_units, out_units, i > 0)
            }
            LayerKind::Conv2d { .. } => {
                p -= 1;
                conv_backward(
                    &params.layers[p],
                    &mut grads.layers[p],
                    x,
                    &dy,
                    n,
                    in_shape,
                    arch.output_shape(i),
                    i > 0,
                )
            }
            LayerKind::MaxPool2x2 => {
                let idx = cache.pool_argmax[i].as_ref().expect("pool cache");
                let mut dx = vec![T::zero(); x.len()];
                for (&j, &g) in idx.iter().zip(&dy) {
                    dx[j] += g;
                }
                dx
            }
            LayerKind::Relu => x
                .iter()
                .zip(&dy)
                .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                .collect(),
            LayerKind::SoftmaxOutput => dy,
        };
    }
    grads
}

fn dense_forward<T: Scalar>(lp: &LayerParams<T>, x: &[T], n: usize, fin: usize, fout: usize) -> Vec<T> {
    let w = lp.weights.values();
    let b = lp.biases.values();
    let mut y = Vec::with_capacity(n * fout);
    for row in x.chunks_exact(fin) {
        for o in 0..fout {
            let wr = &w[o * fin..(o + 1) * fin];
            let mut acc = b[o];
            for (&wi, &xi) in wr.iter().zip(row) {
                acc += wi * xi;
            }
            y.push(acc);
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn dense_backward<T: Scalar>(
    lp: &LayerParams<T>,
    g: &mut LayerParams<T>,
    x: &[T],
    dy: &[T],
    n: usize,
    fin: usize,
    fout: usize,
    need_dx: bool,
) -> Vec<T> {
    let w = lp.weights.values();
    {
        let gw = g.weights.values_mut();
        for (row, dyr) in x.chunks_exact(fin).zip(dy.chunks_exact(fout)) {
            for (o, &d) in dyr.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                for (gwi, &xi) in gw[o * fin..(o + 1) * fin].iter_mut().zip(row) {
                    *gwi += d * xi;
                }
            }
        }
    }
    let gb = g.biases.values_mut();
    for dyr in dy.chunks_exact(fout) {
        for (gbo, &d) in gb.iter_mut().zip(dyr) {
            *gbo += d;
        }
    }
    if !need_dx {
        return Vec::new();
    }
    let mut dx = vec![T::zero(); n * fin];
    for (dxr, dyr) in dx.chunks_exact_mut(fin).zip(dy.chunks_exact(fout)) {
        for (o, &d) in dyr.iter().enumerate() {
            for (dxi, &wi) in dxr.iter_mut().zip(&w[o * fin..(o + 1) * fin]) {
                *dxi += d * wi;
            }
        }
    }
    dx
}

fn conv_forward<T: Scalar>(lp: &LayerParams<T>, x: &[T], n: usize, in_shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    let (cin, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (cout, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let ws = lp.weights.shape();
    let (kh, kw) = (ws[2], ws[3]);
    let wt = lp.weights.values();
    let b = lp.biases.values();
    let mut y = vec![T::zero(); n * cout * oh * ow];
    for bi in 0..n {
        let xb = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
        for o in 0..cout {
            let yo = &mut y[((bi * cout) + o) * oh * ow..((bi * cout) + o + 1) * oh * ow];
            yo.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..cin {
                let xc = &xb[c * h * w..(c + 1) * h * w];
                for i in 0..kh {
                    for j in 0..kw {
                        let k = wt[((o * cin + c) * kh + i) * kw + j];
                        for r in 0..oh {
                            let xr = &xc[(r + i) * w + j..(r + i) * w + j + ow];
                            for (yv, &xv) in yo[r * ow..(r + 1) * ow].iter_mut().zip(xr) {
                                *yv += k * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    lp: &LayerParams<T>,
    g: &mut LayerParams<T>,
    x: &[T],
    dy: &[T],
    n: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    need_dx: bool,
) -> Vec<T> {
    let (cin, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (cout, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let ws = lp.weights.shape();
    let (kh, kw) = (ws[2], ws[3]);
    let wt = lp.weights.values();
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    for bi in 0..n {
        for o in 0..cout {
            let dyo = &dy[((bi * cout) + o) * oh * ow..((bi * cout) + o + 1) * oh * ow];
            g.biases.values_mut()[o] += dyo.iter().copied().sum::<T>();
            for c in 0..cin {
                let base = (bi * cin + c) * h * w;
                for i in 0..kh {
                    for j in 0..kw {
                        let widx = ((o * cin + c) * kh + i) * kw + j;
                        let k = wt[widx];
                        let mut acc = T::zero();
                        for r in 0..oh {
                            let off = base + (r + i) * w + j;
                            let dyr = &dyo[r * ow..(r + 1) * ow];
                            for (&d, &xv) in dyr.iter().zip(&x[off..off + ow]) {
                                acc += d * xv;
                            }
                            if need_dx {
                                for (dxv, &d) in dx[off..off + ow].iter_mut().zip(dyr) {
                                    *dxv += d * k;
                                }
                            }
                        }
                        g.weights.values_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    dx
}

fn pool_forward<T: Scalar>(x: &[T], n: usize, in_shape: &[usize], out_shape: &[usize]) -> (Vec<T>, Vec<usize>) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for r in 0..oh {
            for s in 0..ow {
                let mut best = base + 2 * r * w + 2 * s;
                for (dr, ds) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * r + dr) * w + 2 * s + ds;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                y.push(x[best]);
                idx.push(best);
            }
        }
    }
    (y, idx)
}
