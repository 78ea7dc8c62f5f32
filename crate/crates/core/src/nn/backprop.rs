//! Forward pass, softmax cross-entropy, reverse-mode gradients and the
//! forward-over-reverse mixed derivative `D_theta(grad_x L)[v]`.

use super::kernels::{self, ConvDims};
use super::{Activation, Batch, GradSet, Layer, ModelSpec, NnError, ParamSet};
use crate::tensor::{numel, Tensor};

/// Loss, logits and gradients with respect to parameters and inputs from one pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f32,
    pub logits: Tensor,
    pub params: GradSet,
    pub input: Tensor,
}

struct Trace {
    batch: usize,
    /// `acts[i]` is the (whole-batch) input of layer `i`; the last entry holds the logits.
    acts: Vec<Vec<f32>>,
    /// Per-sample argmax indices for pooling layers, empty elsewhere.
    pool_idx: Vec<Vec<usize>>,
    probs: Vec<f32>,
    loss: f32,
}

pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Vec<f32> {
    let mut t = vec![0.0; labels.len() * classes];
    for (b, &l) in labels.iter().enumerate() {
        t[b * classes + l] = 1.0;
    }
    t
}

fn check_inputs(spec: &ModelSpec, params: &ParamSet, inputs: &Tensor) -> Result<usize, NnError> {
    spec.check_params(params)?;
    let shape = inputs.shape();
    if shape.len() < 2 || shape[1..] != *spec.input_shape() {
        return Err(NnError::InputShape {
            expected: spec.input_shape().to_vec(),
            got: shape.get(1..).unwrap_or_default().to_vec(),
        });
    }
    Ok(shape[0])
}

fn check_targets(spec: &ModelSpec, batch: usize, targets: &[f32]) -> Result<(), NnError> {
    if targets.len() != batch * spec.classes() {
        return Err(NnError::BatchSize {
            inputs: batch,
            labels: targets.len() / spec.classes().max(1),
        });
    }
    Ok(())
}

fn weights<'a>(spec: &ModelSpec, params: &'a ParamSet, layer: usize) -> (&'a [f32], &'a [f32]) {
    let slot = spec.slot(layer).expect("parameterized layer");
    (params.tensor(slot).data(), params.tensor(slot + 1).data())
}

fn conv_dims(spec: &ModelSpec, layer: usize) -> ConvDims {
    let Layer::Conv2d {
        in_channels,
        out_channels,
        kernel,
    } = spec.layers()[layer]
    else {
        unreachable!("conv dims requested for non-conv layer");
    };
    let s = spec.layer_input_shape(layer);
    ConvDims {
        cin: in_channels,
        h: s[1],
        w: s[2],
        cout: out_channels,
        k: kernel,
    }
}

fn forward(spec: &ModelSpec, params: &ParamSet, inputs: &[f32], batch: usize, targets: &[f32]) -> Trace {
    let mut acts = vec![inputs.to_vec()];
    let mut pool_idx = Vec::with_capacity(spec.layers().len());
    for (i, layer) in spec.layers().iter().enumerate() {
        let in_shape = spec.layer_input_shape(i);
        let (n_in, n_out) = (numel(in_shape), numel(spec.layer_input_shape(i + 1)));
        let x = &acts[i];
        let mut y = vec![0.0f32; batch * n_out];
        let mut idx = Vec::new();
        match *layer {
            Layer::Dense { .. } => {
                let (w, b) = weights(spec, params, i);
                for s in 0..batch {
                    kernels::dense_forward(w, Some(b), &x[s * n_in..(s + 1) * n_in], &mut y[s * n_out..(s + 1) * n_out]);
                }
            }
            Layer::Conv2d { .. } => {
                let (w, b) = weights(spec, params, i);
                let d = conv_dims(spec, i);
                for s in 0..batch {
                    kernels::conv_forward(d, w, Some(b), &x[s * n_in..(s + 1) * n_in], &mut y[s * n_out..(s + 1) * n_out]);
                }
            }
            Layer::MaxPool2 => {
                idx = vec![0usize; batch * n_out];
                for s in 0..batch {
                    kernels::maxpool_forward(
                        in_shape[0],
                        in_shape[1],
                        in_shape[2],
                        &x[s * n_in..(s + 1) * n_in],
                        &mut y[s * n_out..(s + 1) * n_out],
                        &mut idx[s * n_out..(s + 1) * n_out],
                    );
                }
            }
            Layer::Activation {
                function: Activation::Relu,
            } => {
                for (yv, &xv) in y.iter_mut().zip(x) {
                    *yv = xv.max(0.0);
                }
            }
            Layer::Activation {
                function: Activation::Tanh,
            } => {
                for (yv, &xv) in y.iter_mut().zip(x) {
                    *yv = xv.tanh();
                }
            }
            Layer::Flatten => y.copy_from_slice(x),
        }
        acts.push(y);
        pool_idx.push(idx);
    }

    let classes = spec.classes();
    let logits = acts.last().expect("logits");
    let mut probs = vec![0.0f32; logits.len()];
    let mut loss = 0.0f64;
    for s in 0..batch {
        let z = &logits[s * classes..(s + 1) * classes];
        let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = z.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        for c in 0..classes {
            probs[s * classes + c] = (z[c] - lse).exp();
            let t = targets[s * classes + c];
            if t != 0.0 {
                loss -= f64::from(t * (z[c] - lse));
            }
        }
    }
    Trace {
        batch,
        acts,
        pool_idx,
        probs,
        loss: (loss / batch as f64) as f32,
    }
}

/// d(mean CE)/d(logits) = (p - t) / B.
fn logit_grad(trace: &Trace, targets: &[f32]) -> Vec<f32> {
    let inv = 1.0 / trace.batch as f32;
    trace.probs.iter().zip(targets).map(|(p, t)| (p - t) * inv).collect()
}

fn reverse(spec: &ModelSpec, params: &ParamSet, trace: &Trace, targets: &[f32]) -> (GradSet, Vec<f32>) {
    let batch = trace.batch;
    let mut grads = params.zeros_like();
    let mut g = logit_grad(trace, targets);
    for (i, layer) in spec.layers().iter().enumerate().rev() {
        let (n_in, n_out) = (numel(spec.layer_input_shape(i)), numel(spec.layer_input_shape(i + 1)));
        let x = &trace.acts[i];
        let mut gx = vec![0.0f32; batch * n_in];
        match *layer {
            Layer::Dense { .. } => {
                let (w, _) = weights(spec, params, i);
                let slot = spec.slot(i).expect("slot");
                let (gw, gb) = weight_grads_mut(&mut grads, slot);
                for s in 0..batch {
                    let gy = &g[s * n_out..(s + 1) * n_out];
                    kernels::dense_backward_params(&x[s * n_in..(s + 1) * n_in], gy, gw, gb);
                    kernels::dense_backward_input(w, gy, &mut gx[s * n_in..(s + 1) * n_in]);
                }
            }
            Layer::Conv2d { .. } => {
                let (w, _) = weights(spec, params, i);
                let d = conv_dims(spec, i);
                let slot = spec.slot(i).expect("slot");
                let (gw, gb) = weight_grads_mut(&mut grads, slot);
                for s in 0..batch {
                    let gy = &g[s * n_out..(s + 1) * n_out];
                    kernels::conv_backward_params(d, &x[s * n_in..(s + 1) * n_in], gy, gw, gb);
                    kernels::conv_backward_input(d, w, gy, &mut gx[s * n_in..(s + 1) * n_in]);
                }
            }
            _ => route_elementwise(layer, trace, i, &g, &mut gx, n_in, n_out),
        }
        g = gx;
    }
    (grads, g)
}

/// Backward step for the parameter-free layers.
fn route_elementwise(layer: &Layer, trace: &Trace, i: usize, g: &[f32], gx: &mut [f32], n_in: usize, n_out: usize) {
    match *layer {
        Layer::MaxPool2 => {
            let idx = &trace.pool_idx[i];
            for s in 0..trace.batch {
                for o in 0..n_out {
                    gx[s * n_in + idx[s * n_out + o]] += g[s * n_out + o];
                }
            }
        }
        Layer::Activation {
            function: Activation::Relu,
        } => {
            for ((gxv, &gv), &xv) in gx.iter_mut().zip(g).zip(&trace.acts[i]) {
                *gxv = if xv > 0.0 { gv } else { 0.0 };
            }
        }
        Layer::Activation {
            function: Activation::Tanh,
        } => {
            for ((gxv, &gv), &yv) in gx.iter_mut().zip(g).zip(&trace.acts[i + 1]) {
                *gxv = gv * (1.0 - yv * yv);
            }
        }
        Layer::Flatten => gx.copy_from_slice(g),
        Layer::Dense { .. } | Layer::Conv2d { .. } => unreachable!("parameterized layer"),
    }
}

fn weight_grads_mut(grads: &mut GradSet, slot: usize) -> (&mut [f32], &mut [f32]) {
    let (head, tail) = grads.entries_mut().split_at_mut(slot + 1);
    (head[slot].tensor.data_mut(), tail[0].tensor.data_mut())
}

/// Tangents of every activation along the parameter direction `dir`.
fn tangent_forward(spec: &ModelSpec, params: &ParamSet, dir: &ParamSet, trace: &Trace) -> Vec<Vec<f32>> {
    let batch = trace.batch;
    let mut tan = vec![vec![0.0f32; trace.acts[0].len()]];
    for (i, layer) in spec.layers().iter().enumerate() {
        let (n_in, n_out) = (numel(spec.layer_input_shape(i)), numel(spec.layer_input_shape(i + 1)));
        let x = &trace.acts[i];
        let dx = &tan[i];
        let mut dy = vec![0.0f32; batch * n_out];
        match *layer {
            Layer::Dense { .. } | Layer::Conv2d { .. } => {
                let (w, _) = weights(spec, params, i);
                let (v, vb) = weights(spec, dir, i);
                let mut tmp = vec![0.0f32; n_out];
                for s in 0..batch {
                    let xs = &x[s * n_in..(s + 1) * n_in];
                    let dxs = &dx[s * n_in..(s + 1) * n_in];
                    let out = &mut dy[s * n_out..(s + 1) * n_out];
                    if let Layer::Conv2d { .. } = layer {
                        let d = conv_dims(spec, i);
                        kernels::conv_forward(d, v, Some(vb), xs, out);
                        if i > 0 {
                            kernels::conv_forward(d, w, None, dxs, &mut tmp);
                            out.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
                        }
                    } else {
                        kernels::dense_forward(v, Some(vb), xs, out);
                        if i > 0 {
                            kernels::dense_forward(w, None, dxs, &mut tmp);
                            out.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Layer::MaxPool2 => {
                let idx = &trace.pool_idx[i];
                for s in 0..batch {
                    for o in 0..n_out {
                        dy[s * n_out + o] = dx[s * n_in + idx[s * n_out + o]];
                    }
                }
            }
            Layer::Activation {
                function: Activation::Relu,
            } => {
                for ((d, &dxv), &xv) in dy.iter_mut().zip(dx).zip(x) {
                    *d = if xv > 0.0 { dxv } else { 0.0 };
                }
            }
            Layer::Activation {
                function: Activation::Tanh,
            } => {
                for ((d, &dxv), &yv) in dy.iter_mut().zip(dx).zip(&trace.acts[i + 1]) {
                    *d = dxv * (1.0 - yv * yv);
                }
            }
            Layer::Flatten => dy.copy_from_slice(dx),
        }
        tan.push(dy);
    }
    tan
}

/// Runs the reverse pass and its tangent together; returns the tangent of the input gradient.
fn mixed_reverse(
    spec: &ModelSpec,
    params: &ParamSet,
    dir: &ParamSet,
    trace: &Trace,
    tan: &[Vec<f32>],
    targets: &[f32],
) -> Vec<f32> {
    let batch = trace.batch;
    let classes = spec.classes();
    let mut g = logit_grad(trace, targets);
    // d/dt of (p - t)/B with fixed targets: p * (dz - <p, dz>) / B.
    let dz = tan.last().expect("logit tangent");
    let mut dg = vec![0.0f32; g.len()];
    let inv = 1.0 / batch as f32;
    for s in 0..batch {
        let p = &trace.probs[s * classes..(s + 1) * classes];
        let dzs = &dz[s * classes..(s + 1) * classes];
        let mean: f32 = p.iter().zip(dzs).map(|(a, b)| a * b).sum();
        for c in 0..classes {
            dg[s * classes + c] = p[c] * (dzs[c] - mean) * inv;
        }
    }

    for (i, layer) in spec.layers().iter().enumerate().rev() {
        let (n_in, n_out) = (numel(spec.layer_input_shape(i)), numel(spec.layer_input_shape(i + 1)));
        let mut gx = vec![0.0f32; batch * n_in];
        let mut dgx = vec![0.0f32; batch * n_in];
        match *layer {
            Layer::Dense { .. } | Layer::Conv2d { .. } => {
                let (w, _) = weights(spec, params, i);
                let (v, _) = weights(spec, dir, i);
                for s in 0..batch {
                    let gy = &g[s * n_out..(s + 1) * n_out];
                    let dgy = &dg[s * n_out..(s + 1) * n_out];
                    let range = s * n_in..(s + 1) * n_in;
                    if let Layer::Conv2d { .. } = layer {
                        let d = conv_dims(spec, i);
                        kernels::conv_backward_input(d, w, gy, &mut gx[range.clone()]);
                        kernels::conv_backward_input(d, v, gy, &mut dgx[range.clone()]);
                        kernels::conv_backward_input(d, w, dgy, &mut dgx[range]);
                    } else {
                        kernels::dense_backward_input(w, gy, &mut gx[range.clone()]);
                        kernels::dense_backward_input(v, gy, &mut dgx[range.clone()]);
                        kernels::dense_backward_input(w, dgy, &mut dgx[range]);
                    }
                }
            }
            Layer::Activation {
                function: Activation::Tanh,
            } => {
                let y = &trace.acts[i + 1];
                let dy = &tan[i + 1];
                for k in 0..gx.len() {
                    let slope = 1.0 - y[k] * y[k];
                    gx[k] = g[k] * slope;
                    dgx[k] = dg[k] * slope - 2.0 * g[k] * y[k] * dy[k];
                }
            }
            _ => {
                route_elementwise(layer, trace, i, &g, &mut gx, n_in, n_out);
                route_elementwise(layer, trace, i, &dg, &mut dgx, n_in, n_out);
            }
        }
        g = gx;
        dg = dgx;
    }
    dg
}

fn logits_tensor(spec: &ModelSpec, trace: &Trace) -> Tensor {
    Tensor::new(vec![trace.batch, spec.classes()], trace.acts.last().expect("logits").clone())
        .expect("logit shape")
}

fn input_tensor(inputs: &Tensor, data: Vec<f32>) -> Tensor {
    Tensor::new(inputs.shape().to_vec(), data).expect("input shape")
}

/// Logits and mean cross-entropy of `batch`.
pub fn forward_loss(spec: &ModelSpec, params: &ParamSet, batch: &Batch) -> Result<(Tensor, f32), NnError> {
    let n = check_inputs(spec, params, &batch.inputs)?;
    batch.check(spec)?;
    let targets = one_hot(&batch.labels, spec.classes());
    let trace = forward(spec, params, batch.inputs.data(), n, &targets);
    Ok((logits_tensor(spec, &trace), trace.loss))
}

pub fn full_gradients(spec: &ModelSpec, params: &ParamSet, batch: &Batch) -> Result<Gradients, NnError> {
    batch.check(spec)?;
    soft_target_gradients(spec, params, &batch.inputs, &one_hot(&batch.labels, spec.classes()))
}

/// Gradients against per-sample target distributions (`batch x classes`, rows summing to one).
pub fn soft_target_gradients(
    spec: &ModelSpec,
    params: &ParamSet,
    inputs: &Tensor,
    targets: &[f32],
) -> Result<Gradients, NnError> {
    let n = check_inputs(spec, params, inputs)?;
    check_targets(spec, n, targets)?;
    let trace = forward(spec, params, inputs.data(), n, targets);
    let (grads, gx) = reverse(spec, params, &trace, targets);
    Ok(Gradients {
        loss: trace.loss,
        logits: logits_tensor(spec, &trace),
        params: grads,
        input: input_tensor(inputs, gx),
    })
}

/// Gradient of the mean batch loss with respect to every parameter tensor.
pub fn backward(spec: &ModelSpec, params: &ParamSet, batch: &Batch) -> Result<GradSet, NnError> {
    full_gradients(spec, params, batch).map(|g| g.params)
}

/// Gradient of the mean batch loss with respect to the input pixels.
pub fn input_gradient(spec: &ModelSpec, params: &ParamSet, batch: &Batch) -> Result<Tensor, NnError> {
    full_gradients(spec, params, batch).map(|g| g.input)
}

/// Directional derivative of the input gradient along the parameter direction
/// `direction`, i.e. `grad_x <grad_theta L, direction>`.
///
/// Exact wherever the loss is twice differentiable; ReLU and max-pool kinks
/// contribute zero curvature.
pub fn mixed_input_gradient(
    spec: &ModelSpec,
    params: &ParamSet,
    inputs: &Tensor,
    targets: &[f32],
    direction: &ParamSet,
) -> Result<Tensor, NnError> {
    let n = check_inputs(spec, params, inputs)?;
    spec.check_params(direction)?;
    check_targets(spec, n, targets)?;
    let trace = forward(spec, params, inputs.data(), n, targets);
    let tan = tangent_forward(spec, params, direction, &trace);
    Ok(input_tensor(inputs, mixed_reverse(spec, params, direction, &trace, &tan, targets)))
}
