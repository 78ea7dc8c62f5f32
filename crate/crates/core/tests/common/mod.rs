//! Independent f64 reference network used as a finite-difference oracle.
//!
//! Written as plain loops over the layer list, sharing nothing with the library
//! kernels except the weight layout (`dense [out, in]`, `conv [out, in, k, k]`).

#![allow(dead_code)]

pub mod grad;

use fedquant::nn::{Activation, Layer};
use fedquant::{ModelSpec, ParamSet, Tensor};

pub type Params64 = Vec<Vec<f64>>;

pub fn params64(p: &ParamSet) -> Params64 {
    p.iter().map(|e| e.tensor.data().iter().map(|&v| f64::from(v)).collect()).collect()
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn one_hot(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        t[i * classes + l] = 1.0;
    }
    t
}

/// Logits of one sample plus its activation pattern (ReLU signs, pool winners).
pub fn forward_sample(spec: &ModelSpec, params: &Params64, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut shape = spec.input_shape().to_vec();
    let mut a = x.to_vec();
    let mut pattern = Vec::new();
    let mut slot = 0;
    for layer in spec.layers() {
        match *layer {
            Layer::Dense { inputs, outputs } => {
                let (w, b) = (&params[slot], &params[slot + 1]);
                slot += 2;
                a = (0..outputs)
                    .map(|o| b[o] + (0..inputs).map(|i| w[o * inputs + i] * a[i]).sum::<f64>())
                    .collect();
                shape = vec![outputs];
            }
            Layer::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
            } => {
                let (w, b) = (&params[slot], &params[slot + 1]);
                slot += 2;
                let (h, wd) = (shape[1], shape[2]);
                let (oh, ow) = (h - k + 1, wd - k + 1);
                let mut y = vec![0.0; cout * oh * ow];
                for o in 0..cout {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut s = b[o];
                            for c in 0..cin {
                                for p in 0..k {
                                    for q in 0..k {
                                        s += w[((o * cin + c) * k + p) * k + q] * a[(c * h + i + p) * wd + j + q];
                                    }
                                }
                            }
                            y[(o * oh + i) * ow + j] = s;
                        }
                    }
                }
                a = y;
                shape = vec![cout, oh, ow];
            }
            Layer::MaxPool2 => {
                let (c, h, wd) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / 2, wd / 2);
                let mut y = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let cells = [(0, 0), (0, 1), (1, 0), (1, 1)];
                            let (best, v) = cells
                                .iter()
                                .map(|&(di, dj)| a[(ch * h + 2 * i + di) * wd + 2 * j + dj])
                                .enumerate()
                                .fold((0, f64::NEG_INFINITY), |acc, (n, v)| if v > acc.1 { (n, v) } else { acc });
                            pattern.push(best);
                            y[(ch * oh + i) * ow + j] = v;
                        }
                    }
                }
                a = y;
                shape = vec![c, oh, ow];
            }
            Layer::Activation { function } => {
                for v in a.iter_mut() {
                    match function {
                        Activation::Relu => {
                            pattern.push(usize::from(*v > 0.0));
                            *v = v.max(0.0);
                        }
                        Activation::Tanh => *v = v.tanh(),
                    }
                }
            }
            Layer::Flatten => shape = vec![a.len()],
        }
    }
    (a, pattern)
}

/// Mean cross-entropy against soft targets, with the batch's activation pattern.
pub fn loss(spec: &ModelSpec, params: &Params64, xs: &[f64], targets: &[f64]) -> (f64, Vec<usize>) {
    let d = spec.input_len();
    let c = spec.classes();
    let n = xs.len() / d;
    let mut total = 0.0;
    let mut pattern = Vec::new();
    for s in 0..n {
        let (z, pat) = forward_sample(spec, params, &xs[s * d..(s + 1) * d]);
        pattern.extend(pat);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total -= (0..c).map(|k| targets[s * c + k] * (z[k] - lse)).sum::<f64>();
    }
    (total / n as f64, pattern)
}

/// Parameter gradients of [`loss`] for dense/activation stacks, by hand-written backprop.
pub fn mlp_param_grads(spec: &ModelSpec, params: &Params64, xs: &[f64], targets: &[f64]) -> Params64 {
    let d = spec.input_len();
    let c = spec.classes();
    let n = xs.len() / d;
    let mut grads: Params64 = params.iter().map(|p| vec![0.0; p.len()]).collect();
    for s in 0..n {
        // Forward keeping every layer input.
        let mut acts = vec![xs[s * d..(s + 1) * d].to_vec()];
        let mut slot = 0;
        for layer in spec.layers() {
            let a = acts.last().unwrap();
            let next = match *layer {
                Layer::Dense { inputs, outputs } => {
                    let (w, b) = (&params[slot], &params[slot + 1]);
                    slot += 2;
                    (0..outputs)
                        .map(|o| b[o] + (0..inputs).map(|i| w[o * inputs + i] * a[i]).sum::<f64>())
                        .collect()
                }
                Layer::Activation { function: Activation::Relu } => a.iter().map(|v| v.max(0.0)).collect(),
                Layer::Activation { function: Activation::Tanh } => a.iter().map(|v| v.tanh()).collect(),
                Layer::Flatten => a.clone(),
                _ => panic!("mlp_param_grads handles dense stacks only"),
            };
            acts.push(next);
        }
        let z = acts.last().unwrap();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = e.iter().sum();
        let mut g: Vec<f64> = (0..c).map(|k| (e[k] / sum - targets[s * c + k]) / n as f64).collect();
        for (li, layer) in spec.layers().iter().enumerate().rev() {
            let a = &acts[li];
            match *layer {
                Layer::Dense { inputs, outputs } => {
                    slot -= 2;
                    for o in 0..outputs {
                        grads[slot + 1][o] += g[o];
                        for i in 0..inputs {
                            grads[slot][o * inputs + i] += g[o] * a[i];
                        }
                    }
                    let w = &params[slot];
                    g = (0..inputs).map(|i| (0..outputs).map(|o| w[o * inputs + i] * g[o]).sum()).collect();
                }
                Layer::Activation { function: Activation::Relu } => {
                    g = g.iter().zip(a).map(|(gv, av)| if *av > 0.0 { *gv } else { 0.0 }).collect();
                }
                Layer::Activation { function: Activation::Tanh } => {
                    g = g.iter().zip(a).map(|(gv, av)| gv * (1.0 - av.tanh().powi(2))).collect();
                }
                _ => {}
            }
        }
    }
    grads
}

/// Squared distance between reference parameter gradients at `xs` and `target`.
pub fn match_loss(spec: &ModelSpec, params: &Params64, xs: &[f64], targets: &[f64], target: &Params64) -> f64 {
    mlp_param_grads(spec, params, xs, targets)
        .iter()
        .zip(target)
        .flat_map(|(a, b)| a.iter().zip(b))
        .map(|(x, y)| (x - y).powi(2))
        .sum()
}

/// Central difference of `f` in coordinate `i`; `None` when the activation
/// pattern differs between the two probes (a kink lies in between).
pub fn central_diff(
    x: &[f64],
    i: usize,
    h: f64,
    mut f: impl FnMut(&[f64]) -> (f64, Vec<usize>),
) -> Option<f64> {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let (fp, pat_p) = f(&p);
    p[i] = x[i] - h;
    let (fm, pat_m) = f(&p);
    (pat_p == pat_m).then(|| (fp - fm) / (2.0 * h))
}

/// `|a - b| <= abs` or `|a - b| <= rel * max(|a|, |b|)`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    let d = (a - b).abs();
    d <= abs || d <= rel * a.abs().max(b.abs())
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Default)]
pub struct Check {
    pub compared: usize,
    pub skipped: usize,
    pub failures: Vec<String>,
}

impl Check {
    pub fn record(&mut self, what: &str, i: usize, analytic: f64, numeric: Option<f64>, rel: f64, abs: f64) {
        match numeric {
            None => self.skipped += 1,
            Some(num) => {
                self.compared += 1;
                if !close(analytic, num, rel, abs) {
                    self.failures.push(format!("{what}[{i}]: analytic {analytic:e} vs numeric {num:e}"));
                }
            }
        }
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.compared > 0
    }
}

/// Largest round-trip error the codec may make on a tensor spanning `[lo, hi]`:
/// half a quantization step, derived here from the type bounds alone.
pub fn half_step(bits: fedquant::quant::BitWidth, mode: fedquant::quant::QuantMode, lo: f32, hi: f32) -> f64 {
    let (min_t, max_t) = (f64::from(bits.min_t()), f64::from(bits.max_t()));
    let (lo, hi) = (f64::from(lo), f64::from(hi));
    match mode {
        fedquant::quant::QuantMode::Scaled => {
            let mut s = f64::INFINITY;
            if lo < 0.0 {
                s = s.min(min_t / lo);
            }
            if hi > 0.0 {
                s = s.min(max_t / hi);
            }
            if s.is_infinite() { 0.0 } else { 0.5 / s }
        }
        fedquant::quant::QuantMode::MinCombined => 0.5 * (hi - lo) / (max_t - min_t),
    }
}

/// Slack for f32 storage of ranges and outputs.
pub fn float_slack(lo: f32, hi: f32) -> f64 {
    4.0 * f64::from(f32::EPSILON) * f64::from(lo.abs().max(hi.abs()))
}
