//! Gradient checks of the library against the f64 reference.

use fedquant::attack::{attack_gradient, GradientMethod};
use fedquant::nn::{full_gradients, init_params, Activation, Layer, ParamEntry};
use fedquant::{Batch, ModelSpec, ParamSet, Tensor};
use rand::Rng;

use super::{central_diff, loss, match_loss, mlp_param_grads, one_hot, params64, to_f64, Check, Params64};

pub const REL: f64 = 1e-2;
pub const ABS: f64 = 1e-4;

fn relu() -> Layer {
    Layer::Activation {
        function: Activation::Relu,
    }
}

fn tanh() -> Layer {
    Layer::Activation {
        function: Activation::Tanh,
    }
}

/// Small networks (all under 1000 parameters) covering every layer kind.
pub fn small_nets() -> Vec<(&'static str, ModelSpec)> {
    vec![
        ("mlp-relu", ModelSpec::mlp(16, &[12], 4)),
        (
            "mlp-tanh",
            ModelSpec::new(
                vec![16],
                vec![
                    Layer::Dense { inputs: 16, outputs: 10 },
                    tanh(),
                    Layer::Dense { inputs: 10, outputs: 6 },
                    tanh(),
                    Layer::Dense { inputs: 6, outputs: 3 },
                ],
                3,
            )
            .unwrap(),
        ),
        (
            "conv-relu-pool",
            ModelSpec::new(
                vec![1, 6, 6],
                vec![
                    Layer::Conv2d {
                        in_channels: 1,
                        out_channels: 2,
                        kernel: 3,
                    },
                    relu(),
                    Layer::MaxPool2,
                    Layer::Flatten,
                    Layer::Dense { inputs: 8, outputs: 3 },
                ],
                3,
            )
            .unwrap(),
        ),
        (
            "conv-tanh-pool",
            ModelSpec::new(
                vec![2, 8, 8],
                vec![
                    Layer::Conv2d {
                        in_channels: 2,
                        out_channels: 3,
                        kernel: 3,
                    },
                    tanh(),
                    Layer::MaxPool2,
                    Layer::Flatten,
                    Layer::Dense { inputs: 27, outputs: 4 },
                ],
                4,
            )
            .unwrap(),
        ),
    ]
}

pub fn random_batch(spec: &ModelSpec, n: usize, seed: u64) -> Batch {
    let mut rng = fedquant::rng::stream(seed, &[0xB47C]);
    let data = (0..n * spec.input_len()).map(|_| rng.random::<f32>()).collect();
    let mut shape = vec![n];
    shape.extend_from_slice(spec.input_shape());
    let labels = (0..n).map(|_| rng.random_range(0..spec.classes())).collect();
    Batch::new(Tensor::new(shape, data).unwrap(), labels).unwrap()
}

/// Parameter and input gradients of the mean loss against central differences.
pub fn check_loss_gradients(spec: &ModelSpec, seed: u64) -> Check {
    let params = init_params(spec, seed);
    let batch = random_batch(spec, 3, seed);
    let lib = full_gradients(spec, &params, &batch).unwrap();
    let p64 = params64(&params);
    let xs = to_f64(&batch.inputs);
    let targets = one_hot(&batch.labels, spec.classes());
    let h = 1e-5;
    let mut check = Check::default();

    for (slot, entry) in lib.params.iter().enumerate() {
        for (i, &g) in entry.tensor.data().iter().enumerate() {
            let num = central_diff(&p64[slot], i, h, |w| {
                let mut p = p64.clone();
                p[slot] = w.to_vec();
                loss(spec, &p, &xs, &targets)
            });
            check.record(&format!("param{slot}"), i, f64::from(g), num, REL, ABS);
        }
    }
    for (i, &g) in lib.input.data().iter().enumerate() {
        let num = central_diff(&xs, i, h, |x| loss(spec, &p64, x, &targets));
        check.record("input", i, f64::from(g), num, REL, ABS);
    }
    check
}

/// Reference parameter gradients by central differences, `None` across a kink.
fn fd_param_grads(spec: &ModelSpec, params: &Params64, xs: &[f64], targets: &[f64]) -> Option<(Params64, Vec<usize>)> {
    let (_, base) = loss(spec, params, xs, targets);
    let mut out = Vec::with_capacity(params.len());
    for slot in 0..params.len() {
        let mut g = Vec::with_capacity(params[slot].len());
        for i in 0..params[slot].len() {
            let mut bad = false;
            let v = central_diff(&params[slot], i, 1e-6, |w| {
                let mut p = params.clone();
                p[slot] = w.to_vec();
                let (l, pat) = loss(spec, &p, xs, targets);
                bad |= pat != base;
                (l, pat)
            })?;
            if bad {
                return None;
            }
            g.push(v);
        }
        out.push(g);
    }
    Some((out, base))
}

fn dense_only(spec: &ModelSpec) -> bool {
    spec.layers()
        .iter()
        .all(|l| matches!(l, Layer::Dense { .. } | Layer::Activation { .. } | Layer::Flatten))
}

/// Reference match loss at `xs`, with the activation pattern; `None` if the
/// parameter gradients themselves straddle a kink.
fn reference_match(spec: &ModelSpec, p: &Params64, xs: &[f64], targets: &[f64], target: &Params64) -> Option<(f64, Vec<usize>)> {
    if dense_only(spec) {
        Some((match_loss(spec, p, xs, targets, target), loss(spec, p, xs, targets).1))
    } else {
        let (g, pat) = fd_param_grads(spec, p, xs, targets)?;
        let l = g
            .iter()
            .zip(target)
            .flat_map(|(a, b)| a.iter().zip(b))
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        Some((l, pat))
    }
}

/// Attack setup: model, observed gradient of a true sample, and a dummy.
pub struct AttackCase {
    pub params: ParamSet,
    pub target: ParamSet,
    pub dummy: Batch,
}

pub fn attack_case(spec: &ModelSpec, seed: u64) -> AttackCase {
    let params = init_params(spec, seed);
    let truth = random_batch(spec, 1, seed ^ 0x5EED);
    let target = fedquant::nn::backward(spec, &params, &truth).unwrap();
    let mut dummy = random_batch(spec, 1, seed ^ 0xD0);
    dummy.labels = truth.labels.clone();
    AttackCase { params, target, dummy }
}

/// Analytic attack gradient against central differences (h = 1e-3) of the reference match loss.
pub fn check_attack_gradient(spec: &ModelSpec, seed: u64) -> Check {
    let case = attack_case(spec, seed);
    let analytic = attack_gradient(spec, &case.params, &case.dummy, &case.target, GradientMethod::Analytic).unwrap();
    let p64 = params64(&case.params);
    let t64 = params64(&case.target);
    let xs = to_f64(&case.dummy.inputs);
    let targets = one_hot(&case.dummy.labels, spec.classes());
    let h = 1e-3;
    let mut check = Check::default();
    for (i, &g) in analytic.data().iter().enumerate() {
        let mut probes = Vec::with_capacity(2);
        for sign in [1.0, -1.0] {
            let mut x = xs.clone();
            x[i] += sign * h;
            probes.push(reference_match(spec, &p64, &x, &targets, &t64));
        }
        let num = match (&probes[0], &probes[1]) {
            (Some((lp, pp)), Some((lm, pm))) if pp == pm => Some((lp - lm) / (2.0 * h)),
            _ => None,
        };
        check.record("dummy", i, f64::from(g), num, REL, ABS);
    }
    check
}

/// Doubling the residual `g(dummy) - target` must double the analytic gradient,
/// as it does for the quadratic match loss. Returns the worst relative deviation.
pub fn doubling_deviation(spec: &ModelSpec, seed: u64) -> f64 {
    let case = attack_case(spec, seed);
    let g = fedquant::nn::backward(spec, &case.params, &case.dummy).unwrap();
    // target' = g - 2 (g - target)
    let entries = g
        .iter()
        .zip(case.target.iter())
        .map(|(a, b)| ParamEntry {
            layer_index: a.layer_index,
            role: a.role,
            tensor: Tensor::new(
                a.tensor.shape().to_vec(),
                a.tensor
                    .data()
                    .iter()
                    .zip(b.tensor.data())
                    .map(|(&x, &y)| (2.0 * f64::from(y) - f64::from(x)) as f32)
                    .collect(),
            )
            .unwrap(),
        })
        .collect();
    let doubled_target = ParamSet::new(entries);
    let base = attack_gradient(spec, &case.params, &case.dummy, &case.target, GradientMethod::Analytic).unwrap();
    let doubled = attack_gradient(spec, &case.params, &case.dummy, &doubled_target, GradientMethod::Analytic).unwrap();
    let scale = base.data().iter().map(|v| f64::from(v.abs())).fold(0.0, f64::max).max(1e-12);
    base.data()
        .iter()
        .zip(doubled.data())
        .map(|(&a, &b)| (2.0 * f64::from(a) - f64::from(b)).abs() / scale)
        .fold(0.0, f64::max)
}

/// Reference parameter gradients agree with the library's (sanity for the oracle itself).
pub fn reference_backprop_matches(spec: &ModelSpec, seed: u64) -> bool {
    let params = init_params(spec, seed);
    let batch = random_batch(spec, 2, seed);
    let lib = fedquant::nn::backward(spec, &params, &batch).unwrap();
    let r = mlp_param_grads(spec, &params64(&params), &to_f64(&batch.inputs), &one_hot(&batch.labels, spec.classes()));
    lib.iter()
        .zip(&r)
        .all(|(e, rg)| e.tensor.data().iter().zip(rg).all(|(&a, &b)| super::close(f64::from(a), b, 1e-4, 1e-6)))
}
