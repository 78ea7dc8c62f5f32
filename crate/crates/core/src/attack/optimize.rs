//! The attacker's outer optimisation loop.

use super::{
    attempt_seed, initial_dummy, reconstruction_metrics, soft_attack_gradient, soft_match_loss, AttackConfig,
    AttackError, AttackResult, IterationRecord, LabelMode, Optimizer,
};
use crate::nn::{self, Batch, GradSet, ModelSpec, ParamSet};
use crate::rng;
use crate::tensor::Tensor;

use rand_distr::{Distribution, Normal};

const MAX_BACKTRACKS: usize = 40;
const ARMIJO_C: f64 = 1e-4;
const MAX_STEP: f64 = 1e12;
const LABEL_FD_STEP: f32 = 1e-3;

/// Match loss, pixel gradient and (for optimised labels) label-logit gradient.
type LossAndGradient = (f64, Vec<f32>, Option<Vec<f32>>);

/// Optimisation variables: dummy pixels and, in optimised-label mode, label logits.
#[derive(Clone)]
struct Point {
    x: Tensor,
    z: Option<Vec<f32>>,
}

struct Problem<'a> {
    spec: &'a ModelSpec,
    params: &'a ParamSet,
    observed: &'a GradSet,
    truth: &'a Batch,
    cfg: &'a AttackConfig,
}

fn softmax_rows(z: &[f32], classes: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(classes) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let e: Vec<f64> = row.iter().map(|&v| f64::from(v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|&v| (v / s) as f32));
    }
    out
}

impl Problem<'_> {
    fn targets(&self, p: &Point) -> Vec<f32> {
        match &p.z {
            Some(z) => softmax_rows(z, self.spec.classes()),
            None => nn::one_hot(&self.truth.labels, self.spec.classes()),
        }
    }

    fn loss(&self, p: &Point) -> Result<f64, AttackError> {
        soft_match_loss(self.spec, self.params, &p.x, &self.targets(p), self.observed)
    }

    /// Loss plus gradient in both blocks of variables.
    fn gradient(&self, p: &Point) -> Result<LossAndGradient, AttackError> {
        let targets = self.targets(p);
        let (loss, gx) = soft_attack_gradient(self.spec, self.params, &p.x, &targets, self.observed, self.cfg.gradient)?;
        let gz = match &p.z {
            None => None,
            Some(z) => {
                let mut probe = p.clone();
                let mut gz = vec![0.0f32; z.len()];
                for (i, g) in gz.iter_mut().enumerate() {
                    let zi = z[i];
                    probe.z.as_mut().expect("labels")[i] = zi + LABEL_FD_STEP;
                    let plus = self.loss(&probe)?;
                    probe.z.as_mut().expect("labels")[i] = zi - LABEL_FD_STEP;
                    let minus = self.loss(&probe)?;
                    probe.z.as_mut().expect("labels")[i] = zi;
                    *g = ((plus - minus) / (2.0 * f64::from(LABEL_FD_STEP))) as f32;
                }
                Some(gz)
            }
        };
        Ok((loss, gx.into_data(), gz))
    }

    fn project(&self, x: &mut [f32]) {
        if self.cfg.clamp_pixels {
            for v in x {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }

    fn record(&self, iteration: usize, p: &Point, match_loss: f64) -> Result<IterationRecord, AttackError> {
        let (mse, psnr) = reconstruction_metrics(&p.x, &self.truth.inputs)?;
        Ok(IterationRecord {
            iteration,
            match_loss,
            mse,
            psnr,
        })
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum()
}

/// Reconstructs `truth.inputs` from `observed` by gradient matching.
///
/// Pixels start uniform in `[0, 1)`. An attempt whose loss turns non-finite is
/// discarded and retried from a fresh seed, up to `cfg.restarts` times.
pub fn run_attack(
    spec: &ModelSpec,
    params: &ParamSet,
    observed: &GradSet,
    truth: &Batch,
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    params.check_layout(observed)?;
    spec.check_params(params)?;
    nn::forward_loss(spec, params, truth)?;
    let problem = Problem {
        spec,
        params,
        observed,
        truth,
        cfg,
    };
    for attempt in 0..=cfg.restarts {
        if let Some(mut result) = attempt_once(&problem, attempt_seed(cfg.seed, attempt))? {
            result.restarts = attempt;
            return Ok(result);
        }
    }
    Err(AttackError::Diverged {
        attempts: cfg.restarts + 1,
    })
}

fn attempt_once(problem: &Problem<'_>, seed: u64) -> Result<Option<AttackResult>, AttackError> {
    let cfg = problem.cfg;
    let mut r = rng::stream(seed, &[]);
    let x = initial_dummy(&problem.truth.inputs, &mut r);
    let z = match cfg.label_mode {
        LabelMode::Known => None,
        LabelMode::Optimized => {
            let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
            Some((0..problem.truth.len() * problem.spec.classes()).map(|_| normal.sample(&mut r)).collect())
        }
    };
    let mut point = Point { x, z };
    let mut loss = problem.loss(&point)?;
    if !loss.is_finite() {
        return Ok(None);
    }
    let mut curve = vec![problem.record(0, &point, loss)?];
    let mut step = cfg.step_size;
    let mut adam = Adam::new(point.x.len(), point.z.as_ref().map_or(0, Vec::len));

    for iteration in 1..=cfg.max_iterations {
        let (_, gx, gz) = problem.gradient(&point)?;
        let gnorm = gx.iter().chain(gz.iter().flatten()).map(|&g| f64::from(g).powi(2)).sum::<f64>();
        if !gnorm.is_finite() {
            return Ok(None);
        }
        if gnorm == 0.0 {
            break;
        }
        let next = match cfg.optimizer {
            Optimizer::Backtracking => {
                let mut accepted = None;
                for _ in 0..MAX_BACKTRACKS {
                    let mut cand = point.clone();
                    for (v, g) in cand.x.data_mut().iter_mut().zip(&gx) {
                        *v -= (step * f64::from(*g)) as f32;
                    }
                    problem.project(cand.x.data_mut());
                    if let (Some(z), Some(gz)) = (cand.z.as_mut(), &gz) {
                        for (v, g) in z.iter_mut().zip(gz) {
                            *v -= (step * f64::from(*g)) as f32;
                        }
                    }
                    let moved = sq_dist(cand.x.data(), point.x.data())
                        + match (&cand.z, &point.z) {
                            (Some(a), Some(b)) => sq_dist(a, b),
                            _ => 0.0,
                        };
                    let cand_loss = problem.loss(&cand)?;
                    if moved > 0.0 && cand_loss.is_finite() && cand_loss <= loss - ARMIJO_C * moved / step {
                        step = (step * 2.0).min(MAX_STEP);
                        accepted = Some((cand, cand_loss));
                        break;
                    }
                    step *= 0.5;
                }
                match accepted {
                    Some(a) => a,
                    // No descent step left at machine precision.
                    None => break,
                }
            }
            Optimizer::Adam { learning_rate } => {
                let mut cand = point.clone();
                adam.step(learning_rate, cand.x.data_mut(), &gx, cand.z.as_deref_mut(), gz.as_deref());
                problem.project(cand.x.data_mut());
                let cand_loss = problem.loss(&cand)?;
                if !cand_loss.is_finite() {
                    return Ok(None);
                }
                (cand, cand_loss)
            }
        };
        point = next.0;
        loss = next.1;
        curve.push(problem.record(iteration, &point, loss)?);
    }

    let last = *curve.last().expect("initial record");
    let success_iteration = curve
        .iter()
        .find(|r| r.mse <= cfg.mse_max && r.psnr >= cfg.psnr_min)
        .map(|r| r.iteration);
    let recovered_labels = point.z.as_ref().map(|z| softmax_rows(z, problem.spec.classes()));
    Ok(Some(AttackResult {
        recovered: point.x,
        recovered_labels,
        curve,
        final_mse: last.mse,
        final_psnr: last.psnr,
        success_iteration,
        view: cfg.view,
        restarts: 0,
    }))
}

struct Adam {
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(nx: usize, nz: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; nx + nz],
            v: vec![0.0; nx + nz],
        }
    }

    fn step(&mut self, lr: f64, x: &mut [f32], gx: &[f32], z: Option<&mut [f32]>, gz: Option<&[f32]>) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let nx = x.len();
        let vars = x.iter_mut().chain(z.into_iter().flatten());
        let grads = gx.iter().chain(gz.into_iter().flatten());
        for (i, (p, &g)) in vars.zip(grads).enumerate() {
            let g = f64::from(g);
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            *p -= (lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS)) as f32;
        }
        debug_assert!(nx <= self.m.len());
    }
}
