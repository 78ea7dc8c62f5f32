//! CSV and PGM writers. Numbers use Rust's shortest round-trip formatting, so
//! identical runs produce identical bytes.

use std::fmt::Write;

use super::{square_side, DefenseRun};
use crate::attack::{AttackView, IterationRecord};
use crate::tensor::Tensor;

pub const METRICS_CSV_HEADER: &str = "defense,round,clients,test_accuracy,test_loss,global_loss,\
upstream_bytes,downstream_bytes,upstream_payload_bytes,downstream_payload_bytes";

pub const ATTACK_CSV_HEADER: &str = "view,trial,iteration,match_loss,mse,psnr";

/// One row per round and defense; client ids are `;`-separated.
pub fn metrics_csv(runs: &[DefenseRun]) -> String {
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for run in runs {
        for r in &run.records {
            let clients: Vec<String> = r.clients.iter().map(|c| c.to_string()).collect();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                run.defense,
                r.round,
                clients.join(";"),
                r.test_accuracy,
                r.test_loss,
                r.global_loss,
                r.upstream_bytes,
                r.downstream_bytes,
                r.upstream_payload_bytes,
                r.downstream_payload_bytes
            )
            .expect("write to string");
        }
    }
    out
}

pub fn attack_csv(curves: &[(AttackView, usize, Vec<IterationRecord>)]) -> String {
    let mut out = format!("{ATTACK_CSV_HEADER}\n");
    for (view, trial, curve) in curves {
        for r in curve {
            writeln!(out, "{view},{trial},{},{},{},{}", r.iteration, r.match_loss, r.mse, r.psnr)
                .expect("write to string");
        }
    }
    out
}

/// Binary greyscale PGM of the first sample in `t`.
///
/// Flat square inputs are shown as a square; `[c, h, w]` inputs stack channels vertically.
pub fn pgm(t: &Tensor, sample_shape: &[usize]) -> Vec<u8> {
    let n: usize = sample_shape.iter().product();
    let pixels = &t.data()[..n];
    let (width, height) = match sample_shape {
        [c, h, w] => (*w, c * h),
        [d] => match square_side(*d) {
            Some(s) => (s, s),
            None => (*d, 1),
        },
        _ => (n, 1),
    };
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}
