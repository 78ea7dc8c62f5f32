//! Plain-text summary of a manifest.

use std::fmt::Write;

use super::{median, ExperimentManifest};
use crate::attack::AttackView;

fn push(out: &mut String, args: std::fmt::Arguments<'_>) {
    out.write_fmt(args).expect("write to string");
    out.push('\n');
}

pub fn report(m: &ExperimentManifest) -> String {
    let mut out = String::new();
    let name = m.config.preset.as_deref().unwrap_or("custom");
    push(&mut out, format_args!("experiment {name} (seed {}, fedquant {})", m.seed, m.tool_version));
    push(&mut out, format_args!("dataset {}; {} parameters", m.dataset, m.model.param_count()));
    out.push('\n');

    push(&mut out, format_args!("accuracy"));
    if m.runs.iter().all(|r| r.records.is_empty()) {
        push(&mut out, format_args!("  no rounds"));
    } else {
        push(
            &mut out,
            format_args!("  {:<10} {:>6} {:>10} {:>10} {:>11}", "defense", "rounds", "accuracy", "test_loss", "global_loss"),
        );
        for run in &m.runs {
            match run.records.last() {
                Some(r) => push(
                    &mut out,
                    format_args!(
                        "  {:<10} {:>6} {:>10.4} {:>10.4} {:>11.4}",
                        run.defense.name(),
                        run.records.len(),
                        r.test_accuracy,
                        r.test_loss,
                        r.global_loss
                    ),
                ),
                None => push(&mut out, format_args!("  {:<10} {:>6} no rounds", run.defense.name(), 0)),
            }
        }
    }
    out.push('\n');

    push(&mut out, format_args!("attacks"));
    if m.attacks.is_empty() {
        push(&mut out, format_args!("  no attacks"));
    } else {
        push(
            &mut out,
            format_args!("  {:<24} {:>6} {:>9} {:>12} {:>11}", "view", "trials", "successes", "median_mse", "median_psnr"),
        );
        for view in AttackView::ALL {
            let trials: Vec<_> = m.trials(view).collect();
            if trials.is_empty() {
                continue;
            }
            let mse = median(trials.iter().map(|t| t.final_mse).collect()).expect("non-empty");
            let psnr = median(trials.iter().map(|t| t.final_psnr).collect()).expect("non-empty");
            push(
                &mut out,
                format_args!(
                    "  {:<24} {:>6} {:>9} {:>12.4e} {:>11.2}",
                    view.name(),
                    trials.len(),
                    trials.iter().filter(|t| t.success_iteration.is_some()).count(),
                    mse,
                    psnr
                ),
            );
        }
    }
    out.push('\n');

    push(&mut out, format_args!("bytes (totals over all rounds)"));
    if m.runs.iter().all(|r| r.records.is_empty()) {
        push(&mut out, format_args!("  no rounds"));
    } else {
        push(
            &mut out,
            format_args!("  {:<10} {:>14} {:>14} {:>14} {:>14}", "defense", "upstream", "downstream", "up_payload", "down_payload"),
        );
        for run in &m.runs {
            let sum = |f: fn(&crate::fl::RoundRecord) -> u64| run.records.iter().map(f).sum::<u64>();
            push(
                &mut out,
                format_args!(
                    "  {:<10} {:>14} {:>14} {:>14} {:>14}",
                    run.defense.name(),
                    sum(|r| r.upstream_bytes),
                    sum(|r| r.downstream_bytes),
                    sum(|r| r.upstream_payload_bytes),
                    sum(|r| r.downstream_payload_bytes)
                ),
            );
        }
    }
    out.push('\n');

    let s = &m.search_space;
    push(
        &mut out,
        format_args!("search space: {} (m^L = {}^{})", s.combinations, s.modes, s.layers),
    );
    out
}
