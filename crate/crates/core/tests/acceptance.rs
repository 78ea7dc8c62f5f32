//! Acceptance suite. Prints one line per criterion and fails if any gate fails.
//!
//! Runs with its own `main` so the lines are visible under plain `cargo test`.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::grad::{check_attack_gradient, check_loss_gradients, doubling_deviation, small_nets};
use common::{float_slack, half_step};
use fedquant::attack::AttackView;
use fedquant::data::DatasetConfig;
use fedquant::experiment::{preset, preset_names, run_experiment, ExperimentManifest, METRICS_FILE, ATTACK_FILE};
use fedquant::fl::Defense;
use fedquant::nn::init_params;
use fedquant::quant::{
    attack_search_space, dequantize, encode, float_message_bytes, quantize_full_range, quantize_set, BitWidth,
    PayloadBytes, QuantMode, QuantPolicy,
};
use fedquant::{ModelSpec, Tensor};
use rand::Rng;

struct Outcome {
    /// `None` for a skipped optional check.
    pass: Option<bool>,
    detail: String,
}

fn pass_if(pass: bool, detail: String) -> Outcome {
    Outcome {
        pass: Some(pass),
        detail,
    }
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("temp dir")
}

fn run_preset(name: &str, seed: u64, dir: &Path) -> (ExperimentManifest, Duration) {
    let mut cfg = preset(name).expect("preset");
    cfg.seed = seed;
    let start = Instant::now();
    let m = run_experiment(&cfg, dir).expect("preset runs");
    (m, start.elapsed())
}

fn codec_round_trip() -> Outcome {
    let mut rng = fedquant::rng::stream(2024, &[1]);
    let mut worst = 0.0f64;
    let mut failures = 0;
    let mut tensors = 0;
    for bits in [BitWidth::Int8, BitWidth::Int16] {
        for mode in QuantMode::ALL {
            for _ in 0..1000 {
                let len = rng.random_range(1..=256);
                let scale = 10f32.powi(rng.random_range(-6..4));
                let shift: f32 = [-1.0, 0.0, 1.0][rng.random_range(0..3)];
                let v: Vec<f32> = (0..len).map(|_| (rng.random_range(-1.0f32..1.0) + shift) * scale).collect();
                let x = Tensor::new(vec![len], v).unwrap();
                let (lo, hi) = x.min_max();
                let back = dequantize(&quantize_full_range(&x, bits, mode).unwrap()).unwrap();
                let bound = half_step(bits, mode, lo, hi) + float_slack(lo, hi);
                let err = x
                    .data()
                    .iter()
                    .zip(back.data())
                    .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
                    .fold(0.0, f64::max);
                if err > bound {
                    failures += 1;
                }
                if bound > 0.0 {
                    worst = worst.max(err / bound);
                }
                tensors += 1;
            }
            let zero = Tensor::zeros(vec![7]);
            if dequantize(&quantize_full_range(&zero, bits, mode).unwrap()).unwrap() != zero {
                failures += 1;
            }
        }
    }
    pass_if(
        failures == 0,
        format!("{tensors} tensors, {failures} over bound, worst err/bound {worst:.3}; zero tensors exact"),
    )
}

fn golden_traces() -> Outcome {
    let cases: [([f32; 3], [i32; 3], [f64; 3]); 2] = [
        ([-1.0, 0.5, 1.0], [-127, 64, 127], [-1.0, 64.0 / 127.0, 1.0]),
        ([0.0, 2.0, 4.0], [0, 64, 127], [0.0, 64.0 / 31.75, 4.0]),
    ];
    let mut ok = true;
    let mut seen = Vec::new();
    for (x, payload, values) in cases {
        let q = quantize_full_range(&Tensor::new(vec![3], x.to_vec()).unwrap(), BitWidth::Int8, QuantMode::Scaled).unwrap();
        let back = dequantize(&q).unwrap();
        ok &= q.payload == payload;
        ok &= back.data().iter().zip(values).all(|(&a, b)| (f64::from(a) - b).abs() < 1e-6);
        seen.push(format!("{:?}", q.payload));
    }
    pass_if(ok, format!("payloads {}", seen.join(" and ")))
}

fn communication() -> Outcome {
    let mut ok = true;
    let mut details = Vec::new();
    for (inputs, outputs) in [(100, 100), (256, 40), (784, 128)] {
        let spec = ModelSpec::mlp(inputs, &[], outputs);
        let g = init_params(&spec, 1);
        let policy = QuantPolicy::uniform(&spec, BitWidth::Int8, QuantMode::Scaled);
        let q = quantize_set(&g, &policy).unwrap();
        let payload_ratio = g.payload_bytes() as f64 / q.payload_bytes() as f64;
        let message_ratio = float_message_bytes(&g) as f64 / encode(&q).unwrap().len() as f64;
        ok &= payload_ratio == 4.0 && message_ratio >= 3.8;
        details.push(format!("{} elems: payload {payload_ratio}, message {message_ratio:.4}", g.num_elements()));
    }
    let dir = tempdir();
    let (m, _) = run_preset("comm-report", 0, dir.path());
    let up = |d| m.run(d).unwrap().records.iter().map(|r| r.upstream_payload_bytes).sum::<u64>();
    let fl_ratio = up(Defense::None) as f64 / up(Defense::Quantize) as f64;
    ok &= fl_ratio == 4.0;
    details.push(format!("comm-report upstream payload {fl_ratio}"));
    pass_if(ok, details.join("; "))
}

fn search_space() -> Outcome {
    let small = attack_search_space(3, 5).unwrap().to_string();
    let large = attack_search_space(2, 64).unwrap().to_string();
    pass_if(
        small == "243" && large == "18446744073709551616",
        format!("3^5 = {small}, 2^64 = {large}"),
    )
}

fn accuracy_retention() -> Outcome {
    let mut good = 0;
    let mut rows = Vec::new();
    for seed in 0..10 {
        let dir = tempdir();
        let (m, _) = run_preset("table1-desk", seed, dir.path());
        let acc = |d| m.run(d).unwrap().final_accuracy().unwrap();
        let (none, quant, dp) = (acc(Defense::None), acc(Defense::Quantize), acc(Defense::Dp));
        if quant >= none - 0.02 && dp <= quant - 0.05 {
            good += 1;
        }
        rows.push(format!("{none:.3}/{quant:.3}/{dp:.3}"));
    }
    pass_if(good >= 8, format!("{good}/10 seeds hold; none/quantize/dp = {}", rows.join(" ")))
}

fn attack_separation(m: &ExperimentManifest) -> Outcome {
    let raw: Vec<_> = m.trials(AttackView::RawFloat).collect();
    let int: Vec<_> = m.trials(AttackView::IntPayloadAsFloat).collect();
    let raw_hits = raw[..5]
        .iter()
        .filter(|t| t.success_iteration.is_some_and(|i| i <= 300) && t.final_mse <= 0.01)
        .count();
    let int_held = int[..5].iter().filter(|t| t.final_mse >= 0.05).count();
    let raw_med = m.median_mse(AttackView::RawFloat).unwrap();
    let int_med = m.median_mse(AttackView::IntPayloadAsFloat).unwrap();
    let ratio = int_med / raw_med;
    let int_iters: Vec<_> = int[..5].iter().map(|t| t.iterations).collect();
    pass_if(
        raw_hits >= 4 && int_held == 5 && ratio >= 5.0,
        format!(
            "raw success {raw_hits}/5, int payload >= 0.05 in {int_held}/5 (iterations {int_iters:?}), \
             median mse {int_med:.3e} / {raw_med:.3e} = {ratio:.3e} over {} trials",
            raw.len()
        ),
    )
}

fn mode_mismatch(m: &ExperimentManifest) -> Outcome {
    let correct = m.median_mse(AttackView::DequantizedCorrect).unwrap();
    let wrong = m.median_mse(AttackView::DequantizedWrongMode).unwrap();
    let ratio = wrong / correct;
    pass_if(
        ratio >= 3.0,
        format!("median mse wrong {wrong:.3e} / correct {correct:.3e} = {ratio:.3e}"),
    )
}

fn gradient_oracle() -> Outcome {
    let mut ok = true;
    let mut compared = 0;
    let mut skipped = 0;
    let mut first_failure = None;
    let mut nets = small_nets();
    nets.push(("mlp-tiny", ModelSpec::mlp_tiny()));
    for (name, spec) in &nets {
        let mut checks = vec![check_attack_gradient(spec, 7)];
        if spec.param_count() <= 1000 {
            checks.push(check_loss_gradients(spec, 7));
        }
        for c in checks {
            ok &= c.ok();
            compared += c.compared;
            skipped += c.skipped;
            if first_failure.is_none() {
                first_failure = c.failures.first().map(|f| format!("{name}: {f}"));
            }
        }
        let dev = doubling_deviation(spec, 7);
        if dev >= 1e-4 {
            ok = false;
            first_failure.get_or_insert(format!("{name}: doubled residual deviates by {dev:e}"));
        }
    }
    let mut detail = format!("{compared} coordinates compared, {skipped} skipped at kinks, rel 1e-2 / abs 1e-4");
    if let Some(f) = first_failure {
        detail.push_str(&format!("; first failure {f}"));
    }
    pass_if(ok, detail)
}

/// Second run of each desk preset, compared byte for byte with the first.
fn determinism(first: &[(String, tempfile::TempDir, Duration)]) -> Outcome {
    let mut ok = true;
    let mut details = Vec::new();
    for (name, dir, t1) in first {
        let again = tempdir();
        let (_, t2) = run_preset(name, 0, again.path());
        let mut compared = Vec::new();
        for file in [METRICS_FILE, ATTACK_FILE] {
            let a = dir.path().join(file);
            if a.exists() {
                let same = std::fs::read(&a).unwrap() == std::fs::read(again.path().join(file)).unwrap_or_default();
                ok &= same;
                compared.push(format!("{file} {}", if same { "identical" } else { "DIFFERS" }));
            }
        }
        ok &= t2 < 2 * *t1 + Duration::from_millis(200);
        details.push(format!(
            "{name}: {} ({:.1}s vs {:.1}s)",
            compared.join(", "),
            t2.as_secs_f64(),
            t1.as_secs_f64()
        ));
    }
    pass_if(ok, details.join("; "))
}

fn mnist_retention() -> Outcome {
    let Some(dir) = std::env::var_os("MNIST_DIR") else {
        return Outcome {
            pass: None,
            detail: "set MNIST_DIR to the directory holding the four IDX files".into(),
        };
    };
    let mut cfg = preset("mnist-full").unwrap();
    cfg.dataset = DatasetConfig::Idx {
        dir: dir.into(),
        train_limit: None,
        test_limit: None,
    };
    cfg.defenses = vec![Defense::None, Defense::Quantize];
    let out = tempdir();
    let m = run_experiment(&cfg, out.path()).expect("mnist-full run");
    let acc = |d| m.run(d).unwrap().final_accuracy().unwrap();
    let (none, quant) = (acc(Defense::None), acc(Defense::Quantize));
    pass_if(
        (none - quant).abs() <= 0.03,
        format!("accuracy none {none:.4}, quantize {quant:.4}"),
    )
}

fn report(id: u32, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    let in_budget = budget.is_none_or(|b| elapsed <= b);
    let (tag, ok) = match outcome.pass {
        None => ("SKIP", true),
        Some(true) if in_budget => ("PASS", true),
        Some(_) => ("FAIL", false),
    };
    let budget_text = budget.map_or(String::new(), |b| format!(" / {}s", b.as_secs()));
    let over = if in_budget { "" } else { " OVER BUDGET" };
    println!(
        "[{tag}] {id:>2} {name:<22} {:.2}s{budget_text}{over}  {}",
        elapsed.as_secs_f64(),
        outcome.detail
    );
    ok
}

fn main() {
    // Respect `cargo test -- --list` and name filters from the default harness.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if let Some(filter) = args.iter().find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(filter.as_str()) {
            return;
        }
    }

    let secs = |s| Some(Duration::from_secs(s));
    let mut all = true;
    println!("\nrunning acceptance suite");
    all &= report(1, "codec round-trip", secs(10), codec_round_trip);
    all &= report(2, "golden traces", None, golden_traces);
    all &= report(3, "communication 4x", secs(1), communication);
    all &= report(4, "search space", secs(1), search_space);
    all &= report(5, "accuracy retention", secs(300), accuracy_retention);

    let mut first_runs: Vec<(String, tempfile::TempDir, Duration)> = Vec::new();
    all &= report(6, "attack separation", secs(600), || {
        let dir = tempdir();
        let (m, t) = run_preset("attack-desk", 0, dir.path());
        first_runs.push(("attack-desk".into(), dir, t));
        attack_separation(&m)
    });
    all &= report(7, "mode mismatch", secs(300), || {
        let dir = tempdir();
        let (m, t) = run_preset("mode-mismatch", 0, dir.path());
        first_runs.push(("mode-mismatch".into(), dir, t));
        mode_mismatch(&m)
    });
    all &= report(8, "gradient oracle", secs(60), gradient_oracle);
    all &= report(9, "determinism", None, || {
        for name in preset_names() {
            if first_runs.iter().all(|(n, _, _)| n != name) && *name != "mnist-full" {
                let dir = tempdir();
                let (_, t) = run_preset(name, 0, dir.path());
                first_runs.push((name.to_string(), dir, t));
            }
        }
        determinism(&first_runs)
    });
    all &= report(10, "mnist retention", None, mnist_retention);

    if all {
        println!("acceptance: all gating criteria passed\n");
    } else {
        println!("acceptance: FAILED\n");
        std::process::exit(1);
    }
}
