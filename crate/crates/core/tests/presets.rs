//! Shipped presets produce the documented outputs.

use fedquant::attack::AttackView;
use fedquant::experiment::{preset, report, run_experiment, ExperimentManifest, MANIFEST_FILE, METRICS_CSV_HEADER};
use fedquant::fl::Defense;

#[test]
fn desk_training_orders_defenses() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_experiment(&preset("table1-desk").unwrap(), dir.path()).unwrap();
    let acc = |d| m.run(d).unwrap().final_accuracy().unwrap();
    let (none, quant, dp) = (acc(Defense::None), acc(Defense::Quantize), acc(Defense::Dp));
    assert!(none >= quant && quant > dp, "{none} {quant} {dp}");

    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_CSV_HEADER));
    assert_eq!(lines.count(), 3 * 20);
    let back = ExperimentManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(back, m);
    assert!(report(&back).contains("search space: 4 (m^L = 2^2)"));
}

#[test]
fn correct_mode_dequantization_still_leaks() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_experiment(&preset("mode-mismatch").unwrap(), dir.path()).unwrap();
    let correct = m.median_mse(AttackView::DequantizedCorrect).unwrap();
    assert!(correct <= 0.02, "{correct}");
    for name in ["images/truth_trial0.pgm", "images/dequantized_wrong_mode_trial2.pgm", "attack.csv"] {
        assert!(m.files.iter().any(|f| f == name), "{name} missing from {:?}", m.files);
        assert!(dir.path().join(name).exists());
    }
}
