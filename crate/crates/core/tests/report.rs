use std::collections::BTreeMap;

use biaswap_core::debias_pipeline::report::*;

fn sample(ratio: f64, seed: u64, tag: &str, debiased: f64, vanilla: f64) -> MetricsReport {
    let acc = |u: f64| SplitAccuracies { unbiased_accuracy: u, bias_guiding_accuracy: 0.99, bias_contrary_accuracy: Some(u * 0.9) };
    MetricsReport {
        schema_version: SCHEMA_VERSION,
        config_hash: format!("{:016x}", seed * 7919 + (ratio * 1000.0) as u64),
        ablation_tag: tag.into(),
        dataset: "colored_mnist".into(),
        bias_ratio: ratio,
        seed,
        debiased: acc(debiased),
        vanilla: acc(vanilla),
        unbiased_delta: debiased - vanilla,
        partition: PartitionSummary { precision: 0.9, recall: 0.8, f1: 0.85, threshold: 0.03, contrary_count: 120 },
        generated: 9900,
        hue_transfer_rate: None,
        loss_curves: BTreeMap::from([("vanilla".to_string(), "debias_train/vanilla_curve.csv".to_string())]),
    }
}

#[test]
fn two_ratios_give_two_ticks() {
    let reports = [sample(0.95, 0, "full", 0.8, 0.6), sample(0.99, 0, "full", 0.7, 0.4), sample(0.99, 1, "full", 0.72, 0.42)];
    let svg = accuracy_plot_svg(&reports);
    assert_eq!(svg.matches(r#"class="xtick""#).count(), 2);
    assert_eq!(svg.matches("<polyline").count(), 2);
    let text = summary_text(&reports);
    assert!(text.contains("bias_ratio=0.99") && text.contains("seeds=0,1"), "{text}");
}

#[test]
fn emitted_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let reports = vec![sample(0.99, 0, "full", 0.7, 0.4), sample(0.99, 0, "w/o c1", 0.5, 0.4)];
    emit_report(&reports, dir.path()).unwrap();
    assert_eq!(read_report(&dir.path().join(REPORT_FILE)).unwrap(), reports);
    let schema: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(SCHEMA_FILE)).unwrap()).unwrap();
    assert_eq!(schema["type"], "object");
}

#[test]
fn invalid_reports_are_rejected() {
    let mut r = sample(0.99, 0, "full", 0.7, 0.4);
    r.unbiased_delta = 0.5;
    assert!(r.validate().is_err());
    let mut r = sample(0.99, 0, "full", 0.7, 0.4);
    r.config_hash = "XYZ".into();
    assert!(r.validate().is_err());
    let mut r = sample(0.99, 0, "full", 0.7, 0.4);
    r.debiased.unbiased_accuracy = 1.5;
    r.unbiased_delta = 1.1;
    assert!(r.validate().is_err());
    assert!(emit_report(&[], tempfile::tempdir().unwrap().path()).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    std::fs::write(&path, r#"{"schema_version":1,"reports":[{"extra":1}]}"#).unwrap();
    assert!(read_report(&path).is_err());
}
