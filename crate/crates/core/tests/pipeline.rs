use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use biaswap_core::debias_pipeline::config::KEYS;
use biaswap_core::debias_pipeline::*;
use biaswap_core::Error;

fn tiny() -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.cfg");
    PipelineConfig::load(&path).unwrap()
}

fn tiny_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.cfg")
}

#[test]
fn config_rejects_unknown_and_duplicate_keys() {
    assert!(matches!(PipelineConfig::parse("nope = 1"), Err(Error::Config(_))));
    assert!(matches!(PipelineConfig::parse("seed = 1\nseed = 2"), Err(Error::Config(_))));
    assert!(matches!(PipelineConfig::parse("just words"), Err(Error::Config(_))));
    assert!(matches!(PipelineConfig::parse("biased.q = 2"), Err(_)));
    assert!(matches!(PipelineConfig::parse("partition.snapshot_epoch = 99"), Err(_)));
}

#[test]
fn config_hash_ignores_layout() {
    let a = PipelineConfig::parse("seed = 3\ndata.bias_ratio = 0.95\n").unwrap();
    let b = PipelineConfig::parse("# comment\n\n  data.bias_ratio=0.95\nseed   =3").unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 16);
    assert_ne!(a.hash(), a.clone().with_seed(4).hash());
    assert_eq!(PipelineConfig::parse(&a.to_string()).unwrap(), a);
    assert_eq!(PipelineConfig::parse("").unwrap(), PipelineConfig::default());
}

#[test]
fn ablations_touch_one_key_each() {
    let base = PipelineConfig::default();
    let c1 = base.clone().with_ablation(Ablation::C1);
    let c2 = base.clone().with_ablation(Ablation::C2);
    let diff = |a: &PipelineConfig, b: &PipelineConfig| {
        KEYS.iter().filter(|(k, _, _)| a.get(k) != b.get(k)).map(|(k, _, _)| *k).collect::<Vec<_>>()
    };
    assert_eq!(diff(&base, &c1), ["augment.pairing_policy"]);
    assert_eq!(diff(&base, &c2), ["swapae.crop_mode"]);
    assert_eq!(base.ablation_tag(), "full");
    assert_eq!(c1.ablation_tag(), "w/o c1");
    assert_eq!(c2.clone().with_ablation(Ablation::C1).ablation_tag(), "w/o c1+c2");
    assert!(base.with_oracle_swap(true).ablation_tag().contains("oracle"));
    assert!("c3".parse::<Ablation>().is_err());
}

#[test]
fn downstream_stage_needs_upstream() {
    let root = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), root.path());
    match p.run_stage(Stage::Partition, false) {
        Err(e @ Error::MissingStage { .. }) => assert_eq!(e.to_string(), "data required"),
        other => panic!("{other:?}"),
    }
    p.run_stage(Stage::Data, false).unwrap();
    match p.run_stage(Stage::Partition, false) {
        Err(e) => assert_eq!(e.to_string(), "biased_train required"),
        Ok(_) => panic!("partition ran without a classifier"),
    }
}

#[test]
fn full_run_is_deterministic_and_cached() {
    let (ra, rb) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = Pipeline::new(tiny(), ra.path());
    let b = Pipeline::new(tiny(), rb.path());
    a.run_all(false).unwrap();
    b.run_all(false).unwrap();
    let (ma, mb) = (a.metrics().unwrap(), b.metrics().unwrap());
    assert_eq!(ma, mb);
    assert!(ma.generated > 0);
    for stage in Stage::ALL {
        assert_eq!(a.run_stage(stage, false).unwrap(), StageOutcome::UpToDate, "{stage}");
    }
    let before = fs::read(a.stage_dir(Stage::Evaluate).join("metrics.json")).unwrap();
    assert_eq!(a.run_stage(Stage::Evaluate, true).unwrap(), StageOutcome::Ran);
    assert_eq!(fs::read(a.stage_dir(Stage::Evaluate).join("metrics.json")).unwrap(), before);

    let reports = report::read_report(&a.stage_dir(Stage::Report).join(report::REPORT_FILE)).unwrap();
    assert_eq!(reports, vec![ma]);
    for f in [report::SUMMARY_FILE, report::PLOT_FILE, report::SCHEMA_FILE] {
        assert!(a.stage_dir(Stage::Report).join(f).exists(), "{f}");
    }
}

#[test]
fn changed_key_invalidates_downstream_only() {
    let root = tempfile::tempdir().unwrap();
    let base = tiny().with_oracle_swap(true);
    let a = Pipeline::new(base.clone(), root.path());
    a.run_all(false).unwrap();
    let mut changed = base.clone();
    changed.set("debias.epochs", "1").unwrap();
    let b = Pipeline::new(changed, root.path());
    let adopted = b.adopt_from(&a).unwrap();
    assert_eq!(adopted, [Stage::Data, Stage::BiasedTrain, Stage::Partition, Stage::SwapaeTrain, Stage::Augment]);
    assert!(!b.is_complete(Stage::DebiasTrain));
}

#[test]
fn cli_names_the_failing_stage() {
    let root = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_biaswap"))
        .args(["evaluate", "--config"])
        .arg(tiny_path())
        .env(RUN_ROOT_ENV, root.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage evaluate failed") && err.contains("required"), "{err}");

    let out = Command::new(env!("CARGO_BIN_EXE_biaswap"))
        .args(["data", "--seed", "7", "--config"])
        .arg(tiny_path())
        .env(RUN_ROOT_ENV, root.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let hash = tiny().with_seed(7).hash();
    assert!(root.path().join(hash).join("data").join(MARKER_FILE).exists());

    let out = Command::new(env!("CARGO_BIN_EXE_biaswap")).arg("defaults").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(PipelineConfig::parse(&text).unwrap(), PipelineConfig::default());
}
