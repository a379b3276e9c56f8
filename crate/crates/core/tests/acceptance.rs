//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! The end-to-end criteria train on the desk profile and take roughly an hour
//! on one CPU core. Runs go to a fresh temporary root unless
//! `BIASWAP_ACCEPTANCE_ROOT` names a directory to keep them in.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use biaswap_core::bias_partition::bias_score;
use biaswap_core::cam_sampler::{compute_cam, sample_placements, to_sampling_distribution, CropMode, PatchDistribution};
use biaswap_core::classifiers::{gce_gradient_check, Classifier, ClassifierSpec};
use biaswap_core::dataset_forge::manifest::{load_manifest, write_manifest};
use biaswap_core::dataset_forge::Image;
use biaswap_core::debias_pipeline::{Ablation, MetricsReport, Pipeline, PipelineConfig, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

struct Ctx {
    root: PathBuf,
    desk: PipelineConfig,
    oracle: Option<(Pipeline, Duration, Duration)>,
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gce_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let k = rng.random_range(2..=10);
        let logits: Vec<f32> = (0..k).map(|_| rng.random_range(-6.0..6.0)).collect();
        let q = [0.3, 0.7, 1.0][i % 3];
        worst = worst.max(gce_gradient_check(&logits, rng.random_range(0..k), q).map_err(err)?);
    }
    check(worst <= 1e-5, format!("max relative deviation {worst:.2e} over 1000 triples"))
}

fn brute_score(logits: &[f64], target: usize) -> f64 {
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    let (mut best, mut p) = (0, 0.0);
    for (i, v) in logits.iter().enumerate() {
        let q = v.exp() / z;
        if q > p {
            best = i;
            p = q;
        }
    }
    ((best == target) as u8 as f64 - p).abs()
}

fn score_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let k = rng.random_range(2..=10);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-8.0..8.0)).collect();
        let t = rng.random_range(0..k);
        let r = bias_score("x", &logits, t).map_err(err)?;
        worst = worst.max((r.score - brute_score(&logits, t)).abs());
    }
    let a = bias_score("a", &[0.99f64.ln(), 0.01f64.ln()], 0).map_err(err)?.score;
    let b = bias_score("b", &[0.9f64.ln(), 0.1f64.ln()], 1).map_err(err)?.score;
    let c = bias_score("c", &[5.0, 0.0, 0.0], 0).map_err(err)?.score;
    let c_want = 2.0 / (5f64.exp() + 2.0);
    let examples = (a - 0.01).abs() < 1e-12 && (b - 0.9).abs() < 1e-12 && (c - c_want).abs() < 1e-12;
    check(
        worst <= 1e-12 && examples,
        format!("max |Δ| {worst:.1e} on 10^4 inputs; examples {a:.5} {b:.5} {c:.5}"),
    )
}

fn cam_logit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let mut model = Classifier::new(ClassifierSpec::conv_gap(10, [28, 28, 3]), i);
        // perturb the head so every pair is a distinct network
        for w in model.head_weights_mut().map_err(err)?.data.iter_mut() {
            *w += rng.random_range(-0.5..0.5);
        }
        let img = Image::new(28, 28, 3, (0..28 * 28 * 3).map(|_| rng.random::<f32>()).collect());
        let c = rng.random_range(0..10);
        let logit = model.predict_logits(&[&img]).map_err(err)?[0][c] as f64;
        let cam = compute_cam(&model, &img, c, "x").map_err(err)?;
        let reduced = cam.values.iter().sum::<f64>() / cam.values.len() as f64;
        worst = worst.max((reduced - logit).abs());
    }
    check(worst <= 1e-5, format!("max |mean CAM - logit| {worst:.2e} on 100 pairs"))
}

fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let stat: f64 = counts.iter().zip(probs).map(|(c, p)| (*c as f64 - p * n as f64).powi(2) / (p * n as f64)).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

fn sampling_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Classifier::new(ClassifierSpec::conv_gap(10, [28, 28, 3]), 3);
    let img = Image::new(28, 28, 3, (0..28 * 28 * 3).map(|_| rng.random::<f32>()).collect());
    let cam = compute_cam(&model, &img, 0, "x").map_err(err)?;
    let mut values = cam.values.clone();
    // spread the map so the test distinguishes it from uniform
    let (lo, hi) = values.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
    for v in values.iter_mut() {
        *v = 30.0 * (*v - lo) / (hi - lo + 1e-12);
    }
    let map = biaswap_core::cam_sampler::ImportanceMap { values, ..cam };
    let dist = to_sampling_distribution(&map, 10.0).map_err(err)?;
    let stride = 4;
    let mut parts = Vec::new();
    let mut ok = true;
    for (mode, probs) in [
        (CropMode::BiasTailored, dist.probabilities.clone()),
        (CropMode::Uniform, PatchDistribution::uniform(dist.height, dist.width).probabilities),
    ] {
        let ps = sample_placements(&dist, mode, stride, 7, 100_000, (28, 28), &mut rng).map_err(err)?;
        let mut counts = vec![0u64; probs.len()];
        for p in &ps {
            counts[(p.center.0 / stride) * dist.width + p.center.1 / stride] += 1;
        }
        let pv = chi_square_p(&counts, &probs);
        ok &= pv > 0.01;
        parts.push(format!("{} p={pv:.3}", mode.name()));
    }
    check(ok, format!("{} on 10^5 crop centres", parts.join(", ")))
}

fn timed(p: &Pipeline, stages: &[Stage]) -> Result<Duration, String> {
    let t = Instant::now();
    for &s in stages {
        p.run_stage(s, false).map_err(|e| format!("{s}: {e}"))?;
    }
    Ok(t.elapsed())
}

fn partition_f1(p: &Pipeline) -> Result<f64, String> {
    let text = std::fs::read_to_string(p.stage_dir(Stage::Partition).join("metrics.json")).map_err(err)?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(err)?;
    v["f1"].as_f64().ok_or_else(|| "partition metrics lack f1".to_string())
}

fn oracle_run(ctx: &mut Ctx) -> Result<&(Pipeline, Duration, Duration), String> {
    if ctx.oracle.is_none() {
        let p = Pipeline::new(ctx.desk.clone().with_oracle_swap(true), &ctx.root);
        let head = timed(&p, &[Stage::Data, Stage::BiasedTrain, Stage::Partition])?;
        let tail = timed(&p, &Stage::ALL[3..])?;
        ctx.oracle = Some((p, head, head + tail));
    }
    Ok(ctx.oracle.as_ref().unwrap())
}

fn partition_quality(ctx: &mut Ctx) -> Outcome {
    let (p, head, _) = oracle_run(ctx)?;
    let f1 = partition_f1(p)?;
    check(
        f1 >= 0.85 && head.as_secs() <= 600,
        format!("macro F1 {f1:.4}, data+biased+partition {:.0}s", head.as_secs_f64()),
    )
}

fn oracle_delta(ctx: &mut Ctx) -> Outcome {
    let (p, _, total) = oracle_run(ctx)?;
    let m = p.metrics().map_err(err)?;
    check(
        m.unbiased_delta >= 0.20 && total.as_secs() <= 900,
        format!(
            "debiased {:.2}% vs vanilla {:.2}% (delta {:+.2} points), {:.0}s",
            100.0 * m.debiased.unbiased_accuracy,
            100.0 * m.vanilla.unbiased_accuracy,
            100.0 * m.unbiased_delta,
            total.as_secs_f64()
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn gan_delta(ctx: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let mut reports: Vec<MetricsReport> = Vec::new();
    for seed in 0..3 {
        let p = Pipeline::new(ctx.desk.clone().with_seed(seed), &ctx.root);
        if let Some((o, _, _)) = &ctx.oracle {
            p.adopt_from(o).map_err(err)?;
        }
        p.run_all(false).map_err(err)?;
        reports.push(p.metrics().map_err(err)?);
    }
    let deltas: Vec<f64> = reports.iter().map(|r| r.unbiased_delta).collect();
    let hues: Vec<f64> = reports.iter().map(|r| r.hue_transfer_rate.unwrap_or(0.0)).collect();
    let (d, h) = (median(deltas.clone()), median(hues.clone()));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{:.1}", 100.0 * x)).collect::<Vec<_>>().join("/");
    check(
        d >= 0.10 && h >= 0.60 && t.elapsed().as_secs() <= 3600,
        format!(
            "median delta {:+.2} points ({}), median hue transfer {:.1}% ({}), {:.0}s",
            100.0 * d,
            fmt(&deltas),
            100.0 * h,
            fmt(&hues),
            t.elapsed().as_secs_f64()
        ),
    )
}

fn ablation_order(ctx: &mut Ctx) -> Outcome {
    oracle_run(ctx)?;
    let root = ctx.root.clone();
    let (full, _, _) = ctx.oracle.as_ref().unwrap();
    let base = full.metrics().map_err(err)?;
    let mut tags = Vec::new();
    let mut accs = Vec::new();
    for ab in [Ablation::C1, Ablation::C2] {
        let p = Pipeline::new(full.config.clone().with_ablation(ab), &root);
        p.adopt_from(full).map_err(err)?;
        p.run_all(false).map_err(err)?;
        let m = p.metrics().map_err(err)?;
        tags.push(m.ablation_tag.clone());
        accs.push(m.debiased.unbiased_accuracy);
    }
    check(
        base.debiased.unbiased_accuracy > accs[0],
        format!(
            "full {:.2}% vs {} {:.2}% (gated); {} {:.2}% (reported)",
            100.0 * base.debiased.unbiased_accuracy,
            tags[0],
            100.0 * accs[0],
            tags[1],
            100.0 * accs[1]
        ),
    )
}

fn determinism(ctx: &mut Ctx) -> Outcome {
    let tiny = PipelineConfig::load(&workspace().join("configs/tiny.cfg")).map_err(err)?;
    let a = Pipeline::new(tiny.clone(), &ctx.root.join("det-a"));
    let b = Pipeline::new(tiny, &ctx.root.join("det-b"));
    a.run_all(false).map_err(err)?;
    b.run_all(false).map_err(err)?;
    let same = a.metrics().map_err(err)? == b.metrics().map_err(err)?;
    let mut dirs: Vec<PathBuf> = vec![a.stage_dir(Stage::Data).join("dataset"), a.stage_dir(Stage::Augment).join("dataset")];
    if let Some((o, _, _)) = &ctx.oracle {
        dirs.push(o.stage_dir(Stage::Data).join("dataset"));
        dirs.push(o.stage_dir(Stage::Augment).join("dataset"));
    }
    let scratch = tempfile::tempdir().map_err(err)?;
    let mut checked = 0;
    for (i, d) in dirs.iter().enumerate() {
        if !d.exists() {
            return Err(format!("missing dataset {}", d.display()));
        }
        let ds = load_manifest(d).map_err(err)?;
        let out = scratch.path().join(i.to_string());
        write_manifest(&ds, &out).map_err(err)?;
        if load_manifest(&out).map_err(err)? != ds {
            return Err(format!("round trip changed {}", d.display()));
        }
        checked += 1;
    }
    check(same, format!("identical reports across two runs: {same}; {checked} manifests round-trip"))
}

fn main() -> ExitCode {
    let keep = std::env::var_os("BIASWAP_ACCEPTANCE_ROOT").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temporary run root");
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    let desk = PipelineConfig::load(&workspace().join("configs/desk_colored_mnist.cfg")).expect("desk config");
    let mut ctx = Ctx { root, desk, oracle: None };
    let criteria: [(&str, fn(&mut Ctx) -> Outcome); 9] = [
        ("GCE gradient identity", |_| gce_identity()),
        ("bias score oracle", |_| score_oracle()),
        ("partition quality", partition_quality),
        ("CAM/logit consistency", |_| cam_logit()),
        ("sampling fidelity", |_| sampling_fidelity()),
        ("oracle-swap delta", oracle_delta),
        ("GAN-swap delta", gan_delta),
        ("ablation ordering", ablation_order),
        ("determinism and round trip", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (tag, detail) = match f(&mut ctx) {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {}. {name}: {detail} [{:.1}s]", i + 1, t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
