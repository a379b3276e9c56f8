//! Stage orchestration, evaluation and ablations.
//!
//! A run lives in `<root>/<config-hash>/`, one directory per stage. A stage is
//! complete when its `stage.json` marker exists; the marker records a
//! fingerprint of the config keys the stage reads and of its upstream outputs,
//! plus a digest of its own outputs. Rerunning a complete stage whose
//! fingerprint still matches is a no-op.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bias_partition::{
    assign_pseudo_labels, partition_metrics, read_partition_csv, report_thresholds, score_examples, write_partition_csv,
    Partition,
};
use crate::bias_swap_augment::{
    build_pairs, generate_bias_swapped, hue_transfer_rate, oracle_recolor_swap, union_dataset, SwapPair,
};
use crate::cam_sampler::{compute_cams, dump_cam, to_sampling_distribution, CropMode, PatchDistribution};
use crate::classifiers::{load_checkpoint, save_checkpoint, train_classifier, write_curve_csv, Classifier};
use crate::dataset_forge::manifest::{load_manifest, write_manifest};
use crate::dataset_forge::{
    class_composition, generate_colored_mnist, generate_corrupted_cifar10, Dataset, DatasetKind, DigitSource, ImageSource,
    LabeledExample, GUIDING_TEST, TRAIN, UNBIASED_TEST,
};
use crate::swap_autoencoder::{write_loss_csv, write_sample_grid, SwapAEState, SwapTrainData};
use crate::{Error, Result};

pub use config::{default_config_text, Ablation, PipelineConfig};
pub use report::{emit_report, read_report, MetricsReport, PartitionSummary, SplitAccuracies};

/// Overrides the default run root `runs`.
pub const RUN_ROOT_ENV: &str = "BIASWAP_RUN_ROOT";
pub const MARKER_FILE: &str = "stage.json";
pub const CONFIG_FILE: &str = "config.cfg";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Data,
    BiasedTrain,
    Partition,
    SwapaeTrain,
    Augment,
    DebiasTrain,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Data,
        Stage::BiasedTrain,
        Stage::Partition,
        Stage::SwapaeTrain,
        Stage::Augment,
        Stage::DebiasTrain,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::BiasedTrain => "biased_train",
            Stage::Partition => "partition",
            Stage::SwapaeTrain => "swapae_train",
            Stage::Augment => "augment",
            Stage::DebiasTrain => "debias_train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Data => &[],
            Stage::BiasedTrain => &[Stage::Data],
            Stage::Partition => &[Stage::Data, Stage::BiasedTrain],
            Stage::SwapaeTrain => &[Stage::Data, Stage::BiasedTrain, Stage::Partition],
            Stage::Augment => &[Stage::Data, Stage::Partition, Stage::SwapaeTrain],
            Stage::DebiasTrain => &[Stage::Data, Stage::Augment],
            Stage::Evaluate => &[Stage::Data, Stage::Partition, Stage::Augment, Stage::DebiasTrain],
            Stage::Report => &[Stage::Evaluate],
        }
    }

    /// Config key prefixes the stage reads directly.
    fn keys(self) -> &'static [&'static str] {
        match self {
            Stage::Data => &["seed", "data."],
            Stage::BiasedTrain => &["biased.", "partition."],
            Stage::Partition => &["partition."],
            Stage::SwapaeTrain => &["swapae.", "augment."],
            Stage::Augment => &["augment."],
            Stage::DebiasTrain => &["debias."],
            Stage::Evaluate | Stage::Report => &[],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Marker {
    stage: String,
    config_hash: String,
    fingerprint: String,
    /// SHA-256 over the stage's output files.
    digest: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

/// Accuracy and confusion matrix of one classifier on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub split: String,
    pub accuracy: f64,
    /// Accuracy on the examples flagged bias-contrary, if any are.
    pub contrary_accuracy: Option<f64>,
    /// `confusion[target][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(classifier: &Classifier, split: &str, examples: &[LabeledExample]) -> Result<SplitEvaluation> {
    let k = classifier.spec.num_classes;
    if let Some(e) = examples.iter().find(|e| e.image.shape() != classifier.spec.input_shape) {
        return Err(Error::InvalidArgument(format!(
            "split {split}: example {} has shape {:?}, classifier expects {:?}",
            e.example_id,
            e.image.shape(),
            classifier.spec.input_shape
        )));
    }
    if examples.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split} is empty")));
    }
    let images: Vec<_> = examples.iter().map(|e| &e.image).collect();
    let preds = classifier.predict(&images)?;
    let mut confusion = vec![vec![0usize; k]; k];
    let (mut correct, mut c_total, mut c_correct) = (0usize, 0usize, 0usize);
    for (e, &p) in examples.iter().zip(&preds) {
        if e.target >= k {
            return Err(Error::InvalidArgument(format!("example {} target out of range", e.example_id)));
        }
        confusion[e.target][p] += 1;
        let hit = p == e.target;
        correct += hit as usize;
        if e.gt_bias_flag == Some(true) {
            c_total += 1;
            c_correct += hit as usize;
        }
    }
    Ok(SplitEvaluation {
        split: split.to_string(),
        accuracy: correct as f64 / examples.len() as f64,
        contrary_accuracy: (c_total > 0).then(|| c_correct as f64 / c_total as f64),
        confusion,
    })
}

fn write_confusion_csv(eval: &SplitEvaluation, path: &Path) -> Result<()> {
    let k = eval.confusion.len();
    let mut out = String::from("target");
    for p in 0..k {
        out.push_str(&format!(",pred_{p}"));
    }
    out.push('\n');
    for (t, row) in eval.confusion.iter().enumerate() {
        out.push_str(&t.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Digest over every file below `dir` except the marker, in path order.
fn dir_digest(dir: &Path) -> Result<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else {
                let rel = p.strip_prefix(base).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                if rel != MARKER_FILE {
                    out.push((rel, p));
                }
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, p) in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(fs::read(&p)?);
    }
    Ok(hex::encode(h.finalize()))
}

fn copy_dir(src: &Path, dst: &Path) -> Result<()> {
    fs::create_dir_all(dst)?;
    for entry in fs::read_dir(src)? {
        let entry = entry?;
        let to = dst.join(entry.file_name());
        if entry.path().is_dir() {
            copy_dir(&entry.path(), &to)?;
        } else {
            fs::copy(entry.path(), to)?;
        }
    }
    Ok(())
}

/// Loads and validates a manifest written by [`write_manifest`], failing
/// unless it reads back identical to `dataset`.
fn write_checked(dataset: &Dataset, dir: &Path) -> Result<()> {
    write_manifest(dataset, dir)?;
    let back = load_manifest(dir)?;
    if back.splits != dataset.splits || back.num_classes != dataset.num_classes || back.spec != dataset.spec {
        return Err(Error::Manifest { record: dir.display().to_string(), reason: "round trip changed the dataset".into() });
    }
    Ok(())
}

fn write_pairs_csv(pairs: &[SwapPair], path: &Path) -> Result<()> {
    let mut out = String::from("content_id,style_id\n");
    for p in pairs {
        out.push_str(&format!("{},{}\n", p.content_id, p.style_id));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AugmentSummary {
    generated: usize,
    hue_transfer_rate: Option<f64>,
    per_class: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PartitionFile {
    precision: f64,
    recall: f64,
    f1: f64,
    threshold: f64,
    contrary_count: usize,
    guiding_count: usize,
}

/// One configured run.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub run_dir: PathBuf,
    /// Print progress to stderr.
    pub verbose: bool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, root: &Path) -> Self {
        let run_dir = root.join(config.hash());
        Self { config, run_dir, verbose: false }
    }

    /// Run root from [`RUN_ROOT_ENV`], or `runs`.
    pub fn default_root() -> PathBuf {
        std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(stage.name())
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[{}] {}", self.config.hash(), msg.as_ref());
        }
    }

    fn marker(&self, stage: Stage) -> Option<Marker> {
        let text = fs::read_to_string(self.stage_dir(stage).join(MARKER_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Fingerprint the stage would have if run now; errors if an upstream
    /// stage is incomplete.
    pub fn fingerprint(&self, stage: Stage) -> Result<String> {
        let mut parts: Vec<Vec<u8>> = vec![stage.name().as_bytes().to_vec(), self.config.subset_hash(stage.keys()).into_bytes()];
        for &up in stage.upstream() {
            let m = self.marker(up).ok_or_else(|| Error::MissingStage { stage: up.name().into() })?;
            if self.fingerprint(up)? != m.fingerprint {
                return Err(Error::MissingStage { stage: up.name().into() });
            }
            parts.push(m.digest.into_bytes());
        }
        let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
        Ok(sha_hex(&refs))
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        match (self.marker(stage), self.fingerprint(stage)) {
            (Some(m), Ok(fp)) => m.fingerprint == fp,
            _ => false,
        }
    }

    pub fn run_stage(&self, stage: Stage, force: bool) -> Result<StageOutcome> {
        let fingerprint = self.fingerprint(stage)?;
        if !force && self.marker(stage).is_some_and(|m| m.fingerprint == fingerprint) {
            self.log(format!("{stage} up to date"));
            return Ok(StageOutcome::UpToDate);
        }
        fs::create_dir_all(&self.run_dir)?;
        fs::write(self.run_dir.join(CONFIG_FILE), self.config.to_string())?;
        let dir = self.stage_dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        self.log(format!("{stage} running"));
        match stage {
            Stage::Data => self.stage_data(&dir)?,
            Stage::BiasedTrain => self.stage_biased(&dir)?,
            Stage::Partition => self.stage_partition(&dir)?,
            Stage::SwapaeTrain => self.stage_swapae(&dir)?,
            Stage::Augment => self.stage_augment(&dir)?,
            Stage::DebiasTrain => self.stage_debias(&dir)?,
            Stage::Evaluate => self.stage_evaluate(&dir)?,
            Stage::Report => self.stage_report(&dir)?,
        }
        let marker = Marker {
            stage: stage.name().into(),
            config_hash: self.config.hash(),
            fingerprint,
            digest: dir_digest(&dir)?,
        };
        fs::write(dir.join(MARKER_FILE), serde_json::to_vec_pretty(&marker)?)?;
        self.log(format!("{stage} done"));
        Ok(StageOutcome::Ran)
    }

    /// Runs every stage in order. `force` reruns all of them.
    pub fn run_all(&self, force: bool) -> Result<()> {
        for stage in Stage::ALL {
            self.run_stage(stage, force).map_err(|e| stage_error(stage, e))?;
        }
        Ok(())
    }

    /// Copies completed stages from `other` whose fingerprint equals the one
    /// this run expects, in pipeline order. Returns the stages adopted.
    pub fn adopt_from(&self, other: &Pipeline) -> Result<Vec<Stage>> {
        let mut adopted = Vec::new();
        for stage in Stage::ALL {
            if self.is_complete(stage) {
                continue;
            }
            let Some(theirs) = other.marker(stage) else { break };
            if !other.is_complete(stage) || self.fingerprint(stage).ok() != Some(theirs.fingerprint) {
                break;
            }
            let dst = self.stage_dir(stage);
            if dst.exists() {
                fs::remove_dir_all(&dst)?;
            }
            copy_dir(&other.stage_dir(stage), &dst)?;
            adopted.push(stage);
        }
        if !adopted.is_empty() {
            fs::write(self.run_dir.join(CONFIG_FILE), self.config.to_string())?;
        }
        Ok(adopted)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        load_manifest(&self.stage_dir(Stage::Data).join("dataset"))
    }

    pub fn load_partition(&self) -> Result<Partition> {
        read_partition_csv(&self.stage_dir(Stage::Partition).join("partition.csv"))
    }

    pub fn metrics(&self) -> Result<MetricsReport> {
        let text = fs::read_to_string(self.stage_dir(Stage::Evaluate).join("metrics.json"))?;
        let r: MetricsReport = serde_json::from_str(&text)?;
        r.validate()?;
        Ok(r)
    }

    fn stage_data(&self, dir: &Path) -> Result<()> {
        let spec = self.config.dataset_spec()?;
        let ds = match spec.dataset_kind {
            DatasetKind::ColoredMnist => {
                let source = match self.config.source_dir() {
                    Some(d) => DigitSource::from_mnist_dir(d)?,
                    None => {
                        let (tr, te) = self.config.digits_per_class()?;
                        DigitSource::procedural(tr, te, self.config.seed())
                    }
                };
                generate_colored_mnist(&spec, &source)?
            }
            DatasetKind::CorruptedCifar10 => {
                let d = self
                    .config
                    .source_dir()
                    .ok_or_else(|| Error::Config("corrupted_cifar10 needs data.source_dir".into()))?;
                generate_corrupted_cifar10(&spec, &ImageSource::from_cifar10_dir(d)?)?
            }
        };
        write_checked(&ds, &dir.join("dataset"))?;
        let comp = class_composition(ds.train(), ds.num_classes);
        fs::write(dir.join("composition.json"), serde_json::to_vec_pretty(&comp)?)?;
        Ok(())
    }

    fn input_shape(ds: &Dataset) -> Result<[usize; 3]> {
        ds.train()
            .first()
            .map(|e| e.image.shape())
            .ok_or_else(|| Error::InvalidArgument("empty training split".into()))
    }

    fn stage_biased(&self, dir: &Path) -> Result<()> {
        let ds = self.load_dataset()?;
        let spec = PipelineConfig::classifier_spec(self.config.biased_arch()?, ds.num_classes, Self::input_shape(&ds)?);
        let tc = self.config.biased_train()?;
        let out = train_classifier(ds.train(), &spec, &tc)?;
        let snap = self.config.snapshot_epoch()?;
        save_checkpoint(&out.classifier, Some(&tc), tc.epochs, &dir.join("final.ckpt"))?;
        save_checkpoint(out.at_epoch(snap), Some(&tc), snap, &dir.join("snapshot.ckpt"))?;
        write_curve_csv(&out.curve, &dir.join("curve.csv"))?;
        Ok(())
    }

    fn stage_partition(&self, dir: &Path) -> Result<()> {
        let ds = self.load_dataset()?;
        let (model, _, _) = load_checkpoint(&self.stage_dir(Stage::BiasedTrain).join("snapshot.ckpt"))?;
        let records = score_examples(&model, ds.train())?;
        let partition = assign_pseudo_labels(&records)?;
        write_partition_csv(&partition, &dir.join("partition.csv"))?;
        fs::write(dir.join("thresholds.txt"), report_thresholds(&partition, ds.train(), ds.num_classes).to_text())?;
        let m = partition_metrics(&partition, ds.train())?;
        let file = PartitionFile {
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            threshold: partition.threshold,
            contrary_count: partition.contrary_ids.len(),
            guiding_count: partition.guiding_ids.len(),
        };
        fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&file)?)?;
        Ok(())
    }

    /// Sampling distribution of every training image under the biased
    /// classifier's CAM for its target class.
    fn train_distributions(&self, model: &Classifier, train: &[LabeledExample]) -> Result<Vec<PatchDistribution>> {
        let items: Vec<_> = train.iter().map(|e| (&e.image, e.target, e.example_id.as_str())).collect();
        let tau = self.config.swapae()?.temperature;
        compute_cams(model, &items)?.iter().map(|m| to_sampling_distribution(m, tau)).collect()
    }

    fn stage_swapae(&self, dir: &Path) -> Result<()> {
        if self.config.oracle_swap()? {
            fs::write(dir.join("skipped.txt"), "oracle swap: no autoencoder trained\n")?;
            return Ok(());
        }
        let ds = self.load_dataset()?;
        let partition = self.load_partition()?;
        let plan = self.config.augmentation()?;
        let cfg = self.config.swapae()?;
        let train = ds.train();
        let pairs = build_pairs(&partition, train, &plan)?;
        write_pairs_csv(&pairs, &dir.join("pairs.csv"))?;
        let pos: BTreeMap<&str, usize> = train.iter().enumerate().map(|(i, e)| (e.example_id.as_str(), i)).collect();
        let index_pairs: Vec<(usize, usize)> =
            pairs.iter().map(|p| (pos[p.content_id.as_str()], pos[p.style_id.as_str()])).collect();
        let images: Vec<_> = train.iter().map(|e| e.image.clone()).collect();
        let targets: Vec<usize> = train.iter().map(|e| e.target).collect();
        let (model, _, _) = load_checkpoint(&self.stage_dir(Stage::BiasedTrain).join("final.ckpt"))?;
        let dists = if cfg.crop_mode == CropMode::BiasTailored {
            let items: Vec<_> = train.iter().take(8).map(|e| (&e.image, e.target, e.example_id.as_str())).collect();
            for cam in compute_cams(&model, &items)? {
                dump_cam(&cam, &dir.join("cams"), 4)?;
            }
            Some(self.train_distributions(&model, train)?)
        } else {
            None
        };
        let mut state = SwapAEState::new(cfg.clone(), self.config.seed())?;
        let data = SwapTrainData {
            images: &images,
            targets: &targets,
            pairs: &index_pairs,
            distributions: dists.as_deref(),
            classifier: dists.as_ref().map(|_| &model),
        };
        let log = state.train(&data, cfg.steps, Some(&dir.join("samples")))?;
        write_loss_csv(&log, &dir.join("losses.csv"))?;
        state.save(&dir.join("swapae.ckpt"))?;
        Ok(())
    }

    fn stage_augment(&self, dir: &Path) -> Result<()> {
        let ds = self.load_dataset()?;
        let partition = self.load_partition()?;
        let plan = self.config.augmentation()?;
        let pairs = build_pairs(&partition, ds.train(), &plan)?;
        write_pairs_csv(&pairs, &dir.join("pairs.csv"))?;
        let swapped = if self.config.oracle_swap()? {
            oracle_recolor_swap(&pairs, &ds)?
        } else {
            let state = SwapAEState::load(&self.stage_dir(Stage::SwapaeTrain).join("swapae.ckpt"))?;
            generate_bias_swapped(&state, &pairs, ds.train())?
        };
        let hue = match ds.palette() {
            Some(_) => Some(hue_transfer_rate(&swapped, &ds)?),
            None => None,
        };
        let summary = AugmentSummary {
            generated: swapped.len(),
            hue_transfer_rate: hue,
            per_class: crate::bias_swap_augment::per_class_counts(&swapped),
        };
        fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
        if !swapped.is_empty() {
            let idx: BTreeMap<&str, &LabeledExample> = ds.train().iter().map(|e| (e.example_id.as_str(), e)).collect();
            let n = swapped.len().min(16);
            let contents: Vec<_> = pairs[..n].iter().map(|p| &idx[p.content_id.as_str()].image).collect();
            let styles: Vec<_> = pairs[..n].iter().map(|p| &idx[p.style_id.as_str()].image).collect();
            let generated: Vec<_> = swapped[..n].iter().map(|e| e.image.clone()).collect();
            write_sample_grid(&contents, &styles, &generated, &dir.join("contact_sheet.png"))?;
        }
        let mut aug = union_dataset(&ds, swapped, &plan)?;
        // test splits stay in the data stage
        aug.splits.retain(|name, _| name == TRAIN);
        write_checked(&aug, &dir.join("dataset"))?;
        Ok(())
    }

    fn stage_debias(&self, dir: &Path) -> Result<()> {
        let ds = self.load_dataset()?;
        let aug = load_manifest(&self.stage_dir(Stage::Augment).join("dataset"))?;
        let spec = PipelineConfig::classifier_spec(self.config.debias_arch()?, ds.num_classes, Self::input_shape(&ds)?);
        let tc = self.config.debias_train()?;
        // The vanilla model depends only on the data and the debias keys, so
        // runs that differ elsewhere share one copy under the run root.
        let data_digest = self.marker(Stage::Data).map(|m| m.digest).unwrap_or_default();
        let key = sha_hex(&[self.config.subset_hash(Stage::DebiasTrain.keys()).as_bytes(), data_digest.as_bytes()]);
        let shared = self.run_dir.parent().unwrap_or(Path::new(".")).join("shared").join(format!("vanilla-{}", &key[..16]));
        for (name, examples) in [("vanilla", ds.train()), ("debiased", aug.train())] {
            let (ckpt, curve) = (format!("{name}.ckpt"), format!("{name}_curve.csv"));
            if name == "vanilla" && shared.join(&ckpt).exists() && shared.join(&curve).exists() {
                self.log("reusing shared vanilla classifier");
                fs::copy(shared.join(&ckpt), dir.join(&ckpt))?;
                fs::copy(shared.join(&curve), dir.join(&curve))?;
                continue;
            }
            self.log(format!("training {name} classifier on {} images", examples.len()));
            let out = train_classifier(examples, &spec, &tc)?;
            save_checkpoint(&out.classifier, Some(&tc), tc.epochs, &dir.join(&ckpt))?;
            write_curve_csv(&out.curve, &dir.join(&curve))?;
            if name == "vanilla" {
                fs::create_dir_all(&shared)?;
                fs::copy(dir.join(&ckpt), shared.join(&ckpt))?;
                fs::copy(dir.join(&curve), shared.join(&curve))?;
            }
        }
        Ok(())
    }

    fn stage_evaluate(&self, dir: &Path) -> Result<()> {
        let ds = self.load_dataset()?;
        let mut acc = BTreeMap::new();
        for name in ["vanilla", "debiased"] {
            let (model, _, _) = load_checkpoint(&self.stage_dir(Stage::DebiasTrain).join(format!("{name}.ckpt")))?;
            let u = evaluate(&model, UNBIASED_TEST, ds.split(UNBIASED_TEST))?;
            let g = evaluate(&model, GUIDING_TEST, ds.split(GUIDING_TEST))?;
            write_confusion_csv(&u, &dir.join(format!("{name}_{UNBIASED_TEST}_confusion.csv")))?;
            write_confusion_csv(&g, &dir.join(format!("{name}_{GUIDING_TEST}_confusion.csv")))?;
            acc.insert(
                name,
                SplitAccuracies {
                    unbiased_accuracy: u.accuracy,
                    bias_guiding_accuracy: g.accuracy,
                    bias_contrary_accuracy: u.contrary_accuracy,
                },
            );
        }
        let part: PartitionFile =
            serde_json::from_str(&fs::read_to_string(self.stage_dir(Stage::Partition).join("metrics.json"))?)?;
        let aug: AugmentSummary =
            serde_json::from_str(&fs::read_to_string(self.stage_dir(Stage::Augment).join("summary.json"))?)?;
        let spec = self.config.dataset_spec()?;
        let mut curves = BTreeMap::new();
        curves.insert("biased".to_string(), "biased_train/curve.csv".to_string());
        curves.insert("vanilla".to_string(), "debias_train/vanilla_curve.csv".to_string());
        curves.insert("debiased".to_string(), "debias_train/debiased_curve.csv".to_string());
        if !self.config.oracle_swap()? {
            curves.insert("swapae".to_string(), "swapae_train/losses.csv".to_string());
        }
        let (debiased, vanilla) = (acc.remove("debiased").unwrap(), acc.remove("vanilla").unwrap());
        let report = MetricsReport {
            schema_version: report::SCHEMA_VERSION,
            config_hash: self.config.hash(),
            ablation_tag: self.config.ablation_tag(),
            dataset: match spec.dataset_kind {
                DatasetKind::ColoredMnist => "colored_mnist".into(),
                DatasetKind::CorruptedCifar10 => "corrupted_cifar10".into(),
            },
            bias_ratio: spec.bias_ratio,
            seed: self.config.seed(),
            unbiased_delta: debiased.unbiased_accuracy - vanilla.unbiased_accuracy,
            debiased,
            vanilla,
            partition: PartitionSummary {
                precision: part.precision,
                recall: part.recall,
                f1: part.f1,
                threshold: part.threshold,
                contrary_count: part.contrary_count,
            },
            generated: aug.generated,
            hue_transfer_rate: aug.hue_transfer_rate,
            loss_curves: curves,
        };
        report.validate()?;
        fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&report)?)?;
        Ok(())
    }

    fn stage_report(&self, dir: &Path) -> Result<()> {
        emit_report(&[self.metrics()?], dir)?;
        fs::copy(self.run_dir.join(CONFIG_FILE), dir.join(CONFIG_FILE))?;
        Ok(())
    }
}

/// Wraps `e` so its message names the failing stage.
pub fn stage_error(stage: Stage, e: Error) -> Error {
    match e {
        Error::MissingStage { .. } | Error::StageFailed { .. } => e,
        other => Error::StageFailed { stage: stage.name().into(), source: Box::new(other) },
    }
}

/// Runs `base` to completion, then the same config with `ablation` applied,
/// reusing every upstream stage the ablation leaves unchanged. Returns the
/// base and ablation reports.
pub fn run_ablation(base: &PipelineConfig, ablation: Ablation, root: &Path) -> Result<(MetricsReport, MetricsReport)> {
    let full = Pipeline::new(base.clone(), root);
    full.run_all(false)?;
    let ab = Pipeline::new(base.clone().with_ablation(ablation), root);
    ab.adopt_from(&full)?;
    ab.run_all(false)?;
    Ok((full.metrics()?, ab.metrics()?))
}
