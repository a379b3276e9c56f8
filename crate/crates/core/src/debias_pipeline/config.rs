//! Flat `key = value` pipeline configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are errors. Every key has a default, so an empty file is the desk
//! profile on Colored MNIST 0.99.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::bias_swap_augment::{AugmentationPlan, PairingPolicy};
use crate::cam_sampler::CropMode;
use crate::classifiers::{Architecture, ClassifierSpec, LossKind, TrainConfig};
use crate::dataset_forge::{BiasedDatasetSpec, SplitSizes};
use crate::swap_autoencoder::SwapAeConfig;
use crate::{Error, Result};

/// `(key, default, description)` for every recognised key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "global seed; every stage derives its randomness from it"),
    ("data.dataset", "colored_mnist", "colored_mnist | corrupted_cifar10"),
    ("data.bias_ratio", "0.99", "fraction of bias-guiding training examples"),
    ("data.train_size", "10000", "training images"),
    ("data.unbiased_test_size", "5000", "unbiased evaluation images"),
    ("data.guiding_test_size", "5000", "bias-guiding evaluation images"),
    ("data.source_dir", "", "MNIST IDX or CIFAR-10 binary directory; empty = procedural digits"),
    ("data.digits_per_class", "600", "procedural digits per class (train pool)"),
    ("data.test_digits_per_class", "200", "procedural digits per class (test pool)"),
    ("data.severity", "4", "corruption severity 1..=5"),
    ("biased.arch", "conv_gap", "biased classifier architecture (conv_gap | mlp3)"),
    ("biased.loss", "gce", "gce | ce"),
    ("biased.q", "0.7", "GCE exponent"),
    ("biased.epochs", "20", "biased classifier epochs"),
    ("biased.batch_size", "256", ""),
    ("biased.learning_rate", "0.001", ""),
    ("biased.betas", "0,0.99", "Adam beta1,beta2"),
    ("partition.snapshot_epoch", "5", "biased-classifier epoch whose scores partition the data"),
    ("swapae.steps", "5000", "swapping autoencoder updates"),
    ("swapae.batch_size", "8", ""),
    ("swapae.learning_rate", "0.002", ""),
    ("swapae.lambda_recon", "1", ""),
    ("swapae.lambda_gan_recon", "1", ""),
    ("swapae.lambda_gan_swap", "1", ""),
    ("swapae.lambda_cooccur", "1", ""),
    ("swapae.temperature", "10", "CAM softmax temperature"),
    ("swapae.patch_size", "7", "co-occurrence crop side"),
    ("swapae.reference_crops", "4", "reference crops per style image"),
    ("swapae.crop_mode", "bias_tailored", "bias_tailored | uniform (uniform = ablation c2)"),
    ("swapae.r1_gamma", "10", "R1 penalty weight on the image discriminator"),
    ("swapae.ema_decay", "0.999", "decay of the averaged weights used for generation"),
    ("swapae.gen_width", "32", "generator channels"),
    ("swapae.disc_width", "16", "discriminator channels"),
    ("swapae.sample_every", "500", "steps between sample grids"),
    ("augment.pairing_policy", "guiding_content_contrary_style", "or random_pairs (ablation c1)"),
    ("augment.ratio", "1", "bias-swapped images per bias-guiding image"),
    ("augment.class_matching", "true", "style drawn from the content's class"),
    ("augment.oracle_swap", "false", "recolour digits instead of running the autoencoder"),
    ("debias.arch", "conv_gap", "debiased and vanilla classifier architecture"),
    ("debias.epochs", "20", ""),
    ("debias.batch_size", "256", ""),
    ("debias.learning_rate", "0.001", ""),
    ("debias.betas", "0.9,0.999", "Adam beta1,beta2"),
];

/// Ablations of the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Random content/style pairs instead of guiding/contrary pairs.
    C1,
    /// Uniform instead of CAM-guided crops.
    C2,
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c1" => Ok(Self::C1),
            "c2" => Ok(Self::C2),
            _ => Err(Error::Config(format!("unknown ablation {s:?} (expected c1 or c2)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineConfig {
    values: BTreeMap<String, String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl fmt::Display for PipelineConfig {
    /// Canonical form: sorted `key = value` lines.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            cfg.set(k, v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key}"))),
        }
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key).parse().map_err(|_| Error::Config(format!("{key} = {:?} is not valid", self.get(key))))
    }

    fn betas(&self, key: &str) -> Result<(f32, f32)> {
        let bad = || Error::Config(format!("{key} = {:?} is not beta1,beta2", self.get(key)));
        let (a, b) = self.get(key).split_once(',').ok_or_else(bad)?;
        let (a, b): (f32, f32) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if !((0.0..1.0).contains(&a) && (0.0..1.0).contains(&b)) {
            return Err(bad());
        }
        Ok((a, b))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::Config(format!("{key} = {v:?} is not a boolean"))),
        }
    }

    /// Parses every typed view once so errors surface at load time.
    pub fn validate(&self) -> Result<()> {
        self.dataset_spec()?.validate()?;
        self.biased_train()?.validate()?;
        self.debias_train()?.validate()?;
        self.swapae()?.validate()?;
        self.augmentation()?.validate()?;
        let biased = self.biased_arch()?;
        self.debias_arch()?;
        let oracle = self.oracle_swap()?;
        if biased == Architecture::Mlp3 && !oracle && self.swapae()?.crop_mode == CropMode::BiasTailored {
            return Err(Error::Config("bias_tailored crops need a conv_gap biased classifier".into()));
        }
        let snap = self.snapshot_epoch()?;
        if snap == 0 || snap > self.typed::<usize>("biased.epochs")? {
            return Err(Error::Config(format!("partition.snapshot_epoch {snap} outside 1..=biased.epochs")));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.values.insert("seed".into(), seed.to_string());
        self
    }

    /// The config with one ablation applied. C1 changes only the pairing
    /// policy and C2 only the crop mode.
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::C1 => self.values.insert("augment.pairing_policy".into(), PairingPolicy::RandomPairs.name().into()),
            Ablation::C2 => self.values.insert("swapae.crop_mode".into(), CropMode::Uniform.name().into()),
        };
        self
    }

    pub fn with_oracle_swap(mut self, on: bool) -> Self {
        self.values.insert("augment.oracle_swap".into(), on.to_string());
        self
    }

    /// `full`, `w/o c1`, `w/o c2` or `w/o c1+c2`, plus an `oracle` suffix.
    pub fn ablation_tag(&self) -> String {
        let c1 = self.get("augment.pairing_policy") == PairingPolicy::RandomPairs.name();
        let c2 = self.get("swapae.crop_mode") == CropMode::Uniform.name();
        let mut tag = match (c1, c2) {
            (false, false) => "full".to_string(),
            (true, false) => "w/o c1".to_string(),
            (false, true) => "w/o c2".to_string(),
            (true, true) => "w/o c1+c2".to_string(),
        };
        if self.oracle_swap().unwrap_or(false) {
            tag.push_str(" (oracle swap)");
        }
        tag
    }

    /// SHA-256 of the canonical form, first 16 hex digits.
    pub fn hash(&self) -> String {
        digest_entries(self.values.iter())
    }

    /// Hash over the keys whose name starts with one of `prefixes`.
    pub fn subset_hash(&self, prefixes: &[&str]) -> String {
        digest_entries(self.values.iter().filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p))))
    }

    pub fn seed(&self) -> u64 {
        self.typed("seed").unwrap_or(0)
    }

    pub fn oracle_swap(&self) -> Result<bool> {
        self.flag("augment.oracle_swap")
    }

    pub fn snapshot_epoch(&self) -> Result<usize> {
        self.typed("partition.snapshot_epoch")
    }

    pub fn source_dir(&self) -> Option<&Path> {
        let s = self.get("data.source_dir");
        (!s.is_empty()).then(|| Path::new(s))
    }

    pub fn digits_per_class(&self) -> Result<(usize, usize)> {
        Ok((self.typed("data.digits_per_class")?, self.typed("data.test_digits_per_class")?))
    }

    pub fn dataset_spec(&self) -> Result<BiasedDatasetSpec> {
        let sizes = SplitSizes {
            train: self.typed("data.train_size")?,
            unbiased_test: self.typed("data.unbiased_test_size")?,
            guiding_test: self.typed("data.guiding_test_size")?,
        };
        let ratio = self.typed("data.bias_ratio")?;
        let mut spec = match self.get("data.dataset") {
            "colored_mnist" => BiasedDatasetSpec::colored_mnist(ratio, sizes, self.seed()),
            "corrupted_cifar10" => BiasedDatasetSpec::corrupted_cifar10(ratio, sizes, self.seed()),
            other => return Err(Error::Config(format!("unknown dataset {other:?}"))),
        };
        spec.severity = self.typed("data.severity")?;
        Ok(spec)
    }

    fn arch(&self, key: &str) -> Result<Architecture> {
        Architecture::parse(self.get(key)).map_err(|e| Error::Config(format!("{key}: {e}")))
    }

    pub fn biased_arch(&self) -> Result<Architecture> {
        self.arch("biased.arch")
    }

    pub fn debias_arch(&self) -> Result<Architecture> {
        self.arch("debias.arch")
    }

    pub fn classifier_spec(arch: Architecture, num_classes: usize, input_shape: [usize; 3]) -> ClassifierSpec {
        match arch {
            Architecture::ConvGap => ClassifierSpec::conv_gap(num_classes, input_shape),
            Architecture::Mlp3 => ClassifierSpec::mlp3(num_classes, input_shape),
        }
    }

    pub fn biased_train(&self) -> Result<TrainConfig> {
        let loss = match self.get("biased.loss") {
            "gce" => LossKind::Gce { q: self.typed("biased.q")? },
            "ce" => LossKind::Ce,
            other => return Err(Error::Config(format!("unknown biased.loss {other:?}"))),
        };
        Ok(TrainConfig {
            loss,
            epochs: self.typed("biased.epochs")?,
            batch_size: self.typed("biased.batch_size")?,
            learning_rate: self.typed("biased.learning_rate")?,
            betas: self.betas("biased.betas")?,
            seed: self.seed(),
            snapshot_epochs: vec![self.snapshot_epoch()?],
        })
    }

    /// Shared by the vanilla baseline and the debiased classifier.
    pub fn debias_train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            loss: LossKind::Ce,
            epochs: self.typed("debias.epochs")?,
            batch_size: self.typed("debias.batch_size")?,
            learning_rate: self.typed("debias.learning_rate")?,
            betas: self.betas("debias.betas")?,
            seed: self.seed(),
            snapshot_epochs: Vec::new(),
        })
    }

    pub fn swapae(&self) -> Result<SwapAeConfig> {
        let crop_mode = match self.get("swapae.crop_mode") {
            "bias_tailored" => CropMode::BiasTailored,
            "uniform" => CropMode::Uniform,
            other => return Err(Error::Config(format!("unknown swapae.crop_mode {other:?}"))),
        };
        let spec = self.dataset_spec()?;
        let side = match spec.dataset_kind {
            crate::dataset_forge::DatasetKind::ColoredMnist => 28,
            crate::dataset_forge::DatasetKind::CorruptedCifar10 => 32,
        };
        Ok(SwapAeConfig {
            image_size: side,
            steps: self.typed("swapae.steps")?,
            batch_size: self.typed("swapae.batch_size")?,
            learning_rate: self.typed("swapae.learning_rate")?,
            lambda_recon: self.typed("swapae.lambda_recon")?,
            lambda_gan_recon: self.typed("swapae.lambda_gan_recon")?,
            lambda_gan_swap: self.typed("swapae.lambda_gan_swap")?,
            lambda_cooccur: self.typed("swapae.lambda_cooccur")?,
            temperature: self.typed("swapae.temperature")?,
            patch_size: self.typed("swapae.patch_size")?,
            reference_crops: self.typed("swapae.reference_crops")?,
            crop_mode,
            r1_gamma: self.typed("swapae.r1_gamma")?,
            ema_decay: self.typed("swapae.ema_decay")?,
            gen_width: self.typed("swapae.gen_width")?,
            disc_width: self.typed("swapae.disc_width")?,
            sample_every: self.typed("swapae.sample_every")?,
            ..SwapAeConfig::default()
        })
    }

    pub fn augmentation(&self) -> Result<AugmentationPlan> {
        Ok(AugmentationPlan {
            pairing_policy: PairingPolicy::parse(self.get("augment.pairing_policy"))?,
            augment_ratio: self.typed("augment.ratio")?,
            class_matching: self.flag("augment.class_matching")?,
            seed: self.seed(),
        })
    }
}

fn digest_entries<'a>(entries: impl Iterator<Item = (&'a String, &'a String)>) -> String {
    let mut h = Sha256::new();
    for (k, v) in entries {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())[..16].to_string()
}

/// Documented default config, one key per line.
pub fn default_config_text() -> String {
    let mut out = String::new();
    for (k, v, doc) in KEYS {
        if !doc.is_empty() {
            out.push_str(&format!("# {doc}\n"));
        }
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}
