//! Synthetic biased datasets with ground-truth bias flags.
//!
//! Every class `c` is tied to one bias attribute (a colour for Colored MNIST,
//! a corruption for Corrupted CIFAR-10). A `bias_ratio` fraction of each
//! class's training images carries attribute `c` (bias-guiding); the rest get
//! one of the other attributes chosen uniformly (bias-contrary). The unbiased
//! test split draws attributes independently of the label, the bias-guiding
//! test split always uses the class's own attribute.

pub mod corruptions;
pub mod digits;
pub mod manifest;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::{Error, Result};
pub use corruptions::Corruption;
pub use digits::{DigitSource, GrayDigit};

pub const TRAIN: &str = "train";
pub const UNBIASED_TEST: &str = "unbiased_test";
pub const GUIDING_TEST: &str = "guiding_test";

/// Float image in `[0, 1]`, stored height × width × channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * channels);
        Self { height, width, channels, data }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Writes the image as channel planes into `dst` (length `c·h·w`).
    pub fn write_chw(&self, dst: &mut [f32]) {
        let hw = self.height * self.width;
        for (p, px) in self.data.chunks(self.channels).enumerate() {
            for (ch, v) in px.iter().enumerate() {
                dst[ch * hw + p] = *v;
            }
        }
    }

    pub fn from_chw(height: usize, width: usize, channels: usize, src: &[f32]) -> Self {
        let hw = height * width;
        let mut data = vec![0.0; hw * channels];
        for p in 0..hw {
            for ch in 0..channels {
                data[p * channels + ch] = src[ch * hw + p];
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Crops a `size × size` window with top-left `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Image {
        assert!(top + size <= self.height && left + size <= self.width);
        let mut data = Vec::with_capacity(size * size * self.channels);
        for r in top..top + size {
            let start = (r * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + size * self.channels]);
        }
        Image::new(size, size, self.channels, data)
    }
}

/// Stacks images into an NCHW tensor.
pub fn batch_tensor<'a>(images: impl IntoIterator<Item = &'a Image>) -> Tensor {
    let images: Vec<&Image> = images.into_iter().collect();
    assert!(!images.is_empty(), "empty batch");
    let [h, w, c] = images[0].shape();
    let per = h * w * c;
    let mut data = vec![0.0; images.len() * per];
    for (i, img) in images.iter().enumerate() {
        assert_eq!(img.shape(), [h, w, c], "mixed image shapes in batch");
        img.write_chw(&mut data[i * per..(i + 1) * per]);
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// Splits an NCHW tensor back into images.
pub fn unbatch_tensor(t: &Tensor) -> Vec<Image> {
    let (n, c, h, w) = t.dims4();
    let per = c * h * w;
    (0..n).map(|i| Image::from_chw(h, w, c, &t.data[i * per..(i + 1) * per])).collect()
}

/// Where a generated example came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub content_id: String,
    pub style_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub example_id: String,
    pub image: Image,
    pub target: usize,
    /// `true` = bias-contrary. `None` for generated examples.
    pub gt_bias_flag: Option<bool>,
    /// `1` = bias-contrary, assigned by the partition stage.
    pub pseudo_bias_label: Option<u8>,
    /// Index of the injected bias attribute, when known.
    pub bias_attribute: Option<usize>,
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    ColoredMnist,
    CorruptedCifar10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub unbiased_test: usize,
    pub guiding_test: usize,
}

/// The ordered bias attributes, one per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasAttributes {
    Palette(Vec<[f32; 3]>),
    Corruptions(Vec<Corruption>),
}

impl BiasAttributes {
    pub fn len(&self) -> usize {
        match self {
            Self::Palette(p) => p.len(),
            Self::Corruptions(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ten well-separated, bright RGB colours. Index `c` is the bias colour of digit `c`.
pub const DEFAULT_PALETTE: [[f32; 3]; 10] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [0.0, 1.0, 0.5],
    [1.0, 1.0, 1.0],
];

pub const DEFAULT_BIAS_RATIOS: [f64; 4] = [0.95, 0.98, 0.99, 0.995];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasedDatasetSpec {
    pub dataset_kind: DatasetKind,
    pub num_classes: usize,
    pub bias_ratio: f64,
    pub attributes: BiasAttributes,
    /// Corruption severity in `1..=5`; ignored for Colored MNIST.
    pub severity: u8,
    pub seed: u64,
    pub split_sizes: SplitSizes,
}

impl BiasedDatasetSpec {
    pub fn colored_mnist(bias_ratio: f64, split_sizes: SplitSizes, seed: u64) -> Self {
        Self {
            dataset_kind: DatasetKind::ColoredMnist,
            num_classes: 10,
            bias_ratio,
            attributes: BiasAttributes::Palette(DEFAULT_PALETTE.to_vec()),
            severity: corruptions::DEFAULT_SEVERITY,
            seed,
            split_sizes,
        }
    }

    pub fn corrupted_cifar10(bias_ratio: f64, split_sizes: SplitSizes, seed: u64) -> Self {
        Self {
            dataset_kind: DatasetKind::CorruptedCifar10,
            num_classes: 10,
            bias_ratio,
            attributes: BiasAttributes::Corruptions(Corruption::ALL.to_vec()),
            severity: corruptions::DEFAULT_SEVERITY,
            seed,
            split_sizes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 classes, got {k}")));
        }
        if self.attributes.len() != k {
            return Err(Error::InvalidSpec(format!(
                "{} bias attributes for {k} classes",
                self.attributes.len()
            )));
        }
        if !(self.bias_ratio > 0.0 && self.bias_ratio <= 1.0) {
            return Err(Error::InvalidSpec(format!("bias_ratio {} outside (0, 1]", self.bias_ratio)));
        }
        match (&self.dataset_kind, &self.attributes) {
            (DatasetKind::ColoredMnist, BiasAttributes::Palette(p)) => {
                if p.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidSpec("palette entries must lie in [0, 1]".into()));
                }
            }
            (DatasetKind::CorruptedCifar10, BiasAttributes::Corruptions(_)) => {
                if !(corruptions::SEVERITY_RANGE).contains(&self.severity) {
                    return Err(Error::InvalidSpec(format!("severity {} outside 1..=5", self.severity)));
                }
            }
            _ => return Err(Error::InvalidSpec("attribute list does not match dataset kind".into())),
        }
        Ok(())
    }
}

/// A set of named splits plus the spec that produced them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub spec: Option<BiasedDatasetSpec>,
    pub num_classes: usize,
    pub splits: BTreeMap<String, Vec<LabeledExample>>,
    /// Free-form metadata echoed into the manifest (e.g. an augmentation plan).
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> &[LabeledExample] {
        self.splits.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn split_mut(&mut self, name: &str) -> &mut Vec<LabeledExample> {
        self.splits.entry(name.to_string()).or_default()
    }

    pub fn train(&self) -> &[LabeledExample] {
        self.split(TRAIN)
    }

    pub fn len(&self) -> usize {
        self.splits.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn palette(&self) -> Option<&[[f32; 3]]> {
        match self.spec.as_ref().map(|s| &s.attributes) {
            Some(BiasAttributes::Palette(p)) => Some(p),
            _ => None,
        }
    }
}

/// Per-class counts of a biased training split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassComposition {
    pub class: usize,
    pub total: usize,
    pub contrary: usize,
}

pub fn class_composition(examples: &[LabeledExample], num_classes: usize) -> Vec<ClassComposition> {
    let mut out: Vec<ClassComposition> =
        (0..num_classes).map(|class| ClassComposition { class, total: 0, contrary: 0 }).collect();
    for e in examples {
        out[e.target].total += 1;
        if e.gt_bias_flag == Some(true) {
            out[e.target].contrary += 1;
        }
    }
    out
}

/// Attribute assignment shared by both dataset kinds: returns
/// `(target, attribute, contrary)` per example of a split, in output order.
fn assign_attributes(
    split: &str,
    n: usize,
    k: usize,
    bias_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize, bool)> {
    let per_class = |c: usize| n / k + usize::from(c < n % k);
    let mut out = Vec::with_capacity(n);
    match split {
        TRAIN => {
            for c in 0..k {
                let count = per_class(c);
                let contrary = ((1.0 - bias_ratio) * count as f64).round() as usize;
                let mut flags: Vec<bool> = (0..count).map(|i| i < contrary).collect();
                flags.shuffle(rng);
                for f in flags {
                    let attr = if f { other_attribute(c, k, rng) } else { c };
                    out.push((c, attr, f));
                }
            }
        }
        UNBIASED_TEST => {
            for c in 0..k {
                for _ in 0..per_class(c) {
                    let attr = rng.random_range(0..k);
                    out.push((c, attr, attr != c));
                }
            }
        }
        GUIDING_TEST => {
            for c in 0..k {
                out.extend((0..per_class(c)).map(|_| (c, c, false)));
            }
        }
        _ => unreachable!("unknown split {split}"),
    }
    out
}

fn other_attribute(c: usize, k: usize, rng: &mut ChaCha8Rng) -> usize {
    let a = rng.random_range(0..k - 1);
    if a >= c {
        a + 1
    } else {
        a
    }
}

fn split_rng(seed: u64, split: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match split {
        TRAIN => 1,
        UNBIASED_TEST => 2,
        _ => 3,
    });
    rng
}

fn by_class<T>(items: &[T], label: impl Fn(&T) -> usize, k: usize) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); k];
    for (i, it) in items.iter().enumerate() {
        let l = label(it);
        if l < k {
            pools[l].push(i);
        }
    }
    pools
}

/// Per-channel scaling of a grayscale digit by an RGB triple; background stays black.
pub fn recolor(gray: &[f32], height: usize, width: usize, rgb: [f32; 3]) -> Image {
    let mut data = Vec::with_capacity(gray.len() * 3);
    for &g in gray {
        data.extend(rgb.iter().map(|c| g * c));
    }
    Image::new(height, width, 3, data)
}

/// Recovers the grayscale intensity of a recoloured digit (max over channels
/// divided by the colour's peak channel).
pub fn grayscale_of(image: &Image, rgb: [f32; 3]) -> Vec<f32> {
    let peak = rgb.iter().copied().fold(0.0f32, f32::max).max(1e-6);
    image
        .data
        .chunks(image.channels)
        .map(|px| (px.iter().copied().fold(0.0f32, f32::max) / peak).clamp(0.0, 1.0))
        .collect()
}

pub fn generate_colored_mnist(spec: &BiasedDatasetSpec, source: &DigitSource) -> Result<Dataset> {
    spec.validate()?;
    if spec.dataset_kind != DatasetKind::ColoredMnist {
        return Err(Error::InvalidSpec("generate_colored_mnist needs dataset_kind colored_mnist".into()));
    }
    let BiasAttributes::Palette(palette) = &spec.attributes else { unreachable!() };
    if source.train.is_empty() || source.test.is_empty() {
        return Err(Error::InvalidSpec("empty digit source".into()));
    }
    let k = spec.num_classes;
    let mut ds = Dataset { spec: Some(spec.clone()), num_classes: k, ..Default::default() };
    for (split, n, pool) in [
        (TRAIN, spec.split_sizes.train, &source.train),
        (UNBIASED_TEST, spec.split_sizes.unbiased_test, &source.test),
        (GUIDING_TEST, spec.split_sizes.guiding_test, &source.test),
    ] {
        let mut rng = split_rng(spec.seed, split);
        let mut pools = by_class(pool, |d| d.label, k);
        if let Some(c) = pools.iter().position(Vec::is_empty) {
            if n > 0 {
                return Err(Error::InvalidSpec(format!("digit source has no examples of class {c}")));
            }
        }
        pools.iter_mut().for_each(|p| p.shuffle(&mut rng));
        let mut cursor = vec![0usize; k];
        let plan = assign_attributes(split, n, k, spec.bias_ratio, &mut rng);
        let examples = plan
            .into_iter()
            .enumerate()
            .map(|(i, (target, attr, contrary))| {
                let pick = pools[target][cursor[target] % pools[target].len()];
                cursor[target] += 1;
                let image = recolor(&pool[pick].pixels, digits::DIGIT_SIDE, digits::DIGIT_SIDE, palette[attr]);
                LabeledExample {
                    example_id: format!("{split}-{i:06}"),
                    image,
                    target,
                    gt_bias_flag: Some(contrary),
                    pseudo_bias_label: None,
                    bias_attribute: Some(attr),
                    provenance: None,
                }
            })
            .collect();
        ds.splits.insert(split.to_string(), examples);
    }
    Ok(ds)
}

/// Source images for Corrupted CIFAR-10 (32×32×3 in `[0, 1]`).
#[derive(Clone, Debug, Default)]
pub struct ImageSource {
    pub train: Vec<(Image, usize)>,
    pub test: Vec<(Image, usize)>,
}

impl ImageSource {
    /// Reads the CIFAR-10 binary batches (`data_batch_{1..5}.bin`, `test_batch.bin`).
    pub fn from_cifar10_dir(dir: &std::path::Path) -> Result<Self> {
        let mut train = Vec::new();
        for i in 1..=5 {
            train.extend(load_cifar_batch(&dir.join(format!("data_batch_{i}.bin")))?);
        }
        let test = load_cifar_batch(&dir.join("test_batch.bin"))?;
        Ok(Self { train, test })
    }
}

pub fn load_cifar_batch(path: &std::path::Path) -> Result<Vec<(Image, usize)>> {
    const REC: usize = 1 + 3 * 32 * 32;
    let bytes = std::fs::read(path)?;
    if bytes.len() % REC != 0 {
        return Err(Error::InvalidArgument(format!("{}: not a CIFAR-10 binary batch", path.display())));
    }
    Ok(bytes
        .chunks(REC)
        .map(|r| {
            let planes: Vec<f32> = r[1..].iter().map(|&b| b as f32 / 255.0).collect();
            (Image::from_chw(32, 32, 3, &planes), r[0] as usize)
        })
        .collect())
}

pub fn generate_corrupted_cifar10(spec: &BiasedDatasetSpec, source: &ImageSource) -> Result<Dataset> {
    spec.validate()?;
    if spec.dataset_kind != DatasetKind::CorruptedCifar10 {
        return Err(Error::InvalidSpec("generate_corrupted_cifar10 needs dataset_kind corrupted_cifar10".into()));
    }
    let BiasAttributes::Corruptions(list) = &spec.attributes else { unreachable!() };
    if source.train.is_empty() || source.test.is_empty() {
        return Err(Error::InvalidSpec("empty image source".into()));
    }
    let k = spec.num_classes;
    let mut ds = Dataset { spec: Some(spec.clone()), num_classes: k, ..Default::default() };
    for (split, n, pool) in [
        (TRAIN, spec.split_sizes.train, &source.train),
        (UNBIASED_TEST, spec.split_sizes.unbiased_test, &source.test),
        (GUIDING_TEST, spec.split_sizes.guiding_test, &source.test),
    ] {
        let mut rng = split_rng(spec.seed, split);
        let mut pools = by_class(pool, |(_, l)| *l, k);
        if let Some(c) = pools.iter().position(Vec::is_empty) {
            if n > 0 {
                return Err(Error::InvalidSpec(format!("image source has no examples of class {c}")));
            }
        }
        pools.iter_mut().for_each(|p| p.shuffle(&mut rng));
        let mut cursor = vec![0usize; k];
        let plan = assign_attributes(split, n, k, spec.bias_ratio, &mut rng);
        let mut examples = Vec::with_capacity(plan.len());
        for (i, (target, attr, contrary)) in plan.into_iter().enumerate() {
            let pick = pools[target][cursor[target] % pools[target].len()];
            cursor[target] += 1;
            let example_seed = spec.seed ^ ((i as u64 + 1) << 20) ^ u64::from(split.len() as u32);
            let image = list[attr].apply(&pool[pick].0, spec.severity, example_seed)?;
            examples.push(LabeledExample {
                example_id: format!("{split}-{i:06}"),
                image,
                target,
                gt_bias_flag: Some(contrary),
                pseudo_bias_label: None,
                bias_attribute: Some(attr),
                provenance: None,
            });
        }
        ds.splits.insert(split.to_string(), examples);
    }
    Ok(ds)
}
