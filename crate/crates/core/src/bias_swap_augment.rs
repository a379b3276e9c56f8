//! Pairing of bias-guiding content with bias-contrary style, generation of the
//! bias-swapped set and its union with the training data.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bias_partition::Partition;
use crate::dataset_forge::{grayscale_of, recolor, Dataset, DatasetKind, Image, LabeledExample, Provenance, TRAIN};
use crate::swap_autoencoder::SwapAEState;
use crate::{Error, Result};

/// Prefix of every generated example id.
pub const SYNTHETIC_PREFIX: &str = "bswap-";

const GENERATION_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingPolicy {
    #[default]
    GuidingContentContraryStyle,
    RandomPairs,
}

impl PairingPolicy {
    pub fn name(self) -> &'static str {
        match self {
            Self::GuidingContentContraryStyle => "guiding_content_contrary_style",
            Self::RandomPairs => "random_pairs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "guiding_content_contrary_style" => Ok(Self::GuidingContentContraryStyle),
            "random_pairs" => Ok(Self::RandomPairs),
            _ => Err(Error::InvalidArgument(format!("unknown pairing policy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub pairing_policy: PairingPolicy,
    /// Generated images per bias-guiding image.
    pub augment_ratio: f64,
    /// Draw the style from the content's target class.
    pub class_matching: bool,
    pub seed: u64,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        Self { pairing_policy: PairingPolicy::default(), augment_ratio: 1.0, class_matching: true, seed: 0 }
    }
}

impl AugmentationPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.augment_ratio > 0.0 && self.augment_ratio.is_finite()) {
            return Err(Error::InvalidArgument(format!("augment_ratio must be positive, got {}", self.augment_ratio)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SwapPair {
    pub content_id: String,
    pub style_id: String,
}

/// How many times each of `n` items is used so the total is `round(ratio·n)`
/// and every count is `⌊ratio⌋` or `⌈ratio⌉`.
fn repeat_counts(n: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let base = ratio.floor() as usize;
    let total = (ratio * n as f64).round() as usize;
    let extra = total.saturating_sub(base * n).min(n);
    let mut counts = vec![base; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for &i in &order[..extra] {
        counts[i] += 1;
    }
    counts
}

/// Content/style pairs over `examples` (the training split). Under the default
/// policy contents are guiding and styles contrary examples; `random_pairs`
/// draws both from the whole set. The number of pairs is the same either way.
pub fn build_pairs(partition: &Partition, examples: &[LabeledExample], plan: &AugmentationPlan) -> Result<Vec<SwapPair>> {
    plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let k = examples.iter().map(|e| e.target + 1).max().unwrap_or(0);
    let mut guiding: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut contrary: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut all: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, e) in examples.iter().enumerate() {
        match partition.label(&e.example_id) {
            Some(0) => guiding[e.target].push(i),
            Some(_) => contrary[e.target].push(i),
            None => {
                return Err(Error::InvalidArgument(format!("example {} is not in the partition", e.example_id)))
            }
        }
        all[e.target].push(i);
    }
    let flat = |v: &[Vec<usize>]| v.iter().flatten().copied().collect::<Vec<usize>>();
    let (all_flat, contrary_flat) = (flat(&all), flat(&contrary));
    let id = |i: usize| examples[i].example_id.clone();

    let mut pairs = Vec::new();
    match plan.pairing_policy {
        PairingPolicy::GuidingContentContraryStyle => {
            if plan.class_matching {
                let empty: Vec<usize> = (0..k).filter(|&c| !guiding[c].is_empty() && contrary[c].is_empty()).collect();
                if !empty.is_empty() {
                    return Err(Error::EmptyContraryPool(empty));
                }
            } else if contrary_flat.is_empty() && guiding.iter().any(|g| !g.is_empty()) {
                return Err(Error::EmptyContraryPool((0..k).collect()));
            }
            for c in 0..k {
                let counts = repeat_counts(guiding[c].len(), plan.augment_ratio, &mut rng);
                let pool = if plan.class_matching { &contrary[c] } else { &contrary_flat };
                for (&g, &n) in guiding[c].iter().zip(&counts) {
                    for _ in 0..n {
                        let s = pool[rng.random_range(0..pool.len())];
                        pairs.push(SwapPair { content_id: id(g), style_id: id(s) });
                    }
                }
            }
        }
        PairingPolicy::RandomPairs => {
            let g: usize = guiding.iter().map(Vec::len).sum();
            let total = (plan.augment_ratio * g as f64).round() as usize;
            for _ in 0..total {
                let content = all_flat[rng.random_range(0..all_flat.len())];
                let pool = if plan.class_matching { &all[examples[content].target] } else { &all_flat };
                let s = pool[rng.random_range(0..pool.len())];
                pairs.push(SwapPair { content_id: id(content), style_id: id(s) });
            }
        }
    }
    Ok(pairs)
}

fn index(examples: &[LabeledExample]) -> HashMap<&str, &LabeledExample> {
    examples.iter().map(|e| (e.example_id.as_str(), e)).collect()
}

fn lookup<'a>(idx: &HashMap<&str, &'a LabeledExample>, id: &str) -> Result<&'a LabeledExample> {
    idx.get(id).copied().ok_or_else(|| Error::InvalidArgument(format!("unknown example id {id}")))
}

fn synthetic(i: usize, pair: &SwapPair, target: usize, image: Image) -> LabeledExample {
    LabeledExample {
        example_id: format!("{SYNTHETIC_PREFIX}{i:06}"),
        image,
        target,
        gt_bias_flag: None,
        pseudo_bias_label: None,
        bias_attribute: None,
        provenance: Some(Provenance { content_id: pair.content_id.clone(), style_id: pair.style_id.clone() }),
    }
}

/// Swapped images for `pairs`, labelled with the content target. Non-finite
/// outputs are skipped and logged; more than 1% skipped is an error.
pub fn generate_bias_swapped(
    state: &SwapAEState,
    pairs: &[SwapPair],
    examples: &[LabeledExample],
) -> Result<Vec<LabeledExample>> {
    let idx = index(examples);
    let mut out = Vec::with_capacity(pairs.len());
    let mut skipped = 0usize;
    for (chunk_no, chunk) in pairs.chunks(GENERATION_BATCH).enumerate() {
        let mut contents = Vec::with_capacity(chunk.len());
        let mut styles = Vec::with_capacity(chunk.len());
        for p in chunk {
            contents.push(lookup(&idx, &p.content_id)?);
            styles.push(&lookup(&idx, &p.style_id)?.image);
        }
        let c_images: Vec<&Image> = contents.iter().map(|e| &e.image).collect();
        let generated = state.swap_generate_batch(&c_images, &styles)?;
        for (j, (img, p)) in generated.into_iter().zip(chunk).enumerate() {
            if img.data.iter().any(|v| !v.is_finite()) {
                eprintln!("skipping non-finite swap of content {} with style {}", p.content_id, p.style_id);
                skipped += 1;
                continue;
            }
            out.push(synthetic(chunk_no * GENERATION_BATCH + j, p, contents[j].target, img));
        }
    }
    if skipped * 100 > pairs.len() {
        return Err(Error::GenerationFailed { failed: skipped, total: pairs.len() });
    }
    Ok(out)
}

fn palette_of(dataset: &Dataset) -> Result<&[[f32; 3]]> {
    match (&dataset.spec, dataset.palette()) {
        (Some(spec), Some(p)) if spec.dataset_kind == DatasetKind::ColoredMnist => Ok(p),
        _ => Err(Error::InvalidArgument("oracle recolouring needs a Colored MNIST dataset".into())),
    }
}

fn attribute(e: &LabeledExample) -> Result<usize> {
    e.bias_attribute.ok_or_else(|| Error::InvalidArgument(format!("example {} has no bias attribute", e.example_id)))
}

/// Ground-truth swap: the content digit redrawn in the style example's colour.
pub fn oracle_recolor_swap(pairs: &[SwapPair], dataset: &Dataset) -> Result<Vec<LabeledExample>> {
    let palette = palette_of(dataset)?;
    let idx = index(dataset.train());
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let content = lookup(&idx, &p.content_id)?;
            let style = lookup(&idx, &p.style_id)?;
            let gray = grayscale_of(&content.image, palette[attribute(content)?]);
            let img = recolor(&gray, content.image.height, content.image.width, palette[attribute(style)?]);
            Ok(synthetic(i, p, content.target, img))
        })
        .collect()
}

/// `dataset` with `swapped` appended to its training split and `plan` recorded
/// in the metadata.
pub fn union_dataset(dataset: &Dataset, swapped: Vec<LabeledExample>, plan: &AugmentationPlan) -> Result<Dataset> {
    let mut seen: HashSet<&str> = HashSet::new();
    for e in dataset.splits.values().flatten() {
        seen.insert(&e.example_id);
    }
    let mut new_ids = HashSet::new();
    for e in &swapped {
        if seen.contains(e.example_id.as_str()) || !new_ids.insert(e.example_id.as_str()) {
            return Err(Error::IdCollision(e.example_id.clone()));
        }
    }
    let mut out = dataset.clone();
    out.meta.insert("augmentation_plan".into(), serde_json::to_value(plan)?);
    out.meta.insert("bias_swapped".into(), swapped.len().into());
    out.split_mut(TRAIN).extend(swapped);
    Ok(out)
}

/// Index of the palette colour closest in chromaticity to the mean foreground
/// colour, or `None` if the image has no foreground.
pub fn nearest_palette_color(image: &Image, palette: &[[f32; 3]]) -> Option<usize> {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for px in image.data.chunks(image.channels) {
        if px.iter().copied().fold(0.0f32, f32::max) > 0.3 {
            for (s, v) in sum.iter_mut().zip(px) {
                *s += *v as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    let peak = sum.iter().copied().fold(0.0, f64::max);
    let chroma = sum.map(|s| s / peak);
    let dist = |c: &[f32; 3]| -> f64 {
        let p = c.iter().copied().fold(0.0f32, f32::max).max(1e-6) as f64;
        c.iter().zip(&chroma).map(|(a, b)| (*a as f64 / p - b).powi(2)).sum()
    };
    (0..palette.len()).min_by(|&a, &b| dist(&palette[a]).total_cmp(&dist(&palette[b])))
}

/// Fraction of generated examples whose foreground colour is the style
/// example's bias colour.
pub fn hue_transfer_rate(generated: &[LabeledExample], dataset: &Dataset) -> Result<f64> {
    let palette = palette_of(dataset)?;
    let idx = index(dataset.train());
    if generated.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for g in generated {
        let prov = g
            .provenance
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no provenance", g.example_id)))?;
        let style = lookup(&idx, &prov.style_id)?;
        if nearest_palette_color(&g.image, palette) == Some(attribute(style)?) {
            hits += 1;
        }
    }
    Ok(hits as f64 / generated.len() as f64)
}

/// Generated count per target class.
pub fn per_class_counts(generated: &[LabeledExample]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for e in generated {
        *m.entry(e.target).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias_partition::{assign_pseudo_labels, BiasScoreRecord};
    use crate::dataset_forge::digits::DigitSource;
    use crate::dataset_forge::{generate_colored_mnist, BiasedDatasetSpec, SplitSizes, DEFAULT_PALETTE};

    fn toy() -> (Dataset, Partition) {
        let src = DigitSource::procedural(10, 1, 2);
        let spec = BiasedDatasetSpec::colored_mnist(0.9, SplitSizes { train: 200, unbiased_test: 0, guiding_test: 0 }, 2);
        let ds = generate_colored_mnist(&spec, &src).unwrap();
        // ground-truth flags as scores give the exact partition
        let recs: Vec<BiasScoreRecord> = ds
            .train()
            .iter()
            .map(|e| BiasScoreRecord {
                example_id: e.example_id.clone(),
                score: if e.gt_bias_flag == Some(true) { 0.9 } else { 0.01 },
                correct: true,
                max_prob: 0.9,
            })
            .collect();
        let p = assign_pseudo_labels(&recs).unwrap();
        (ds, p)
    }

    #[test]
    fn default_pairs_respect_partition_and_class() {
        let (ds, p) = toy();
        let plan = AugmentationPlan::default();
        let pairs = build_pairs(&p, ds.train(), &plan).unwrap();
        assert_eq!(pairs.len(), p.guiding_ids.len());
        let idx = index(ds.train());
        for pr in &pairs {
            assert!(p.guiding_ids.contains(&pr.content_id));
            assert!(p.contrary_ids.contains(&pr.style_id));
            assert_eq!(idx[pr.content_id.as_str()].target, idx[pr.style_id.as_str()].target);
        }
        assert_eq!(pairs, build_pairs(&p, ds.train(), &plan).unwrap());
    }

    #[test]
    fn fractional_ratio_counts() {
        let (ds, p) = toy();
        let plan = AugmentationPlan { augment_ratio: 1.5, ..Default::default() };
        let pairs = build_pairs(&p, ds.train(), &plan).unwrap();
        let mut uses: HashMap<&str, usize> = HashMap::new();
        for pr in &pairs {
            *uses.entry(&pr.content_id).or_insert(0) += 1;
        }
        assert!(uses.values().all(|&n| n == 1 || n == 2));
        assert_eq!(uses.len(), p.guiding_ids.len());
        for (c, (g, _)) in p.per_class_counts(ds.train(), 10).into_iter().enumerate() {
            let made = pairs.iter().filter(|pr| index(ds.train())[pr.content_id.as_str()].target == c).count();
            assert!((made as f64 - 1.5 * g as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn empty_contrary_class_is_named() {
        let (ds, mut p) = toy();
        let moved: Vec<String> = p
            .contrary_ids
            .iter()
            .filter(|id| ds.train().iter().any(|e| &&e.example_id == id && e.target == 3))
            .cloned()
            .collect();
        for id in moved {
            p.contrary_ids.remove(&id);
            p.guiding_ids.insert(id);
        }
        let err = build_pairs(&p, ds.train(), &AugmentationPlan::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyContraryPool(ref c) if c == &vec![3]), "{err}");
        let cross = AugmentationPlan { class_matching: false, ..Default::default() };
        assert!(build_pairs(&p, ds.train(), &cross).is_ok());
    }

    #[test]
    fn random_pairs_keep_size() {
        let (ds, p) = toy();
        let plan = AugmentationPlan { pairing_policy: PairingPolicy::RandomPairs, ..Default::default() };
        let pairs = build_pairs(&p, ds.train(), &plan).unwrap();
        assert_eq!(pairs.len(), p.guiding_ids.len());
        assert!(pairs.iter().any(|pr| p.guiding_ids.contains(&pr.style_id)));
    }

    #[test]
    fn oracle_swap_transfers_colour() {
        let (ds, p) = toy();
        let pairs = build_pairs(&p, ds.train(), &AugmentationPlan::default()).unwrap();
        let out = oracle_recolor_swap(&pairs, &ds).unwrap();
        assert_eq!(out.len(), pairs.len());
        assert_eq!(hue_transfer_rate(&out, &ds).unwrap(), 1.0);
        let idx = index(ds.train());
        for (o, pr) in out.iter().zip(&pairs) {
            assert_eq!(o.target, idx[pr.content_id.as_str()].target);
            assert!(o.image.in_unit_range());
            assert!(o.example_id.starts_with(SYNTHETIC_PREFIX));
            assert_eq!(o.gt_bias_flag, None);
        }
    }

    #[test]
    fn palette_probe() {
        let gray = vec![1.0f32; 28 * 28];
        for (i, c) in DEFAULT_PALETTE.iter().enumerate() {
            assert_eq!(nearest_palette_color(&recolor(&gray, 28, 28, *c), &DEFAULT_PALETTE), Some(i));
        }
        assert_eq!(nearest_palette_color(&Image::zeros(28, 28, 3), &DEFAULT_PALETTE), None);
    }

    #[test]
    fn union_counts_and_collisions() {
        let (ds, p) = toy();
        let plan = AugmentationPlan::default();
        let empty = union_dataset(&ds, Vec::new(), &plan).unwrap();
        assert_eq!(empty.splits, ds.splits);
        let pairs = build_pairs(&p, ds.train(), &plan).unwrap();
        let out = oracle_recolor_swap(&pairs, &ds).unwrap();
        let n = out.len();
        let aug = union_dataset(&ds, out.clone(), &plan).unwrap();
        assert_eq!(aug.train().len(), ds.train().len() + n);
        assert!(union_dataset(&aug, out, &plan).is_err());
        assert!(aug.meta.contains_key("augmentation_plan"));
    }

    #[test]
    fn generation_through_swapae_keeps_labels() {
        use crate::swap_autoencoder::SwapAeConfig;
        let (ds, p) = toy();
        let pairs = build_pairs(&p, ds.train(), &AugmentationPlan::default()).unwrap();
        let state = SwapAEState::new(SwapAeConfig::default(), 1).unwrap();
        let out = generate_bias_swapped(&state, &pairs[..10], ds.train()).unwrap();
        assert_eq!(out.len(), 10);
        let idx = index(ds.train());
        for (o, pr) in out.iter().zip(&pairs) {
            assert_eq!(o.target, idx[pr.content_id.as_str()].target);
            assert!(o.image.in_unit_range());
            assert_eq!(o.provenance.as_ref().unwrap().style_id, pr.style_id);
        }
    }
}
