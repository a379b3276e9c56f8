//! Classifier architectures, the GCE and CE losses, and a deterministic
//! minibatch trainer shared by the biased and debiased stages.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, ParamStore, Tape, Tensor, Var};
use crate::dataset_forge::{Image, LabeledExample};
use crate::nn::{Conv, Dense};
use crate::{Error, Result};

/// Probability floor applied before `log`/`pow`.
pub const PROB_EPS: f64 = 1e-12;
pub const DEFAULT_GCE_Q: f32 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Conv stack → global average pooling → bias-free linear head.
    ConvGap,
    /// Three fully connected hidden layers.
    Mlp3,
}

impl Architecture {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv_gap" => Ok(Self::ConvGap),
            "mlp3" => Ok(Self::Mlp3),
            _ => Err(Error::InvalidArgument(format!("unknown architecture {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ConvGap => "conv_gap",
            Self::Mlp3 => "mlp3",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub arch: Architecture,
    pub num_classes: usize,
    /// Height, width, channels.
    pub input_shape: [usize; 3],
    /// Output channels of the four conv blocks (`conv_gap`).
    pub conv_channels: [usize; 4],
    /// Width of each hidden layer (`mlp3`).
    pub hidden: usize,
}

/// Strides of the four conv blocks; the feature map is `input / 4`.
const CONV_STRIDES: [usize; 4] = [1, 2, 2, 1];

impl ClassifierSpec {
    pub fn conv_gap(num_classes: usize, input_shape: [usize; 3]) -> Self {
        Self { arch: Architecture::ConvGap, num_classes, input_shape, conv_channels: [16, 32, 32, 32], hidden: 100 }
    }

    pub fn mlp3(num_classes: usize, input_shape: [usize; 3]) -> Self {
        Self { arch: Architecture::Mlp3, num_classes, input_shape, conv_channels: [16, 32, 32, 32], hidden: 100 }
    }

    /// Total downsampling between input pixels and feature-map cells.
    pub fn feature_stride(&self) -> usize {
        CONV_STRIDES.iter().product()
    }

    /// Spatial size of the final feature map (`conv_gap` only).
    pub fn feature_grid(&self) -> (usize, usize) {
        let mut h = self.input_shape[0];
        let mut w = self.input_shape[1];
        for s in CONV_STRIDES {
            h = (h - 1) / s + 1;
            w = (w - 1) / s + 1;
        }
        (h, w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Gce { q: f32 },
    Ce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub betas: (f32, f32),
    pub seed: u64,
    /// Epochs (1-based) after which a copy of the model is kept.
    pub snapshot_epochs: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Ce,
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            seed: 0,
            snapshot_epochs: vec![50],
        }
    }
}

impl TrainConfig {
    pub fn gce() -> Self {
        Self { loss: LossKind::Gce { q: DEFAULT_GCE_Q }, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let LossKind::Gce { q } = self.loss {
            check_q(q as f64)?;
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("GCE q = {q} outside (0, 1]")))
    }
}

fn check_simplex(probabilities: &[f64], target: usize) -> Result<()> {
    if target >= probabilities.len() {
        return Err(Error::InvalidArgument(format!("target {target} >= K = {}", probabilities.len())));
    }
    let total: f64 = probabilities.iter().sum();
    if (total - 1.0).abs() > 1e-6 || probabilities.iter().any(|p| *p < 0.0) {
        return Err(Error::InvalidArgument(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

/// Generalized cross-entropy `(1 − p_y^q) / q`.
pub fn gce_loss(probabilities: &[f64], target: usize, q: f64) -> Result<f64> {
    check_q(q)?;
    check_simplex(probabilities, target)?;
    let py = probabilities[target].max(PROB_EPS);
    Ok((1.0 - py.powf(q)) / q)
}

/// Categorical cross-entropy `−log p_y`.
pub fn ce_loss(probabilities: &[f64], target: usize) -> Result<f64> {
    check_simplex(probabilities, target)?;
    Ok(-probabilities[target].max(PROB_EPS).ln())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean loss over a batch of logits, built from primitive tape ops so that its
/// gradient comes from the chain rule rather than a hand-written formula.
pub fn batch_loss(tape: &mut Tape, logits: Var, targets: &[usize], loss: LossKind) -> Var {
    let logp = tape.log_softmax(logits);
    let picked = tape.gather(logp, targets);
    match loss {
        LossKind::Ce => {
            let nll = tape.scale(picked, -1.0);
            tape.mean(nll)
        }
        LossKind::Gce { q } => {
            let clamped = tape.clamp_min(picked, PROB_EPS.ln() as f32);
            let scaled = tape.scale(clamped, q);
            let py_q = tape.exp(scaled);
            let one_minus = tape.add_scalar(py_q, -1.0);
            let per = tape.scale(one_minus, -1.0 / q);
            tape.mean(per)
        }
    }
}

/// Largest deviation between `∇GCE` and `p_y^q · ∇CE` with respect to the
/// logits, relative to the largest CE gradient entry (guarded by `1e-12`).
pub fn gce_gradient_check(logits: &[f32], target: usize, q: f32) -> Result<f64> {
    check_q(q as f64)?;
    let k = logits.len();
    if target >= k {
        return Err(Error::InvalidArgument(format!("target {target} >= K = {k}")));
    }
    let grad_of = |loss: LossKind| -> Vec<f32> {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::new(vec![1, k], logits.to_vec()));
        let l = batch_loss(&mut tape, z, &[target], loss);
        tape.backward(l).get(z).map(|g| g.data.clone()).unwrap_or_else(|| vec![0.0; k])
    };
    let g_gce = grad_of(LossKind::Gce { q });
    let g_ce = grad_of(LossKind::Ce);
    let p = softmax(&logits.iter().map(|&v| v as f64).collect::<Vec<_>>());
    let scale = p[target].max(PROB_EPS).powf(q as f64);
    let ce_norm = g_ce.iter().map(|v| (*v as f64).abs()).fold(0.0, f64::max);
    let dev = g_gce
        .iter()
        .zip(&g_ce)
        .map(|(a, b)| (*a as f64 - scale * *b as f64).abs())
        .fold(0.0, f64::max);
    Ok(dev / (ce_norm + 1e-12))
}

#[derive(Clone, Debug, PartialEq)]
enum Net {
    ConvGap { convs: Vec<Conv>, head: Dense },
    Mlp3 { layers: Vec<Dense> },
}

/// A trained or freshly initialised classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub spec: ClassifierSpec,
    pub store: ParamStore,
    net: Net,
}

impl PartialEq for Conv {
    fn eq(&self, o: &Self) -> bool {
        self.weight == o.weight && self.bias == o.bias && self.stride == o.stride && self.pad == o.pad
    }
}

impl PartialEq for Dense {
    fn eq(&self, o: &Self) -> bool {
        self.weight == o.weight && self.bias == o.bias
    }
}

/// Final spatial features and the head weights that map them to logits.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps {
    /// `[N, C, h, w]`.
    pub maps: Tensor,
    /// `[K, C]`; row `c` is `w^c`.
    pub weights: Tensor,
}

const INFER_BATCH: usize = 256;

impl Classifier {
    pub fn new(spec: ClassifierSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let [h, w, c] = spec.input_shape;
        let net = match spec.arch {
            Architecture::ConvGap => {
                let mut cin = c;
                let mut convs = Vec::new();
                for (i, (&cout, &stride)) in spec.conv_channels.iter().zip(&CONV_STRIDES).enumerate() {
                    convs.push(Conv::new(&mut store, &format!("conv{i}"), cin, cout, 3, stride, &mut rng));
                    cin = cout;
                }
                let head = Dense::new(&mut store, "head", cin, spec.num_classes, false, &mut rng);
                Net::ConvGap { convs, head }
            }
            Architecture::Mlp3 => {
                let dims = [h * w * c, spec.hidden, spec.hidden, spec.hidden, spec.num_classes];
                let layers = dims
                    .windows(2)
                    .enumerate()
                    .map(|(i, d)| Dense::new(&mut store, &format!("fc{i}"), d[0], d[1], true, &mut rng))
                    .collect();
                Net::Mlp3 { layers }
            }
        };
        Self { spec, store, net }
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4();
        let [eh, ew, ec] = self.spec.input_shape;
        if (h, w, c) != (eh, ew, ec) {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w}x{c} does not match classifier input {eh}x{ew}x{ec}"
            )));
        }
        Ok(())
    }

    /// Logits and, for `conv_gap`, the final feature map.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> (Var, Option<Var>) {
        match &self.net {
            Net::ConvGap { convs, head } => {
                let mut h = x;
                for conv in convs {
                    let y = conv.forward(tape, &self.store, h);
                    h = tape.relu(y);
                }
                let pooled = tape.global_avg_pool(h);
                (head.forward(tape, &self.store, pooled), Some(h))
            }
            Net::Mlp3 { layers } => {
                let n = tape.shape(x)[0];
                let per: usize = tape.shape(x)[1..].iter().product();
                let mut h = tape.reshape(x, vec![n, per]);
                for (i, layer) in layers.iter().enumerate() {
                    h = layer.forward(tape, &self.store, h);
                    if i + 1 < layers.len() {
                        h = tape.relu(h);
                    }
                }
                (h, None)
            }
        }
    }

    /// Logits for an NCHW batch.
    pub fn logits_tensor(&self, images: &Tensor) -> Result<Tensor> {
        self.check_input(images)?;
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let (logits, _) = self.forward(&mut tape, x);
        Ok(tape.value(logits).clone())
    }

    pub fn predict_logits(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        let k = self.spec.num_classes;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            let t = crate::dataset_forge::batch_tensor(chunk.iter().copied());
            let logits = self.logits_tensor(&t)?;
            out.extend(logits.data.chunks(k).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        Ok(self.predict_logits(images)?.iter().map(|l| argmax(l)).collect())
    }

    /// Final feature maps `f_k(x, y)` and head weights `w^c_k`.
    pub fn feature_maps(&self, images: &Tensor) -> Result<FeatureMaps> {
        let Net::ConvGap { head, .. } = &self.net else {
            return Err(Error::UnsupportedArchitecture(format!(
                "feature maps need a conv_gap classifier, got {}",
                self.spec.arch.name()
            )));
        };
        self.check_input(images)?;
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let (_, maps) = self.forward(&mut tape, x);
        let maps = tape.value(maps.expect("conv_gap has feature maps")).clone();
        Ok(FeatureMaps { maps, weights: self.store.get(head.weight).clone() })
    }

    /// Head weight tensor `[K, C]` of a `conv_gap` classifier.
    pub fn head_weights_mut(&mut self) -> Result<&mut Tensor> {
        match &self.net {
            Net::ConvGap { head, .. } => Ok(self.store.get_mut(head.weight)),
            Net::Mlp3 { layers } => Ok(self.store.get_mut(layers[layers.len() - 1].weight)),
        }
    }

    pub fn accuracy(&self, examples: &[LabeledExample]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let images: Vec<&Image> = examples.iter().map(|e| &e.image).collect();
        let preds = self.predict(&images)?;
        let correct = preds.iter().zip(examples).filter(|(p, e)| **p == e.target).count();
        Ok(correct as f64 / examples.len() as f64)
    }
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub classifier: Classifier,
    pub curve: Vec<EpochStats>,
    /// `(epoch, model)` for each configured snapshot epoch that was reached.
    pub snapshots: Vec<(usize, Classifier)>,
}

impl TrainOutcome {
    /// The snapshot at `epoch`, or the final model if none was kept.
    pub fn at_epoch(&self, epoch: usize) -> &Classifier {
        self.snapshots.iter().find(|(e, _)| *e == epoch).map(|(_, c)| c).unwrap_or(&self.classifier)
    }
}

pub fn train_classifier(
    examples: &[LabeledExample],
    spec: &ClassifierSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let [h, w, c] = spec.input_shape;
    let per = h * w * c;
    let mut pixels = vec![0.0f32; examples.len() * per];
    for (i, e) in examples.iter().enumerate() {
        if e.image.shape() != spec.input_shape {
            return Err(Error::InvalidArgument(format!(
                "example {} has shape {:?}, classifier expects {:?}",
                e.example_id,
                e.image.shape(),
                spec.input_shape
            )));
        }
        if e.target >= spec.num_classes {
            return Err(Error::InvalidArgument(format!("example {} target out of range", e.example_id)));
        }
        e.image.write_chw(&mut pixels[i * per..(i + 1) * per]);
    }
    let mut model = Classifier::new(spec.clone(), config.seed);
    let all_params: Vec<_> = model.store.ids().collect();
    let mut opt = Adam::new(&model.store, all_params, config.learning_rate, config.betas);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(7);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut snapshots = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let mut batch = Vec::with_capacity(idx.len() * per);
            for &i in idx {
                batch.extend_from_slice(&pixels[i * per..(i + 1) * per]);
            }
            let targets: Vec<usize> = idx.iter().map(|&i| examples[i].target).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![idx.len(), c, h, w], batch));
            let (logits, _) = model.forward(&mut tape, x);
            let loss = batch_loss(&mut tape, logits, &targets, config.loss);
            let lv = tape.value(loss).data[0];
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += lv as f64 * idx.len() as f64;
            let lt = tape.value(logits);
            correct += lt
                .data
                .chunks(spec.num_classes)
                .zip(&targets)
                .filter(|(row, t)| argmax(row) == **t)
                .count();
            let grads = tape.backward(loss);
            opt.step(&mut model.store, &grads);
        }
        curve.push(EpochStats {
            epoch,
            loss: loss_sum / examples.len() as f64,
            accuracy: correct as f64 / examples.len() as f64,
        });
        if config.snapshot_epochs.contains(&epoch) {
            snapshots.push((epoch, model.clone()));
        }
    }
    Ok(TrainOutcome { classifier: model, curve, snapshots })
}

const CKPT_MAGIC: &[u8; 8] = b"BSWPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ClassifierSpec,
    train_config: Option<TrainConfig>,
    epoch: usize,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

/// Versioned binary checkpoint: magic, version, JSON header, raw f32 parameters.
pub fn save_checkpoint(model: &Classifier, config: Option<&TrainConfig>, epoch: usize, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        spec: model.spec.clone(),
        train_config: config.cloned(),
        epoch,
        names: model.store.names().to_vec(),
        shapes: model.store.tensors().iter().map(|t| t.shape.clone()).collect(),
    };
    let hjson = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + hjson.len() + model.store.num_scalars() * 4);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&hjson);
    for t in model.store.tensors() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Returns the model, the echoed training config and the epoch.
pub fn load_checkpoint(path: &Path) -> Result<(Classifier, Option<TrainConfig>, usize)> {
    let bytes = fs::read(path)?;
    let bad = |reason: &str| Error::Manifest { record: path.display().to_string(), reason: reason.to_string() };
    if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
        return Err(bad("not a classifier checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?)?;
    let mut model = Classifier::new(header.spec.clone(), 0);
    if model.store.names() != header.names.as_slice() {
        return Err(bad("parameter layout does not match architecture"));
    }
    let mut off = 16 + hlen;
    for (id, shape) in model.store.ids().collect::<Vec<_>>().into_iter().zip(&header.shapes) {
        let t = model.store.get_mut(id);
        if &t.shape != shape {
            return Err(bad("parameter shape mismatch"));
        }
        let n = t.numel();
        let chunk = bytes.get(off..off + n * 4).ok_or_else(|| bad("truncated parameters"))?;
        for (v, b) in t.data.iter_mut().zip(chunk.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        off += n * 4;
    }
    Ok((model, header.train_config, header.epoch))
}

pub fn write_curve_csv(curve: &[EpochStats], path: &Path) -> Result<()> {
    let mut s = String::from("epoch,loss,accuracy\n");
    for e in curve {
        s.push_str(&format!("{},{:.8},{:.6}\n", e.epoch, e.loss, e.accuracy));
    }
    fs::write(path, s)?;
    Ok(())
}
