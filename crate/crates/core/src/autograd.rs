//! Minimal define-by-run reverse-mode autodiff over dense `f32` tensors.
//!
//! Everything runs on one thread and every reduction has a fixed order, so a
//! forward/backward pass is bitwise reproducible. Convolutions use im2col and
//! `matrixmultiply::sgemm`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Variance floor of [`Tape::instance_norm`].
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Dense row-major tensor. Image batches use NCHW.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f32) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected 2-D, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Uniform He initialisation `U(-b, b)` with `b = gain * sqrt(3 / fan_in)`.
    pub fn he_uniform<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, gain: f32, rng: &mut R) -> Self {
        let bound = gain * (3.0 / fan_in as f32).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Self { shape, data }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

static NEXT_STORE_UID: AtomicUsize = AtomicUsize::new(1);

/// Named trainable tensors of one model.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamStore {
    #[serde(skip, default = "next_uid")]
    uid: usize,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

fn next_uid() -> usize {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self { uid: next_uid(), names: self.names.clone(), tensors: self.tensors.clone() }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { uid: next_uid(), names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Integer crop box: (source batch index, top row, left column).
pub type CropBox = (usize, usize, usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Exp(Var),
    ClampMin(Var, f32),
    Softplus(Var),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    AddChannel(Var, Var),
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Upsample2x(Var),
    GlobalAvgPool(Var),
    InstanceNorm { x: Var, inv_std: Vec<f32> },
    Reshape(Var),
    Crop { x: Var, boxes: Vec<CropBox>, size: usize },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GroupMean { x: Var, group: usize },
    Mean(Var),
    LogSoftmax(Var),
    Gather { x: Var, targets: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    store_uid: Option<usize>,
    bound: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        flush_denormals();
        Self { nodes: Vec::new(), grad_enabled: true, store_uid: None, bound: HashMap::new() }
    }

    /// A tape whose parameters never require gradients.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Input without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Input that collects a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter; binding the same id twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        match self.store_uid {
            None => self.store_uid = Some(store.uid),
            Some(uid) => assert_eq!(uid, store.uid, "a tape binds parameters from a single store"),
        }
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).clone());
        self.bound.insert(id, v);
        v
    }

    /// Copies a value into a fresh leaf, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape.clone(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape.clone(), ta.data.iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let t = self.map(a, |x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let t = self.map(a, |x| x + s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, f32::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    /// `max(x, lo)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, lo: f32) -> Var {
        let t = self.map(a, |x| x.max(lo));
        self.push(t, Op::ClampMin(a, lo), &[a])
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.map(a, softplus);
        self.push(t, Op::Softplus(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let t = self.map(a, |x| if x > 0.0 { x } else { slope * x });
        self.push(t, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    /// `x[n, c, ..] + b[c]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let tx = self.value(x);
        let tb = self.value(b);
        let (n, c) = (tx.shape[0], tx.shape[1]);
        assert_eq!(tb.numel(), c, "channel bias length");
        let inner = tx.numel() / (n * c);
        let mut out = tx.data.clone();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = tb.data[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let t = Tensor::new(tx.shape.clone(), out);
        self.push(t, Op::AddChannel(x, b), &[x, b])
    }

    /// Per-sample, per-channel modulation `x * (1 + scale[n, c]) + shift[n, c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let tx = self.value(x);
        let (n, c) = (tx.shape[0], tx.shape[1]);
        let ts = self.value(scale);
        let tt = self.value(shift);
        assert_eq!(ts.shape, vec![n, c]);
        assert_eq!(tt.shape, vec![n, c]);
        let inner = tx.numel() / (n * c);
        let mut out = tx.data.clone();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let (s, b) = (1.0 + ts.data[i], tt.data[i]);
            chunk.iter_mut().for_each(|v| *v = *v * s + b);
        }
        let t = Tensor::new(tx.shape.clone(), out);
        self.push(t, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift])
    }

    /// `x[N, I] · w[O, I]ᵀ + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, i) = self.value(x).dims2();
        let (o, wi) = self.value(w).dims2();
        assert_eq!(i, wi, "linear: input width {i} vs weight width {wi}");
        let mut out = vec![0.0f32; n * o];
        if let Some(b) = b {
            let tb = &self.value(b).data;
            for row in out.chunks_mut(o) {
                row.copy_from_slice(tb);
            }
        }
        let (tx, tw) = (&self.value(x).data, &self.value(w).data);
        // out[N,O] += x[N,I] · wᵀ[I,O]
        unsafe {
            matrixmultiply::sgemm(
                n, i, o, 1.0,
                tx.as_ptr(), i as isize, 1,
                tw.as_ptr(), 1, i as isize,
                1.0, out.as_mut_ptr(), o as isize, 1,
            );
        }
        let t = Tensor::new(vec![n, o], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(t, Op::Linear { x, w, b }, &parents)
    }

    /// Square-kernel 2-D convolution with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, wc, k, k2) = self.value(w).dims4();
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(c, wc, "conv2d: {c} input channels vs kernel {wc}");
        let geom = ConvGeom::new(c, h, wd, k, stride, pad);
        let (ckk, p) = (geom.ckk(), geom.out_h * geom.out_w);
        let tx = &self.value(x).data;
        let tw = &self.value(w).data;
        let bias = b.map(|b| &self.value(b).data);
        let chw = c * h * wd;
        let cs = conv_chunk(ckk, p).min(n);
        let mut cols = vec![0.0f32; ckk * cs * p];
        let mut flat = vec![0.0f32; o * cs * p];
        let mut out = vec![0.0f32; n * o * p];
        for start in (0..n).step_by(cs) {
            let m = cs.min(n - start);
            let mp = m * p;
            for s in 0..m {
                geom.im2col(&tx[(start + s) * chw..(start + s + 1) * chw], &mut cols[s * p..], mp);
            }
            // [O, m·P] = w[O, CKK] · cols[CKK, m·P]
            unsafe {
                matrixmultiply::sgemm(
                    o, ckk, mp, 1.0,
                    tw.as_ptr(), ckk as isize, 1,
                    cols.as_ptr(), mp as isize, 1,
                    0.0, flat.as_mut_ptr(), mp as isize, 1,
                );
            }
            for oc in 0..o {
                let bv = bias.map_or(0.0, |b| b[oc]);
                for s in 0..m {
                    let src = &flat[oc * mp + s * p..oc * mp + (s + 1) * p];
                    let dst = &mut out[((start + s) * o + oc) * p..((start + s) * o + oc + 1) * p];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d = v + bv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, o, geom.out_h, geom.out_w], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(t, Op::Conv2d { x, w, b, stride, pad }, &parents)
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4();
        let mut out = vec![0.0f32; n * c * 4 * h * w];
        for plane in 0..n * c {
            let src = &tx.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let t = Tensor::new(vec![n, c, 2 * h, 2 * w], out);
        self.push(t, Op::Upsample2x(x), &[x])
    }

    /// NCHW → NC by spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (n, c, h, w) = tx.dims4();
        let hw = h * w;
        let data = tx.data.chunks(hw).map(|p| p.iter().sum::<f32>() / hw as f32).collect();
        let t = Tensor::new(vec![n, c], data);
        self.push(t, Op::GlobalAvgPool(x), &[x])
    }

    /// Zero mean and unit variance over each `(n, c)` plane.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (_, _, h, w) = tx.dims4();
        let hw = h * w;
        let mut out = tx.data.clone();
        let mut inv_std = Vec::with_capacity(tx.numel() / hw);
        for plane in out.chunks_mut(hw) {
            let mean = plane.iter().map(|v| *v as f64).sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
            let r = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
            plane.iter_mut().for_each(|v| *v = ((*v as f64 - mean) * r) as f32);
            inv_std.push(r as f32);
        }
        let t = Tensor::new(tx.shape.clone(), out);
        self.push(t, Op::InstanceNorm { x, inv_std }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(shape, tx.data.clone());
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Square crops `size × size`; output row `i` comes from `boxes[i]`.
    pub fn crop(&mut self, x: Var, boxes: &[CropBox], size: usize) -> Var {
        let tx = self.value(x);
        let (_, c, h, w) = tx.dims4();
        let mut out = Vec::with_capacity(boxes.len() * c * size * size);
        for &(src, top, left) in boxes {
            assert!(top + size <= h && left + size <= w, "crop out of bounds");
            for ch in 0..c {
                let base = (src * c + ch) * h * w;
                for i in 0..size {
                    let row = base + (top + i) * w + left;
                    out.extend_from_slice(&tx.data[row..row + size]);
                }
            }
        }
        let t = Tensor::new(vec![boxes.len(), c, size, size], out);
        self.push(t, Op::Crop { x, boxes: boxes.to_vec(), size }, &[x])
    }

    /// Concatenates two 2-D tensors along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (n, ca) = self.value(a).dims2();
        let (nb, cb) = self.value(b).dims2();
        assert_eq!(n, nb);
        let (ta, tb) = (&self.value(a).data, &self.value(b).data);
        let mut out = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            out.extend_from_slice(&ta[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&tb[r * cb..(r + 1) * cb]);
        }
        let t = Tensor::new(vec![n, ca + cb], out);
        self.push(t, Op::ConcatCols(a, b), &[a, b])
    }

    /// Concatenates along the leading (batch) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.value(parts[0]).shape[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.shape[1..], tail[..], "concat_rows trailing shape");
            rows += tp.shape[0];
            out.extend_from_slice(&tp.data);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = Tensor::new(shape, out);
        self.push(t, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        let row = tx.numel() / tx.shape[0];
        assert!(start + len <= tx.shape[0]);
        let mut shape = tx.shape.clone();
        shape[0] = len;
        let t = Tensor::new(shape, tx.data[start * row..(start + len) * row].to_vec());
        self.push(t, Op::SliceRows { x, start }, &[x])
    }

    /// `[N·g, F] → [N, F]` by averaging consecutive groups of `g` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Var {
        let (rows, f) = self.value(x).dims2();
        assert_eq!(rows % group, 0);
        let tx = &self.value(x).data;
        let n = rows / group;
        let mut out = vec![0.0f32; n * f];
        for r in 0..rows {
            let dst = &mut out[(r / group) * f..(r / group + 1) * f];
            for (d, s) in dst.iter_mut().zip(&tx[r * f..(r + 1) * f]) {
                *d += s;
            }
        }
        out.iter_mut().for_each(|v| *v /= group as f32);
        let t = Tensor::new(vec![n, f], out);
        self.push(t, Op::GroupMean { x, group }, &[x])
    }

    /// Mean over all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let m = tx.data.iter().sum::<f32>() / tx.numel() as f32;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Row-wise log-softmax of `[N, K]` logits.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (_, k) = self.value(x).dims2();
        let tx = self.value(x);
        let mut out = tx.data.clone();
        for row in out.chunks_mut(k) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(tx.shape.clone(), out);
        self.push(t, Op::LogSoftmax(x), &[x])
    }

    /// `[N, K] → [N]` picking column `targets[n]` of row `n`.
    pub fn gather(&mut self, x: Var, targets: &[usize]) -> Var {
        let (n, k) = self.value(x).dims2();
        assert_eq!(n, targets.len());
        let tx = &self.value(x).data;
        let data = targets.iter().enumerate().map(|(r, &t)| {
            assert!(t < k, "target {t} out of range for {k} classes");
            tx[r * k + t]
        });
        let t = Tensor::new(vec![n], data.collect());
        self.push(t, Op::Gather { x, targets: targets.to_vec() }, &[x])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            // only leaves (inputs and parameters) are read back
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads, bound: self.bound.clone() }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape.clone()));
        }
        f(&mut slot.as_mut().unwrap().data);
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = &g.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, gd, 1.0));
                self.accumulate(grads, *b, |d| axpy(d, gd, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, gd, 1.0));
                self.accumulate(grads, *b, |d| axpy(d, gd, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(vb) {
                        *d += g * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |d| axpy(d, gd, *s)),
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, |d| axpy(d, gd, 1.0)),
            Op::Exp(a) => {
                let y = &node.value.data;
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(y) {
                        *d += g * y;
                    }
                });
            }
            Op::ClampMin(a, lo) => {
                let x = &self.value(*a).data;
                self.accumulate(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(x) {
                        if *x > *lo {
                            *d += g;
                        }
                    }
                });
            }
            Op::Softplus(a) => {
                let x = &self.value(*a).data;
                self.accumulate(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(x) {
                        *d += g * sigmoid(*x);
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = &self.value(*a).data;
                self.accumulate(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(x) {
                        *d += if *x > 0.0 { *g } else { slope * g };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value.data;
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::AddChannel(x, b) => {
                let (n, c) = (node.value.shape[0], node.value.shape[1]);
                let inner = node.value.numel() / (n * c);
                self.accumulate(grads, *x, |d| axpy(d, gd, 1.0));
                self.accumulate(grads, *b, |d| {
                    for (i, chunk) in gd.chunks(inner).enumerate() {
                        d[i % c] += chunk.iter().sum::<f32>();
                    }
                });
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (n, c) = (node.value.shape[0], node.value.shape[1]);
                let inner = node.value.numel() / (n * c);
                let vx = &self.value(*x).data;
                let vs = &self.value(*scale).data;
                self.accumulate(grads, *x, |d| {
                    for (i, (dc, gc)) in d.chunks_mut(inner).zip(gd.chunks(inner)).enumerate() {
                        let s = 1.0 + vs[i];
                        for (d, g) in dc.iter_mut().zip(gc) {
                            *d += g * s;
                        }
                    }
                });
                self.accumulate(grads, *scale, |d| {
                    for (i, (gc, xc)) in gd.chunks(inner).zip(vx.chunks(inner)).enumerate() {
                        d[i] += gc.iter().zip(xc).map(|(g, x)| g * x).sum::<f32>();
                    }
                });
                self.accumulate(grads, *shift, |d| {
                    for (i, gc) in gd.chunks(inner).enumerate() {
                        d[i] += gc.iter().sum::<f32>();
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (n, i) = self.value(*x).dims2();
                let o = node.value.shape[1];
                let vx = &self.value(*x).data;
                let vw = &self.value(*w).data;
                // dx[N,I] += g[N,O] · w[O,I]
                self.accumulate(grads, *x, |d| unsafe {
                    matrixmultiply::sgemm(
                        n, o, i, 1.0,
                        gd.as_ptr(), o as isize, 1,
                        vw.as_ptr(), i as isize, 1,
                        1.0, d.as_mut_ptr(), i as isize, 1,
                    );
                });
                // dw[O,I] += gᵀ[O,N] · x[N,I]
                self.accumulate(grads, *w, |d| unsafe {
                    matrixmultiply::sgemm(
                        o, n, i, 1.0,
                        gd.as_ptr(), 1, o as isize,
                        vx.as_ptr(), i as isize, 1,
                        1.0, d.as_mut_ptr(), i as isize, 1,
                    );
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |d| {
                        for row in gd.chunks(o) {
                            axpy(d, row, 1.0);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (n, c, h, wd) = self.value(*x).dims4();
                let (o, _, k, _) = self.value(*w).dims4();
                let geom = ConvGeom::new(c, h, wd, k, *stride, *pad);
                let (ckk, p) = (geom.ckk(), geom.out_h * geom.out_w);
                let (vx, vw) = (&self.value(*x).data, &self.value(*w).data);
                let chw = c * h * wd;
                let cs = conv_chunk(ckk, p).min(n);
                let mut cols = vec![0.0f32; ckk * cs * p];
                let mut g = vec![0.0f32; o * cs * p];
                let mut dcols = vec![0.0f32; ckk * cs * p];
                let need_w = self.nodes[w.0].needs_grad;
                for start in (0..n).step_by(cs) {
                    let m = cs.min(n - start);
                    let mp = m * p;
                    // gradient chunk regrouped as [O, m·P]
                    for s in 0..m {
                        for oc in 0..o {
                            g[oc * mp + s * p..oc * mp + (s + 1) * p]
                                .copy_from_slice(&gd[((start + s) * o + oc) * p..((start + s) * o + oc + 1) * p]);
                        }
                    }
                    if need_w {
                        for s in 0..m {
                            geom.im2col(&vx[(start + s) * chw..(start + s + 1) * chw], &mut cols[s * p..], mp);
                        }
                    }
                    self.accumulate(grads, *w, |d| {
                        // dw[O,CKK] += g[O,mP] · colsᵀ[mP,CKK]
                        unsafe {
                            matrixmultiply::sgemm(
                                o, mp, ckk, 1.0,
                                g.as_ptr(), mp as isize, 1,
                                cols.as_ptr(), 1, mp as isize,
                                1.0, d.as_mut_ptr(), ckk as isize, 1,
                            );
                        }
                    });
                    if let Some(b) = b {
                        self.accumulate(grads, *b, |d| {
                            for (oc, row) in g[..o * mp].chunks(mp).enumerate() {
                                d[oc] += row.iter().sum::<f32>();
                            }
                        });
                    }
                    self.accumulate(grads, *x, |d| {
                        // dcols[CKK,mP] = wᵀ[CKK,O] · g[O,mP]
                        unsafe {
                            matrixmultiply::sgemm(
                                ckk, o, mp, 1.0,
                                vw.as_ptr(), 1, ckk as isize,
                                g.as_ptr(), mp as isize, 1,
                                0.0, dcols.as_mut_ptr(), mp as isize, 1,
                            );
                        }
                        for s in 0..m {
                            geom.col2im(&dcols[s * p..], mp, &mut d[(start + s) * chw..(start + s + 1) * chw]);
                        }
                    });
                }
            }
            Op::Upsample2x(x) => {
                let (n, c, h2, w2) = node.value.dims4();
                let (h, w) = (h2 / 2, w2 / 2);
                self.accumulate(grads, *x, |d| {
                    for plane in 0..n * c {
                        let src = &gd[plane * h2 * w2..(plane + 1) * h2 * w2];
                        let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                        for i in 0..h2 {
                            for j in 0..w2 {
                                dst[(i / 2) * w + j / 2] += src[i * w2 + j];
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4();
                let hw = h * w;
                self.accumulate(grads, *x, |d| {
                    for (plane, gv) in d.chunks_mut(hw).zip(gd) {
                        let v = gv / hw as f32;
                        plane.iter_mut().for_each(|d| *d += v);
                    }
                });
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = &node.value.data;
                let hw = y.len() / inv_std.len();
                self.accumulate(grads, *x, |d| {
                    for (((dp, gp), yp), r) in d.chunks_mut(hw).zip(gd.chunks(hw)).zip(y.chunks(hw)).zip(inv_std) {
                        let mg = gp.iter().sum::<f32>() / hw as f32;
                        let mgy = gp.iter().zip(yp).map(|(g, y)| g * y).sum::<f32>() / hw as f32;
                        for ((d, g), y) in dp.iter_mut().zip(gp).zip(yp) {
                            *d += r * (g - mg - y * mgy);
                        }
                    }
                });
            }
            Op::Crop { x, boxes, size } => {
                let (_, c, h, w) = self.value(*x).dims4();
                let size = *size;
                self.accumulate(grads, *x, |d| {
                    let mut k = 0;
                    for &(src, top, left) in boxes {
                        for ch in 0..c {
                            let base = (src * c + ch) * h * w;
                            for i in 0..size {
                                let row = base + (top + i) * w + left;
                                axpy(&mut d[row..row + size], &gd[k..k + size], 1.0);
                                k += size;
                            }
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).shape[1];
                let cb = self.value(*b).shape[1];
                self.accumulate(grads, *a, |d| {
                    for (dr, gr) in d.chunks_mut(ca).zip(gd.chunks(ca + cb)) {
                        axpy(dr, &gr[..ca], 1.0);
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (dr, gr) in d.chunks_mut(cb).zip(gd.chunks(ca + cb)) {
                        axpy(dr, &gr[ca..], 1.0);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |d| axpy(d, &gd[off..off + len], 1.0));
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let row = tx.numel() / tx.shape[0];
                let off = start * row;
                self.accumulate(grads, *x, |d| axpy(&mut d[off..off + gd.len()], gd, 1.0));
            }
            Op::GroupMean { x, group } => {
                let f = node.value.shape[1];
                let inv = 1.0 / *group as f32;
                self.accumulate(grads, *x, |d| {
                    for (r, dr) in d.chunks_mut(f).enumerate() {
                        axpy(dr, &gd[(r / group) * f..(r / group + 1) * f], inv);
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f32;
                let v = gd[0] / n;
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d += v));
            }
            Op::LogSoftmax(x) => {
                let k = node.value.shape[1];
                let y = &node.value.data;
                self.accumulate(grads, *x, |d| {
                    let mut p = vec![0f32; k];
                    for ((dr, gr), yr) in d.chunks_mut(k).zip(gd.chunks(k)).zip(y.chunks(k)) {
                        for (p, y) in p.iter_mut().zip(yr) {
                            *p = y.exp();
                        }
                        // 1 - p_j as the sum of the other classes
                        for j in 0..k {
                            let (mut rest_p, mut rest_g) = (0f32, 0f32);
                            for i in (0..k).filter(|&i| i != j) {
                                rest_p += p[i];
                                rest_g += gr[i];
                            }
                            dr[j] += gr[j] * rest_p - p[j] * rest_g;
                        }
                    }
                });
            }
            Op::Gather { x, targets } => {
                let k = self.value(*x).shape[1];
                self.accumulate(grads, *x, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * k + t] += gd[r];
                    }
                });
            }
        }
    }
}

/// Output of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bound: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.bound.get(&id).and_then(|v| self.get(*v))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub params: Vec<ParamId>,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, lr: f32, betas: (f32, f32)) -> Self {
        let m = params.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect::<Vec<_>>();
        let v = m.clone();
        Self { lr, beta1: betas.0, beta2: betas.1, eps: 1e-8, params, step: 0, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers, one per parameter.
    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) {
        assert_eq!(m.len(), self.params.len());
        assert_eq!(v.len(), self.params.len());
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// Applies one update. Parameters that received no gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (slot, &id) in self.params.iter().enumerate() {
            let Some(g) = grads.param(id) else { continue };
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (((p, g), m), v) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn axpy(dst: &mut [f32], src: &[f32], a: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Sets flush-to-zero and denormals-are-zero for the calling thread. Tiny
/// gradients otherwise fall into the subnormal range and slow every op by an
/// order of magnitude.
pub fn flush_denormals() {
    #[cfg(all(target_arch = "x86_64", target_feature = "sse"))]
    unsafe {
        let mut csr: u32 = 0;
        std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack));
        csr |= 0x8040;
        std::arch::asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack));
    }
}

/// Samples per im2col block, keeping the column matrix near 1 MiB.
fn conv_chunk(ckk: usize, p: usize) -> usize {
    ((1 << 18) / (ckk * p).max(1)).max(1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        Self { c, h, w, k, stride, pad, out_h, out_w }
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Valid output columns `oj` for kernel offset `kj`.
    fn col_range(&self, kj: usize) -> std::ops::Range<usize> {
        let lo = if self.pad > kj { (self.pad - kj).div_ceil(self.stride) } else { 0 };
        let hi = if self.w + self.pad > kj { (self.w + self.pad - kj - 1) / self.stride + 1 } else { 0 };
        lo.min(self.out_w)..hi.min(self.out_w).max(lo.min(self.out_w))
    }

    /// Writes row `r` of the column matrix at `cols[r * ld ..]`.
    fn im2col(&self, x: &[f32], cols: &mut [f32], ld: usize) {
        for ch in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ch * self.k + ki) * self.k + kj;
                    let range = self.col_range(kj);
                    for oi in 0..self.out_h {
                        let dst = &mut cols[row * ld + oi * self.out_w..row * ld + (oi + 1) * self.out_w];
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii as usize >= self.h {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(ch * self.h + ii as usize) * self.w..];
                        dst[..range.start].fill(0.0);
                        dst[range.end..].fill(0.0);
                        if range.is_empty() {
                            continue;
                        }
                        let first = range.start * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            dst[range.clone()].copy_from_slice(&src[first..first + range.len()]);
                        } else {
                            for (d, v) in dst[range.clone()].iter_mut().zip(src[first..].iter().step_by(self.stride)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], ld: usize, dx: &mut [f32]) {
        for ch in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ch * self.k + ki) * self.k + kj;
                    let range = self.col_range(kj);
                    for oi in 0..self.out_h {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii as usize >= self.h {
                            continue;
                        }
                        let src = &cols[row * ld + oi * self.out_w..];
                        let dst = &mut dx[(ch * self.h + ii as usize) * self.w..];
                        if range.is_empty() {
                            continue;
                        }
                        let first = range.start * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            for (d, v) in dst[first..first + range.len()].iter_mut().zip(&src[range.clone()]) {
                                *d += *v;
                            }
                        } else {
                            for (d, v) in dst[first..].iter_mut().step_by(self.stride).zip(&src[range.clone()]) {
                                *d += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    }

    /// Central finite differences in f64 around an f32 graph builder; compares every
    /// input coordinate against the analytic gradient.
    fn check_grad(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        let eval = |inputs: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
            let l = build(&mut tape, &vars);
            tape.value(l).data[0] as f64
        };
        let h = 1e-2f32;
        for (idx, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[idx].shape.clone()));
            for j in 0..inputs[idx].numel() {
                let mut plus = inputs.clone();
                plus[idx].data[j] += h;
                let mut minus = inputs.clone();
                minus[idx].data[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
                let an = analytic.data[j] as f64;
                assert!(
                    (fd - an).abs() <= tol * (1.0 + fd.abs()),
                    "input {idx} coord {j}: finite diff {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let x = rand_tensor(vec![2, 2, 5, 5], &mut rng);
            let w = rand_tensor(vec![3, 2, 3, 3], &mut rng);
            let b = rand_tensor(vec![3], &mut rng);
            check_grad(
                vec![x, w, b],
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad);
                    let y = t.mul(y, y);
                    t.mean(y)
                },
                2e-2,
            );
        }
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(vec![1, 2, 6, 6], &mut rng);
        let w = rand_tensor(vec![2, 2, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(xv, wv, None, 2, 1);
        let out = tape.value(y).clone();
        assert_eq!(out.shape, vec![1, 2, 3, 3]);
        for o in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let mut acc = 0.0f64;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (ii, jj) = ((i * 2 + ki) as isize - 1, (j * 2 + kj) as isize - 1);
                                if ii < 0 || jj < 0 || ii >= 6 || jj >= 6 {
                                    continue;
                                }
                                acc += x.data[(c * 6 + ii as usize) * 6 + jj as usize] as f64
                                    * w.data[((o * 2 + c) * 3 + ki) * 3 + kj] as f64;
                            }
                        }
                    }
                    let got = out.data[(o * 3 + i) * 3 + j] as f64;
                    assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn linear_and_pointwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(vec![3, 4], &mut rng);
        let w = rand_tensor(vec![5, 4], &mut rng);
        let b = rand_tensor(vec![5], &mut rng);
        check_grad(
            vec![x, w, b],
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]));
                let a = t.leaky_relu(y, 0.2);
                let s = t.sigmoid(a);
                let sp = t.softplus(y);
                let z = t.add(s, sp);
                t.mean(z)
            },
            2e-2,
        );
    }

    #[test]
    fn softmax_gather_exp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = rand_tensor(vec![3, 4], &mut rng);
        check_grad(
            vec![z],
            |t, v| {
                let ls = t.log_softmax(v[0]);
                let g = t.gather(ls, &[0, 3, 1]);
                let g = t.scale(g, 0.7);
                let e = t.exp(g);
                let e = t.add_scalar(e, -1.0);
                t.mean(e)
            },
            2e-2,
        );
    }

    #[test]
    fn spatial_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(vec![2, 2, 4, 4], &mut rng);
        let s = rand_tensor(vec![2, 2], &mut rng);
        let sh = rand_tensor(vec![2, 2], &mut rng);
        let cb = rand_tensor(vec![2], &mut rng);
        check_grad(
            vec![x, s, sh, cb],
            |t, v| {
                let y = t.instance_norm(v[0]);
                let y = t.channel_affine(y, v[1], v[2]);
                let y = t.add_channel(y, v[3]);
                let u = t.upsample2x(y);
                let c = t.crop(u, &[(0, 1, 2), (1, 0, 0), (0, 3, 3)], 3);
                let c2 = t.mul(c, c);
                let p = t.global_avg_pool(c2);
                let r = t.reshape(p, vec![3, 2]);
                let both = t.concat_rows(&[r, r]);
                let sl = t.slice_rows(both, 1, 4);
                let gm = t.group_mean(sl, 2);
                let cc = t.concat_cols(gm, gm);
                let cl = t.clamp_min(cc, -10.0);
                t.mean(cl)
            },
            2e-2,
        );
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut opt = Adam::new(&store, vec![id], 0.1, (0.9, 0.999));
        for _ in 0..300 {
            let mut tape = Tape::new();
            let w = tape.param(&store, id);
            let sq = tape.mul(w, w);
            let loss = tape.mean(sq);
            let g = tape.backward(loss);
            opt.step(&mut store, &g);
        }
        assert!(store.get(id).data.iter().all(|v| v.abs() < 0.05), "{:?}", store.get(id).data);
    }

    #[test]
    fn inference_tape_skips_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![1], vec![2.0]));
        let mut tape = Tape::inference();
        let w = tape.param(&store, id);
        let loss = tape.mean(w);
        let g = tape.backward(loss);
        assert!(g.param(id).is_none());
    }
}
