//! Pointwise segmentation network: a tanh multilayer perceptron mapping
//! per-point features `(x, y, z, range, intensity)` to class probabilities,
//! with a hand-written backward pass for the soft Dice loss.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::types::{Label, LabelKind, LabelSet, PointCloud};

/// Features per point: scaled x, y, z, range, and raw intensity.
pub const INPUT_FEATURES: usize = 5;
pub const DEFAULT_HIDDEN: usize = 64;
/// Meters are multiplied by this before entering the network.
pub const DEFAULT_INPUT_SCALE: f64 = 0.1;
/// Smoothing term of the Dice ratio.
pub const DICE_EPS: f64 = 1.0;

const CHUNK: usize = 256;
const CHECKPOINT_MAGIC: &[u8; 4] = b"LMXC";
const CHECKPOINT_VERSION: u32 = 1;

/// Flat parameter vector of the MLP with its layer widths.
///
/// Layer `l` stores a row-major `dims[l+1] x dims[l]` weight matrix followed
/// by a bias of length `dims[l+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    dims: Vec<usize>,
    input_scale: f64,
    data: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(dims: &[usize], input_scale: f64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Shape(format!("invalid layer widths {dims:?}")));
        }
        if dims[0] != INPUT_FEATURES {
            return Err(Error::Shape(format!("input width must be {INPUT_FEATURES}, got {}", dims[0])));
        }
        if !(input_scale.is_finite() && input_scale > 0.0) {
            return Err(Error::Config(format!("input scale {input_scale} must be positive")));
        }
        let len = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self { dims: dims.to_vec(), input_scale, data: vec![T::zero(); len] })
    }

    /// Two hidden layers of width `hidden`, all parameters zero.
    pub fn pointwise(n_classes: usize, hidden: usize, input_scale: f64) -> Result<Self> {
        Self::zeros(&[INPUT_FEATURES, hidden, hidden, n_classes], input_scale)
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(n_classes: usize, hidden: usize, input_scale: f64, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::pointwise(n_classes, hidden, input_scale)?;
        for l in 0..p.num_layers() {
            let (fan_in, fan_out) = (p.dims[l], p.dims[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = p.layer_mut(l);
            for v in w.iter_mut() {
                *v = T::of(rng.uniform(-limit, limit));
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self { dims: self.dims.clone(), input_scale: self.input_scale, data: vec![T::zero(); self.data.len()] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    fn offset(&self, l: usize) -> usize {
        self.dims[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `(weights, bias)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[T], &[T]) {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let start = self.offset(l);
        self.data[start..start + i * o + o].split_at(i * o)
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [T], &mut [T]) {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let start = self.offset(l);
        self.data[start..start + i * o + o].split_at_mut(i * o)
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims || self.data.len() != other.data.len() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            dims: self.dims.clone(),
            input_scale: self.input_scale,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Elementwise `self += k * other`.
    pub fn axpy(&mut self, k: T, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + k * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for v in &mut self.data {
            *v = *v * k;
        }
    }

    /// Checkpoint encoding: magic, version, dtype tag, input scale, layer
    /// widths, then the little-endian row-major payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * self.dims.len() + T::BYTES * self.data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&[T::DTYPE, 0, 0, 0]);
        out.extend_from_slice(&self.input_scale.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let dtype = r.take(4)?[0];
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint dtype tag {dtype} does not match requested tag {}",
                T::DTYPE
            )));
        }
        let input_scale = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let n = r.u32()? as usize;
        if n > 64 {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let dims = (0..n).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let mut params = Self::zeros(&dims, input_scale).map_err(|e| Error::Format(e.to_string()))?;
        let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        if len != params.data.len() {
            return Err(Error::Format(format!("payload of {len} values for shape {dims:?}")));
        }
        let payload = r.take(len * T::BYTES)?;
        for (v, chunk) in params.data.iter_mut().zip(payload.chunks_exact(T::BYTES)) {
            *v = T::read_le(chunk);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Row-major `N x n_classes` probability table.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbs<T> {
    n_classes: usize,
    data: Vec<T>,
}

impl<T: Scalar> ClassProbs<T> {
    pub fn new(n_classes: usize, data: Vec<T>) -> Result<Self> {
        if n_classes == 0 || !data.len().is_multiple_of(n_classes) {
            return Err(Error::Shape(format!("{} values do not form rows of {n_classes}", data.len())));
        }
        Ok(Self { n_classes, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.first().map_or(1, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("ragged probability rows".into()));
        }
        Self::new(n, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.n_classes
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.n_classes)
    }

    /// Index and value of the largest entry of row `i` (first on ties).
    pub fn argmax(&self, i: usize) -> (usize, T) {
        argmax(self.row(i))
    }

    /// Argmax class per point.
    pub fn predictions(&self) -> LabelSet {
        LabelSet::new((0..self.len()).map(|i| Label::class(self.argmax(i).0 as u16)).collect(), LabelKind::Pseudo)
    }
}

fn argmax<T: Scalar>(row: &[T]) -> (usize, T) {
    let mut best = (0, row[0]);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

pub fn point_features<T: Scalar>(cloud: &PointCloud, i: usize, input_scale: f64) -> [T; INPUT_FEATURES] {
    let [x, y, z] = cloud.coords()[i].map(f64::from);
    let range = (x * x + y * y + z * z).sqrt();
    [
        T::of(x * input_scale),
        T::of(y * input_scale),
        T::of(z * input_scale),
        T::of(range * input_scale),
        T::of(f64::from(cloud.intensity_at(i))),
    ]
}

fn layer_name(l: usize, last: usize) -> String {
    if l == last {
        "output layer".into()
    } else {
        format!("hidden layer {}", l + 1)
    }
}

/// Per-chunk activations: `acts[l]` holds the inputs of layer `l` for every
/// point of the chunk, and `acts[L]` the softmax output.
struct ChunkActs<T> {
    start: usize,
    len: usize,
    acts: Vec<Vec<T>>,
}

fn forward_chunk<T: Scalar>(
    params: &ModelParams<T>,
    cloud: &PointCloud,
    start: usize,
    len: usize,
) -> Result<ChunkActs<T>> {
    let dims = params.dims();
    let last = params.num_layers() - 1;
    let mut acts: Vec<Vec<T>> = dims.iter().map(|&d| Vec::with_capacity(d * len)).collect();
    let mut z = vec![T::zero(); dims.iter().copied().max().unwrap()];
    for i in start..start + len {
        acts[0].extend_from_slice(&point_features::<T>(cloud, i, params.input_scale));
        for l in 0..=last {
            let (n_in, n_out) = (dims[l], dims[l + 1]);
            let (w, b) = params.layer(l);
            let (lo, hi) = acts.split_at_mut(l + 1);
            let input = &lo[l][(i - start) * n_in..(i - start + 1) * n_in];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut s = b[o];
                for k in 0..n_in {
                    s = s + row[k] * input[k];
                }
                z[o] = s;
            }
            let out = &mut hi[0];
            if l < last {
                for &v in &z[..n_out] {
                    out.push(v.tanh());
                }
            } else {
                let m = z[..n_out].iter().copied().fold(T::neg_infinity(), T::max);
                if !m.is_finite() {
                    return Err(Error::Numeric {
                        layer: layer_name(l, last),
                        reason: format!("non-finite logit at point {i}"),
                    });
                }
                let mut sum = T::zero();
                for v in &mut z[..n_out] {
                    *v = (*v - m).exp();
                    sum = sum + *v;
                }
                for &v in &z[..n_out] {
                    out.push(v / sum);
                }
            }
            if out[out.len() - n_out..].iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    layer: layer_name(l, last),
                    reason: format!("non-finite activation at point {i}"),
                });
            }
        }
    }
    Ok(ChunkActs { start, len, acts })
}

fn forward_chunks<T: Scalar>(params: &ModelParams<T>, cloud: &PointCloud) -> Result<Vec<ChunkActs<T>>> {
    let n = cloud.len();
    (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| forward_chunk(params, cloud, c * CHUNK, CHUNK.min(n - c * CHUNK)))
        .collect()
}

fn gather_probs<T: Scalar>(chunks: &[ChunkActs<T>], n_classes: usize) -> ClassProbs<T> {
    let data = chunks.iter().flat_map(|c| c.acts.last().unwrap().iter().copied()).collect();
    ClassProbs { n_classes, data }
}

/// Class probabilities for every point of a nonempty cloud.
pub fn forward<T: Scalar>(params: &ModelParams<T>, cloud: &PointCloud) -> Result<ClassProbs<T>> {
    if cloud.is_empty() {
        return Err(Error::Shape("forward on an empty cloud".into()));
    }
    let chunks = forward_chunks(params, cloud)?;
    Ok(gather_probs(&chunks, params.n_classes()))
}

/// Argmax predictions; an empty cloud yields an empty label set.
pub fn predict<T: Scalar>(params: &ModelParams<T>, cloud: &PointCloud) -> Result<LabelSet> {
    if cloud.is_empty() {
        return Ok(LabelSet::empty(LabelKind::Pseudo));
    }
    Ok(forward(params, cloud)?.predictions())
}

/// Which classes enter the Dice mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceClasses {
    /// Classes with at least one ground-truth point in the sample.
    #[default]
    Present,
    /// Every class of the model output.
    All,
}

/// Dice loss value and its gradient with respect to each probability entry
/// (row-major like [`ClassProbs`]; zero on IGNORE rows).
#[derive(Debug, Clone, PartialEq)]
pub struct DiceOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Soft multiclass Dice loss `1 - mean_c (2 I_c + eps) / (P_c + G_c + eps)`.
pub fn dice_loss<T: Scalar>(probs: &ClassProbs<T>, labels: &LabelSet, classes: DiceClasses) -> Result<DiceOutput> {
    if probs.len() != labels.len() {
        return Err(Error::Alignment(format!("{} probability rows for {} labels", probs.len(), labels.len())));
    }
    let nc = probs.n_classes();
    let mut inter = vec![0.0f64; nc];
    let mut psum = vec![0.0f64; nc];
    let mut gsum = vec![0.0f64; nc];
    let mut counted = 0usize;
    for (i, &l) in labels.labels().iter().enumerate() {
        let Some(c) = l.id() else { continue };
        let c = c as usize;
        if c >= nc {
            return Err(Error::Label(format!("label {l:?} outside {nc} model classes")));
        }
        counted += 1;
        for (j, &p) in probs.row(i).iter().enumerate() {
            psum[j] += p.f64();
        }
        inter[c] += probs.row(i)[c].f64();
        gsum[c] += 1.0;
    }
    if counted == 0 {
        return Err(Error::Loss("every point is IGNORE".into()));
    }
    let included: Vec<usize> = match classes {
        DiceClasses::Present => (0..nc).filter(|&c| gsum[c] > 0.0).collect(),
        DiceClasses::All => (0..nc).collect(),
    };
    let k = included.len() as f64;
    let mut mean_dice = 0.0;
    // d(loss)/d(p_ic) = -(1/k) * (2 g_ic D_c - N_c) / D_c^2
    let mut coef_hit = vec![0.0f64; nc];
    let mut coef_miss = vec![0.0f64; nc];
    for &c in &included {
        let num = 2.0 * inter[c] + DICE_EPS;
        let den = psum[c] + gsum[c] + DICE_EPS;
        mean_dice += num / den;
        coef_hit[c] = -(2.0 * den - num) / (den * den) / k;
        coef_miss[c] = num / (den * den) / k;
    }
    let loss = 1.0 - mean_dice / k;
    let mut grad = vec![0.0f64; probs.len() * nc];
    for (i, &l) in labels.labels().iter().enumerate() {
        let Some(t) = l.id() else { continue };
        let row = &mut grad[i * nc..(i + 1) * nc];
        for &c in &included {
            row[c] = if c == t as usize { coef_hit[c] } else { coef_miss[c] };
        }
    }
    Ok(DiceOutput { loss, grad })
}

/// Loss and its gradient with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub loss: f64,
    pub grad: ModelParams<T>,
}

/// Dice loss of `forward(params, cloud)` against `labels` and its gradient.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cloud: &PointCloud,
    labels: &LabelSet,
    classes: DiceClasses,
) -> Result<LossValue<T>> {
    if cloud.len() != labels.len() {
        return Err(Error::Alignment(format!("{} labels for {} points", labels.len(), cloud.len())));
    }
    if cloud.is_empty() {
        return Err(Error::Loss("empty sample".into()));
    }
    let chunks = forward_chunks(params, cloud)?;
    let nc = params.n_classes();
    let probs = gather_probs(&chunks, nc);
    let dice = dice_loss(&probs, labels, classes)?;

    let partial: Vec<Vec<T>> = chunks
        .par_iter()
        .map(|chunk| backward_chunk(params, chunk, &dice.grad[chunk.start * nc..(chunk.start + chunk.len) * nc]))
        .collect();
    let mut grad = params.zeros_like();
    for g in partial {
        for (a, b) in grad.data.iter_mut().zip(g) {
            *a = *a + b;
        }
    }
    if !grad.is_finite() {
        return Err(Error::Numeric { layer: "gradient".into(), reason: "non-finite parameter gradient".into() });
    }
    Ok(LossValue { loss: dice.loss, grad })
}

fn backward_chunk<T: Scalar>(params: &ModelParams<T>, chunk: &ChunkActs<T>, dprob: &[f64]) -> Vec<T> {
    let dims = params.dims();
    let layers = params.num_layers();
    let nc = params.n_classes();
    let width = dims.iter().copied().max().unwrap();
    let mut grad = vec![T::zero(); params.len()];
    let offsets: Vec<usize> = (0..layers).map(|l| params.offset(l)).collect();
    let mut delta = vec![T::zero(); width];
    let mut prev = vec![T::zero(); width];
    for p in 0..chunk.len {
        let dp = &dprob[p * nc..(p + 1) * nc];
        if dp.iter().all(|&v| v == 0.0) {
            continue;
        }
        let probs = &chunk.acts[layers][p * nc..(p + 1) * nc];
        // softmax Jacobian
        let dot: f64 = probs.iter().zip(dp).map(|(&q, &g)| q.f64() * g).sum();
        for j in 0..nc {
            delta[j] = probs[j] * T::of(dp[j] - dot);
        }
        for l in (0..layers).rev() {
            let (n_in, n_out) = (dims[l], dims[l + 1]);
            let input = &chunk.acts[l][p * n_in..(p + 1) * n_in];
            let (w, _) = params.layer(l);
            let g = &mut grad[offsets[l]..offsets[l] + n_in * n_out + n_out];
            let (gw, gb) = g.split_at_mut(n_in * n_out);
            for o in 0..n_out {
                let d = delta[o];
                if d == T::zero() {
                    continue;
                }
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for k in 0..n_in {
                    row[k] = row[k] + d * input[k];
                }
                gb[o] = gb[o] + d;
            }
            if l > 0 {
                for k in 0..n_in {
                    let mut s = T::zero();
                    for o in 0..n_out {
                        s = s + w[o * n_in + k] * delta[o];
                    }
                    let a = input[k];
                    prev[k] = s * (T::one() - a * a);
                }
                delta[..n_in].copy_from_slice(&prev[..n_in]);
            }
        }
    }
    grad
}

/// `params - lr * grad`.
pub fn sgd_step<T: Scalar>(params: &ModelParams<T>, grad: &ModelParams<T>, lr: f64) -> Result<ModelParams<T>> {
    let mut out = params.clone();
    out.axpy(T::of(-lr), grad)?;
    Ok(out)
}
