//! Conditional-VAE behavior cloning with action chunking.
//!
//! The encoder sees the state features and a normalized action chunk and
//! outputs the mean and log-variance of the latent; the decoder maps state
//! features and a latent sample back to the chunk. Both are plain ReLU MLPs
//! evaluated column-wise on batches. Gradients are accumulated by hand over
//! the layer graph into a flat parameter vector with a named layout.
//!
//! Force outputs pass through a softplus so decoded desired forces are never
//! negative. At inference the latent is the prior mean.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DVectorView};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::{ActionChunk, ActionStep, ACTION_DIM};
use crate::episode::{Agent, Observation, OBJECT_PROXY_DIM};
use crate::error::{Error, Result};
use crate::expert::Demonstration;
use crate::hand::NUM_JOINTS;
use crate::rng::substream;
use crate::sim::SimWorld;

/// q, per-finger (force, CoP x, CoP y), object proxy.
pub const FEATURE_DIM: usize = NUM_JOINTS + 9 + OBJECT_PROXY_DIM;
/// Offset of the object proxy inside the feature vector.
const PROXY_OFFSET: usize = NUM_JOINTS + 9;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DXTCKPT1";

/// Unnormalized feature vector.
pub fn raw_features(obs: &Observation) -> [f64; FEATURE_DIM] {
    let mut v = [0.0; FEATURE_DIM];
    v[..NUM_JOINTS].copy_from_slice(&obs.q);
    for (f, s) in obs.tactile.iter().enumerate() {
        let o = NUM_JOINTS + 3 * f;
        v[o] = s.force_z;
        v[o + 1] = s.cop_xy.x;
        v[o + 2] = s.cop_xy.y;
    }
    v[PROXY_OFFSET..].copy_from_slice(&obs.object_proxy);
    v
}

/// Per-field affine normalization `(x - offset) / scale` for features and
/// actions, fitted once over a dataset (mean / standard deviation) and then
/// frozen in the manifest and every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub feature_offset: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub action_offset: Vec<f64>,
    pub action_scale: Vec<f64>,
}

struct Moments {
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    min: Vec<f64>,
    max: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
            min: vec![f64::INFINITY; dim],
            max: vec![f64::NEG_INFINITY; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        for (i, &v) in x.iter().enumerate() {
            self.sum[i] += v;
            self.sum_sq[i] += v * v;
            self.min[i] = self.min[i].min(v);
            self.max[i] = self.max[i].max(v);
        }
    }

    fn fit(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n as f64;
        (0..self.sum.len())
            .map(|i| {
                let half = 0.5 * (self.max[i] - self.min[i]);
                if half <= 1e-9 {
                    return (self.min[i], 1.0);
                }
                let mean = self.sum[i] / n;
                let var = (self.sum_sq[i] / n - mean * mean).max(0.0);
                (mean, var.sqrt().max(0.4 * half))
            })
            .unzip()
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            feature_offset: vec![0.0; FEATURE_DIM],
            feature_scale: vec![1.0; FEATURE_DIM],
            action_offset: vec![0.0; ACTION_DIM],
            action_scale: vec![1.0; ACTION_DIM],
        }
    }

    /// Fits mean / standard deviation over the retained steps of `demos`.
    /// Scales are floored at 0.4 half-range so every fitted value lands
    /// within ±5 after normalization.
    pub fn fit<'a>(demos: impl IntoIterator<Item = &'a Demonstration>) -> Result<Self> {
        let mut features = Moments::new(FEATURE_DIM);
        let mut actions = Moments::new(ACTION_DIM);
        for d in demos {
            for s in d.kept() {
                features.push(&raw_features(&s.obs));
                actions.push(&s.action.to_vec());
            }
        }
        if features.n == 0 {
            return Err(Error::EmptyDataset);
        }
        let (feature_offset, feature_scale) = features.fit();
        let (action_offset, action_scale) = actions.fit();
        Ok(Self {
            feature_offset,
            feature_scale,
            action_offset,
            action_scale,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.feature_offset.len() == FEATURE_DIM
            && self.feature_scale.len() == FEATURE_DIM
            && self.action_offset.len() == ACTION_DIM
            && self.action_scale.len() == ACTION_DIM;
        if !ok {
            return Err(Error::ShapeMismatch(
                "normalization vectors have the wrong length".into(),
            ));
        }
        let finite = self
            .feature_offset
            .iter()
            .chain(&self.action_offset)
            .all(|v| v.is_finite());
        let positive = self
            .feature_scale
            .iter()
            .chain(&self.action_scale)
            .all(|v| v.is_finite() && *v > 0.0);
        if !(finite && positive) {
            return Err(Error::InvalidConfig(
                "normalization scales must be finite and positive".into(),
            ));
        }
        Ok(())
    }

    /// Normalized features; without vision the object proxy is zeroed.
    pub fn features(&self, obs: &Observation, vision: bool) -> Vec<f64> {
        let raw = raw_features(obs);
        (0..FEATURE_DIM)
            .map(|i| {
                if !vision && i >= PROXY_OFFSET {
                    0.0
                } else {
                    (raw[i] - self.feature_offset[i]) / self.feature_scale[i]
                }
            })
            .collect()
    }

    pub fn normalize_action(&self, a: &ActionStep) -> Vec<f64> {
        a.to_vec()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.action_offset[i]) / self.action_scale[i])
            .collect()
    }

    fn output_map(&self, softplus_beta: f64) -> OutputMap {
        let mut rectified = vec![false; ACTION_DIM];
        for r in &mut rectified[NUM_JOINTS..NUM_JOINTS + 3] {
            *r = true;
        }
        OutputMap {
            offset: self.action_offset.clone(),
            scale: self.action_scale.clone(),
            rectified,
            beta: softplus_beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub chunk_k: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    /// KL weight.
    pub beta: f64,
    pub learning_rate: f64,
    pub train_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Sharpness of the force rectifier.
    pub softplus_beta: f64,
    /// Train and run with the object proxy visible.
    pub vision: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            chunk_k: 20,
            latent_dim: 32,
            hidden: vec![256, 256],
            beta: 10.0,
            learning_rate: 1e-3,
            train_steps: 2000,
            batch_size: 64,
            seed: 0,
            softplus_beta: 4.0,
            vision: true,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("policy: {m}")));
        if self.chunk_k == 0 {
            return bad("chunk_k must be at least 1");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and nonnegative");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.softplus_beta > 0.0 && self.softplus_beta.is_finite()) {
            return bad("softplus_beta must be positive");
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            feature_dim: FEATURE_DIM,
            step_dim: ACTION_DIM,
            chunk_k: self.chunk_k,
            latent_dim: self.latent_dim,
            hidden: self.hidden.clone(),
        }
    }
}

/// Network shapes. The policy uses the full feature and action widths;
/// small instances exist for gradient checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub feature_dim: usize,
    pub step_dim: usize,
    pub chunk_k: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl LayoutEntry {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Named segments of the flat parameter vector. Weights are column-major
/// `out x in`, biases `out x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
    pub len: usize,
}

impl Layout {
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(format!("{} {} {}\n", e.name, e.rows, e.cols).as_bytes());
        }
        h.finalize().into()
    }
}

impl Architecture {
    pub fn chunk_dim(&self) -> usize {
        self.chunk_k * self.step_dim
    }

    fn encoder_dims(&self) -> Vec<usize> {
        let mut d = vec![self.feature_dim + self.chunk_dim()];
        d.extend(&self.hidden);
        d.push(2 * self.latent_dim);
        d
    }

    fn decoder_dims(&self) -> Vec<usize> {
        let mut d = vec![self.feature_dim + self.latent_dim];
        d.extend(&self.hidden);
        d.push(self.chunk_dim());
        d
    }

    pub fn layout(&self) -> Layout {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (net, dims) in [("encoder", self.encoder_dims()), ("decoder", self.decoder_dims())] {
            for (i, w) in dims.windows(2).enumerate() {
                for (kind, cols) in [("weight", w[0]), ("bias", 1)] {
                    let e = LayoutEntry {
                        name: format!("{net}.{i}.{kind}"),
                        rows: w[1],
                        cols,
                        offset,
                    };
                    offset += e.len();
                    entries.push(e);
                }
            }
        }
        Layout { entries, len: offset }
    }

    fn layers(&self) -> (Vec<Layer>, Vec<Layer>) {
        let layout = self.layout();
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        for pair in layout.entries.chunks(2) {
            let layer = Layer {
                w: pair[0].offset,
                b: pair[1].offset,
                rows: pair[0].rows,
                cols: pair[0].cols,
            };
            if pair[0].name.starts_with("encoder") {
                enc.push(layer);
            } else {
                dec.push(layer);
            }
        }
        (enc, dec)
    }
}

/// Flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            values: vec![0.0; arch.layout().len],
        }
    }

    /// Uniform weights scaled by fan-in: `±sqrt(6/fan_in)` on layers that
    /// feed a ReLU, `±sqrt(1/fan_in)` on output layers. Biases start at
    /// zero, and so do the decoder columns reading the latent, so the
    /// decoder starts out ignoring `z` (which is 0 at inference anyway).
    pub fn init(arch: &Architecture, rng: &mut impl Rng) -> Self {
        let layout = arch.layout();
        let mut values = vec![0.0; layout.len];
        let n_enc = arch.encoder_dims().len() - 1;
        let n_dec = arch.decoder_dims().len() - 1;
        for (k, pair) in layout.entries.chunks(2).enumerate() {
            let output = k + 1 == n_enc || k + 1 == n_enc + n_dec;
            let w = &pair[0];
            let bound = (if output { 1.0 } else { 6.0 } / w.cols as f64).sqrt();
            let latent_from = if k == n_enc { arch.feature_dim * w.rows } else { w.len() };
            for v in &mut values[w.offset..w.offset + latent_from] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Self { values }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

impl Layer {
    fn weight<'a>(&self, p: &'a [f64]) -> DMatrixView<'a, f64> {
        DMatrixView::from_slice(&p[self.w..self.w + self.rows * self.cols], self.rows, self.cols)
    }

    fn bias<'a>(&self, p: &'a [f64]) -> DVectorView<'a, f64> {
        DVectorView::from_slice(&p[self.b..self.b + self.rows], self.rows)
    }
}

/// Activations kept for the backward pass: each layer's input and the
/// hidden pre-activations.
struct Tape {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

fn mlp_forward(p: &[f64], layers: &[Layer], x: DMatrix<f64>) -> (DMatrix<f64>, Tape) {
    let mut tape = Tape {
        inputs: Vec::with_capacity(layers.len()),
        pre: Vec::with_capacity(layers.len()),
    };
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        let mut y = l.weight(p) * &h;
        let b = l.bias(p);
        for mut col in y.column_iter_mut() {
            col += &b;
        }
        tape.inputs.push(h);
        if i + 1 < layers.len() {
            tape.pre.push(y.clone());
            y.apply(|v| *v = v.max(0.0));
        }
        h = y;
    }
    (h, tape)
}

/// Accumulates parameter gradients into `grad` and returns the gradient
/// with respect to the network input.
fn mlp_backward(p: &[f64], layers: &[Layer], tape: &Tape, d_out: DMatrix<f64>, grad: &mut [f64]) -> DMatrix<f64> {
    let mut d = d_out;
    for i in (0..layers.len()).rev() {
        let l = &layers[i];
        if i + 1 < layers.len() {
            d.zip_apply(&tape.pre[i], |g, z| {
                if z <= 0.0 {
                    *g = 0.0
                }
            });
        }
        let dw = &d * tape.inputs[i].transpose();
        for (g, v) in grad[l.w..l.w + l.rows * l.cols].iter_mut().zip(dw.as_slice()) {
            *g += v;
        }
        for (r, g) in grad[l.b..l.b + l.rows].iter_mut().enumerate() {
            *g += d.row(r).sum();
        }
        d = l.weight(p).tr_mul(&d);
    }
    d
}

fn softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    (bx.max(0.0) + (-bx.abs()).exp().ln_1p()) / beta
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps raw decoder outputs to normalized actions: identity, except for
/// rectified fields, which are denormalized, passed through a softplus and
/// normalized again.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMap {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
    pub rectified: Vec<bool>,
    pub beta: f64,
}

impl OutputMap {
    /// No rectified fields.
    pub fn linear(step_dim: usize) -> Self {
        Self {
            offset: vec![0.0; step_dim],
            scale: vec![1.0; step_dim],
            rectified: vec![false; step_dim],
            beta: 1.0,
        }
    }

    fn step_dim(&self) -> usize {
        self.offset.len()
    }

    /// Normalized prediction and its derivative w.r.t. the raw output.
    fn normalized(&self, field: usize, o: f64) -> (f64, f64) {
        if !self.rectified[field] {
            return (o, 1.0);
        }
        let (off, sc) = (self.offset[field], self.scale[field]);
        let raw = off + sc * o;
        ((softplus(raw, self.beta) - off) / sc, sigmoid(self.beta * raw))
    }

    /// Physical value of one field.
    fn physical(&self, field: usize, o: f64) -> f64 {
        let raw = self.offset[field] + self.scale[field] * o;
        if self.rectified[field] {
            softplus(raw, self.beta)
        } else {
            raw
        }
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch(format!(
            "{what} has {got} values, expected {want}"
        )));
    }
    Ok(())
}

fn check_params(arch: &Architecture, params: &PolicyParams) -> Result<()> {
    check_len("parameter vector", params.values.len(), arch.layout().len)
}

fn stack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let (a, n) = top.shape();
    DMatrix::from_fn(a + bottom.nrows(), n, |r, c| {
        if r < a {
            top[(r, c)]
        } else {
            bottom[(r - a, c)]
        }
    })
}

/// Posterior mean and log-variance of the latent for one sample.
pub fn encode_posterior(
    arch: &Architecture,
    params: &PolicyParams,
    features: &[f64],
    chunk: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_params(arch, params)?;
    check_len("feature vector", features.len(), arch.feature_dim)?;
    check_len("action chunk", chunk.len(), arch.chunk_dim())?;
    let (enc, _) = arch.layers();
    let x = DMatrix::from_iterator(features.len() + chunk.len(), 1, features.iter().chain(chunk).copied());
    let (out, _) = mlp_forward(&params.values, &enc, x);
    let l = arch.latent_dim;
    Ok((
        out.rows(0, l).iter().copied().collect(),
        out.rows(l, l).iter().copied().collect(),
    ))
}

/// Raw decoder output (before the output map) for one sample.
fn decode_raw(arch: &Architecture, params: &PolicyParams, features: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    check_params(arch, params)?;
    check_len("feature vector", features.len(), arch.feature_dim)?;
    check_len("latent", z.len(), arch.latent_dim)?;
    let (_, dec) = arch.layers();
    let x = DMatrix::from_iterator(features.len() + z.len(), 1, features.iter().chain(z).copied());
    let (out, _) = mlp_forward(&params.values, &dec, x);
    Ok(out.iter().copied().collect())
}

/// Decoded chunk in physical units, `chunk_k x step_dim` row-major.
pub fn decode(
    arch: &Architecture,
    params: &PolicyParams,
    map: &OutputMap,
    features: &[f64],
    z: &[f64],
) -> Result<Vec<f64>> {
    check_len("output map", map.step_dim(), arch.step_dim)?;
    let raw = decode_raw(arch, params, features, z)?;
    Ok(raw
        .iter()
        .enumerate()
        .map(|(i, &o)| map.physical(i % arch.step_dim, o))
        .collect())
}

/// A training batch: features `F x B` and normalized target chunks `D x B`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: DMatrix<f64>,
    pub targets: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub l1: f64,
    pub kl: f64,
}

/// KL divergence of `N(mu, exp(log_var))` from the standard normal.
pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> f64 {
    mu.iter()
        .zip(log_var)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Mean L1 reconstruction plus `beta` times the batch-mean KL, with the
/// gradient over the whole parameter vector. Latent noise is drawn from
/// `rng`, column by column.
pub fn loss(
    arch: &Architecture,
    params: &PolicyParams,
    map: &OutputMap,
    batch: &Batch,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<(LossParts, Vec<f64>)> {
    check_params(arch, params)?;
    check_len("output map", map.step_dim(), arch.step_dim)?;
    check_len("batch feature rows", batch.features.nrows(), arch.feature_dim)?;
    check_len("batch target rows", batch.targets.nrows(), arch.chunk_dim())?;
    let n = batch.features.ncols();
    check_len("batch target columns", batch.targets.ncols(), n)?;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let p = &params.values;
    let (enc, dec) = arch.layers();
    let l = arch.latent_dim;
    let f = arch.feature_dim;
    let bn = n as f64;

    let (enc_out, enc_tape) = mlp_forward(p, &enc, stack(&batch.features, &batch.targets));
    let mu = enc_out.rows(0, l).into_owned();
    let log_var = enc_out.rows(l, l).into_owned();
    let mut eps = DMatrix::zeros(l, n);
    for c in 0..n {
        for r in 0..l {
            eps[(r, c)] = rng.sample(StandardNormal);
        }
    }
    let sigma = log_var.map(|v| (0.5 * v).exp());
    let z = &mu + sigma.component_mul(&eps);

    let (out, dec_tape) = mlp_forward(p, &dec, stack(&batch.features, &z));
    let d = arch.chunk_dim();
    let denom = (d * n) as f64;
    let mut l1 = 0.0;
    let mut d_out = DMatrix::zeros(d, n);
    for c in 0..n {
        for r in 0..d {
            let (pred, slope) = map.normalized(r % arch.step_dim, out[(r, c)]);
            let diff = pred - batch.targets[(r, c)];
            l1 += diff.abs();
            d_out[(r, c)] = diff.signum() * (diff != 0.0) as u8 as f64 * slope / denom;
        }
    }
    l1 /= denom;
    let kl = kl_divergence(mu.as_slice(), log_var.as_slice()) / bn;
    let total = l1 + beta * kl;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss(0));
    }

    let mut grad = vec![0.0; p.len()];
    let d_dec_in = mlp_backward(p, &dec, &dec_tape, d_out, &mut grad);
    let d_z = d_dec_in.rows(f, l);
    let mut d_enc_out = DMatrix::zeros(2 * l, n);
    for c in 0..n {
        for r in 0..l {
            let (m, lv, e, s) = (mu[(r, c)], log_var[(r, c)], eps[(r, c)], sigma[(r, c)]);
            d_enc_out[(r, c)] = d_z[(r, c)] + beta * m / bn;
            d_enc_out[(l + r, c)] = d_z[(r, c)] * e * 0.5 * s + beta * 0.5 * (lv.exp() - 1.0) / bn;
        }
    }
    mlp_backward(p, &enc, &enc_tape, d_enc_out, &mut grad);
    Ok((LossParts { total, l1, kl }, grad))
}

/// Training samples: each retained step of each demonstration paired with
/// the next `chunk_k` retained actions, padded by repeating the last one.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    features: Vec<Vec<f64>>,
    /// Normalized actions of each demonstration's retained steps.
    actions: Vec<Vec<Vec<f64>>>,
    /// (demo, step) per sample.
    index: Vec<(usize, usize)>,
    chunk_k: usize,
}

impl TrainingSet {
    pub fn new(demos: &[&Demonstration], norm: &Normalization, chunk_k: usize, vision: bool) -> Result<Self> {
        let mut features = Vec::new();
        let mut actions = Vec::new();
        let mut index = Vec::new();
        for (di, d) in demos.iter().enumerate() {
            let kept: Vec<_> = d.kept().collect();
            for (si, s) in kept.iter().enumerate() {
                features.push(norm.features(&s.obs, vision));
                index.push((di, si));
            }
            actions.push(kept.iter().map(|s| norm.normalize_action(&s.action)).collect());
        }
        if index.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            features,
            actions,
            index,
            chunk_k,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Normalized target chunk of sample `i`.
    pub fn chunk(&self, i: usize) -> Vec<f64> {
        let (d, s) = self.index[i];
        let seq = &self.actions[d];
        (0..self.chunk_k)
            .flat_map(|j| seq[(s + j).min(seq.len() - 1)].iter().copied())
            .collect()
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i]
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        let f = self.features[0].len();
        let d = self.chunk_k * ACTION_DIM;
        let mut features = DMatrix::zeros(f, rows.len());
        let mut targets = DMatrix::zeros(d, rows.len());
        for (c, &i) in rows.iter().enumerate() {
            features.column_mut(c).copy_from_slice(&self.features[i]);
            targets.column_mut(c).copy_from_slice(&self.chunk(i));
        }
        Batch { features, targets }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub total: f64,
    pub l1: f64,
    pub kl: f64,
}

pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut s = String::from("step,total,l1,kl\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.total, r.l1, r.kl);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Adam with the usual defaults.
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// A trained policy: configuration, frozen normalization and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub normalization: Normalization,
    pub params: PolicyParams,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: PolicyConfig,
    normalization: Normalization,
}

impl Policy {
    /// Freshly initialized, untrained policy.
    pub fn new(config: PolicyConfig, normalization: Normalization) -> Result<Self> {
        config.validate()?;
        normalization.validate()?;
        let mut rng = substream(config.seed, "train/init", 0);
        let params = PolicyParams::init(&config.architecture(), &mut rng);
        Ok(Self {
            config,
            normalization,
            params,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture()
    }

    pub fn output_map(&self) -> OutputMap {
        self.normalization.output_map(self.config.softplus_beta)
    }

    pub fn featurize(&self, obs: &Observation) -> Vec<f64> {
        self.normalization.features(obs, self.config.vision)
    }

    /// Chunk for `obs` with the latent at the prior mean.
    pub fn infer(&self, obs: &Observation) -> ActionChunk {
        let arch = self.architecture();
        let flat = decode(
            &arch,
            &self.params,
            &self.output_map(),
            &self.featurize(obs),
            &vec![0.0; arch.latent_dim],
        )
        .expect("policy shapes are fixed by its own configuration");
        ActionChunk::from_flat(&flat).expect("decoder width is a multiple of the action width")
    }

    /// Decoded chunk in normalized action units, for offline comparison
    /// with training targets.
    pub fn predict_normalized(&self, features: &[f64]) -> Result<Vec<f64>> {
        let arch = self.architecture();
        let map = self.output_map();
        let raw = decode_raw(&arch, &self.params, features, &vec![0.0; arch.latent_dim])?;
        Ok(raw
            .iter()
            .enumerate()
            .map(|(i, &o)| map.normalized(i % arch.step_dim, o).0)
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let arch = self.architecture();
        let meta = serde_json::to_vec(&CheckpointMeta {
            config: self.config.clone(),
            normalization: self.normalization.clone(),
        })?;
        let mut buf = Vec::with_capacity(64 + meta.len() + 8 * self.params.values.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&arch.layout().hash());
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.params.values.len() as u64).to_le_bytes());
        for v in &self.params.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Data {
            path: path.to_path_buf(),
            line: 0,
            message: format!("bad checkpoint: {m}"),
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("wrong magic"));
        }
        let hash: [u8; 32] = take(32)?.try_into().expect("32 bytes");
        let meta_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(take(meta_len)?).map_err(|e| bad(&e.to_string()))?;
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let raw = take(8 * n)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        meta.config.validate()?;
        meta.normalization.validate()?;
        let layout = meta.config.architecture().layout();
        if layout.hash() != hash {
            return Err(bad("layout hash does not match the configuration"));
        }
        if values.len() != layout.len {
            return Err(bad("parameter count does not match the layout"));
        }
        let params = PolicyParams { values };
        if !params.is_finite() {
            return Err(bad("non-finite parameters"));
        }
        Ok(Self {
            config: meta.config,
            normalization: meta.normalization,
            params,
        })
    }
}

/// Trains a policy on the retained steps of `demos`. Batches are drawn
/// with replacement from a seeded stream; the run is single-threaded and
/// bit-reproducible. Returns the policy and one log row per step, plus a
/// final row evaluated after the last update.
pub fn train(
    demos: &[&Demonstration],
    normalization: &Normalization,
    config: &PolicyConfig,
) -> Result<(Policy, Vec<LogRow>)> {
    let mut policy = Policy::new(config.clone(), normalization.clone())?;
    let set = TrainingSet::new(demos, normalization, config.chunk_k, config.vision)?;
    let arch = policy.architecture();
    let map = policy.output_map();
    let mut batches = substream(config.seed, "train/batch", 0);
    let mut noise = substream(config.seed, "train/noise", 0);
    let mut adam = Adam::new(config.learning_rate, policy.params.values.len());
    let mut log = Vec::with_capacity(config.train_steps + 1);
    for step in 0..=config.train_steps {
        let rows: Vec<usize> = (0..config.batch_size)
            .map(|_| batches.random_range(0..set.len()))
            .collect();
        let batch = set.batch(&rows);
        let (parts, grad) =
            loss(&arch, &policy.params, &map, &batch, config.beta, &mut noise).map_err(|e| match e {
                Error::NonFiniteLoss(_) => Error::NonFiniteLoss(step),
                e => e,
            })?;
        log.push(LogRow {
            step,
            total: parts.total,
            l1: parts.l1,
            kl: parts.kl,
        });
        if step == config.train_steps {
            break;
        }
        adam.step(&mut policy.params.values, &grad);
        if !policy.params.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
    }
    Ok((policy, log))
}

/// Mean L1 (normalized units) between the policy's chunks and the expert's
/// on every sample of `set`, and the same for a constant chunk equal to the
/// per-coordinate mean of `baseline`.
pub fn held_out_l1(policy: &Policy, set: &TrainingSet, baseline: &TrainingSet) -> Result<(f64, f64)> {
    let d = policy.architecture().chunk_dim();
    let mut mean = vec![0.0; d];
    for i in 0..baseline.len() {
        for (m, v) in mean.iter_mut().zip(baseline.chunk(i)) {
            *m += v / baseline.len() as f64;
        }
    }
    let mut ours = 0.0;
    let mut constant = 0.0;
    for i in 0..set.len() {
        let target = set.chunk(i);
        let pred = policy.predict_normalized(set.features(i))?;
        for j in 0..d {
            ours += (pred[j] - target[j]).abs();
            constant += (mean[j] - target[j]).abs();
        }
    }
    let n = (set.len() * d) as f64;
    Ok((ours / n, constant / n))
}

/// Executes chunks step by step and re-plans at chunk boundaries.
pub struct PolicyAgent<'a> {
    policy: &'a Policy,
    queue: VecDeque<ActionStep>,
}

impl<'a> PolicyAgent<'a> {
    pub fn new(policy: &'a Policy) -> Self {
        Self {
            policy,
            queue: VecDeque::new(),
        }
    }
}

impl Agent for PolicyAgent<'_> {
    fn act(&mut self, obs: &Observation, _world: &SimWorld) -> ActionStep {
        if self.queue.is_empty() {
            self.queue.extend(self.policy.infer(obs).actions);
        }
        self.queue.pop_front().unwrap_or_default()
    }
}
