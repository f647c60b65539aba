//! Restricted Boltzmann machines stacked into a deep belief network.
//!
//! Each [`RbmLayer`] holds weights `W` (hidden x visible), a visible bias `b`
//! and a hidden bias `c`, with energy `E(v, h) = -bᵀv - cᵀh - hᵀWv`. Layers are
//! pretrained greedily with contrastive divergence, then the stack is used as
//! a feed-forward sigmoid network whose last layer has one unit per class and
//! is fine-tuned by backpropagation of the softmax cross-entropy.
//!
//! The last layer's pre-activations `z` feed two consumers: `softmax(z)` is
//! the class distribution ([`DbnModel::predict_proba`]) and `sigmoid(z)` is the
//! projection used as dictionary material ([`DbnModel::project`]).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numerics::{axpy, dot, sigmoid, softmax, Matrix, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbmLayer {
    /// `hidden x visible`
    pub weights: Matrix,
    pub visible_bias: Vec<f64>,
    pub hidden_bias: Vec<f64>,
}

impl RbmLayer {
    pub fn zeros(visible: usize, hidden: usize) -> Self {
        Self {
            weights: Matrix::zeros(hidden, visible),
            visible_bias: vec![0.0; visible],
            hidden_bias: vec![0.0; hidden],
        }
    }

    /// Weights uniform in `±sqrt(6 / (visible + hidden))`, biases zero.
    pub fn random(visible: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let bound = (6.0 / (visible + hidden) as f64).sqrt();
        let mut layer = Self::zeros(visible, hidden);
        for w in layer.weights.data_mut() {
            *w = rng.uniform(-bound, bound);
        }
        layer
    }

    pub fn n_visible(&self) -> usize {
        self.visible_bias.len()
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden_bias.len()
    }

    /// `W v + c`
    pub fn hidden_pre_activation(&self, v: &[f64]) -> Vec<f64> {
        let mut z = self.hidden_bias.clone();
        for (zi, row) in z.iter_mut().zip(0..self.n_hidden()) {
            *zi += dot(self.weights.row(row), v);
        }
        z
    }

    /// `p(h = 1 | v) = sigmoid(W v + c)`
    pub fn hidden_probs(&self, v: &[f64]) -> Vec<f64> {
        self.hidden_pre_activation(v).into_iter().map(sigmoid).collect()
    }

    /// `p(v = 1 | h) = sigmoid(Wᵀ h + b)`
    pub fn visible_probs(&self, h: &[f64]) -> Vec<f64> {
        let mut z = self.visible_bias.clone();
        for (j, &hj) in h.iter().enumerate() {
            axpy(hj, self.weights.row(j), &mut z);
        }
        z.into_iter().map(sigmoid).collect()
    }

    fn is_finite(&self) -> bool {
        self.weights.data().iter().chain(&self.visible_bias).chain(&self.hidden_bias).all(|x| x.is_finite())
    }
}

/// `-bᵀv - cᵀh - hᵀWv`
pub fn energy(layer: &RbmLayer, v: &[f64], h: &[f64]) -> Result<f64> {
    if v.len() != layer.n_visible() {
        return Err(Error::DimensionMismatch { expected: layer.n_visible(), actual: v.len() });
    }
    if h.len() != layer.n_hidden() {
        return Err(Error::DimensionMismatch { expected: layer.n_hidden(), actual: h.len() });
    }
    let wv = layer.weights.matvec(v)?;
    Ok(-dot(&layer.visible_bias, v) - dot(&layer.hidden_bias, h) - dot(h, &wv))
}

fn check_visible(v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch { expected, actual: v.len() });
    }
    if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::UnnormalizedVisible);
    }
    Ok(())
}

/// One contrastive-divergence update on a minibatch.
///
/// Hidden states are sampled on every up-pass that drives the Gibbs chain;
/// visible reconstructions are kept as probabilities. Both the data and the
/// reconstruction statistics use hidden probabilities. The update is
/// `lr · (⟨v hᵀ⟩_data − ⟨v hᵀ⟩_k)` averaged over the batch, and likewise for
/// the biases.
pub fn cd_step(layer: &RbmLayer, batch: &[&[f64]], k: usize, lr: f64, rng: &mut RngStream) -> Result<RbmLayer> {
    let (nv, nh) = (layer.n_visible(), layer.n_hidden());
    for v in batch {
        check_visible(v, nv)?;
    }
    if batch.is_empty() || k == 0 {
        return Ok(layer.clone());
    }

    let mut dw = Matrix::zeros(nh, nv);
    let mut db = vec![0.0; nv];
    let mut dc = vec![0.0; nh];
    for &v0 in batch {
        let ph0 = layer.hidden_probs(v0);
        let mut h: Vec<f64> = ph0.iter().map(|&p| if rng.bernoulli(p) { 1.0 } else { 0.0 }).collect();
        let mut vk = Vec::new();
        let mut phk = Vec::new();
        for step in 0..k {
            vk = layer.visible_probs(&h);
            phk = layer.hidden_probs(&vk);
            if step + 1 < k {
                h = phk.iter().map(|&p| if rng.bernoulli(p) { 1.0 } else { 0.0 }).collect();
            }
        }
        for j in 0..nh {
            let row = dw.row_mut(j);
            for i in 0..nv {
                row[i] += ph0[j] * v0[i] - phk[j] * vk[i];
            }
            dc[j] += ph0[j] - phk[j];
        }
        for i in 0..nv {
            db[i] += v0[i] - vk[i];
        }
    }

    let step = lr / batch.len() as f64;
    let mut out = layer.clone();
    axpy(step, dw.data(), out.weights.data_mut());
    axpy(step, &db, &mut out.visible_bias);
    axpy(step, &dc, &mut out.hidden_bias);
    if !out.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(out)
}

/// Mean binary cross-entropy between inputs and their mean-field
/// reconstructions `sigmoid(Wᵀ sigmoid(W v + c) + b)`.
pub fn reconstruction_cross_entropy(layer: &RbmLayer, data: &[&[f64]]) -> f64 {
    const EPS: f64 = 1e-12;
    if data.is_empty() {
        return 0.0;
    }
    let total: f64 = data
        .iter()
        .map(|v| {
            let r = layer.visible_probs(&layer.hidden_probs(v));
            v.iter()
                .zip(&r)
                .map(|(&x, &p)| -(x * p.max(EPS).ln() + (1.0 - x) * (1.0 - p).max(EPS).ln()))
                .sum::<f64>()
        })
        .sum();
    total / data.len() as f64
}

/// Runs `epochs` passes of minibatch CD-k over `data`.
pub fn train_rbm(
    layer: &RbmLayer,
    data: &[&[f64]],
    epochs: usize,
    k: usize,
    lr: f64,
    minibatch: usize,
    rng: &mut RngStream,
) -> Result<RbmLayer> {
    let mut layer = layer.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch: Vec<&[f64]> = Vec::with_capacity(minibatch);
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(minibatch.max(1)) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i]));
            layer = cd_step(&layer, &batch, k, lr, rng)?;
        }
    }
    Ok(layer)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub cd_k: usize,
    pub epochs_unsup: usize,
    pub epochs_bp: usize,
    /// Contrastive-divergence step size.
    pub learning_rate: f64,
    /// Backpropagation step size.
    pub bp_learning_rate: f64,
    pub minibatch: usize,
    /// Widths of every hidden layer; the last entry is the class count.
    pub hidden_widths: Vec<usize>,
    pub seed: u64,
}

impl TrainConfig {
    /// Four hidden layers `[40, 30, 20, classes]`.
    pub fn for_classes(classes: usize) -> Self {
        Self {
            cd_k: 1,
            epochs_unsup: 50,
            epochs_bp: 300,
            learning_rate: 0.05,
            bp_learning_rate: 1.0,
            minibatch: 32,
            hidden_widths: vec![40, 30, 20, classes],
            seed: 0,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.hidden_widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("cd_k", self.cd_k), ("minibatch", self.minibatch)] {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::config("hidden_widths", "need at least one layer, all widths >= 1"));
        }
        for (key, v) in [("learning_rate", self.learning_rate), ("bp_learning_rate", self.bp_learning_rate)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a positive finite number"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_unsup: usize,
    pub epochs_bp: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbnModel {
    pub layers: Vec<RbmLayer>,
    pub meta: TrainingMeta,
}

/// Per-layer gradients of the fine-tuning loss; visible biases do not enter
/// the feed-forward pass and have no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Matrix>,
    pub hidden_bias: Vec<Vec<f64>>,
}

impl DbnModel {
    /// Freshly initialized stack for `n_inputs` inputs; layer `l` draws from
    /// substream `l` of `cfg.seed`.
    pub fn random(n_inputs: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let root = RngStream::new(cfg.seed);
        let mut layers = Vec::with_capacity(cfg.hidden_widths.len());
        let mut visible = n_inputs;
        for (l, &hidden) in cfg.hidden_widths.iter().enumerate() {
            layers.push(RbmLayer::random(visible, hidden, &mut root.split(l as u64)));
            visible = hidden;
        }
        let model = Self { layers, meta: TrainingMeta { seed: cfg.seed, learning_rate: cfg.learning_rate, ..Default::default() } };
        model.check_shape()?;
        Ok(model)
    }

    pub fn n_inputs(&self) -> usize {
        self.layers.first().map_or(0, RbmLayer::n_visible)
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().map_or(0, RbmLayer::n_hidden)
    }

    pub fn n_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.data().len() + l.hidden_bias.len()).sum()
    }

    pub fn check_shape(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Invariant("model has no layers".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].n_hidden() != pair[1].n_visible() {
                return Err(Error::DimensionMismatch { expected: pair[0].n_hidden(), actual: pair[1].n_visible() });
            }
        }
        for l in &self.layers {
            if l.weights.rows() != l.n_hidden() || l.weights.cols() != l.n_visible() {
                return Err(Error::Invariant("layer weight shape disagrees with its biases".into()));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_inputs() {
            return Err(Error::DimensionMismatch { expected: self.n_inputs(), actual: x.len() });
        }
        Ok(())
    }

    /// Sigmoid activations of every layer plus the last layer's pre-activation.
    fn forward(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.hidden_pre_activation(&acts[l]);
            if l == last {
                acts.push(z.iter().map(|&v| sigmoid(v)).collect());
                return (acts, z);
            }
            acts.push(z.into_iter().map(sigmoid).collect());
        }
        unreachable!("model has at least one layer")
    }

    /// Pre-activations of the class layer.
    pub fn class_scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward(x).1)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        softmax(&self.class_scores(x)?)
    }

    /// Last-layer sigmoid activations (the `C`-dimensional projection).
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let (mut acts, _) = self.forward(x);
        Ok(acts.pop().expect("output activation"))
    }

    /// Most probable class id in `1..=C` (lowest id on ties).
    pub fn predict(&self, x: &[f64]) -> Result<u16> {
        Ok(argmax(&self.class_scores(x)?) as u16 + 1)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_data(data: &Matrix, n_inputs: usize) -> Result<()> {
    if data.cols() != n_inputs {
        return Err(Error::DimensionMismatch { expected: n_inputs, actual: data.cols() });
    }
    if data.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::UnnormalizedVisible);
    }
    Ok(())
}

/// Greedy layer-wise CD pretraining. Layer `l` is trained on the mean-field
/// hidden probabilities produced by layers `0..l`.
pub fn pretrain_stack(data: &Matrix, cfg: &TrainConfig) -> Result<DbnModel> {
    let mut model = DbnModel::random(data.cols(), cfg)?;
    check_data(data, model.n_inputs())?;
    model.meta.epochs_unsup = cfg.epochs_unsup;
    if cfg.epochs_unsup == 0 || data.rows() == 0 {
        return Ok(model);
    }
    let root = RngStream::new(cfg.seed).split(u64::MAX);
    let mut inputs: Vec<Vec<f64>> = (0..data.rows()).map(|i| data.row(i).to_vec()).collect();
    for l in 0..model.layers.len() {
        let views: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        let mut rng = root.split(l as u64);
        model.layers[l] =
            train_rbm(&model.layers[l], &views, cfg.epochs_unsup, cfg.cd_k, cfg.learning_rate, cfg.minibatch, &mut rng)?;
        if l + 1 < model.layers.len() {
            inputs = inputs.iter().map(|v| model.layers[l].hidden_probs(v)).collect();
        }
    }
    Ok(model)
}

fn check_labels(labels: &[u16], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l as usize > classes) {
        return Err(Error::LabelOutOfRange { label: bad as usize, classes });
    }
    Ok(())
}

/// Mean softmax cross-entropy over the rows `idx` of `features` and its gradient.
fn batch_gradient(model: &DbnModel, features: &Matrix, labels: &[u16], idx: &[usize]) -> (f64, Gradient) {
    let mut grad = Gradient {
        weights: model.layers.iter().map(|l| Matrix::zeros(l.n_hidden(), l.n_visible())).collect(),
        hidden_bias: model.layers.iter().map(|l| vec![0.0; l.n_hidden()]).collect(),
    };
    let scale = 1.0 / idx.len() as f64;
    let mut loss = 0.0;
    let last = model.layers.len() - 1;
    for &i in idx {
        let (acts, z) = model.forward(features.row(i));
        let p = softmax(&z).expect("non-empty class layer");
        let y = labels[i] as usize - 1;
        loss -= p[y].max(f64::MIN_POSITIVE).ln() * scale;

        let mut delta: Vec<f64> = p.iter().enumerate().map(|(c, &pc)| (pc - if c == y { 1.0 } else { 0.0 }) * scale).collect();
        for l in (0..=last).rev() {
            let input = &acts[l];
            let gw = &mut grad.weights[l];
            for (j, &dj) in delta.iter().enumerate() {
                axpy(dj, input, gw.row_mut(j));
            }
            axpy(1.0, &delta, &mut grad.hidden_bias[l]);
            if l == 0 {
                break;
            }
            let back = model.layers[l].weights.transpose_matvec(&delta).expect("chained shapes");
            delta = back.iter().zip(input).map(|(b, a)| b * a * (1.0 - a)).collect();
        }
    }
    (loss, grad)
}

/// Mean softmax cross-entropy of the whole labeled set and its gradient.
pub fn loss_and_gradient(model: &DbnModel, features: &Matrix, labels: &[u16]) -> Result<(f64, Gradient)> {
    model.check_shape()?;
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), actual: features.rows() });
    }
    if features.cols() != model.n_inputs() {
        return Err(Error::DimensionMismatch { expected: model.n_inputs(), actual: features.cols() });
    }
    check_labels(labels, model.n_classes())?;
    let idx: Vec<usize> = (0..labels.len()).collect();
    Ok(batch_gradient(model, features, labels, &idx))
}

/// Minibatch gradient descent on the softmax cross-entropy for
/// `cfg.epochs_bp` epochs, with sample order shuffled from `cfg.seed`.
pub fn fine_tune(model: &DbnModel, features: &Matrix, labels: &[u16], cfg: &TrainConfig) -> Result<DbnModel> {
    cfg.validate()?;
    model.check_shape()?;
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), actual: features.rows() });
    }
    if features.cols() != model.n_inputs() {
        return Err(Error::DimensionMismatch { expected: model.n_inputs(), actual: features.cols() });
    }
    check_labels(labels, model.n_classes())?;

    let mut model = model.clone();
    let mut rng = RngStream::new(cfg.seed).split(0xF1E7);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..cfg.epochs_bp {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.minibatch) {
            let (_, grad) = batch_gradient(&model, features, labels, chunk);
            for (layer, (gw, gc)) in model.layers.iter_mut().zip(grad.weights.iter().zip(&grad.hidden_bias)) {
                axpy(-cfg.bp_learning_rate, gw.data(), layer.weights.data_mut());
                axpy(-cfg.bp_learning_rate, gc, &mut layer.hidden_bias);
            }
        }
        if !model.layers.iter().all(RbmLayer::is_finite) {
            return Err(Error::NonFinite);
        }
    }
    model.meta.epochs_bp += cfg.epochs_bp;
    Ok(model)
}

const MAGIC: &[u8; 8] = b"HSALDBN1";

/// Serializes the layer stack: magic `HSALDBN1`, `u32` layer count, then per
/// layer `u32` visible and hidden sizes followed by `W` (row-major), `b`, `c`
/// as `f64`. All integers and floats little-endian.
pub fn encode_checkpoint(model: &DbnModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for layer in &model.layers {
        out.extend_from_slice(&(layer.n_visible() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.n_hidden() as u32).to_le_bytes());
        for v in layer.weights.data().iter().chain(&layer.visible_bias).chain(&layer.hidden_bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DbnModel> {
    let bad = |reason: &str| Error::format("checkpoint", reason);
    let mut rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| bad("missing HSALDBN1 magic"))?;
    let mut take = |n: usize| -> Result<&[u8]> {
        if rest.len() < n {
            return Err(bad("truncated"));
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head)
    };
    let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;

    let count = read_u32(take(4)?);
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let visible = read_u32(take(4)?);
        let hidden = read_u32(take(4)?);
        let n = hidden
            .checked_mul(visible)
            .and_then(|w| w.checked_add(visible + hidden))
            .ok_or_else(|| bad("layer too large"))?;
        let raw = take(n.checked_mul(8).ok_or_else(|| bad("layer too large"))?)?;
        let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let (w, biases) = vals.split_at(hidden * visible);
        layers.push(RbmLayer {
            weights: Matrix::new(hidden, visible, w.to_vec())?,
            visible_bias: biases[..visible].to_vec(),
            hidden_bias: biases[visible..].to_vec(),
        });
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let model = DbnModel { layers, meta: TrainingMeta::default() };
    model.check_shape()?;
    Ok(model)
}

pub fn save_checkpoint(model: &DbnModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<DbnModel> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
