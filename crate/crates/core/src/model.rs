//! Per-frame scorer trained from clip-level labels.
//!
//! A shared hidden layer `u = tanh(fW₁ + b₁)` feeds two heads: frame
//! probabilities `x = σ(uW₂ + b₂)` and attention weights
//! `w = max(softmax_classes(uWₐ + bₐ), 1e-7)`. Clip probabilities come from
//! the configured [`PoolingSpec`]; the loss is binary cross-entropy summed
//! over classes and averaged over a mini-batch, minimised with Adam.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{grad_hierarchical_with, loss, loss_grad};
use crate::hierarchical::PoolingSpec;
use crate::pooling::{ClipProbability, FrameScores, FrameWeights, PoolingFunction};
use crate::synth::{ClipRecord, Dataset, FrameFeatures};

/// Lower bound on attention weights so no weighted average loses its denominator.
pub const ATTENTION_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
}

impl ScorerShape {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.n_classes == 0 {
            return Err(Error::Config(format!("degenerate scorer shape {self:?}")));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.n_classes);
        d * h + h + 2 * (h * c + c)
    }
}

/// Weights of the `D → H → C` scorer and its `H → C` attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub hidden_w: Array2<f64>,
    pub hidden_b: Array1<f64>,
    pub output_w: Array2<f64>,
    pub output_b: Array1<f64>,
    pub attention_w: Array2<f64>,
    pub attention_b: Array1<f64>,
}

impl ScorerParams {
    pub fn zeros(shape: ScorerShape) -> Result<Self> {
        shape.validate()?;
        let ScorerShape { input_dim: d, hidden_dim: h, n_classes: c } = shape;
        Ok(Self {
            hidden_w: Array2::zeros((d, h)),
            hidden_b: Array1::zeros(h),
            output_w: Array2::zeros((h, c)),
            output_b: Array1::zeros(c),
            attention_w: Array2::zeros((h, c)),
            attention_b: Array1::zeros(c),
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(shape: ScorerShape, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        for w in [&mut p.hidden_w, &mut p.output_w, &mut p.attention_w] {
            let (fan_in, fan_out) = w.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        Ok(p)
    }

    pub fn shape(&self) -> ScorerShape {
        ScorerShape {
            input_dim: self.hidden_w.nrows(),
            hidden_dim: self.hidden_w.ncols(),
            n_classes: self.output_w.ncols(),
        }
    }

    /// Parameters in a fixed order: hidden W, b, output W, b, attention W, b.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.shape().n_params());
        out.extend(self.hidden_w.iter());
        out.extend(self.hidden_b.iter());
        out.extend(self.output_w.iter());
        out.extend(self.output_b.iter());
        out.extend(self.attention_w.iter());
        out.extend(self.attention_b.iter());
        out
    }

    pub fn from_flat(shape: ScorerShape, flat: &[f64]) -> Result<Self> {
        if flat.len() != shape.n_params() {
            return Err(Error::Shape(format!(
                "{} parameters for a scorer needing {}",
                flat.len(),
                shape.n_params()
            )));
        }
        let mut p = Self::zeros(shape)?;
        let mut src = flat.iter().copied();
        for dst in p.tensors_mut() {
            dst.iter_mut().for_each(|d| *d = src.next().expect("length checked"));
        }
        Ok(p)
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.hidden_w.as_slice_mut().expect("standard layout"),
            self.hidden_b.as_slice_mut().expect("standard layout"),
            self.output_w.as_slice_mut().expect("standard layout"),
            self.output_b.as_slice_mut().expect("standard layout"),
            self.attention_w.as_slice_mut().expect("standard layout"),
            self.attention_b.as_slice_mut().expect("standard layout"),
        ]
    }

    fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

struct Activations {
    inputs: Array2<f64>,
    hidden: Array2<f64>,
    scores: Array2<f64>,
    /// Attention softmax before flooring.
    softmax: Array2<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn activate(features: ArrayView2<'_, f32>, params: &ScorerParams) -> Result<Activations> {
    if features.ncols() != params.hidden_w.nrows() {
        return Err(Error::Shape(format!(
            "features have {} dims, scorer expects {}",
            features.ncols(),
            params.hidden_w.nrows()
        )));
    }
    let inputs = features.mapv(f64::from);
    let hidden = (inputs.dot(&params.hidden_w) + &params.hidden_b).mapv(f64::tanh);
    let scores = (hidden.dot(&params.output_w) + &params.output_b).mapv(sigmoid);
    let mut softmax = hidden.dot(&params.attention_w) + &params.attention_b;
    for mut row in softmax.rows_mut() {
        let peak = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - peak).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    Ok(Activations { inputs, hidden, scores, softmax })
}

/// Frame probabilities and pooling weights for one clip.
///
/// Attention weights come from the attention head; every other pooling
/// function derives its weights from the frame probabilities.
pub fn forward(
    features: &FrameFeatures,
    params: &ScorerParams,
    function: PoolingFunction,
    frame_rate_hz: f64,
) -> Result<(FrameScores<f64>, FrameWeights<f64>)> {
    let act = activate(features.values().view(), params)?;
    let scores = FrameScores::new(act.scores, frame_rate_hz)?;
    let weights = match function {
        PoolingFunction::Attention => {
            FrameWeights::new(act.softmax.mapv(|v| v.max(ATTENTION_FLOOR)))?
        }
        f => crate::pooling::compute_weights(&scores, f)?,
    };
    Ok((scores, weights))
}

pub fn predict_frames(
    features: &FrameFeatures,
    params: &ScorerParams,
    frame_rate_hz: f64,
) -> Result<FrameScores<f64>> {
    let act = activate(features.values().view(), params)?;
    FrameScores::new(act.scores, frame_rate_hz)
}

/// Clip probabilities under `spec`.
pub fn predict_clip(
    features: &FrameFeatures,
    params: &ScorerParams,
    spec: &PoolingSpec,
) -> Result<ClipProbability<f64>> {
    let (scores, weights) = forward(features, params, spec.function, 1.0)?;
    let attention = (spec.function == PoolingFunction::Attention).then(|| weights.values().view());
    Ok(ClipProbability::new(spec.pool(scores.values().view(), attention)?))
}

/// Clip loss and its gradient with respect to every parameter.
pub fn clip_loss_and_grad(
    features: &FrameFeatures,
    labels: &[bool],
    params: &ScorerParams,
    spec: &PoolingSpec,
) -> Result<(f64, ScorerParams)> {
    let act = activate(features.values().view(), params)?;
    let scores = FrameScores::new(act.scores.clone(), 1.0)?;
    let weights = match spec.function {
        PoolingFunction::Attention => {
            FrameWeights::new(act.softmax.mapv(|v| v.max(ATTENTION_FLOOR)))?
        }
        f => crate::pooling::compute_weights(&scores, f)?,
    };
    let attention = (spec.function == PoolingFunction::Attention).then(|| weights.values().view());
    let y = ClipProbability::new(spec.pool(scores.values().view(), attention)?);
    let clip_loss = loss(&y, labels)?;
    let d_l_d_y = loss_grad(&y, labels)?.d_l_d_y;
    let pooled =
        grad_hierarchical_with(&scores, &weights, spec.function, &spec.plan, spec.weight_rule)?;

    // through the sigmoid head
    let mut d_z = pooled.d_y_d_x * &d_l_d_y;
    Zip::from(&mut d_z).and(&act.scores).for_each(|g, &x| *g *= x * (1.0 - x));

    let mut grads = ScorerParams::zeros(params.shape())?;
    grads.output_w = act.hidden.t().dot(&d_z);
    grads.output_b = d_z.sum_axis(Axis(0));
    let mut d_hidden = d_z.dot(&params.output_w.t());

    if let Some(d_y_d_w) = pooled.d_y_d_w {
        // through the floor and the class-axis softmax
        let mut d_s = d_y_d_w * &d_l_d_y;
        Zip::from(&mut d_s).and(&act.softmax).for_each(|g, &s| {
            if s < ATTENTION_FLOOR {
                *g = 0.0;
            }
        });
        let mut d_a = Array2::zeros(d_s.dim());
        for ((mut out, g), s) in d_a.rows_mut().into_iter().zip(d_s.rows()).zip(act.softmax.rows()) {
            let inner = g.dot(&s);
            Zip::from(&mut out).and(&g).and(&s).for_each(|o, &g, &s| *o = s * (g - inner));
        }
        grads.attention_w = act.hidden.t().dot(&d_a);
        grads.attention_b = d_a.sum_axis(Axis(0));
        d_hidden = d_hidden + d_a.dot(&params.attention_w.t());
    }

    Zip::from(&mut d_hidden).and(&act.hidden).for_each(|g, &h| *g *= 1.0 - h * h);
    grads.hidden_w = act.inputs.t().dot(&d_hidden);
    grads.hidden_b = d_hidden.sum_axis(Axis(0));
    Ok((clip_loss, grads))
}

pub fn clip_loss(
    features: &FrameFeatures,
    labels: &[bool],
    params: &ScorerParams,
    spec: &PoolingSpec,
) -> Result<f64> {
    loss(&predict_clip(features, params, spec)?, labels)
}

/// Optimiser and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub pooling: PoolingSpec,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Compute per-clip gradients on the rayon pool; reduction order is fixed.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            early_stop_patience: 10,
            max_epochs: 100,
            hidden_dim: 32,
            seed: 0,
            pooling: PoolingSpec::flat(PoolingFunction::LinearSoftmax),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 || self.early_stop_patience == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "batch size, patience and hidden units must be positive".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the settings that determine a trajectory. The epoch budget
    /// and the parallel flag are excluded so a run can be resumed with a
    /// larger budget.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.max_epochs = 0;
        canonical.parallel = false;
        let bytes = serde_json::to_vec(&canonical).expect("config serialises");
        crate::synth::sha256_hex(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grads[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ScorerParams,
    pub best_params: ScorerParams,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl TrainState {
    pub fn fresh(shape: ScorerShape, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ScorerParams::init(shape, &mut rng)?;
        Ok(Self {
            best_params: params.clone(),
            adam: AdamState::new(shape.n_params()),
            params,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
            history: Vec::new(),
            stopped_early: false,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }
}

fn mean_loss(clips: &[ClipRecord], params: &ScorerParams, spec: &PoolingSpec) -> Result<f64> {
    let mut total = 0.0;
    for clip in clips {
        total += clip_loss(&clip.features, &clip.weak_labels, params, spec)?;
    }
    Ok(total / clips.len() as f64)
}

fn check_dataset(dataset: &Dataset) -> Result<usize> {
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::Config("training needs non-empty train and validation splits".into()));
    }
    dataset.feature_dim().ok_or_else(|| Error::Config("dataset has no clips".into()))
}

/// Trains from a fresh initialisation.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    let input_dim = check_dataset(dataset)?;
    let shape = ScorerShape {
        input_dim,
        hidden_dim: config.hidden_dim,
        n_classes: dataset.n_classes(),
    };
    train_from(dataset, config, TrainState::fresh(shape, config.seed)?)
}

/// Continues `state` until early stopping or `config.max_epochs`.
///
/// Each epoch shuffles with its own stream of the seeded generator, so a
/// resumed run replays exactly the batches an uninterrupted run would see.
pub fn train_from(dataset: &Dataset, config: &TrainConfig, mut state: TrainState) -> Result<TrainState> {
    config.validate()?;
    check_dataset(dataset)?;
    if state.params.shape().n_classes != dataset.n_classes() {
        return Err(Error::Shape("checkpoint class count differs from dataset".into()));
    }
    let spec = &config.pooling;
    let n_params = state.params.shape().n_params();
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();

    while state.epochs_done() < config.max_epochs && !state.stopped_early {
        let epoch = state.epochs_done();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let per_clip = |&i: &usize| {
                let clip = &dataset.train[i];
                clip_loss_and_grad(&clip.features, &clip.weak_labels, &state.params, spec)
            };
            let results: Vec<Result<(f64, ScorerParams)>> = if config.parallel {
                batch.par_iter().map(per_clip).collect()
            } else {
                batch.iter().map(per_clip).collect()
            };
            let mut grad_sum = vec![0.0; n_params];
            for r in results {
                let (l, g) = r?;
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("training loss {l} at epoch {epoch}")));
                }
                epoch_loss += l;
                for (acc, v) in grad_sum.iter_mut().zip(g.to_flat()) {
                    *acc += v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad_sum.iter_mut().for_each(|g| *g *= scale);
            let mut flat = state.params.to_flat();
            state.adam.update(&mut flat, &grad_sum, config);
            state.params = ScorerParams::from_flat(state.params.shape(), &flat)?;
            if !state.params.is_finite() {
                return Err(Error::NonFinite(format!("parameters diverged at epoch {epoch}")));
            }
        }

        let val_loss = mean_loss(&dataset.val, &state.params, spec)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        state.history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / dataset.train.len() as f64,
            val_loss,
        });
        if val_loss < state.best_val_loss {
            state.best_val_loss = val_loss;
            state.best_params = state.params.clone();
            state.best_epoch = epoch;
            state.epochs_since_best = 0;
        } else {
            state.epochs_since_best += 1;
            if state.epochs_since_best >= config.early_stop_patience {
                state.stopped_early = true;
            }
        }
    }
    Ok(state)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    shape: ScorerShape,
    config_hash: String,
    config: TrainConfig,
    /// Payload sections in order, each a run of little-endian f64 values.
    sections: Vec<(String, usize)>,
    adam_step: u64,
    best_val_loss: Option<f64>,
    best_epoch: usize,
    epochs_since_best: usize,
    stopped_early: bool,
    history: Vec<EpochRecord>,
}

const CHECKPOINT_FORMAT: &str = "milpool-checkpoint";

/// One JSON header line, then the payload as little-endian `f64`s.
pub fn encode_checkpoint(state: &TrainState, config: &TrainConfig) -> Result<Vec<u8>> {
    let shape = state.params.shape();
    let sections: Vec<(&str, Vec<f64>)> = vec![
        ("best_params", state.best_params.to_flat()),
        ("params", state.params.to_flat()),
        ("adam_m", state.adam.m.clone()),
        ("adam_v", state.adam.v.clone()),
    ];
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        shape,
        config_hash: config.fingerprint(),
        config: config.clone(),
        sections: sections.iter().map(|(n, v)| ((*n).to_string(), v.len())).collect(),
        adam_step: state.adam.step,
        best_val_loss: state.best_val_loss.is_finite().then_some(state.best_val_loss),
        best_epoch: state.best_epoch,
        epochs_since_best: state.epochs_since_best,
        stopped_early: state.stopped_early,
        history: state.history.clone(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, values) in &sections {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TrainState, TrainConfig)> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Malformed("checkpoint header missing".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Malformed(format!("checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(Error::Malformed(format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    if header.config.fingerprint() != header.config_hash {
        return Err(Error::Checksum("checkpoint config".into()));
    }
    let payload = &bytes[split + 1..];
    let expected: usize = header.sections.iter().map(|(_, n)| n * 8).sum();
    if payload.len() != expected {
        return Err(Error::Malformed(format!(
            "checkpoint payload has {} bytes, header promises {expected}",
            payload.len()
        )));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut section = |name: &str| -> Result<Vec<f64>> {
        let len = header
            .sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, len)| *len)
            .ok_or_else(|| Error::Malformed(format!("checkpoint lacks section {name}")))?;
        Ok(values.by_ref().take(len).collect())
    };
    let best = section("best_params")?;
    let current = section("params")?;
    let m = section("adam_m")?;
    let v = section("adam_v")?;
    let shape = header.shape;
    if m.len() != shape.n_params() || v.len() != shape.n_params() {
        return Err(Error::Malformed("optimizer state does not match parameter count".into()));
    }
    let state = TrainState {
        params: ScorerParams::from_flat(shape, &current)?,
        best_params: ScorerParams::from_flat(shape, &best)?,
        best_val_loss: header.best_val_loss.unwrap_or(f64::INFINITY),
        best_epoch: header.best_epoch,
        epochs_since_best: header.epochs_since_best,
        adam: AdamState { step: header.adam_step, m, v },
        history: header.history,
        stopped_early: header.stopped_early,
    };
    Ok((state, header.config))
}

pub fn write_checkpoint(path: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    fs::write(path, encode_checkpoint(state, config)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    decode_checkpoint(&fs::read(path)?)
}
