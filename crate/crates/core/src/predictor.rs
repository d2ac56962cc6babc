//! Feedforward ReLU network `θ ↦ ẑ` trained with Adam on the mean unrolled
//! fixed-point residual.
//!
//! # Model file format
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size      field
//! 0       8         magic  b"DRWSMODL"
//! 8       4         u32 format version (currently 1)
//! 12      4         u32 metadata length L
//! 16      L         metadata, UTF-8 JSON (ModelMeta)
//! ..      1         u8 normalization flag (0 or 1)
//! ..      16·d      if flag = 1: d f64 means, then d f64 stds
//! ..      4         u32 layer count
//!                   per layer: u32 rows, u32 cols, rows·cols f64 weights
//!                   (row-major), rows f64 biases
//! ..      32        SHA-256 of every preceding byte
//! ```

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dr::{solve, SolveSettings, HIGH_ACCURACY_TOL};
use crate::error::{Error, Result};
use crate::linalg::{check_len, DenseMatrix};
use crate::qp::{LcpSystem, ParametricFamily};
use crate::unroll::{backward, forward_tape, MIN_DIFFERENTIABLE_LOSS};

pub const MODEL_MAGIC: &[u8; 8] = b"DRWSMODL";
pub const MODEL_VERSION: u32 = 1;
/// Floor applied to per-coordinate standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Per-coordinate mean and population standard deviation.
    pub fn fit(thetas: &[Vec<f64>]) -> Result<Self> {
        let first = thetas
            .first()
            .ok_or_else(|| Error::InvalidData("no samples to normalize".into()))?;
        let d = first.len();
        let count = thetas.len() as f64;
        let mut mean = vec![0.0; d];
        for th in thetas {
            check_len(d, th.len())?;
            for (m, x) in mean.iter_mut().zip(th) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; d];
        for th in thetas {
            for j in 0..d {
                let dx = th[j] - mean[j];
                var[j] += dx * dx;
            }
        }
        let std = var
            .iter()
            .map(|v| (v / count).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub family: String,
    pub k: usize,
    pub seed: u64,
    pub theta_dim: usize,
    pub output_dim: usize,
    /// Biases are held at zero when false.
    pub bias: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorModel {
    pub layers: Vec<Layer>,
    pub normalization: Option<Normalization>,
    pub meta: ModelMeta,
}

/// Per-layer gradients, aligned with [`PredictorModel::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradient {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
}

impl ModelGradient {
    pub fn zeros_like(model: &PredictorModel) -> Self {
        Self {
            weights: model
                .layers
                .iter()
                .map(|l| DenseMatrix::zeros(l.output_dim(), l.input_dim()))
                .collect(),
            biases: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.output_dim()])
                .collect(),
        }
    }

    /// Flattened in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }
}

impl PredictorModel {
    /// Uniform `±sqrt(6/fan_in)` weights and zero biases.
    pub fn init(theta_dim: usize, output_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![theta_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = if fan_in > 0 {
                    (6.0 / fan_in as f64).sqrt()
                } else {
                    0.0
                };
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-limit..=limit))
                    .collect();
                Layer {
                    weights: DenseMatrix::from_row_major(fan_out, fan_in, data)
                        .expect("finite init"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Self {
            layers,
            normalization: None,
            meta: ModelMeta {
                family: String::new(),
                k: 0,
                seed,
                theta_dim,
                output_dim,
                bias: true,
                config_digest: None,
            },
        }
    }

    pub fn theta_dim(&self) -> usize {
        self.meta.theta_dim
    }

    pub fn output_dim(&self) -> usize {
        self.meta.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Overwrites all parameters from a flat vector in [`flatten`](Self::flatten) order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len(self.param_count(), flat.len())?;
        let mut at = 0;
        for l in &mut self.layers {
            let (r, c) = (l.output_dim(), l.input_dim());
            l.weights = DenseMatrix::from_row_major(r, c, flat[at..at + r * c].to_vec())?;
            at += r * c;
            l.bias.copy_from_slice(&flat[at..at + r]);
            at += r;
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let mut dim = self.meta.theta_dim;
        for l in &self.layers {
            check_len(dim, l.input_dim())?;
            check_len(l.output_dim(), l.bias.len())?;
            dim = l.output_dim();
        }
        check_len(self.meta.output_dim, dim)?;
        if let Some(norm) = &self.normalization {
            check_len(self.meta.theta_dim, norm.mean.len())?;
            check_len(self.meta.theta_dim, norm.std.len())?;
        }
        Ok(())
    }

    fn input(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.meta.theta_dim {
            return Err(Error::BadParameterDimension {
                expected: self.meta.theta_dim,
                found: theta.len(),
            });
        }
        Ok(match &self.normalization {
            Some(n) => n.apply(theta),
            None => theta.to_vec(),
        })
    }

    /// Layer inputs `y_0, …, y_L` and the output.
    fn forward_cached(&self, theta: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut y = self.input(theta)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            let mut out = l.weights.matvec(&y)?;
            for (o, b) in out.iter_mut().zip(&l.bias) {
                *o += b;
                if i < last && *o < 0.0 {
                    *o = 0.0;
                }
            }
            inputs.push(std::mem::replace(&mut y, out));
        }
        Ok((inputs, y))
    }

    pub fn predict(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(theta)?.1)
    }

    /// Gradient of `upstreamᵀ ẑ(θ)` with respect to every weight and bias.
    pub fn backward(&self, theta: &[f64], upstream: &[f64]) -> Result<ModelGradient> {
        check_len(self.meta.output_dim, upstream.len())?;
        let (inputs, _) = self.forward_cached(theta)?;
        let mut grad = ModelGradient::zeros_like(self);
        let mut delta = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let y = &inputs[i];
            let l = &self.layers[i];
            let (rows, cols) = (l.output_dim(), l.input_dim());
            let mut gw = vec![0.0; rows * cols];
            for r in 0..rows {
                let dr = delta[r];
                if dr != 0.0 {
                    for c in 0..cols {
                        gw[r * cols + c] = dr * y[c];
                    }
                }
            }
            grad.weights[i] = DenseMatrix::from_row_major(rows, cols, gw)?;
            if self.meta.bias {
                grad.biases[i] = delta.clone();
            }
            if i > 0 {
                // y is the rectified output of layer i-1; y_c = 0 iff the
                // pre-activation was ≤ 0, where the subderivative is taken as 0.
                let mut next = l.weights.matvec_t(&delta)?;
                for (g, &yc) in next.iter_mut().zip(y) {
                    if yc <= 0.0 {
                        *g = 0.0;
                    }
                }
                delta = next;
            }
        }
        Ok(grad)
    }
}

pub fn nn_backward(
    model: &PredictorModel,
    theta: &[f64],
    upstream: &[f64],
) -> Result<ModelGradient> {
    model.backward(theta, upstream)
}

pub fn predict(model: &PredictorModel, theta: &[f64]) -> Result<Vec<f64>> {
    model.predict(theta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub normalize: bool,
    pub bias: bool,
    pub pretrain: bool,
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 5,
            epochs: 200,
            batch_size: 0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            hidden: vec![100, 100],
            normalize: true,
            bias: true,
            pretrain: false,
            pretrain_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidData("k must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidData(format!(
                "learning rate {} is invalid",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidData(
                "Adam moment decays must lie in [0, 1)".into(),
            ));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidData("Adam epsilon must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidData(
                "hidden layer widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    /// `None` when no held-out set was given.
    pub holdout_loss: Vec<Option<f64>>,
    pub epoch_seconds: Vec<f64>,
    /// Mean squared error per pretraining epoch.
    pub pretrain_loss: Vec<f64>,
}

/// Adam over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(params: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

fn batches(count: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if batch_size == 0 || batch_size >= count {
        return vec![(0..count).collect()];
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|c| {
            let mut b = c.to_vec();
            b.sort_unstable();
            b
        })
        .collect()
}

fn wrap(index: usize, e: Error) -> Error {
    Error::Sample {
        index,
        source: Box::new(e),
    }
}

/// `ℓ(T^k(ẑ(θ)))` without gradients.
pub fn unrolled_loss(
    model: &PredictorModel,
    sys: &LcpSystem,
    theta: &[f64],
    k: usize,
) -> Result<f64> {
    let z0 = model.predict(theta)?;
    Ok(crate::dr::run_k(sys, &z0, k)?.1)
}

/// Mean unrolled loss over a set of parameters.
pub fn empirical_risk(
    model: &PredictorModel,
    family: &ParametricFamily,
    thetas: &[Vec<f64>],
    k: usize,
) -> Result<f64> {
    if thetas.is_empty() {
        return Err(Error::InvalidData("empty sample set".into()));
    }
    let mut total = 0.0;
    for (i, th) in thetas.iter().enumerate() {
        let sys = family.lcp(th).map_err(|e| wrap(i, e))?;
        total += unrolled_loss(model, &sys, th, k).map_err(|e| wrap(i, e))?;
    }
    Ok(total / thetas.len() as f64)
}

/// Loss and accumulated parameter gradient for one sample.
fn sample_gradient(
    model: &PredictorModel,
    sys: &LcpSystem,
    theta: &[f64],
    k: usize,
    acc: &mut [f64],
    scale: f64,
) -> Result<f64> {
    let z0 = model.predict(theta)?;
    let (tape, _, loss) = forward_tape(sys, &z0, k)?;
    if loss <= MIN_DIFFERENTIABLE_LOSS {
        return Ok(loss);
    }
    let gz = backward(sys, &tape)?;
    let g = model.backward(theta, &gz)?.flatten();
    for (a, gi) in acc.iter_mut().zip(&g) {
        *a += scale * gi;
    }
    Ok(loss)
}

/// Builds an untrained model for `family` according to `cfg`.
pub fn init_model(
    family: &ParametricFamily,
    thetas: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<PredictorModel> {
    let out_dim = family.fixed_p().rows() + family.fixed_a().rows();
    let mut model = PredictorModel::init(family.theta_dim(), out_dim, &cfg.hidden, cfg.seed);
    model.meta.family = family.id.clone();
    model.meta.k = cfg.k;
    model.meta.bias = cfg.bias;
    if cfg.normalize {
        model.normalization = Some(Normalization::fit(thetas)?);
    }
    Ok(model)
}

/// High-accuracy fixed points used as pretraining targets.
pub fn fixed_point_targets(
    family: &ParametricFamily,
    thetas: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let settings = SolveSettings::with_tol(HIGH_ACCURACY_TOL, 100_000);
    thetas
        .iter()
        .enumerate()
        .map(|(i, th)| {
            let sys = family.lcp(th).map_err(|e| wrap(i, e))?;
            let z0 = vec![0.0; sys.dim()];
            Ok(solve(&sys, &z0, &settings).map_err(|e| wrap(i, e))?.z)
        })
        .collect()
}

/// Regression onto `targets` with mean squared error `(1/N) Σ‖h(θᵢ) − z̄ᵢ‖²`.
/// Returns the per-epoch loss (measured before each epoch's updates, averaged over batches).
pub fn pretrain(
    model: &mut PredictorModel,
    thetas: &[Vec<f64>],
    targets: &[Vec<f64>],
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_len(thetas.len(), targets.len())?;
    if thetas.is_empty() {
        return Err(Error::InvalidData("empty training set".into()));
    }
    model.validate()?;
    let mut adam = Adam::new(model.param_count(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5052_4554);
    let mut history = Vec::with_capacity(epochs);
    let mut params = model.flatten();
    for _ in 0..epochs {
        let mut epoch_loss = 0.0;
        for batch in batches(thetas.len(), cfg.batch_size, &mut rng) {
            let scale = 1.0 / batch.len() as f64;
            let mut acc = vec![0.0; params.len()];
            for &i in &batch {
                check_len(model.output_dim(), targets[i].len())?;
                let out = model.predict(&thetas[i]).map_err(|e| wrap(i, e))?;
                let diff: Vec<f64> = out.iter().zip(&targets[i]).map(|(o, t)| o - t).collect();
                epoch_loss += diff.iter().map(|d| d * d).sum::<f64>();
                let up: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
                let g = model.backward(&thetas[i], &up)?.flatten();
                for (a, gi) in acc.iter_mut().zip(&g) {
                    *a += scale * gi;
                }
            }
            adam.step(&mut params, &acc);
            model.set_flat(&params)?;
        }
        history.push(epoch_loss / thetas.len() as f64);
    }
    Ok(history)
}

/// Trains a fresh model on `thetas`, tracking the held-out loss each epoch.
pub fn train(
    family: &ParametricFamily,
    thetas: &[Vec<f64>],
    holdout: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<(PredictorModel, TrainHistory)> {
    cfg.validate()?;
    if thetas.is_empty() {
        return Err(Error::InvalidData("empty training set".into()));
    }
    let mut model = init_model(family, thetas, cfg)?;
    let mut history = TrainHistory::default();
    if cfg.pretrain && cfg.pretrain_epochs > 0 {
        let targets = fixed_point_targets(family, thetas)?;
        history.pretrain_loss = pretrain(&mut model, thetas, &targets, cfg.pretrain_epochs, cfg)?;
    }
    let h = train_from(&mut model, family, thetas, holdout, cfg)?;
    history.train_loss = h.train_loss;
    history.holdout_loss = h.holdout_loss;
    history.epoch_seconds = h.epoch_seconds;
    Ok((model, history))
}

/// Continues training an existing model.
///
/// The per-epoch train loss is the mean over samples of the loss evaluated
/// just before that sample's batch update; with a full batch it is exactly
/// the empirical risk of the model at the start of the epoch.
pub fn train_from(
    model: &mut PredictorModel,
    family: &ParametricFamily,
    thetas: &[Vec<f64>],
    holdout: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    model.validate()?;
    let systems: Vec<LcpSystem> = thetas
        .iter()
        .enumerate()
        .map(|(i, th)| family.lcp(th).map_err(|e| wrap(i, e)))
        .collect::<Result<_>>()?;
    let holdout_systems: Vec<LcpSystem> = holdout
        .iter()
        .enumerate()
        .map(|(i, th)| family.lcp(th).map_err(|e| wrap(i, e)))
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(model.param_count(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5452_4149);
    let mut params = model.flatten();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut epoch_loss = 0.0;
        for batch in batches(thetas.len(), cfg.batch_size, &mut rng) {
            let scale = 1.0 / batch.len() as f64;
            let mut acc = vec![0.0; params.len()];
            for &i in &batch {
                let loss = sample_gradient(model, &systems[i], &thetas[i], cfg.k, &mut acc, scale)
                    .map_err(|e| wrap(i, e))?;
                epoch_loss += loss;
            }
            adam.step(&mut params, &acc);
            model.set_flat(&params)?;
        }
        let train_loss = epoch_loss / thetas.len() as f64;
        let holdout_loss = if holdout.is_empty() {
            None
        } else {
            let mut total = 0.0;
            for (i, (sys, th)) in holdout_systems.iter().zip(holdout).enumerate() {
                total += unrolled_loss(model, sys, th, cfg.k).map_err(|e| wrap(i, e))?;
            }
            Some(total / holdout.len() as f64)
        };
        log::debug!("epoch {epoch}: train {train_loss:.6e} holdout {holdout_loss:?}");
        history.train_loss.push(train_loss);
        history.holdout_loss.push(holdout_loss);
        history.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(history)
}

fn put_u32(buf: &mut Vec<u8>, x: u32) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_model(model: &PredictorModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut buf, MODEL_VERSION);
    let meta = serde_json::to_vec(&model.meta)?;
    put_u32(&mut buf, meta.len() as u32);
    buf.extend_from_slice(&meta);
    match &model.normalization {
        Some(n) => {
            buf.push(1);
            put_f64s(&mut buf, &n.mean);
            put_f64s(&mut buf, &n.std);
        }
        None => buf.push(0),
    }
    put_u32(&mut buf, model.layers.len() as u32);
    for l in &model.layers {
        put_u32(&mut buf, l.output_dim() as u32);
        put_u32(&mut buf, l.input_dim() as u32);
        put_f64s(&mut buf, l.weights.as_slice());
        put_f64s(&mut buf, &l.bias);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptModelFile(format!("truncated at byte {}", self.at)))?;
        let out = &self.buf[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::CorruptModelFile("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<PredictorModel> {
    if bytes.len() < MODEL_MAGIC.len() + 4 + 32 {
        return Err(Error::CorruptModelFile(format!(
            "file is only {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..8] != MODEL_MAGIC {
        return Err(Error::CorruptModelFile("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::CorruptModelFile(format!(
            "unsupported format version {version} (expected {MODEL_VERSION})"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptModelFile("digest mismatch".into()));
    }
    let mut r = Reader { buf: body, at: 12 };
    let meta_len = r.u32()? as usize;
    let meta: ModelMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::CorruptModelFile(format!("metadata: {e}")))?;
    let d = meta.theta_dim;
    let normalization = match r.take(1)?[0] {
        0 => None,
        1 => Some(Normalization {
            mean: r.f64s(d)?,
            std: r.f64s(d)?,
        }),
        other => {
            return Err(Error::CorruptModelFile(format!(
                "bad normalization flag {other}"
            )))
        }
    };
    let count = r.u32()? as usize;
    let mut layers = Vec::new();
    for _ in 0..count {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let w = r.f64s(rows.saturating_mul(cols))?;
        let bias = r.f64s(rows)?;
        let weights = DenseMatrix::from_row_major(rows, cols, w)
            .map_err(|e| Error::CorruptModelFile(e.to_string()))?;
        layers.push(Layer { weights, bias });
    }
    if r.at != body.len() {
        return Err(Error::CorruptModelFile(format!(
            "{} trailing bytes",
            body.len() - r.at
        )));
    }
    let model = PredictorModel {
        layers,
        normalization,
        meta,
    };
    model
        .validate()
        .map_err(|e| Error::CorruptModelFile(e.to_string()))?;
    Ok(model)
}

pub fn save_model(model: &PredictorModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PredictorModel> {
    decode_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> PredictorModel {
        let mut m = PredictorModel::init(3, 4, &[5, 6], 11);
        for l in &mut m.layers {
            for (i, b) in l.bias.iter_mut().enumerate() {
                *b = 0.1 * i as f64 - 0.2;
            }
        }
        m.normalization = Some(Normalization {
            mean: vec![0.5, -1.0, 2.0],
            std: vec![1.5, 0.5, 3.0],
        });
        m
    }

    #[test]
    fn zero_model_outputs_zero() {
        let mut m = PredictorModel::init(3, 2, &[4], 0);
        let zeros = vec![0.0; m.param_count()];
        m.set_flat(&zeros).unwrap();
        assert_eq!(m.predict(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut m = PredictorModel::init(3, 3, &[], 0);
        m.layers[0].weights = DenseMatrix::identity(3);
        let th = [0.3, -4.0, 7.5];
        assert_eq!(m.predict(&th).unwrap(), th.to_vec());
    }

    #[test]
    fn negative_preactivation_is_cut() {
        let mut m = PredictorModel::init(1, 1, &[2], 0);
        m.layers[0].weights = DenseMatrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        m.layers[1].weights = DenseMatrix::from_rows(&[vec![1.0, 10.0]]).unwrap();
        // second hidden unit sees -2 → 0
        assert_eq!(m.predict(&[2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn wrong_theta_dimension() {
        let m = small_model();
        assert!(matches!(
            m.predict(&[1.0]),
            Err(Error::BadParameterDimension {
                expected: 3,
                found: 1
            })
        ));
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let mut m = PredictorModel::init(2, 3, &[], 4);
        m.normalization = Some(Normalization {
            mean: vec![1.0, 2.0],
            std: vec![2.0, 4.0],
        });
        let th = [3.0, -2.0];
        let y = [1.0, -1.0];
        let up = [0.5, -1.0, 2.0];
        let g = m.backward(&th, &up).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                assert_eq!(g.weights[0][(r, c)], up[r] * y[c]);
            }
        }
        assert_eq!(g.biases[0], up.to_vec());
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let m = small_model();
        let g = m.backward(&[1.0, 2.0, 3.0], &[0.0; 4]).unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = small_model();
        let th = [0.7, -0.3, 1.9];
        let up = [0.3, -1.2, 0.8, 0.5];
        let g = m.backward(&th, &up).unwrap().flatten();
        let base = m.flatten();
        let f = |p: &[f64]| {
            let mut mm = m.clone();
            mm.set_flat(p).unwrap();
            mm.predict(&th)
                .unwrap()
                .iter()
                .zip(&up)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        for j in (0..base.len()).step_by(3) {
            let h = 1e-6 * (1.0 + base[j].abs());
            let mut p = base.clone();
            p[j] += h;
            let fp = f(&p);
            p[j] -= 2.0 * h;
            let fm = f(&p);
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - g[j]).abs() / fd.abs().max(1e-6);
            assert!(err <= 1e-5, "param {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn adam_with_zero_rate_is_noop() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(3, &cfg);
        let mut p = vec![1.0, 2.0, 3.0];
        adam.step(&mut p, &[0.5, -0.5, 1.0]);
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_rate() {
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(2, &cfg);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[3.0, -0.25]);
        // bias-corrected first step is lr·g/(|g| + ε)
        assert!((p[0] + 1e-3).abs() < 1e-11);
        assert!((p[1] - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn normalization_floor() {
        let n = Normalization::fit(&[vec![1.0, 2.0], vec![1.0, 4.0]]).unwrap();
        assert_eq!(n.mean, vec![1.0, 3.0]);
        assert_eq!(n.std, vec![STD_FLOOR, 1.0]);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let m = small_model();
        let bytes = encode_model(&m).unwrap();
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files() {
        let bytes = encode_model(&small_model()).unwrap();
        assert!(matches!(
            decode_model(&bytes[..bytes.len() - 5]),
            Err(Error::CorruptModelFile(_))
        ));
        assert!(matches!(
            decode_model(&bytes[..10]),
            Err(Error::CorruptModelFile(_))
        ));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(
            decode_model(&flipped),
            Err(Error::CorruptModelFile(_))
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            decode_model(&magic),
            Err(Error::CorruptModelFile(_))
        ));
        let mut version = bytes;
        version[8] = 2;
        match decode_model(&version) {
            Err(Error::CorruptModelFile(msg)) => assert!(msg.contains("version 2")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batch_partition_is_sorted_and_complete() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batches(10, 4, &mut rng);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.iter().flatten().copied().collect();
        assert!(b.iter().all(|x| x.windows(2).all(|w| w[0] < w[1])));
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(batches(10, 0, &mut rng), vec![(0..10).collect::<Vec<_>>()]);
    }
}
