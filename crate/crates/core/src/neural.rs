//! Fully connected regressors into the Poincaré ball.
//!
//! NN-G composes an MLP `g` with the element-wise `tanh` and the squashing
//! map `s(w) = w |w|_inf / |w|_2`, so every output lies inside the unit
//! ball, and is trained on the squared geodesic distance. NN-E regresses ball
//! coordinates with a squared Euclidean loss and projects its outputs into
//! the ball afterwards.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_argument, invalid_input, Error, Result};
use crate::manifold::{grad_sq_dist_poincare_into, project_to_ball, raw, PoincarePoint};

const CHECKPOINT_FORMAT: &str = "hypreg-mlp";
const CHECKPOINT_VERSION: u32 = 1;

/// `tanh` outputs are kept this far from +-1 so the squashed point stays
/// strictly inside the ball in floating point.
const TANH_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    /// NN-G: `s(tanh(g(x)))` with the squared geodesic loss.
    Geodesic,
    /// NN-E: raw `g(x)` with the squared Euclidean loss on ball coordinates.
    Euclidean,
}

/// A multilayer perceptron with ReLU hidden layers and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layer_dims: Vec<usize>,
    /// `weights[l]` is `layer_dims[l+1] x layer_dims[l]`, row-major.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub output_mode: OutputMode,
    /// Mean training loss per epoch.
    #[serde(default)]
    pub loss_trace: Vec<f64>,
}

impl MlpModel {
    /// All-zero parameters.
    pub fn zeros(layer_dims: &[usize], output_mode: OutputMode) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(invalid_argument("need at least an input and an output layer, all positive"));
        }
        let weights = layer_dims.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect();
        let biases = layer_dims[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self { layer_dims: layer_dims.to_vec(), weights, biases, output_mode, loss_trace: Vec::new() })
    }

    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(layer_dims: &[usize], output_mode: OutputMode, rng: &mut impl Rng) -> Result<Self> {
        let mut model = Self::zeros(layer_dims, output_mode)?;
        for (l, w) in model.weights.iter_mut().enumerate() {
            let limit = (6.0 / (layer_dims[l] + layer_dims[l + 1]) as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng.gen_range(-limit..=limit));
        }
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two layers")
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self.weights.iter().chain(&self.biases).flatten().all(|v| v.is_finite());
        if finite {
            Ok(())
        } else {
            Err(Error::InvalidState("model parameters are not finite".into()))
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let ok = self.layer_dims.len() >= 2
            && self.weights.len() == self.layer_dims.len() - 1
            && self.biases.len() == self.weights.len()
            && self.layer_dims.windows(2).zip(&self.weights).all(|(d, w)| w.len() == d[0] * d[1])
            && self.layer_dims[1..].iter().zip(&self.biases).all(|(&n, b)| b.len() == n);
        if ok {
            Ok(())
        } else {
            Err(invalid_input("parameter shapes do not match layer_dims"))
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, model: self.clone() };
        fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(invalid_input(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.model.check_shapes()?;
        ckpt.model.check_finite()?;
        Ok(ckpt.model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    model: MlpModel,
}

/// Gradients with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().chain(self.biases.iter_mut()).flatten().for_each(|g| *g *= factor);
    }
}

/// Pre-activations of every layer for one input.
fn forward_trace(model: &MlpModel, x: &[f64]) -> Vec<Vec<f64>> {
    let mut pre = Vec::with_capacity(model.weights.len());
    let mut act = x.to_vec();
    let last = model.weights.len() - 1;
    for (l, (w, b)) in model.weights.iter().zip(&model.biases).enumerate() {
        let n_in = model.layer_dims[l];
        let z: Vec<f64> = b
            .iter()
            .enumerate()
            .map(|(r, bias)| bias + w[r * n_in..(r + 1) * n_in].iter().zip(&act).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        if l < last {
            act = z.iter().map(|v| v.max(0.0)).collect();
        }
        pre.push(z);
    }
    pre
}

/// Output of the last (linear) layer.
pub fn mlp_forward(model: &MlpModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.input_dim() {
        return Err(invalid_argument(format!("input has length {}, model expects {}", x.len(), model.input_dim())));
    }
    Ok(forward_trace(model, x).pop().expect("at least one layer"))
}

fn clamped_tanh(z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| v.tanh().clamp(-1.0 + TANH_MARGIN, 1.0 - TANH_MARGIN)).collect()
}

/// Index of the largest `|w_i|`, lowest index on ties.
fn argmax_abs(w: &[f64]) -> usize {
    w.iter()
        .enumerate()
        .fold(0, |best, (i, v)| if v.abs() > w[best].abs() { i } else { best })
}

fn squash(w: &[f64]) -> Vec<f64> {
    let n2 = raw::sq_norm(w).sqrt();
    if n2 == 0.0 {
        return vec![0.0; w.len()];
    }
    let ninf = w[argmax_abs(w)].abs();
    w.iter().map(|v| v * ninf / n2).collect()
}

/// `s(tanh(z))`; the result has Euclidean norm `max_i |tanh z_i| < 1`.
pub fn tanh_then_squash(z: &[f64]) -> PoincarePoint {
    PoincarePoint::from_vec_unchecked(squash(&clamped_tanh(z)))
}

/// NN-G prediction.
pub fn nng_forward(model: &MlpModel, x: &[f64]) -> Result<PoincarePoint> {
    if model.output_mode != OutputMode::Geodesic {
        return Err(invalid_argument("nng_forward needs a geodesic-mode model"));
    }
    Ok(tanh_then_squash(&mlp_forward(model, x)?))
}

/// NN-E prediction, radially projected into the ball.
pub fn nne_predict(model: &MlpModel, x: &[f64], eps: f64) -> Result<PoincarePoint> {
    if model.output_mode != OutputMode::Euclidean {
        return Err(invalid_argument("nne_predict needs a euclidean-mode model"));
    }
    project_to_ball(&mlp_forward(model, x)?, eps)
}

/// Prediction in whichever mode the model was trained for.
pub fn predict(model: &MlpModel, x: &[f64], eps: f64) -> Result<PoincarePoint> {
    match model.output_mode {
        OutputMode::Geodesic => nng_forward(model, x),
        OutputMode::Euclidean => nne_predict(model, x, eps),
    }
}

/// Pulls `dL/dp` back through `p = s(w)`, using the lowest-index branch of
/// `|w|_inf` and a zero gradient at `w = 0`.
fn squash_backward(w: &[f64], gp: &[f64], out: &mut [f64]) {
    let n2sq = raw::sq_norm(w);
    if n2sq == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let n2 = n2sq.sqrt();
    let k = argmax_abs(w);
    let m = w[k].abs();
    let gw: f64 = gp.iter().zip(w).map(|(a, b)| a * b).sum();
    for (i, o) in out.iter_mut().enumerate() {
        *o = gp[i] * m / n2 - w[i] * m * gw / (n2sq * n2);
    }
    out[k] += w[k].signum() * gw / n2;
}

/// Loss of one sample and its gradient w.r.t. the final pre-activation.
fn head_loss(model: &MlpModel, z: &[f64], target: &[f64], gz: &mut [f64]) -> f64 {
    match model.output_mode {
        OutputMode::Geodesic => {
            let w = clamped_tanh(z);
            let p = squash(&w);
            let d = raw::poincare_dist(&p, target);
            let mut gp = vec![0.0; p.len()];
            grad_sq_dist_poincare_into(&p, target, &mut gp);
            squash_backward(&w, &gp, gz);
            for ((g, zi), wi) in gz.iter_mut().zip(z).zip(&w) {
                // the clamp is flat where it binds
                *g *= if zi.tanh().abs() >= 1.0 - TANH_MARGIN { 0.0 } else { 1.0 - wi * wi };
            }
            d * d
        }
        OutputMode::Euclidean => {
            let mut loss = 0.0;
            for ((g, zi), yi) in gz.iter_mut().zip(z).zip(target) {
                let r = zi - yi;
                *g = 2.0 * r;
                loss += r * r;
            }
            loss
        }
    }
}

/// Mean loss over the batch and the gradient of that mean w.r.t. every
/// parameter.
pub fn loss_and_grads(model: &MlpModel, batch: &[(Vec<f64>, PoincarePoint)]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(invalid_argument("empty batch"));
    }
    for (x, y) in batch {
        if x.len() != model.input_dim() || y.dim() != model.output_dim() {
            return Err(invalid_argument("sample dimensions do not match the model"));
        }
        if !(y.norm() < 1.0) {
            return Err(invalid_input("targets must lie strictly inside the unit ball"));
        }
    }
    let mut grads = Gradients::zeros_like(model);
    let mut total = 0.0;
    for (x, y) in batch {
        total += accumulate_sample(model, x, y.coords(), &mut grads);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    Ok((total * inv, grads))
}

fn accumulate_sample(model: &MlpModel, x: &[f64], target: &[f64], grads: &mut Gradients) -> f64 {
    let pre = forward_trace(model, x);
    let layers = model.weights.len();
    let mut gz = vec![0.0; model.output_dim()];
    let loss = head_loss(model, &pre[layers - 1], target, &mut gz);
    for l in (0..layers).rev() {
        let n_in = model.layer_dims[l];
        let input: Vec<f64> = if l == 0 { x.to_vec() } else { pre[l - 1].iter().map(|v| v.max(0.0)).collect() };
        let gw = &mut grads.weights[l];
        for (r, g) in gz.iter().enumerate() {
            grads.biases[l][r] += g;
            for (c, a) in input.iter().enumerate() {
                gw[r * n_in + c] += g * a;
            }
        }
        if l == 0 {
            break;
        }
        let w = &model.weights[l];
        let mut g_prev = vec![0.0; n_in];
        for (r, g) in gz.iter().enumerate() {
            for (c, gp) in g_prev.iter_mut().enumerate() {
                *gp += w[r * n_in + c] * g;
            }
        }
        for (gp, z) in g_prev.iter_mut().zip(&pre[l - 1]) {
            if *z <= 0.0 {
                *gp = 0.0;
            }
        }
        gz = g_prev;
    }
    loss
}

/// Mini-batch SGD settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Multiplier applied after `patience` epochs without improvement.
    pub lr_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Stop once the best loss of the last `convergence_window` epochs
    /// improves on the best loss before them by less than this fraction.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    pub momentum: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            initial_lr: 1e-2,
            lr_decay: 0.5,
            patience: 20,
            max_epochs: 2000,
            convergence_tol: 1e-5,
            convergence_window: 50,
            momentum: 0.0,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.convergence_window == 0 {
            return Err(invalid_argument("batch_size, max_epochs, patience and convergence_window must be positive"));
        }
        if !(self.initial_lr >= 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(invalid_argument("initial_lr must be >= 0 and lr_decay in (0, 1]"));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) || !(self.convergence_tol >= 0.0) {
            return Err(invalid_argument("momentum must lie in [0, 1) and convergence_tol be >= 0"));
        }
        Ok(())
    }
}

/// Trains `model` in place on `(x, ball target)` pairs and returns it.
pub fn train(mut model: MlpModel, data: &[(Vec<f64>, PoincarePoint)], cfg: &TrainConfig) -> Result<MlpModel> {
    cfg.validate()?;
    model.check_shapes()?;
    if data.is_empty() {
        return Err(invalid_argument("empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut lr = cfg.initial_lr;
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut velocity = Gradients::zeros_like(&model);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    model.loss_trace.clear();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| data[k].clone()));
            let (loss, grads) = loss_and_grads(&model, &batch)?;
            total += loss * chunk.len() as f64;
            let params = model.weights.iter_mut().chain(model.biases.iter_mut()).flatten();
            let vel = velocity.weights.iter_mut().chain(velocity.biases.iter_mut()).flatten();
            let grad = grads.weights.iter().chain(&grads.biases).flatten();
            for ((p, v), g) in params.zip(vel).zip(grad) {
                *v = cfg.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingFailure { epoch, reason: "training loss is not finite".into() });
        }
        model.loss_trace.push(mean);

        if mean < best {
            best = mean;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                lr *= cfg.lr_decay;
                since_best = 0;
            }
        }
        if epoch >= cfg.convergence_window {
            let split = epoch + 1 - cfg.convergence_window;
            let before = model.loss_trace[..split].iter().copied().fold(f64::INFINITY, f64::min);
            let recent = model.loss_trace[split..].iter().copied().fold(f64::INFINITY, f64::min);
            let rel = (before - recent) / before.abs().max(f64::MIN_POSITIVE);
            if rel < cfg.convergence_tol {
                log::debug!("network converged after {} epochs (loss {mean:.6})", epoch + 1);
                break;
            }
        }
    }
    model.check_finite()?;
    Ok(model)
}
