//! Kernel structured prediction onto the hyperboloid.
//!
//! A [`KernelRegressor`] stores Gaussian kernel ridge weights
//! `alpha(x) = (K + lambda I)^{-1} v(x)`. [`hsp_predict`] decodes them by
//! minimising the weighted Fréchet objective `F(y) = sum_i alpha_i d(y, y_i)^2`
//! on the hyperboloid; [`krls_predict`] is the Euclidean baseline that
//! averages Poincaré coordinates and projects back into the ball.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::derive_seed;
use crate::error::{invalid_argument, invalid_input, Error, Result};
use crate::manifold::{raw, LorentzPoint, PoincarePoint, DEFAULT_TOLERANCES};

const ARCHIVE_FORMAT: &str = "hypreg-kernel-regressor";
const ARCHIVE_VERSION: u32 = 1;

/// Margin used when projecting baseline predictions into the ball.
pub const BALL_EPS: f64 = 1e-6;

/// `exp(-|x - x'|^2 / (2 sigma^2))`.
pub fn gaussian_kernel(x: &[f64], x_prime: &[f64], sigma: f64) -> Result<f64> {
    if x.len() != x_prime.len() {
        return Err(invalid_argument(format!("kernel inputs of length {} and {}", x.len(), x_prime.len())));
    }
    if !(sigma > 0.0) {
        return Err(invalid_argument(format!("bandwidth must be positive, got {sigma}")));
    }
    Ok(kernel_unchecked(x, x_prime, sigma))
}

#[inline]
fn kernel_unchecked(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-sq / (2.0 * sigma * sigma)).exp()
}

#[derive(Debug, Clone)]
enum Factor {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

/// Fitted Gaussian kernel ridge weights over Lorentz targets.
#[derive(Debug, Clone)]
pub struct KernelRegressor {
    train_x: Vec<Vec<f64>>,
    train_y: Vec<LorentzPoint>,
    sigma: f64,
    lambda: f64,
    factor: Factor,
    /// Targets flattened row-major, `m x (n + 1)`.
    targets_flat: Vec<f64>,
    /// Poincaré coordinates of the targets, `m x n`.
    ball_flat: Vec<f64>,
}

impl KernelRegressor {
    /// Builds `K + lambda I` and factorises it once.
    pub fn fit(train_x: Vec<Vec<f64>>, train_y: Vec<LorentzPoint>, sigma: f64, lambda: f64) -> Result<Self> {
        let m = train_x.len();
        if m == 0 || m != train_y.len() {
            return Err(invalid_argument(format!("{m} inputs but {} targets; need at least one pair", train_y.len())));
        }
        if !(sigma > 0.0 && sigma.is_finite()) || !(lambda > 0.0 && lambda.is_finite()) {
            return Err(invalid_argument(format!("sigma and lambda must be positive, got {sigma} and {lambda}")));
        }
        let d = train_x[0].len();
        if train_x.iter().any(|x| x.len() != d || x.iter().any(|v| !v.is_finite())) {
            return Err(invalid_input("training features must be finite and of equal length"));
        }
        let n1 = train_y[0].coords().len();
        if train_y.iter().any(|y| y.coords().len() != n1) {
            return Err(invalid_input("training targets must share one dimension"));
        }

        let mut k = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            k[(i, i)] = 1.0 + lambda;
            for j in 0..i {
                let v = kernel_unchecked(&train_x[i], &train_x[j], sigma);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        let factor = match k.clone().cholesky() {
            Some(c) => Factor::Cholesky(c),
            None => {
                log::debug!("kernel system not numerically positive definite; using LU");
                Factor::Lu(k.lu())
            }
        };

        let targets_flat: Vec<f64> = train_y.iter().flat_map(|y| y.coords().iter().copied()).collect();
        let mut ball_flat = vec![0.0; m * (n1 - 1)];
        for (y, out) in train_y.iter().zip(ball_flat.chunks_exact_mut(n1 - 1)) {
            raw::to_poincare_into(y.coords(), out);
        }
        Ok(Self { train_x, train_y, sigma, lambda, factor, targets_flat, ball_flat })
    }

    pub fn len(&self) -> usize {
        self.train_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_x.is_empty()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn train_x(&self) -> &[Vec<f64>] {
        &self.train_x
    }

    pub fn train_y(&self) -> &[LorentzPoint] {
        &self.train_y
    }

    pub fn feature_dim(&self) -> usize {
        self.train_x[0].len()
    }

    /// Ambient width `n + 1` of the targets.
    pub fn target_width(&self) -> usize {
        self.train_y[0].coords().len()
    }

    /// `v(x)_i = k(x, x_i)`.
    pub fn kernel_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.feature_dim() {
            return Err(invalid_argument(format!(
                "query has {} features, model expects {}",
                x.len(),
                self.feature_dim()
            )));
        }
        Ok(self.train_x.iter().map(|xi| kernel_unchecked(x, xi, self.sigma)).collect())
    }

    /// Solves `(K + lambda I) alpha = v(x)`.
    pub fn weights_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let v = DVector::from_vec(self.kernel_vector(x)?);
        let alpha = match &self.factor {
            Factor::Cholesky(c) => c.solve(&v),
            Factor::Lu(lu) => lu
                .solve(&v)
                .ok_or_else(|| Error::InvalidState("kernel system is singular".into()))?,
        };
        Ok(alpha.iter().copied().collect())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let archive = ModelArchive {
            format: ARCHIVE_FORMAT.into(),
            version: ARCHIVE_VERSION,
            sigma: self.sigma,
            lambda: self.lambda,
            train_x: self.train_x.clone(),
            train_y: self.train_y.clone(),
        };
        fs::write(path, serde_json::to_string(&archive)?)?;
        Ok(())
    }

    /// Loads an archive and refactorises the kernel system.
    pub fn load_json(path: &Path) -> Result<Self> {
        let archive: ModelArchive = serde_json::from_str(&fs::read_to_string(path)?)?;
        if archive.format != ARCHIVE_FORMAT || archive.version != ARCHIVE_VERSION {
            return Err(invalid_input(format!(
                "unsupported model archive {} v{} (expected {ARCHIVE_FORMAT} v{ARCHIVE_VERSION})",
                archive.format, archive.version
            )));
        }
        Self::fit(archive.train_x, archive.train_y, archive.sigma, archive.lambda)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelArchive {
    format: String,
    version: u32,
    sigma: f64,
    lambda: f64,
    train_x: Vec<Vec<f64>>,
    train_y: Vec<LorentzPoint>,
}

/// Settings of the stochastic Riemannian solver used by [`hsp_predict`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub batch_size: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub learning_rate: f64,
    /// Iterations between full-gradient evaluations (stopping test and
    /// variance-reduction anchor).
    pub check_every: usize,
    /// Upper bound on the Lorentz norm of a single step.
    pub max_step: f64,
    /// The solve is abandoned once an iterate lies further than this from
    /// the origin (objectives with negative weights can be unbounded).
    pub max_radius: f64,
    pub rng_seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            max_iters: 40_000,
            grad_tol: 1e-5,
            learning_rate: 1e-1,
            check_every: 100,
            max_step: 1.0,
            max_radius: 16.0,
            rng_seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_iters == 0 || self.check_every == 0 {
            return Err(invalid_argument("batch_size, max_iters and check_every must be positive"));
        }
        if !(self.grad_tol > 0.0) || !(self.learning_rate > 0.0) || !(self.max_step > 0.0) || !(self.max_radius > 0.0) {
            return Err(invalid_argument("grad_tol, learning_rate, max_step and max_radius must be positive"));
        }
        Ok(())
    }
}

/// Result of one weighted Fréchet-mean solve.
#[derive(Debug, Clone)]
pub struct Inference {
    pub point: LorentzPoint,
    pub iterations: usize,
    /// Euclidean norm of the full objective gradient at `point`.
    pub grad_norm: f64,
    pub converged: bool,
    /// Objective value at every full-gradient check.
    pub objective_trace: Vec<f64>,
}

/// Full gradient `sum_i alpha_i grad d^2(y, y_i)` written into `grad`;
/// returns the objective value.
fn full_gradient(targets: &[f64], width: usize, alpha: &[f64], y: &[f64], grad: &mut [f64], tmp: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut objective = 0.0;
    for (yi, &a) in targets.chunks_exact(width).zip(alpha) {
        let d = raw::log_into(y, yi, tmp);
        objective += a * d * d;
        for (g, t) in grad.iter_mut().zip(tmp.iter()) {
            *g -= 2.0 * a * t;
        }
    }
    objective
}

/// Exponential map, falling back to the first-order retraction `y + z` for
/// steps too short for the exact formula to register; near convergence
/// those are exactly the steps that matter.
fn retract(y: &mut [f64], z: &[f64]) {
    if raw::tangent_norm(z) < DEFAULT_TOLERANCES.small_norm_taylor_cutoff {
        y.iter_mut().zip(z).for_each(|(a, b)| *a += b);
        raw::reproject(y);
    } else {
        raw::exp_in_place(y, z);
    }
}

fn euclid_norm(v: &[f64]) -> f64 {
    raw::sq_norm(v).sqrt()
}

/// Minimises `F(y) = sum_i alpha_i d_L(y, y_i)^2` starting from `init`.
///
/// Each iteration samples `batch_size` indices with replacement, with
/// probabilities proportional to `|alpha_i|`, and takes a variance-reduced
/// step `y <- exp_y(-eta v)` with
/// `v = P_y[(S/b) sum_B sign(alpha_i) (g_i(y) - g_i(a)) + G(a)]`,
/// `S = sum |alpha_i|`, where `a` is the anchor refreshed at every
/// full-gradient check. When `m <= batch_size`
/// the exact gradient is used. Objectives with `sum alpha <= 0` are
/// unbounded below in general; the initial point is then returned unchanged.
pub fn weighted_frechet_mean(
    targets: &[LorentzPoint],
    alpha: &[f64],
    init: &LorentzPoint,
    cfg: &InferenceConfig,
) -> Result<Inference> {
    cfg.validate()?;
    if targets.is_empty() || targets.len() != alpha.len() {
        return Err(invalid_argument(format!("{} targets but {} weights", targets.len(), alpha.len())));
    }
    let width = init.coords().len();
    if targets.iter().any(|t| t.coords().len() != width) {
        return Err(invalid_argument("targets and initial point differ in dimension"));
    }
    let flat: Vec<f64> = targets.iter().flat_map(|t| t.coords().iter().copied()).collect();
    Ok(frechet_flat(&flat, width, alpha, init.coords(), cfg))
}

fn frechet_flat(targets: &[f64], width: usize, alpha: &[f64], init: &[f64], cfg: &InferenceConfig) -> Inference {
    let m = alpha.len();
    let mut y = init.to_vec();
    let mut tmp = vec![0.0; width];
    let mut anchor = y.clone();
    let mut anchor_grad = vec![0.0; width];
    let mut v = vec![0.0; width];
    let mut trace = Vec::new();

    let alpha_sum: f64 = alpha.iter().sum();
    if !(alpha_sum > 0.0) {
        let f = full_gradient(targets, width, alpha, &y, &mut anchor_grad, &mut tmp);
        let grad_norm = euclid_norm(&anchor_grad);
        return Inference {
            point: LorentzPoint::from_vec_unchecked(y),
            iterations: 0,
            grad_norm,
            converged: grad_norm < cfg.grad_tol,
            objective_trace: vec![f],
        };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let exact = m <= cfg.batch_size;
    let abs_sum: f64 = alpha.iter().map(|a| a.abs()).sum();
    let scale = abs_sum / cfg.batch_size as f64;
    let sampler = if exact { None } else { WeightedIndex::new(alpha.iter().map(|a| a.abs())).ok() };
    let mut tmp_a = vec![0.0; width];
    let mut trial_grad = vec![0.0; width];
    let mut learning_rate = cfg.learning_rate / alpha_sum.min(1.0);
    let radius_limit = cfg.max_radius.cosh();
    let mut anchor_f = full_gradient(targets, width, alpha, &anchor, &mut anchor_grad, &mut tmp);
    let mut grad_norm = euclid_norm(&anchor_grad);
    trace.push(anchor_f);
    let mut iterations = 0;
    let mut force_check = false;

    while grad_norm >= cfg.grad_tol && iterations < cfg.max_iters {
        if iterations > 0 && (iterations % cfg.check_every == 0 || force_check) {
            force_check = false;
            let f = if y.iter().all(|c| c.is_finite()) {
                full_gradient(targets, width, alpha, &y, &mut trial_grad, &mut tmp)
            } else {
                f64::NAN
            };
            if f.is_finite() && f <= anchor_f + 1e-10 * anchor_f.abs().max(1e-300) {
                anchor.copy_from_slice(&y);
                anchor_grad.copy_from_slice(&trial_grad);
                anchor_f = f;
                grad_norm = euclid_norm(&anchor_grad);
                trace.push(f);
                if grad_norm < cfg.grad_tol {
                    break;
                }
            } else {
                y.copy_from_slice(&anchor);
                learning_rate *= 0.5;
                if learning_rate < cfg.learning_rate * 1e-12 {
                    break;
                }
            }
            if anchor[0] > radius_limit {
                log::debug!("inference left the radius-{} ball; abandoning", cfg.max_radius);
                break;
            }
        }
        if iterations % cfg.check_every == 0 || y == anchor {
            v.copy_from_slice(&anchor_grad);
        } else if exact {
            full_gradient(targets, width, alpha, &y, &mut v, &mut tmp);
        } else {
            v.copy_from_slice(&anchor_grad);
            let sampler = sampler.as_ref().expect("built whenever batches are sampled");
            for _ in 0..cfg.batch_size {
                let i = sampler.sample(&mut rng);
                let yi = &targets[i * width..(i + 1) * width];
                raw::log_into(&y, yi, &mut tmp);
                raw::log_into(&anchor, yi, &mut tmp_a);
                let c = -2.0 * alpha[i].signum() * scale;
                for ((vk, a), b) in v.iter_mut().zip(&tmp).zip(&tmp_a) {
                    *vk += c * (a - b);
                }
            }
        }
        raw::project_tangent(&y, &mut v);
        let mut step = learning_rate;
        let norm = raw::tangent_norm(&v) * step;
        if norm > cfg.max_step {
            step *= cfg.max_step / norm;
        }
        v.iter_mut().for_each(|x| *x *= -step);
        retract(&mut y, &v);
        iterations += 1;
        if !y.iter().all(|c| c.is_finite()) || y[0] > radius_limit {
            force_check = true;
        }
    }

    // Only checkpointed points carry a verified gradient norm.
    if grad_norm >= cfg.grad_tol && y != anchor {
        let f = if y.iter().all(|c| c.is_finite()) {
            full_gradient(targets, width, alpha, &y, &mut trial_grad, &mut tmp)
        } else {
            f64::NAN
        };
        if f.is_finite() && f <= anchor_f {
            anchor.copy_from_slice(&y);
            grad_norm = euclid_norm(&trial_grad);
            trace.push(f);
        }
    }

    Inference {
        point: LorentzPoint::from_vec_unchecked(anchor),
        iterations,
        grad_norm,
        converged: grad_norm < cfg.grad_tol,
        objective_trace: trace,
    }
}

/// Structured prediction at `x`: the weighted Fréchet mean of the training
/// targets under the kernel ridge weights, initialised at the target with
/// the largest weight.
pub fn hsp_predict(model: &KernelRegressor, x: &[f64], cfg: &InferenceConfig) -> Result<Inference> {
    cfg.validate()?;
    let alpha = model.weights_at(x)?;
    let best = alpha
        .iter()
        .enumerate()
        .fold(0, |best, (i, &a)| if a > alpha[best] { i } else { best });
    let width = model.target_width();
    let init = &model.targets_flat[best * width..(best + 1) * width];
    Ok(frechet_flat(&model.targets_flat, width, &alpha, init, cfg))
}

/// Predicts every query concurrently; query `k` uses the RNG stream
/// derived from `(cfg.rng_seed, k)`.
pub fn hsp_predict_many(model: &KernelRegressor, xs: &[Vec<f64>], cfg: &InferenceConfig) -> Result<Vec<Inference>> {
    xs.par_iter()
        .enumerate()
        .map(|(k, x)| {
            let cfg = InferenceConfig { rng_seed: derive_seed(cfg.rng_seed, &[k as u64]), ..cfg.clone() };
            hsp_predict(model, x, &cfg)
        })
        .collect()
}

/// Kernel least squares in ball coordinates, projected back into the ball.
pub fn krls_predict(model: &KernelRegressor, x: &[f64], eps: f64) -> Result<PoincarePoint> {
    let alpha = model.weights_at(x)?;
    krls_combine(&model.ball_flat, model.target_width() - 1, &alpha, eps)
}

/// `project_to_ball(sum_i alpha_i p_i, eps)` over row-major ball coordinates.
pub fn krls_combine(ball_targets: &[f64], n: usize, alpha: &[f64], eps: f64) -> Result<PoincarePoint> {
    if n == 0 || ball_targets.len() != n * alpha.len() {
        return Err(invalid_argument("ball targets do not match the weight count"));
    }
    let mut y_hat = vec![0.0; n];
    for (p, a) in ball_targets.chunks_exact(n).zip(alpha) {
        for (o, pi) in y_hat.iter_mut().zip(p) {
            *o += a * pi;
        }
    }
    crate::manifold::project_to_ball(&y_hat, eps)
}

/// Which decoder a cross-validation run scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    Hsp,
    Krls,
}

/// Hyperparameter grids searched by [`cross_validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvGrid {
    pub sigmas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

/// `count` logarithmically spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..count).map(|k| 10f64.powf(a + (b - a) * k as f64 / (count - 1) as f64)).collect()
        }
    }
}

impl Default for CvGrid {
    fn default() -> Self {
        Self {
            sigmas: log_space(1e-1, 1e2, 6),
            lambdas: log_space(1e-6, 1e-2, 5),
            learning_rates: log_space(1e-5, 1e-1, 5),
        }
    }
}

impl CvGrid {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: &[f64]| !v.is_empty() && v.iter().all(|x| *x > 0.0 && x.is_finite());
        if !ok(&self.sigmas) || !ok(&self.lambdas) || !ok(&self.learning_rates) {
            return Err(invalid_argument("every grid must be nonempty with positive finite values"));
        }
        Ok(())
    }
}

/// Selected hyperparameters and their validation error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSelection {
    pub sigma: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    /// Mean squared geodesic distance on the validation points.
    pub validation_error: f64,
}

/// Scores every grid combination on a fixed validation set and returns the
/// one with the lowest mean squared geodesic error. Ties keep the earlier
/// grid entry. `Krls` ignores the learning-rate grid.
pub fn cross_validate_holdout(
    train_x: &[Vec<f64>],
    train_y: &[LorentzPoint],
    val_x: &[Vec<f64>],
    val_y: &[LorentzPoint],
    grid: &CvGrid,
    decoder: Decoder,
    infer: &InferenceConfig,
) -> Result<CvSelection> {
    grid.validate()?;
    if val_x.is_empty() || val_x.len() != val_y.len() {
        return Err(invalid_input("validation set is empty or mismatched"));
    }
    let lrs: &[f64] = match decoder {
        Decoder::Hsp => &grid.learning_rates,
        Decoder::Krls => &grid.learning_rates[..1],
    };
    let mut best: Option<CvSelection> = None;
    for &sigma in &grid.sigmas {
        for &lambda in &grid.lambdas {
            let model = KernelRegressor::fit(train_x.to_vec(), train_y.to_vec(), sigma, lambda)?;
            for &lr in lrs {
                let err = match decoder {
                    Decoder::Hsp => {
                        let cfg = InferenceConfig { learning_rate: lr, ..infer.clone() };
                        let preds = hsp_predict_many(&model, val_x, &cfg)?;
                        mean_sq_error(preds.iter().map(|p| p.point.coords()), val_y)
                    }
                    Decoder::Krls => {
                        let preds: Vec<LorentzPoint> = val_x
                            .iter()
                            .map(|x| krls_predict(&model, x, BALL_EPS).map(|p| crate::manifold::poincare_to_lorentz(&p)))
                            .collect::<Result<_>>()?;
                        mean_sq_error(preds.iter().map(|p| p.coords()), val_y)
                    }
                };
                log::debug!("cv {decoder:?} sigma={sigma:.3e} lambda={lambda:.1e} lr={lr:.1e} err={err:.6}");
                if best.as_ref().map_or(true, |b| err < b.validation_error) {
                    best = Some(CvSelection { sigma, lambda, learning_rate: lr, validation_error: err });
                }
            }
        }
    }
    best.ok_or_else(|| invalid_input("no finite validation error on the grid"))
}

fn mean_sq_error<'a>(preds: impl Iterator<Item = &'a [f64]>, truth: &[LorentzPoint]) -> f64 {
    let (sum, count) = preds
        .zip(truth)
        .fold((0.0, 0usize), |(s, c), (p, t)| (s + raw::dist(p, t.coords()).powi(2), c + 1));
    let mean = sum / count as f64;
    if mean.is_finite() {
        mean
    } else {
        f64::INFINITY
    }
}

/// Random 80:20 holdout (by `validation_ratio`) followed by
/// [`cross_validate_holdout`].
pub fn cross_validate(
    x: &[Vec<f64>],
    y: &[LorentzPoint],
    grid: &CvGrid,
    decoder: Decoder,
    infer: &InferenceConfig,
    validation_ratio: f64,
    seed: u64,
) -> Result<CvSelection> {
    if x.len() != y.len() {
        return Err(invalid_argument("features and targets differ in length"));
    }
    let n_val = (validation_ratio * x.len() as f64).floor() as usize;
    if n_val == 0 || n_val >= x.len() {
        return Err(invalid_input(format!(
            "a {validation_ratio} holdout of {} points leaves an empty side",
            x.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; x.len()];
    rand::seq::index::sample(&mut rng, x.len(), n_val).into_iter().for_each(|k| is_val[k] = true);
    let pick = |want: bool| -> (Vec<Vec<f64>>, Vec<LorentzPoint>) {
        (0..x.len()).filter(|&k| is_val[k] == want).map(|k| (x[k].clone(), y[k].clone())).unzip()
    };
    let (tx, ty) = pick(false);
    let (vx, vy) = pick(true);
    cross_validate_holdout(&tx, &ty, &vx, &vy, grid, decoder, infer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{lorentz_dist, poincare_to_lorentz, LorentzPoint};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn rand_vecs(rng: &mut ChaCha8Rng, m: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
        (0..m).map(|_| (0..d).map(|_| rng.gen_range(-scale..scale)).collect()).collect()
    }

    fn rand_points(rng: &mut ChaCha8Rng, m: usize, n: usize, scale: f64) -> Vec<LorentzPoint> {
        rand_vecs(rng, m, n, scale).iter().map(|s| LorentzPoint::from_spatial(s)).collect()
    }

    fn objective(targets: &[LorentzPoint], alpha: &[f64], y: &LorentzPoint) -> f64 {
        targets.iter().zip(alpha).map(|(t, a)| a * lorentz_dist(y, t).powi(2)).sum()
    }

    /// Gaussian elimination with partial pivoting.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in (col + 1)..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let s: f64 = ((row + 1)..n).map(|k| a[row][k] * x[k]).sum();
            x[row] = (b[row] - s) / a[row][row];
        }
        x
    }

    #[test]
    fn kernel_values() {
        assert_eq!(gaussian_kernel(&[1.0, 2.0], &[1.0, 2.0], 0.7).unwrap(), 1.0);
        let sigma = 0.5;
        let x = [0.0, 0.0];
        let y = [sigma * 2f64.sqrt(), 0.0];
        assert_abs_diff_eq!(gaussian_kernel(&x, &y, sigma).unwrap(), 0.3678794411714423, epsilon = 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let v = rand_vecs(&mut rng, 2, 3, 2.0);
            let a = gaussian_kernel(&v[0], &v[1], 1.3).unwrap();
            assert_eq!(a, gaussian_kernel(&v[1], &v[0], 1.3).unwrap());
            assert!(a > 0.0 && a <= 1.0);
        }
        assert!(gaussian_kernel(&[1.0], &[1.0, 2.0], 1.0).is_err());
        assert!(gaussian_kernel(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn single_point_weights() {
        let y = vec![LorentzPoint::from_spatial(&[0.3, -0.1])];
        let lambda = 0.25;
        let model = KernelRegressor::fit(vec![vec![1.0, 1.0]], y.clone(), 1.0, lambda).unwrap();
        let x = [0.5, 1.5];
        let alpha = model.weights_at(&x).unwrap();
        assert_abs_diff_eq!(alpha[0], gaussian_kernel(&x, &[1.0, 1.0], 1.0).unwrap() / (1.0 + lambda), epsilon = 1e-14);
        let tight = KernelRegressor::fit(vec![vec![1.0, 1.0]], y, 1.0, 1e-12).unwrap();
        assert_abs_diff_eq!(tight.weights_at(&[1.0, 1.0]).unwrap()[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn weights_match_dense_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..5 {
            let x = rand_vecs(&mut rng, 20, 3, 1.0);
            let y = rand_points(&mut rng, 20, 2, 1.0);
            let (sigma, lambda) = (0.8, 10f64.powi(-(trial + 2)));
            let model = KernelRegressor::fit(x.clone(), y, sigma, lambda).unwrap();
            let q = rand_vecs(&mut rng, 1, 3, 1.0).remove(0);
            let alpha = model.weights_at(&q).unwrap();
            let mut a = vec![vec![0.0; 20]; 20];
            for i in 0..20 {
                for j in 0..20 {
                    a[i][j] = gaussian_kernel(&x[i], &x[j], sigma).unwrap() + if i == j { lambda } else { 0.0 };
                }
            }
            let v: Vec<f64> = x.iter().map(|xi| gaussian_kernel(&q, xi, sigma).unwrap()).collect();
            let expected = dense_solve(a.clone(), v.clone());
            let scale = expected.iter().fold(1.0f64, |s, e| s.max(e.abs()));
            for (got, want) in alpha.iter().zip(&expected) {
                assert!((got - want).abs() <= 1e-8 * scale, "{got} vs {want}");
            }
            let residual = (0..20)
                .map(|i| ((0..20).map(|j| a[i][j] * alpha[j]).sum::<f64>() - v[i]).abs())
                .fold(0.0, f64::max);
            assert!(residual <= 1e-9, "residual {residual}");
        }
    }

    #[test]
    fn duplicate_inputs_factorize() {
        let x = vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![1.0, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = rand_points(&mut rng, 3, 2, 1.0);
        let model = KernelRegressor::fit(x, y, 1.0, 1e-6).unwrap();
        let alpha = model.weights_at(&[0.5, 0.5]).unwrap();
        assert!(alpha.iter().all(|a| a.is_finite()));
        assert_abs_diff_eq!(alpha[0], alpha[1], epsilon = 1e-6);
    }

    #[test]
    fn shrinkage_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_vecs(&mut rng, 15, 2, 1.0);
        let y = rand_points(&mut rng, 15, 2, 1.0);
        let q = [0.1, -0.2];
        let norms: Vec<f64> = [1e-2, 1.0, 1e2]
            .iter()
            .map(|&l| {
                let a = KernelRegressor::fit(x.clone(), y.clone(), 0.7, l).unwrap().weights_at(&q).unwrap();
                raw::sq_norm(&a).sqrt()
            })
            .collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
    }

    #[test]
    fn fit_rejects_bad_input() {
        let y = vec![LorentzPoint::origin(2)];
        assert!(matches!(
            KernelRegressor::fit(vec![vec![f64::NAN]], y.clone(), 1.0, 1.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(KernelRegressor::fit(vec![], vec![], 1.0, 1.0).is_err());
        assert!(KernelRegressor::fit(vec![vec![0.0]], y, 1.0, 0.0).is_err());
    }

    #[test]
    fn single_target_is_fixed_point() {
        let y = LorentzPoint::from_spatial(&[0.4, 0.2]);
        for alpha in [0.7, -0.3] {
            let out = weighted_frechet_mean(&[y.clone()], &[alpha], &y, &InferenceConfig::default()).unwrap();
            assert!(out.converged);
            assert_abs_diff_eq!(lorentz_dist(&out.point, &y), 0.0, epsilon = 1e-12);
        }
        let model = KernelRegressor::fit(vec![vec![0.0]], vec![y.clone()], 1.0, 1e-3).unwrap();
        let out = hsp_predict(&model, &[3.0], &InferenceConfig::default()).unwrap();
        assert_abs_diff_eq!(lorentz_dist(&out.point, &y), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn equal_weights_give_midpoint() {
        let a = LorentzPoint::from_spatial(&[1.2, -0.3]);
        let b = LorentzPoint::from_spatial(&[-0.6, 0.9]);
        let out = weighted_frechet_mean(&[a.clone(), b.clone()], &[0.5, 0.5], &a, &InferenceConfig::default()).unwrap();
        assert!(out.converged);
        let (da, db) = (lorentz_dist(&out.point, &a), lorentz_dist(&out.point, &b));
        assert_abs_diff_eq!(da, db, epsilon = 1e-3);
        assert_abs_diff_eq!(da + db, lorentz_dist(&a, &b), epsilon = 1e-6);
    }

    #[test]
    fn beats_every_candidate_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_vecs(&mut rng, 30, 3, 1.0);
        let y = rand_points(&mut rng, 30, 3, 2.0);
        let model = KernelRegressor::fit(x, y.clone(), 0.8, 1e-3).unwrap();
        for k in 0..5 {
            let q = rand_vecs(&mut rng, 1, 3, 1.0).remove(0);
            let alpha = model.weights_at(&q).unwrap();
            let cfg = InferenceConfig { rng_seed: k, ..InferenceConfig::default() };
            let out = hsp_predict(&model, &q, &cfg).unwrap();
            assert!(out.point.coords().iter().all(|c| c.is_finite()));
            assert_abs_diff_eq!(raw::inner(out.point.coords(), out.point.coords()), -1.0, epsilon = 1e-9 * out.point.coords()[0].powi(2));
            let f = objective(&y, &alpha, &out.point);
            for t in &y {
                assert!(f <= objective(&y, &alpha, t) + 1e-6);
            }
        }
    }

    #[test]
    fn stochastic_objective_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let targets = rand_points(&mut rng, 200, 4, 2.0);
        let alpha: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cfg = InferenceConfig { learning_rate: 1e-3, grad_tol: 1e-9, max_iters: 3000, ..InferenceConfig::default() };
        let out = weighted_frechet_mean(&targets, &alpha, &targets[0], &cfg).unwrap();
        let trace = &out.objective_trace;
        assert!(trace.len() > 5);
        let ups = trace.windows(2).filter(|w| w[1] > w[0] + 1e-12 * w[0].abs()).count();
        assert!(ups as f64 <= 0.05 * (trace.len() - 1) as f64, "{ups} increases in {trace:?}");
    }

    #[test]
    fn consistent_at_training_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<Vec<f64>> = (0..12).map(|k| vec![k as f64 * 3.0, 0.0]).collect();
        let y = rand_points(&mut rng, 12, 3, 1.5);
        let model = KernelRegressor::fit(x.clone(), y.clone(), 0.5, 1e-9).unwrap();
        for (xj, yj) in x.iter().zip(&y) {
            let out = hsp_predict(&model, xj, &InferenceConfig::default()).unwrap();
            assert!(lorentz_dist(&out.point, yj) <= 0.05);
        }
    }

    #[test]
    fn krls_interpolates_and_projects() {
        let p1 = PoincarePoint::new(vec![0.3, -0.2]).unwrap();
        let y1 = poincare_to_lorentz(&p1);
        let model = KernelRegressor::fit(vec![vec![0.0]], vec![y1], 1.0, 1e-12).unwrap();
        let out = krls_predict(&model, &[0.0], BALL_EPS).unwrap();
        assert_abs_diff_eq!(out.coords()[0], 0.3, epsilon = 1e-9);
        assert_abs_diff_eq!(out.coords()[1], -0.2, epsilon = 1e-9);

        let targets = [0.99, 0.0, 0.0, 0.99, 0.7, 0.7];
        let out = krls_combine(&targets, 2, &[1.0, 1.0, 1.0], BALL_EPS).unwrap();
        assert_abs_diff_eq!(out.norm(), 1.0 - BALL_EPS, epsilon = 1e-12);
        let inside = krls_combine(&targets, 2, &[0.1, 0.2, 0.3], BALL_EPS).unwrap();
        assert_abs_diff_eq!(inside.coords()[0], 0.099 + 0.21, epsilon = 1e-12);
    }

    #[test]
    fn krls_is_linear_in_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_vecs(&mut rng, 6, 2, 1.0);
        let balls: Vec<Vec<f64>> = rand_vecs(&mut rng, 6, 2, 0.2);
        let doubled: Vec<Vec<f64>> = balls.iter().map(|b| b.iter().map(|v| 2.0 * v).collect()).collect();
        let to_l = |bs: &[Vec<f64>]| -> Vec<LorentzPoint> {
            bs.iter().map(|b| poincare_to_lorentz(&PoincarePoint::new(b.clone()).unwrap())).collect()
        };
        let m1 = KernelRegressor::fit(x.clone(), to_l(&balls), 0.9, 1e-2).unwrap();
        let m2 = KernelRegressor::fit(x, to_l(&doubled), 0.9, 1e-2).unwrap();
        let q = [0.05, 0.1];
        let (a, b) = (krls_predict(&m1, &q, BALL_EPS).unwrap(), krls_predict(&m2, &q, BALL_EPS).unwrap());
        assert!(b.norm() < 1.0 - BALL_EPS);
        for (u, v) in a.coords().iter().zip(b.coords()) {
            assert_abs_diff_eq!(2.0 * u, *v, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_space_grids() {
        let g = CvGrid::default();
        assert_eq!((g.sigmas.len(), g.lambdas.len(), g.learning_rates.len()), (6, 5, 5));
        assert_abs_diff_eq!(g.sigmas[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(g.sigmas[5], 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.lambdas[2], 1e-4, epsilon = 1e-18);
    }

    #[test]
    fn cv_single_element_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_vecs(&mut rng, 20, 2, 1.0);
        let y = rand_points(&mut rng, 20, 2, 1.0);
        let grid = CvGrid { sigmas: vec![0.5], lambdas: vec![1e-3], learning_rates: vec![1e-1] };
        let sel = cross_validate(&x, &y, &grid, Decoder::Hsp, &InferenceConfig::default(), 0.2, 1).unwrap();
        assert_eq!((sel.sigma, sel.lambda, sel.learning_rate), (0.5, 1e-3, 1e-1));
        let big = CvGrid { sigmas: vec![0.1, 1.0, 10.0], lambdas: vec![1e-4, 1e-2], learning_rates: vec![1e-1] };
        let a = cross_validate(&x, &y, &big, Decoder::Krls, &InferenceConfig::default(), 0.2, 7).unwrap();
        let b = cross_validate(&x, &y, &big, Decoder::Krls, &InferenceConfig::default(), 0.2, 7).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            cross_validate(&x[..3], &y[..3], &grid, Decoder::Hsp, &InferenceConfig::default(), 0.2, 1),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn cv_finds_realizable_bandwidth() {
        // Inputs on a line spaced 1 apart; every validation point duplicates a
        // training input. With a tiny bandwidth the kernel is the identity on
        // distinct inputs and duplicates are reproduced exactly; wide
        // bandwidths blur neighbouring targets.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let train_x: Vec<Vec<f64>> = (0..10).map(|k| vec![k as f64]).collect();
        let train_y = rand_points(&mut rng, 10, 2, 1.5);
        let val_x = train_x[..4].to_vec();
        let val_y = train_y[..4].to_vec();
        let grid = CvGrid { sigmas: vec![0.05, 2.0, 20.0], lambdas: vec![1e-9], learning_rates: vec![1e-1] };
        for decoder in [Decoder::Hsp, Decoder::Krls] {
            let sel = cross_validate_holdout(&train_x, &train_y, &val_x, &val_y, &grid, decoder, &InferenceConfig::default()).unwrap();
            assert_eq!(sel.sigma, 0.05, "{decoder:?}");
            assert!(sel.validation_error < 1e-6);
        }
    }

    #[test]
    fn archive_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_vecs(&mut rng, 8, 2, 1.0);
        let y = rand_points(&mut rng, 8, 2, 1.0);
        let model = KernelRegressor::fit(x, y, 0.6, 1e-3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save_json(&path).unwrap();
        let back = KernelRegressor::load_json(&path).unwrap();
        assert_eq!(back.weights_at(&[0.1, 0.2]).unwrap(), model.weights_at(&[0.1, 0.2]).unwrap());
        let text = fs::read_to_string(&path).unwrap().replace("\"version\":1", "\"version\":9");
        fs::write(&path, text).unwrap();
        assert!(KernelRegressor::load_json(&path).is_err());
    }
}
