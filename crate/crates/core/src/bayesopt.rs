// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gaussian-process Bayesian optimization over intervention parameters.
//!
//! The surrogate uses the infinite-width deep ReLU network covariance
//! (arc-cosine recursion). Angles are featurized as `(cos θ, sin θ)` pairs so
//! the kernel sees the torus; gains in `[0, 1]` are mapped to `[-1, 1]`.
//! Each iteration fits the GP to the standardized history, scores a pool of
//! random and incumbent-perturbed candidates with log expected improvement,
//! and evaluates the best one.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::intervention::{wrap_angle, InterventionSpec, RescaleConfig, RotationConfig};
use crate::linalg::{cholesky, dot, solve_lower, solve_upper_t, LinalgError, Matrix, Rng};
use crate::model::ModelConfig;

#[derive(Debug, Error)]
pub enum BayesOptError {
    #[error("feature widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("cannot fit a GP to an empty history")]
    EmptyHistory,
    #[error("{points} points but {values} objective values")]
    LengthMismatch { points: usize, values: usize },
    #[error("non-finite objective value {0}")]
    NonFiniteValue(f64),
    #[error("kernel matrix not positive definite even with jitter {jitter:e}")]
    Factorization { jitter: f64 },
    #[error("invalid optimizer setting: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, BayesOptError>;

/// Infinite-width ReLU network kernel hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelParams {
    pub depth: usize,
    pub weight_var: f64,
    pub bias_var: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            depth: 12,
            weight_var: 1.6,
            bias_var: 0.1,
        }
    }
}

/// Covariance of two inputs under a depth-`depth` infinitely wide ReLU
/// network with the given weight and bias variances.
pub fn ibnn_kernel(x: &[f64], y: &[f64], kp: &KernelParams) -> Result<f64> {
    if x.len() != y.len() {
        return Err(BayesOptError::WidthMismatch(x.len(), y.len()));
    }
    let n = x.len().max(1) as f64;
    let input = |a: &[f64], b: &[f64]| kp.bias_var + kp.weight_var * dot(a, b) / n;
    let mut kxy = input(x, y);
    let mut kxx = input(x, x);
    let mut kyy = input(y, y);
    for _ in 0..kp.depth {
        let scale = (kxx * kyy).sqrt();
        let cos = if scale > 0.0 { (kxy / scale).clamp(-1.0, 1.0) } else { 1.0 };
        let theta = cos.acos();
        kxy = kp.bias_var
            + kp.weight_var / (2.0 * PI) * scale * (theta.sin() + (PI - theta) * cos);
        kxx = kp.bias_var + kp.weight_var * kxx / 2.0;
        kyy = kp.bias_var + kp.weight_var * kyy / 2.0;
    }
    Ok(kxy)
}

/// Domain of the searched parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchSpace {
    /// Angles in `[0, 2π)`.
    Torus,
    /// Gains in `[0, 1]`.
    UnitBox,
}

impl SearchSpace {
    pub fn featurize(&self, point: &[f64]) -> Vec<f64> {
        match self {
            SearchSpace::Torus => featurize(point),
            SearchSpace::UnitBox => point.iter().map(|g| 2.0 * g - 1.0).collect(),
        }
    }

    fn random_point(&self, dim: usize, rng: &mut Rng) -> Vec<f64> {
        match self {
            SearchSpace::Torus => (0..dim).map(|_| rng.uniform_range(0.0, TAU)).collect(),
            SearchSpace::UnitBox => (0..dim).map(|_| rng.uniform()).collect(),
        }
    }

    /// The point at which the intervention is the identity.
    pub fn identity_point(&self, dim: usize) -> Vec<f64> {
        match self {
            SearchSpace::Torus => vec![0.0; dim],
            SearchSpace::UnitBox => vec![1.0; dim],
        }
    }

    fn perturb(&self, x: f64, step: f64) -> f64 {
        match self {
            SearchSpace::Torus => wrap_angle(x + step),
            SearchSpace::UnitBox => {
                // Reflect at the walls.
                let mut v = (x + step / PI).rem_euclid(2.0);
                if v > 1.0 {
                    v = 2.0 - v;
                }
                v
            }
        }
    }
}

/// `[cos θ₁, sin θ₁, cos θ₂, sin θ₂, …]`.
pub fn featurize(angles: &[f64]) -> Vec<f64> {
    angles.iter().flat_map(|a| [a.cos(), a.sin()]).collect()
}

/// A GP conditioned on observed (featurized) points.
#[derive(Debug, Clone)]
pub struct GpState {
    pub points: Vec<Vec<f64>>,
    pub kernel: KernelParams,
    /// Diagonal jitter actually used for the factorization.
    pub jitter: f64,
    pub y_mean: f64,
    pub y_std: f64,
    chol: Matrix,
    alpha: Vec<f64>,
}

const MAX_JITTER: f64 = 1e-4;

/// Fits a zero-mean GP to standardized `values`. The jitter grows tenfold
/// from `jitter` up to 1e-4 until the kernel matrix factors.
pub fn gp_fit(points: &[Vec<f64>], values: &[f64], kernel: KernelParams, jitter: f64) -> Result<GpState> {
    if points.is_empty() {
        return Err(BayesOptError::EmptyHistory);
    }
    if points.len() != values.len() {
        return Err(BayesOptError::LengthMismatch {
            points: points.len(),
            values: values.len(),
        });
    }
    if let Some(&v) = values.iter().find(|v| !v.is_finite()) {
        return Err(BayesOptError::NonFiniteValue(v));
    }
    let width = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != width) {
        return Err(BayesOptError::WidthMismatch(width, p.len()));
    }
    if !(jitter > 0.0) {
        return Err(BayesOptError::InvalidConfig(format!("jitter {jitter} must be positive")));
    }
    let n = points.len();
    let y_mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
    let y_std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    let y: Vec<f64> = values.iter().map(|v| (v - y_mean) / y_std).collect();

    let mut gram = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let k = ibnn_kernel(&points[i], &points[j], &kernel)?;
            gram.set(i, j, k);
            gram.set(j, i, k);
        }
    }
    let mut eps = jitter;
    loop {
        let mut a = gram.clone();
        for i in 0..n {
            a.set(i, i, a.get(i, i) + eps);
        }
        match cholesky(&a) {
            Ok(chol) => {
                let alpha = solve_upper_t(&chol, &solve_lower(&chol, &y));
                return Ok(GpState {
                    points: points.to_vec(),
                    kernel,
                    jitter: eps,
                    y_mean,
                    y_std,
                    chol,
                    alpha,
                });
            }
            Err(LinalgError::NotPositiveDefinite { .. }) if eps * 10.0 <= MAX_JITTER * (1.0 + 1e-9) => {
                eps *= 10.0;
            }
            Err(_) => return Err(BayesOptError::Factorization { jitter: eps }),
        }
    }
}

/// Posterior mean and variance at a featurized point, in objective units.
pub fn gp_posterior(state: &GpState, x: &[f64]) -> Result<(f64, f64)> {
    let kstar: Vec<f64> = state
        .points
        .iter()
        .map(|p| ibnn_kernel(p, x, &state.kernel))
        .collect::<Result<_>>()?;
    let mean = dot(&kstar, &state.alpha);
    let v = solve_lower(&state.chol, &kstar);
    let var = (ibnn_kernel(x, x, &state.kernel)? - dot(&v, &v)).max(0.0);
    Ok((state.y_mean + state.y_std * mean, var * state.y_std * state.y_std))
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// `erfc(x)·exp(x²)` for `x ≥ 0` where that product is still representable.
fn erfcx(x: f64) -> f64 {
    erfc(x) * (x * x).exp()
}

/// `ln(φ(z) + zΦ(z))`, the log expected improvement of a unit Gaussian
/// standardized to `z`.
fn log_h(z: f64) -> f64 {
    if z > -1.0 {
        let pdf = (-0.5 * z * z).exp() / (TAU).sqrt();
        let cdf = 0.5 * erfc(-z / std::f64::consts::SQRT_2);
        return (pdf + z * cdf).ln();
    }
    let x = -z;
    // h(z) = φ(z)·(1 − x·R(x)) with R the Mills ratio Φ(−x)/φ(x).
    let tail = if x <= 25.0 {
        let mills = (PI / 2.0).sqrt() * erfcx(x / std::f64::consts::SQRT_2);
        (-x * mills).ln_1p()
    } else {
        let u = 1.0 / (x * x);
        (u * (1.0 - u * (3.0 - u * (15.0 - u * (105.0 - u * 945.0))))).ln()
    };
    -0.5 * z * z - LN_SQRT_2PI + tail
}

/// Log expected improvement over `best` of a Gaussian with the given mean and
/// variance. Stays finite far below `best`; returns `ln(max(μ − best, 0))`
/// when the variance is zero.
pub fn log_ei(mean: f64, var: f64, best: f64) -> f64 {
    let sigma = var.max(0.0).sqrt();
    if sigma == 0.0 {
        let gap = mean - best;
        return if gap > 0.0 { gap.ln() } else { f64::NEG_INFINITY };
    }
    sigma.ln() + log_h((mean - best) / sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptRunConfig {
    pub iterations: usize,
    pub initial_points: usize,
    pub candidates: usize,
    /// Share of the candidate pool drawn uniformly at random.
    pub random_fraction: f64,
    /// Standard deviation (radians) of incumbent perturbations.
    pub perturbation_scale: f64,
    /// Leading candidates refined by hill climbing on the acquisition.
    pub refine_starts: usize,
    pub refine_rounds: usize,
    /// Refinement is skipped above this many dimensions, where climbing the
    /// acquisition over-exploits the incumbent's neighbourhood.
    pub refine_max_dim: usize,
    pub kernel: KernelParams,
    pub jitter: f64,
    /// Evaluate the identity intervention as the first initial point.
    pub include_identity: bool,
    pub seed: u64,
}

impl Default for OptRunConfig {
    fn default() -> Self {
        Self {
            iterations: 150,
            initial_points: 10,
            candidates: 512,
            random_fraction: 0.25,
            perturbation_scale: 1.0,
            refine_starts: 4,
            refine_rounds: 10,
            refine_max_dim: 16,
            kernel: KernelParams::default(),
            jitter: 1e-8,
            include_identity: true,
            seed: 0,
        }
    }
}

impl OptRunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BayesOptError::InvalidConfig(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.initial_points == 0 || self.initial_points > self.iterations {
            return bad("initial_points must be in [1, iterations]");
        }
        if self.candidates == 0 {
            return bad("candidates must be positive");
        }
        if !(0.0..=1.0).contains(&self.random_fraction) {
            return bad("random_fraction must be in [0, 1]");
        }
        if !(self.perturbation_scale > 0.0 && self.perturbation_scale.is_finite()) {
            return bad("perturbation_scale must be positive");
        }
        if !(self.jitter > 0.0 && self.jitter <= MAX_JITTER) {
            return bad("jitter must be in (0, 1e-4]");
        }
        if self.kernel.weight_var <= 0.0 || self.kernel.bias_var < 0.0 {
            return bad("kernel variances must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub point: Vec<f64>,
    pub log_ei: f64,
}

const REFINE_TRIALS: usize = 8;
const REFINE_DECAY: f64 = 0.7;

/// Candidate pool scored by log EI, best first. Each perturbed candidate
/// moves a random subset of coordinates of `incumbent` (about 20 on
/// average, all of them in low dimension) by Gaussian steps. The best few
/// candidates are then refined by a short stochastic hill climb on the
/// acquisition, in place, so the pool size is unchanged. Only searches of
/// at most `refine_max_dim` dimensions are refined.
pub fn propose(
    state: &GpState,
    space: SearchSpace,
    incumbent: &[f64],
    best: f64,
    config: &OptRunConfig,
    rng: &mut Rng,
) -> Result<Vec<Candidate>> {
    let dim = incumbent.len();
    let n_random = ((config.candidates as f64) * config.random_fraction).round() as usize;
    let prob = (20.0 / dim.max(1) as f64).min(1.0);
    let mut pool = Vec::with_capacity(config.candidates);
    for i in 0..config.candidates {
        if i < n_random {
            pool.push(space.random_point(dim, rng));
            continue;
        }
        let scale = config.perturbation_scale;
        let mut point = incumbent.to_vec();
        let mut moved = false;
        for x in point.iter_mut() {
            if rng.bernoulli(prob) {
                *x = space.perturb(*x, scale * rng.normal());
                moved = true;
            }
        }
        if !moved && dim > 0 {
            let j = rng.below(dim);
            point[j] = space.perturb(point[j], scale * rng.normal());
        }
        pool.push(point);
    }
    let score = |point: &[f64]| -> Result<f64> {
        let (m, v) = gp_posterior(state, &space.featurize(point))?;
        Ok(log_ei(m, v, best))
    };
    let mut scored = pool
        .into_iter()
        .map(|point| {
            Ok(Candidate {
                log_ei: score(&point)?,
                point,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // Stable: equal scores keep pool order.
    scored.sort_by(|a, b| b.log_ei.total_cmp(&a.log_ei));

    // Hill-climb the leaders on the acquisition with shrinking steps.
    let starts = if dim <= config.refine_max_dim { config.refine_starts } else { 0 };
    for cand in scored.iter_mut().take(starts) {
        let mut step = config.perturbation_scale;
        for _ in 0..config.refine_rounds {
            for _ in 0..REFINE_TRIALS {
                let mut trial = cand.point.clone();
                let j = rng.below(dim.max(1));
                for (k, x) in trial.iter_mut().enumerate() {
                    if k == j || rng.bernoulli(prob) {
                        *x = space.perturb(*x, step * rng.normal());
                    }
                }
                let value = score(&trial)?;
                if value > cand.log_ei {
                    cand.point = trial;
                    cand.log_ei = value;
                }
            }
            step *= REFINE_DECAY;
        }
    }
    scored.sort_by(|a, b| b.log_ei.total_cmp(&a.log_ei));
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub point: Vec<f64>,
    pub value: f64,
    pub is_best_so_far: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptOutcome {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug)]
pub enum FailureCause<E> {
    Objective(E),
    Optimizer(BayesOptError),
}

/// A failed run keeps the history evaluated so far.
#[derive(Debug)]
pub struct OptFailure<E> {
    pub history: Vec<HistoryEntry>,
    pub cause: FailureCause<E>,
}

impl<E: std::fmt::Display> std::fmt::Display for OptFailure<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.cause {
            FailureCause::Objective(e) => write!(f, "objective failed after {} evaluations: {e}", self.history.len()),
            FailureCause::Optimizer(e) => write!(f, "optimizer failed after {} evaluations: {e}", self.history.len()),
        }
    }
}

impl<E: std::fmt::Debug + std::fmt::Display> std::error::Error for OptFailure<E> {}

/// Maximizes `objective` over `dim` parameters of `space`. Exactly
/// `config.iterations` evaluations are made; ties for the best value keep
/// the earliest point.
pub fn run<E, F>(
    mut objective: F,
    dim: usize,
    space: SearchSpace,
    config: &OptRunConfig,
) -> std::result::Result<OptOutcome, OptFailure<E>>
where
    F: FnMut(&[f64]) -> std::result::Result<f64, E>,
{
    let mut history: Vec<HistoryEntry> = Vec::with_capacity(config.iterations);
    if let Err(e) = config.validate() {
        return Err(OptFailure {
            history,
            cause: FailureCause::Optimizer(e),
        });
    }
    let mut rng = Rng::seed_from(config.seed);
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut best: Option<(usize, f64)> = None;

    for iteration in 0..config.iterations {
        let point = if iteration < config.initial_points {
            if iteration == 0 && config.include_identity {
                space.identity_point(dim)
            } else {
                space.random_point(dim, &mut rng)
            }
        } else {
            let (bi, bv) = best.expect("initial design evaluated");
            let proposal = gp_fit(&features, &values, config.kernel, config.jitter)
                .and_then(|gp| propose(&gp, space, &history[bi].point, bv, config, &mut rng));
            match proposal {
                Ok(pool) => pool.into_iter().next().expect("nonempty pool").point,
                Err(e) => {
                    return Err(OptFailure {
                        history,
                        cause: FailureCause::Optimizer(e),
                    })
                }
            }
        };
        let value = match objective(&point) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                return Err(OptFailure {
                    history,
                    cause: FailureCause::Optimizer(BayesOptError::NonFiniteValue(v)),
                })
            }
            Err(e) => {
                return Err(OptFailure {
                    history,
                    cause: FailureCause::Objective(e),
                })
            }
        };
        let improved = best.map_or(true, |(_, b)| value > b);
        if improved {
            best = Some((iteration, value));
        }
        features.push(space.featurize(&point));
        values.push(value);
        history.push(HistoryEntry {
            iteration,
            point,
            value,
            is_best_so_far: improved,
        });
    }
    let (bi, best_value) = best.expect("at least one evaluation");
    Ok(OptOutcome {
        best_point: history[bi].point.clone(),
        best_value,
        history,
    })
}

/// Intervention family searched by [`run_intervention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMechanism {
    /// `d/2` angles per layer on the torus.
    Rotation,
    /// One gain in `[0, 1]` per head and layer.
    Rescaling,
}

impl SearchMechanism {
    pub fn space(&self) -> SearchSpace {
        match self {
            SearchMechanism::Rotation => SearchSpace::Torus,
            SearchMechanism::Rescaling => SearchSpace::UnitBox,
        }
    }

    /// Parameters per intervened layer.
    pub fn width(&self, model: &ModelConfig) -> usize {
        match self {
            SearchMechanism::Rotation => model.d_model / 2,
            SearchMechanism::Rescaling => model.n_heads,
        }
    }

    /// Intervention for a flat parameter vector (layers ascending).
    pub fn spec(&self, layer_set: &[usize], model: &ModelConfig, flat: &[f64]) -> Result<InterventionSpec> {
        let width = self.width(model);
        let built = match self {
            SearchMechanism::Rotation => RotationConfig::from_flat(layer_set, width, flat).map(InterventionSpec::rotation),
            SearchMechanism::Rescaling => RescaleConfig::from_flat(layer_set, width, flat).map(InterventionSpec::rescaling),
        };
        let spec = built.map_err(|e| BayesOptError::InvalidConfig(e.to_string()))?;
        spec.validate(model)
            .map_err(|e| BayesOptError::InvalidConfig(e.to_string()))?;
        Ok(spec)
    }
}

/// Runs [`run`] over the parameters of `mechanism` on `layer_set` and
/// returns the best intervention with the full history.
pub fn run_intervention<E, F>(
    mut objective: F,
    mechanism: SearchMechanism,
    layer_set: &[usize],
    model: &ModelConfig,
    config: &OptRunConfig,
) -> std::result::Result<(InterventionSpec, OptOutcome), OptFailure<E>>
where
    F: FnMut(&InterventionSpec) -> std::result::Result<f64, E>,
{
    let dim = layer_set.len() * mechanism.width(model);
    let setup = |e| OptFailure {
        history: Vec::new(),
        cause: FailureCause::Optimizer(e),
    };
    if dim == 0 {
        return Err(setup(BayesOptError::InvalidConfig("empty layer set".into())));
    }
    mechanism
        .spec(layer_set, model, &mechanism.space().identity_point(dim))
        .map_err(setup)?;
    let outcome = run(
        |x: &[f64]| {
            let spec = mechanism
                .spec(layer_set, model, x)
                .expect("flat vector has the validated shape");
            objective(&spec)
        },
        dim,
        mechanism.space(),
        config,
    )?;
    let best = mechanism
        .spec(layer_set, model, &outcome.best_point)
        .expect("best point has the validated shape");
    Ok((best, outcome))
}
