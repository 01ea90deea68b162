// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit-lens diagnostics: per-layer answer probabilities, base vs
//! intervened deltas, final-logit extremes, and alignment of residuals with
//! the singular directions of the unembedding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::intervention::InterventionSpec;
use crate::linalg::{dot, log_sum_exp, matvec, norm, svd, LinalgError};
use crate::model::{forward, ModelError, ModelParams, ResidualTrace};
use crate::objectives::TaskDataset;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("answer token {token} is outside the vocabulary of {vocab}")]
    AnswerOutOfRange { token: u32, vocab: usize },
    #[error("trace has {got} residuals, the model needs {expected}")]
    TraceShape { got: usize, expected: usize },
    #[error("profiles have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Which LayerNorm is applied to an intermediate residual before unembedding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LensNorm {
    /// The final LayerNorm for every layer.
    #[default]
    Final,
    /// The input LayerNorm of the block that reads the residual; the final
    /// LayerNorm for the last one.
    PerLayer,
}

/// Probability of the answer token read off each of the `L + 1` residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProbProfile {
    pub answer: u32,
    pub probabilities: Vec<f64>,
}

fn normalize(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + crate::model::LAYER_NORM_EPS).sqrt();
    x.iter()
        .zip(gain)
        .zip(bias)
        .map(|((v, g), b)| g * (v - mean) * inv + b)
        .collect()
}

fn check_trace(trace: &ResidualTrace, params: &ModelParams) -> Result<()> {
    let expected = params.config.n_layers + 1;
    let d = params.config.d_model;
    if trace.residuals.len() != expected || trace.residuals.iter().any(|r| r.len() != d) {
        return Err(AnalysisError::TraceShape {
            got: trace.residuals.len(),
            expected,
        });
    }
    Ok(())
}

/// Residual `l` after the selected LayerNorm.
pub fn lens_residual(trace: &ResidualTrace, params: &ModelParams, l: usize, norm: LensNorm) -> Vec<f64> {
    let x = &trace.residuals[l];
    match norm {
        LensNorm::PerLayer if l < params.layers.len() => {
            let lp = &params.layers[l];
            normalize(x, &lp.ln1_gain, &lp.ln1_bias)
        }
        _ => normalize(x, &params.lnf_gain, &params.lnf_bias),
    }
}

/// Unembedded distribution of each residual, read at `answer`.
pub fn logit_attribution(
    trace: &ResidualTrace,
    params: &ModelParams,
    answer: u32,
    norm: LensNorm,
) -> Result<LayerProbProfile> {
    let vocab = params.config.vocab_size;
    if answer as usize >= vocab {
        return Err(AnalysisError::AnswerOutOfRange { token: answer, vocab });
    }
    check_trace(trace, params)?;
    let probabilities = (0..trace.residuals.len())
        .map(|l| {
            let logits = matvec(&params.w_u, &lens_residual(trace, params, l, norm))?;
            Ok((logits[answer as usize] - log_sum_exp(&logits)).exp())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerProbProfile { answer, probabilities })
}

/// Per-layer `intervened − base`.
pub fn prob_delta(base: &LayerProbProfile, intervened: &LayerProbProfile) -> Result<Vec<f64>> {
    let (a, b) = (&base.probabilities, &intervened.probabilities);
    if a.len() != b.len() {
        return Err(AnalysisError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| y - x).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; the last bin is closed. A zero-width
    /// range puts everything in the first bin.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins.max(1)];
        let width = (hi - lo) / counts.len() as f64;
        for &v in values {
            let i = if width > 0.0 { ((v - lo) / width).floor() as usize } else { 0 };
            let last = counts.len() - 1;
            counts[i.min(last)] += 1;
        }
        Self { lo, hi, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub histogram: Histogram,
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitExtremes {
    /// `(max logit, min logit)` per example.
    pub per_example: Vec<(f64, f64)>,
    pub max: Summary,
    pub min: Summary,
}

fn summarize(values: &[f64], lo: f64, hi: f64) -> Summary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Summary {
        mean,
        std: var.sqrt(),
        histogram: Histogram::new(values, lo, hi, HISTOGRAM_BINS),
    }
}

/// Summary of the per-example extremes of stored final logits. Both
/// histograms share one range so they can be overlaid.
pub fn extremes_from_logits(logits: &[Vec<f64>]) -> Result<LogitExtremes> {
    if logits.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    let per_example: Vec<(f64, f64)> = logits
        .iter()
        .map(|l| {
            let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = l.iter().copied().fold(f64::INFINITY, f64::min);
            (max, min)
        })
        .collect();
    let maxes: Vec<f64> = per_example.iter().map(|p| p.0).collect();
    let mins: Vec<f64> = per_example.iter().map(|p| p.1).collect();
    let lo = mins.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = maxes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(LogitExtremes {
        max: summarize(&maxes, lo, hi),
        min: summarize(&mins, lo, hi),
        per_example,
    })
}

/// Max and min final logits over the prompts of `dataset`.
pub fn logit_extremes(
    params: &ModelParams,
    spec: Option<&InterventionSpec>,
    dataset: &TaskDataset,
) -> Result<LogitExtremes> {
    if dataset.examples.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    let logits = dataset
        .examples
        .par_iter()
        .map(|ex| Ok(forward(&ex.prompt, params, spec)?.logits))
        .collect::<Result<Vec<_>>>()?;
    extremes_from_logits(&logits)
}

/// Singular values of `W_U` and, per layer, the cosine between the residual
/// and each right-singular direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentProfile {
    /// Descending.
    pub singular_values: Vec<f64>,
    /// `[layer][direction]`, on residuals after the final LayerNorm.
    pub post_norm: Vec<Vec<f64>>,
    /// `[layer][direction]`, on raw residuals.
    pub raw: Vec<Vec<f64>>,
}

/// Right-singular directions of `W_U`, each flipped so that its
/// largest-magnitude component (first on ties) is positive.
pub fn unembedding_directions(params: &ModelParams) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let s = svd(&params.w_u)?;
    let dirs = (0..s.vt.rows())
        .map(|k| {
            let mut row = s.vt.row(k).to_vec();
            let mut pivot = 0;
            for (i, v) in row.iter().enumerate() {
                if v.abs() > row[pivot].abs() {
                    pivot = i;
                }
            }
            if row[pivot] < 0.0 {
                row.iter_mut().for_each(|v| *v = -*v);
            }
            row
        })
        .collect();
    Ok((s.singular_values, dirs))
}

/// Cosine of `x` with each (unit) direction; zero for a zero vector.
pub fn cosines(x: &[f64], directions: &[Vec<f64>]) -> Vec<f64> {
    let n = norm(x);
    directions
        .iter()
        .map(|d| if n > 0.0 { dot(x, d) / (n * norm(d)) } else { 0.0 })
        .collect()
}

pub fn unembedding_alignment(params: &ModelParams, trace: &ResidualTrace) -> Result<AlignmentProfile> {
    check_trace(trace, params)?;
    let (singular_values, dirs) = unembedding_directions(params)?;
    let layers = 0..trace.residuals.len();
    let post_norm = layers
        .clone()
        .map(|l| cosines(&lens_residual(trace, params, l, LensNorm::Final), &dirs))
        .collect();
    let raw = layers.map(|l| cosines(&trace.residuals[l], &dirs)).collect();
    Ok(AlignmentProfile {
        singular_values,
        post_norm,
        raw,
    })
}
