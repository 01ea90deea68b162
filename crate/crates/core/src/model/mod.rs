// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal decoder-only transformer.
//!
//! Pre-LayerNorm blocks with rotary positions on queries and keys, causal
//! multi-head attention without projection biases, and a bias-free GELU MLP.
//! Each attention block exposes a hook on the concatenated head outputs,
//! applied before the output projection `W_O`.

mod checkpoint;
mod forward;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{attention_forward, embed, forward, generate, mlp_forward, ForwardOutput, ResidualTrace};
pub use train::{loss_and_grads, train_step, Adam, AdamConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix, Rng};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {token} at position {position} is outside the vocabulary (size {vocab})")]
    TokenOutOfRange {
        position: usize,
        token: u32,
        vocab: usize,
    },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("training sequences need at least 2 tokens (got {0})")]
    SequenceTooShort(usize),
    #[error("hook expects width {expected}, attention output has width {got}")]
    HookWidth { expected: usize, got: usize },
    #[error("layer {layer} out of range (model has {n_layers})")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("residual width {got} does not match model width {expected}")]
    StreamWidth { expected: usize, got: usize },
    #[error("learning rate must be finite and nonnegative (got {0})")]
    InvalidLearningRate(f64),
    #[error("non-finite training loss")]
    NonFiniteLoss,
    #[error("generation would exceed max_seq {max}")]
    ContextOverflow { max: usize },
    #[error("max_steps must be at least 1")]
    NoSteps,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Intervention(#[from] crate::intervention::InterventionError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub d_ff: usize,
    pub rope_base: f64,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 8,
            vocab_size: 256,
            d_ff: 256,
            rope_base: 10_000.0,
            max_seq: 128,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_heads == 0 || self.d_model == 0 {
            return bad("d_model and n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even", self.head_dim()));
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2".into());
        }
        if self.n_layers == 0 || self.max_seq == 0 || self.d_ff == 0 {
            return bad("n_layers, d_ff and max_seq must be positive".into());
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return bad(format!("rope_base must be positive (got {})", self.rope_base));
        }
        Ok(())
    }

    /// Checks ids and length of a prompt.
    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.max_seq,
            });
        }
        if let Some((position, &token)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= self.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                position,
                token,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    /// `d_ff × d`
    pub mlp_in: Matrix,
    /// `d × d_ff`
    pub mlp_out: Matrix,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
}

/// All model weights. `w_e` is `d × V` (one column per token) and `w_u` is
/// `V × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub w_e: Matrix,
    pub w_u: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Vec<f64>,
    pub lnf_bias: Vec<f64>,
}

impl ModelParams {
    /// Gaussian init (std 0.02) for every matrix; unit LayerNorm gains and
    /// zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, 0.02)
    }

    pub fn init_with_std(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from(seed);
        let (d, v, f) = (config.d_model, config.vocab_size, config.d_ff);
        let w_e = Matrix::random_normal(d, v, std, &mut rng);
        let w_u = Matrix::random_normal(v, d, std, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                w_q: Matrix::random_normal(d, d, std, &mut rng),
                w_k: Matrix::random_normal(d, d, std, &mut rng),
                w_v: Matrix::random_normal(d, d, std, &mut rng),
                w_o: Matrix::random_normal(d, d, std, &mut rng),
                mlp_in: Matrix::random_normal(f, d, std, &mut rng),
                mlp_out: Matrix::random_normal(d, f, std, &mut rng),
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
            })
            .collect();
        Ok(Self {
            config,
            w_e,
            w_u,
            layers,
            lnf_gain: vec![1.0; d],
            lnf_bias: vec![0.0; d],
        })
    }

    /// Same shapes, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every tensor in declaration order: `w_e`, `w_u`, then per layer
    /// `w_q, w_k, w_v, w_o, mlp_in, mlp_out, ln1_gain, ln1_bias, ln2_gain,
    /// ln2_bias`, then `lnf_gain, lnf_bias`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.w_e.as_slice(), self.w_u.as_slice()];
        for l in &self.layers {
            out.extend([
                l.w_q.as_slice(),
                l.w_k.as_slice(),
                l.w_v.as_slice(),
                l.w_o.as_slice(),
                l.mlp_in.as_slice(),
                l.mlp_out.as_slice(),
                &l.ln1_gain[..],
                &l.ln1_bias[..],
                &l.ln2_gain[..],
                &l.ln2_bias[..],
            ]);
        }
        out.push(&self.lnf_gain);
        out.push(&self.lnf_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.w_e.as_mut_slice(), self.w_u.as_mut_slice()];
        for l in &mut self.layers {
            out.push(l.w_q.as_mut_slice());
            out.push(l.w_k.as_mut_slice());
            out.push(l.w_v.as_mut_slice());
            out.push(l.w_o.as_mut_slice());
            out.push(l.mlp_in.as_mut_slice());
            out.push(l.mlp_out.as_mut_slice());
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}
