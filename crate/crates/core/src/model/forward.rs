// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{LayerParams, ModelConfig, ModelError, ModelParams, Result, LAYER_NORM_EPS};
use crate::intervention::{make_hook, Hook, InterventionSpec};
use crate::linalg::{argmax, matmul_bt, matvec, Matrix};

/// Last-token residual snapshots of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    /// `L + 1` vectors: the embedding, then the stream after each block.
    pub residuals: Vec<Vec<f64>>,
    /// Final LayerNorm applied to the last residual.
    pub final_normed: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Next-token logits at the last position plus the residual trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub trace: ResidualTrace,
}

pub(crate) struct NormOut {
    pub y: Matrix,
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> NormOut {
    let (t, d) = x.shape();
    let mut y = Matrix::zeros(t, d);
    let mut xhat = Matrix::zeros(t, d);
    let mut inv_std = Vec::with_capacity(t);
    for i in 0..t {
        let row = x.row(i);
        let inv = normalize_into(row, xhat.row_mut(i));
        inv_std.push(inv);
        for (((o, &h), &g), &b) in y.row_mut(i).iter_mut().zip(xhat.row(i)).zip(gain).zip(bias) {
            *o = g * h + b;
        }
    }
    NormOut { y, xhat, inv_std }
}

/// Writes the standardized `row` into `out`; returns `1/σ`.
fn normalize_into(row: &[f64], out: &mut [f64]) -> f64 {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - mean) * inv;
    }
    inv
}

pub(crate) fn layer_norm_vec(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    normalize_into(x, &mut out);
    for ((o, &g), &b) in out.iter_mut().zip(gain).zip(bias) {
        *o = g * *o + b;
    }
    out
}

/// Cos/sin table for rotary positions, `[position][pair]`.
pub(crate) struct RopeTable {
    cos: Vec<f64>,
    sin: Vec<f64>,
    half: usize,
}

impl RopeTable {
    pub fn new(config: &ModelConfig, len: usize) -> Self {
        let half = config.head_dim() / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for pos in 0..len {
            for i in 0..half {
                let freq = config.rope_base.powf(-(2.0 * i as f64) / config.head_dim() as f64);
                let (s, c) = (pos as f64 * freq).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Self { cos, sin, half }
    }

    /// Rotates every head slice of every row by its position angle
    /// (`sign = -1.0` applies the inverse).
    pub fn apply(&self, m: &mut Matrix, sign: f64) {
        let head_dim = self.half * 2;
        for pos in 0..m.rows() {
            let cos = &self.cos[pos * self.half..(pos + 1) * self.half];
            let sin = &self.sin[pos * self.half..(pos + 1) * self.half];
            for head in m.row_mut(pos).chunks_exact_mut(head_dim) {
                for ((pair, &c), &s) in head.chunks_exact_mut(2).zip(cos).zip(sin) {
                    let s = sign * s;
                    let (x, y) = (pair[0], pair[1]);
                    pair[0] = c * x - s * y;
                    pair[1] = s * x + c * y;
                }
            }
        }
    }
}

pub(crate) struct AttnCache {
    pub norm: NormOut,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// One causal `T × T` probability matrix per head.
    pub probs: Vec<Matrix>,
    /// Concatenated head outputs before the hook.
    pub z: Matrix,
}

/// Pre-LN attention sublayer; returns `x + W_O · hook(concat)`.
pub(crate) fn attention_sublayer(
    config: &ModelConfig,
    lp: &LayerParams,
    x: &Matrix,
    rope: &RopeTable,
    hook: Option<&Hook<'_>>,
) -> Result<(Matrix, AttnCache)> {
    let (t, d) = x.shape();
    let head_dim = config.head_dim();
    if let Some(h) = hook {
        let expected = h.expected_width(head_dim);
        if expected != d {
            return Err(ModelError::HookWidth { expected, got: d });
        }
    }
    let norm = layer_norm(x, &lp.ln1_gain, &lp.ln1_bias);
    let mut q = matmul_bt(&norm.y, &lp.w_q)?;
    let mut k = matmul_bt(&norm.y, &lp.w_k)?;
    let v = matmul_bt(&norm.y, &lp.w_v)?;
    rope.apply(&mut q, 1.0);
    rope.apply(&mut k, 1.0);

    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut z = Matrix::zeros(t, d);
    let mut probs = Vec::with_capacity(config.n_heads);
    let mut scores = vec![0.0; t];
    for h in 0..config.n_heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        let mut p = Matrix::zeros(t, t);
        for i in 0..t {
            let qi = &q.row(i)[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                *s = crate::linalg::dot(qi, &k.row(j)[cols.clone()]) * scale;
                max = max.max(*s);
            }
            let mut total = 0.0;
            for s in &mut scores[..=i] {
                *s = (*s - max).exp();
                total += *s;
            }
            let prow = p.row_mut(i);
            for (pj, s) in prow.iter_mut().zip(&scores[..=i]) {
                *pj = s / total;
            }
            let zi = &mut z.row_mut(i)[cols.clone()];
            for j in 0..=i {
                let a = p.get(i, j);
                for (o, &vv) in zi.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += a * vv;
                }
            }
        }
        probs.push(p);
    }

    let mut hooked = z.clone();
    if let Some(h) = hook {
        for i in 0..t {
            h.apply(hooked.row_mut(i))?;
        }
    }
    let mut out = matmul_bt(&hooked, &lp.w_o)?;
    out.add_scaled(x, 1.0);
    Ok((
        out,
        AttnCache {
            norm,
            q,
            k,
            v,
            probs,
            z,
        },
    ))
}

pub(crate) struct MlpCache {
    pub norm: NormOut,
    pub pre: Matrix,
    pub act: Matrix,
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// tanh-approximated GELU.
pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (SQRT_2_OVER_PI * (u + GELU_C * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let th = (SQRT_2_OVER_PI * (u + GELU_C * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * u * u)
}

pub(crate) fn mlp_sublayer(lp: &LayerParams, x: &Matrix) -> Result<(Matrix, MlpCache)> {
    let norm = layer_norm(x, &lp.ln2_gain, &lp.ln2_bias);
    let pre = matmul_bt(&norm.y, &lp.mlp_in)?;
    let act = Matrix::from_vec(
        pre.rows(),
        pre.cols(),
        pre.as_slice().iter().map(|&u| gelu(u)).collect(),
    );
    let mut out = matmul_bt(&act, &lp.mlp_out)?;
    out.add_scaled(x, 1.0);
    Ok((out, MlpCache { norm, pre, act }))
}

/// Embedding lookup: row `i` is column `tokens[i]` of `W_E`.
pub fn embed(tokens: &[u32], params: &ModelParams) -> Result<Matrix> {
    params.config.check_tokens(tokens)?;
    let d = params.config.d_model;
    let mut x = Matrix::zeros(tokens.len(), d);
    for (i, &tok) in tokens.iter().enumerate() {
        for (r, o) in x.row_mut(i).iter_mut().enumerate() {
            *o = params.w_e.get(r, tok as usize);
        }
    }
    Ok(x)
}

fn check_layer_and_streams(params: &ModelParams, layer: usize, streams: &Matrix) -> Result<()> {
    let cfg = &params.config;
    if layer >= cfg.n_layers {
        return Err(ModelError::LayerOutOfRange {
            layer,
            n_layers: cfg.n_layers,
        });
    }
    if streams.cols() != cfg.d_model {
        return Err(ModelError::StreamWidth {
            expected: cfg.d_model,
            got: streams.cols(),
        });
    }
    if streams.rows() == 0 {
        return Err(ModelError::EmptySequence);
    }
    if streams.rows() > cfg.max_seq {
        return Err(ModelError::SequenceTooLong {
            len: streams.rows(),
            max: cfg.max_seq,
        });
    }
    Ok(())
}

/// Attention sublayer of `layer` on a sequence of residual vectors (one per
/// row); returns the updated residual stream. The optional hook transforms
/// the concatenated head outputs before `W_O`.
pub fn attention_forward(
    params: &ModelParams,
    layer: usize,
    streams: &Matrix,
    hook: Option<&Hook<'_>>,
) -> Result<Matrix> {
    check_layer_and_streams(params, layer, streams)?;
    let rope = RopeTable::new(&params.config, streams.rows());
    let (out, _) = attention_sublayer(&params.config, &params.layers[layer], streams, &rope, hook)?;
    Ok(out)
}

/// MLP sublayer of `layer`; returns the updated residual stream.
pub fn mlp_forward(params: &ModelParams, layer: usize, streams: &Matrix) -> Result<Matrix> {
    check_layer_and_streams(params, layer, streams)?;
    Ok(mlp_sublayer(&params.layers[layer], streams)?.0)
}

/// Full forward pass, optionally intervened.
pub fn forward(
    tokens: &[u32],
    params: &ModelParams,
    spec: Option<&InterventionSpec>,
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    if let Some(s) = spec {
        s.validate(cfg)?;
    }
    let mut x = embed(tokens, params)?;
    let last = tokens.len() - 1;
    let rope = RopeTable::new(cfg, tokens.len());
    let mut residuals = Vec::with_capacity(cfg.n_layers + 1);
    residuals.push(x.row(last).to_vec());
    for (l, lp) in params.layers.iter().enumerate() {
        let hook = spec.and_then(|s| make_hook(s, l));
        x = attention_sublayer(cfg, lp, &x, &rope, hook.as_ref())?.0;
        x = mlp_sublayer(lp, &x)?.0;
        residuals.push(x.row(last).to_vec());
    }
    let final_normed = layer_norm_vec(x.row(last), &params.lnf_gain, &params.lnf_bias);
    let logits = matvec(&params.w_u, &final_normed)?;
    Ok(ForwardOutput {
        logits: logits.clone(),
        trace: ResidualTrace {
            residuals,
            final_normed,
            logits,
        },
    })
}

/// Greedy decoding: each emitted token is the argmax of the (intervened)
/// forward pass on the growing prefix. Stops after `max_steps` tokens or
/// right after emitting `end_token`.
pub fn generate(
    tokens: &[u32],
    params: &ModelParams,
    spec: Option<&InterventionSpec>,
    max_steps: usize,
    end_token: Option<u32>,
) -> Result<Vec<u32>> {
    if max_steps == 0 {
        return Err(ModelError::NoSteps);
    }
    let mut prefix = tokens.to_vec();
    let mut out = Vec::with_capacity(max_steps);
    for _ in 0..max_steps {
        if prefix.len() > params.config.max_seq {
            return Err(ModelError::ContextOverflow {
                max: params.config.max_seq,
            });
        }
        let logits = forward(&prefix, params, spec)?.logits;
        let next = argmax(&logits).expect("vocabulary is nonempty") as u32;
        out.push(next);
        if Some(next) == end_token {
            break;
        }
        prefix.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intervention::{RescaleConfig, RotationConfig};
    use crate::linalg::Rng;

    fn small() -> ModelParams {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 3,
            vocab_size: 12,
            d_ff: 16,
            rope_base: 10_000.0,
            max_seq: 16,
        };
        ModelParams::init_with_std(cfg, 7, 0.3).unwrap()
    }

    #[test]
    fn embedding_reads_columns() {
        let p = small();
        let x = embed(&[3, 3, 5], &p).unwrap();
        assert_eq!(x.row(0), x.row(1));
        assert_eq!(x.row(2).to_vec(), p.w_e.col(5));
        assert!(matches!(
            embed(&[1, 12], &p),
            Err(ModelError::TokenOutOfRange { position: 1, .. })
        ));
    }

    #[test]
    fn identity_embedding_gives_basis_vectors() {
        let cfg = ModelConfig {
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            vocab_size: 4,
            d_ff: 4,
            rope_base: 10_000.0,
            max_seq: 4,
        };
        let mut p = ModelParams::init(cfg, 0).unwrap();
        p.w_e = Matrix::identity(4);
        assert_eq!(embed(&[2], &p).unwrap().row(0), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let p = small();
        let x = embed(&[4], &p).unwrap();
        let out = attention_forward(&p, 0, &x, None).unwrap();
        let lp = &p.layers[0];
        let h = layer_norm_vec(x.row(0), &lp.ln1_gain, &lp.ln1_bias);
        let v = matvec(&lp.w_v, &h).unwrap();
        let o = matvec(&lp.w_o, &v).unwrap();
        for ((got, base), add) in out.row(0).iter().zip(x.row(0)).zip(&o) {
            assert!((got - (base + add)).abs() < 1e-14);
        }
    }

    #[test]
    fn rope_is_identity_at_position_zero() {
        let p = small();
        let rope = RopeTable::new(&p.config, 3);
        let mut rng = Rng::seed_from(0);
        let mut m = Matrix::random_normal(3, 8, 1.0, &mut rng);
        let before = m.clone();
        rope.apply(&mut m, 1.0);
        assert_eq!(m.row(0), before.row(0));
        assert_ne!(m.row(2), before.row(2));
        rope.apply(&mut m, -1.0);
        assert!(m.max_abs_diff(&before) < 1e-14);
    }

    #[test]
    fn causal_under_future_mutation() {
        let p = small();
        let a = embed(&[1, 2, 3], &p).unwrap();
        let b = embed(&[1, 2, 9], &p).unwrap();
        for l in 0..3 {
            let oa = attention_forward(&p, l, &a, None).unwrap();
            let ob = attention_forward(&p, l, &b, None).unwrap();
            assert_eq!(oa.row(0), ob.row(0));
            assert_eq!(oa.row(1), ob.row(1));
        }
        let fa = forward(&[1, 2], &p, None).unwrap();
        let prefix_b = forward(&[1, 2, 7, 8], &p, None).unwrap();
        let again = forward(&[1, 2], &p, None).unwrap();
        assert_eq!(fa, again);
        assert_ne!(fa.logits, prefix_b.logits);
    }

    #[test]
    fn identity_hooks_are_bitwise_noops() {
        let p = small();
        let x = embed(&[1, 5, 2, 7], &p).unwrap();
        let zeros = vec![0.0; 4];
        let ones = vec![1.0; 2];
        let base = attention_forward(&p, 1, &x, None).unwrap();
        assert_eq!(attention_forward(&p, 1, &x, Some(&Hook::Rotate(&zeros))).unwrap(), base);
        assert_eq!(attention_forward(&p, 1, &x, Some(&Hook::Rescale(&ones))).unwrap(), base);
        let narrow = vec![0.0; 3];
        assert!(matches!(
            attention_forward(&p, 1, &x, Some(&Hook::Rotate(&narrow))),
            Err(ModelError::HookWidth { expected: 6, got: 8 })
        ));
    }

    #[test]
    fn zero_rotation_forward_matches_base() {
        let p = small();
        let toks = [3, 1, 4, 1, 5];
        let base = forward(&toks, &p, None).unwrap();
        let rot = InterventionSpec::rotation(RotationConfig::zeros(&[0, 1], 4));
        let r = forward(&toks, &p, Some(&rot)).unwrap();
        assert_eq!(base, r);
        let gains = InterventionSpec::rescaling(RescaleConfig::ones(&[0, 2], 2));
        assert_eq!(base, forward(&toks, &p, Some(&gains)).unwrap());
        let mut c = RotationConfig::default();
        c.set_layer(0, vec![0.7; 4]).unwrap();
        let moved = forward(&toks, &p, Some(&InterventionSpec::rotation(c))).unwrap();
        assert_ne!(moved.logits, base.logits);
    }

    #[test]
    fn trace_is_complete_and_consistent() {
        let p = small();
        let out = forward(&[2, 3, 4], &p, None).unwrap();
        assert_eq!(out.trace.residuals.len(), 4);
        assert!(out.trace.residuals.iter().all(|r| r.len() == 8));
        let relogits = matvec(&p.w_u, &out.trace.final_normed).unwrap();
        assert_eq!(relogits, out.logits);
        let renormed = layer_norm_vec(&out.trace.residuals[3], &p.lnf_gain, &p.lnf_bias);
        assert_eq!(renormed, out.trace.final_normed);
    }

    #[test]
    fn bad_spec_layer_rejected() {
        let p = small();
        let spec = InterventionSpec::rotation(RotationConfig::zeros(&[3], 4));
        assert!(matches!(
            forward(&[1], &p, Some(&spec)),
            Err(ModelError::Intervention(_))
        ));
    }

    #[test]
    fn generate_one_step_and_determinism() {
        let p = small();
        let prompt = [1, 2, 3];
        let one = generate(&prompt, &p, None, 1, None).unwrap();
        let logits = forward(&prompt, &p, None).unwrap().logits;
        assert_eq!(one, vec![argmax(&logits).unwrap() as u32]);
        let a = generate(&prompt, &p, None, 6, None).unwrap();
        let b = generate(&prompt, &p, None, 6, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(matches!(generate(&prompt, &p, None, 0, None), Err(ModelError::NoSteps)));
        assert!(matches!(
            generate(&[1; 15], &p, None, 4, None),
            Err(ModelError::ContextOverflow { max: 16 })
        ));
        let stop = a[0];
        assert_eq!(generate(&prompt, &p, None, 6, Some(stop)).unwrap(), vec![stop]);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &u in &[-3.0, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }
}
