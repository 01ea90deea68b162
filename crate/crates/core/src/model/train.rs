// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token cross-entropy with a hand-written backward pass.

use serde::{Deserialize, Serialize};

use super::forward::{
    attention_sublayer, embed, gelu_grad, layer_norm, mlp_sublayer, AttnCache, MlpCache, NormOut,
    RopeTable,
};
use super::{ModelError, ModelParams, Result};
use crate::linalg::{log_sum_exp, matmul, matmul_at, matmul_bt, Matrix};

/// Backward through a LayerNorm; accumulates gain/bias gradients and returns
/// the gradient with respect to the LayerNorm input.
fn layer_norm_backward(
    dy: &Matrix,
    norm: &NormOut,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Matrix {
    let (t, d) = dy.shape();
    let mut dx = Matrix::zeros(t, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let dyi = dy.row(i);
        let xh = norm.xhat.row(i);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..d {
            dgain[c] += dyi[c] * xh[c];
            dbias[c] += dyi[c];
            dxhat[c] = dyi[c] * gain[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xh[c];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let inv = norm.inv_std[i];
        for (c, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = inv * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
    dx
}

/// Accumulates `weight · ∇(Σ_t CE_t)` for one sequence into `grads` and
/// returns the summed (unweighted) loss.
fn sequence_grads(
    params: &ModelParams,
    tokens: &[u32],
    grads: &mut ModelParams,
    weight: f64,
) -> Result<f64> {
    let cfg = &params.config;
    let t = tokens.len();
    let head_dim = cfg.head_dim();
    let rope = RopeTable::new(cfg, t);

    let mut x = embed(tokens, params)?;
    let mut caches: Vec<(AttnCache, MlpCache)> = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let (mid, ac) = attention_sublayer(cfg, lp, &x, &rope, None)?;
        let (out, mc) = mlp_sublayer(lp, &mid)?;
        caches.push((ac, mc));
        x = out;
    }
    let nf = layer_norm(&x, &params.lnf_gain, &params.lnf_bias);
    let logits = matmul_bt(&nf.y, &params.w_u)?;

    let v = cfg.vocab_size;
    let mut dlogits = Matrix::zeros(t, v);
    let mut loss = 0.0;
    for i in 0..t - 1 {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        let target = tokens[i + 1] as usize;
        loss += lse - row[target];
        let drow = dlogits.row_mut(i);
        for (o, &z) in drow.iter_mut().zip(row) {
            *o = weight * (z - lse).exp();
        }
        drow[target] -= weight;
    }
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }

    grads.w_u.add_scaled(&matmul_at(&dlogits, &nf.y)?, 1.0);
    let dy = matmul(&dlogits, &params.w_u)?;
    let mut dx = layer_norm_backward(
        &dy,
        &nf,
        &params.lnf_gain,
        &mut grads.lnf_gain,
        &mut grads.lnf_bias,
    );

    let scale = 1.0 / (head_dim as f64).sqrt();
    for (l, (ac, mc)) in caches.iter().enumerate().rev() {
        let lp = &params.layers[l];
        let g = &mut grads.layers[l];

        // MLP sublayer.
        g.mlp_out.add_scaled(&matmul_at(&dx, &mc.act)?, 1.0);
        let mut dpre = matmul(&dx, &lp.mlp_out)?;
        for (d, &u) in dpre.as_mut_slice().iter_mut().zip(mc.pre.as_slice()) {
            *d *= gelu_grad(u);
        }
        g.mlp_in.add_scaled(&matmul_at(&dpre, &mc.norm.y)?, 1.0);
        let dh2 = matmul(&dpre, &lp.mlp_in)?;
        let mut dmid = layer_norm_backward(&dh2, &mc.norm, &lp.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
        dmid.add_scaled(&dx, 1.0);

        // Attention sublayer.
        g.w_o.add_scaled(&matmul_at(&dmid, &ac.z)?, 1.0);
        let dz = matmul(&dmid, &lp.w_o)?;
        let d = cfg.d_model;
        let mut dq = Matrix::zeros(t, d);
        let mut dk = Matrix::zeros(t, d);
        let mut dv = Matrix::zeros(t, d);
        let mut da = vec![0.0; t];
        for (h, p) in ac.probs.iter().enumerate() {
            let cols = h * head_dim..(h + 1) * head_dim;
            for i in 0..t {
                let dzi = &dz.row(i)[cols.clone()];
                let mut weighted = 0.0;
                for j in 0..=i {
                    da[j] = crate::linalg::dot(dzi, &ac.v.row(j)[cols.clone()]);
                    weighted += p.get(i, j) * da[j];
                    let pij = p.get(i, j);
                    for (o, &g) in dv.row_mut(j)[cols.clone()].iter_mut().zip(dzi) {
                        *o += pij * g;
                    }
                }
                for j in 0..=i {
                    let ds = p.get(i, j) * (da[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &ac.k.row(j)[cols.clone()];
                    for (o, &kk) in dq.row_mut(i)[cols.clone()].iter_mut().zip(kj) {
                        *o += ds * kk;
                    }
                    let qi = &ac.q.row(i)[cols.clone()];
                    for (o, &qq) in dk.row_mut(j)[cols.clone()].iter_mut().zip(qi) {
                        *o += ds * qq;
                    }
                }
            }
        }
        rope.apply(&mut dq, -1.0);
        rope.apply(&mut dk, -1.0);
        g.w_q.add_scaled(&matmul_at(&dq, &ac.norm.y)?, 1.0);
        g.w_k.add_scaled(&matmul_at(&dk, &ac.norm.y)?, 1.0);
        g.w_v.add_scaled(&matmul_at(&dv, &ac.norm.y)?, 1.0);
        let mut dh1 = matmul(&dq, &lp.w_q)?;
        dh1.add_scaled(&matmul(&dk, &lp.w_k)?, 1.0);
        dh1.add_scaled(&matmul(&dv, &lp.w_v)?, 1.0);
        let mut din = layer_norm_backward(&dh1, &ac.norm, &lp.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
        din.add_scaled(&dmid, 1.0);
        dx = din;
    }

    let vocab = cfg.vocab_size;
    let we = grads.w_e.as_mut_slice();
    for (i, &tok) in tokens.iter().enumerate() {
        for (r, &g) in dx.row(i).iter().enumerate() {
            we[r * vocab + tok as usize] += g;
        }
    }
    Ok(loss)
}

/// Mean next-token cross-entropy over every predicted position of the batch
/// and its gradient. Sequences are processed in order, so the result does not
/// depend on scheduling.
pub fn loss_and_grads(params: &ModelParams, batch: &[Vec<u32>]) -> Result<(f64, ModelParams)> {
    let mut count = 0usize;
    for seq in batch {
        if seq.len() < 2 {
            return Err(ModelError::SequenceTooShort(seq.len()));
        }
        params.config.check_tokens(seq)?;
        count += seq.len() - 1;
    }
    if count == 0 {
        return Err(ModelError::EmptySequence);
    }
    let weight = 1.0 / count as f64;
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for seq in batch {
        total += sequence_grads(params, seq, &mut grads, weight)?;
    }
    let loss = total * weight;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }
    Ok((loss, grads))
}

/// One plain SGD step on the mean next-token loss of `batch`.
pub fn train_step(
    params: &ModelParams,
    batch: &[Vec<u32>],
    learning_rate: f64,
) -> Result<(ModelParams, f64)> {
    if !(learning_rate.is_finite() && learning_rate >= 0.0) {
        return Err(ModelError::InvalidLearningRate(learning_rate));
    }
    let (loss, grads) = loss_and_grads(params, batch)?;
    let mut next = params.clone();
    for (p, g) in next.tensors_mut().into_iter().zip(grads.tensors()) {
        for (x, &dx) in p.iter_mut().zip(g) {
            *x -= learning_rate * dx;
        }
    }
    Ok((next, loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam moment state for a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: ModelParams,
    v: ModelParams,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, like: &ModelParams) -> Self {
        Self {
            config,
            m: like.zeros_like(),
            v: like.zeros_like(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One Adam update of `params` on `batch`; returns the pre-update loss.
    pub fn step(&mut self, params: &mut ModelParams, batch: &[Vec<u32>]) -> Result<f64> {
        let (loss, grads) = loss_and_grads(params, batch)?;
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let moments = self.m.tensors_mut().into_iter().zip(self.v.tensors_mut());
        for ((p, g), (m, v)) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(moments) {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};

    fn tiny(std: f64) -> ModelParams {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            vocab_size: 7,
            d_ff: 12,
            rope_base: 100.0,
            max_seq: 12,
        };
        ModelParams::init_with_std(cfg, 3, std).unwrap()
    }

    fn batch_loss(p: &ModelParams, batch: &[Vec<u32>]) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for seq in batch {
            for end in 1..seq.len() {
                let logits = forward(&seq[..end], p, None).unwrap().logits;
                total += log_sum_exp(&logits) - logits[seq[end] as usize];
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut p = tiny(0.4);
        // Non-trivial LayerNorm parameters so their gradients are exercised.
        for (i, l) in p.layers.iter_mut().enumerate() {
            for (c, g) in l.ln1_gain.iter_mut().enumerate() {
                *g = 1.0 + 0.1 * ((c + i) as f64).sin();
            }
            for (c, b) in l.ln2_bias.iter_mut().enumerate() {
                *b = 0.05 * (c as f64).cos();
            }
        }
        let batch = vec![vec![1, 4, 2, 6, 0], vec![3, 3, 5]];
        let (loss, grads) = loss_and_grads(&p, &batch).unwrap();
        assert!((loss - batch_loss(&p, &batch)).abs() < 1e-12);

        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        let h = 1e-5;
        for (ti, g) in analytic.iter().enumerate() {
            // A handful of entries per tensor keeps the test fast.
            for idx in (0..g.len()).step_by((g.len() / 5).max(1)) {
                let mut plus = p.clone();
                plus.tensors_mut()[ti][idx] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti][idx] -= h;
                let fd = (batch_loss(&plus, &batch) - batch_loss(&minus, &batch)) / (2.0 * h);
                let err = (fd - g[idx]).abs();
                assert!(
                    err <= 1e-6 + 1e-4 * fd.abs(),
                    "tensor {ti} entry {idx}: fd {fd} analytic {}",
                    g[idx]
                );
            }
        }
    }

    #[test]
    fn fresh_model_loss_near_uniform() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            vocab_size: 50,
            d_ff: 32,
            rope_base: 10_000.0,
            max_seq: 16,
        };
        let p = ModelParams::init(cfg, 1).unwrap();
        let (loss, _) = loss_and_grads(&p, &[vec![1, 2, 3, 4, 5, 6, 7, 8]]).unwrap();
        assert!((loss - 50f64.ln()).abs() < 0.05, "{loss}");
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let p = tiny(0.02);
        let (next, _) = train_step(&p, &[vec![1, 2, 3]], 0.0).unwrap();
        assert_eq!(next, p);
        assert!(matches!(
            train_step(&p, &[vec![1, 2, 3]], -1.0),
            Err(ModelError::InvalidLearningRate(_))
        ));
        assert!(matches!(
            train_step(&p, &[vec![1]], 0.1),
            Err(ModelError::SequenceTooShort(1))
        ));
    }

    #[test]
    fn sgd_descends_on_fixed_batch() {
        let mut p = tiny(0.1);
        let batch = vec![vec![1, 2, 3, 1, 2, 3, 1, 2], vec![4, 5, 4, 5, 4, 5]];
        let mut losses = Vec::new();
        for _ in 0..200 {
            let (next, loss) = train_step(&p, &batch, 0.2).unwrap();
            losses.push(loss);
            p = next;
        }
        for w in losses.windows(50) {
            assert!(w[49] < w[0]);
        }
        assert!(losses[199] < losses[0] * 0.5);
    }

    #[test]
    fn adam_descends() {
        let mut p = tiny(0.02);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let batch = vec![vec![1, 2, 3, 1, 2, 3]];
        let first = opt.step(&mut p, &batch).unwrap();
        for _ in 0..100 {
            opt.step(&mut p, &batch).unwrap();
        }
        assert!(opt.step(&mut p, &batch).unwrap() < first * 0.5);
    }
}
