// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-layer, single-head, attention-only language models and their
//! OV circuits.
//!
//! The forward pass predicts the token after the last position from the
//! direct path `W_U W_E t_n` plus one rotary attention head, with no
//! LayerNorm and no score scaling. Folding the value path into the `V×V`
//! matrix `W_U W_O W_V W_E` gives the OV circuit; its gradient under the
//! next-token cross-entropy with attention held fixed is the rank-1 update in
//! [`analytic_ov_update`]. [`train_and_probe`] trains every factor on planted
//! source → target associations and reports where each target ranks in its
//! source's OV column.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{log_sum_exp, matmul, LinalgError, Matrix, Rng};

#[derive(Debug, Error)]
pub enum MemlabError {
    #[error("model width {0} must be even and positive")]
    Width(usize),
    #[error("vocabulary must have at least 2 tokens")]
    Vocab,
    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { position: usize, token: u32, vocab: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("attention weights sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("{weights} attention weights for {tokens} context tokens")]
    LengthMismatch { weights: usize, tokens: usize },
    #[error("learning rate {0} must be finite and nonnegative")]
    LearningRate(f64),
    #[error("loss diverged at step {0}")]
    Diverged(usize),
    #[error("training needs at least one step")]
    NoSteps,
    #[error("invalid association dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, MemlabError>;

/// One rotary attention head over token embeddings, plus unembedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleLayerLM {
    /// `d × V`; column `t` embeds token `t`.
    pub w_e: Matrix,
    /// `V × d`.
    pub w_u: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub rope_base: f64,
}

impl SingleLayerLM {
    /// Gaussian factors with standard deviation `1/√d`.
    pub fn init(vocab: usize, d: usize, rope_base: f64, seed: u64) -> Result<Self> {
        if d == 0 || d % 2 != 0 {
            return Err(MemlabError::Width(d));
        }
        if vocab < 2 {
            return Err(MemlabError::Vocab);
        }
        let mut rng = Rng::seed_from(seed);
        let std = 1.0 / (d as f64).sqrt();
        let square = |rng: &mut Rng| Matrix::random_normal(d, d, std, rng);
        let w_q = square(&mut rng);
        let w_k = square(&mut rng);
        let w_v = square(&mut rng);
        let w_o = square(&mut rng);
        Ok(Self {
            w_e: Matrix::random_normal(d, vocab, std, &mut rng),
            w_u: Matrix::random_normal(vocab, d, std, &mut rng),
            w_q,
            w_k,
            w_v,
            w_o,
            rope_base,
        })
    }

    pub fn vocab(&self) -> usize {
        self.w_e.cols()
    }

    pub fn width(&self) -> usize {
        self.w_e.rows()
    }

    fn check(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(MemlabError::EmptySequence);
        }
        let vocab = self.vocab();
        for (position, &token) in tokens.iter().enumerate() {
            if token as usize >= vocab {
                return Err(MemlabError::TokenOutOfRange { position, token, vocab });
            }
        }
        Ok(())
    }

    fn embed(&self, token: u32) -> Vec<f64> {
        self.w_e.col(token as usize)
    }
}

/// Rotates pairs `(2j, 2j+1)` by `sign · pos · base^(−2j/d)`.
fn rope(v: &mut [f64], pos: usize, base: f64, sign: f64) {
    let d = v.len();
    for j in 0..d / 2 {
        let angle = sign * pos as f64 * base.powf(-((2 * j) as f64) / d as f64);
        let (s, c) = angle.sin_cos();
        let (a, b) = (v[2 * j], v[2 * j + 1]);
        v[2 * j] = c * a - s * b;
        v[2 * j + 1] = s * a + c * b;
    }
}

fn probs(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn mat_t_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (r, &x) in v.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(m.row(r)) {
            *o += w * x;
        }
    }
    out
}

struct Pass {
    x: Vec<Vec<f64>>,
    q: Vec<f64>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    attn: Vec<f64>,
    z: Vec<f64>,
    h: Vec<f64>,
    logits: Vec<f64>,
}

fn run(tokens: &[u32], lm: &SingleLayerLM) -> Result<Pass> {
    lm.check(tokens)?;
    let n = tokens.len() - 1;
    let x: Vec<Vec<f64>> = tokens.iter().map(|&t| lm.embed(t)).collect();
    let mut q = mat_vec(&lm.w_q, &x[n]);
    rope(&mut q, n, lm.rope_base, 1.0);
    let k: Vec<Vec<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, xi)| {
            let mut k = mat_vec(&lm.w_k, xi);
            rope(&mut k, i, lm.rope_base, 1.0);
            k
        })
        .collect();
    let scores: Vec<f64> = k.iter().map(|ki| ki.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
    let attn = probs(&scores);
    let v: Vec<Vec<f64>> = x.iter().map(|xi| mat_vec(&lm.w_v, xi)).collect();
    let d = lm.width();
    let mut z = vec![0.0; d];
    for (a, vi) in attn.iter().zip(&v) {
        for (zj, vij) in z.iter_mut().zip(vi) {
            *zj += a * vij;
        }
    }
    let oz = mat_vec(&lm.w_o, &z);
    let h: Vec<f64> = x[n].iter().zip(&oz).map(|(a, b)| a + b).collect();
    let logits = mat_vec(&lm.w_u, &h);
    Ok(Pass {
        x,
        q,
        k,
        v,
        attn,
        z,
        h,
        logits,
    })
}

/// Next-token logits after the last position.
pub fn forward_single(tokens: &[u32], lm: &SingleLayerLM) -> Result<Vec<f64>> {
    Ok(run(tokens, lm)?.logits)
}

/// Attention of the last position over the whole prefix (itself included).
pub fn attention_weights(tokens: &[u32], lm: &SingleLayerLM) -> Result<Vec<f64>> {
    Ok(run(tokens, lm)?.attn)
}

/// `W_U · W_O · W_V · W_E`, a `V × V` map from source token to output logits.
pub fn ov_circuit(lm: &SingleLayerLM) -> Result<Matrix> {
    let uo = matmul(&lm.w_u, &lm.w_o)?;
    let uov = matmul(&uo, &lm.w_v)?;
    Ok(matmul(&uov, &lm.w_e)?)
}

/// Logits from the direct path plus attention-weighted OV columns.
pub fn forward_via_ov(tokens: &[u32], lm: &SingleLayerLM, w_ov: &Matrix) -> Result<Vec<f64>> {
    let attn = attention_weights(tokens, lm)?;
    let last = *tokens.last().expect("checked nonempty");
    let mut logits = mat_vec(&lm.w_u, &lm.embed(last));
    for (a, &t) in attn.iter().zip(tokens) {
        for (r, l) in logits.iter_mut().enumerate() {
            *l += a * w_ov.get(r, t as usize);
        }
    }
    Ok(logits)
}

/// One SGD step on the OV circuit for a single next-token example with the
/// attention held fixed:
/// `W + η·(e_next − softmax(predicted))·(Σᵢ aᵢ e_{tᵢ})ᵀ`.
pub fn analytic_ov_update(
    w_ov: &Matrix,
    attention: &[f64],
    context: &[u32],
    next: u32,
    predicted_logits: &[f64],
    learning_rate: f64,
) -> Result<Matrix> {
    if !(learning_rate.is_finite() && learning_rate >= 0.0) {
        return Err(MemlabError::LearningRate(learning_rate));
    }
    if attention.len() != context.len() {
        return Err(MemlabError::LengthMismatch {
            weights: attention.len(),
            tokens: context.len(),
        });
    }
    let total: f64 = attention.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(MemlabError::NotNormalized(total));
    }
    let vocab = w_ov.rows();
    for (position, &token) in context.iter().chain(std::iter::once(&next)).enumerate() {
        if token as usize >= vocab {
            return Err(MemlabError::TokenOutOfRange { position, token, vocab });
        }
    }
    let mut mix = vec![0.0; w_ov.cols()];
    for (&a, &t) in attention.iter().zip(context) {
        mix[t as usize] += a;
    }
    let mut err = probs(predicted_logits);
    for e in err.iter_mut() {
        *e = -*e;
    }
    err[next as usize] += 1.0;
    let mut out = w_ov.clone();
    for (r, &e) in err.iter().enumerate() {
        if e == 0.0 {
            continue;
        }
        for (c, &m) in mix.iter().enumerate() {
            if m != 0.0 {
                out.set(r, c, out.get(r, c) + learning_rate * e * m);
            }
        }
    }
    Ok(out)
}

/// Cross-entropy of `next` after `tokens`, and its gradient with respect to
/// every factor, shaped like the model.
pub fn loss_and_grads(tokens: &[u32], next: u32, lm: &SingleLayerLM) -> Result<(f64, SingleLayerLM)> {
    let p = run(tokens, lm)?;
    if next as usize >= lm.vocab() {
        return Err(MemlabError::TokenOutOfRange {
            position: tokens.len(),
            token: next,
            vocab: lm.vocab(),
        });
    }
    let probs = probs(&p.logits);
    let loss = -probs[next as usize].ln();
    let d = lm.width();
    let n = tokens.len() - 1;
    let zero = |r, c| Matrix::zeros(r, c);
    let mut g = SingleLayerLM {
        w_e: zero(d, lm.vocab()),
        w_u: zero(lm.vocab(), d),
        w_q: zero(d, d),
        w_k: zero(d, d),
        w_v: zero(d, d),
        w_o: zero(d, d),
        rope_base: lm.rope_base,
    };
    let mut g_logit = probs;
    g_logit[next as usize] -= 1.0;
    outer_add(&mut g.w_u, &g_logit, &p.h);
    let g_h = mat_t_vec(&lm.w_u, &g_logit);
    let mut g_x: Vec<Vec<f64>> = vec![vec![0.0; d]; tokens.len()];
    add(&mut g_x[n], &g_h);
    outer_add(&mut g.w_o, &g_h, &p.z);
    let g_z = mat_t_vec(&lm.w_o, &g_h);
    let g_a: Vec<f64> = p.v.iter().map(|vi| vi.iter().zip(&g_z).map(|(a, b)| a * b).sum()).collect();
    let mean: f64 = p.attn.iter().zip(&g_a).map(|(a, b)| a * b).sum();
    let mut g_q = vec![0.0; d];
    for i in 0..tokens.len() {
        let a = p.attn[i];
        let dv: Vec<f64> = g_z.iter().map(|x| a * x).collect();
        outer_add(&mut g.w_v, &dv, &p.x[i]);
        add(&mut g_x[i], &mat_t_vec(&lm.w_v, &dv));
        let ds = a * (g_a[i] - mean);
        for (gq, ki) in g_q.iter_mut().zip(&p.k[i]) {
            *gq += ds * ki;
        }
        let mut dk: Vec<f64> = p.q.iter().map(|x| ds * x).collect();
        rope(&mut dk, i, lm.rope_base, -1.0);
        outer_add(&mut g.w_k, &dk, &p.x[i]);
        add(&mut g_x[i], &mat_t_vec(&lm.w_k, &dk));
    }
    rope(&mut g_q, n, lm.rope_base, -1.0);
    outer_add(&mut g.w_q, &g_q, &p.x[n]);
    add(&mut g_x[n], &mat_t_vec(&lm.w_q, &g_q));
    for (gx, &t) in g_x.iter().zip(tokens) {
        for (r, v) in gx.iter().enumerate() {
            let c = t as usize;
            g.w_e.set(r, c, g.w_e.get(r, c) + v);
        }
    }
    Ok((loss, g))
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn outer_add(m: &mut Matrix, col: &[f64], row: &[f64]) {
    for (r, &c) in col.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        for (x, &v) in m.row_mut(r).iter_mut().zip(row) {
            *x += c * v;
        }
    }
}

fn factors_mut(lm: &mut SingleLayerLM) -> [&mut Matrix; 6] {
    [&mut lm.w_e, &mut lm.w_u, &mut lm.w_q, &mut lm.w_k, &mut lm.w_v, &mut lm.w_o]
}

/// Planted `(source, target)` pairs and the sequences that carry them.
///
/// Each sequence is filler tokens with the source somewhere inside, ending
/// in the trigger token; the target is the token after the trigger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssociationDataset {
    pub pairs: Vec<(u32, u32)>,
    pub trigger: u32,
    /// `(context ending in the trigger, next token, pair index)`.
    pub sequences: Vec<(Vec<u32>, u32, usize)>,
}

/// Minimum number of sequences per planted pair.
pub const MIN_SEQUENCES_PER_PAIR: usize = 20;

impl AssociationDataset {
    /// Token 0 is the trigger; sources and targets are distinct tokens drawn
    /// from the rest; fillers are the tokens that are neither. Pair `k`
    /// appears in `counts[k]` sequences of length 8 to 16.
    pub fn generate(vocab: usize, counts: &[usize], seed: u64) -> Result<Self> {
        let n_pairs = counts.len();
        if vocab < 2 * n_pairs + 3 {
            return Err(MemlabError::Dataset(format!(
                "{n_pairs} pairs need at least {} tokens",
                2 * n_pairs + 3
            )));
        }
        if let Some(c) = counts.iter().find(|&&c| c < MIN_SEQUENCES_PER_PAIR) {
            return Err(MemlabError::Dataset(format!(
                "{c} sequences for a pair, at least {MIN_SEQUENCES_PER_PAIR} required"
            )));
        }
        let mut rng = Rng::seed_from(seed);
        let picks = rng.sample_indices(vocab - 1, 2 * n_pairs);
        let pairs: Vec<(u32, u32)> = (0..n_pairs)
            .map(|k| (1 + picks[2 * k] as u32, 1 + picks[2 * k + 1] as u32))
            .collect();
        let planted: Vec<u32> = pairs.iter().flat_map(|&(s, t)| [s, t]).collect();
        let fillers: Vec<u32> = (1..vocab as u32).filter(|t| !planted.contains(t)).collect();
        let mut sequences = Vec::new();
        for (k, (&count, &(source, target))) in counts.iter().zip(&pairs).enumerate() {
            for _ in 0..count {
                let len = rng.between(8, 16);
                let mut ctx: Vec<u32> = (0..len - 3).map(|_| fillers[rng.below(fillers.len())]).collect();
                let at = rng.between(0, ctx.len());
                ctx.insert(at, source);
                ctx.push(0);
                sequences.push((ctx, target, k));
            }
        }
        rng.shuffle(&mut sequences);
        Ok(Self {
            pairs,
            trigger: 0,
            sequences,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 0.5,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub pair: (u32, u32),
    /// 1-based rank of the target within the source's OV column.
    pub rank: usize,
    /// Softmax mass of the target within that column.
    pub column_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub pairs: Vec<PairReport>,
    /// Share of pairs whose target ranks in the top 3.
    pub top3_fraction: f64,
    pub final_loss: f64,
}

/// Ranks each planted target within its source's OV column.
pub fn probe(lm: &SingleLayerLM, pairs: &[(u32, u32)]) -> Result<Vec<PairReport>> {
    let ov = ov_circuit(lm)?;
    Ok(pairs
        .iter()
        .map(|&(s, t)| {
            let column = ov.col(s as usize);
            let target = column[t as usize];
            let rank = 1 + column.iter().filter(|&&v| v > target).count();
            PairReport {
                pair: (s, t),
                rank,
                column_mass: probs(&column)[t as usize],
            }
        })
        .collect())
}

fn summarize(pairs: Vec<PairReport>, final_loss: f64) -> MemorizationReport {
    let hits = pairs.iter().filter(|p| p.rank <= 3).count();
    MemorizationReport {
        top3_fraction: hits as f64 / pairs.len().max(1) as f64,
        pairs,
        final_loss,
    }
}

/// Report for a model without further training.
pub fn probe_report(lm: &SingleLayerLM, dataset: &AssociationDataset) -> Result<MemorizationReport> {
    Ok(summarize(probe(lm, &dataset.pairs)?, f64::NAN))
}

/// Minibatch SGD on the next-token loss at the trigger, then [`probe`].
pub fn train_and_probe(
    dataset: &AssociationDataset,
    lm: &mut SingleLayerLM,
    config: &TrainConfig,
) -> Result<MemorizationReport> {
    if config.steps == 0 {
        return Err(MemlabError::NoSteps);
    }
    if !(config.learning_rate.is_finite() && config.learning_rate >= 0.0) {
        return Err(MemlabError::LearningRate(config.learning_rate));
    }
    if dataset.sequences.is_empty() || config.batch_size == 0 {
        return Err(MemlabError::Dataset("nothing to train on".into()));
    }
    let mut rng = Rng::seed_from(config.seed);
    let mut order: Vec<usize> = (0..dataset.sequences.len()).collect();
    let mut cursor = order.len();
    let mut loss = f64::NAN;
    for step in 0..config.steps {
        let mut total = 0.0;
        let mut grads: Option<SingleLayerLM> = None;
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            let (ctx, next, _) = &dataset.sequences[order[cursor]];
            cursor += 1;
            let (l, g) = loss_and_grads(ctx, *next, lm)?;
            total += l;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    let mut g = g;
                    for (a, b) in factors_mut(acc).into_iter().zip(factors_mut(&mut g)) {
                        a.add_scaled(b, 1.0);
                    }
                }
            }
        }
        loss = total / config.batch_size as f64;
        if !loss.is_finite() {
            return Err(MemlabError::Diverged(step));
        }
        let mut grads = grads.expect("batch is nonempty");
        let scale = -config.learning_rate / config.batch_size as f64;
        for (p, g) in factors_mut(lm).into_iter().zip(factors_mut(&mut grads)) {
            p.add_scaled(g, scale);
        }
    }
    Ok(summarize(probe(lm, &dataset.pairs)?, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;

    fn random_lm(vocab: usize, d: usize, seed: u64) -> SingleLayerLM {
        SingleLayerLM::init(vocab, d, 100.0, seed).unwrap()
    }

    #[test]
    fn single_token_is_self_attention() {
        let lm = random_lm(6, 4, 1);
        let logits = forward_single(&[3], &lm).unwrap();
        let x = lm.embed(3);
        let ov = mat_vec(&lm.w_o, &mat_vec(&lm.w_v, &x));
        let h: Vec<f64> = x.iter().zip(&ov).map(|(a, b)| a + b).collect();
        let want = mat_vec(&lm.w_u, &h);
        for (a, b) in logits.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn ablated_value_path_is_direct_path() {
        let mut lm = random_lm(7, 4, 2);
        lm.w_v = Matrix::zeros(4, 4);
        let logits = forward_single(&[1, 5, 2, 6], &lm).unwrap();
        assert_eq!(logits, mat_vec(&lm.w_u, &lm.embed(6)));
    }

    #[test]
    fn ov_form_matches_forward() {
        let mut rng = Rng::seed_from(3);
        for trial in 0..50 {
            let vocab = 3 + rng.below(10);
            let d = 2 * (1 + rng.below(4));
            let lm = random_lm(vocab, d, trial);
            let ov = ov_circuit(&lm).unwrap();
            let len = 1 + rng.below(12);
            let tokens: Vec<u32> = (0..len).map(|_| rng.below(vocab) as u32).collect();
            let a = forward_single(&tokens, &lm).unwrap();
            let b = forward_via_ov(&tokens, &lm, &ov).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        assert!(matches!(
            forward_single(&[1, 9], &random_lm(5, 2, 0)),
            Err(MemlabError::TokenOutOfRange { position: 1, token: 9, .. })
        ));
    }

    #[test]
    fn ov_circuit_product() {
        let mut lm = random_lm(4, 4, 4);
        for m in factors_mut(&mut lm) {
            *m = Matrix::identity(4);
        }
        assert_eq!(ov_circuit(&lm).unwrap(), Matrix::identity(4));

        let lm = random_lm(5, 4, 5);
        let ov = ov_circuit(&lm).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                // Naive chained sum over the three inner indices.
                let mut s = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        for k in 0..4 {
                            s += lm.w_u.get(r, i) * lm.w_o.get(i, j) * lm.w_v.get(j, k) * lm.w_e.get(k, c);
                        }
                    }
                }
                assert!((ov.get(r, c) - s).abs() < 1e-12);
            }
        }
        let mut scaled = lm.clone();
        scaled.w_v = lm.w_v.scale(2.0);
        assert_eq!(ov_circuit(&scaled).unwrap(), ov.scale(2.0));
    }

    /// Central-difference SGD step on the OV circuit with attention fixed.
    fn fd_step(lm: &SingleLayerLM, w_ov: &Matrix, tokens: &[u32], next: u32, lr: f64) -> Matrix {
        let loss = |w: &Matrix| {
            let logits = forward_via_ov(tokens, lm, w).unwrap();
            let lse = crate::linalg::log_sum_exp(&logits);
            lse - logits[next as usize]
        };
        let h = 1e-5;
        let mut out = w_ov.clone();
        for r in 0..w_ov.rows() {
            for c in 0..w_ov.cols() {
                let mut plus = w_ov.clone();
                plus.set(r, c, plus.get(r, c) + h);
                let mut minus = w_ov.clone();
                minus.set(r, c, minus.get(r, c) - h);
                let g = (loss(&plus) - loss(&minus)) / (2.0 * h);
                out.set(r, c, w_ov.get(r, c) - lr * g);
            }
        }
        out
    }

    #[test]
    fn analytic_update_matches_finite_differences() {
        let mut rng = Rng::seed_from(40);
        for trial in 0..50 {
            // The first instance is V=5, d=4.
            let (vocab, d) = if trial == 0 { (5, 4) } else { (3 + rng.below(6), 2 * (1 + rng.below(3))) };
            let lm = random_lm(vocab, d, 100 + trial);
            let ov = ov_circuit(&lm).unwrap();
            let len = 1 + rng.below(8);
            let tokens: Vec<u32> = (0..len).map(|_| rng.below(vocab) as u32).collect();
            let next = rng.below(vocab) as u32;
            let lr = 0.5;
            let attn = attention_weights(&tokens, &lm).unwrap();
            let logits = forward_via_ov(&tokens, &lm, &ov).unwrap();
            let got = analytic_ov_update(&ov, &attn, &tokens, next, &logits, lr).unwrap();
            let want = fd_step(&lm, &ov, &tokens, next, lr);
            let mut diff = got.clone();
            diff.add_scaled(&ov, -1.0);
            let delta = diff.frobenius_norm();
            let err = got.max_abs_diff(&want);
            assert!(err <= 1e-4 * delta.max(1e-12), "trial {trial}: {err} vs {delta}");

            let sv = svd(&diff).unwrap().singular_values;
            assert!(sv.len() < 2 || sv[1] <= 1e-10 * sv[0]);
        }
    }

    #[test]
    fn analytic_update_edges() {
        let ov = Matrix::from_fn(3, 3, |r, c| (r * 3 + c) as f64);
        let attn = [0.25, 0.75];
        let ctx = [0, 2];
        let logits = [0.3, -1.0, 2.0];
        assert_eq!(analytic_ov_update(&ov, &attn, &ctx, 1, &logits, 0.0).unwrap(), ov);
        // A prediction that is already the one-hot truth leaves W unchanged.
        let sure = [-1e3, 1e3, -1e3];
        assert_eq!(analytic_ov_update(&ov, &attn, &ctx, 1, &sure, 0.7).unwrap(), ov);
        assert!(matches!(
            analytic_ov_update(&ov, &[0.5, 0.4], &ctx, 1, &logits, 0.1),
            Err(MemlabError::NotNormalized(_))
        ));
        assert!(analytic_ov_update(&ov, &attn, &ctx, 1, &logits, -0.1).is_err());
    }

    #[test]
    fn training_gradients_match_finite_differences() {
        let lm = random_lm(6, 4, 9);
        let tokens = [2, 5, 1, 0];
        let next = 3;
        let (_, g) = loss_and_grads(&tokens, next, &lm).unwrap();
        let loss = |m: &SingleLayerLM| {
            let l = forward_single(&tokens, m).unwrap();
            crate::linalg::log_sum_exp(&l) - l[next as usize]
        };
        let h = 1e-6;
        let mut g = g;
        for (idx, gm) in factors_mut(&mut g).into_iter().enumerate() {
            for i in 0..gm.as_slice().len() {
                let mut plus = lm.clone();
                factors_mut(&mut plus)[idx].as_mut_slice()[i] += h;
                let mut minus = lm.clone();
                factors_mut(&mut minus)[idx].as_mut_slice()[i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = gm.as_slice()[i];
                assert!((fd - an).abs() <= 1e-6 + 1e-5 * fd.abs(), "factor {idx} entry {i}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn dataset_contract() {
        let ds = AssociationDataset::generate(64, &[20; 10], 3).unwrap();
        assert_eq!(ds.sequences.len(), 200);
        for (ctx, next, k) in &ds.sequences {
            let (s, t) = ds.pairs[*k];
            assert_eq!(*next, t);
            assert_eq!(*ctx.last().unwrap(), 0);
            assert!((8..=16).contains(&(ctx.len() + 1)));
            assert_eq!(ctx.iter().filter(|&&x| x == s).count(), 1);
            assert!(ds.pairs.iter().all(|&(s2, _)| s2 == s || !ctx.contains(&s2)) && !ctx.contains(&t));
        }
        assert!(AssociationDataset::generate(64, &[19], 3).is_err());
        assert!(AssociationDataset::generate(10, &[20; 4], 3).is_err());
    }
}
