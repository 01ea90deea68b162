// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scalar objectives over intervention configurations, plus F1 evaluation.
//!
//! All objectives are maximized. Classification objectives sum the model's
//! probability of the gold label token; the few-shot variants prepend
//! `[prompt, label]` demonstrations drawn by a seeded [`FewShotSampler`];
//! the generation objective sums a [`Scorer`] over greedy continuations.
//! Per-example forwards run on the rayon pool, and sums are always taken in
//! example order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::intervention::InterventionSpec;
use crate::linalg::{argmax, softmax_unchecked, Rng};
use crate::model::{forward, generate, ModelError, ModelParams};

/// Bounds on the size of an optimization split.
pub const MIN_OPT_EXAMPLES: usize = 6;
pub const MAX_OPT_EXAMPLES: usize = 20;
/// Largest demonstration count in a few-shot prompt.
pub const MAX_SHOTS: usize = 6;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("expected a {expected:?} dataset, got {got:?}")]
    WrongKind { expected: TaskKind, got: TaskKind },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("example {index}: label {label} is not in the label vocabulary")]
    LabelNotInVocab { index: usize, label: u32 },
    #[error("example {0}: classification examples need a label")]
    MissingLabel(usize),
    #[error("classification dataset has no label vocabulary")]
    MissingLabelVocab,
    #[error("optimization split has {0} examples, expected between 6 and 20")]
    SplitSize(usize),
    #[error("shot count {0} outside [0, {MAX_SHOTS}]")]
    ShotsOutOfRange(usize),
    #[error("demonstration pool has {available} usable entries, {needed} needed")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("unknown scorer id {0:?}")]
    UnknownScorer(String),
    #[error("generation dataset has no scorer id")]
    MissingScorer,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Generation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub prompt: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: TaskKind,
    #[serde(default)]
    label_vocab: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scorer_id: Option<String>,
}

/// Supervised examples for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub kind: TaskKind,
    pub examples: Vec<Example>,
    /// Admissible label tokens (classification); predictions are restricted
    /// to these.
    pub label_vocab: Vec<u32>,
    /// Registered scorer (generation).
    pub scorer_id: Option<String>,
}

impl TaskDataset {
    pub fn classification(examples: Vec<(Vec<u32>, u32)>, label_vocab: Vec<u32>) -> Result<Self> {
        let ds = Self {
            kind: TaskKind::Classification,
            examples: examples
                .into_iter()
                .map(|(prompt, label)| Example {
                    prompt,
                    label: Some(label),
                })
                .collect(),
            label_vocab,
            scorer_id: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn generation(prompts: Vec<Vec<u32>>, scorer_id: impl Into<String>) -> Result<Self> {
        let ds = Self {
            kind: TaskKind::Generation,
            examples: prompts
                .into_iter()
                .map(|prompt| Example { prompt, label: None })
                .collect(),
            label_vocab: Vec::new(),
            scorer_id: Some(scorer_id.into()),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::Classification => {
                if self.label_vocab.is_empty() {
                    return Err(ObjectiveError::MissingLabelVocab);
                }
                for (index, ex) in self.examples.iter().enumerate() {
                    let label = ex.label.ok_or(ObjectiveError::MissingLabel(index))?;
                    if !self.label_vocab.contains(&label) {
                        return Err(ObjectiveError::LabelNotInVocab { index, label });
                    }
                }
            }
            TaskKind::Generation => {
                if self.scorer_id.is_none() {
                    return Err(ObjectiveError::MissingScorer);
                }
            }
        }
        Ok(())
    }

    /// Optimization splits hold between 6 and 20 examples.
    pub fn validate_optimization_split(&self) -> Result<()> {
        self.validate()?;
        if !(MIN_OPT_EXAMPLES..=MAX_OPT_EXAMPLES).contains(&self.len()) {
            return Err(ObjectiveError::SplitSize(self.len()));
        }
        Ok(())
    }

    fn require(&self, kind: TaskKind) -> Result<()> {
        if self.kind != kind {
            return Err(ObjectiveError::WrongKind {
                expected: kind,
                got: self.kind,
            });
        }
        if self.is_empty() {
            return Err(ObjectiveError::EmptyDataset);
        }
        Ok(())
    }

    /// `(prompt, label)` pairs of a classification dataset.
    pub fn labelled(&self) -> Vec<(Vec<u32>, u32)> {
        self.examples
            .iter()
            .filter_map(|e| e.label.map(|l| (e.prompt.clone(), l)))
            .collect()
    }

    /// JSON-lines: a header object, then one example per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            kind: self.kind,
            label_vocab: self.label_vocab.clone(),
            scorer_id: self.scorer_id.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for ex in &self.examples {
            writeln!(w, "{}", serde_json::to_string(ex).expect("example serializes"))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate().filter(|(_, l)| match l {
            Ok(s) => !s.trim().is_empty(),
            Err(_) => true,
        });
        let parse_err = |line: usize, e: serde_json::Error| ObjectiveError::Parse {
            line: line + 1,
            message: e.to_string(),
        };
        let (n, first) = lines.next().ok_or(ObjectiveError::Parse {
            line: 1,
            message: "missing header line".into(),
        })?;
        let header: Header = serde_json::from_str(&first?).map_err(|e| parse_err(n, e))?;
        let mut examples = Vec::new();
        for (n, line) in lines {
            examples.push(serde_json::from_str::<Example>(&line?).map_err(|e| parse_err(n, e))?);
        }
        let ds = Self {
            kind: header.kind,
            examples,
            label_vocab: header.label_vocab,
            scorer_id: header.scorer_id,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Concatenates demonstrations `[T₁, y₁, …, T_M, y_M]` and the query prompt.
pub fn few_shot_prompt(demos: &[(Vec<u32>, u32)], query: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(demos.iter().map(|d| d.0.len() + 1).sum::<usize>() + query.len());
    for (prompt, label) in demos {
        out.extend_from_slice(prompt);
        out.push(*label);
    }
    out.extend_from_slice(query);
    out
}

/// How many demonstrations each query gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shots {
    Fixed(usize),
    /// `M` drawn uniformly from the sampler's `[m_min, m_max]` per query.
    Mixture,
}

/// Seeded demonstration sampler. Demonstrations are drawn without
/// replacement per query, fresh for every query, and never include the
/// query itself.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSampler {
    pub pool: Vec<(Vec<u32>, u32)>,
    pub seed: u64,
    pub m_min: usize,
    pub m_max: usize,
}

impl FewShotSampler {
    pub fn new(pool: Vec<(Vec<u32>, u32)>, seed: u64) -> Self {
        Self {
            pool,
            seed,
            m_min: 0,
            m_max: MAX_SHOTS,
        }
    }

    pub fn with_range(mut self, m_min: usize, m_max: usize) -> Result<Self> {
        if m_max > MAX_SHOTS || m_min > m_max {
            return Err(ObjectiveError::ShotsOutOfRange(m_max.max(m_min)));
        }
        self.m_min = m_min;
        self.m_max = m_max;
        Ok(self)
    }

    /// Demonstration indices into `pool` for every query, drawn sequentially
    /// from the seed before any forward pass runs.
    pub fn plan(&self, queries: &[(Vec<u32>, u32)], shots: Shots) -> Result<Vec<Vec<usize>>> {
        if let Shots::Fixed(m) = shots {
            if m > MAX_SHOTS {
                return Err(ObjectiveError::ShotsOutOfRange(m));
            }
        }
        let mut rng = Rng::seed_from(self.seed);
        let mut plans = Vec::with_capacity(queries.len());
        for (prompt, label) in queries {
            let m = match shots {
                Shots::Fixed(m) => m,
                Shots::Mixture => rng.between(self.m_min, self.m_max),
            };
            if m == 0 {
                plans.push(Vec::new());
                continue;
            }
            let eligible: Vec<usize> = (0..self.pool.len())
                .filter(|&i| !(self.pool[i].0 == *prompt && self.pool[i].1 == *label))
                .collect();
            if eligible.len() < m {
                return Err(ObjectiveError::PoolTooSmall {
                    needed: m,
                    available: eligible.len(),
                });
            }
            plans.push(
                rng.sample_indices(eligible.len(), m)
                    .into_iter()
                    .map(|i| eligible[i])
                    .collect(),
            );
        }
        Ok(plans)
    }

    /// Full prompts (demonstrations + query) for every query.
    pub fn prompts(&self, queries: &[(Vec<u32>, u32)], shots: Shots) -> Result<Vec<Vec<u32>>> {
        let plans = self.plan(queries, shots)?;
        Ok(queries
            .iter()
            .zip(plans)
            .map(|((prompt, _), idx)| {
                let demos: Vec<(Vec<u32>, u32)> = idx.iter().map(|&i| self.pool[i].clone()).collect();
                few_shot_prompt(&demos, prompt)
            })
            .collect())
    }
}

/// Probability of `label` as the next token after `prompt`.
pub fn label_probability(
    params: &ModelParams,
    spec: Option<&InterventionSpec>,
    prompt: &[u32],
    label: u32,
) -> Result<f64> {
    let logits = forward(prompt, params, spec)?.logits;
    Ok(softmax_unchecked(&logits)[label as usize])
}

fn sum_probabilities(
    params: &ModelParams,
    spec: Option<&InterventionSpec>,
    prompts: &[Vec<u32>],
    labels: &[u32],
) -> Result<f64> {
    let probs: Vec<f64> = prompts
        .par_iter()
        .zip(labels.par_iter())
        .map(|(p, &y)| label_probability(params, spec, p, y))
        .collect::<Result<_>>()?;
    Ok(probs.iter().sum())
}

/// `Σ_j p(y_j | T_j)` under the (intervened) model; lies in `[0, D]`.
pub fn class_objective(
    params: &ModelParams,
    spec: Option<&InterventionSpec>,
    dataset: &TaskDataset,
) -> Result<f64> {
    dataset.require(TaskKind::Classification)?;
    let pairs = dataset.labelled();
    let (prompts, labels): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    sum_probabilities(params, spec, &prompts, &labels)
}

/// Class objective with `m` demonstrations prepended to every query.
pub fn fewshot_objective(
    params: &ModelParams,
    spec: Option<&InterventionSpec>,
    dataset: &TaskDataset,
    sampler: &FewShotSampler,
    m: usize,
) -> Result<f64> {
    shot_objective(params, spec, dataset, sampler, Shots::Fixed(m))
}

/// Class objective where each query draws its own `M` from the sampler range.
pub fn mixture_objective(
    params: &ModelParams,
    spec: Option<&InterventionSpec>,
    dataset: &TaskDataset,
    sampler: &FewShotSampler,
) -> Result<f64> {
    shot_objective(params, spec, dataset, sampler, Shots::Mixture)
}

fn shot_objective(
    params: &ModelParams,
    spec: Option<&InterventionSpec>,
    dataset: &TaskDataset,
    sampler: &FewShotSampler,
    shots: Shots,
) -> Result<f64> {
    dataset.require(TaskKind::Classification)?;
    let pairs = dataset.labelled();
    let prompts = sampler.prompts(&pairs, shots)?;
    let labels: Vec<u32> = pairs.iter().map(|p| p.1).collect();
    sum_probabilities(params, spec, &prompts, &labels)
}

/// Scores a generated continuation with a value in `[0, 1]`.
pub trait Scorer: Send + Sync {
    fn id(&self) -> String;
    fn score(&self, tokens: &[u32]) -> f64;
}

/// Always returns the same value.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn id(&self) -> String {
        if self.0 == 0.0 {
            "zero".into()
        } else if self.0 == 1.0 {
            "one".into()
        } else {
            format!("constant:{}", self.0)
        }
    }

    fn score(&self, _tokens: &[u32]) -> f64 {
        self.0
    }
}

/// Fraction of tokens drawn from a desired lexicon; the empty sequence
/// scores 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconScorer {
    pub desired: BTreeSet<u32>,
}

impl LexiconScorer {
    pub fn new(desired: impl IntoIterator<Item = u32>) -> Self {
        Self {
            desired: desired.into_iter().collect(),
        }
    }
}

impl Scorer for LexiconScorer {
    /// `lexicon:<id>,<id>,…` in ascending order.
    fn id(&self) -> String {
        let ids: Vec<String> = self.desired.iter().map(u32::to_string).collect();
        format!("lexicon:{}", ids.join(","))
    }

    fn score(&self, tokens: &[u32]) -> f64 {
        if tokens.is_empty() {
            return 0.0;
        }
        tokens.iter().filter(|t| self.desired.contains(t)).count() as f64 / tokens.len() as f64
    }
}

/// Resolves scorer ids: `zero`, `one`, or `lexicon:<ids>`.
pub fn resolve_scorer(id: &str) -> Result<Box<dyn Scorer>> {
    match id {
        "zero" => return Ok(Box::new(ConstantScorer(0.0))),
        "one" => return Ok(Box::new(ConstantScorer(1.0))),
        _ => {}
    }
    if let Some(list) = id.strip_prefix("lexicon:") {
        let ids: std::result::Result<Vec<u32>, _> =
            list.split(',').filter(|s| !s.is_empty()).map(str::parse).collect();
        if let Ok(ids) = ids {
            return Ok(Box::new(LexiconScorer::new(ids)));
        }
    }
    Err(ObjectiveError::UnknownScorer(id.to_string()))
}

/// `Σ_j s(greedy continuation of T_j)`.
pub fn gen_objective(
    params: &ModelParams,
    spec: Option<&InterventionSpec>,
    dataset: &TaskDataset,
    scorer: &dyn Scorer,
    max_steps: usize,
) -> Result<f64> {
    dataset.require(TaskKind::Generation)?;
    let scores: Vec<f64> = dataset
        .examples
        .par_iter()
        .map(|ex| {
            let cont = generate(&ex.prompt, params, spec, max_steps, None)?;
            Ok(scorer.score(&cont))
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum())
}

/// Same as [`gen_objective`], looking the scorer up by the dataset's id.
pub fn gen_objective_by_id(
    params: &ModelParams,
    spec: Option<&InterventionSpec>,
    dataset: &TaskDataset,
    max_steps: usize,
) -> Result<f64> {
    dataset.require(TaskKind::Generation)?;
    let id = dataset.scorer_id.as_deref().ok_or(ObjectiveError::MissingScorer)?;
    let scorer = resolve_scorer(id)?;
    gen_objective(params, spec, dataset, scorer.as_ref(), max_steps)
}

/// Macro F1 over the classes present in the gold labels, with per-class F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub macro_f1: f64,
    pub per_class: BTreeMap<u32, f64>,
    pub accuracy: f64,
    pub predictions: Vec<u32>,
}

pub fn macro_f1(gold: &[u32], predicted: &[u32]) -> Result<(f64, BTreeMap<u32, f64>)> {
    if gold.is_empty() {
        return Err(ObjectiveError::EmptyDataset);
    }
    assert_eq!(gold.len(), predicted.len(), "gold/prediction length mismatch");
    let classes: BTreeSet<u32> = gold.iter().copied().collect();
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&g, &p) in gold.iter().zip(predicted) {
            match (g == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        per_class.insert(c, 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok((mean, per_class))
}

/// Restricted argmax over the label vocabulary (first label wins ties).
pub fn predict_label(logits: &[f64], label_vocab: &[u32]) -> u32 {
    let restricted: Vec<f64> = label_vocab.iter().map(|&l| logits[l as usize]).collect();
    label_vocab[argmax(&restricted).expect("label vocabulary is nonempty")]
}

/// Predictions and macro F1 on a classification dataset, zero-shot.
pub fn evaluate_f1(
    params: &ModelParams,
    spec: Option<&InterventionSpec>,
    dataset: &TaskDataset,
) -> Result<F1Report> {
    evaluate_f1_with_prompts(params, spec, dataset, None)
}

/// Like [`evaluate_f1`], with `m` demonstrations per query.
pub fn evaluate_f1_shots(
    params: &ModelParams,
    spec: Option<&InterventionSpec>,
    dataset: &TaskDataset,
    sampler: &FewShotSampler,
    m: usize,
) -> Result<F1Report> {
    dataset.require(TaskKind::Classification)?;
    let prompts = sampler.prompts(&dataset.labelled(), Shots::Fixed(m))?;
    evaluate_f1_with_prompts(params, spec, dataset, Some(prompts))
}

fn evaluate_f1_with_prompts(
    params: &ModelParams,
    spec: Option<&InterventionSpec>,
    dataset: &TaskDataset,
    prompts: Option<Vec<Vec<u32>>>,
) -> Result<F1Report> {
    dataset.require(TaskKind::Classification)?;
    let pairs = dataset.labelled();
    let prompts = prompts.unwrap_or_else(|| pairs.iter().map(|p| p.0.clone()).collect());
    let predictions: Vec<u32> = prompts
        .par_iter()
        .map(|p| {
            let logits = forward(p, params, spec)?.logits;
            Ok(predict_label(&logits, &dataset.label_vocab))
        })
        .collect::<Result<_>>()?;
    let gold: Vec<u32> = pairs.iter().map(|p| p.1).collect();
    let (macro_f1, per_class) = macro_f1(&gold, &predictions)?;
    let correct = gold.iter().zip(&predictions).filter(|(g, p)| g == p).count();
    Ok(F1Report {
        macro_f1,
        per_class,
        accuracy: correct as f64 / gold.len() as f64,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intervention::RotationConfig;
    use crate::linalg::Matrix;
    use crate::model::ModelConfig;
    use approx::assert_abs_diff_eq;

    fn model(vocab: usize) -> ModelParams {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            vocab_size: vocab,
            d_ff: 8,
            rope_base: 10_000.0,
            max_seq: 64,
        };
        ModelParams::init_with_std(cfg, 5, 0.5).unwrap()
    }

    /// Zero unembedding: every logit is 0.
    fn uniform_model(vocab: usize) -> ModelParams {
        let mut p = model(vocab);
        p.w_u = Matrix::zeros(vocab, 8);
        p
    }

    /// Logits are dominated by one token regardless of input.
    fn constant_model(vocab: usize, token: usize) -> ModelParams {
        let mut p = uniform_model(vocab);
        p.lnf_gain = vec![0.0; 8];
        p.lnf_bias = vec![1.0; 8];
        for c in 0..8 {
            p.w_u.set(token, c, 1000.0);
        }
        p
    }

    fn dataset(n: usize, vocab: u32) -> TaskDataset {
        let pairs = (0..n as u32)
            .map(|i| (vec![i % vocab, (i * 3 + 1) % vocab], i % 2))
            .collect();
        TaskDataset::classification(pairs, vec![0, 1]).unwrap()
    }

    #[test]
    fn objective_bounds() {
        let ds = dataset(10, 4);
        assert_abs_diff_eq!(
            class_objective(&uniform_model(4), None, &ds).unwrap(),
            2.5,
            epsilon = 1e-12
        );
        let always_zero = TaskDataset::classification(
            (0..10).map(|i| (vec![i % 4], 0)).collect(),
            vec![0, 1],
        )
        .unwrap();
        assert_abs_diff_eq!(
            class_objective(&constant_model(4, 0), None, &always_zero).unwrap(),
            10.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn objective_equals_per_example_sum() {
        let p = model(6);
        let ds = dataset(7, 6);
        let mut manual = 0.0;
        for ex in &ds.examples {
            let logits = forward(&ex.prompt, &p, None).unwrap().logits;
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            manual += (logits[ex.label.unwrap() as usize] - m).exp() / z;
        }
        assert_abs_diff_eq!(class_objective(&p, None, &ds).unwrap(), manual, epsilon = 1e-12);
    }

    #[test]
    fn wrong_kind_rejected() {
        let gen = TaskDataset::generation(vec![vec![1, 2]], "zero").unwrap();
        assert!(matches!(
            class_objective(&model(4), None, &gen),
            Err(ObjectiveError::WrongKind { .. })
        ));
        let ds = dataset(6, 4);
        assert!(matches!(
            gen_objective(&model(4), None, &ds, &ConstantScorer(0.0), 2),
            Err(ObjectiveError::WrongKind { .. })
        ));
    }

    #[test]
    fn zero_shot_fewshot_matches_class_objective() {
        let p = model(6);
        let ds = dataset(8, 6);
        let sampler = FewShotSampler::new(ds.labelled(), 3);
        let a = fewshot_objective(&p, None, &ds, &sampler, 0).unwrap();
        assert_eq!(a, class_objective(&p, None, &ds).unwrap());
        let b = fewshot_objective(&p, None, &ds, &sampler, 3).unwrap();
        assert_eq!(b, fewshot_objective(&p, None, &ds, &sampler, 3).unwrap());
    }

    #[test]
    fn demonstrations_concatenate_in_order() {
        let pool = vec![(vec![10, 11], 1), (vec![12], 0), (vec![13, 14, 15], 1)];
        let sampler = FewShotSampler::new(pool.clone(), 9);
        let queries = vec![(vec![20, 21], 0)];
        let plan = sampler.plan(&queries, Shots::Fixed(2)).unwrap();
        let prompts = sampler.prompts(&queries, Shots::Fixed(2)).unwrap();
        let (a, b) = (&pool[plan[0][0]], &pool[plan[0][1]]);
        let mut expected = a.0.clone();
        expected.push(a.1);
        expected.extend(&b.0);
        expected.push(b.1);
        expected.extend([20, 21]);
        assert_eq!(prompts[0], expected);
        assert_ne!(plan[0][0], plan[0][1]);
    }

    #[test]
    fn query_never_its_own_demonstration() {
        let pool: Vec<(Vec<u32>, u32)> = (0..7).map(|i| (vec![i], i % 2)).collect();
        let sampler = FewShotSampler::new(pool.clone(), 1);
        for seed in 0..20 {
            let s = FewShotSampler { seed, ..sampler.clone() };
            let plan = s.plan(&pool, Shots::Fixed(6)).unwrap();
            for (q, idx) in plan.iter().enumerate() {
                assert!(!idx.contains(&q));
                assert_eq!(idx.len(), 6);
            }
        }
        assert!(matches!(
            sampler.plan(&pool[..1], Shots::Fixed(7)),
            Err(ObjectiveError::ShotsOutOfRange(7))
        ));
        let small = FewShotSampler::new(pool[..3].to_vec(), 1);
        assert!(matches!(
            small.plan(&pool[..1], Shots::Fixed(3)),
            Err(ObjectiveError::PoolTooSmall { needed: 3, available: 2 })
        ));
    }

    #[test]
    fn mixture_degenerate_and_replay() {
        let p = model(6);
        let ds = dataset(8, 6);
        let zero = FewShotSampler::new(ds.labelled(), 4).with_range(0, 0).unwrap();
        assert_eq!(
            mixture_objective(&p, None, &ds, &zero).unwrap(),
            class_objective(&p, None, &ds).unwrap()
        );

        let sampler = FewShotSampler::new(ds.labelled(), 17);
        let value = mixture_objective(&p, None, &ds, &sampler).unwrap();
        // Replay the draws by hand: M then the demonstration indices.
        let mut rng = Rng::seed_from(17);
        let mut manual = 0.0;
        for (prompt, label) in ds.labelled().iter() {
            let m = rng.between(0, 6);
            let mut demos = Vec::new();
            if m > 0 {
                // Duplicates of the query are excluded too.
                let eligible: Vec<usize> = (0..8)
                    .filter(|&i| sampler.pool[i] != (prompt.clone(), *label))
                    .collect();
                for i in rng.sample_indices(eligible.len(), m) {
                    demos.push(sampler.pool[eligible[i]].clone());
                }
            }
            manual += label_probability(&p, None, &few_shot_prompt(&demos, prompt), *label).unwrap();
        }
        assert_eq!(value, manual);
        let other = FewShotSampler { seed: 18, ..sampler };
        assert_ne!(mixture_objective(&p, None, &ds, &other).unwrap(), value);
    }

    #[test]
    fn zero_rotation_objective_matches_none() {
        let p = model(6);
        let ds = dataset(8, 6);
        let spec = InterventionSpec::rotation(RotationConfig::zeros(&[0], 4));
        let a = class_objective(&p, Some(&spec), &ds).unwrap();
        let b = class_objective(&p, None, &ds).unwrap();
        assert!((a - b).abs() <= 1e-10);
    }

    #[test]
    fn generation_scorers() {
        let p = model(6);
        let ds = TaskDataset::generation(vec![vec![1, 2], vec![3], vec![4, 4, 4]], "one").unwrap();
        assert_eq!(gen_objective(&p, None, &ds, &ConstantScorer(0.0), 3).unwrap(), 0.0);
        assert_eq!(gen_objective(&p, None, &ds, &ConstantScorer(1.0), 3).unwrap(), 3.0);
        assert_eq!(gen_objective_by_id(&p, None, &ds, 3).unwrap(), 3.0);
        let bad = TaskDataset::generation(vec![vec![1]], "sentiment-model").unwrap();
        assert!(matches!(
            gen_objective_by_id(&p, None, &bad, 3),
            Err(ObjectiveError::UnknownScorer(_))
        ));

        // Hand count against the actual continuations.
        let lex = LexiconScorer::new([0, 2, 4]);
        let mut manual = 0.0;
        for ex in &ds.examples {
            let cont = generate(&ex.prompt, &p, None, 4, None).unwrap();
            manual += cont.iter().filter(|t| [0, 2, 4].contains(*t)).count() as f64 / 4.0;
        }
        assert_abs_diff_eq!(gen_objective(&p, None, &ds, &lex, 4).unwrap(), manual, epsilon = 1e-12);
    }

    #[test]
    fn lexicon_scorer_edges() {
        let lex = LexiconScorer::new([5, 6]);
        assert_eq!(lex.score(&[]), 0.0);
        assert_eq!(lex.score(&[5, 6, 5]), 1.0);
        assert_eq!(lex.score(&[5, 1]), 0.5);
        assert_eq!(lex.id(), "lexicon:5,6");
        assert_eq!(resolve_scorer("lexicon:5,6").unwrap().score(&[6]), 1.0);
    }

    #[test]
    fn f1_cases() {
        let (f, _) = macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap();
        assert_eq!(f, 1.0);
        let (f, per) = macro_f1(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        assert_abs_diff_eq!(per[&0], 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(per[&1], 0.0);
        assert_abs_diff_eq!(f, 1.0 / 3.0, epsilon = 1e-15);
        assert!(matches!(macro_f1(&[], &[]), Err(ObjectiveError::EmptyDataset)));
    }

    #[test]
    fn f1_matches_confusion_matrix_oracle() {
        let mut rng = Rng::seed_from(8);
        for _ in 0..50 {
            let k = 2 + rng.below(4) as u32;
            let n = 5 + rng.below(40);
            let gold: Vec<u32> = (0..n).map(|_| rng.below(k as usize) as u32).collect();
            let pred: Vec<u32> = (0..n).map(|_| rng.below(k as usize) as u32).collect();
            let mut conf = vec![vec![0usize; k as usize]; k as usize];
            for (&g, &p) in gold.iter().zip(&pred) {
                conf[g as usize][p as usize] += 1;
            }
            let mut scores = Vec::new();
            for c in 0..k as usize {
                let support: usize = conf[c].iter().sum();
                if support == 0 {
                    continue;
                }
                let predicted: usize = (0..k as usize).map(|r| conf[r][c]).sum();
                let tp = conf[c][c] as f64;
                let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
                let recall = tp / support as f64;
                scores.push(if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                });
            }
            let want = scores.iter().sum::<f64>() / scores.len() as f64;
            let (got, _) = macro_f1(&gold, &pred).unwrap();
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn predictions_restricted_to_label_vocab() {
        let p = constant_model(6, 5);
        let ds = dataset(6, 6);
        let report = evaluate_f1(&p, None, &ds).unwrap();
        assert!(report.predictions.iter().all(|l| ds.label_vocab.contains(l)));
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let ds = dataset(6, 4);
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"kind":"classification","label_vocab":[0,1]}"#));
        assert_eq!(TaskDataset::read_jsonl(&buf[..]).unwrap(), ds);

        let gen = TaskDataset::generation(vec![vec![3, 4]], "lexicon:1,2").unwrap();
        let mut buf = Vec::new();
        gen.write_jsonl(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"kind\":\"generation\",\"label_vocab\":[],\"scorer_id\":\"lexicon:1,2\"}\n{\"prompt\":[3,4]}\n"
        );
        assert_eq!(TaskDataset::read_jsonl(&buf[..]).unwrap(), gen);

        let bad = "{\"kind\":\"classification\",\"label_vocab\":[0]}\n{\"prompt\":[1],\"label\":3}\n";
        assert!(matches!(
            TaskDataset::read_jsonl(bad.as_bytes()),
            Err(ObjectiveError::LabelNotInVocab { index: 0, label: 3 })
        ));
        let garbled = "{\"kind\":\"classification\",\"label_vocab\":[0]}\nnot json\n";
        assert!(matches!(
            TaskDataset::read_jsonl(garbled.as_bytes()),
            Err(ObjectiveError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            TaskDataset::read_jsonl("{\"kind\":\"classification\"}\n".as_bytes()),
            Err(ObjectiveError::MissingLabelVocab)
        ));
    }

    #[test]
    fn optimization_split_bounds() {
        assert!(dataset(6, 4).validate_optimization_split().is_ok());
        assert!(dataset(20, 4).validate_optimization_split().is_ok());
        assert!(matches!(
            dataset(5, 4).validate_optimization_split(),
            Err(ObjectiveError::SplitSize(5))
        ));
        assert!(dataset(21, 4).validate_optimization_split().is_err());
    }
}
