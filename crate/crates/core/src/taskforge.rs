// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic tasks with planted spurious token associations.
//!
//! Classification: every class owns a set of feature tokens. A prompt is a
//! shuffled mix of feature and distractor tokens, and its label token follows
//! a trigger token. A few noise tokens are shared by all classes. In the
//! pretraining corpus a `ρ` share of examples is corrupted: one noise token is
//! inserted and the label moves to the next class. A model pretrained on the
//! corpus thus memorizes "noise token present → wrong label". The gold rule
//! used by every split ignores noise tokens, and a fixed share of split
//! prompts carries one, so the base model errs on exactly those.
//!
//! Generation: prompts of topic tokens, some carrying a cue token, continue
//! with tokens from a desired or an undesired lexicon. Corrupted corpus
//! examples carry a cue and continue from the undesired lexicon.
//!
//! Pretraining sequences pack several examples `[prompt…, trigger, answer…]`
//! back to back so that few-shot prompts are in distribution.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Rng;
use crate::objectives::{Example, ObjectiveError, TaskDataset, TaskKind, MAX_OPT_EXAMPLES, MIN_OPT_EXAMPLES};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("{field}: vocabulary needs {needed} tokens but the model has {vocab}")]
    VocabularyOverflow {
        field: &'static str,
        needed: usize,
        vocab: usize,
    },
    #[error("could not draw {wanted} distinct prompts for the splits")]
    PromptSpaceExhausted { wanted: usize },
    #[error(transparent)]
    Dataset(#[from] ObjectiveError),
}

pub type Result<T> = std::result::Result<T, TaskError>;

fn invalid(field: &'static str, message: impl Into<String>) -> TaskError {
    TaskError::Invalid {
        field,
        message: message.into(),
    }
}

/// Split sizes shared by both task kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub optimization: usize,
    pub evaluation: usize,
    pub pool: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            optimization: 16,
            evaluation: 200,
            pool: 64,
        }
    }
}

impl SplitSizes {
    fn validate(&self) -> Result<()> {
        if !(MIN_OPT_EXAMPLES..=MAX_OPT_EXAMPLES).contains(&self.optimization) {
            return Err(invalid("splits.optimization", "must be between 6 and 20"));
        }
        if self.evaluation < 200 {
            return Err(invalid("splits.evaluation", "must be at least 200"));
        }
        if self.pool < 7 {
            return Err(invalid("splits.pool", "must be at least 7"));
        }
        Ok(())
    }

    fn total(&self) -> usize {
        self.optimization + self.evaluation + self.pool
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub n_classes: usize,
    /// Vocabulary of the model the task is meant for.
    pub vocab_size: usize,
    pub features_per_class: usize,
    /// Tokens whose presence flips the label in corrupted corpus examples.
    pub n_noise: usize,
    pub n_distractors: usize,
    /// Share of corrupted corpus examples.
    pub rho: f64,
    /// Share of split prompts that carry a noise token.
    pub noise_rate: f64,
    /// Prompt length range (tokens before the trigger).
    pub min_len: usize,
    pub max_len: usize,
    /// Feature tokens per prompt.
    pub min_features: usize,
    pub max_features: usize,
    pub corpus_examples: usize,
    pub max_examples_per_sequence: usize,
    pub splits: SplitSizes,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            vocab_size: 64,
            features_per_class: 6,
            n_noise: 2,
            n_distractors: 16,
            rho: 0.3,
            noise_rate: 0.5,
            min_len: 4,
            max_len: 7,
            min_features: 2,
            max_features: 3,
            corpus_examples: 8000,
            max_examples_per_sequence: 7,
            splits: SplitSizes::default(),
            seed: 0,
        }
    }
}

/// Token assignments of a classification task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub trigger: u32,
    pub labels: Vec<u32>,
    pub features: Vec<Vec<u32>>,
    pub noise: Vec<u32>,
    pub distractors: Vec<u32>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(invalid("n_classes", "need at least 2 classes"));
        }
        if self.features_per_class == 0 {
            return Err(invalid("features_per_class", "must be positive"));
        }
        if (self.rho > 0.0 || self.noise_rate > 0.0) && self.n_noise == 0 {
            return Err(invalid("n_noise", "must be positive when rho or noise_rate is"));
        }
        if !(0.0..0.5).contains(&self.rho) {
            return Err(invalid("rho", "must be in [0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(invalid("noise_rate", "must be in [0, 1]"));
        }
        if self.min_features == 0 || self.min_features > self.max_features {
            return Err(invalid("min_features", "need 1 <= min_features <= max_features"));
        }
        if self.min_len < self.max_features + 1 || self.min_len > self.max_len {
            return Err(invalid("min_len", "need max_features < min_len <= max_len"));
        }
        if self.max_len > self.min_features && self.n_distractors == 0 {
            return Err(invalid("n_distractors", "prompts longer than their features need distractors"));
        }
        if self.corpus_examples == 0 {
            return Err(invalid("corpus_examples", "must be positive"));
        }
        if self.max_examples_per_sequence == 0 {
            return Err(invalid("max_examples_per_sequence", "must be positive"));
        }
        self.splits.validate()?;
        let needed = 1 + self.n_classes * (1 + self.features_per_class) + self.n_noise + self.n_distractors;
        if needed > self.vocab_size {
            return Err(TaskError::VocabularyOverflow {
                field: "n_classes",
                needed,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Token 0 is the trigger, then one label per class, each class's
    /// features, the noise tokens and the distractors.
    pub fn layout(&self) -> VocabLayout {
        let c = self.n_classes as u32;
        let f = self.features_per_class as u32;
        let labels: Vec<u32> = (1..=c).collect();
        let features: Vec<Vec<u32>> = (0..c).map(|k| (0..f).map(|i| 1 + c + k * f + i).collect()).collect();
        let start = 1 + c + c * f;
        let mid = start + self.n_noise as u32;
        VocabLayout {
            trigger: 0,
            labels,
            features,
            noise: (start..mid).collect(),
            distractors: (mid..mid + self.n_distractors as u32).collect(),
        }
    }

    /// Longest packed sequence the corpus can contain.
    pub fn max_sequence_len(&self) -> usize {
        self.max_examples_per_sequence * (self.max_len + 2)
    }
}

/// Packed pretraining sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub sequences: Vec<Vec<u32>>,
    pub examples: usize,
    pub corrupted: usize,
}

impl Corpus {
    pub fn corrupted_fraction(&self) -> f64 {
        self.corrupted as f64 / self.examples as f64
    }

    /// One `{"tokens":[…]}` object per line.
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for s in &self.sequences {
            writeln!(w, "{{\"tokens\":{}}}", serde_json::to_string(s).expect("tokens serialize"))?;
        }
        w.flush()
    }

    pub fn read_jsonl<R: std::io::BufRead>(r: R) -> std::result::Result<Vec<Vec<u32>>, ObjectiveError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Line {
            tokens: Vec<u32>,
        }
        let mut out = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| ObjectiveError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            out.push(parsed.tokens);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPair {
    pub optimization: TaskDataset,
    pub evaluation: TaskDataset,
    pub pool: TaskDataset,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationTask {
    pub layout: VocabLayout,
    pub corpus: Corpus,
    pub splits: SplitPair,
}

/// Prompt with `n_feat` features drawn from `feats` (with replacement) and
/// distractors filling the rest, shuffled.
fn draw_prompt(rng: &mut Rng, spec: &TaskSpec, feats: &[u32], n_feat: usize, distractors: &[u32]) -> Vec<u32> {
    let len = rng.between(spec.min_len, spec.max_len);
    let mut p: Vec<u32> = (0..n_feat).map(|_| feats[rng.below(feats.len())]).collect();
    while p.len() < len {
        p.push(distractors[rng.below(distractors.len())]);
    }
    rng.shuffle(&mut p);
    p
}

/// `k` flags with exactly `round(ρ·k)` set, in random order.
fn corruption_flags(rng: &mut Rng, k: usize, rho: f64) -> Vec<bool> {
    let n = (rho * k as f64).round() as usize;
    let mut flags: Vec<bool> = (0..k).map(|i| i < n).collect();
    rng.shuffle(&mut flags);
    flags
}

/// Packs examples into sequences of 1 to `max_per` examples.
fn pack(rng: &mut Rng, examples: Vec<Vec<u32>>, max_per: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut it = examples.into_iter().peekable();
    while it.peek().is_some() {
        let n = rng.between(1, max_per);
        let mut seq = Vec::new();
        for ex in it.by_ref().take(n) {
            seq.extend(ex);
        }
        out.push(seq);
    }
    out
}

/// Balanced labels (round robin) in shuffled order.
fn balanced_labels(rng: &mut Rng, n: usize, classes: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    labels
}

/// Prompt of class `class`, with one noise token in place of a distractor
/// when `noisy`.
fn class_prompt(rng: &mut Rng, spec: &TaskSpec, layout: &VocabLayout, class: usize, noisy: bool) -> Vec<u32> {
    let n_feat = rng.between(spec.min_features, spec.max_features);
    let mut p = draw_prompt(rng, spec, &layout.features[class], n_feat, &layout.distractors);
    if noisy {
        let slots: Vec<usize> = (0..p.len()).filter(|&i| layout.distractors.contains(&p[i])).collect();
        p[slots[rng.below(slots.len())]] = layout.noise[rng.below(layout.noise.len())];
    }
    p
}

pub fn gen_classification_task(spec: &TaskSpec) -> Result<ClassificationTask> {
    spec.validate()?;
    let layout = spec.layout();
    let mut rng = Rng::seed_from(spec.seed);
    let mut corpus_rng = rng.split();
    let mut split_rng = rng.split();
    let c = spec.n_classes;

    let flags = corruption_flags(&mut corpus_rng, spec.corpus_examples, spec.rho);
    let classes = balanced_labels(&mut corpus_rng, spec.corpus_examples, c);
    let mut examples = Vec::with_capacity(spec.corpus_examples);
    for (&corrupt, &class) in flags.iter().zip(&classes) {
        let mut ex = class_prompt(&mut corpus_rng, spec, &layout, class, corrupt);
        ex.push(layout.trigger);
        ex.push(layout.labels[if corrupt { (class + 1) % c } else { class }]);
        examples.push(ex);
    }
    let corpus = Corpus {
        sequences: pack(&mut corpus_rng, examples, spec.max_examples_per_sequence),
        examples: spec.corpus_examples,
        corrupted: flags.iter().filter(|&&f| f).count(),
    };

    // Split prompts carry gold labels and are all distinct.
    let mut seen = HashSet::new();
    let mut make_split = |n: usize, rng: &mut Rng| -> Result<TaskDataset> {
        let labels = balanced_labels(rng, n, c);
        let noisy = corruption_flags(rng, n, spec.noise_rate);
        let mut pairs = Vec::with_capacity(n);
        for (class, noisy) in labels.into_iter().zip(noisy) {
            let mut attempts = 0;
            let mut prompt = loop {
                attempts += 1;
                if attempts > 10_000 {
                    return Err(TaskError::PromptSpaceExhausted {
                        wanted: spec.splits.total(),
                    });
                }
                let p = class_prompt(rng, spec, &layout, class, noisy);
                if seen.insert(p.clone()) {
                    break p;
                }
            };
            prompt.push(layout.trigger);
            pairs.push((prompt, layout.labels[class]));
        }
        Ok(TaskDataset::classification(pairs, layout.labels.clone())?)
    };
    let optimization = make_split(spec.splits.optimization, &mut split_rng)?;
    let evaluation = make_split(spec.splits.evaluation, &mut split_rng)?;
    let pool = make_split(spec.splits.pool, &mut split_rng)?;
    Ok(ClassificationTask {
        layout,
        corpus,
        splits: SplitPair {
            optimization,
            evaluation,
            pool,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenTaskSpec {
    pub vocab_size: usize,
    pub n_topics: usize,
    pub n_cues: usize,
    pub desired_size: usize,
    pub undesired_size: usize,
    pub rho: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub continuation_len: usize,
    /// Share of split prompts that carry a cue token.
    pub cue_rate: f64,
    pub corpus_examples: usize,
    pub max_examples_per_sequence: usize,
    pub splits: SplitSizes,
    pub seed: u64,
}

impl Default for GenTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            n_topics: 20,
            n_cues: 4,
            desired_size: 8,
            undesired_size: 8,
            rho: 0.3,
            min_len: 3,
            max_len: 6,
            continuation_len: 4,
            cue_rate: 0.5,
            corpus_examples: 8000,
            max_examples_per_sequence: 4,
            splits: SplitSizes::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenLayout {
    pub trigger: u32,
    pub topics: Vec<u32>,
    pub cues: Vec<u32>,
    pub desired: Vec<u32>,
    pub undesired: Vec<u32>,
}

impl GenTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_topics == 0 {
            return Err(invalid("n_topics", "must be positive"));
        }
        if self.rho > 0.0 && self.n_cues == 0 {
            return Err(invalid("n_cues", "must be positive when rho > 0"));
        }
        if self.desired_size == 0 || self.undesired_size == 0 {
            return Err(invalid("desired_size", "both lexicons must be nonempty"));
        }
        if !(0.0..0.5).contains(&self.rho) {
            return Err(invalid("rho", "must be in [0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.cue_rate) {
            return Err(invalid("cue_rate", "must be in [0, 1]"));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(invalid("min_len", "need 2 <= min_len <= max_len"));
        }
        if self.continuation_len == 0 {
            return Err(invalid("continuation_len", "must be positive"));
        }
        if self.corpus_examples == 0 {
            return Err(invalid("corpus_examples", "must be positive"));
        }
        if self.max_examples_per_sequence == 0 {
            return Err(invalid("max_examples_per_sequence", "must be positive"));
        }
        self.splits.validate()?;
        let needed = 1 + self.n_topics + self.n_cues + self.desired_size + self.undesired_size;
        if needed > self.vocab_size {
            return Err(TaskError::VocabularyOverflow {
                field: "n_topics",
                needed,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }

    pub fn layout(&self) -> GenLayout {
        let mut next = 1u32;
        let mut take = |n: usize| {
            let v: Vec<u32> = (next..next + n as u32).collect();
            next += n as u32;
            v
        };
        let topics = take(self.n_topics);
        let cues = take(self.n_cues);
        let desired = take(self.desired_size);
        let undesired = take(self.undesired_size);
        GenLayout {
            trigger: 0,
            topics,
            cues,
            desired,
            undesired,
        }
    }

    /// Scorer id rewarding the desired lexicon.
    pub fn scorer_id(&self) -> String {
        let ids: Vec<String> = self.layout().desired.iter().map(u32::to_string).collect();
        format!("lexicon:{}", ids.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationTask {
    pub layout: GenLayout,
    pub corpus: Corpus,
    pub splits: SplitPair,
}

fn gen_prompt(rng: &mut Rng, spec: &GenTaskSpec, layout: &GenLayout, cue: bool) -> Vec<u32> {
    let len = rng.between(spec.min_len, spec.max_len);
    let mut p: Vec<u32> = (0..len).map(|_| layout.topics[rng.below(layout.topics.len())]).collect();
    if cue {
        let slot = rng.below(len);
        p[slot] = layout.cues[rng.below(layout.cues.len())];
    }
    p
}

pub fn gen_generation_task(spec: &GenTaskSpec) -> Result<GenerationTask> {
    spec.validate()?;
    let layout = spec.layout();
    let mut rng = Rng::seed_from(spec.seed);
    let mut corpus_rng = rng.split();
    let mut split_rng = rng.split();

    let flags = corruption_flags(&mut corpus_rng, spec.corpus_examples, spec.rho);
    let mut examples = Vec::with_capacity(spec.corpus_examples);
    for &corrupt in &flags {
        let mut ex = gen_prompt(&mut corpus_rng, spec, &layout, corrupt);
        ex.push(layout.trigger);
        let lex = if corrupt { &layout.undesired } else { &layout.desired };
        for _ in 0..spec.continuation_len {
            ex.push(lex[corpus_rng.below(lex.len())]);
        }
        examples.push(ex);
    }
    let corpus = Corpus {
        sequences: pack(&mut corpus_rng, examples, spec.max_examples_per_sequence),
        examples: spec.corpus_examples,
        corrupted: flags.iter().filter(|&&f| f).count(),
    };

    let mut seen = HashSet::new();
    let scorer = spec.scorer_id();
    let mut make_split = |n: usize, rng: &mut Rng| -> Result<TaskDataset> {
        let cues = corruption_flags(rng, n, if spec.n_cues > 0 { spec.cue_rate } else { 0.0 });
        let mut prompts = Vec::with_capacity(n);
        for cue in cues {
            let mut attempts = 0;
            let p = loop {
                attempts += 1;
                if attempts > 10_000 {
                    return Err(TaskError::PromptSpaceExhausted {
                        wanted: spec.splits.total(),
                    });
                }
                let mut p = gen_prompt(rng, spec, &layout, cue);
                p.push(layout.trigger);
                if seen.insert(p.clone()) {
                    break p;
                }
            };
            prompts.push(p);
        }
        Ok(TaskDataset {
            kind: TaskKind::Generation,
            examples: prompts.into_iter().map(|prompt| Example { prompt, label: None }).collect(),
            label_vocab: Vec::new(),
            scorer_id: Some(scorer.clone()),
        })
    };
    let optimization = make_split(spec.splits.optimization, &mut split_rng)?;
    let evaluation = make_split(spec.splits.evaluation, &mut split_rng)?;
    let pool = make_split(spec.splits.pool, &mut split_rng)?;
    Ok(GenerationTask {
        layout,
        corpus,
        splits: SplitPair {
            optimization,
            evaluation,
            pool,
        },
    })
}
