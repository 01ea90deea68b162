// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use tarot_core::analysis::{
    cosines, extremes_from_logits, logit_attribution, lens_residual, prob_delta, unembedding_directions,
    LensNorm, Summary,
};
use tarot_core::bayesopt::{run_intervention, SearchMechanism};
use tarot_core::intervention::{default_layer_set, InterventionSpec};
use tarot_core::linalg::Rng;
use tarot_core::model::{
    forward, generate, read_checkpoint, write_checkpoint, Adam, ModelConfig, ModelParams,
};
use tarot_core::objectives::{
    class_objective, evaluate_f1, evaluate_f1_shots, fewshot_objective, gen_objective, mixture_objective, resolve_scorer,
    FewShotSampler, ObjectiveError, TaskDataset, TaskKind,
};
use tarot_core::taskforge::{gen_classification_task, gen_generation_task, Corpus, SplitPair};

use crate::config::{self, GenDataFile, ObjectiveName, OptimizeFile, TrainFile};
use crate::error::{CliError, Result};
use crate::run::{csv_bytes, read_input, to_json, Run};

/// Flags shared by every subcommand.
pub struct Global {
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub timing: bool,
}

impl Global {
    fn seed_or(&self, file_seed: u64) -> u64 {
        self.seed.unwrap_or(file_seed)
    }
}

fn jsonl<F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>>(f: F) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("in-memory write");
    buf
}

fn dataset_bytes(ds: &TaskDataset) -> Vec<u8> {
    let mut buf = Vec::new();
    ds.write_jsonl(&mut buf).expect("in-memory write");
    buf
}

fn write_splits(run: &mut Run, splits: &SplitPair) -> Result<()> {
    run.write("optimization.jsonl", &dataset_bytes(&splits.optimization))?;
    run.write("evaluation.jsonl", &dataset_bytes(&splits.evaluation))?;
    run.write("pool.jsonl", &dataset_bytes(&splits.pool))
}

pub fn gen_data(g: &Global, config_path: Option<&Path>) -> Result<PathBuf> {
    let (mut file, bytes): (GenDataFile, _) = config::load(config_path)?;
    file.classification.seed = g.seed_or(file.classification.seed);
    file.generation.seed = g.seed_or(file.generation.seed);
    let (config, seed) = match file.kind {
        TaskKind::Classification => (
            json!({"kind": file.kind, "classification": file.classification}),
            file.classification.seed,
        ),
        TaskKind::Generation => (
            json!({"kind": file.kind, "generation": file.generation}),
            file.generation.seed,
        ),
    };
    // Generate before creating the run directory so a bad config leaves
    // nothing behind.
    let mut outputs: Vec<(&str, Vec<u8>)> = Vec::new();
    let splits = match file.kind {
        TaskKind::Classification => {
            let task = gen_classification_task(&file.classification)?;
            outputs.push(("layout.json", pretty(&task.layout)));
            outputs.push(("corpus.jsonl", jsonl(|w| task.corpus.write_jsonl(w))));
            task.splits
        }
        TaskKind::Generation => {
            let task = gen_generation_task(&file.generation)?;
            let mut layout = to_json(&task.layout);
            layout["scorer_id"] = json!(file.generation.scorer_id());
            outputs.push(("layout.json", pretty(&layout)));
            outputs.push(("corpus.jsonl", jsonl(|w| task.corpus.write_jsonl(w))));
            task.splits
        }
    };
    let mut inputs = BTreeMap::new();
    if let Some(b) = bytes {
        inputs.insert("config".to_string(), crate::run::sha256_hex(&b));
    }
    let mut run = Run::create(&g.out_dir, "gen-data", config, seed, inputs, g.timing)?;
    for (name, data) in outputs {
        run.write(name, &data)?;
    }
    write_splits(&mut run, &splits)?;
    run.finish("ok")
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializes");
    s.push('\n');
    s.into_bytes()
}

pub struct TrainArgs<'a> {
    pub corpus: &'a Path,
    pub config: Option<&'a Path>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
}

pub fn train_base(g: &Global, a: &TrainArgs) -> Result<PathBuf> {
    let (mut file, bytes): (TrainFile, _) = config::load(a.config)?;
    if let Some(s) = a.steps {
        file.train.steps = s;
    }
    if let Some(b) = a.batch_size {
        file.train.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        file.train.adam.learning_rate = lr;
    }
    let seed = g.seed_or(0);
    let model: ModelConfig = file.model.into();
    model.validate().map_err(|e| CliError::from(e).context("model"))?;
    if file.train.batch_size == 0 {
        return Err(CliError::validation("train.batch_size: must be positive"));
    }
    let (corpus_bytes, corpus_hash) = read_input(a.corpus)?;
    let sequences = Corpus::read_jsonl(BufReader::new(&corpus_bytes[..]))?;
    if sequences.is_empty() {
        return Err(CliError::validation("corpus is empty"));
    }
    for (i, s) in sequences.iter().enumerate() {
        model.check_tokens(s).map_err(|e| CliError::from(e).context(&format!("corpus line {}", i + 1)))?;
        if s.len() < 2 {
            return Err(CliError::validation(format!("corpus line {}: needs at least 2 tokens", i + 1)));
        }
    }

    let mut inputs = BTreeMap::from([("corpus".to_string(), corpus_hash)]);
    if let Some(b) = bytes {
        inputs.insert("config".to_string(), crate::run::sha256_hex(&b));
    }
    let mut run = Run::create(&g.out_dir, "train-base", to_json(&file), seed, inputs, g.timing)?;

    let mut params = ModelParams::init(model, seed)?;
    let mut adam = Adam::new(file.train.adam, &params);
    let mut rng = Rng::seed_from(seed ^ 0x5EED_0BA7_C4E5);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(file.train.steps);
    let mut failure = None;
    for step in 0..file.train.steps {
        let batch: Vec<Vec<u32>> = (0..file.train.batch_size)
            .map(|_| {
                if cursor == order.len() {
                    rng.shuffle(&mut order);
                    cursor = 0;
                }
                cursor += 1;
                sequences[order[cursor - 1]].clone()
            })
            .collect();
        match adam.step(&mut params, &batch) {
            Ok(loss) if loss.is_finite() && params.is_finite() => curve.push(vec![(step + 1).to_string(), loss.to_string()]),
            Ok(_) => {
                failure = Some(CliError::numerical(format!("training diverged at step {}", step + 1)));
                break;
            }
            Err(e) => {
                failure = Some(CliError::from(e).context(&format!("step {}", step + 1)));
                break;
            }
        }
    }
    run.write("loss_curve.csv", &csv_bytes(&["step", "loss"], curve))?;
    if let Some(e) = failure {
        run.finish(&format!("failed: {e}"))?;
        return Err(e);
    }
    let mut ck = Vec::new();
    write_checkpoint(&params, &mut ck)?;
    run.write("checkpoint.bin", &ck)?;
    run.finish("ok")
}

fn load_checkpoint(path: &Path) -> Result<(ModelParams, String)> {
    let (bytes, hash) = read_input(path)?;
    let params = read_checkpoint(&bytes[..]).map_err(|e| CliError::from(e).context(&path.display().to_string()))?;
    Ok((params, hash))
}

fn load_dataset(path: &Path) -> Result<(TaskDataset, String)> {
    let (bytes, hash) = read_input(path)?;
    let ds = TaskDataset::read_jsonl(BufReader::new(&bytes[..]))
        .map_err(|e| CliError::from(e).context(&path.display().to_string()))?;
    Ok((ds, hash))
}

/// `None` for the literal `none`.
fn load_spec(arg: &str) -> Result<(Option<InterventionSpec>, String)> {
    if arg == "none" {
        return Ok((None, "none".to_string()));
    }
    let (bytes, hash) = read_input(Path::new(arg))?;
    let spec: InterventionSpec =
        serde_json::from_slice(&bytes).map_err(|e| CliError::validation(format!("{arg}: {e}")))?;
    Ok((Some(spec), hash))
}

fn check_compatible(params: &ModelParams, ds: &TaskDataset) -> Result<()> {
    let cfg = &params.config;
    for (i, ex) in ds.examples.iter().enumerate() {
        cfg.check_tokens(&ex.prompt)
            .map_err(|e| CliError::from(e).context(&format!("dataset example {i}")))?;
    }
    if let Some(bad) = ds.label_vocab.iter().find(|&&l| l as usize >= cfg.vocab_size) {
        return Err(CliError::validation(format!("label {bad} is outside the model vocabulary")));
    }
    Ok(())
}

/// Everything an objective needs besides the intervention.
struct ObjectiveSetup<'a> {
    name: ObjectiveName,
    params: &'a ModelParams,
    dataset: &'a TaskDataset,
    sampler: Option<FewShotSampler>,
    shots: usize,
    max_new_tokens: usize,
}

impl ObjectiveSetup<'_> {
    fn check(&self) -> Result<()> {
        let needs = match self.name {
            ObjectiveName::Gen => TaskKind::Generation,
            _ => TaskKind::Classification,
        };
        if self.dataset.kind != needs {
            return Err(CliError::validation(format!(
                "objective {:?} needs a {needs:?} dataset, got {:?}",
                self.name, self.dataset.kind
            )));
        }
        if matches!(self.name, ObjectiveName::Fewshot | ObjectiveName::FewshotMixture) && self.sampler.is_none() {
            return Err(CliError::validation("few-shot objectives need --pool"));
        }
        if self.name == ObjectiveName::Gen {
            resolve_scorer(self.dataset.scorer_id.as_deref().unwrap_or(""))?;
        }
        Ok(())
    }

    fn value(&self, spec: Option<&InterventionSpec>) -> std::result::Result<f64, ObjectiveError> {
        let (p, ds) = (self.params, self.dataset);
        match self.name {
            ObjectiveName::Class => class_objective(p, spec, ds),
            ObjectiveName::Fewshot => fewshot_objective(p, spec, ds, self.sampler.as_ref().unwrap(), self.shots),
            ObjectiveName::FewshotMixture => mixture_objective(p, spec, ds, self.sampler.as_ref().unwrap()),
            ObjectiveName::Gen => {
                let id = ds.scorer_id.as_deref().ok_or(ObjectiveError::MissingScorer)?;
                gen_objective(p, spec, ds, resolve_scorer(id)?.as_ref(), self.max_new_tokens)
            }
        }
    }
}

fn load_pool(path: Option<&Path>, seed: u64, inputs: &mut BTreeMap<String, String>) -> Result<Option<FewShotSampler>> {
    let Some(path) = path else { return Ok(None) };
    let (pool, hash) = load_dataset(path)?;
    inputs.insert("pool".to_string(), hash);
    if pool.kind != TaskKind::Classification {
        return Err(CliError::validation("demonstration pool must be a classification dataset"));
    }
    Ok(Some(FewShotSampler::new(pool.labelled(), seed)))
}

pub struct OptimizeArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    pub pool: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub mechanism: Option<config::MechanismName>,
    pub objective: Option<ObjectiveName>,
    pub iterations: Option<usize>,
    pub layers: Option<Vec<usize>>,
    pub shots: Option<usize>,
}

pub fn optimize(g: &Global, a: &OptimizeArgs) -> Result<PathBuf> {
    let (mut file, bytes): (OptimizeFile, _) = config::load(a.config)?;
    file.mechanism = a.mechanism.unwrap_or(file.mechanism);
    file.objective = a.objective.unwrap_or(file.objective);
    file.bayesopt.iterations = a.iterations.unwrap_or(file.bayesopt.iterations);
    file.shots = a.shots.unwrap_or(file.shots);
    if a.layers.is_some() {
        file.layers = a.layers.clone();
    }
    file.bayesopt.seed = g.seed_or(file.bayesopt.seed);
    let seed = file.bayesopt.seed;

    let (params, ck_hash) = load_checkpoint(a.checkpoint)?;
    let (dataset, ds_hash) = load_dataset(a.dataset)?;
    let mut inputs = BTreeMap::from([("checkpoint".to_string(), ck_hash), ("dataset".to_string(), ds_hash)]);
    if let Some(b) = &bytes {
        inputs.insert("config".to_string(), crate::run::sha256_hex(b));
    }
    let layers = file.layers.clone().unwrap_or_else(|| default_layer_set(params.config.n_layers));
    file.layers = Some(layers.clone());
    file.bayesopt.validate()?;
    check_compatible(&params, &dataset)?;
    if dataset.kind == TaskKind::Classification {
        dataset.validate_optimization_split()?;
    }
    let setup = ObjectiveSetup {
        name: file.objective,
        params: &params,
        dataset: &dataset,
        sampler: load_pool(a.pool, seed, &mut inputs)?,
        shots: file.shots,
        max_new_tokens: file.max_new_tokens,
    };
    setup.check()?;
    let mechanism: SearchMechanism = file.mechanism.into();
    // Reject a bad layer set before spending any evaluations.
    let width = mechanism.width(&params.config);
    mechanism.spec(&layers, &params.config, &vec![0.0; width * layers.len()])?;

    let mut run = Run::create(&g.out_dir, "optimize", to_json(&file), seed, inputs, g.timing)?;
    let result = run_intervention(|spec| setup.value(Some(spec)), mechanism, &layers, &params.config, &file.bayesopt);
    let (best, outcome, failure) = match result {
        Ok((best, outcome)) => (Some(best), outcome.history, None),
        Err(f) => {
            let history = f.history.clone();
            (None, history, Some(CliError::from(f)))
        }
    };
    let rows = outcome
        .iter()
        .map(|h| {
            let spec = mechanism.spec(&layers, &params.config, &h.point).expect("history points fit the layer set");
            vec![
                h.iteration.to_string(),
                h.value.to_string(),
                h.is_best_so_far.to_string(),
                serde_json::to_string(&spec).expect("spec serializes"),
            ]
        })
        .collect::<Vec<_>>();
    run.write(
        "history.csv",
        &csv_bytes(&["iteration", "objective_value", "is_best_so_far", "config_json"], rows),
    )?;
    if let Some(e) = failure {
        run.finish(&format!("failed: {e}"))?;
        return Err(e);
    }
    let best = best.expect("success carries a best config");
    let best_entry = outcome
        .iter()
        .filter(|h| h.is_best_so_far)
        .last()
        .expect("history is nonempty");
    run.write_json("best_config.json", &best)?;
    run.write_json(
        "summary.json",
        &json!({
            "mechanism": file.mechanism,
            "objective": file.objective,
            "layers": layers,
            "dimension": width * layers.len(),
            "iterations": outcome.len(),
            "best_iteration": best_entry.iteration,
            "best_value": best_entry.value,
            "first_value": outcome[0].value,
        }),
    )?;
    run.finish("ok")
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    pub config: &'a str,
    pub shots: usize,
    pub pool: Option<&'a Path>,
    pub objective: Option<ObjectiveName>,
    pub max_new_tokens: usize,
}

pub fn eval(g: &Global, a: &EvalArgs) -> Result<PathBuf> {
    let seed = g.seed_or(0);
    let (params, ck_hash) = load_checkpoint(a.checkpoint)?;
    let (dataset, ds_hash) = load_dataset(a.dataset)?;
    let (spec, spec_hash) = load_spec(a.config)?;
    let mut inputs = BTreeMap::from([
        ("checkpoint".to_string(), ck_hash),
        ("dataset".to_string(), ds_hash),
        ("intervention".to_string(), spec_hash),
    ]);
    check_compatible(&params, &dataset)?;
    if let Some(s) = &spec {
        s.validate(&params.config)?;
    }
    let sampler = load_pool(a.pool, seed, &mut inputs)?;
    let objective = a.objective.unwrap_or(match (dataset.kind, a.shots) {
        (TaskKind::Generation, _) => ObjectiveName::Gen,
        (_, 0) => ObjectiveName::Class,
        _ => ObjectiveName::Fewshot,
    });
    let setup = ObjectiveSetup {
        name: objective,
        params: &params,
        dataset: &dataset,
        sampler,
        shots: a.shots,
        max_new_tokens: a.max_new_tokens,
    };
    setup.check()?;
    let config = json!({
        "shots": a.shots,
        "objective": objective,
        "max_new_tokens": a.max_new_tokens,
    });
    let value = setup.value(spec.as_ref())?;
    let n = dataset.examples.len();
    let (metrics, table) = match dataset.kind {
        TaskKind::Classification => {
            if dataset.label_vocab.is_empty() {
                return Err(ObjectiveError::MissingLabelVocab.into());
            }
            let report = match (&setup.sampler, a.shots) {
                (_, 0) => evaluate_f1(&params, spec.as_ref(), &dataset)?,
                (Some(s), m) => evaluate_f1_shots(&params, spec.as_ref(), &dataset, s, m)?,
                (None, _) => return Err(CliError::validation("--shots above 0 needs --pool")),
            };
            let per_class: BTreeMap<String, f64> =
                report.per_class.iter().map(|(k, v)| (k.to_string(), *v)).collect();
            let rows = dataset
                .examples
                .iter()
                .zip(&report.predictions)
                .enumerate()
                .map(|(i, (ex, p))| vec![i.to_string(), ex.label.map(|l| l.to_string()).unwrap_or_default(), p.to_string()])
                .collect::<Vec<_>>();
            (
                json!({
                    "kind": "classification",
                    "n_examples": n,
                    "shots": a.shots,
                    "macro_f1": report.macro_f1,
                    "accuracy": report.accuracy,
                    "per_class_f1": per_class,
                    "objective": {"name": objective, "value": value},
                }),
                csv_bytes(&["example", "gold", "predicted"], rows),
            )
        }
        TaskKind::Generation => {
            let id = dataset.scorer_id.as_deref().ok_or(ObjectiveError::MissingScorer)?;
            let scorer = resolve_scorer(id)?;
            let rows = dataset
                .examples
                .iter()
                .enumerate()
                .map(|(i, ex)| {
                    let cont = generate(&ex.prompt, &params, spec.as_ref(), a.max_new_tokens, None)?;
                    let text: Vec<String> = cont.iter().map(|t| t.to_string()).collect();
                    Ok(vec![i.to_string(), text.join(" "), scorer.score(&cont).to_string()])
                })
                .collect::<Result<Vec<_>>>()?;
            (
                json!({
                    "kind": "generation",
                    "n_examples": n,
                    "mean_score": value / n as f64,
                    "objective": {"name": objective, "value": value},
                }),
                csv_bytes(&["example", "continuation", "score"], rows),
            )
        }
    };
    let mut run = Run::create(&g.out_dir, "eval", config, seed, inputs, g.timing)?;
    run.write_json("metrics.json", &metrics)?;
    run.write("predictions.csv", &table)?;
    run.finish("ok")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AnalysisName {
    LogitAttr,
    Extremes,
    SvdAlign,
}

pub struct AnalyzeArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    pub config: &'a str,
    pub which: AnalysisName,
    pub lens: LensNorm,
}

fn fmt_summary(s: &Summary) -> Value {
    to_json(s)
}

pub fn analyze(g: &Global, a: &AnalyzeArgs) -> Result<PathBuf> {
    let seed = g.seed_or(0);
    let (params, ck_hash) = load_checkpoint(a.checkpoint)?;
    let (dataset, ds_hash) = load_dataset(a.dataset)?;
    let (spec, spec_hash) = load_spec(a.config)?;
    let inputs = BTreeMap::from([
        ("checkpoint".to_string(), ck_hash),
        ("dataset".to_string(), ds_hash),
        ("intervention".to_string(), spec_hash),
    ]);
    check_compatible(&params, &dataset)?;
    if let Some(s) = &spec {
        s.validate(&params.config)?;
    }
    if dataset.examples.is_empty() {
        return Err(ObjectiveError::EmptyDataset.into());
    }
    let spec = spec.as_ref();
    let traces = |spec: Option<&InterventionSpec>| -> Result<Vec<_>> {
        use rayon::prelude::*;
        dataset
            .examples
            .par_iter()
            .map(|ex| Ok(forward(&ex.prompt, &params, spec)?.trace))
            .collect()
    };
    let config = json!({"which": a.which, "lens": a.lens});
    let mut outputs: Vec<(&str, Vec<u8>)> = Vec::new();
    let summary = match a.which {
        AnalysisName::LogitAttr => {
            if dataset.kind != TaskKind::Classification {
                return Err(CliError::validation("logit-attr needs a labelled classification dataset"));
            }
            let (base, tuned) = (traces(None)?, traces(spec)?);
            let n_layers = params.config.n_layers + 1;
            let mut rows = Vec::new();
            let mut sums = vec![[0.0f64; 3]; n_layers];
            let mut max_abs: f64 = 0.0;
            for (i, ex) in dataset.examples.iter().enumerate() {
                let answer = ex.label.ok_or(ObjectiveError::MissingLabel(i))?;
                let b = logit_attribution(&base[i], &params, answer, a.lens)?;
                let t = logit_attribution(&tuned[i], &params, answer, a.lens)?;
                let d = prob_delta(&b, &t)?;
                for l in 0..n_layers {
                    rows.push(vec![
                        i.to_string(),
                        l.to_string(),
                        answer.to_string(),
                        b.probabilities[l].to_string(),
                        t.probabilities[l].to_string(),
                        d[l].to_string(),
                    ]);
                    sums[l][0] += b.probabilities[l];
                    sums[l][1] += t.probabilities[l];
                    sums[l][2] += d[l];
                    max_abs = max_abs.max(d[l].abs());
                }
            }
            outputs.push((
                "logit_attr.csv",
                csv_bytes(&["example", "layer", "answer", "base_prob", "intervened_prob", "delta"], rows),
            ));
            let n = dataset.examples.len() as f64;
            let per_layer: Vec<Value> = sums
                .iter()
                .enumerate()
                .map(|(l, s)| json!({"layer": l, "mean_base": s[0] / n, "mean_intervened": s[1] / n, "mean_delta": s[2] / n}))
                .collect();
            json!({"which": a.which, "lens": a.lens, "n_examples": dataset.examples.len(), "max_abs_delta": max_abs, "per_layer": per_layer})
        }
        AnalysisName::Extremes => {
            let logits = {
                use rayon::prelude::*;
                dataset
                    .examples
                    .par_iter()
                    .map(|ex| Ok(forward(&ex.prompt, &params, spec)?.logits))
                    .collect::<Result<Vec<_>>>()?
            };
            let e = extremes_from_logits(&logits)?;
            let rows = e
                .per_example
                .iter()
                .enumerate()
                .map(|(i, (mx, mn))| vec![i.to_string(), mx.to_string(), mn.to_string()]);
            outputs.push(("extremes.csv", csv_bytes(&["example", "max_logit", "min_logit"], rows)));
            json!({"which": a.which, "n_examples": logits.len(), "max": fmt_summary(&e.max), "min": fmt_summary(&e.min)})
        }
        AnalysisName::SvdAlign => {
            let tr = traces(spec)?;
            let (sv, dirs) = unembedding_directions(&params)?;
            let n_layers = params.config.n_layers + 1;
            let mut post = vec![vec![0.0; dirs.len()]; n_layers];
            let mut raw = vec![vec![0.0; dirs.len()]; n_layers];
            for t in &tr {
                for l in 0..n_layers {
                    let cp = cosines(&lens_residual(t, &params, l, a.lens), &dirs);
                    let cr = cosines(&t.residuals[l], &dirs);
                    for k in 0..dirs.len() {
                        post[l][k] += cp[k];
                        raw[l][k] += cr[k];
                    }
                }
            }
            let n = tr.len() as f64;
            let mut rows = Vec::new();
            for l in 0..n_layers {
                for k in 0..dirs.len() {
                    rows.push(vec![
                        l.to_string(),
                        k.to_string(),
                        sv[k].to_string(),
                        (post[l][k] / n).to_string(),
                        (raw[l][k] / n).to_string(),
                    ]);
                }
            }
            outputs.push((
                "svd_align.csv",
                csv_bytes(&["layer", "direction", "singular_value", "mean_cosine_post_norm", "mean_cosine_raw"], rows),
            ));
            json!({"which": a.which, "lens": a.lens, "n_examples": tr.len(), "singular_values": sv})
        }
    };
    let mut run = Run::create(&g.out_dir, "analyze", config, seed, inputs, g.timing)?;
    for (name, data) in outputs {
        run.write(name, &data)?;
    }
    run.write_json("summary.json", &summary)?;
    run.finish("ok")
}
