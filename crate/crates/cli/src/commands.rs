use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use emin::backbone::checkpoint::Checkpoint;
use emin::backbone::{gradient_check, EvidenceWeights, ModelConfig, Parameters, TrainExample};
use emin::corpus::{
    build_vocabulary, dataset_to_string, generate_synthetic, load_dataset, tokenize, DocumentCollection, Limits,
    OverLength, QaeInstance,
};
use emin::costmodel::{bench_wallclock, rows_to_csv, time_ratios};
use emin::em::{self, InferStep, Termination};
use emin::metrics::MetricReport;
use emin::retrieval::{EvidenceSelector, Stopwords};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifacts::Run;
use crate::config::{Common, RunConfig};
use crate::{NumericalError, UsageError};

/// Default evidence count for `retrieve`.
pub const RETRIEVE_K: usize = 10;

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

fn load(path: &PathBuf) -> Result<Vec<QaeInstance>> {
    load_dataset(path, &Limits::default(), OverLength::Reject).with_context(|| format!("loading {}", path.display()))
}

fn load_corpus(dir: &PathBuf) -> Result<DocumentCollection> {
    let docs = DocumentCollection::load_dir(dir).with_context(|| format!("reading corpus {}", dir.display()))?;
    if docs.is_empty() {
        return Err(emin::Error::EmptyCorpus).with_context(|| format!("no .txt documents in {}", dir.display()));
    }
    Ok(docs)
}

/// Take `k` from the data unless it was given on the command line.
fn settle_k(common: &Common, config: &mut RunConfig, instances: &[QaeInstance]) {
    if common.k.is_none() {
        if let Some(first) = instances.first() {
            config.em.k = first.evidence.len();
        }
    }
}

pub fn synth(common: &Common, config: RunConfig) -> Result<()> {
    let out = generate_synthetic(&config.synth)?;
    let mut run = Run::new(&common.out_or("data"), "synth")?;
    run.write("train.jsonl", dataset_to_string(&out.train).as_bytes())?;
    run.write("val.jsonl", dataset_to_string(&out.val).as_bytes())?;
    run.write("test.jsonl", dataset_to_string(&out.test).as_bytes())?;
    for doc in &out.documents.documents {
        run.write(&format!("corpus/{}.txt", doc.id), doc.to_text().as_bytes())?;
    }
    info!(
        "{} train / {} val / {} test instances, {} documents",
        out.train.len(),
        out.val.len(),
        out.test.len(),
        out.documents.len()
    );
    run.finish(config.synth.seed, serde_json::to_value(&config.synth)?)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Directory of .txt documents
    #[arg(long)]
    corpus: PathBuf,
    /// Rank paragraphs for this query
    #[arg(long, conflicts_with = "dataset")]
    query: Option<String>,
    /// Attach evidence to every instance of this dataset that has none,
    /// querying with the answer
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Stopword file, one token per line
    #[arg(long)]
    stopwords: Option<PathBuf>,
}

pub fn retrieve(common: &Common, config: RunConfig, args: RetrieveArgs) -> Result<()> {
    let k = common.k.unwrap_or(RETRIEVE_K);
    let docs = load_corpus(&args.corpus)?;
    let stopwords = match args.stopwords.as_ref().or(config.retrieval.stopwords.as_ref()) {
        Some(p) => Stopwords::load(p).with_context(|| format!("reading stopwords {}", p.display()))?,
        None => Stopwords::english(),
    };
    let mut selector = EvidenceSelector::new(&docs, stopwords);
    selector.top_d = config.retrieval.top_d;
    let mut run = Run::new(&common.out_or("runs/retrieve"), "retrieve")?;
    match (&args.query, &args.dataset) {
        (Some(q), None) => {
            let ranked = selector.select(q, k)?;
            if ranked.shortfall {
                warn!("only {} paragraphs available for k = {k}", ranked.paragraphs.len());
            }
            let text = jsonl(&ranked.paragraphs)?;
            print!("{text}");
            run.write("ranked.jsonl", text.as_bytes())?;
        }
        (None, Some(path)) => {
            let mut instances = load(path)?;
            let mut filled = 0;
            for inst in instances.iter_mut().filter(|i| i.evidence.is_empty()) {
                let ranked = selector.select(&inst.answer.join(" "), k)?;
                if ranked.shortfall {
                    warn!("{}: only {} paragraphs available", inst.id, ranked.paragraphs.len());
                }
                inst.evidence = ranked.paragraphs.iter().map(|p| tokenize(&p.text)).collect();
                filled += 1;
            }
            info!("attached evidence to {filled} of {} instances", instances.len());
            run.write("dataset.jsonl", dataset_to_string(&instances).as_bytes())?;
        }
        _ => return Err(UsageError("retrieve needs exactly one of --query or --dataset".into()).into()),
    }
    run.finish(
        config.seed,
        json!({ "k": k, "top_d": selector.top_d, "query": args.query, "dataset": args.dataset }),
    )?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset (JSON Lines) with evidence and explanations
    #[arg(long)]
    data: PathBuf,
    /// Document collection whose words join the vocabulary
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Iterations of uniform weights before the first E-step
    #[arg(long)]
    warmup: Option<usize>,
    /// Drop tokens seen fewer times than this
    #[arg(long, default_value_t = 1)]
    min_count: usize,
}

pub fn train(common: &Common, mut config: RunConfig, args: TrainArgs) -> Result<()> {
    let instances = load(&args.data)?;
    let docs = match &args.corpus {
        Some(dir) => load_corpus(dir)?,
        None => DocumentCollection::default(),
    };
    settle_k(common, &mut config, &instances);
    if let Some(w) = args.warmup {
        config.em.warmup_iterations = w;
    }
    let vocab = build_vocabulary(&instances, &docs, args.min_count)?;
    let examples: Vec<TrainExample> = instances.iter().map(|i| TrainExample::from_instance(i, &vocab)).collect();
    let mut model = config.model.apply(vocab.len());
    model.fit_lengths(&examples);
    info!(
        "{} instances, vocabulary {}, k = {}, strategy {}",
        examples.len(),
        vocab.len(),
        config.em.k,
        config.em.strategy
    );
    let start = Instant::now();
    let (trainer, report) = em::train(&examples, &model, &config.em, config.seed)?;
    for r in &report.records {
        info!("t={} mean_kl={:.5} loss={:?}", r.iteration, r.mean_kl, r.loss);
    }
    info!(
        "{:?} after {} iterations in {:.1}s",
        report.termination,
        report.iterations(),
        start.elapsed().as_secs_f64()
    );
    if let Some(loss) = report.records.iter().filter_map(|r| r.loss).find(|l| !l.is_finite()) {
        return Err(NumericalError(format!("training loss became {loss}")).into());
    }

    let mut ck = Checkpoint::new(trainer.params, trainer.state, config.seed, report.iterations() as u64);
    ck.vocabulary = Some(vocab);
    let mut run = Run::new(&common.out_or("runs/train"), "train")?;
    run.write("checkpoint.bin", &ck.to_bytes()?)?;
    run.write("report.jsonl", report.to_jsonl()?.as_bytes())?;
    let summary = json!({
        "strategy": report.strategy,
        "termination": report.termination,
        "iterations": report.iterations(),
        "final_mean_kl": report.final_mean_kl(),
    });
    run.write("summary.json", format!("{summary:#}\n").as_bytes())?;
    run.finish(
        config.seed,
        json!({ "data": args.data, "corpus": args.corpus, "model": model, "em": config.em }),
    )?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset with evidence attached
    #[arg(long)]
    data: PathBuf,
}

/// One line of `generations.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub explanation: String,
    pub z: EvidenceWeights,
    pub iterations: usize,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_index: Option<usize>,
    #[serde(default)]
    pub trace: Vec<InferStep>,
}

pub fn infer(common: &Common, mut config: RunConfig, args: InferArgs) -> Result<()> {
    let bytes = fs::read(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let vocab = ck
        .vocabulary
        .clone()
        .ok_or_else(|| emin::Error::Checkpoint("checkpoint carries no vocabulary".into()))?;
    let instances = load(&args.data)?;
    settle_k(common, &mut config, &instances);
    let mut predictions = Vec::with_capacity(instances.len());
    let mut recovered = 0;
    for inst in &instances {
        let ex = TrainExample::from_instance(inst, &vocab);
        let res = em::infer_with_strategy(&ck.params, &ex, &config.em).with_context(|| format!("instance {}", inst.id))?;
        if inst.planted_index == Some(res.z.argmax()) {
            recovered += 1;
        }
        predictions.push(Prediction {
            id: inst.id.clone(),
            explanation: vocab.decode(res.generation.content()).join(" "),
            iterations: res.iterations(),
            termination: res.termination,
            planted_index: inst.planted_index,
            z: res.z,
            trace: res.trace,
        });
    }
    let labelled = instances.iter().filter(|i| i.planted_index.is_some()).count();
    if labelled > 0 {
        info!("argmax z on the planted paragraph for {recovered} / {labelled} instances");
    }
    let mut run = Run::new(&common.out_or("runs/infer"), "infer")?;
    run.write("generations.jsonl", jsonl(&predictions)?.as_bytes())?;
    run.finish(
        ck.seed,
        json!({ "checkpoint": args.checkpoint, "data": args.data, "em": config.em }),
    )?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// generations.jsonl written by `infer`
    #[arg(long)]
    predictions: PathBuf,
    /// Dataset holding the reference explanations
    #[arg(long)]
    data: PathBuf,
    /// Also write per-instance scores as JSON Lines
    #[arg(long)]
    per_instance: bool,
    /// Report unsmoothed BLEU
    #[arg(long)]
    no_smoothing: bool,
}

#[derive(Deserialize)]
struct PredictionLine {
    id: String,
    explanation: String,
}

pub fn eval(common: &Common, config: RunConfig, args: EvalArgs) -> Result<()> {
    let references: HashMap<String, Vec<String>> =
        load(&args.data)?.into_iter().map(|i| (i.id, i.explanation)).collect();
    let text = fs::read_to_string(&args.predictions).with_context(|| format!("reading {}", args.predictions.display()))?;
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: PredictionLine = serde_json::from_str(line).map_err(|e| emin::Error::Schema {
            line: n + 1,
            message: e.to_string(),
        })?;
        let reference = references
            .get(&p.id)
            .ok_or_else(|| emin::Error::InvalidInstance {
                id: p.id.clone(),
                message: "no reference explanation in the dataset".into(),
            })?
            .clone();
        items.push((p.id, tokenize(&p.explanation), reference));
    }
    let mut report = MetricReport::compute(&items, !args.no_smoothing)?;
    let mut run = Run::new(&common.out_or("runs/eval"), "eval")?;
    if args.per_instance {
        run.write("per_instance.jsonl", jsonl(&report.per_instance)?.as_bytes())?;
    }
    report.per_instance.clear();
    let summary = format!("{:#}\n", serde_json::to_value(&report)?);
    print!("{summary}");
    run.write("metrics.json", summary.as_bytes())?;
    run.finish(
        config.seed,
        json!({ "predictions": args.predictions, "data": args.data, "smoothing": !args.no_smoothing }),
    )?;
    Ok(())
}

pub fn bench(common: &Common, config: RunConfig) -> Result<()> {
    let b = &config.bench;
    let rows = bench_wallclock(&b.model, &b.grid, b.repetitions)?;
    let csv = rows_to_csv(&rows);
    print!("{csv}");
    for (m, n, ratio) in time_ratios(&rows) {
        info!("m={m} n={n}: concatenated / separated = {ratio:.2}");
    }
    let mut run = Run::new(&common.out_or("runs/bench"), "bench")?;
    run.write("bench.csv", csv.as_bytes())?;
    run.finish(b.model.seed, serde_json::to_value(b)?)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
}

/// d = 8, one layer, two paragraphs; weights scaled up so gradients sit
/// well above rounding noise.
fn tiny_problem(seed: u64) -> Result<(Parameters, TrainExample, EvidenceWeights)> {
    let config = ModelConfig {
        vocab_size: 14,
        d_model: 8,
        num_layers: 1,
        num_heads: 2,
        ff_dim: 16,
        max_input_len: 8,
        max_evidence_len: 8,
        max_output_len: 6,
        dropout: 0.0,
    };
    let mut params = Parameters::init(&config, seed)?;
    params.as_mut_slice().iter_mut().for_each(|v| *v *= 10.0);
    let ex = TrainExample {
        qa: vec![4, 5, 6],
        evidence: vec![vec![7, 8, 9, 5], vec![10, 11, 4]],
        target: vec![8, 9, 12],
    };
    Ok((params, ex, EvidenceWeights::new(vec![0.3, 0.7])?))
}

pub fn gradcheck(common: &Common, config: RunConfig, args: GradcheckArgs) -> Result<()> {
    let seed = common.seed.unwrap_or(11);
    let (params, ex, z) = tiny_problem(seed)?;
    let report = gradient_check(&params, &[(&ex, &z)], args.step, 1)?;
    println!(
        "max relative error {:.3e} over {} coordinates (worst {})",
        report.max_relative_error, report.checked, report.worst_index
    );
    let mut run = Run::new(&common.out_or("runs/gradcheck"), "gradcheck")?;
    let text = json!({
        "max_relative_error": report.max_relative_error,
        "worst_index": report.worst_index,
        "checked": report.checked,
        "per_group": report.per_group,
    });
    run.write("gradcheck.json", format!("{text:#}\n").as_bytes())?;
    run.finish(seed, json!({ "tolerance": args.tolerance, "step": args.step, "seed": config.seed }))?;
    if !(report.max_relative_error < args.tolerance) {
        return Err(NumericalError(format!(
            "max relative error {:.3e} above tolerance {:.1e}",
            report.max_relative_error, args.tolerance
        ))
        .into());
    }
    Ok(())
}
