//! Expectation-maximization over per-instance evidence weights.
//!
//! The E-step scores every paragraph by the inverse cross-entropy of a
//! reference explanation when that paragraph alone is active, and turns the
//! scores into weights with a tempered softmax. The M-step trains the
//! network with the weights held fixed.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::optim::{optimizer_step, AdamState, AdamWConfig, LinearSchedule};
use crate::backbone::{
    batch_loss_and_gradients, score_reference, DecoderMemory, EncodedInstance, EvidenceWeights,
    LossOptions, ModelConfig, Parameters, TrainExample, MIN_PROB,
};
use crate::corpus::UNK;
use crate::decoding::{beam_search_model, DecoderStep, Generation};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Emin,
    Mean,
    Simi,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Emin => "emin",
            Strategy::Mean => "mean",
            Strategy::Simi => "simi",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "emin" => Ok(Strategy::Emin),
            "mean" => Ok(Strategy::Mean),
            "simi" => Ok(Strategy::Simi),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EMConfig {
    pub k: usize,
    /// KL threshold for stopping.
    pub epsilon: f64,
    /// λ = exp(-temperature_rate · t).
    pub temperature_rate: f64,
    /// The same schedule for the E-steps of inference, where `t` counts
    /// inference iterations. Scores against a generated reference are
    /// compressed by the generator's own uncertain tokens, so this decays
    /// faster than the training schedule.
    pub infer_temperature_rate: f64,
    /// EM iteration cap during training.
    pub t_max: usize,
    /// EM iteration cap during inference.
    pub infer_t_max: usize,
    pub passes_per_iteration: usize,
    pub strategy: Strategy,
    /// Lower bound on a cross-entropy before it is inverted.
    pub ce_floor: f64,
    /// Leading iterations that train with uniform weights before the first
    /// E-step.
    pub warmup_iterations: usize,
    /// No convergence check before this iteration.
    pub min_iterations: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    /// Probability of replacing each question-answer token with UNK in an
    /// M-step update.
    pub qa_token_dropout: f64,
    pub optimizer: AdamWConfig,
    pub beam_width: usize,
    pub max_generation_len: usize,
    /// Use the previous generation's tokens with weight 1 instead of their
    /// probabilities as the inference-time reference.
    pub one_hot_reference: bool,
}

impl Default for EMConfig {
    fn default() -> Self {
        EMConfig {
            k: 4,
            epsilon: 0.01,
            temperature_rate: 0.01,
            infer_temperature_rate: 0.5,
            t_max: 30,
            infer_t_max: 10,
            passes_per_iteration: 1,
            strategy: Strategy::Emin,
            ce_floor: 1e-6,
            warmup_iterations: 0,
            min_iterations: 20,
            batch_size: 8,
            label_smoothing: 0.0,
            qa_token_dropout: 0.4,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            beam_width: 5,
            max_generation_len: 32,
            one_hot_reference: false,
        }
    }
}

impl EMConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.epsilon > 0.0) {
            return fail("epsilon must be positive");
        }
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.beam_width == 0 {
            return fail("beam_width must be at least 1");
        }
        if !(self.ce_floor > 0.0) {
            return fail("ce_floor must be positive");
        }
        if self.infer_t_max == 0 {
            return fail("infer_t_max must be at least 1");
        }
        if !(0.0..1.0).contains(&self.qa_token_dropout) {
            return fail("qa_token_dropout must be in [0, 1)");
        }
        Ok(())
    }

    pub fn temperature(&self, iteration: usize) -> f64 {
        (-self.temperature_rate * iteration as f64).exp()
    }

    pub fn infer_temperature(&self, iteration: usize) -> f64 {
        (-self.infer_temperature_rate * iteration as f64).exp()
    }
}

/// exp(-0.01 · iteration).
pub fn temperature(iteration: usize) -> f64 {
    (-0.01 * iteration as f64).exp()
}

/// KL(p ‖ q) in nats, with q floored at 1e-12 and 0·ln(0/q) = 0.
pub fn kl_divergence(p: &EvidenceWeights, q: &EvidenceWeights) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!("KL between lengths {} and {}", p.len(), q.len())));
    }
    Ok(p.as_slice()
        .iter()
        .zip(q.as_slice())
        .filter(|(&pj, _)| pj > 0.0)
        .map(|(&pj, &qj)| pj * (pj / qj.max(1e-12)).ln())
        .sum::<f64>()
        .max(0.0))
}

/// Inverse cross-entropies to weights: softmax(c / λ).
pub fn weights_from_scores(c: &[f64], lambda: f64) -> EvidenceWeights {
    EvidenceWeights::softmax(c, lambda)
}

/// Source of single-paragraph token probabilities for the E-step.
pub trait EvidenceScorer {
    /// `result[j][m]`: probability of `reference[m]` given the earlier
    /// reference tokens when only paragraph `j` is active.
    fn single_evidence_probs(&self, ex: &TrainExample, reference: &[u32]) -> Result<Vec<Vec<f64>>>;
}

impl EvidenceScorer for Parameters {
    fn single_evidence_probs(&self, ex: &TrainExample, reference: &[u32]) -> Result<Vec<Vec<f64>>> {
        let enc = EncodedInstance::new(self, ex)?;
        single_evidence_probs_encoded(self, &enc, reference)
    }
}

fn single_evidence_probs_encoded(
    params: &Parameters,
    enc: &EncodedInstance,
    reference: &[u32],
) -> Result<Vec<Vec<f64>>> {
    let k = enc.evidence.len();
    (0..k)
        .map(|j| {
            let mut active = vec![false; k];
            active[j] = true;
            let memory = DecoderMemory::with_active(params, &enc.qa, &enc.evidence, &active);
            Ok(score_reference(params, &memory, &EvidenceWeights::one_hot(k, j), reference)?.target_probs)
        })
        .collect()
}

/// Weighted cross-entropy of each paragraph's probabilities, inverted.
fn inverse_ce(probs: &[Vec<f64>], weights: Option<&[f64]>, ce_floor: f64) -> Vec<f64> {
    probs
        .iter()
        .map(|pj| {
            let ce: f64 = pj
                .iter()
                .enumerate()
                .map(|(m, &p)| -weights.map_or(1.0, |w| w[m]) * p.max(MIN_PROB).ln())
                .sum();
            1.0 / ce.max(ce_floor)
        })
        .collect()
}

/// Training E-step against the ground-truth explanation.
pub fn e_step_train<S: EvidenceScorer + ?Sized>(
    scorer: &S,
    ex: &TrainExample,
    lambda: f64,
    ce_floor: f64,
) -> Result<(EvidenceWeights, Vec<f64>)> {
    let probs = scorer.single_evidence_probs(ex, &ex.reference())?;
    let c = inverse_ce(&probs, None, ce_floor);
    Ok((weights_from_scores(&c, lambda), c))
}

/// Inference E-step against a previous generation. Each position is
/// weighted by the probability the generator gave it, or by 1 when
/// `one_hot` is set.
pub fn e_step_infer<S: EvidenceScorer + ?Sized>(
    scorer: &S,
    ex: &TrainExample,
    prev: &Generation,
    lambda: f64,
    ce_floor: f64,
    one_hot: bool,
) -> Result<(EvidenceWeights, Vec<f64>)> {
    let reference = prev.scored_tokens();
    if reference.is_empty() {
        return Err(Error::Dimension("previous generation has no scored tokens".into()));
    }
    let probs = scorer.single_evidence_probs(ex, reference)?;
    let weights = (!one_hot).then_some(prev.probs.as_slice());
    let c = inverse_ce(&probs, weights, ce_floor);
    Ok((weights_from_scores(&c, lambda), c))
}

/// Softmax of dot products between pooled features.
pub fn simi_from_features(qa: &[f64], paragraphs: &[Vec<f64>]) -> EvidenceWeights {
    let scores: Vec<f64> = paragraphs.iter().map(|p| dot(qa, p)).collect();
    EvidenceWeights::softmax(&scores, 1.0)
}

/// Similarity weights from mean-pooled final encoder layers.
pub fn simi_weights(params: &Parameters, ex: &TrainExample) -> Result<EvidenceWeights> {
    let enc = EncodedInstance::new(params, ex)?;
    let d = params.config.d_model;
    let paragraphs: Vec<Vec<f64>> = enc.evidence.iter().map(|e| e.mean_pooled(d)).collect();
    Ok(simi_from_features(&enc.qa.mean_pooled(d), &paragraphs))
}

/// Parameters, optimizer state and random streams of a training run.
pub struct Trainer {
    pub params: Parameters,
    pub state: AdamState,
    pub optimizer: AdamWConfig,
    pub schedule: LinearSchedule,
    pub label_smoothing: f64,
    pub qa_token_dropout: f64,
    pub batch_size: usize,
    dropout_rng: ChaCha8Rng,
    batch_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(params: Parameters, seed: u64, optimizer: AdamWConfig, schedule: LinearSchedule, batch_size: usize) -> Self {
        let n = params.len();
        Trainer {
            params,
            state: AdamState::new(n),
            optimizer,
            schedule,
            label_smoothing: 0.0,
            qa_token_dropout: 0.0,
            batch_size: batch_size.max(1),
            dropout_rng: seeds::stream(seed, "dropout"),
            batch_rng: seeds::stream(seed, "batching"),
        }
    }

    /// `passes` shuffled passes of mini-batch updates with fixed weights.
    /// Returns the token-weighted mean loss of the last pass, or `None` when
    /// no pass ran.
    pub fn m_step(&mut self, data: &[TrainExample], z_all: &[EvidenceWeights], passes: usize) -> Result<Option<f64>> {
        if data.len() != z_all.len() {
            return Err(Error::Dimension(format!(
                "{} instances but {} weight vectors",
                data.len(),
                z_all.len()
            )));
        }
        let mut last = None;
        for _ in 0..passes {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut self.batch_rng);
            let (mut total, mut tokens) = (0.0, 0usize);
            for chunk in order.chunks(self.batch_size) {
                let masked: Vec<TrainExample> = if self.qa_token_dropout > 0.0 {
                    chunk
                        .iter()
                        .map(|&i| {
                            let mut ex = data[i].clone();
                            for t in ex.qa.iter_mut() {
                                if self.dropout_rng.random::<f64>() < self.qa_token_dropout {
                                    *t = UNK;
                                }
                            }
                            ex
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                let batch: Vec<(&TrainExample, &EvidenceWeights)> = if masked.is_empty() {
                    chunk.iter().map(|&i| (&data[i], &z_all[i])).collect()
                } else {
                    chunk.iter().zip(&masked).map(|(&i, ex)| (ex, &z_all[i])).collect()
                };
                let (loss, grad) = batch_loss_and_gradients(
                    &self.params,
                    &batch,
                    LossOptions {
                        label_smoothing: self.label_smoothing,
                        dropout_rng: Some(&mut self.dropout_rng),
                    },
                )?;
                let lr = self.schedule.lr(self.state.step);
                optimizer_step(&mut self.params, &grad, &mut self.state, &self.optimizer, lr)?;
                let n: usize = batch.iter().map(|(ex, _)| ex.target.len() + 1).sum();
                total += loss * n as f64;
                tokens += n;
            }
            last = Some(if tokens == 0 { 0.0 } else { total / tokens as f64 });
        }
        Ok(last)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
}

/// One EM iteration of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub strategy: Strategy,
    pub lambda: f64,
    /// Whether weights came from an E-step in this iteration.
    pub e_step: bool,
    /// Mean over instances of KL(z_t ‖ z_{t-1}).
    pub mean_kl: f64,
    /// Mean per-token loss of the M-step, absent when training stopped
    /// before it.
    pub loss: Option<f64>,
    /// Inverse cross-entropies per instance (E-step iterations only).
    pub c: Vec<Vec<f64>>,
    pub z: Vec<EvidenceWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EMReport {
    pub strategy: Strategy,
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
}

impl EMReport {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn final_mean_kl(&self) -> Option<f64> {
        self.records.last().map(|r| r.mean_kl)
    }

    /// One JSON object per iteration.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<IterationRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

fn check_data(data: &[TrainExample], k: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some((i, ex)) = data.iter().enumerate().find(|(_, ex)| ex.evidence.len() != k) {
        return Err(Error::Dimension(format!(
            "instance {i} has {} paragraphs, expected {k}",
            ex.evidence.len()
        )));
    }
    Ok(())
}

/// Number of optimizer steps the full run may take.
pub fn planned_steps(n: usize, config: &EMConfig) -> u64 {
    let batches = n.div_ceil(config.batch_size.max(1));
    (config.t_max * config.passes_per_iteration * batches) as u64
}

/// Fit the model and the evidence weights of every training instance.
pub fn train(
    data: &[TrainExample],
    model: &ModelConfig,
    config: &EMConfig,
    seed: u64,
) -> Result<(Trainer, EMReport)> {
    config.validate()?;
    let params = Parameters::init(model, seed)?;
    let schedule = LinearSchedule::new(config.optimizer.lr, planned_steps(data.len(), config));
    let mut trainer = Trainer::new(params, seed, config.optimizer, schedule, config.batch_size);
    trainer.label_smoothing = config.label_smoothing;
    trainer.qa_token_dropout = config.qa_token_dropout;
    let report = train_with(&mut trainer, data, config)?;
    Ok((trainer, report))
}

/// The EM loop on an existing trainer.
pub fn train_with(trainer: &mut Trainer, data: &[TrainExample], config: &EMConfig) -> Result<EMReport> {
    config.validate()?;
    check_data(data, config.k)?;
    let mut z_all = vec![EvidenceWeights::uniform(config.k); data.len()];
    let mut records = Vec::new();
    let mut termination = Termination::MaxIterations;
    let mut previous_e_step = false;
    for t in 1..=config.t_max {
        let lambda = config.temperature(t);
        let e_step = config.strategy == Strategy::Emin && t > config.warmup_iterations;
        let mut c_all = Vec::new();
        let new_z: Vec<EvidenceWeights> = match config.strategy {
            Strategy::Emin if e_step => {
                let mut zs = Vec::with_capacity(data.len());
                for ex in data {
                    let (z, c) = e_step_train(&trainer.params, ex, lambda, config.ce_floor)?;
                    zs.push(z);
                    c_all.push(c);
                }
                zs
            }
            Strategy::Simi => data
                .iter()
                .map(|ex| simi_weights(&trainer.params, ex))
                .collect::<Result<_>>()?,
            _ => z_all.clone(),
        };
        let mut mean_kl = 0.0;
        for (a, b) in new_z.iter().zip(&z_all) {
            mean_kl += kl_divergence(a, b)?;
        }
        mean_kl /= data.len() as f64;
        z_all = new_z;
        // after an E-step the weights can only be said to have settled if
        // the previous iteration ran one too; until the first E-step EMIN
        // is MEAN
        let comparable = if e_step { previous_e_step } else { t > 1 };
        previous_e_step = e_step;
        let converged = comparable && t >= config.min_iterations && mean_kl < config.epsilon;
        let loss = if converged {
            None
        } else {
            trainer.m_step(data, &z_all, config.passes_per_iteration)?
        };
        log::info!(
            "iteration {t} strategy={} lambda={lambda:.6} mean_kl={mean_kl:.6} loss={}",
            config.strategy,
            loss.map_or("-".to_string(), |l| format!("{l:.4}"))
        );
        records.push(IterationRecord {
            iteration: t,
            strategy: config.strategy,
            lambda,
            e_step,
            mean_kl,
            loss,
            c: c_all,
            z: z_all.clone(),
        });
        if converged {
            termination = Termination::Converged;
            break;
        }
    }
    Ok(EMReport {
        strategy: config.strategy,
        records,
        termination,
    })
}

/// One inference-time EM iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferStep {
    pub iteration: usize,
    pub lambda: f64,
    /// Weights used for this iteration's generation.
    pub z: EvidenceWeights,
    /// Scores of the E-step that followed, if any.
    pub c: Option<Vec<f64>>,
    pub kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResult {
    pub generation: Generation,
    /// Final weights.
    pub z: EvidenceWeights,
    pub trace: Vec<InferStep>,
    pub termination: Termination,
}

impl InferResult {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

fn generation_len(params: &Parameters, config: &EMConfig) -> usize {
    config.max_generation_len.min(params.config.max_output_len)
}

/// Alternate generation and E-steps from uniform weights until the weights
/// settle, then return the final generation.
pub fn infer(params: &Parameters, ex: &TrainExample, config: &EMConfig) -> Result<InferResult> {
    config.validate()?;
    let enc = EncodedInstance::new(params, ex)?;
    let k = ex.evidence.len();
    if k == 0 {
        return Err(Error::Dimension("instance has no evidence".into()));
    }
    let max_len = generation_len(params, config);
    let generate = |z: &EvidenceWeights| -> Result<Generation> {
        let step = DecoderStep::new(params, &enc.qa, &enc.evidence, z)?;
        beam_search_model(&step, config.beam_width, max_len)
    };
    let mut z = EvidenceWeights::uniform(k);
    let mut trace = Vec::new();
    for t in 1..=config.infer_t_max {
        let lambda = config.infer_temperature(t);
        let gen = generate(&z)?;
        if t == config.infer_t_max || gen.probs.is_empty() {
            trace.push(InferStep {
                iteration: t,
                lambda,
                z: z.clone(),
                c: None,
                kl: None,
            });
            return Ok(InferResult {
                generation: gen,
                z,
                trace,
                termination: Termination::MaxIterations,
            });
        }
        let probs = single_evidence_probs_encoded(params, &enc, gen.scored_tokens())?;
        let weights = (!config.one_hot_reference).then_some(gen.probs.as_slice());
        let c = inverse_ce(&probs, weights, config.ce_floor);
        let new_z = weights_from_scores(&c, lambda);
        let kl = kl_divergence(&new_z, &z)?;
        trace.push(InferStep {
            iteration: t,
            lambda,
            z: z.clone(),
            c: Some(c),
            kl: Some(kl),
        });
        if kl < config.epsilon {
            let generation = if new_z == z { gen } else { generate(&new_z)? };
            return Ok(InferResult {
                generation,
                z: new_z,
                trace,
                termination: Termination::Converged,
            });
        }
        z = new_z;
    }
    unreachable!("the loop returns at its last iteration")
}

/// Beam search under fixed weights, without any E-step.
pub fn generate_with(params: &Parameters, ex: &TrainExample, z: &EvidenceWeights, config: &EMConfig) -> Result<Generation> {
    let enc = EncodedInstance::new(params, ex)?;
    let step = DecoderStep::new(params, &enc.qa, &enc.evidence, z)?;
    beam_search_model(&step, config.beam_width, generation_len(params, config))
}

/// Generate under the given strategy: EM inference for EMIN, uniform
/// weights for MEAN, similarity weights for SIMI.
pub fn infer_with_strategy(params: &Parameters, ex: &TrainExample, config: &EMConfig) -> Result<InferResult> {
    let z = match config.strategy {
        Strategy::Emin => return infer(params, ex, config),
        Strategy::Mean => EvidenceWeights::uniform(ex.evidence.len()),
        Strategy::Simi => simi_weights(params, ex)?,
    };
    let generation = generate_with(params, ex, &z, config)?;
    Ok(InferResult {
        generation,
        trace: vec![InferStep {
            iteration: 1,
            lambda: config.infer_temperature(1),
            z: z.clone(),
            c: None,
            kl: None,
        }],
        z,
        termination: Termination::MaxIterations,
    })
}
