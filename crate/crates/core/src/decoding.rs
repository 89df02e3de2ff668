//! Greedy and beam-search generation.
//!
//! Hypotheses are ranked by log-probability divided by the number of scored
//! tokens. Reserved ids other than EOS are never emitted. Among equally
//! probable tokens the lower id wins, except that EOS loses every tie so a
//! flat distribution keeps producing content.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::backbone::{next_distribution, DecoderMemory, EncoderOutput, EvidenceWeights, Parameters};
use crate::corpus::{BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};

/// Anything that yields a next-token distribution for a prefix starting
/// with BOS.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    fn next_distribution(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// The transformer decoder with fixed encoder memory and evidence weights.
pub struct DecoderStep<'a> {
    pub params: &'a Parameters,
    pub memory: DecoderMemory,
    pub z: EvidenceWeights,
}

impl<'a> DecoderStep<'a> {
    pub fn new(
        params: &'a Parameters,
        qa_out: &EncoderOutput,
        ev_outs: &[EncoderOutput],
        z: &EvidenceWeights,
    ) -> Result<Self> {
        if ev_outs.len() != z.len() {
            return Err(Error::Dimension(format!(
                "{} evidence encodings but {} weights",
                ev_outs.len(),
                z.len()
            )));
        }
        let active: Vec<bool> = z.as_slice().iter().map(|&w| w != 0.0).collect();
        Ok(DecoderStep {
            params,
            memory: DecoderMemory::with_active(params, qa_out, ev_outs, &active),
            z: z.clone(),
        })
    }
}

impl StepModel for DecoderStep<'_> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn next_distribution(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        next_distribution(self.params, &self.memory, &self.z, prefix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// `BOS, content…, EOS`.
    pub tokens: Vec<u32>,
    /// Probability of every token the model emitted, in order. An EOS added
    /// because `max_len` was reached has no entry.
    pub probs: Vec<f64>,
    pub log_prob: f64,
    pub beam_width: usize,
    /// False when generation stopped at `max_len` rather than on EOS.
    pub finished: bool,
}

impl Generation {
    /// Content tokens without BOS/EOS.
    pub fn content(&self) -> &[u32] {
        &self.tokens[1..self.tokens.len() - 1]
    }

    /// The emitted tokens that carry a probability (content, then EOS if
    /// the model produced it).
    pub fn scored_tokens(&self) -> &[u32] {
        &self.tokens[1..1 + self.probs.len()]
    }

    /// Length-normalized log-probability.
    pub fn score(&self) -> f64 {
        normalized(self.log_prob, self.probs.len())
    }
}

fn normalized(log_prob: f64, len: usize) -> f64 {
    if len == 0 {
        0.0
    } else {
        log_prob / len as f64
    }
}

fn emittable(id: u32) -> bool {
    !matches!(id, PAD | BOS | UNK)
}

/// Candidate order: higher probability first, EOS after content on ties,
/// then lower id.
fn candidate_order(a: (u32, f64), b: (u32, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| (a.0 == EOS).cmp(&(b.0 == EOS)))
        .then_with(|| a.0.cmp(&b.0))
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    probs: Vec<f64>,
    log_prob: f64,
}

impl Hypothesis {
    fn finish(mut self, beam_width: usize, finished: bool) -> Generation {
        if !finished {
            self.tokens.push(EOS);
        }
        Generation {
            tokens: self.tokens,
            probs: self.probs,
            log_prob: self.log_prob,
            beam_width,
            finished,
        }
    }
}

/// Every hypothesis that left the beam, in the order it finished.
pub fn beam_search_all<M: StepModel + ?Sized>(
    model: &M,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<Generation>> {
    if beam_width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut alive = vec![Hypothesis {
        tokens: vec![BOS],
        probs: Vec::new(),
        log_prob: 0.0,
    }];
    let mut done = Vec::new();
    for _ in 0..max_len {
        // (hypothesis index, token, probability)
        let mut pool: Vec<(usize, u32, f64)> = Vec::new();
        for (h, hyp) in alive.iter().enumerate() {
            let dist = model.next_distribution(&hyp.tokens)?;
            let mut ranked: Vec<(u32, f64)> = dist
                .iter()
                .enumerate()
                .map(|(t, &p)| (t as u32, p))
                .filter(|&(t, p)| emittable(t) && p > 0.0)
                .collect();
            ranked.sort_by(|&a, &b| candidate_order(a, b));
            ranked.truncate(beam_width);
            pool.extend(ranked.into_iter().map(|(t, p)| (h, t, p)));
        }
        // all alive hypotheses have the same length, so comparing raw
        // log-probabilities is the same as comparing normalized scores
        pool.sort_by(|a, b| {
            let sa = alive[a.0].log_prob + a.2.ln();
            let sb = alive[b.0].log_prob + b.2.ln();
            sb.partial_cmp(&sa)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
                .then_with(|| candidate_order((a.1, a.2), (b.1, b.2)))
        });
        pool.truncate(beam_width);
        let mut next = Vec::new();
        for (h, t, p) in pool {
            let mut hyp = alive[h].clone();
            hyp.tokens.push(t);
            hyp.probs.push(p);
            hyp.log_prob += p.ln();
            if t == EOS {
                done.push(hyp.finish(beam_width, true));
            } else {
                next.push(hyp);
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    done.extend(alive.into_iter().map(|h| h.finish(beam_width, false)));
    Ok(done)
}

/// Best hypothesis by normalized score; earlier finishers win ties.
pub fn best_of(generations: Vec<Generation>) -> Generation {
    let mut best: Option<Generation> = None;
    for g in generations {
        if best.as_ref().is_none_or(|b| g.score() > b.score()) {
            best = Some(g);
        }
    }
    best.expect("beam search always yields a hypothesis")
}

pub fn beam_search_model<M: StepModel + ?Sized>(model: &M, beam_width: usize, max_len: usize) -> Result<Generation> {
    Ok(best_of(beam_search_all(model, beam_width, max_len)?))
}

pub fn greedy_model<M: StepModel + ?Sized>(model: &M, max_len: usize) -> Result<Generation> {
    let mut hyp = Hypothesis {
        tokens: vec![BOS],
        probs: Vec::new(),
        log_prob: 0.0,
    };
    for _ in 0..max_len {
        let dist = model.next_distribution(&hyp.tokens)?;
        let (t, p) = dist
            .iter()
            .enumerate()
            .map(|(t, &p)| (t as u32, p))
            .filter(|&(t, _)| emittable(t))
            .min_by(|&a, &b| candidate_order(a, b))
            .ok_or_else(|| Error::Dimension("empty vocabulary".into()))?;
        hyp.tokens.push(t);
        hyp.probs.push(p);
        hyp.log_prob += p.ln();
        if t == EOS {
            return Ok(hyp.finish(1, true));
        }
    }
    Ok(hyp.finish(1, false))
}

fn check_max_len(params: &Parameters, max_len: usize) -> Result<()> {
    if max_len > params.config.max_output_len {
        return Err(Error::TooLong {
            branch: "generation",
            len: max_len,
            limit: params.config.max_output_len,
        });
    }
    Ok(())
}

pub fn beam_search(
    params: &Parameters,
    qa_out: &EncoderOutput,
    ev_outs: &[EncoderOutput],
    z: &EvidenceWeights,
    beam_width: usize,
    max_len: usize,
) -> Result<Generation> {
    check_max_len(params, max_len)?;
    beam_search_model(&DecoderStep::new(params, qa_out, ev_outs, z)?, beam_width, max_len)
}

pub fn greedy_generate(
    params: &Parameters,
    qa_out: &EncoderOutput,
    ev_outs: &[EncoderOutput],
    z: &EvidenceWeights,
    max_len: usize,
) -> Result<Generation> {
    check_max_len(params, max_len)?;
    greedy_model(&DecoderStep::new(params, qa_out, ev_outs, z)?, max_len)
}
