//! Attention cost of separated per-paragraph encoding against one encoding
//! of the concatenated evidence, counted analytically and timed.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    decode_teacher_forced, encode, Branch, DecoderMemory, EvidenceWeights, ModelConfig, Parameters,
};
use crate::backbone::score_reference;
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Separated,
    Concatenated,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Separated => "separated",
            Mode::Concatenated => "concatenated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostInputs {
    /// Paragraphs.
    pub m: u64,
    /// Tokens per paragraph.
    pub n: u64,
    pub lx: u64,
    pub ld: u64,
    pub layers: u64,
    /// EM iterations.
    pub iterations: u64,
    /// Decoder passes per EM iteration; `None` means one teacher-forced pass
    /// per paragraph plus one generation.
    pub passes_per_iteration: Option<u64>,
}

impl CostInputs {
    pub fn passes(&self) -> u64 {
        self.passes_per_iteration.unwrap_or(self.m + 1)
    }
}

/// Attention multiply-accumulate counts (scores and value weighting share
/// one factor, so they are counted once per query-key pair).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub inputs: CostInputs,
    pub mode: Mode,
    pub encoder: u64,
    pub decoder: u64,
}

impl CostBreakdown {
    pub fn total(&self) -> u64 {
        self.encoder + self.decoder
    }
}

pub fn count_attention_ops(inputs: CostInputs, mode: Mode) -> Result<CostBreakdown> {
    let CostInputs { m, n, lx, ld, layers, iterations, .. } = inputs;
    if [m, n, lx, ld, layers, iterations, inputs.passes()].contains(&0) {
        return Err(Error::Config("every cost-model size must be at least 1".into()));
    }
    let (encoder, decoder) = match mode {
        Mode::Concatenated => {
            let total = lx + m * n;
            (total * total * layers, ld * total * layers)
        }
        Mode::Separated => (
            (lx * lx + m * n * n) * layers,
            (ld * lx + m * ld * n) * layers * iterations * inputs.passes(),
        ),
    };
    Ok(CostBreakdown {
        inputs,
        mode,
        encoder,
        decoder,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: Mode,
    pub m: u64,
    pub n: u64,
    pub analytic_ops: u64,
    pub median_ms: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Benchmark settings shared by every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub lx: usize,
    pub ld: usize,
    pub iterations: usize,
    pub passes_per_iteration: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            d_model: 64,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 256,
            vocab_size: 200,
            lx: 8,
            ld: 16,
            iterations: 1,
            passes_per_iteration: Some(1),
            seed: 7,
        }
    }
}

fn random_ids(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(4..vocab as u32)).collect()
}

/// Time one forward pass per mode at every `(m, n)` grid point, taking the
/// median of `repetitions` runs.
pub fn bench_wallclock(config: &BenchConfig, grid: &[(usize, usize)], repetitions: usize) -> Result<Vec<BenchRow>> {
    if repetitions == 0 {
        return Err(Error::Config("repetitions must be at least 1".into()));
    }
    let mut rows = Vec::new();
    let mut rng = seeds::stream(config.seed, "bench");
    for &(m, n) in grid {
        let model = ModelConfig {
            vocab_size: config.vocab_size,
            d_model: config.d_model,
            num_layers: config.num_layers,
            num_heads: config.num_heads,
            ff_dim: config.ff_dim,
            max_input_len: config.lx + m * n,
            max_evidence_len: n,
            max_output_len: config.ld,
            dropout: 0.0,
        };
        let params = Parameters::init(&model, config.seed)?;
        let qa = random_ids(&mut rng, config.lx, config.vocab_size);
        let paragraphs: Vec<Vec<u32>> = (0..m).map(|_| random_ids(&mut rng, n, config.vocab_size)).collect();
        let target = random_ids(&mut rng, config.ld, config.vocab_size);
        let inputs = CostInputs {
            m: m as u64,
            n: n as u64,
            lx: config.lx as u64,
            ld: config.ld as u64,
            layers: config.num_layers as u64,
            iterations: config.iterations as u64,
            passes_per_iteration: config.passes_per_iteration.map(|p| p as u64),
        };
        let passes = inputs.passes() as usize * config.iterations;
        for mode in [Mode::Concatenated, Mode::Separated] {
            let mut times = Vec::with_capacity(repetitions);
            for _ in 0..repetitions {
                let start = Instant::now();
                match mode {
                    Mode::Concatenated => {
                        let mut all = qa.clone();
                        paragraphs.iter().for_each(|p| all.extend_from_slice(p));
                        let enc = encode(&params, &all, Branch::QuestionAnswer)?;
                        decode_teacher_forced(&params, &enc, &[], &EvidenceWeights::uniform(0), &target)?;
                    }
                    Mode::Separated => {
                        let enc = encode(&params, &qa, Branch::QuestionAnswer)?;
                        let ev = paragraphs
                            .iter()
                            .map(|p| encode(&params, p, Branch::Evidence))
                            .collect::<Result<Vec<_>>>()?;
                        let memory = DecoderMemory::new(&params, &enc, &ev);
                        let z = EvidenceWeights::uniform(m);
                        let mut reference = target.clone();
                        reference.push(crate::corpus::EOS);
                        for _ in 0..passes {
                            score_reference(&params, &memory, &z, &reference)?;
                        }
                    }
                }
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            rows.push(BenchRow {
                mode,
                m: m as u64,
                n: n as u64,
                analytic_ops: count_attention_ops(inputs, mode)?.total(),
                median_ms: median(&mut times),
            });
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("mode,m,n,analytic_ops,median_ms\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{:.4}\n", r.mode.name(), r.m, r.n, r.analytic_ops, r.median_ms));
    }
    out
}

/// Concatenated over separated median time for each `m`, in grid order.
pub fn time_ratios(rows: &[BenchRow]) -> Vec<(u64, u64, f64)> {
    let mut out = Vec::new();
    for c in rows.iter().filter(|r| r.mode == Mode::Concatenated) {
        if let Some(s) = rows
            .iter()
            .find(|r| r.mode == Mode::Separated && r.m == c.m && r.n == c.n)
        {
            out.push((c.m, c.n, c.median_ms / s.median_ms));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(m: u64) -> CostInputs {
        CostInputs {
            m,
            n: 32,
            lx: 8,
            ld: 16,
            layers: 1,
            iterations: 1,
            passes_per_iteration: Some(1),
        }
    }

    #[test]
    fn encoder_counts_match_arithmetic() {
        let c = count_attention_ops(inputs(4), Mode::Concatenated).unwrap();
        let s = count_attention_ops(inputs(4), Mode::Separated).unwrap();
        assert_eq!(c.encoder, 18_496);
        assert_eq!(s.encoder, 4_160);
    }

    #[test]
    fn zero_size_is_rejected() {
        assert!(count_attention_ops(inputs(0), Mode::Separated).is_err());
    }
}
