//! The dual encoder-decoder: a question-answer encoder, an evidence encoder
//! applied to each paragraph separately, and a decoder whose layers
//! cross-attend to the question-answer features and to a weighted mixture
//! of per-paragraph evidence features.

pub mod checkpoint;
mod gradcheck;
mod model;
pub mod nn;
pub mod optim;
mod params;

pub use model::{
    batch_loss_and_gradients, decode_teacher_forced, encode, loss_and_gradients, next_distribution,
    score_reference, Branch, DecoderMemory, DecoderOutput, EncodedInstance, EncoderOutput,
    LossOptions, TrainExample, MIN_PROB,
};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport};
pub use params::{DecoderLayerParams, EncoderLayerParams, GroupKind, Layout, ParamGroup, Parameters};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    /// Longest question-answer input.
    pub max_input_len: usize,
    /// Longest evidence paragraph.
    pub max_evidence_len: usize,
    /// Longest explanation, not counting BOS/EOS.
    pub max_output_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 256,
            max_input_len: 64,
            max_evidence_len: 64,
            max_output_len: 128,
            dropout: 0.2,
        }
    }

    /// Size the position tables to the data: the longest observed length
    /// plus 8 tokens of headroom, rounded up to a multiple of 8.
    pub fn fit_lengths(&mut self, data: &[TrainExample]) {
        let fit = |n: usize| (n + 8).div_ceil(8) * 8;
        let longest = |f: &dyn Fn(&TrainExample) -> usize| data.iter().map(f).max().unwrap_or(0);
        self.max_input_len = fit(longest(&|ex| ex.qa.len()));
        self.max_evidence_len = fit(longest(&|ex| ex.evidence.iter().map(Vec::len).max().unwrap_or(0)));
        self.max_output_len = fit(longest(&|ex| ex.target.len()));
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 5 {
            return fail(format!("vocab_size {} leaves no room past the reserved ids", self.vocab_size));
        }
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.num_layers == 0 || self.ff_dim == 0 {
            return fail("num_layers and ff_dim must be positive".into());
        }
        if self.max_input_len == 0 || self.max_evidence_len == 0 {
            return fail("maximum lengths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Decoder positions: BOS plus every explanation token, or every
    /// explanation token plus EOS on the target side.
    pub fn decoder_positions(&self) -> usize {
        self.max_output_len + 1
    }
}

/// A point on the probability simplex over evidence paragraphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvidenceWeights(Vec<f64>);

impl EvidenceWeights {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("evidence weights must be finite and non-negative: {weights:?}")));
        }
        let sum: f64 = weights.iter().sum();
        if !weights.is_empty() && (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Config(format!("evidence weights sum to {sum}, not 1")));
        }
        Ok(EvidenceWeights(weights))
    }

    pub fn uniform(k: usize) -> Self {
        EvidenceWeights(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, j: usize) -> Self {
        let mut w = vec![0.0; k];
        w[j] = 1.0;
        EvidenceWeights(w)
    }

    /// Softmax of `scores / temperature`.
    pub fn softmax(scores: &[f64], temperature: f64) -> Self {
        let scaled: Vec<f64> = scores.iter().map(|c| c / temperature).collect();
        EvidenceWeights(crate::linalg::softmax(&scaled))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, &w) in self.0.iter().enumerate() {
            if w > self.0[best] {
                best = j;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }
}
