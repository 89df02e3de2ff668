use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::nn::{AttnParams, FeedForward, Lin, Norm};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupKind {
    Embedding,
    Weight,
    Bias,
    Gain,
}

/// A named contiguous run of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub kind: GroupKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayerParams {
    pub attn: AttnParams,
    pub norm1: Norm,
    pub ff: FeedForward,
    pub norm2: Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderLayerParams {
    pub self_attn: AttnParams,
    pub norm1: Norm,
    pub qa_attn: AttnParams,
    pub norm2: Norm,
    pub evidence_attn: AttnParams,
    pub norm3: Norm,
    pub ff: FeedForward,
    pub norm4: Norm,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub token_embedding: usize,
    pub qa_positions: usize,
    pub evidence_positions: usize,
    pub decoder_positions: usize,
    pub qa_encoder: Vec<EncoderLayerParams>,
    pub evidence_encoder: Vec<EncoderLayerParams>,
    pub decoder: Vec<DecoderLayerParams>,
    pub output: Lin,
    pub groups: Vec<ParamGroup>,
    pub len: usize,
}

struct Alloc {
    next: usize,
    groups: Vec<ParamGroup>,
}

impl Alloc {
    fn take(&mut self, name: String, len: usize, kind: GroupKind) -> usize {
        let offset = self.next;
        self.groups.push(ParamGroup {
            name,
            offset,
            len,
            kind,
        });
        self.next += len;
        offset
    }

    fn lin(&mut self, name: &str, d_in: usize, d_out: usize) -> Lin {
        Lin {
            w: self.take(format!("{name}.weight"), d_in * d_out, GroupKind::Weight),
            b: self.take(format!("{name}.bias"), d_out, GroupKind::Bias),
            d_in,
            d_out,
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.take(format!("{name}.gain"), d, GroupKind::Gain),
            bias: self.take(format!("{name}.bias"), d, GroupKind::Bias),
            dim: d,
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnParams {
        AttnParams {
            q: self.lin(&format!("{name}.q"), d, d),
            k: self.lin(&format!("{name}.k"), d, d),
            v: self.lin(&format!("{name}.v"), d, d),
            o: self.lin(&format!("{name}.o"), d, d),
        }
    }

    fn ff(&mut self, name: &str, d: usize, ff: usize) -> FeedForward {
        FeedForward {
            up: self.lin(&format!("{name}.up"), d, ff),
            down: self.lin(&format!("{name}.down"), ff, d),
        }
    }

    fn encoder_layer(&mut self, name: &str, c: &ModelConfig) -> EncoderLayerParams {
        EncoderLayerParams {
            attn: self.attn(&format!("{name}.self_attn"), c.d_model),
            norm1: self.norm(&format!("{name}.norm1"), c.d_model),
            ff: self.ff(&format!("{name}.ff"), c.d_model, c.ff_dim),
            norm2: self.norm(&format!("{name}.norm2"), c.d_model),
        }
    }
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let d = c.d_model;
        let mut a = Alloc {
            next: 0,
            groups: Vec::new(),
        };
        let token_embedding = a.take("token_embedding".into(), c.vocab_size * d, GroupKind::Embedding);
        let qa_positions = a.take("qa_positions".into(), c.max_input_len * d, GroupKind::Embedding);
        let evidence_positions =
            a.take("evidence_positions".into(), c.max_evidence_len * d, GroupKind::Embedding);
        let decoder_positions = a.take(
            "decoder_positions".into(),
            c.decoder_positions() * d,
            GroupKind::Embedding,
        );
        let qa_encoder = (0..c.num_layers)
            .map(|l| a.encoder_layer(&format!("qa_encoder.{l}"), c))
            .collect();
        let evidence_encoder = (0..c.num_layers)
            .map(|l| a.encoder_layer(&format!("evidence_encoder.{l}"), c))
            .collect();
        let decoder = (0..c.num_layers)
            .map(|l| {
                let name = format!("decoder.{l}");
                DecoderLayerParams {
                    self_attn: a.attn(&format!("{name}.self_attn"), d),
                    norm1: a.norm(&format!("{name}.norm1"), d),
                    qa_attn: a.attn(&format!("{name}.qa_attn"), d),
                    norm2: a.norm(&format!("{name}.norm2"), d),
                    evidence_attn: a.attn(&format!("{name}.evidence_attn"), d),
                    norm3: a.norm(&format!("{name}.norm3"), d),
                    ff: a.ff(&format!("{name}.ff"), d, c.ff_dim),
                    norm4: a.norm(&format!("{name}.norm4"), d),
                }
            })
            .collect();
        let output = a.lin("output", d, c.vocab_size);
        Layout {
            token_embedding,
            qa_positions,
            evidence_positions,
            decoder_positions,
            qa_encoder,
            evidence_encoder,
            decoder,
            output,
            len: a.next,
            groups: a.groups,
        }
    }
}

/// All learnable weights, stored as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub layout: Layout,
    values: Vec<f64>,
}

impl Parameters {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        Ok(Parameters {
            config: config.clone(),
            values: vec![0.0; layout.len],
            layout,
        })
    }

    /// Normal(0, 0.02) weights and embeddings, zero biases, unit gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = seeds::stream(seed, "init");
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        for group in &params.layout.groups {
            let slot = &mut params.values[group.offset..group.offset + group.len];
            match group.kind {
                GroupKind::Embedding | GroupKind::Weight => {
                    slot.iter_mut().for_each(|v| *v = normal.sample(&mut rng))
                }
                GroupKind::Bias => slot.fill(0.0),
                GroupKind::Gain => slot.fill(1.0),
            }
        }
        Ok(params)
    }

    pub fn from_flat(config: &ModelConfig, values: Vec<f64>) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        if values.len() != params.values.len() {
            return Err(Error::Dimension(format!(
                "flat vector has {} entries, layout needs {}",
                values.len(),
                params.values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        params.values = values;
        Ok(params)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.layout.groups.iter().find(|g| g.name == name)
    }
}
