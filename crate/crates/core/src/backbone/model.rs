use rand_chacha::ChaCha8Rng;

use super::nn::{
    add, fused_cross_attention, fused_cross_attention_backward, self_attention,
    self_attention_backward, FeedForwardCache, FusedCrossCache, KeyValue, NormCache,
    SelfAttnCache,
};
use super::params::{DecoderLayerParams, EncoderLayerParams, Parameters};
use super::EvidenceWeights;
use crate::corpus::{QaeInstance, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::linalg::add_assign;

/// Log-probabilities are floored here before use.
pub const MIN_PROB: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    QuestionAnswer,
    Evidence,
}

/// Every layer's output for one encoded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `layers[l]` is `len × d_model`.
    pub layers: Vec<Vec<f64>>,
    pub len: usize,
}

impl EncoderOutput {
    pub fn last(&self) -> &[f64] {
        self.layers.last().expect("at least one layer")
    }

    /// Mean over positions of the final layer.
    pub fn mean_pooled(&self, d: usize) -> Vec<f64> {
        let mut pooled = vec![0.0; d];
        for row in self.last().chunks_exact(d) {
            add_assign(&mut pooled, row);
        }
        if self.len > 0 {
            pooled.iter_mut().for_each(|v| *v /= self.len as f64);
        }
        pooled
    }
}

struct EncoderLayerCache {
    attn: SelfAttnCache,
    norm1: NormCache,
    ff: FeedForwardCache,
    norm2: NormCache,
}

struct EncoderCache {
    ids: Vec<u32>,
    layers: Vec<EncoderLayerCache>,
}

fn check_ids(params: &Parameters, ids: &[u32]) -> Result<()> {
    let vocab = params.config.vocab_size;
    match ids.iter().find(|&&id| id as usize >= vocab) {
        Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

fn embed(params: &Parameters, ids: &[u32], positions: usize) -> Vec<f64> {
    let d = params.config.d_model;
    let p = params.as_slice();
    let tok = params.layout.token_embedding;
    let mut x = Vec::with_capacity(ids.len() * d);
    for (i, &id) in ids.iter().enumerate() {
        let t = &p[tok + id as usize * d..tok + (id as usize + 1) * d];
        let pos = &p[positions + i * d..positions + (i + 1) * d];
        x.extend(t.iter().zip(pos).map(|(a, b)| a + b));
    }
    x
}

fn embed_backward(params: &Parameters, grad: &mut [f64], ids: &[u32], positions: usize, dx: &[f64]) {
    let d = params.config.d_model;
    let tok = params.layout.token_embedding;
    for (i, &id) in ids.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        add_assign(&mut grad[tok + id as usize * d..tok + (id as usize + 1) * d], row);
        add_assign(&mut grad[positions + i * d..positions + (i + 1) * d], row);
    }
}

fn encoder_stack(params: &Parameters, branch: Branch) -> (&[EncoderLayerParams], usize, usize, &'static str) {
    let c = &params.config;
    match branch {
        Branch::QuestionAnswer => (
            &params.layout.qa_encoder,
            params.layout.qa_positions,
            c.max_input_len,
            "question-answer",
        ),
        Branch::Evidence => (
            &params.layout.evidence_encoder,
            params.layout.evidence_positions,
            c.max_evidence_len,
            "evidence",
        ),
    }
}

fn encode_impl(
    params: &Parameters,
    ids: &[u32],
    branch: Branch,
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
    keep_cache: bool,
) -> Result<(EncoderOutput, Option<EncoderCache>)> {
    let (stack, positions, limit, name) = encoder_stack(params, branch);
    if ids.len() > limit {
        return Err(Error::TooLong {
            branch: name,
            len: ids.len(),
            limit,
        });
    }
    check_ids(params, ids)?;
    let p = params.as_slice();
    let n = ids.len();
    let heads = params.config.num_heads;
    let mut x = embed(params, ids, positions);
    let mut layers = Vec::with_capacity(stack.len());
    let mut caches = Vec::new();
    for layer in stack {
        let (sa, attn) = self_attention(&layer.attn, p, &x, n, heads, false, dropout, rng.as_deref_mut());
        let (h, norm1) = layer.norm1.forward(p, &add(&x, &sa), n);
        let (f, ff) = layer.ff.forward(p, &h, n, dropout, rng.as_deref_mut());
        let (y, norm2) = layer.norm2.forward(p, &add(&h, &f), n);
        if keep_cache {
            caches.push(EncoderLayerCache {
                attn,
                norm1,
                ff,
                norm2,
            });
        }
        layers.push(y.clone());
        x = y;
    }
    let cache = keep_cache.then(|| EncoderCache {
        ids: ids.to_vec(),
        layers: caches,
    });
    Ok((EncoderOutput { layers, len: n }, cache))
}

/// Run one encoder branch and keep every layer's output.
pub fn encode(params: &Parameters, ids: &[u32], branch: Branch) -> Result<EncoderOutput> {
    Ok(encode_impl(params, ids, branch, 0.0, None, false)?.0)
}

/// `d_layers[l]` is the loss gradient with respect to layer `l`'s output.
fn encode_backward(
    params: &Parameters,
    grad: &mut [f64],
    branch: Branch,
    cache: &EncoderCache,
    mut d_layers: Vec<Vec<f64>>,
) {
    let (stack, positions, _, _) = encoder_stack(params, branch);
    let p = params.as_slice();
    let n = cache.ids.len();
    let heads = params.config.num_heads;
    let mut dy = d_layers.pop().expect("one gradient per layer");
    for (l, layer) in stack.iter().enumerate().rev() {
        let c = &cache.layers[l];
        let d_sum2 = layer.norm2.backward(p, grad, &c.norm2, &dy, n);
        let mut dh = layer.ff.backward(p, grad, &c.ff, &d_sum2, n);
        add_assign(&mut dh, &d_sum2);
        let d_sum1 = layer.norm1.backward(p, grad, &c.norm1, &dh, n);
        let mut dx = self_attention_backward(&layer.attn, p, grad, &c.attn, &d_sum1, n, heads);
        add_assign(&mut dx, &d_sum1);
        if l > 0 {
            add_assign(&mut dx, &d_layers[l - 1]);
        }
        dy = dx;
    }
    embed_backward(params, grad, &cache.ids, positions, &dy);
}

/// Decoder-side keys and values of the encoder outputs, projected once per
/// decoder layer.
#[derive(Debug, Clone)]
pub struct DecoderMemory {
    /// `qa[l]`
    pub qa: Vec<KeyValue>,
    /// `evidence[j][l]`; empty for paragraphs that were not projected.
    pub evidence: Vec<Vec<KeyValue>>,
}

impl DecoderMemory {
    pub fn new(params: &Parameters, qa: &EncoderOutput, evidence: &[EncoderOutput]) -> Self {
        Self::with_active(params, qa, evidence, &vec![true; evidence.len()])
    }

    /// Project only the paragraphs flagged active.
    pub fn with_active(
        params: &Parameters,
        qa: &EncoderOutput,
        evidence: &[EncoderOutput],
        active: &[bool],
    ) -> Self {
        let p = params.as_slice();
        let layers = &params.layout.decoder;
        DecoderMemory {
            qa: layers
                .iter()
                .zip(&qa.layers)
                .map(|(dl, x)| dl.qa_attn.project_kv(p, x, qa.len))
                .collect(),
            evidence: evidence
                .iter()
                .zip(active)
                .map(|(e, &on)| {
                    if !on {
                        return Vec::new();
                    }
                    layers
                        .iter()
                        .zip(&e.layers)
                        .map(|(dl, x)| dl.evidence_attn.project_kv(p, x, e.len))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn num_evidence(&self) -> usize {
        self.evidence.len()
    }
}

struct DecoderLayerCache {
    self_attn: SelfAttnCache,
    norm1: NormCache,
    qa_attn: FusedCrossCache,
    norm2: NormCache,
    evidence_attn: FusedCrossCache,
    norm3: NormCache,
    ff: FeedForwardCache,
    norm4: NormCache,
}

struct DecoderRun {
    /// Output of every decoder layer.
    hidden: Vec<Vec<f64>>,
    caches: Vec<DecoderLayerCache>,
}

fn check_memory(memory: &DecoderMemory, z: &[f64]) -> Result<()> {
    if memory.evidence.len() != z.len() {
        return Err(Error::Dimension(format!(
            "{} evidence paragraphs but {} weights",
            memory.evidence.len(),
            z.len()
        )));
    }
    for (j, (mem, &w)) in memory.evidence.iter().zip(z).enumerate() {
        if w != 0.0 && mem.is_empty() {
            return Err(Error::Dimension(format!("paragraph {j} has weight {w} but was not projected")));
        }
    }
    Ok(())
}

fn decoder_forward(
    params: &Parameters,
    memory: &DecoderMemory,
    z: &[f64],
    input: &[u32],
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<DecoderRun> {
    check_memory(memory, z)?;
    let limit = params.config.decoder_positions();
    if input.len() > limit {
        return Err(Error::TooLong {
            branch: "decoder",
            len: input.len(),
            limit,
        });
    }
    check_ids(params, input)?;
    let p = params.as_slice();
    let n = input.len();
    let heads = params.config.num_heads;
    let mut x = embed(params, input, params.layout.decoder_positions);
    let mut hidden = Vec::new();
    let mut caches = Vec::new();
    for (l, dl) in params.layout.decoder.iter().enumerate() {
        let (cache, y) = decoder_layer(dl, p, &x, n, heads, memory, l, z, dropout, rng.as_deref_mut());
        caches.push(cache);
        hidden.push(y.clone());
        x = y;
    }
    Ok(DecoderRun { hidden, caches })
}

#[allow(clippy::too_many_arguments)]
fn decoder_layer(
    dl: &DecoderLayerParams,
    p: &[f64],
    x: &[f64],
    n: usize,
    heads: usize,
    memory: &DecoderMemory,
    l: usize,
    z: &[f64],
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (DecoderLayerCache, Vec<f64>) {
    let (sa, self_attn) = self_attention(&dl.self_attn, p, x, n, heads, true, dropout, rng.as_deref_mut());
    let (h1, norm1) = dl.norm1.forward(p, &add(x, &sa), n);
    let (ca, qa_attn) = fused_cross_attention(
        &dl.qa_attn,
        p,
        &h1,
        n,
        &[&memory.qa[l]],
        &[1.0],
        heads,
        dropout,
        rng.as_deref_mut(),
    );
    let (h2, norm2) = dl.norm2.forward(p, &add(&h1, &ca), n);
    let ev_mems: Vec<&KeyValue> = memory
        .evidence
        .iter()
        .map(|layers| layers.get(l).unwrap_or(&EMPTY_KV))
        .collect();
    let (ea, evidence_attn) = fused_cross_attention(
        &dl.evidence_attn,
        p,
        &h2,
        n,
        &ev_mems,
        z,
        heads,
        dropout,
        rng.as_deref_mut(),
    );
    let (h3, norm3) = dl.norm3.forward(p, &add(&h2, &ea), n);
    let (f, ff) = dl.ff.forward(p, &h3, n, dropout, rng.as_deref_mut());
    let (y, norm4) = dl.norm4.forward(p, &add(&h3, &f), n);
    (
        DecoderLayerCache {
            self_attn,
            norm1,
            qa_attn,
            norm2,
            evidence_attn,
            norm3,
            ff,
            norm4,
        },
        y,
    )
}

static EMPTY_KV: KeyValue = KeyValue {
    k: Vec::new(),
    v: Vec::new(),
    len: 0,
};

/// Gradients with respect to the decoder memory.
struct MemoryGrad {
    /// `qa[l] = (dk, dv)`
    qa: Vec<(Vec<f64>, Vec<f64>)>,
    /// `evidence[j][l]`, `None` for skipped paragraphs.
    evidence: Vec<Vec<Option<(Vec<f64>, Vec<f64>)>>>,
}

fn decoder_backward(
    params: &Parameters,
    grad: &mut [f64],
    memory: &DecoderMemory,
    run: &DecoderRun,
    input: &[u32],
    d_top: Vec<f64>,
) -> MemoryGrad {
    let p = params.as_slice();
    let n = input.len();
    let heads = params.config.num_heads;
    let layers = &params.layout.decoder;
    let mut mg = MemoryGrad {
        qa: vec![(Vec::new(), Vec::new()); layers.len()],
        evidence: vec![vec![None; layers.len()]; memory.evidence.len()],
    };
    let mut dy = d_top;
    for (l, dl) in layers.iter().enumerate().rev() {
        let c = &run.caches[l];
        let d4 = dl.norm4.backward(p, grad, &c.norm4, &dy, n);
        let mut dh3 = dl.ff.backward(p, grad, &c.ff, &d4, n);
        add_assign(&mut dh3, &d4);

        let d3 = dl.norm3.backward(p, grad, &c.norm3, &dh3, n);
        let ev_mems: Vec<&KeyValue> = memory
            .evidence
            .iter()
            .map(|layers| layers.get(l).unwrap_or(&EMPTY_KV))
            .collect();
        let (mut dh2, dev) =
            fused_cross_attention_backward(&dl.evidence_attn, p, grad, &c.evidence_attn, &ev_mems, &d3, n, heads);
        add_assign(&mut dh2, &d3);
        for (j, g) in dev.into_iter().enumerate() {
            mg.evidence[j][l] = g;
        }

        let d2 = dl.norm2.backward(p, grad, &c.norm2, &dh2, n);
        let (mut dh1, mut dqa) =
            fused_cross_attention_backward(&dl.qa_attn, p, grad, &c.qa_attn, &[&memory.qa[l]], &d2, n, heads);
        add_assign(&mut dh1, &d2);
        mg.qa[l] = dqa.pop().flatten().expect("qa memory always active");

        let d1 = dl.norm1.backward(p, grad, &c.norm1, &dh1, n);
        let mut dx = self_attention_backward(&dl.self_attn, p, grad, &c.self_attn, &d1, n, heads);
        add_assign(&mut dx, &d1);
        dy = dx;
    }
    embed_backward(params, grad, input, params.layout.decoder_positions, &dy);
    mg
}

fn output_logits(params: &Parameters, hidden: &[f64], rows: usize) -> Vec<f64> {
    params.layout.output.forward(params.as_slice(), hidden, rows)
}

fn softmax_rows(logits: &mut [f64], v: usize) {
    for row in logits.chunks_exact_mut(v) {
        crate::linalg::softmax_in_place(row);
    }
}

/// Next-token distributions from teacher forcing, plus the probability
/// given to each reference token.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    /// `positions × vocab_size`, one distribution per row.
    pub distributions: Vec<f64>,
    /// Probability of the reference token at each position.
    pub target_probs: Vec<f64>,
    /// Output of every decoder layer.
    pub hidden: Vec<Vec<f64>>,
    pub vocab_size: usize,
}

impl DecoderOutput {
    pub fn positions(&self) -> usize {
        self.target_probs.len()
    }

    pub fn distribution(&self, m: usize) -> &[f64] {
        &self.distributions[m * self.vocab_size..(m + 1) * self.vocab_size]
    }
}

/// Decoder input for a reference sequence: BOS followed by all but the last
/// reference token.
fn shifted_input(reference: &[u32]) -> Vec<u32> {
    let mut input = Vec::with_capacity(reference.len());
    input.push(BOS);
    input.extend_from_slice(&reference[..reference.len().saturating_sub(1)]);
    input
}

/// Teacher-force the decoder on `reference` (which should already end with
/// EOS when the sequence is complete).
pub fn score_reference(
    params: &Parameters,
    memory: &DecoderMemory,
    z: &EvidenceWeights,
    reference: &[u32],
) -> Result<DecoderOutput> {
    if reference.is_empty() {
        return Err(Error::Dimension("empty reference sequence".into()));
    }
    let input = shifted_input(reference);
    let run = decoder_forward(params, memory, z.as_slice(), &input, 0.0, None)?;
    let v = params.config.vocab_size;
    let n = input.len();
    let mut dist = output_logits(params, run.hidden.last().unwrap(), n);
    softmax_rows(&mut dist, v);
    let target_probs = reference
        .iter()
        .enumerate()
        .map(|(m, &t)| dist[m * v + t as usize])
        .collect();
    Ok(DecoderOutput {
        distributions: dist,
        target_probs,
        hidden: run.hidden,
        vocab_size: v,
    })
}

/// Next-token distribution after `prefix` (which starts with BOS).
pub fn next_distribution(
    params: &Parameters,
    memory: &DecoderMemory,
    z: &EvidenceWeights,
    prefix: &[u32],
) -> Result<Vec<f64>> {
    let run = decoder_forward(params, memory, z.as_slice(), prefix, 0.0, None)?;
    let d = params.config.d_model;
    let last = run.hidden.last().unwrap();
    let mut logits = output_logits(params, &last[last.len() - d..], 1);
    crate::linalg::softmax_in_place(&mut logits);
    Ok(logits)
}

/// Teacher-forced decoding of `target` (explanation ids without BOS/EOS);
/// the scored reference is `target` followed by EOS.
pub fn decode_teacher_forced(
    params: &Parameters,
    qa_out: &EncoderOutput,
    ev_outs: &[EncoderOutput],
    z: &EvidenceWeights,
    target: &[u32],
) -> Result<DecoderOutput> {
    if ev_outs.len() != z.len() {
        return Err(Error::Dimension(format!(
            "{} evidence encodings but {} weights",
            ev_outs.len(),
            z.len()
        )));
    }
    if target.len() > params.config.max_output_len {
        return Err(Error::TooLong {
            branch: "explanation",
            len: target.len(),
            limit: params.config.max_output_len,
        });
    }
    let active: Vec<bool> = z.as_slice().iter().map(|&w| w != 0.0).collect();
    let memory = DecoderMemory::with_active(params, qa_out, ev_outs, &active);
    let mut reference = target.to_vec();
    reference.push(EOS);
    score_reference(params, &memory, z, &reference)
}

/// Token ids of one training or inference instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub qa: Vec<u32>,
    pub evidence: Vec<Vec<u32>>,
    /// Explanation ids without BOS/EOS.
    pub target: Vec<u32>,
}

impl TrainExample {
    pub fn from_instance(inst: &QaeInstance, vocab: &Vocabulary) -> Self {
        TrainExample {
            qa: vocab.encode(&inst.qa_tokens()),
            evidence: inst.evidence.iter().map(|p| vocab.encode(p)).collect(),
            target: vocab.encode(&inst.explanation),
        }
    }

    /// Target followed by EOS.
    pub fn reference(&self) -> Vec<u32> {
        let mut r = self.target.clone();
        r.push(EOS);
        r
    }
}

pub struct LossOptions<'a> {
    pub label_smoothing: f64,
    /// Dropout is applied only when a generator is supplied.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl Default for LossOptions<'_> {
    fn default() -> Self {
        LossOptions {
            label_smoothing: 0.0,
            dropout_rng: None,
        }
    }
}

/// Forward and backward for one example. Adds `scale ×` the gradient of the
/// summed token loss into `grad` and returns the summed token loss.
fn example_loss_grad(
    params: &Parameters,
    ex: &TrainExample,
    z: &EvidenceWeights,
    label_smoothing: f64,
    mut rng: Option<&mut ChaCha8Rng>,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if ex.evidence.len() != z.len() {
        return Err(Error::Dimension(format!(
            "{} paragraphs but {} weights",
            ex.evidence.len(),
            z.len()
        )));
    }
    if ex.target.len() > params.config.max_output_len {
        return Err(Error::TooLong {
            branch: "explanation",
            len: ex.target.len(),
            limit: params.config.max_output_len,
        });
    }
    let cfg = &params.config;
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let dropout = if rng.is_some() { cfg.dropout } else { 0.0 };
    let p = params.as_slice();

    let (qa_out, qa_cache) = encode_impl(params, &ex.qa, Branch::QuestionAnswer, dropout, rng.as_deref_mut(), true)?;
    let mut ev_outs = Vec::with_capacity(ex.evidence.len());
    let mut ev_caches = Vec::with_capacity(ex.evidence.len());
    for (ids, &w) in ex.evidence.iter().zip(z.as_slice()) {
        if w == 0.0 {
            ev_outs.push(EncoderOutput { layers: vec![Vec::new(); cfg.num_layers], len: 0 });
            ev_caches.push(None);
            continue;
        }
        let (out, cache) = encode_impl(params, ids, Branch::Evidence, dropout, rng.as_deref_mut(), true)?;
        ev_outs.push(out);
        ev_caches.push(cache);
    }
    let active: Vec<bool> = z.as_slice().iter().map(|&w| w != 0.0).collect();
    let memory = DecoderMemory::with_active(params, &qa_out, &ev_outs, &active);

    let reference = ex.reference();
    let input = shifted_input(&reference);
    let n = input.len();
    let run = decoder_forward(params, &memory, z.as_slice(), &input, dropout, rng.as_deref_mut())?;
    let top = run.hidden.last().unwrap();
    let logits = output_logits(params, top, n);

    let floor = MIN_PROB.ln();
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; n * v];
    for (m, &y) in reference.iter().enumerate() {
        let row = &logits[m * v..(m + 1) * v];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let dl = &mut dlogits[m * v..(m + 1) * v];
        // weights on each log-probability term of this position's loss
        let smooth = label_smoothing / v as f64;
        let mut total_weight = 0.0;
        for (t, &logit) in row.iter().enumerate() {
            let w = smooth + if t == y as usize { 1.0 - label_smoothing } else { 0.0 };
            if w == 0.0 {
                continue;
            }
            let lp = logit - lse;
            if lp < floor {
                loss -= w * floor;
                continue;
            }
            loss -= w * lp;
            dl[t] -= w;
            total_weight += w;
        }
        for (t, &logit) in row.iter().enumerate() {
            dl[t] = scale * (dl[t] + total_weight * (logit - lse).exp());
        }
    }

    let mut d_top = vec![0.0; n * d];
    params.layout.output.backward(p, grad, top, &dlogits, n, Some(&mut d_top));
    let mg = decoder_backward(params, grad, &memory, &run, &input, d_top);

    let layers = &params.layout.decoder;
    let mut d_qa: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for (l, dl) in layers.iter().enumerate() {
        let mut dmem = vec![0.0; qa_out.len * d];
        let (dk, dv) = &mg.qa[l];
        dl.qa_attn.project_kv_backward(p, grad, &qa_out.layers[l], qa_out.len, dk, dv, &mut dmem);
        d_qa.push(dmem);
    }
    encode_backward(params, grad, Branch::QuestionAnswer, qa_cache.as_ref().unwrap(), d_qa);

    for (j, cache) in ev_caches.iter().enumerate() {
        let Some(cache) = cache else { continue };
        let out = &ev_outs[j];
        let mut d_ev = Vec::with_capacity(layers.len());
        for (l, dl) in layers.iter().enumerate() {
            let mut dmem = vec![0.0; out.len * d];
            if let Some((dk, dv)) = &mg.evidence[j][l] {
                dl.evidence_attn.project_kv_backward(p, grad, &out.layers[l], out.len, dk, dv, &mut dmem);
            }
            d_ev.push(dmem);
        }
        encode_backward(params, grad, Branch::Evidence, cache, d_ev);
    }
    Ok(loss)
}

/// Mean per-token cross-entropy of a batch and its gradient. Evidence
/// weights are constants here: they receive no gradient.
pub fn batch_loss_and_gradients(
    params: &Parameters,
    batch: &[(&TrainExample, &EvidenceWeights)],
    mut options: LossOptions<'_>,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let tokens: usize = batch.iter().map(|(ex, _)| ex.target.len() + 1).sum();
    let scale = 1.0 / tokens as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (ex, z) in batch {
        loss += example_loss_grad(
            params,
            ex,
            z,
            options.label_smoothing,
            options.dropout_rng.as_deref_mut(),
            scale,
            &mut grad,
        )?;
    }
    Ok((loss * scale, grad))
}

/// Deterministic (dropout-free) loss and gradient.
pub fn loss_and_gradients(
    params: &Parameters,
    batch: &[(&TrainExample, &EvidenceWeights)],
    label_smoothing: f64,
) -> Result<(f64, Vec<f64>)> {
    batch_loss_and_gradients(
        params,
        batch,
        LossOptions {
            label_smoothing,
            dropout_rng: None,
        },
    )
}

/// Encoded inputs of one instance, reusable across decoder calls while the
/// parameters are unchanged.
pub struct EncodedInstance {
    pub qa: EncoderOutput,
    pub evidence: Vec<EncoderOutput>,
}

impl EncodedInstance {
    pub fn new(params: &Parameters, ex: &TrainExample) -> Result<Self> {
        Ok(EncodedInstance {
            qa: encode(params, &ex.qa, Branch::QuestionAnswer)?,
            evidence: ex
                .evidence
                .iter()
                .map(|ids| encode(params, ids, Branch::Evidence))
                .collect::<Result<_>>()?,
        })
    }
}
