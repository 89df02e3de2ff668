use emin::corpus::{generate_synthetic, tokenize, SynthConfig, SynthOutput};
use emin::backbone::EvidenceWeights;
use emin::em::{kl_divergence, temperature, weights_from_scores};
use emin::metrics::{rouge_l, rouge_n, sentence_bleu4};
use emin::retrieval::{EvidenceSelector, Stopwords};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

// Errors cross into JS as plain strings so the same functions run natively.
fn js_err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// A small synthetic corpus held in the page.
#[wasm_bindgen]
pub struct Demo {
    synth: SynthOutput,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, String> {
        let config = SynthConfig {
            num_entities: 12,
            train_size: 1,
            val_size: 1,
            test_size: 8,
            seed: seed as u64,
            ..SynthConfig::default()
        };
        Ok(Demo {
            synth: generate_synthetic(&config).map_err(js_err)?,
        })
    }

    /// Questions with their answers and reference explanations, as JSON.
    pub fn questions(&self) -> String {
        let items: Vec<Value> = self
            .synth
            .test
            .iter()
            .map(|i| {
                json!({
                    "question": i.question.join(" "),
                    "answer": i.answer.join(" "),
                    "explanation": i.explanation.join(" "),
                })
            })
            .collect();
        Value::Array(items).to_string()
    }

    pub fn paragraph_count(&self) -> usize {
        self.synth.documents.documents.iter().map(|d| d.paragraphs.len()).sum()
    }

    /// Top-k paragraphs for a query, as JSON.
    pub fn retrieve(&self, query: &str, k: usize) -> Result<String, String> {
        let selector = EvidenceSelector::new(&self.synth.documents, Stopwords::english());
        let ranked = selector.select(query, k).map_err(js_err)?;
        serde_json::to_string(&ranked).map_err(js_err)
    }
}

/// ROUGE-1/2/L and smoothed sentence BLEU-4 of one candidate, as JSON.
#[wasm_bindgen]
pub fn score(candidate: &str, reference: &str) -> String {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    json!({
        "rouge1": rouge_n(&c, &r, 1),
        "rouge2": rouge_n(&c, &r, 2),
        "rougeL": rouge_l(&c, &r),
        "bleu4": sentence_bleu4(&c, &r, true),
    })
    .to_string()
}

/// Evidence weights from per-paragraph cross-entropies at one iteration,
/// with the distance from uniform weights.
#[wasm_bindgen]
pub fn evidence_weights(cross_entropies: &str, iteration: usize) -> Result<String, String> {
    let ces: Vec<f64> = cross_entropies
        .split([',', ' '])
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(js_err)?;
    if ces.is_empty() || ces.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err("need non-negative cross-entropies".into());
    }
    let scores: Vec<f64> = ces.iter().map(|c| 1.0 / c.max(1e-6)).collect();
    let lambda = temperature(iteration);
    let z = weights_from_scores(&scores, lambda);
    let kl = kl_divergence(&z, &EvidenceWeights::uniform(ces.len())).map_err(js_err)?;
    Ok(json!({
        "lambda": lambda,
        "scores": scores,
        "z": z.as_slice(),
        "kl_from_uniform": kl,
    })
    .to_string())
}
