//! Deterministic planted-evidence corpus.
//!
//! A small knowledge base assigns every (entity, attribute) pair a value.
//! Each fact is stated by a few paragraph variants that differ only in
//! their detail tokens, and each entity gets one document holding all of
//! its statements. An instance asks for one fact; exactly one of its
//! evidence paragraphs (the planted one) states that fact and the rest are
//! about other entities. The explanation restates the fact and ends with
//! the planted statement's detail tokens, which appear nowhere in the
//! question or answer, so they can only be copied from the planted
//! paragraph. Because a fact has several variants, a question seen in
//! training does not pin down its details.
//!
//! Facts are partitioned between the splits, so validation and test
//! questions are never answerable from memorized training facts.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{tokenize, Document, DocumentCollection, QaeInstance};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_entities: usize,
    pub num_attributes: usize,
    pub values_per_attribute: usize,
    /// `k`: evidence paragraphs attached to each instance.
    pub paragraphs_per_instance: usize,
    pub filler_tokens_per_paragraph: usize,
    pub detail_tokens_per_fact: usize,
    /// Detail tokens available to each attribute.
    pub detail_pool: usize,
    /// Distinct statements of each fact, each with its own details.
    pub variants_per_fact: usize,
    pub distractors: DistractorPolicy,
    pub filler_pool: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_entities: 50,
            num_attributes: 5,
            values_per_attribute: 8,
            paragraphs_per_instance: 4,
            filler_tokens_per_paragraph: 0,
            detail_tokens_per_fact: 1,
            detail_pool: 24,
            variants_per_fact: 3,
            distractors: DistractorPolicy::SameValue,
            filler_pool: 100,
            train_size: 500,
            val_size: 100,
            test_size: 100,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.paragraphs_per_instance == 0 {
            return fail("paragraphs_per_instance must be at least 1");
        }
        if self.paragraphs_per_instance > self.num_entities {
            return fail("paragraphs_per_instance exceeds num_entities: not enough distinct distractors");
        }
        if self.num_attributes == 0 || self.values_per_attribute == 0 {
            return fail("num_attributes and values_per_attribute must be positive");
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return fail("split sizes must be positive");
        }
        if self.num_entities * self.num_attributes < 3 {
            return fail("need at least three facts to partition into splits");
        }
        if self.variants_per_fact == 0 {
            return fail("variants_per_fact must be at least 1");
        }
        if self.detail_tokens_per_fact > self.detail_pool {
            return fail("detail_tokens_per_fact exceeds detail_pool");
        }
        if self.filler_tokens_per_paragraph > 0 && self.filler_pool == 0 {
            return fail("filler_pool must be positive when filler is requested");
        }
        Ok(())
    }
}

/// How distractor paragraphs are chosen. Every distractor is about an
/// entity other than the question's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorPolicy {
    /// Any fact of another entity.
    Random,
    /// The question's attribute for another entity.
    SameAttribute,
    /// Like `SameAttribute`, preferring entities that share the answer
    /// value, which is what lexical retrieval on the answer tends to return.
    SameValue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthOutput {
    pub train: Vec<QaeInstance>,
    pub val: Vec<QaeInstance>,
    pub test: Vec<QaeInstance>,
    pub documents: DocumentCollection,
}

struct Statement {
    details: Vec<String>,
    paragraph: String,
}

struct Fact {
    entity: usize,
    attribute: usize,
    value: String,
    statements: Vec<Statement>,
}

fn entity(e: usize) -> String {
    format!("ent{e}")
}

fn attribute(a: usize) -> String {
    format!("attr{a}")
}

fn pick_distractors<'a>(rng: &mut impl Rng, config: &SynthConfig, facts: &'a [Fact], fact: &Fact) -> Vec<&'a Fact> {
    let (n_ent, n_attr) = (config.num_entities, config.num_attributes);
    let want = config.paragraphs_per_instance - 1;
    let mut entities: Vec<usize> = (0..n_ent).filter(|&e| e != fact.entity).collect();
    entities.shuffle(rng);
    if config.distractors == DistractorPolicy::SameValue {
        // move one value match (if any) to the front
        if let Some(i) = entities
            .iter()
            .position(|&e| facts[e * n_attr + fact.attribute].value == fact.value)
        {
            let e = entities.remove(i);
            entities.insert(0, e);
        }
    }
    entities
        .into_iter()
        .take(want)
        .map(|e| {
            let a = match config.distractors {
                DistractorPolicy::Random => rng.random_range(0..n_attr),
                _ => fact.attribute,
            };
            &facts[e * n_attr + a]
        })
        .collect()
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = seeds::stream(config.seed, "data");
    let (n_ent, n_attr) = (config.num_entities, config.num_attributes);

    let mut facts = Vec::with_capacity(n_ent * n_attr);
    for e in 0..n_ent {
        for a in 0..n_attr {
            let value = format!("a{a}v{}", rng.random_range(0..config.values_per_attribute));
            let statements = (0..config.variants_per_fact)
                .map(|_| {
                    let details: Vec<String> =
                        index::sample(&mut rng, config.detail_pool, config.detail_tokens_per_fact)
                            .into_iter()
                            .map(|d| format!("a{a}d{d}"))
                            .collect();
                    let mut filler: Vec<String> = (0..config.filler_tokens_per_paragraph)
                        .map(|_| format!("w{}", rng.random_range(0..config.filler_pool)))
                        .collect();
                    let after = filler.split_off(rng.random_range(0..=filler.len()));
                    let mut words = filler;
                    words.extend([entity(e), attribute(a), value.clone()]);
                    words.extend(details.iter().cloned());
                    words.extend(after);
                    Statement {
                        details,
                        paragraph: words.join(" "),
                    }
                })
                .collect();
            facts.push(Fact {
                entity: e,
                attribute: a,
                value,
                statements,
            });
        }
    }
    let fact_at = |e: usize, a: usize| &facts[e * n_attr + a];

    let documents = DocumentCollection::new(
        (0..n_ent)
            .map(|e| Document {
                id: entity(e),
                paragraphs: (0..n_attr)
                    .flat_map(|a| fact_at(e, a).statements.iter().map(|s| s.paragraph.clone()))
                    .collect(),
            })
            .collect(),
    );

    // partition facts across splits in proportion to split sizes
    let mut order: Vec<usize> = (0..facts.len()).collect();
    order.shuffle(&mut rng);
    let total = config.train_size + config.val_size + config.test_size;
    let n = facts.len();
    let n_train = ((n * config.train_size) / total).clamp(1, n - 2);
    let n_val = ((n * config.val_size) / total).clamp(1, n - n_train - 1);
    let pools = [
        &order[..n_train],
        &order[n_train..n_train + n_val],
        &order[n_train + n_val..],
    ];

    let k = config.paragraphs_per_instance;
    let mut splits: Vec<Vec<QaeInstance>> = Vec::new();
    for (name, size, pool) in [
        ("train", config.train_size, pools[0]),
        ("val", config.val_size, pools[1]),
        ("test", config.test_size, pools[2]),
    ] {
        let mut split = Vec::with_capacity(size);
        for i in 0..size {
            let fact = &facts[pool[i % pool.len()]];
            let statement = &fact.statements[rng.random_range(0..fact.statements.len())];
            let planted = rng.random_range(0..k);
            let others = pick_distractors(&mut rng, config, &facts, fact);
            let mut evidence = Vec::with_capacity(k);
            let mut others = others.into_iter();
            for slot in 0..k {
                if slot == planted {
                    evidence.push(tokenize(&statement.paragraph));
                } else {
                    let other = others.next().expect("k-1 distractors");
                    let v = rng.random_range(0..other.statements.len());
                    evidence.push(tokenize(&other.statements[v].paragraph));
                }
            }
            let (ent, attr) = (entity(fact.entity), attribute(fact.attribute));
            let mut explanation = format!(
                "the {attr} of {ent} is {v} because the evidence states {ent} {attr} {v}",
                v = fact.value
            );
            for d in &statement.details {
                explanation.push(' ');
                explanation.push_str(d);
            }
            split.push(QaeInstance {
                id: format!("{name}-{i:05}"),
                question: tokenize(&format!("what is the {attr} of {ent}")),
                answer: vec![fact.value.clone()],
                evidence,
                explanation: tokenize(&explanation),
                planted_index: Some(planted),
            });
        }
        splits.push(split);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(SynthOutput {
        train,
        val,
        test,
        documents,
    })
}
