//! Two-stage evidence selection: a lexical document scorer narrows the
//! collection, then every paragraph of the surviving documents is ranked by
//! DICE overlap with the answer query.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::corpus::DocumentCollection;
use crate::error::{Error, Result};

const ENGLISH_STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just",
    "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    pub fn english() -> Self {
        Stopwords(ENGLISH_STOPWORDS.iter().map(|s| s.to_string()).collect())
    }

    pub fn none() -> Self {
        Stopwords(HashSet::new())
    }

    pub fn from_words<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        Stopwords(words.into_iter().map(|w| w.as_ref().to_lowercase()).collect())
    }

    /// One token per line; blank lines ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(Self::from_words(
            text.lines().map(str::trim).filter(|l| !l.is_empty()),
        ))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }
}

impl Default for Stopwords {
    fn default() -> Self {
        Self::english()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessedText {
    pub original: String,
    pub tokens: Vec<String>,
    pub token_set: BTreeSet<String>,
}

/// Split into alphanumeric words, lowercase, and drop stopwords.
pub fn preprocess(text: &str, stopwords: &Stopwords) -> ProcessedText {
    let tokens: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !stopwords.contains(w))
        .collect();
    let token_set = tokens.iter().cloned().collect();
    ProcessedText {
        original: text.to_string(),
        tokens,
        token_set,
    }
}

/// `2|A∩B| / (|A|+|B|)` over token sets; 0 when both are empty.
pub fn dice_similarity(a: &ProcessedText, b: &ProcessedText) -> f64 {
    let total = a.token_set.len() + b.token_set.len();
    if total == 0 {
        return 0.0;
    }
    let shared = a.token_set.intersection(&b.token_set).count();
    2.0 * shared as f64 / total as f64
}

/// Scores every document of a collection against a query.
pub trait DocumentScorer {
    /// One score per document, in collection order.
    fn score(&self, query: &ProcessedText) -> Vec<f64>;
}

/// Cosine similarity between tf-idf vectors, `idf(t) = ln(N / df(t))`.
#[derive(Debug, Clone)]
pub struct TfIdfIndex {
    idf: HashMap<String, f64>,
    doc_vectors: Vec<HashMap<String, f64>>,
    doc_norms: Vec<f64>,
}

impl TfIdfIndex {
    pub fn build(collection: &DocumentCollection, stopwords: &Stopwords) -> Self {
        let n = collection.len() as f64;
        let tfs: Vec<HashMap<String, f64>> = collection
            .documents
            .iter()
            .map(|doc| {
                let mut tf = HashMap::new();
                for p in &doc.paragraphs {
                    for t in preprocess(p, stopwords).tokens {
                        *tf.entry(t).or_insert(0.0) += 1.0;
                    }
                }
                tf
            })
            .collect();
        let mut df: HashMap<String, f64> = HashMap::new();
        for tf in &tfs {
            for t in tf.keys() {
                *df.entry(t.clone()).or_insert(0.0) += 1.0;
            }
        }
        let idf: HashMap<String, f64> = df.into_iter().map(|(t, d)| (t, (n / d).ln())).collect();
        let doc_vectors: Vec<HashMap<String, f64>> = tfs
            .into_iter()
            .map(|tf| tf.into_iter().map(|(t, f)| { let w = f * idf[&t]; (t, w) }).collect())
            .collect();
        let doc_norms = doc_vectors
            .iter()
            .map(|v| v.values().map(|w| w * w).sum::<f64>().sqrt())
            .collect();
        TfIdfIndex {
            idf,
            doc_vectors,
            doc_norms,
        }
    }
}

impl DocumentScorer for TfIdfIndex {
    fn score(&self, query: &ProcessedText) -> Vec<f64> {
        let mut q: HashMap<&str, f64> = HashMap::new();
        for t in &query.tokens {
            *q.entry(t.as_str()).or_insert(0.0) += 1.0;
        }
        let q: Vec<(&str, f64)> = q
            .into_iter()
            .map(|(t, f)| (t, f * self.idf.get(t).copied().unwrap_or(0.0)))
            .collect();
        let q_norm = q.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        self.doc_vectors
            .iter()
            .zip(&self.doc_norms)
            .map(|(doc, &norm)| {
                if q_norm == 0.0 || norm == 0.0 {
                    return 0.0;
                }
                let dot: f64 = q.iter().map(|(t, w)| w * doc.get(*t).copied().unwrap_or(0.0)).sum();
                dot / (q_norm * norm)
            })
            .collect()
    }
}

/// Indices of the `top_d` best documents, ties broken by document id.
pub fn retrieve_documents(
    query: &ProcessedText,
    collection: &DocumentCollection,
    scorer: &dyn DocumentScorer,
    top_d: usize,
) -> Result<Vec<(usize, f64)>> {
    if collection.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if top_d == 0 {
        return Err(Error::Config("top_d must be at least 1".into()));
    }
    if query.tokens.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let scores = scorer.score(query);
    let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| collection.documents[a.0].id.cmp(&collection.documents[b.0].id))
    });
    ranked.truncate(top_d);
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedParagraph {
    pub doc_id: String,
    pub paragraph_index: usize,
    pub score: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedEvidence {
    pub paragraphs: Vec<RankedParagraph>,
    /// Fewer than `k` paragraphs were available.
    pub shortfall: bool,
}

/// Retrieval settings with the collection index built once.
pub struct EvidenceSelector<'a> {
    collection: &'a DocumentCollection,
    stopwords: Stopwords,
    scorer: Box<dyn DocumentScorer + 'a>,
    pub top_d: usize,
}

pub const DEFAULT_TOP_D: usize = 25;

impl<'a> EvidenceSelector<'a> {
    pub fn new(collection: &'a DocumentCollection, stopwords: Stopwords) -> Self {
        let scorer = Box::new(TfIdfIndex::build(collection, &stopwords));
        EvidenceSelector {
            collection,
            stopwords,
            scorer,
            top_d: DEFAULT_TOP_D,
        }
    }

    pub fn with_scorer(mut self, scorer: Box<dyn DocumentScorer + 'a>) -> Self {
        self.scorer = scorer;
        self
    }

    pub fn select(&self, answer_query: &str, k: usize) -> Result<RankedEvidence> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let query = preprocess(answer_query, &self.stopwords);
        let docs = retrieve_documents(&query, self.collection, self.scorer.as_ref(), self.top_d)?;
        let mut paragraphs = Vec::new();
        for (d, _) in docs {
            let doc = &self.collection.documents[d];
            for (i, p) in doc.paragraphs.iter().enumerate() {
                let score = dice_similarity(&query, &preprocess(p, &self.stopwords));
                paragraphs.push(RankedParagraph {
                    doc_id: doc.id.clone(),
                    paragraph_index: i,
                    score,
                    text: p.clone(),
                });
            }
        }
        paragraphs.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.doc_id.cmp(&b.doc_id))
                .then_with(|| a.paragraph_index.cmp(&b.paragraph_index))
        });
        let shortfall = paragraphs.len() < k;
        paragraphs.truncate(k);
        Ok(RankedEvidence {
            paragraphs,
            shortfall,
        })
    }
}

/// One-shot form of [`EvidenceSelector::select`].
pub fn select_evidence(
    answer_query: &str,
    collection: &DocumentCollection,
    k: usize,
    top_d: usize,
    stopwords: &Stopwords,
) -> Result<RankedEvidence> {
    let mut selector = EvidenceSelector::new(collection, stopwords.clone());
    selector.top_d = top_d;
    selector.select(answer_query, k)
}
