//! Text embeddings, cosine geometry and a term nearest-neighbour index.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::http::{self, InFlightLimit, RetryPolicy};
use crate::rng::fnv1a;
use crate::text::tokenize;

pub const DEFAULT_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|x| *x == 0.0)
    }

    fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.0.iter_mut().for_each(|x| *x /= n);
        }
        self
    }
}

/// Anything that can turn text into a fixed-size vector.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// `1 - cos(a, b)`. Defined as 1 when either vector is zero.
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

// ── offline fallback ────────────────────────────────────────────────────

/// Deterministic embeddings that need no model and no network.
///
/// Each token gets a vector of `dim` values drawn uniformly from `[-1, 1)` by
/// a ChaCha8 generator seeded with `fnv1a(token) ^ seed`. A text is the mean
/// of its token vectors, L2-normalized. Text without tokens maps to zero.
#[derive(Debug, Clone)]
pub struct HashEmbedding {
    dim: usize,
    seed: u64,
}

impl HashEmbedding {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    pub fn token_vector(&self, token: &str) -> EmbeddingVector {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.seed);
        EmbeddingVector((0..self.dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }
}

impl Default for HashEmbedding {
    fn default() -> Self {
        Self::new(DEFAULT_DIM, 0)
    }
}

impl EmbeddingProvider for HashEmbedding {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Ok(EmbeddingVector::zeros(self.dim));
        }
        let mut sum = vec![0.0; self.dim];
        for token in &tokens {
            for (s, v) in sum.iter_mut().zip(self.token_vector(token).0) {
                *s += v;
            }
        }
        let n = tokens.len() as f64;
        sum.iter_mut().for_each(|x| *x /= n);
        Ok(EmbeddingVector(sum).normalized())
    }
}

// ── remote service ──────────────────────────────────────────────────────

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for a sentence-embedding service exposing `POST /embed`.
pub struct HttpEmbedding {
    endpoint: String,
    dim: usize,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    limit: InFlightLimit,
}

impl HttpEmbedding {
    pub fn new(base_url: &str, dim: usize) -> Self {
        Self {
            endpoint: format!("{}/embed", base_url.trim_end_matches('/')),
            dim,
            client: http::client(Duration::from_secs(30)),
            retry: RetryPolicy::default(),
            limit: InFlightLimit::new(4),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, max: usize) -> Self {
        self.limit = InFlightLimit::new(max);
        self
    }
}

impl EmbeddingProvider for HttpEmbedding {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if tokenize(text).is_empty() {
            return Ok(EmbeddingVector::zeros(self.dim));
        }
        let mut out = self.embed_batch(&[text.to_string()])?;
        Ok(out.remove(0))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let _permit = self.limit.acquire();
        let resp: EmbedResponse = self
            .retry
            .run(|| http::post_json(&self.client, &self.endpoint, &EmbedRequest { texts }))?;
        if resp.vectors.len() != texts.len() {
            return Err(Error::Transport {
                attempts: 1,
                message: format!(
                    "embedding service returned {} vectors for {} texts",
                    resp.vectors.len(),
                    texts.len()
                ),
            });
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim || v.iter().any(|x| !x.is_finite()) {
                    Err(Error::validation(format!(
                        "embedding service returned a bad vector of length {}",
                        v.len()
                    )))
                } else {
                    Ok(EmbeddingVector(v))
                }
            })
            .collect()
    }
}

// ── vocabulary index ────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct IndexLine {
    term: String,
    vector: Vec<f64>,
}

/// Terms with aligned vectors, searched by brute-force cosine similarity.
#[derive(Debug, Clone, Default)]
pub struct VocabularyIndex {
    terms: Vec<String>,
    vectors: Vec<EmbeddingVector>,
    positions: HashMap<String, usize>,
}

impl VocabularyIndex {
    pub fn new(entries: Vec<(String, EmbeddingVector)>) -> Result<Self> {
        let mut index = Self::default();
        for (term, vector) in entries {
            if let Some(first) = index.vectors.first() {
                if first.dim() != vector.dim() {
                    return Err(Error::validation(format!(
                        "term {term:?} has dimension {} instead of {}",
                        vector.dim(),
                        first.dim()
                    )));
                }
            }
            if vector.0.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!("term {term:?} has a non-finite vector")));
            }
            if index.positions.insert(term.clone(), index.terms.len()).is_some() {
                return Err(Error::validation(format!("duplicate term {term:?}")));
            }
            index.terms.push(term);
            index.vectors.push(vector);
        }
        Ok(index)
    }

    /// Embeds every term with `provider`.
    pub fn from_provider(terms: &[String], provider: &dyn EmbeddingProvider) -> Result<Self> {
        let vectors = provider.embed_batch(terms)?;
        Self::new(terms.iter().cloned().zip(vectors).collect())
    }

    /// Builds term vectors by random indexing over document co-occurrence.
    ///
    /// Each document receives a sparse ternary signature (`nonzeros` entries
    /// of ±1 at random positions). A term's vector is the sum of the
    /// signatures of the documents containing it, weighted by
    /// `(1 + ln tf) * ln(N / df)`, then normalized. Terms that share documents
    /// end up close; terms present in every document get a zero weight.
    pub fn from_cooccurrence(
        documents: &[Vec<String>],
        dim: usize,
        nonzeros: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || nonzeros == 0 || nonzeros > dim {
            return Err(Error::validation("random indexing needs 0 < nonzeros <= dim"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let signatures: Vec<Vec<(usize, f64)>> = documents
            .iter()
            .map(|_| {
                rand::seq::index::sample(&mut rng, dim, nonzeros)
                    .into_iter()
                    .map(|pos| (pos, if rng.random::<bool>() { 1.0 } else { -1.0 }))
                    .collect()
            })
            .collect();

        let mut df: HashMap<&str, usize> = HashMap::new();
        let mut order: Vec<&str> = Vec::new();
        let mut per_doc: Vec<HashMap<&str, usize>> = Vec::with_capacity(documents.len());
        for doc in documents {
            let mut tf: HashMap<&str, usize> = HashMap::new();
            for t in doc {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for t in doc {
                if !df.contains_key(t.as_str()) {
                    order.push(t.as_str());
                    df.insert(t.as_str(), 0);
                }
            }
            for t in tf.keys() {
                *df.get_mut(t).expect("seen") += 1;
            }
            per_doc.push(tf);
        }
        let n = documents.len() as f64;
        let mut acc: HashMap<&str, Vec<f64>> = HashMap::new();
        for (tf, sig) in per_doc.iter().zip(&signatures) {
            for (term, count) in tf {
                let idf = (n / df[term] as f64).ln();
                let w = (1.0 + (*count as f64).ln()) * idf;
                if w == 0.0 {
                    continue;
                }
                let v = acc.entry(term).or_insert_with(|| vec![0.0; dim]);
                for (pos, sign) in sig {
                    v[*pos] += w * sign;
                }
            }
        }
        order.sort_unstable();
        let entries = order
            .into_iter()
            .map(|t| {
                let v = acc.remove(t).unwrap_or_else(|| vec![0.0; dim]);
                (t.to_string(), EmbeddingVector(v).normalized())
            })
            .collect();
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn vector(&self, term: &str) -> Option<&EmbeddingVector> {
        self.positions.get(term).map(|&i| &self.vectors[i])
    }

    /// Top-`k` neighbours of an indexed term by cosine similarity, excluding
    /// the term itself. Ties are broken by term. Unknown terms have no
    /// neighbours.
    pub fn nearest_terms(&self, term: &str, k: usize) -> Vec<(String, f64)> {
        match self.vector(term) {
            Some(v) => self.nearest_to_vector(v, k, Some(term)),
            None => Vec::new(),
        }
    }

    pub fn nearest_to_vector(
        &self,
        query: &EmbeddingVector,
        k: usize,
        exclude: Option<&str>,
    ) -> Vec<(String, f64)> {
        let mut scored: Vec<(String, f64)> = self
            .terms
            .iter()
            .zip(&self.vectors)
            .filter(|(t, _)| Some(t.as_str()) != exclude)
            .filter_map(|(t, v)| cosine_similarity(query, v).ok().map(|s| (t.clone(), s)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for (term, vector) in self.terms.iter().zip(&self.vectors) {
            let line = IndexLine {
                term: term.clone(),
                vector: vector.0.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: IndexLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                context: path.display().to_string(),
                line: n + 1,
                column: e.column(),
                message: e.to_string(),
            })?;
            entries.push((entry.term, EmbeddingVector(entry.vector)));
        }
        Self::new(entries)
    }
}
