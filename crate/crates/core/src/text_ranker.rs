//! Text-based report ranking baseline: embed the query and every discharge
//! note, rank notes by cosine similarity.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::Cohort;
use crate::parallel::bounded_map;
use crate::text::{stable_hash, tokenize};

#[derive(Debug, Error)]
pub enum TextRankError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding provider `{provider}` failed: {message}")]
    ProviderFailure { provider: String, message: String },
    #[error("admission `{0}` has no note")]
    MissingNote(String),
    #[error("unknown admission `{0}`")]
    UnknownAdmission(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sparse vector with a cached Euclidean norm. Dense vectors store every
/// coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocVector {
    dim: usize,
    entries: Vec<(u32, f64)>,
    norm: f64,
}

impl DocVector {
    /// Entries are sorted by index; duplicate indices are summed, zeros dropped.
    pub fn sparse(dim: usize, mut entries: Vec<(u32, f64)>) -> Self {
        entries.sort_by_key(|e| e.0);
        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
        for (i, v) in entries {
            assert!((i as usize) < dim, "index {i} out of dimension {dim}");
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => merged.push((i, v)),
            }
        }
        merged.retain(|e| e.1 != 0.0);
        let norm = merged.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
        Self { dim, entries: merged, norm }
    }

    pub fn dense(values: &[f64]) -> Self {
        let entries = values.iter().enumerate().map(|(i, v)| (i as u32, *v)).collect();
        Self::sparse(values.len(), entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn dot(&self, other: &DocVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.entries.len() && j < other.entries.len() {
            let (a, b) = (self.entries[i], other.entries[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a.1 * b.1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

/// u·v / (‖u‖‖v‖), or 0 when either norm is 0.
pub fn cosine(u: &DocVector, v: &DocVector) -> Result<f64, TextRankError> {
    if u.dim != v.dim {
        return Err(TextRankError::DimensionMismatch(u.dim, v.dim));
    }
    if u.norm == 0.0 || v.norm == 0.0 {
        return Ok(0.0);
    }
    Ok((u.dot(v) / (u.norm * v.norm)).clamp(-1.0, 1.0))
}

/// Terms in sorted order with their document frequencies and idf weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    terms: Vec<String>,
    df: Vec<usize>,
    idf: Vec<f64>,
    doc_count: usize,
    lookup: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn df(&self, term: &str) -> Option<usize> {
        self.lookup.get(term).map(|&i| self.df[i as usize])
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.lookup.get(term).map(|&i| self.idf[i as usize])
    }

    /// Raw term counts times idf; out-of-vocabulary terms are ignored.
    pub fn vectorize(&self, text: &str) -> DocVector {
        let mut counts: HashMap<u32, f64> = HashMap::new();
        for token in tokenize(text) {
            if let Some(&i) = self.lookup.get(&token) {
                *counts.entry(i).or_default() += 1.0;
            }
        }
        let entries = counts.into_iter().map(|(i, tf)| (i, tf * self.idf[i as usize])).collect();
        DocVector::sparse(self.terms.len(), entries)
    }
}

/// Fits a vocabulary with idf = ln((1+N)/(1+df)) + 1 and vectorizes the corpus.
pub fn tfidf_vectorize(corpus: &[&str]) -> (Vocabulary, Vec<DocVector>) {
    let tokenized: Vec<Vec<String>> = corpus.iter().map(|d| tokenize(d)).collect();
    let mut df: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    for doc in &tokenized {
        let mut uniq: Vec<&str> = doc.iter().map(String::as_str).collect();
        uniq.sort_unstable();
        uniq.dedup();
        for t in uniq {
            *df.entry(t).or_default() += 1;
        }
    }
    let n = corpus.len() as f64;
    let terms: Vec<String> = df.keys().map(|t| t.to_string()).collect();
    let dfs: Vec<usize> = df.values().copied().collect();
    let idf = dfs.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
    let lookup = terms.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    let vocab = Vocabulary { terms, df: dfs, idf, doc_count: corpus.len(), lookup };
    let vectors = corpus.iter().map(|d| vocab.vectorize(d)).collect();
    (vocab, vectors)
}

/// Turns texts into equal-dimension vectors, in input order.
pub trait EmbeddingProvider: Send + Sync {
    /// Identifies the provider and its configuration for caching.
    fn identity(&self) -> String;
    fn embed(&self, texts: &[&str]) -> Result<Vec<DocVector>, TextRankError>;
}

/// Offline TF-IDF embedding fitted on a fixed corpus.
#[derive(Debug, Clone)]
pub struct LexicalTfidf {
    vocab: Vocabulary,
}

impl LexicalTfidf {
    pub fn fit(corpus: &[&str]) -> Self {
        Self { vocab: tfidf_vectorize(corpus).0 }
    }

    /// Fitted on every non-empty note of the cohort.
    pub fn fit_cohort(cohort: &Cohort) -> Self {
        let notes: Vec<&str> = cohort.admissions.values().filter_map(|r| r.note_text()).collect();
        Self::fit(&notes)
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }
}

impl EmbeddingProvider for LexicalTfidf {
    fn identity(&self) -> String {
        let mut parts: Vec<&[u8]> = vec![b"lexical-tfidf"];
        parts.extend(self.vocab.terms.iter().map(|t| t.as_bytes()));
        format!("lexical-tfidf:{}:{:016x}", self.vocab.len(), stable_hash(&parts))
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<DocVector>, TextRankError> {
        Ok(texts.iter().map(|t| self.vocab.vectorize(t)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteEmbeddingConfig {
    /// Full endpoint URL, e.g. `http://localhost:8080/v1/embeddings`.
    pub url: String,
    pub model: String,
    /// Environment variable holding the bearer credential, if any.
    pub api_key_env: Option<String>,
    pub max_chars: usize,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for RemoteEmbeddingConfig {
    fn default() -> Self {
        Self {
            url: "http://localhost:8080/v1/embeddings".into(),
            model: "bge-small-en-v1.5".into(),
            api_key_env: Some("EXPRAG_EMBEDDING_API_KEY".into()),
            max_chars: 8000,
            batch_size: 32,
            max_in_flight: 4,
            timeout_secs: 60,
        }
    }
}

/// Embedding service speaking `{model, input: [..]}` →
/// `{data: [{embedding: [..], index}]}`.
pub struct RemoteEmbedding {
    config: RemoteEmbeddingConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

/// Longest prefix of at most `max_chars` characters.
pub fn truncate_chars(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

impl RemoteEmbedding {
    pub fn new(config: RemoteEmbeddingConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn failure(&self, message: impl Into<String>) -> TextRankError {
        TextRankError::ProviderFailure { provider: self.identity(), message: message.into() }
    }

    fn embed_batch(&self, batch: &[&str]) -> Result<Vec<DocVector>, TextRankError> {
        let input: Vec<&str> = batch.iter().map(|t| truncate_chars(t, self.config.max_chars)).collect();
        let body = EmbeddingRequest { model: &self.config.model, input };
        let mut request = self.agent.post(&self.config.url);
        if let Some(var) = &self.config.api_key_env {
            if let Ok(key) = std::env::var(var) {
                request = request.header("Authorization", &format!("Bearer {key}"));
            }
        }
        let mut response = request.send_json(&body).map_err(|e| self.failure(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| self.failure(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(self.failure(format!("HTTP {status}: {}", truncate_chars(&text, 200))));
        }
        let parsed: EmbeddingResponse =
            serde_json::from_str(&text).map_err(|e| self.failure(format!("bad response body: {e}")))?;
        if parsed.data.len() != batch.len() {
            return Err(self.failure(format!("expected {} vectors, got {}", batch.len(), parsed.data.len())));
        }
        let mut data = parsed.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        Ok(data.iter().map(|d| DocVector::dense(&d.embedding)).collect())
    }
}

impl EmbeddingProvider for RemoteEmbedding {
    fn identity(&self) -> String {
        format!("remote:{}:{}:{}", self.config.url, self.config.model, self.config.max_chars)
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<DocVector>, TextRankError> {
        let batches: Vec<&[&str]> = texts.chunks(self.config.batch_size.max(1)).collect();
        let results = bounded_map(&batches, self.config.max_in_flight, |_, batch| self.embed_batch(batch));
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r?);
        }
        if let Some(first) = out.first() {
            let dim = first.dim();
            if let Some(bad) = out.iter().find(|v| v.dim() != dim) {
                return Err(TextRankError::DimensionMismatch(dim, bad.dim()));
            }
        }
        Ok(out)
    }
}

/// Note embeddings for a cohort, computed once per provider.
pub struct TextRanker<'p> {
    provider: &'p dyn EmbeddingProvider,
    keys: Vec<String>,
    subjects: Vec<String>,
    vectors: Vec<DocVector>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingCache {
    identity: String,
    fingerprint: u64,
    keys: Vec<String>,
    vectors: Vec<DocVector>,
}

fn cohort_fingerprint(cohort: &Cohort) -> u64 {
    let parts: Vec<&[u8]> = cohort
        .admissions
        .values()
        .filter_map(|r| r.note_text().map(|n| [r.admission_key.as_bytes(), n.as_bytes()]))
        .flatten()
        .collect();
    stable_hash(&parts)
}

impl<'p> TextRanker<'p> {
    /// Embeds every admission with a note; admissions without one are skipped.
    pub fn build(cohort: &Cohort, provider: &'p dyn EmbeddingProvider) -> Result<Self, TextRankError> {
        let (keys, subjects, notes) = Self::documents(cohort);
        let vectors = provider.embed(&notes)?;
        Ok(Self { provider, keys, subjects, vectors })
    }

    /// Like `build`, reusing vectors stored under `cache_dir` when the
    /// provider identity and the cohort notes are unchanged.
    pub fn build_cached(cohort: &Cohort, provider: &'p dyn EmbeddingProvider, cache_dir: &Path) -> Result<Self, TextRankError> {
        let identity = provider.identity();
        let fingerprint = cohort_fingerprint(cohort);
        let path = cache_dir.join(format!("embeddings-{:016x}.json", stable_hash(&[identity.as_bytes()])));
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(cache) = serde_json::from_slice::<EmbeddingCache>(&bytes) {
                if cache.identity == identity && cache.fingerprint == fingerprint {
                    let (keys, subjects, _) = Self::documents(cohort);
                    if keys == cache.keys {
                        return Ok(Self { provider, keys, subjects, vectors: cache.vectors });
                    }
                }
            }
        }
        let ranker = Self::build(cohort, provider)?;
        std::fs::create_dir_all(cache_dir)?;
        let cache = EmbeddingCache { identity, fingerprint, keys: ranker.keys.clone(), vectors: ranker.vectors.clone() };
        std::fs::write(&path, serde_json::to_vec(&cache).map_err(std::io::Error::other)?)?;
        Ok(ranker)
    }

    fn documents(cohort: &Cohort) -> (Vec<String>, Vec<String>, Vec<&str>) {
        let mut keys = Vec::new();
        let mut subjects = Vec::new();
        let mut notes = Vec::new();
        for r in cohort.admissions.values() {
            if let Some(n) = r.note_text() {
                keys.push(r.admission_key.clone());
                subjects.push(r.subject_key.clone());
                notes.push(n);
            }
        }
        (keys, subjects, notes)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn vector(&self, admission_key: &str) -> Option<&DocVector> {
        self.keys
            .binary_search_by(|k| k.as_str().cmp(admission_key))
            .ok()
            .map(|i| &self.vectors[i])
    }

    /// Cosine between two embedded notes.
    pub fn pair_score(&self, a: &str, b: &str) -> Result<f64, TextRankError> {
        let va = self.vector(a).ok_or_else(|| TextRankError::UnknownAdmission(a.to_string()))?;
        let vb = self.vector(b).ok_or_else(|| TextRankError::UnknownAdmission(b.to_string()))?;
        cosine(va, vb)
    }

    /// Top-k notes by cosine to the embedded query, descending, ties by
    /// ascending key. `exclude` drops the query's own admission; with
    /// `exclude_subject` every admission of that subject is dropped too.
    pub fn rank(
        &self,
        query_text: &str,
        exclude: Option<&str>,
        exclude_subject: Option<&str>,
        k: usize,
    ) -> Result<Vec<(String, f64)>, TextRankError> {
        let query = self
            .provider
            .embed(&[query_text])?
            .pop()
            .ok_or_else(|| TextRankError::ProviderFailure {
                provider: self.provider.identity(),
                message: "no vector returned for query".into(),
            })?;
        let mut scored = Vec::with_capacity(self.keys.len());
        for (i, key) in self.keys.iter().enumerate() {
            if exclude == Some(key.as_str()) || exclude_subject == Some(self.subjects[i].as_str()) {
                continue;
            }
            scored.push((key.clone(), cosine(&query, &self.vectors[i])?));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }
}

/// One-shot text ranking: embeds the cohort, then ranks against `query_text`.
pub fn rank_top_k_text(
    cohort: &Cohort,
    query_text: &str,
    query_admission: Option<&str>,
    k: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<(String, f64)>, TextRankError> {
    if let Some(q) = query_admission {
        if cohort.get(q).is_none() {
            return Err(TextRankError::UnknownAdmission(q.to_string()));
        }
    }
    TextRanker::build(cohort, provider)?.rank(query_text, query_admission, None, k)
}
