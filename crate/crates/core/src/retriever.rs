//! Fine-grained retrieval over the reports selected by a ranker: fixed-size
//! chunking, BM25 scoring, sentence-window expansion and hierarchical merge.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{token_spans, tokenize, SentenceSplitter};

#[derive(Debug, Error, PartialEq)]
pub enum RetrieveError {
    #[error("unknown retrieval method `{0}`")]
    UnknownMethod(String),
    #[error("invalid retrieval parameters: {0}")]
    InvalidParams(String),
}

/// A selected discharge report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Report<'a> {
    pub admission_key: &'a str,
    pub text: &'a str,
}

/// A passage of a source note; `text == note[start..end]` (byte offsets).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub source: String,
    pub start: usize,
    pub end: usize,
    pub text: String,
    /// Span of the enclosing parent chunk in hierarchical mode.
    pub parent: Option<(usize, usize)>,
}

impl Chunk {
    fn new(source: &str, note: &str, start: usize, end: usize) -> Self {
        Self { source: source.to_string(), start, end, text: note[start..end].to_string(), parent: None }
    }
}

/// Windows of `size` tokens advancing by `size - overlap`. Window starts run
/// while they are inside the text, so the last chunk may be short. Each
/// chunk spans from its first token (offset 0 for the first chunk) to the
/// start of the token after its last one (end of text for the final chunk).
pub fn chunk_fixed(source: &str, text: &str, size: usize, overlap: usize) -> Result<Vec<Chunk>, RetrieveError> {
    if size == 0 || size <= overlap {
        return Err(RetrieveError::InvalidParams(format!("chunk size {size} must exceed overlap {overlap}")));
    }
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let tokens = token_spans(text);
    if tokens.len() <= size {
        return Ok(vec![Chunk::new(source, text, 0, text.len())]);
    }
    let step = size - overlap;
    let mut chunks = Vec::new();
    let mut first = 0;
    while first < tokens.len() {
        let last = (first + size).min(tokens.len());
        let start = if first == 0 { 0 } else { tokens[first].0 };
        let end = if last == tokens.len() { text.len() } else { tokens[last].0 };
        chunks.push(Chunk::new(source, text, start, end));
        first += step;
    }
    Ok(chunks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Document count, mean length in tokens and document frequency per term.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub doc_count: usize,
    pub avg_doc_len: f64,
    pub df: HashMap<String, usize>,
}

impl CorpusStats {
    pub fn build<S: AsRef<str>>(docs: &[Vec<S>]) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut total = 0usize;
        for doc in docs {
            total += doc.len();
            let uniq: BTreeSet<&str> = doc.iter().map(AsRef::as_ref).collect();
            for t in uniq {
                *df.entry(t.to_string()).or_default() += 1;
            }
        }
        let avg_doc_len = if docs.is_empty() { 0.0 } else { total as f64 / docs.len() as f64 };
        Self { doc_count: docs.len(), avg_doc_len, df }
    }

    /// ln(1 + (N − df + 0.5) / (df + 0.5))
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

/// BM25 over the distinct query terms present in `doc_terms`.
pub fn bm25_score<Q: AsRef<str>, D: AsRef<str>>(query_terms: &[Q], doc_terms: &[D], stats: &CorpusStats, params: Bm25Params) -> f64 {
    let mut tf: HashMap<&str, usize> = HashMap::new();
    for t in doc_terms {
        *tf.entry(t.as_ref()).or_default() += 1;
    }
    let len = doc_terms.len() as f64;
    let norm = if stats.avg_doc_len > 0.0 { len / stats.avg_doc_len } else { 0.0 };
    let mut seen = BTreeSet::new();
    let mut score = 0.0;
    for q in query_terms {
        let q = q.as_ref();
        if !seen.insert(q) {
            continue;
        }
        let Some(&f) = tf.get(q) else { continue };
        let f = f as f64;
        score += stats.idf(q) * f * (params.k1 + 1.0) / (f + params.k1 * (1.0 - params.b + params.b * norm));
    }
    score
}

/// Scores every unit against the query with statistics over the units.
fn score_units(units: &[&str], query_terms: &[String], params: Bm25Params) -> Vec<f64> {
    let tokenized: Vec<Vec<String>> = units.iter().map(|u| tokenize(u)).collect();
    let stats = CorpusStats::build(&tokenized);
    tokenized.iter().map(|d| bm25_score(query_terms, d, &stats, params)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMethod {
    Bm25,
    SentenceWindow,
    HierMerge,
}

impl RetrievalMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMethod::Bm25 => "bm25",
            RetrievalMethod::SentenceWindow => "sentence-window",
            RetrievalMethod::HierMerge => "hier-merge",
        }
    }
}

impl fmt::Display for RetrievalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetrievalMethod {
    type Err = RetrieveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "bm25" => Ok(RetrievalMethod::Bm25),
            "sentence-window" | "sentence" => Ok(RetrievalMethod::SentenceWindow),
            "hier-merge" | "auto-merging" | "auto-merge" => Ok(RetrievalMethod::HierMerge),
            _ => Err(RetrieveError::UnknownMethod(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub chunk: Chunk,
    pub score: f64,
    pub method: RetrievalMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverParams {
    pub method: RetrievalMethod,
    pub top_n: usize,
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    pub window: usize,
    pub leaf_size: usize,
    pub fanout: usize,
    pub merge_threshold: f64,
    pub bm25: Bm25Params,
    pub splitter: SentenceSplitter,
    /// Character cap on the concatenated context handed to the model.
    pub context_budget: usize,
}

impl Default for RetrieverParams {
    fn default() -> Self {
        Self {
            method: RetrievalMethod::HierMerge,
            top_n: 5,
            chunk_size: 256,
            chunk_overlap: 32,
            window: 1,
            leaf_size: 128,
            fanout: 4,
            merge_threshold: 0.5,
            bm25: Bm25Params::default(),
            splitter: SentenceSplitter::default(),
            context_budget: 6000,
        }
    }
}

impl RetrieverParams {
    pub fn with_method(method: RetrievalMethod) -> Self {
        Self { method, ..Self::default() }
    }
}

/// Sort by score descending, then (source, span start); keep the top `n`
/// hits with a positive score.
fn finish(mut hits: Vec<RetrievalHit>, n: usize) -> Vec<RetrievalHit> {
    hits.retain(|h| h.score > 0.0);
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.chunk.source.cmp(&b.chunk.source))
            .then(a.chunk.start.cmp(&b.chunk.start))
            .then(a.chunk.end.cmp(&b.chunk.end))
    });
    hits.truncate(n);
    hits
}

pub fn retrieve_bm25(reports: &[Report<'_>], query: &str, params: &RetrieverParams) -> Result<Vec<RetrievalHit>, RetrieveError> {
    let mut chunks = Vec::new();
    for r in reports {
        chunks.extend(chunk_fixed(r.admission_key, r.text, params.chunk_size, params.chunk_overlap)?);
    }
    let units: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
    let scores = score_units(&units, &tokenize(query), params.bm25);
    let hits = chunks
        .into_iter()
        .zip(scores)
        .map(|(chunk, score)| RetrievalHit { chunk, score, method: RetrievalMethod::Bm25 })
        .collect();
    Ok(finish(hits, params.top_n))
}

/// Sentences scored by BM25; each hit is widened by `window` sentences on
/// each side within the same note.
pub fn retrieve_sentence_window(reports: &[Report<'_>], query: &str, top_n: usize, window: usize, params: &RetrieverParams) -> Vec<RetrievalHit> {
    struct Sentence {
        report: usize,
        index: usize,
    }
    let per_report: Vec<Vec<(usize, usize)>> = reports.iter().map(|r| params.splitter.spans(r.text)).collect();
    let mut sentences = Vec::new();
    let mut units = Vec::new();
    for (ri, spans) in per_report.iter().enumerate() {
        for (si, &(s, e)) in spans.iter().enumerate() {
            sentences.push(Sentence { report: ri, index: si });
            units.push(&reports[ri].text[s..e]);
        }
    }
    let scores = score_units(&units, &tokenize(query), params.bm25);
    let seeds: Vec<RetrievalHit> = sentences
        .iter()
        .zip(&scores)
        .map(|(s, &score)| {
            let (start, end) = per_report[s.report][s.index];
            RetrievalHit {
                chunk: Chunk::new(reports[s.report].admission_key, reports[s.report].text, start, end),
                score,
                method: RetrievalMethod::SentenceWindow,
            }
        })
        .collect();
    let seed_index: HashMap<(String, usize), (usize, usize)> = sentences
        .iter()
        .map(|s| ((reports[s.report].admission_key.to_string(), per_report[s.report][s.index].0), (s.report, s.index)))
        .collect();
    finish(seeds, top_n)
        .into_iter()
        .map(|mut hit| {
            let (ri, si) = seed_index[&(hit.chunk.source.clone(), hit.chunk.start)];
            let spans = &per_report[ri];
            let lo = si.saturating_sub(window);
            let hi = (si + window).min(spans.len() - 1);
            hit.chunk = Chunk::new(reports[ri].admission_key, reports[ri].text, spans[lo].0, spans[hi].1);
            hit
        })
        .collect()
}

/// Leaves of `leaf_size` tokens grouped `fanout` at a time under parents.
/// When at least `merge_threshold` of a parent's leaves are among the
/// provisional top-n leaves, the parent replaces them with the best child
/// score.
pub fn retrieve_hier_merge(
    reports: &[Report<'_>],
    query: &str,
    leaf_size: usize,
    fanout: usize,
    merge_threshold: f64,
    top_n: usize,
    params: &RetrieverParams,
) -> Result<Vec<RetrievalHit>, RetrieveError> {
    if fanout < 2 {
        return Err(RetrieveError::InvalidParams(format!("fanout {fanout} must be at least 2")));
    }
    if !(merge_threshold > 0.0 && merge_threshold <= 1.0) {
        return Err(RetrieveError::InvalidParams(format!("merge threshold {merge_threshold} must be in (0, 1]")));
    }
    // (report, first leaf, leaf count) per parent
    let mut leaves: Vec<Chunk> = Vec::new();
    let mut parent_of: Vec<usize> = Vec::new();
    let mut parents: Vec<Chunk> = Vec::new();
    let mut parent_sizes: Vec<usize> = Vec::new();
    for r in reports {
        let report_leaves = chunk_fixed(r.admission_key, r.text, leaf_size, 0)?;
        for group in report_leaves.chunks(fanout) {
            let start = group[0].start;
            let end = group[group.len() - 1].end;
            let parent_id = parents.len();
            parents.push(Chunk::new(r.admission_key, r.text, start, end));
            parent_sizes.push(group.len());
            for leaf in group {
                let mut leaf = leaf.clone();
                leaf.parent = Some((start, end));
                leaves.push(leaf);
                parent_of.push(parent_id);
            }
        }
    }
    let units: Vec<&str> = leaves.iter().map(|c| c.text.as_str()).collect();
    let scores = score_units(&units, &tokenize(query), params.bm25);
    let leaf_hits: Vec<(usize, RetrievalHit)> = leaves
        .into_iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (chunk, score))| (i, RetrievalHit { chunk, score, method: RetrievalMethod::HierMerge }))
        .collect();

    let mut provisional: Vec<(usize, RetrievalHit)> = leaf_hits.into_iter().filter(|(_, h)| h.score > 0.0).collect();
    provisional.sort_by(|(_, a), (_, b)| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.chunk.source.cmp(&b.chunk.source))
            .then(a.chunk.start.cmp(&b.chunk.start))
    });
    provisional.truncate(top_n);

    let mut by_parent: HashMap<usize, Vec<RetrievalHit>> = HashMap::new();
    for (leaf_id, hit) in provisional {
        by_parent.entry(parent_of[leaf_id]).or_default().push(hit);
    }
    let mut merged = Vec::new();
    for (parent_id, children) in by_parent {
        let fraction = children.len() as f64 / parent_sizes[parent_id] as f64;
        if fraction >= merge_threshold {
            let score = children.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            merged.push(RetrievalHit { chunk: parents[parent_id].clone(), score, method: RetrievalMethod::HierMerge });
        } else {
            merged.extend(children);
        }
    }
    Ok(finish(merged, top_n))
}

/// Dispatches on `params.method`. Every hit comes from one of `reports`.
pub fn retrieve(reports: &[Report<'_>], query: &str, params: &RetrieverParams) -> Result<Vec<RetrievalHit>, RetrieveError> {
    if reports.is_empty() {
        return Ok(Vec::new());
    }
    match params.method {
        RetrievalMethod::Bm25 => retrieve_bm25(reports, query, params),
        RetrievalMethod::SentenceWindow => Ok(retrieve_sentence_window(reports, query, params.top_n, params.window, params)),
        RetrievalMethod::HierMerge => retrieve_hier_merge(
            reports,
            query,
            params.leaf_size,
            params.fanout,
            params.merge_threshold,
            params.top_n,
            params,
        ),
    }
}

/// Joins hit texts best-first, dropping whole hits from the lowest score up
/// until the result fits in `budget` characters.
pub fn assemble_context(hits: &[RetrievalHit], budget: usize) -> String {
    const SEPARATOR: &str = "\n\n";
    let mut parts: Vec<&str> = Vec::new();
    let mut used = 0;
    for hit in hits {
        let extra = hit.chunk.text.chars().count() + if parts.is_empty() { 0 } else { SEPARATOR.len() };
        if used + extra > budget {
            break;
        }
        used += extra;
        parts.push(&hit.chunk.text);
    }
    parts.join(SEPARATOR)
}

/// One line of a hits export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRecord {
    pub question_id: String,
    pub rank: usize,
    pub source_key: String,
    pub span: (usize, usize),
    pub score: f64,
    pub method: RetrievalMethod,
}

pub fn write_hits<W: Write>(question_id: &str, hits: &[RetrievalHit], mut out: W) -> std::io::Result<()> {
    for (i, h) in hits.iter().enumerate() {
        let record = HitRecord {
            question_id: question_id.to_string(),
            rank: i + 1,
            source_key: h.chunk.source.clone(),
            span: (h.chunk.start, h.chunk.end),
            score: h.score,
            method: h.method,
        };
        writeln!(out, "{}", serde_json::to_string(&record).map_err(std::io::Error::other)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn fixed_chunks_start_every_step() {
        let text = words(10);
        let chunks = chunk_fixed("D", &text, 4, 1).unwrap();
        let starts: Vec<usize> = chunks.iter().map(|c| tokenize(&c.text)[0][1..].parse().unwrap()).collect();
        assert_eq!(starts, [0, 3, 6, 9]);
        assert_eq!(chunks[0].start, 0);
        assert_eq!(chunks.last().unwrap().end, text.len());
        for c in &chunks {
            assert_eq!(c.text, text[c.start..c.end]);
        }
    }

    #[test]
    fn short_text_is_one_chunk() {
        let chunks = chunk_fixed("D", "a b c", 4, 1).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, "a b c");
    }

    #[test]
    fn size_must_exceed_overlap() {
        assert!(chunk_fixed("D", "a b", 2, 2).is_err());
        assert!(chunk_fixed("D", "a b", 0, 0).is_err());
    }

    #[test]
    fn bm25_single_doc_closed_form() {
        let docs = vec![vec!["fever".to_string(), "cough".to_string()]];
        let stats = CorpusStats::build(&docs);
        let s = bm25_score(&["fever"], &docs[0], &stats, Bm25Params::default());
        assert!((s - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((s - 0.2876821).abs() < 1e-6);
        assert_eq!(bm25_score(&["rash"], &docs[0], &stats, Bm25Params::default()), 0.0);
    }

    #[test]
    fn method_names() {
        assert_eq!("sentence-window".parse::<RetrievalMethod>().unwrap(), RetrievalMethod::SentenceWindow);
        assert_eq!("BM25".parse::<RetrievalMethod>().unwrap(), RetrievalMethod::Bm25);
        assert_eq!("auto-merging".parse::<RetrievalMethod>().unwrap(), RetrievalMethod::HierMerge);
        assert!(matches!("flare".parse::<RetrievalMethod>(), Err(RetrieveError::UnknownMethod(_))));
    }

    #[test]
    fn sentence_window_expands_neighbours() {
        let note = "Alpha one. Beta two. Gamma warfarin three. Delta four. Epsilon five.";
        let reports = [Report { admission_key: "A", text: note }];
        let params = RetrieverParams::default();
        let hits = retrieve_sentence_window(&reports, "warfarin", 5, 1, &params);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].chunk.text, "Beta two. Gamma warfarin three. Delta four.");
        let bare = retrieve_sentence_window(&reports, "warfarin", 5, 0, &params);
        assert_eq!(bare[0].chunk.text, "Gamma warfarin three.");
        let edge = retrieve_sentence_window(&reports, "alpha", 5, 2, &params);
        assert_eq!(edge[0].chunk.text, "Alpha one. Beta two. Gamma warfarin three.");
    }

    fn leaf_text(relevant: &[usize], leaves: usize, leaf: usize) -> String {
        (0..leaves)
            .map(|l| {
                (0..leaf)
                    .map(|i| if i == 0 && relevant.contains(&l) { "heparin".to_string() } else { format!("f{l}x{i}") })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn all_children_merge_into_parent() {
        let text = leaf_text(&[0, 1, 2, 3], 8, 4);
        let reports = [Report { admission_key: "A", text: &text }];
        let hits = retrieve_hier_merge(&reports, "heparin", 4, 4, 0.5, 5, &RetrieverParams::default()).unwrap();
        assert_eq!(hits.len(), 1);
        let parent_end = text.find("f4x0").unwrap();
        assert_eq!((hits[0].chunk.start, hits[0].chunk.end), (0, parent_end));
        assert_eq!(hits[0].chunk.parent, None);
    }

    #[test]
    fn lone_child_stays_unmerged() {
        let text = leaf_text(&[5], 8, 4);
        let reports = [Report { admission_key: "A", text: &text }];
        let hits = retrieve_hier_merge(&reports, "heparin", 4, 4, 0.5, 5, &RetrieverParams::default()).unwrap();
        assert_eq!(hits.len(), 1);
        assert!(hits[0].chunk.text.starts_with("heparin"));
        assert!(hits[0].chunk.parent.is_some());
    }

    #[test]
    fn hier_params_validated() {
        let reports = [Report { admission_key: "A", text: "x" }];
        assert!(retrieve_hier_merge(&reports, "x", 4, 1, 0.5, 5, &RetrieverParams::default()).is_err());
        assert!(retrieve_hier_merge(&reports, "x", 4, 4, 0.0, 5, &RetrieverParams::default()).is_err());
        assert!(retrieve_hier_merge(&reports, "x", 4, 4, 1.5, 5, &RetrieverParams::default()).is_err());
    }

    #[test]
    fn empty_reports_give_no_hits() {
        for method in [RetrievalMethod::Bm25, RetrievalMethod::SentenceWindow, RetrievalMethod::HierMerge] {
            assert!(retrieve(&[], "x", &RetrieverParams::with_method(method)).unwrap().is_empty());
        }
    }

    fn hit(text: &str, score: f64) -> RetrievalHit {
        RetrievalHit { chunk: Chunk::new("A", text, 0, text.len()), score, method: RetrievalMethod::Bm25 }
    }

    #[test]
    fn context_budget_drops_lowest_hits_whole() {
        let hits = [hit("aaaa", 3.0), hit("bbbb", 2.0), hit("cccc", 1.0)];
        assert_eq!(assemble_context(&hits, 10), "aaaa\n\nbbbb");
        assert_eq!(assemble_context(&hits, 9), "aaaa");
        assert_eq!(assemble_context(&hits, 3), "");
    }
}
