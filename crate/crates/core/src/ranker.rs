//! EHR-based report ranker: per-modality Jaccard similarity over code sets,
//! weighted aggregation, and top-k retrieval through an inverted code index.
//!
//! `rank_top_k` and `brute_force_rank` share one scoring routine and one
//! ordering, so for any cohort they return identical keys, scores and order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{AdmissionRecord, CodeKind, Cohort};
use crate::segment::TaskKind;

#[derive(Debug, Error)]
pub enum RankError {
    #[error("unknown admission `{0}`")]
    UnknownAdmission(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("index does not match cohort: {0}")]
    IndexMismatch(String),
    #[error("bad index file: {0}")]
    BadIndexFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coefficients of the weighted sum over the three modality similarities.
/// Used as given; never renormalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityWeights {
    pub diag: f64,
    pub med: f64,
    pub proc: f64,
}

impl SimilarityWeights {
    pub fn new(diag: f64, med: f64, proc: f64) -> Result<Self, RankError> {
        let w = Self { diag, med, proc };
        let all = [diag, med, proc];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(RankError::InvalidWeights(format!("{diag},{med},{proc}: must be finite and non-negative")));
        }
        if all.iter().all(|x| *x == 0.0) {
            return Err(RankError::InvalidWeights("at least one weight must be positive".into()));
        }
        Ok(w)
    }

    pub fn uniform() -> Self {
        Self { diag: 1.0 / 3.0, med: 1.0 / 3.0, proc: 1.0 / 3.0 }
    }

    /// Weight 1 on the modality matching the task, 0 elsewhere.
    pub fn task_focused(task: TaskKind) -> Self {
        let mut w = Self { diag: 0.0, med: 0.0, proc: 0.0 };
        *w.slot_mut(task_modality(task)) = 1.0;
        w
    }

    /// Weight 1 on the two modalities not matching the task, 0 on the matching one.
    pub fn complementary(task: TaskKind) -> Self {
        let mut w = Self { diag: 1.0, med: 1.0, proc: 1.0 };
        *w.slot_mut(task_modality(task)) = 0.0;
        w
    }

    pub fn get(&self, kind: CodeKind) -> f64 {
        match kind {
            CodeKind::Diagnosis => self.diag,
            CodeKind::Medication => self.med,
            CodeKind::Procedure => self.proc,
        }
    }

    fn slot_mut(&mut self, kind: CodeKind) -> &mut f64 {
        match kind {
            CodeKind::Diagnosis => &mut self.diag,
            CodeKind::Medication => &mut self.med,
            CodeKind::Procedure => &mut self.proc,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { diag: self.diag * c, med: self.med * c, proc: self.proc * c }
    }

    pub fn sum(&self) -> f64 {
        self.diag + self.med + self.proc
    }

    /// Parses `d,m,p`.
    pub fn parse(s: &str) -> Result<Self, RankError> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| RankError::InvalidWeights(format!("`{s}`: {e}")))?;
        match parts.as_slice() {
            [d, m, p] => Self::new(*d, *m, *p),
            _ => Err(RankError::InvalidWeights(format!("`{s}`: expected three comma-separated numbers"))),
        }
    }
}

impl Default for SimilarityWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

/// Modality treated as task-relevant by the task-focused and complementary
/// strategies. Instructions have no natural code table; procedures stand in.
pub fn task_modality(task: TaskKind) -> CodeKind {
    match task {
        TaskKind::DiagnosisInference => CodeKind::Diagnosis,
        TaskKind::MedicationInference => CodeKind::Medication,
        TaskKind::InstructionInference => CodeKind::Procedure,
    }
}

/// Per-modality similarities and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub tau_diag: f64,
    pub tau_med: f64,
    pub tau_proc: f64,
    pub tau: f64,
}

impl SimilarityScore {
    pub fn from_parts(parts: [f64; 3], weights: &SimilarityWeights) -> Self {
        Self {
            tau_diag: parts[0],
            tau_med: parts[1],
            tau_proc: parts[2],
            tau: combined_similarity(parts, weights),
        }
    }

    pub fn parts(&self) -> [f64; 3] {
        [self.tau_diag, self.tau_med, self.tau_proc]
    }
}

/// |a ∩ b| / |a ∪ b|, with J(∅, ∅) = 0.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|x| large.contains(x)).count();
    jaccard_from_counts(inter, a.len(), b.len())
}

#[inline]
pub fn jaccard_from_counts(intersection: usize, size_a: usize, size_b: usize) -> f64 {
    let union = size_a + size_b - intersection;
    if union == 0 {
        0.0
    } else {
        intersection as f64 / union as f64
    }
}

pub fn modality_similarity(p: &AdmissionRecord, q: &AdmissionRecord, kind: CodeKind) -> f64 {
    jaccard(p.codes(kind), q.codes(kind))
}

#[inline]
pub fn combined_similarity(parts: [f64; 3], w: &SimilarityWeights) -> f64 {
    w.diag * parts[0] + w.med * parts[1] + w.proc * parts[2]
}

pub fn pair_similarity(p: &AdmissionRecord, q: &AdmissionRecord, weights: &SimilarityWeights) -> SimilarityScore {
    let parts = CodeKind::ALL.map(|k| modality_similarity(p, q, k));
    SimilarityScore::from_parts(parts, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankParams {
    pub k: usize,
    pub weights: SimilarityWeights,
    pub exclude_same_subject: bool,
}

impl Default for RankParams {
    fn default() -> Self {
        Self { k: 15, weights: SimilarityWeights::uniform(), exclude_same_subject: true }
    }
}

impl RankParams {
    pub fn with_k(k: usize) -> Self {
        Self { k, ..Self::default() }
    }

    fn validate(&self) -> Result<(), RankError> {
        if self.k == 0 {
            return Err(RankError::ZeroK);
        }
        SimilarityWeights::new(self.weights.diag, self.weights.med, self.weights.proc)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAdmission {
    pub admission_key: String,
    pub score: SimilarityScore,
}

/// Descending score, then ascending admission key.
fn rank_order(a_tau: f64, a_key: &str, b_tau: f64, b_key: &str) -> Ordering {
    b_tau.total_cmp(&a_tau).then_with(|| a_key.cmp(b_key))
}

/// Inverted index from (kind, code) to the dense ids of admissions holding
/// that code. Dense ids follow ascending admission-key order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeIndex {
    keys: Vec<String>,
    subjects: Vec<u32>,
    set_sizes: Vec<[u32; 3]>,
    postings: BTreeMap<(CodeKind, String), Vec<u32>>,
}

impl CodeIndex {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn id_of(&self, admission_key: &str) -> Option<usize> {
        self.keys.binary_search_by(|k| k.as_str().cmp(admission_key)).ok()
    }

    /// Admission keys holding `code`, ascending.
    pub fn posting(&self, kind: CodeKind, code: &str) -> Vec<&str> {
        self.postings
            .get(&(kind, code.to_string()))
            .map(|ids| ids.iter().map(|&i| self.keys[i as usize].as_str()).collect())
            .unwrap_or_default()
    }

    pub fn posting_count(&self) -> usize {
        self.postings.len()
    }

    pub fn set_size(&self, kind: CodeKind, admission_key: &str) -> Option<usize> {
        self.id_of(admission_key).map(|i| self.set_sizes[i][kind.index()] as usize)
    }

    /// Admissions sharing at least one code of any kind with `record`.
    pub fn overlapping(&self, record: &AdmissionRecord) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for kind in CodeKind::ALL {
            for code in record.codes(kind) {
                if let Some(ids) = self.postings.get(&(kind, code.clone())) {
                    out.extend(ids.iter().map(|&i| i as usize));
                }
            }
        }
        out
    }

    /// Checks that every posting is backed by the cohort and every set size
    /// matches, exhaustively.
    pub fn check_consistency(&self, cohort: &Cohort) -> Result<(), RankError> {
        if self.keys.len() != cohort.len() {
            return Err(RankError::IndexMismatch(format!("{} keys vs {} admissions", self.keys.len(), cohort.len())));
        }
        for (i, (key, record)) in self.keys.iter().zip(cohort.admissions.values()).enumerate() {
            if key != &record.admission_key {
                return Err(RankError::IndexMismatch(format!("key {key} vs {}", record.admission_key)));
            }
            for kind in CodeKind::ALL {
                if self.set_sizes[i][kind.index()] as usize != record.codes(kind).len() {
                    return Err(RankError::IndexMismatch(format!("set size of {key}/{kind}")));
                }
            }
        }
        let mut total = 0usize;
        for ((kind, code), ids) in &self.postings {
            for &id in ids {
                let record = &cohort.admissions[&self.keys[id as usize]];
                if !record.codes(*kind).contains(code) {
                    return Err(RankError::IndexMismatch(format!("{code} not held by {}", record.admission_key)));
                }
            }
            total += ids.len();
        }
        let expected: usize = cohort
            .admissions
            .values()
            .map(|r| CodeKind::ALL.iter().map(|k| r.codes(*k).len()).sum::<usize>())
            .sum();
        if total != expected {
            return Err(RankError::IndexMismatch(format!("{total} postings vs {expected} codes")));
        }
        Ok(())
    }
}

pub fn build_code_index(cohort: &Cohort) -> CodeIndex {
    let keys: Vec<String> = cohort.admissions.keys().cloned().collect();
    let mut subject_ids: BTreeMap<&str, u32> = BTreeMap::new();
    let mut subjects = Vec::with_capacity(keys.len());
    let mut set_sizes = Vec::with_capacity(keys.len());
    let mut postings: BTreeMap<(CodeKind, String), Vec<u32>> = BTreeMap::new();
    for (id, record) in cohort.admissions.values().enumerate() {
        let next = subject_ids.len() as u32;
        subjects.push(*subject_ids.entry(record.subject_key.as_str()).or_insert(next));
        set_sizes.push(CodeKind::ALL.map(|k| record.codes(k).len() as u32));
        for kind in CodeKind::ALL {
            for code in record.codes(kind) {
                postings.entry((kind, code.clone())).or_default().push(id as u32);
            }
        }
    }
    CodeIndex { keys, subjects, set_sizes, postings }
}

/// Top-k similar admissions via posting-list accumulation. Only candidates
/// sharing at least one code are visited; candidates scoring 0 are dropped.
pub fn rank_top_k(
    index: &CodeIndex,
    cohort: &Cohort,
    query: &str,
    params: &RankParams,
) -> Result<Vec<RankedAdmission>, RankError> {
    params.validate()?;
    let record = cohort.get(query).ok_or_else(|| RankError::UnknownAdmission(query.to_string()))?;
    let query_id = index
        .id_of(query)
        .ok_or_else(|| RankError::IndexMismatch(format!("`{query}` is not indexed")))?;
    let query_subject = index.subjects[query_id];

    let mut counts: Vec<[u32; 3]> = vec![[0; 3]; index.len()];
    let mut touched: Vec<u32> = Vec::new();
    for kind in CodeKind::ALL {
        let slot = kind.index();
        for code in record.codes(kind) {
            let Some(ids) = index.postings.get(&(kind, code.clone())) else { continue };
            for &id in ids {
                let c = &mut counts[id as usize];
                if *c == [0; 3] {
                    touched.push(id);
                }
                c[slot] += 1;
            }
        }
    }

    let query_sizes = CodeKind::ALL.map(|k| record.codes(k).len());
    let mut scored: Vec<(u32, SimilarityScore)> = touched
        .into_iter()
        .filter(|&id| {
            id as usize != query_id && !(params.exclude_same_subject && index.subjects[id as usize] == query_subject)
        })
        .filter_map(|id| {
            let inter = counts[id as usize];
            let sizes = index.set_sizes[id as usize];
            let parts = [0, 1, 2].map(|s| jaccard_from_counts(inter[s] as usize, query_sizes[s], sizes[s] as usize));
            let score = SimilarityScore::from_parts(parts, &params.weights);
            (score.tau > 0.0).then_some((id, score))
        })
        .collect();

    // Ids ascend with keys, so id order is key order.
    let by_rank = |a: &(u32, SimilarityScore), b: &(u32, SimilarityScore)| b.1.tau.total_cmp(&a.1.tau).then(a.0.cmp(&b.0));
    if scored.len() > params.k {
        scored.select_nth_unstable_by(params.k - 1, by_rank);
        scored.truncate(params.k);
    }
    scored.sort_unstable_by(by_rank);
    Ok(scored
        .into_iter()
        .map(|(id, score)| RankedAdmission { admission_key: index.keys[id as usize].clone(), score })
        .collect())
}

/// Pairwise scan over the whole cohort; the reference for `rank_top_k`.
pub fn brute_force_rank(cohort: &Cohort, query: &str, params: &RankParams) -> Result<Vec<RankedAdmission>, RankError> {
    params.validate()?;
    let record = cohort.get(query).ok_or_else(|| RankError::UnknownAdmission(query.to_string()))?;
    let mut scored: Vec<RankedAdmission> = cohort
        .admissions
        .values()
        .filter(|c| c.admission_key != record.admission_key)
        .filter(|c| !(params.exclude_same_subject && c.subject_key == record.subject_key))
        .map(|c| RankedAdmission { admission_key: c.admission_key.clone(), score: pair_similarity(record, c, &params.weights) })
        .filter(|r| r.score.tau > 0.0)
        .collect();
    scored.sort_by(|a, b| rank_order(a.score.tau, &a.admission_key, b.score.tau, &b.admission_key));
    scored.truncate(params.k);
    Ok(scored)
}

/// One line of a ranking export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub query_key: String,
    pub rank: usize,
    pub candidate_key: String,
    pub tau: f64,
    pub tau_diag: f64,
    pub tau_med: f64,
    pub tau_proc: f64,
}

pub fn write_rankings<W: Write>(query: &str, ranked: &[RankedAdmission], mut out: W) -> std::io::Result<()> {
    for (i, r) in ranked.iter().enumerate() {
        let record = RankingRecord {
            query_key: query.to_string(),
            rank: i + 1,
            candidate_key: r.admission_key.clone(),
            tau: r.score.tau,
            tau_diag: r.score.tau_diag,
            tau_med: r.score.tau_med,
            tau_proc: r.score.tau_proc,
        };
        writeln!(out, "{}", serde_json::to_string(&record).map_err(std::io::Error::other)?)?;
    }
    Ok(())
}

const INDEX_MAGIC: &[u8; 8] = b"EXPIDX\0\0";
pub const INDEX_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RankError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| RankError::BadIndexFile("truncated".into()))?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, RankError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String, RankError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| RankError::BadIndexFile(e.to_string()))
    }
}

/// Little-endian binary layout: magic, version, admission table
/// (key, subject id, three set sizes), then postings grouped by (kind, code).
pub fn write_index<W: Write>(index: &CodeIndex, mut out: W) -> Result<(), RankError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(INDEX_MAGIC);
    put_u32(&mut buf, INDEX_VERSION);
    put_u32(&mut buf, index.keys.len() as u32);
    for (i, key) in index.keys.iter().enumerate() {
        put_str(&mut buf, key);
        put_u32(&mut buf, index.subjects[i]);
        for size in index.set_sizes[i] {
            put_u32(&mut buf, size);
        }
    }
    put_u32(&mut buf, index.postings.len() as u32);
    for ((kind, code), ids) in &index.postings {
        buf.push(kind.index() as u8);
        put_str(&mut buf, code);
        put_u32(&mut buf, ids.len() as u32);
        for id in ids {
            put_u32(&mut buf, *id);
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_index<R: Read>(mut input: R) -> Result<CodeIndex, RankError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(8)? != INDEX_MAGIC {
        return Err(RankError::BadIndexFile("missing magic".into()));
    }
    let version = cur.u32()?;
    if version != INDEX_VERSION {
        return Err(RankError::BadIndexFile(format!("unsupported version {version}")));
    }
    let n = cur.u32()? as usize;
    let mut keys = Vec::with_capacity(n);
    let mut subjects = Vec::with_capacity(n);
    let mut set_sizes = Vec::with_capacity(n);
    for _ in 0..n {
        keys.push(cur.string()?);
        subjects.push(cur.u32()?);
        set_sizes.push([cur.u32()?, cur.u32()?, cur.u32()?]);
    }
    let n_postings = cur.u32()? as usize;
    let mut postings = BTreeMap::new();
    for _ in 0..n_postings {
        let kind = match cur.take(1)?[0] {
            0 => CodeKind::Diagnosis,
            1 => CodeKind::Medication,
            2 => CodeKind::Procedure,
            other => return Err(RankError::BadIndexFile(format!("bad code kind {other}"))),
        };
        let code = cur.string()?;
        let len = cur.u32()? as usize;
        let ids = (0..len).map(|_| cur.u32()).collect::<Result<Vec<_>, _>>()?;
        if ids.iter().any(|&i| i as usize >= n) {
            return Err(RankError::BadIndexFile("posting id out of range".into()));
        }
        postings.insert((kind, code), ids);
    }
    if cur.pos != buf.len() {
        return Err(RankError::BadIndexFile("trailing bytes".into()));
    }
    Ok(CodeIndex { keys, subjects, set_sizes, postings })
}
