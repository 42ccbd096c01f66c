//! Ranker-versus-annotator correlation study: per target, a mix of uniform
//! and code-overlapping candidates is scored by an annotator and by each
//! ranker, and per-target Pearson/Spearman are averaged.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{pearson, spearman};
use crate::cohort::{AdmissionRecord, CodeKind, Cohort};
use crate::llm::{complete, ChatMessage, ChatProvider, ChatRequest, Probe, RetryPolicy};
use crate::ranker::{combined_similarity, modality_similarity, pair_similarity, CodeIndex, SimilarityWeights};
use crate::text_ranker::TextRanker;

#[derive(Debug, Error, PartialEq)]
pub enum CorrelationError {
    #[error("target {target}: restricted pool holds {available} candidates, plan needs {needed}")]
    InsufficientPool { target: String, available: usize, needed: usize },
    #[error("cohort of {available} admissions is too small: {reason}")]
    InsufficientCohort { available: usize, reason: String },
    #[error("annotator failed on ({0}, {1}): {2}")]
    Annotator(String, String, String),
    #[error("ranker {0} failed: {1}")]
    Scorer(String, String),
}

/// Scores a pair per modality (diagnosis, medication, procedure).
pub trait Annotator: Sync {
    fn name(&self) -> String;
    fn score(&self, target: &AdmissionRecord, candidate: &AdmissionRecord, cohort: &Cohort) -> Result<[f64; 3], String>;
}

/// Exact per-modality Jaccard.
#[derive(Debug, Clone, Default)]
pub struct ExactEhrAnnotator;

impl Annotator for ExactEhrAnnotator {
    fn name(&self) -> String {
        "exact-ehr".into()
    }

    fn score(&self, t: &AdmissionRecord, c: &AdmissionRecord, _: &Cohort) -> Result<[f64; 3], String> {
        Ok(CodeKind::ALL.map(|k| modality_similarity(t, c, k)))
    }
}

#[derive(Debug, Clone)]
pub struct ConstantAnnotator(pub f64);

impl Annotator for ConstantAnnotator {
    fn name(&self) -> String {
        format!("constant-{}", self.0)
    }

    fn score(&self, _: &AdmissionRecord, _: &AdmissionRecord, _: &Cohort) -> Result<[f64; 3], String> {
        Ok([self.0; 3])
    }
}

/// Asks a chat model for three 0–10 similarity ratings, one per modality,
/// from the code descriptions of both admissions.
pub struct LlmAnnotator<'p> {
    pub provider: &'p dyn ChatProvider,
    pub model: String,
    pub retry: RetryPolicy,
}

fn describe(r: &AdmissionRecord, kind: CodeKind, cohort: &Cohort) -> String {
    r.codes(kind)
        .iter()
        .map(|c| cohort.description(kind, c).unwrap_or(c).to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// First three numbers in `text`, each divided by 10.
pub fn parse_ratings(text: &str) -> Option<[f64; 3]> {
    let nums: Vec<f64> = text
        .split(|c: char| !(c.is_ascii_digit() || c == '.'))
        .filter_map(|t| t.trim_matches('.').parse::<f64>().ok())
        .take(3)
        .collect();
    (nums.len() == 3).then(|| [nums[0] / 10.0, nums[1] / 10.0, nums[2] / 10.0])
}

impl Annotator for LlmAnnotator<'_> {
    fn name(&self) -> String {
        format!("llm:{}", self.provider.name())
    }

    fn score(&self, t: &AdmissionRecord, c: &AdmissionRecord, cohort: &Cohort) -> Result<[f64; 3], String> {
        let mut prompt = String::from(
            "Rate how similar these two hospital admissions are, separately for diagnoses, medications and procedures, \
             each on a 0 to 10 scale. Reply with three numbers.\n",
        );
        for (label, kind) in [("Diagnoses", CodeKind::Diagnosis), ("Medications", CodeKind::Medication), ("Procedures", CodeKind::Procedure)] {
            let _ = write!(prompt, "\n{label}\nPatient 1: {}\nPatient 2: {}\n", describe(t, kind, cohort), describe(c, kind, cohort));
        }
        let request = ChatRequest::new(&self.model, vec![ChatMessage::new("user", prompt)]);
        let ex = complete(request, self.provider, Probe::free(""), self.retry).map_err(|e| e.to_string())?;
        parse_ratings(&ex.response.text).ok_or_else(|| format!("unparseable ratings: {:?}", ex.response.text))
    }
}

/// A ranker's pairwise score.
pub trait PairScorer: Sync {
    fn name(&self) -> String;
    fn score(&self, target: &AdmissionRecord, candidate: &AdmissionRecord) -> Result<f64, String>;
}

pub struct EhrScorer {
    pub weights: SimilarityWeights,
}

impl PairScorer for EhrScorer {
    fn name(&self) -> String {
        "ExpRAG-EHR".into()
    }

    fn score(&self, t: &AdmissionRecord, c: &AdmissionRecord) -> Result<f64, String> {
        Ok(pair_similarity(t, c, &self.weights).tau)
    }
}

pub struct TextScorer<'a> {
    pub label: String,
    pub ranker: &'a TextRanker<'a>,
}

impl PairScorer for TextScorer<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn score(&self, t: &AdmissionRecord, c: &AdmissionRecord) -> Result<f64, String> {
        self.ranker.pair_score(&t.admission_key, &c.admission_key).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrelationPlan {
    pub n_targets: usize,
    pub n_random: usize,
    pub n_pool: usize,
    pub seed: u64,
}

impl Default for CorrelationPlan {
    fn default() -> Self {
        Self { n_targets: 100, n_random: 20, n_pool: 80, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCorrelation {
    pub target: String,
    pub ranker: String,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerCorrelation {
    pub ranker: String,
    pub mean_pearson: Option<f64>,
    pub mean_spearman: Option<f64>,
    pub pearson_excluded: usize,
    pub spearman_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub annotator: String,
    pub plan: CorrelationPlan,
    pub rankers: Vec<RankerCorrelation>,
    pub targets: Vec<TargetCorrelation>,
}

impl CorrelationReport {
    pub fn ranker(&self, name: &str) -> Option<&RankerCorrelation> {
        self.rankers.iter().find(|r| r.ranker == name)
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>10} {:>10} {:>9}", "Ranker", "Pearson", "Spearman", "Excluded");
        for r in &self.rankers {
            let _ = writeln!(
                out,
                "{:<20} {:>10} {:>10} {:>9}",
                r.ranker,
                fmt(r.mean_pearson),
                fmt(r.mean_spearman),
                r.pearson_excluded.max(r.spearman_excluded)
            );
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.rankers {
            writeln!(out, "{}", serde_json::to_string(r).map_err(std::io::Error::other)?)?;
        }
        for t in &self.targets {
            writeln!(out, "{}", serde_json::to_string(t).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    }
}

/// Candidate keys for one target: `n_random` uniform draws from the other
/// admissions, then `n_pool` from those sharing a code with the target in
/// any modality and not already drawn.
pub fn sample_candidates(
    cohort: &Cohort,
    index: &CodeIndex,
    target: &AdmissionRecord,
    plan: &CorrelationPlan,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, CorrelationError> {
    let keys = index.keys();
    let target_id = index.id_of(&target.admission_key).ok_or_else(|| CorrelationError::InsufficientCohort {
        available: cohort.len(),
        reason: format!("{} is not indexed", target.admission_key),
    })?;
    let others: Vec<usize> = (0..keys.len()).filter(|&i| i != target_id).collect();
    if others.len() < plan.n_random {
        return Err(CorrelationError::InsufficientCohort {
            available: keys.len(),
            reason: format!("{} uniform candidates requested", plan.n_random),
        });
    }
    let mut chosen: Vec<usize> = index::sample(rng, others.len(), plan.n_random).into_iter().map(|i| others[i]).collect();
    let pool: Vec<usize> = index
        .overlapping(target)
        .into_iter()
        .filter(|&i| i != target_id && !chosen.contains(&i))
        .collect();
    if pool.len() < plan.n_pool {
        return Err(CorrelationError::InsufficientPool {
            target: target.admission_key.clone(),
            available: pool.len(),
            needed: plan.n_pool,
        });
    }
    chosen.extend(index::sample(rng, pool.len(), plan.n_pool).into_iter().map(|i| pool[i]));
    Ok(chosen)
}

pub fn run_correlation_harness(
    cohort: &Cohort,
    index: &CodeIndex,
    scorers: &[&dyn PairScorer],
    annotator: &dyn Annotator,
    plan: CorrelationPlan,
) -> Result<CorrelationReport, CorrelationError> {
    let keys = index.keys();
    if keys.len() < plan.n_targets {
        return Err(CorrelationError::InsufficientCohort {
            available: keys.len(),
            reason: format!("{} targets requested", plan.n_targets),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut target_ids: Vec<usize> = (0..keys.len()).collect();
    target_ids.shuffle(&mut rng);
    target_ids.truncate(plan.n_targets);

    let uniform = SimilarityWeights::uniform();
    let mut targets = Vec::new();
    for &tid in &target_ids {
        let target = cohort.get(&keys[tid]).expect("indexed admission");
        let candidates = sample_candidates(cohort, index, target, &plan, &mut rng)?;
        let mut truth = Vec::with_capacity(candidates.len());
        let records: Vec<&AdmissionRecord> = candidates.iter().map(|&c| cohort.get(&keys[c]).expect("indexed admission")).collect();
        for c in &records {
            let parts = annotator
                .score(target, c, cohort)
                .map_err(|e| CorrelationError::Annotator(target.admission_key.clone(), c.admission_key.clone(), e))?;
            // The mean of the three ratings, computed like the uniform-weight ranker.
            truth.push(combined_similarity(parts, &uniform));
        }
        for scorer in scorers {
            let mut predicted = Vec::with_capacity(records.len());
            for c in &records {
                predicted.push(scorer.score(target, c).map_err(|e| CorrelationError::Scorer(scorer.name(), e))?);
            }
            targets.push(TargetCorrelation {
                target: target.admission_key.clone(),
                ranker: scorer.name(),
                pearson: pearson(&truth, &predicted).ok(),
                spearman: spearman(&truth, &predicted).ok(),
            });
        }
    }

    let rankers = scorers
        .iter()
        .map(|s| {
            let name = s.name();
            let mine: Vec<&TargetCorrelation> = targets.iter().filter(|t| t.ranker == name).collect();
            let avg = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            let p: Vec<f64> = mine.iter().filter_map(|t| t.pearson).collect();
            let sp: Vec<f64> = mine.iter().filter_map(|t| t.spearman).collect();
            RankerCorrelation {
                ranker: name,
                pearson_excluded: mine.len() - p.len(),
                spearman_excluded: mine.len() - sp.len(),
                mean_pearson: avg(p),
                mean_spearman: avg(sp),
            }
        })
        .collect();
    Ok(CorrelationReport { annotator: annotator.name(), plan, rankers, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranker::build_code_index;
    use crate::synth::{gen_cohort, SynthParams};

    fn cohort(n: usize) -> Cohort {
        gen_cohort(&SynthParams { seed: 8, n_subjects: n, ..SynthParams::default() }).unwrap().cohort
    }

    #[test]
    fn ratings_parse() {
        assert_eq!(parse_ratings("7, 3.5 and 10"), Some([0.7, 0.35, 1.0]));
        assert_eq!(parse_ratings("Diagnoses: 2. Medications: 4. Procedures: 0."), Some([0.2, 0.4, 0.0]));
        assert_eq!(parse_ratings("only 1 and 2"), None);
    }

    #[test]
    fn exact_annotator_matches_ehr_scorer() {
        let c = cohort(300);
        let index = build_code_index(&c);
        let ehr = EhrScorer { weights: SimilarityWeights::uniform() };
        let plan = CorrelationPlan { n_targets: 10, n_random: 5, n_pool: 10, seed: 1 };
        let report = run_correlation_harness(&c, &index, &[&ehr], &ExactEhrAnnotator, plan).unwrap();
        let row = report.ranker("ExpRAG-EHR").unwrap();
        assert!((row.mean_pearson.unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(row.pearson_excluded, 0);
    }

    #[test]
    fn constant_annotator_is_excluded() {
        let c = cohort(300);
        let index = build_code_index(&c);
        let ehr = EhrScorer { weights: SimilarityWeights::uniform() };
        let plan = CorrelationPlan { n_targets: 5, n_random: 5, n_pool: 5, seed: 1 };
        let report = run_correlation_harness(&c, &index, &[&ehr], &ConstantAnnotator(0.5), plan).unwrap();
        let row = report.ranker("ExpRAG-EHR").unwrap();
        assert_eq!(row.mean_pearson, None);
        assert_eq!(row.pearson_excluded, 5);
    }

    #[test]
    fn small_pools_are_reported() {
        let c = cohort(40);
        let index = build_code_index(&c);
        let ehr = EhrScorer { weights: SimilarityWeights::uniform() };
        let plan = CorrelationPlan { n_targets: 5, n_random: 20, n_pool: 80, seed: 1 };
        let err = run_correlation_harness(&c, &index, &[&ehr], &ExactEhrAnnotator, plan).unwrap_err();
        assert!(matches!(err, CorrelationError::InsufficientPool { .. }), "{err:?}");
        let plan = CorrelationPlan { n_targets: 100, ..plan };
        assert!(matches!(
            run_correlation_harness(&c, &index, &[&ehr], &ExactEhrAnnotator, plan),
            Err(CorrelationError::InsufficientCohort { .. })
        ));
    }
}
