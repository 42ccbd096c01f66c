//! QA evaluation: for each question and context mode, rank, retrieve,
//! prompt, parse and score.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{exact_match, exact_match_accuracy, macro_f1, mean_relative_improvement, option_f1, MetricError};
use crate::cohort::Cohort;
use crate::llm::{complete, parse_answer, render_prompt, ChatProvider, ChatRequest, LlmError, ParsedAnswer, Probe, PromptTemplate, RetryPolicy, TranscriptRecord};
use crate::parallel::bounded_map;
use crate::qagen::{AnswerMode, QAItem};
use crate::ranker::{rank_top_k, CodeIndex, RankError, RankParams, SimilarityWeights};
use crate::retriever::{assemble_context, retrieve, Report, RetrievalHit, RetrieveError, RetrieverParams};
use crate::segment::TaskKind;
use crate::text_ranker::{TextRankError, TextRanker};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("question {question_id}: admission `{admission_key}` is not in the cohort")]
    UnknownAdmission { question_id: String, admission_key: String },
    #[error("context mode {0} needs a text ranker")]
    MissingTextRanker(ContextMode),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    TextRank(#[from] TextRankError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error(transparent)]
    Prompt(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    DirectAsk,
    TextRanker,
    ExpRagEhr,
}

impl ContextMode {
    pub const ALL: [ContextMode; 3] = [ContextMode::DirectAsk, ContextMode::TextRanker, ContextMode::ExpRagEhr];

    pub fn label(self) -> &'static str {
        match self {
            ContextMode::DirectAsk => "Direct-Ask",
            ContextMode::TextRanker => "Text ranker",
            ContextMode::ExpRagEhr => "ExpRAG-EHR",
        }
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ContextMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "direct" | "direct-ask" => Ok(ContextMode::DirectAsk),
            "text" | "text-ranker" => Ok(ContextMode::TextRanker),
            "ehr" | "exprag" | "exprag-ehr" | "exp-rag-ehr" => Ok(ContextMode::ExpRagEhr),
            other => Err(format!("unknown context mode `{other}`")),
        }
    }
}

/// How the modality weights are chosen for each task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightStrategy {
    Uniform,
    TaskFocused,
    Complementary,
    Custom(SimilarityWeights),
}

impl WeightStrategy {
    pub fn weights(self, task: TaskKind) -> SimilarityWeights {
        match self {
            WeightStrategy::Uniform => SimilarityWeights::uniform(),
            WeightStrategy::TaskFocused => SimilarityWeights::task_focused(task),
            WeightStrategy::Complementary => SimilarityWeights::complementary(task),
            WeightStrategy::Custom(w) => w,
        }
    }
}

impl FromStr for WeightStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "uniform" => Ok(WeightStrategy::Uniform),
            "task-focused" | "focused" => Ok(WeightStrategy::TaskFocused),
            "complementary" => Ok(WeightStrategy::Complementary),
            other => SimilarityWeights::parse(other).map(WeightStrategy::Custom).map_err(|e| e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    /// Label used in reports.
    pub model: String,
    pub modes: Vec<ContextMode>,
    pub k: usize,
    pub strategy: WeightStrategy,
    pub exclude_same_subject: bool,
    pub retriever: RetrieverParams,
    pub template: PromptTemplate,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            model: "mock".into(),
            modes: ContextMode::ALL.to_vec(),
            k: 15,
            strategy: WeightStrategy::Uniform,
            exclude_same_subject: true,
            retriever: RetrieverParams::default(),
            template: PromptTemplate::default(),
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            temperature: 0.0,
            max_tokens: 64,
        }
    }
}

/// What the harness ranks against.
pub struct Rankers<'a> {
    pub cohort: &'a Cohort,
    pub index: &'a CodeIndex,
    pub text: Option<&'a TextRanker<'a>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub task: TaskKind,
    pub context_mode: ContextMode,
    pub gold_letters: BTreeSet<char>,
    pub parsed: ParsedAnswer,
}

impl EvalRecord {
    pub fn correct(&self) -> bool {
        exact_match(self.parsed.letters(), &self.gold_letters)
    }

    pub fn f1(&self) -> f64 {
        self.parsed.letters().map_or(0.0, |s| option_f1(s, &self.gold_letters))
    }
}

/// Retrieval query: the question followed by every option text.
pub fn retrieval_query(item: &QAItem) -> String {
    let mut q = item.question.clone();
    for o in &item.options {
        q.push('\n');
        q.push_str(&o.text);
    }
    q
}

/// Text-ranker query: question, options, then the background.
pub fn text_ranker_query(item: &QAItem) -> String {
    format!("{}\n{}", retrieval_query(item), item.background)
}

/// Keys of the admissions whose reports feed the context for `item`.
pub fn select_reports(item: &QAItem, mode: ContextMode, rankers: &Rankers<'_>, config: &HarnessConfig) -> Result<Vec<String>, HarnessError> {
    let record = rankers.cohort.get(&item.admission_key).ok_or_else(|| HarnessError::UnknownAdmission {
        question_id: item.question_id.clone(),
        admission_key: item.admission_key.clone(),
    })?;
    match mode {
        ContextMode::DirectAsk => Ok(Vec::new()),
        ContextMode::ExpRagEhr => {
            let params = RankParams {
                k: config.k,
                weights: config.strategy.weights(item.task),
                exclude_same_subject: config.exclude_same_subject,
            };
            Ok(rank_top_k(rankers.index, rankers.cohort, &item.admission_key, &params)?
                .into_iter()
                .map(|r| r.admission_key)
                .collect())
        }
        ContextMode::TextRanker => {
            let text = rankers.text.ok_or(HarnessError::MissingTextRanker(mode))?;
            let subject = config.exclude_same_subject.then_some(record.subject_key.as_str());
            Ok(text
                .rank(&text_ranker_query(item), Some(&item.admission_key), subject, config.k)?
                .into_iter()
                .map(|(k, _)| k)
                .collect())
        }
    }
}

/// Retrieval hits for `item` under `mode`; empty for Direct-Ask.
pub fn retrieve_for(item: &QAItem, mode: ContextMode, rankers: &Rankers<'_>, config: &HarnessConfig) -> Result<Vec<RetrievalHit>, HarnessError> {
    let keys = select_reports(item, mode, rankers, config)?;
    let reports: Vec<Report<'_>> = keys
        .iter()
        .filter_map(|k| rankers.cohort.get(k))
        .filter_map(|r| r.note_text().map(|text| Report { admission_key: &r.admission_key, text }))
        .collect();
    Ok(retrieve(&reports, &retrieval_query(item), &config.retriever)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsCell {
    pub model: String,
    pub task: TaskKind,
    pub context_mode: ContextMode,
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub invalid: usize,
    pub invalid_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cells: Vec<MetricsCell>,
}

impl MetricsReport {
    pub fn from_records(model: &str, records: &[EvalRecord]) -> Self {
        let mut groups: BTreeMap<(TaskKind, ContextMode), Vec<&EvalRecord>> = BTreeMap::new();
        for r in records {
            groups.entry((r.task, r.context_mode)).or_default().push(r);
        }
        let cells = groups
            .into_iter()
            .map(|((task, mode), rs)| {
                let pairs = || rs.iter().map(|r| (r.parsed.letters(), &r.gold_letters));
                let invalid = rs.iter().filter(|r| !r.parsed.is_valid()).count();
                MetricsCell {
                    model: model.to_string(),
                    task,
                    context_mode: mode,
                    n: rs.len(),
                    accuracy: exact_match_accuracy(pairs()).expect("non-empty group"),
                    macro_f1: macro_f1(pairs()).expect("non-empty group"),
                    invalid,
                    invalid_rate: invalid as f64 / rs.len() as f64,
                }
            })
            .collect();
        Self { cells }
    }

    pub fn merge(reports: impl IntoIterator<Item = MetricsReport>) -> Self {
        Self { cells: reports.into_iter().flat_map(|r| r.cells).collect() }
    }

    pub fn cell(&self, task: TaskKind, mode: ContextMode) -> Option<&MetricsCell> {
        self.cells.iter().find(|c| c.task == task && c.context_mode == mode)
    }

    /// Mean relative accuracy improvement of `new` over `base`, averaged
    /// over every model that has both cells for each of `tasks`.
    pub fn mean_improvement(&self, new: ContextMode, base: ContextMode, tasks: &[TaskKind]) -> Result<f64, MetricError> {
        let mut pairs = Vec::new();
        for c in self.cells.iter().filter(|c| c.context_mode == new && tasks.contains(&c.task)) {
            if let Some(b) = self.cells.iter().find(|b| b.model == c.model && b.task == c.task && b.context_mode == base) {
                pairs.push((c.accuracy, b.accuracy));
            }
        }
        mean_relative_improvement(&pairs)
    }

    /// Rows are model × context mode; accuracy per task, F1 for the
    /// multi-select tasks.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(&str, ContextMode)> = Vec::new();
        for c in &self.cells {
            if !rows.contains(&(c.model.as_str(), c.context_mode)) {
                rows.push((c.model.as_str(), c.context_mode));
            }
        }
        rows.sort_by(|a, b| a.0.cmp(b.0).then(a.1.cmp(&b.1)));
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(16);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<w$} {:<12} | {:>8} {:>6} | {:>8} {:>6} | {:>8} | {:>7}",
            "Model", "Context", "Diag Acc", "F1", "Med Acc", "F1", "Ins Acc", "Invalid"
        );
        let _ = writeln!(out, "{}", "-".repeat(74 + w));
        for (model, mode) in rows {
            let get = |t| self.cells.iter().find(|c| c.model == model && c.context_mode == mode && c.task == t);
            let acc = |t| get(t).map_or("-".to_string(), |c| format!("{:.1}", c.accuracy));
            let f1 = |t| get(t).map_or("-".to_string(), |c| format!("{:.3}", c.macro_f1));
            let invalid: usize = self.cells.iter().filter(|c| c.model == model && c.context_mode == mode).map(|c| c.invalid).sum();
            let _ = writeln!(
                out,
                "{:<w$} {:<12} | {:>8} {:>6} | {:>8} {:>6} | {:>8} | {:>7}",
                model,
                mode.label(),
                acc(TaskKind::DiagnosisInference),
                f1(TaskKind::DiagnosisInference),
                acc(TaskKind::MedicationInference),
                f1(TaskKind::MedicationInference),
                acc(TaskKind::InstructionInference),
                invalid
            );
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for c in &self.cells {
            writeln!(out, "{}", serde_json::to_string(c).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessOutput {
    pub records: Vec<EvalRecord>,
    pub transcript: Vec<TranscriptRecord>,
    pub report: MetricsReport,
    /// Calls whose provider error was recorded as an invalid answer.
    pub provider_failures: usize,
}

pub const TRANSPORT_INVALID: &str = "transport";

pub fn write_records<W: Write>(records: &[EvalRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).map_err(std::io::Error::other)?)?;
    }
    Ok(())
}

/// Runs every question under every configured mode. Contexts are built up
/// front; provider calls run with at most `max_in_flight` in flight and
/// results keep dataset order.
pub fn run_qa_harness(
    dataset: &[QAItem],
    rankers: &Rankers<'_>,
    config: &HarnessConfig,
    provider: &dyn ChatProvider,
) -> Result<HarnessOutput, HarnessError> {
    struct Job<'d> {
        item: &'d QAItem,
        mode: ContextMode,
        context: String,
        request: ChatRequest,
    }
    let mut jobs = Vec::with_capacity(dataset.len() * config.modes.len());
    for item in dataset {
        for &mode in &config.modes {
            let hits = retrieve_for(item, mode, rankers, config)?;
            let context = assemble_context(&hits, config.retriever.context_budget);
            let mut request = ChatRequest::new(&config.model, render_prompt(item, &context, &config.template)?);
            request.temperature = config.temperature;
            request.max_tokens = config.max_tokens;
            jobs.push(Job { item, mode, context, request });
        }
    }
    let results = bounded_map(&jobs, config.max_in_flight, |_, job| {
        let n_options = job.item.options.len();
        let hash = job.request.prompt_hash();
        let outcome = complete(job.request.clone(), provider, Probe::question(job.item, &job.context), config.retry);
        let (parsed, transcript) = match outcome {
            Ok(ex) => {
                let parsed = parse_answer(&ex.response.text, job.item.mode, n_options);
                if let ParsedAnswer::Invalid(reason) = &parsed {
                    log::debug!("{} [{}]: {reason}: {:?}", job.item.question_id, job.mode, ex.response.text);
                }
                (
                    parsed,
                    TranscriptRecord {
                        question_id: job.item.question_id.clone(),
                        context_mode: Some(format!("{:?}", job.mode)),
                        prompt_hash: hash,
                        response: Some(ex.response.text),
                        error: None,
                        attempts: ex.attempts,
                        latency_ms: ex.latency_ms,
                    },
                )
            }
            Err(fail) => (
                ParsedAnswer::Invalid(TRANSPORT_INVALID.into()),
                TranscriptRecord {
                    question_id: job.item.question_id.clone(),
                    context_mode: Some(format!("{:?}", job.mode)),
                    prompt_hash: hash,
                    response: None,
                    error: Some(fail.error.to_string()),
                    attempts: fail.attempts,
                    latency_ms: fail.latency_ms,
                },
            ),
        };
        let record = EvalRecord {
            question_id: job.item.question_id.clone(),
            task: job.item.task,
            context_mode: job.mode,
            gold_letters: job.item.gold_letters.clone(),
            parsed,
        };
        (record, transcript)
    });
    let provider_failures = results.iter().filter(|(_, t)| t.error.is_some()).count();
    let (records, transcript): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let report = MetricsReport::from_records(&config.model, &records);
    Ok(HarnessOutput { records, transcript, report, provider_failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub task: TaskKind,
    pub context_mode: ContextMode,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn accuracy(&self, k: usize, task: TaskKind, mode: ContextMode) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k && r.task == task && r.context_mode == mode).map(|r| r.accuracy)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>4} {:<12} {:<12} {:>8} {:>6}", "k", "Task", "Context", "Acc", "F1");
        for r in &self.rows {
            let _ = writeln!(out, "{:>4} {:<12} {:<12} {:>8.1} {:>6.3}", r.k, r.task.short_name(), r.context_mode.label(), r.accuracy, r.macro_f1);
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.rows {
            writeln!(out, "{}", serde_json::to_string(r).map_err(std::io::Error::other)?)?;
        }
        Ok(())
    }
}

/// Reruns the ranker modes of `config` for each k. Direct-Ask is skipped
/// since it does not depend on k.
pub fn run_topk_sweep(
    dataset: &[QAItem],
    rankers: &Rankers<'_>,
    config: &HarnessConfig,
    provider: &dyn ChatProvider,
    ks: &[usize],
) -> Result<SweepReport, HarnessError> {
    let modes: Vec<ContextMode> = config.modes.iter().copied().filter(|m| *m != ContextMode::DirectAsk).collect();
    let mut rows = Vec::new();
    for &k in ks {
        let cfg = HarnessConfig { k, modes: modes.clone(), ..config.clone() };
        let out = run_qa_harness(dataset, rankers, &cfg, provider)?;
        rows.extend(out.report.cells.into_iter().map(|c| SweepRow {
            k,
            task: c.task,
            context_mode: c.context_mode,
            accuracy: c.accuracy,
            macro_f1: c.macro_f1,
        }));
    }
    Ok(SweepReport { rows })
}

/// Which answer mode a task uses; re-exported for report consumers.
pub fn mode_of(task: TaskKind) -> AnswerMode {
    AnswerMode::for_task(task)
}
