//! Command-line front end. Every stage reads and writes files under the
//! paths in `RunConfig`, so stages can be rerun or inspected in isolation.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cohort::{filter_admissions, read_archive, read_cohort_dir, write_archive, Cohort, CohortError, FilterBounds};
use crate::eval::correlation::{Annotator, ConstantAnnotator, EhrScorer, ExactEhrAnnotator, LlmAnnotator, PairScorer, TextScorer};
use crate::eval::harness::{retrieve_for, write_records, EvalRecord, HarnessOutput};
use crate::eval::{run_correlation_harness, run_qa_harness, run_topk_sweep, ContextMode, CorrelationPlan, HarnessConfig, MetricsReport, Rankers, WeightStrategy};
use crate::llm::{mock_provider, write_transcript, ChatProvider, OpenAiCompatible, OpenAiConfig, TranscriptRecord};
use crate::qagen::{build_dataset, read_dataset, write_dataset, GenParams, QAItem, RulePermuter};
use crate::ranker::{build_code_index, rank_top_k, read_index, write_index, write_rankings, CodeIndex, RankParams, SimilarityWeights};
use crate::retriever::{write_hits, RetrievalMethod};
use crate::segment::{segment_note, HeaderTable, TaskKind};
use crate::synth::{write_synth_cohort, NoteStyle, SynthParams};
use crate::text_ranker::{EmbeddingProvider, LexicalTfidf, RemoteEmbedding, RemoteEmbeddingConfig, TextRanker};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Failed,
    MissingInput,
    ConfigInvalid,
    ProviderFailure,
    PartialRun,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Failed => 1,
            ErrorKind::MissingInput => 2,
            ErrorKind::ConfigInvalid => 3,
            ErrorKind::ProviderFailure => 4,
            ErrorKind::PartialRun => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Failed => "failed",
            ErrorKind::MissingInput => "missing-input",
            ErrorKind::ConfigInvalid => "config-invalid",
            ErrorKind::ProviderFailure => "provider-failure",
            ErrorKind::PartialRun => "partial-run",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    fn config(message: impl fmt::Display) -> Self {
        Self::new(ErrorKind::ConfigInvalid, message.to_string())
    }

    fn failed(message: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Failed, message.to_string())
    }

    /// Single-line JSON for stderr.
    pub fn line(&self) -> String {
        serde_json::json!({ "error": self.kind.name(), "exit_code": self.kind.exit_code(), "message": self.message }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.name(), self.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::failed(e)
    }
}

impl From<CohortError> for CliError {
    fn from(e: CohortError) -> Self {
        match e {
            CohortError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::new(ErrorKind::MissingInput, io.to_string()),
            other => CliError::failed(other),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankerChoice {
    Ehr,
    TextLexical,
    TextRemote,
}

impl FromStr for RankerChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ehr" => Ok(RankerChoice::Ehr),
            "text-lexical" | "lexical" | "tfidf" => Ok(RankerChoice::TextLexical),
            "text-remote" | "remote" => Ok(RankerChoice::TextRemote),
            other => Err(format!("unknown ranker `{other}` (expected ehr, text-lexical or text-remote)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Code tables and notes (synth output, ingest input).
    pub cohort_dir: PathBuf,
    /// Filtered cohort written by `ingest`.
    pub archive: PathBuf,
    pub index: PathBuf,
    pub dataset: PathBuf,
    pub reports_dir: PathBuf,
    pub headers: Option<PathBuf>,
    pub embedding_cache: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            cohort_dir: "data/cohort".into(),
            archive: "data/cohort.archive".into(),
            index: "data/index.bin".into(),
            dataset: "data/dataset.jsonl".into(),
            reports_dir: "data/reports".into(),
            headers: None,
            embedding_cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    /// `mock:echo-gold`, `mock:fixed-B`, `mock:context-aware` or `openai`.
    pub spec: String,
    pub openai: OpenAiConfig,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self { spec: "mock:echo-gold".into(), openai: OpenAiConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Governs synth, genqa and correlate.
    pub seed: u64,
    pub ranker: RankerChoice,
    pub paths: PathsConfig,
    pub synth: SynthParams,
    pub filter: FilterBounds,
    pub qa: GenParams,
    pub harness: HarnessConfig,
    pub remote_embedding: RemoteEmbeddingConfig,
    pub provider: ProviderConfig,
    pub correlation: CorrelationPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            ranker: RankerChoice::Ehr,
            paths: PathsConfig::default(),
            synth: SynthParams::default(),
            filter: FilterBounds::default(),
            qa: GenParams::default(),
            harness: HarnessConfig::default(),
            remote_embedding: RemoteEmbeddingConfig::default(),
            provider: ProviderConfig::default(),
            correlation: CorrelationPlan::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new(ErrorKind::MissingInput, format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Parser)]
#[command(name = "exprag", version, about = "EHR-based experience retrieval for discharge question answering")]
pub struct Cli {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort (code tables and notes).
    Synth {
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        overlap: Option<f64>,
        #[arg(long)]
        style: Option<NoteStyle>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse code tables and notes, filter admissions, write the archive and index.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Show the sections found in notes.
    Segment {
        #[arg(long)]
        admission: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank the cohort against one admission.
    Rank {
        #[arg(long)]
        query: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        ranker: Option<RankerChoice>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieve passages for dataset questions.
    Retrieve {
        #[arg(long)]
        question: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        ranker: Option<RankerChoice>,
        #[arg(long)]
        retriever: Option<RetrievalMethod>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the question dataset.
    Genqa {
        /// Items per task: diagnosis,medication,instruction.
        #[arg(long)]
        counts: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer every question under each context mode.
    Ask {
        #[arg(long)]
        provider: Option<String>,
        /// Comma-separated: direct, text, ehr.
        #[arg(long)]
        modes: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        ranker: Option<RankerChoice>,
        #[arg(long)]
        retriever: Option<RetrievalMethod>,
        /// Also run a top-k sweep over these k values, e.g. 5,10,15,20,25.
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score answer records into a metrics report.
    Eval {
        #[arg(long, num_args = 1..)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlate ranker scores with an annotator.
    Correlate {
        /// exact-ehr, constant or llm.
        #[arg(long, default_value = "exact-ehr")]
        annotator: String,
        #[arg(long)]
        targets: Option<usize>,
        #[arg(long)]
        provider: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the reports found in the reports directory.
    Report {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ErrorKind::MissingInput.exit_code() } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.kind.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match cli.command {
        Command::Synth { subjects, clusters, overlap, style, out } => {
            let mut params = config.synth.clone();
            params.seed = config.seed;
            if let Some(n) = subjects {
                params.n_subjects = n;
            }
            if let Some(c) = clusters {
                params.n_clusters = c;
            }
            if let Some(o) = overlap {
                params.cluster_overlap = o;
            }
            if let Some(s) = style {
                params.note_style = s;
            }
            let dir = out.unwrap_or(config.paths.cohort_dir.clone());
            let synth = write_synth_cohort(&params, &dir).map_err(|e| match e {
                crate::synth::SynthError::InvalidParams(m) => CliError::config(m),
                other => CliError::failed(other),
            })?;
            println!("wrote {} admissions to {}", synth.cohort.len(), dir.display());
            Ok(())
        }
        Command::Ingest { input } => {
            let dir = input.unwrap_or(config.paths.cohort_dir.clone());
            let raw = read_cohort_dir(&dir)?;
            let cohort = filter_admissions(&raw, config.filter);
            let index = build_code_index(&cohort);
            create_parent(&config.paths.archive)?;
            let mut w = BufWriter::new(File::create(&config.paths.archive)?);
            write_archive(&cohort, &mut w)?;
            w.flush()?;
            create_parent(&config.paths.index)?;
            let mut w = BufWriter::new(File::create(&config.paths.index)?);
            write_index(&index, &mut w).map_err(CliError::failed)?;
            w.flush()?;
            println!("ingested {} admissions, kept {} after filtering", raw.len(), cohort.len());
            Ok(())
        }
        Command::Segment { admission, out } => {
            let cohort = load_cohort(&config)?;
            let table = load_headers(&config)?;
            let keys: Vec<&String> = match &admission {
                Some(k) => vec![cohort.admissions.get_key_value(k).map(|(k, _)| k).ok_or_else(|| unknown_admission(k))?],
                None => cohort.admissions.keys().collect(),
            };
            let mut w = output(out.as_deref())?;
            for key in keys {
                let Some(note) = cohort.get(key).and_then(|r| r.note_text()) else { continue };
                let seg = segment_note(key, note, &table);
                let sections: Vec<serde_json::Value> = seg
                    .spans()
                    .iter()
                    .map(|s| serde_json::json!({ "kind": s.kind, "header": s.header, "start": s.start, "end": s.end }))
                    .collect();
                let line = serde_json::json!({ "admission_key": key, "residual_bytes": seg.residual().len(), "sections": sections });
                writeln!(w, "{line}")?;
            }
            w.flush()?;
            Ok(())
        }
        Command::Rank { query, k, weights, ranker, out } => {
            apply_overrides(&mut config, k, weights.as_deref(), ranker, None)?;
            let cohort = load_cohort(&config)?;
            let record = cohort.get(&query).ok_or_else(|| unknown_admission(&query))?;
            let mut w = output(out.as_deref())?;
            match config.ranker {
                RankerChoice::Ehr => {
                    let index = load_index(&config, &cohort)?;
                    let params = RankParams {
                        k: config.harness.k,
                        weights: config.harness.strategy.weights(TaskKind::DiagnosisInference),
                        exclude_same_subject: config.harness.exclude_same_subject,
                    };
                    let ranked = rank_top_k(&index, &cohort, &query, &params).map_err(CliError::config)?;
                    write_rankings(&query, &ranked, &mut w)?;
                }
                choice => {
                    let provider = embedding_provider(&config, choice, &cohort);
                    let text = build_text_ranker(&config, &cohort, provider.as_ref())?;
                    let note = record.note_text().ok_or_else(|| CliError::new(ErrorKind::MissingInput, format!("{query} has no note")))?;
                    let subject = config.harness.exclude_same_subject.then_some(record.subject_key.as_str());
                    let ranked = text.rank(note, Some(&query), subject, config.harness.k).map_err(|e| CliError::new(ErrorKind::ProviderFailure, e.to_string()))?;
                    for (i, (key, score)) in ranked.iter().enumerate() {
                        let line = serde_json::json!({ "query_key": query, "rank": i + 1, "candidate_key": key, "score": score });
                        writeln!(w, "{line}")?;
                    }
                }
            }
            w.flush()?;
            Ok(())
        }
        Command::Retrieve { question, k, weights, ranker, retriever, out } => {
            apply_overrides(&mut config, k, weights.as_deref(), ranker, retriever)?;
            let cohort = load_cohort(&config)?;
            let index = load_index(&config, &cohort)?;
            let dataset = load_dataset(&config)?;
            let items: Vec<&QAItem> = match &question {
                Some(q) => vec![dataset
                    .iter()
                    .find(|i| &i.question_id == q)
                    .ok_or_else(|| CliError::new(ErrorKind::MissingInput, format!("question `{q}` is not in the dataset")))?],
                None => dataset.iter().collect(),
            };
            let provider = embedding_provider(&config, config.ranker, &cohort);
            let text = match config.ranker {
                RankerChoice::Ehr => None,
                _ => Some(build_text_ranker(&config, &cohort, provider.as_ref())?),
            };
            let rankers = Rankers { cohort: &cohort, index: &index, text: text.as_ref() };
            let mode = if config.ranker == RankerChoice::Ehr { ContextMode::ExpRagEhr } else { ContextMode::TextRanker };
            let mut w = output(out.as_deref())?;
            for item in items {
                let hits = retrieve_for(item, mode, &rankers, &config.harness).map_err(CliError::failed)?;
                write_hits(&item.question_id, &hits, &mut w)?;
            }
            w.flush()?;
            Ok(())
        }
        Command::Genqa { counts, out } => {
            let cohort = load_cohort(&config)?;
            let table = load_headers(&config)?;
            let mut params = config.qa.clone();
            params.seed = config.seed;
            if let Some(c) = counts {
                params.counts = parse_counts(&c)?;
            }
            let (items, manifest) = build_dataset(&cohort, &table, &params, &RulePermuter).map_err(CliError::config)?;
            let path = out.unwrap_or(config.paths.dataset.clone());
            create_parent(&path)?;
            let mut w = BufWriter::new(File::create(&path)?);
            write_dataset(&items, &mut w)?;
            w.flush()?;
            std::fs::write(manifest_path(&path), serde_json::to_string_pretty(&manifest).map_err(CliError::failed)? + "\n")?;
            println!("wrote {} items to {}", items.len(), path.display());
            Ok(())
        }
        Command::Ask { provider, modes, k, weights, ranker, retriever, sweep, out } => {
            apply_overrides(&mut config, k, weights.as_deref(), ranker, retriever)?;
            if let Some(spec) = provider {
                config.provider.spec = spec;
            }
            if let Some(m) = modes {
                config.harness.modes = parse_modes(&m)?;
            } else if let Some(r) = ranker {
                let ranked = if r == RankerChoice::Ehr { ContextMode::ExpRagEhr } else { ContextMode::TextRanker };
                config.harness.modes = vec![ContextMode::DirectAsk, ranked];
            }
            let reports_dir = out.unwrap_or(config.paths.reports_dir.clone());
            run_ask(&config, &reports_dir, sweep.as_deref())
        }
        Command::Eval { records, out } => {
            let dir = out.unwrap_or(config.paths.reports_dir.clone());
            let files = if records.is_empty() { list_reports(&dir, "records-")? } else { records };
            if files.is_empty() {
                return Err(CliError::new(ErrorKind::MissingInput, format!("no records-*.jsonl in {}", dir.display())));
            }
            let mut reports = Vec::new();
            for f in &files {
                let label = label_from_file(f, "records-");
                reports.push(MetricsReport::from_records(&label, &read_records(f)?));
            }
            let report = MetricsReport::merge(reports);
            std::fs::create_dir_all(&dir)?;
            let mut w = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
            report.write_jsonl(&mut w)?;
            w.flush()?;
            let mut table = report.to_table();
            if let Ok(gain) = report.mean_improvement(ContextMode::ExpRagEhr, ContextMode::TextRanker, &TaskKind::ALL) {
                table.push_str(&format!("Mean relative improvement of ExpRAG-EHR over Text ranker: {gain:.1}%\n"));
            }
            std::fs::write(dir.join("metrics.txt"), &table)?;
            print!("{table}");
            Ok(())
        }
        Command::Correlate { annotator, targets, provider, out } => {
            let cohort = load_cohort(&config)?;
            let index = load_index(&config, &cohort)?;
            let mut plan = config.correlation;
            plan.seed = config.seed;
            if let Some(t) = targets {
                plan.n_targets = t;
            }
            let weights = config.harness.strategy.weights(TaskKind::DiagnosisInference);
            let ehr = EhrScorer { weights };
            let choice = if config.ranker == RankerChoice::TextRemote { RankerChoice::TextRemote } else { RankerChoice::TextLexical };
            let embedder = embedding_provider(&config, choice, &cohort);
            let text = build_text_ranker(&config, &cohort, embedder.as_ref())?;
            let label = if choice == RankerChoice::TextRemote { "text-remote" } else { "text-lexical" };
            let text_scorer = TextScorer { label: label.into(), ranker: &text };
            let scorers: [&dyn PairScorer; 2] = [&ehr, &text_scorer];
            if let Some(spec) = provider {
                config.provider.spec = spec;
            }
            let chat = make_provider(&config.provider)?;
            let annot: Box<dyn Annotator + '_> = match annotator.as_str() {
                "exact-ehr" | "exact" => Box::new(ExactEhrAnnotator),
                "constant" => Box::new(ConstantAnnotator(0.5)),
                "llm" => Box::new(LlmAnnotator { provider: chat.as_ref(), model: request_model(&config), retry: config.harness.retry }),
                other => return Err(CliError::config(format!("unknown annotator `{other}`"))),
            };
            let report = run_correlation_harness(&cohort, &index, &scorers, annot.as_ref(), plan).map_err(|e| match e {
                crate::eval::correlation::CorrelationError::Annotator(..) if annotator == "llm" => CliError::new(ErrorKind::ProviderFailure, e.to_string()),
                other => CliError::failed(other),
            })?;
            let dir = out.unwrap_or(config.paths.reports_dir.clone());
            std::fs::create_dir_all(&dir)?;
            let mut w = BufWriter::new(File::create(dir.join("correlation.jsonl"))?);
            report.write_jsonl(&mut w)?;
            w.flush()?;
            let table = report.to_table();
            std::fs::write(dir.join("correlation.txt"), &table)?;
            print!("{table}");
            Ok(())
        }
        Command::Report { dir } => {
            let dir = dir.unwrap_or(config.paths.reports_dir.clone());
            let mut found = false;
            for name in ["metrics.txt", "correlation.txt"] {
                if let Ok(text) = std::fs::read_to_string(dir.join(name)) {
                    println!("== {name}\n{text}");
                    found = true;
                }
            }
            for f in list_reports(&dir, "sweep-")? {
                let file = File::open(&f)?;
                let mut rows = Vec::new();
                for line in BufReader::new(file).lines() {
                    let line = line?;
                    if !line.trim().is_empty() {
                        rows.push(serde_json::from_str(&line).map_err(CliError::failed)?);
                    }
                }
                let report = crate::eval::harness::SweepReport { rows };
                println!("== {}\n{}", f.file_name().unwrap_or_default().to_string_lossy(), report.to_table());
                found = true;
            }
            if !found {
                return Err(CliError::new(ErrorKind::MissingInput, format!("no reports in {}", dir.display())));
            }
            Ok(())
        }
    }
}

fn run_ask(config: &RunConfig, reports_dir: &Path, sweep: Option<&str>) -> CliResult<()> {
    let cohort = load_cohort(config)?;
    let index = load_index(config, &cohort)?;
    let dataset = load_dataset(config)?;
    let provider = make_provider(&config.provider)?;
    let embedder = embedding_provider(config, config.ranker, &cohort);
    let text = if config.harness.modes.contains(&ContextMode::TextRanker) {
        Some(build_text_ranker(config, &cohort, embedder.as_ref())?)
    } else {
        None
    };
    let rankers = Rankers { cohort: &cohort, index: &index, text: text.as_ref() };
    let mut harness = config.harness.clone();
    harness.model = request_model(config);
    let output = run_qa_harness(&dataset, &rankers, &harness, provider.as_ref()).map_err(CliError::failed)?;
    let label = sanitize(&config.provider.spec);
    let is_mock = config.provider.spec.starts_with("mock:");
    std::fs::create_dir_all(reports_dir)?;
    write_ask_outputs(&output, reports_dir, &label, is_mock)?;
    print!("{}", output.report.to_table());

    if let Some(ks) = sweep {
        let ks = parse_list::<usize>(ks, "sweep")?;
        let report = run_topk_sweep(&dataset, &rankers, &harness, provider.as_ref(), &ks).map_err(CliError::failed)?;
        let mut w = BufWriter::new(File::create(reports_dir.join(format!("sweep-{label}.jsonl")))?);
        report.write_jsonl(&mut w)?;
        w.flush()?;
        print!("{}", report.to_table());
    }

    let total = output.records.len();
    if total > 0 && output.provider_failures == total {
        return Err(CliError::new(ErrorKind::ProviderFailure, format!("all {total} provider calls failed")));
    }
    if output.provider_failures > 0 {
        let failed: BTreeSet<&str> = output.transcript.iter().filter(|t| t.error.is_some()).map(|t| t.question_id.as_str()).collect();
        let manifest = serde_json::json!({ "total": total, "failed": output.provider_failures, "failed_questions": failed });
        let path = reports_dir.join(format!("ask-manifest-{label}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).map_err(CliError::failed)? + "\n")?;
        return Err(CliError::new(
            ErrorKind::PartialRun,
            format!("{} of {total} provider calls failed; see {}", output.provider_failures, path.display()),
        ));
    }
    Ok(())
}

fn write_ask_outputs(output: &HarnessOutput, dir: &Path, label: &str, is_mock: bool) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(dir.join(format!("records-{label}.jsonl")))?);
    write_records(&output.records, &mut w)?;
    w.flush()?;
    // Mock runs are offline and rewritten byte-identically; real providers
    // get a fresh timestamped transcript per run.
    let (name, transcript): (String, Vec<TranscriptRecord>) = if is_mock {
        let zeroed = output.transcript.iter().cloned().map(|t| TranscriptRecord { latency_ms: 0, ..t }).collect();
        (format!("transcript-{label}.jsonl"), zeroed)
    } else {
        let stamp = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        (format!("transcript-{label}-{stamp}.jsonl"), output.transcript.clone())
    };
    let mut w = BufWriter::new(File::create(dir.join(name))?);
    write_transcript(&transcript, &mut w)?;
    w.flush()?;
    Ok(())
}

fn request_model(config: &RunConfig) -> String {
    if config.provider.spec == "openai" {
        config.provider.openai.model.clone()
    } else {
        config.provider.spec.clone()
    }
}

fn make_provider(config: &ProviderConfig) -> CliResult<Box<dyn ChatProvider>> {
    if config.spec == "openai" {
        return Ok(Box::new(OpenAiCompatible::new(config.openai.clone())));
    }
    mock_provider(&config.spec).ok_or_else(|| CliError::config(format!("unknown provider `{}`", config.spec)))
}

fn embedding_provider(config: &RunConfig, choice: RankerChoice, cohort: &Cohort) -> Box<dyn EmbeddingProvider> {
    match choice {
        RankerChoice::TextRemote => Box::new(RemoteEmbedding::new(config.remote_embedding.clone())),
        _ => Box::new(LexicalTfidf::fit_cohort(cohort)),
    }
}

fn build_text_ranker<'p>(config: &RunConfig, cohort: &Cohort, provider: &'p dyn EmbeddingProvider) -> CliResult<TextRanker<'p>> {
    let built = match &config.paths.embedding_cache {
        Some(dir) => TextRanker::build_cached(cohort, provider, dir),
        None => TextRanker::build(cohort, provider),
    };
    built.map_err(|e| CliError::new(ErrorKind::ProviderFailure, e.to_string()))
}

fn apply_overrides(
    config: &mut RunConfig,
    k: Option<usize>,
    weights: Option<&str>,
    ranker: Option<RankerChoice>,
    retriever: Option<RetrievalMethod>,
) -> CliResult<()> {
    if let Some(k) = k {
        if k == 0 {
            return Err(CliError::config("k must be at least 1"));
        }
        config.harness.k = k;
    }
    if let Some(w) = weights {
        config.harness.strategy = match WeightStrategy::from_str(w) {
            Ok(s) => s,
            Err(_) => WeightStrategy::Custom(SimilarityWeights::parse(w).map_err(CliError::config)?),
        };
    }
    if let Some(r) = ranker {
        config.ranker = r;
    }
    if let Some(m) = retriever {
        config.harness.retriever.method = m;
    }
    Ok(())
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> CliResult<Vec<T>>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| CliError::config(format!("{what}: `{p}`: {e}"))))
        .collect()
}

pub fn parse_counts(s: &str) -> CliResult<[usize; 3]> {
    let v = parse_list::<usize>(s, "counts")?;
    <[usize; 3]>::try_from(v).map_err(|_| CliError::config("counts needs three values: diagnosis,medication,instruction"))
}

fn parse_modes(s: &str) -> CliResult<Vec<ContextMode>> {
    parse_list::<ContextMode>(s, "modes")
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '-' }).collect()
}

fn label_from_file(path: &Path, prefix: &str) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.strip_prefix(prefix).unwrap_or(&stem).to_string()
}

fn list_reports(dir: &Path, prefix: &str) -> CliResult<Vec<PathBuf>> {
    let Ok(entries) = std::fs::read_dir(dir) else { return Ok(Vec::new()) };
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name.starts_with(prefix) && name.ends_with(".jsonl")
        })
        .collect();
    out.sort();
    Ok(out)
}

fn read_records(path: &Path) -> CliResult<Vec<EvalRecord>> {
    let file = File::open(path).map_err(|e| CliError::new(ErrorKind::MissingInput, format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| CliError::failed(format!("{}: {e}", path.display())))?);
        }
    }
    Ok(out)
}

fn manifest_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("manifest.json")
}

fn create_parent(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            create_parent(p)?;
            Box::new(BufWriter::new(File::create(p)?))
        }
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn unknown_admission(key: &str) -> CliError {
    CliError::new(ErrorKind::MissingInput, format!("admission `{key}` is not in the cohort"))
}

fn open_input(path: &Path, produced_by: &str) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::new(ErrorKind::MissingInput, format!("{}: {e} (run `{produced_by}` first)", path.display())))
}

fn load_cohort(config: &RunConfig) -> CliResult<Cohort> {
    Ok(read_archive(open_input(&config.paths.archive, "ingest")?)?)
}

fn load_index(config: &RunConfig, cohort: &Cohort) -> CliResult<CodeIndex> {
    let index = read_index(open_input(&config.paths.index, "ingest")?).map_err(CliError::failed)?;
    index
        .check_consistency(cohort)
        .map_err(|e| CliError::config(format!("{e}; rerun `ingest`")))?;
    Ok(index)
}

fn load_dataset(config: &RunConfig) -> CliResult<Vec<QAItem>> {
    read_dataset(open_input(&config.paths.dataset, "genqa")?).map_err(CliError::failed)
}

fn load_headers(config: &RunConfig) -> CliResult<HeaderTable> {
    match &config.paths.headers {
        None => Ok(HeaderTable::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::new(ErrorKind::MissingInput, format!("{}: {e}", p.display())))?;
            HeaderTable::from_toml(&text).map_err(CliError::config)
        }
    }
}
