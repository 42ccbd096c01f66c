//! Multiple-choice item generation: gold answers from the discharge plan,
//! distractors from the admission's own EHR codes or permuted instruction
//! key points.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{AdmissionRecord, CodeKind, Cohort};
use crate::segment::{
    assemble_background, extract_gold, list_items, segment_note, split_drug_line, HeaderTable, SegmentError,
    SegmentedNote, TaskKind,
};
pub use crate::text::normalize_text;
use crate::text::{stable_hash, SentenceSplitter};

#[derive(Debug, Error, PartialEq)]
pub enum QaGenError {
    #[error("admission has no note")]
    MissingNote,
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error("need {needed} distractors, only {available} available")]
    InsufficientDistractors { needed: usize, available: usize },
    #[error("instruction has {found} key points, need {min}")]
    TooFewKeyPoints { found: usize, min: usize },
    #[error("could not produce {0} distinct permuted distractors")]
    DegeneratePermutation(usize),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
}

impl QaGenError {
    /// Stable label used in the manifest's skip counts.
    pub fn reason(&self) -> &'static str {
        match self {
            QaGenError::MissingNote => "missing_note",
            QaGenError::Segment(SegmentError::EmptyBackground(_)) => "empty_background",
            QaGenError::Segment(SegmentError::MissingGoldSection(_)) => "missing_gold_section",
            QaGenError::Segment(SegmentError::InvalidHeaderTable(_)) => "invalid_header_table",
            QaGenError::InsufficientDistractors { .. } => "insufficient_distractors",
            QaGenError::TooFewKeyPoints { .. } => "too_few_key_points",
            QaGenError::DegeneratePermutation(_) => "degenerate_permutation",
            QaGenError::InvalidParams(_) => "invalid_params",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerMode {
    MultiSelect,
    SingleSelect,
}

impl AnswerMode {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::DiagnosisInference | TaskKind::MedicationInference => AnswerMode::MultiSelect,
            TaskKind::InstructionInference => AnswerMode::SingleSelect,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptionSource {
    Gold,
    EhrDistractor,
    PermutedDistractor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAOption {
    pub letter: char,
    pub text: String,
    pub source: OptionSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub question_id: String,
    pub admission_key: String,
    pub task: TaskKind,
    pub mode: AnswerMode,
    pub question: String,
    pub background: String,
    pub options: Vec<QAOption>,
    pub gold_letters: BTreeSet<char>,
}

impl QAItem {
    pub fn option(&self, letter: char) -> Option<&QAOption> {
        self.options.iter().find(|o| o.letter == letter)
    }

    pub fn gold_options(&self) -> impl Iterator<Item = &QAOption> {
        self.options.iter().filter(|o| o.source == OptionSource::Gold)
    }
}

pub fn question_text(task: TaskKind) -> &'static str {
    match task {
        TaskKind::DiagnosisInference => "Which diagnoses should be documented in the patient's discharge summary?",
        TaskKind::MedicationInference => "Which medications should be prescribed to the patient at discharge?",
        TaskKind::InstructionInference => "What is the best instruction for this patient?",
    }
}

pub fn question_id(admission_key: &str, task: TaskKind) -> String {
    format!("{admission_key}-{}", task.short_name())
}

pub fn letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub seed: u64,
    pub multi_options: usize,
    pub single_options: usize,
    pub min_bullets: usize,
    /// Items requested per task, in `TaskKind::ALL` order.
    pub counts: [usize; 3],
}

impl Default for GenParams {
    fn default() -> Self {
        Self { seed: 0, multi_options: 8, single_options: 4, min_bullets: 4, counts: [436, 444, 400] }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), QaGenError> {
        if self.multi_options < 2 || self.multi_options > 26 {
            return Err(QaGenError::InvalidParams(format!("multi_options {} outside 2..=26", self.multi_options)));
        }
        if self.single_options < 2 || self.single_options > 26 {
            return Err(QaGenError::InvalidParams(format!("single_options {} outside 2..=26", self.single_options)));
        }
        Ok(())
    }

    pub fn count(&self, task: TaskKind) -> usize {
        self.counts[task_slot(task)]
    }
}

fn task_slot(task: TaskKind) -> usize {
    TaskKind::ALL.iter().position(|t| *t == task).expect("task listed")
}

/// Per-item generator seeded by (seed, admission, task).
pub fn item_rng(seed: u64, admission_key: &str, task: TaskKind) -> ChaCha8Rng {
    let h = stable_hash(&[&seed.to_le_bytes(), admission_key.as_bytes(), task.short_name().as_bytes()]);
    ChaCha8Rng::seed_from_u64(h)
}

fn assemble(
    adm: &AdmissionRecord,
    task: TaskKind,
    background: String,
    mut options: Vec<(String, OptionSource)>,
    rng: &mut ChaCha8Rng,
) -> QAItem {
    options.shuffle(rng);
    let options: Vec<QAOption> = options
        .into_iter()
        .enumerate()
        .map(|(i, (text, source))| QAOption { letter: letter(i), text, source })
        .collect();
    let gold_letters = options.iter().filter(|o| o.source == OptionSource::Gold).map(|o| o.letter).collect();
    QAItem {
        question_id: question_id(&adm.admission_key, task),
        admission_key: adm.admission_key.clone(),
        task,
        mode: AnswerMode::for_task(task),
        question: question_text(task).to_string(),
        background,
        options,
        gold_letters,
    }
}

/// Distractor candidates for a multi-select task: descriptions of the
/// admission's codes of the matching kind, keyed by normalized text.
fn ehr_candidates(adm: &AdmissionRecord, task: TaskKind, cohort: &Cohort) -> BTreeMap<String, String> {
    let kind = match task {
        TaskKind::MedicationInference => CodeKind::Medication,
        _ => CodeKind::Diagnosis,
    };
    let mut out = BTreeMap::new();
    for code in adm.codes(kind) {
        let Some(desc) = cohort.description(kind, code) else { continue };
        let display = match kind {
            CodeKind::Medication => split_drug_line(desc).0,
            _ => desc.trim().to_string(),
        };
        let key = normalize_text(&display);
        if !key.is_empty() {
            out.entry(key).or_insert(display);
        }
    }
    out
}

/// Gold items plus EHR distractors. When the note lists more gold items
/// than fit beside one distractor, the first `n_options - 1` are kept.
pub fn gen_multiselect_item(
    adm: &AdmissionRecord,
    seg: &SegmentedNote,
    task: TaskKind,
    cohort: &Cohort,
    table: &HeaderTable,
    params: &GenParams,
    rng: &mut ChaCha8Rng,
) -> Result<QAItem, QaGenError> {
    if task == TaskKind::InstructionInference {
        return Err(QaGenError::InvalidParams("instruction items are single-select".into()));
    }
    let background = assemble_background(seg, task)?;
    let mut gold = extract_gold(seg, task, table)?;
    gold.truncate(params.multi_options - 1);
    let gold_keys: BTreeSet<&str> = gold.iter().map(|g| g.text.as_str()).collect();
    let mut pool: Vec<String> = ehr_candidates(adm, task, cohort)
        .into_iter()
        .filter(|(k, _)| !gold_keys.contains(k.as_str()))
        .map(|(_, display)| display)
        .collect();
    let needed = params.multi_options - gold.len();
    if pool.len() < needed {
        return Err(QaGenError::InsufficientDistractors { needed, available: pool.len() });
    }
    let (chosen, _) = pool.partial_shuffle(rng, needed);
    let mut options: Vec<(String, OptionSource)> = gold.into_iter().map(|g| (g.display, OptionSource::Gold)).collect();
    options.extend(chosen.iter().map(|d| (d.clone(), OptionSource::EhrDistractor)));
    Ok(assemble(adm, task, background, options, rng))
}

/// First sentence of each instruction bullet.
pub fn key_points(instruction: &str) -> Vec<String> {
    let splitter = SentenceSplitter::default();
    list_items(instruction)
        .iter()
        .filter_map(|item| splitter.split(item).first().map(|s| s.trim().to_string()))
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn summarize(points: &[String]) -> String {
    points.join(" ")
}

/// Inputs a permuter may draw substitutions from.
pub struct PermuteContext<'a> {
    pub admission: &'a AdmissionRecord,
    pub cohort: &'a Cohort,
}

/// Produces `n` incorrect key-point summaries for an instruction.
pub trait InstructionPermuter {
    fn distractors(
        &self,
        points: &[String],
        ctx: &PermuteContext<'_>,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<String>, QaGenError>;
}

/// Seeded rule-based perturbations: swap two key points' trailing
/// attributes, negate a directive, or substitute a medication/activity word.
#[derive(Debug, Clone, Default)]
pub struct RulePermuter;

const ACTIVITIES: [&str; 8] = ["walking", "driving", "swimming", "lifting", "bathing", "climbing", "running", "cycling"];

fn split_last_word(s: &str) -> Option<(&str, &str, &str)> {
    let trimmed = s.trim_end_matches(|c: char| !c.is_alphanumeric());
    let tail = &s[trimmed.len()..];
    let start = trimmed.rfind(char::is_whitespace).map(|i| i + 1)?;
    Some((&trimmed[..start], &trimmed[start..], tail))
}

fn swap_attributes(points: &[String], rng: &mut ChaCha8Rng) -> Option<Vec<String>> {
    if points.len() < 2 {
        return None;
    }
    let i = rng.gen_range(0..points.len());
    let mut j = rng.gen_range(0..points.len() - 1);
    if j >= i {
        j += 1;
    }
    let (pi, wi, ti) = split_last_word(&points[i])?;
    let (pj, wj, tj) = split_last_word(&points[j])?;
    if wi.eq_ignore_ascii_case(wj) {
        return None;
    }
    let mut out = points.to_vec();
    out[i] = format!("{pi}{wj}{ti}");
    out[j] = format!("{pj}{wi}{tj}");
    Some(out)
}

fn negate(points: &[String], rng: &mut ChaCha8Rng) -> Option<Vec<String>> {
    let i = rng.gen_range(0..points.len());
    let p = &points[i];
    let negated = if p.len() > 7 && p[..7].eq_ignore_ascii_case("do not ") {
        let rest = &p[7..];
        let mut chars = rest.chars();
        let first = chars.next()?;
        format!("{}{}", first.to_uppercase(), chars.as_str())
    } else {
        let mut chars = p.chars();
        let first = chars.next()?;
        format!("Do not {}{}", first.to_lowercase(), chars.as_str())
    };
    let mut out = points.to_vec();
    out[i] = negated;
    Some(out)
}

fn substitute(points: &[String], ctx: &PermuteContext<'_>, rng: &mut ChaCha8Rng) -> Option<Vec<String>> {
    let meds: Vec<String> = ctx
        .admission
        .codes(CodeKind::Medication)
        .iter()
        .filter_map(|c| ctx.cohort.description(CodeKind::Medication, c))
        .map(|d| split_drug_line(d).0.to_lowercase())
        .filter(|d| !d.is_empty())
        .collect();
    let i = rng.gen_range(0..points.len());
    let p = &points[i];
    let lower = p.to_lowercase();
    let mut out = points.to_vec();
    if let Some(act) = ACTIVITIES.iter().find(|a| lower.contains(*a)) {
        let others: Vec<&&str> = ACTIVITIES.iter().filter(|a| *a != act).collect();
        let repl = others.choose(rng)?;
        let at = lower.find(act)?;
        out[i] = format!("{}{}{}", &p[..at], repl, &p[at + act.len()..]);
        return Some(out);
    }
    if let Some(med) = meds.iter().find(|m| lower.contains(m.as_str())) {
        let others: Vec<&String> = meds.iter().filter(|m| *m != med).collect();
        let repl: String = match others.choose(rng) {
            Some(m) => (*m).clone(),
            None => ACTIVITIES.choose(rng)?.to_string(),
        };
        let at = lower.find(med.as_str())?;
        out[i] = format!("{}{}{}", &p[..at], repl, &p[at + med.len()..]);
        return Some(out);
    }
    let (prefix, _, tail) = split_last_word(p)?;
    let repl = if !meds.is_empty() && rng.gen_bool(0.5) {
        meds.choose(rng)?.clone()
    } else {
        ACTIVITIES.choose(rng)?.to_string()
    };
    out[i] = format!("{prefix}{repl}{tail}");
    Some(out)
}

impl InstructionPermuter for RulePermuter {
    fn distractors(
        &self,
        points: &[String],
        ctx: &PermuteContext<'_>,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<String>, QaGenError> {
        const ATTEMPTS: usize = 24;
        let mut seen: BTreeSet<String> = BTreeSet::from([normalize_text(&summarize(points))]);
        let mut out = Vec::with_capacity(n);
        for slot in 0..n {
            let mut produced = None;
            for attempt in 0..ATTEMPTS {
                let op = (slot + attempt) % 3;
                let candidate = match op {
                    0 => swap_attributes(points, rng),
                    1 => negate(points, rng),
                    _ => substitute(points, ctx, rng),
                };
                let Some(candidate) = candidate else { continue };
                let text = summarize(&candidate);
                if seen.insert(normalize_text(&text)) {
                    produced = Some(text);
                    break;
                }
            }
            out.push(produced.ok_or(QaGenError::DegeneratePermutation(n))?);
        }
        Ok(out)
    }
}

pub fn gen_instruction_item(
    adm: &AdmissionRecord,
    seg: &SegmentedNote,
    cohort: &Cohort,
    table: &HeaderTable,
    params: &GenParams,
    rng: &mut ChaCha8Rng,
    permuter: &dyn InstructionPermuter,
) -> Result<QAItem, QaGenError> {
    let task = TaskKind::InstructionInference;
    let background = assemble_background(seg, task)?;
    let gold = extract_gold(seg, task, table)?;
    let points = key_points(&gold[0].text);
    if points.len() < params.min_bullets {
        return Err(QaGenError::TooFewKeyPoints { found: points.len(), min: params.min_bullets });
    }
    let ctx = PermuteContext { admission: adm, cohort };
    let wrong = permuter.distractors(&points, &ctx, params.single_options - 1, rng)?;
    let mut options = vec![(summarize(&points), OptionSource::Gold)];
    options.extend(wrong.into_iter().map(|w| (w, OptionSource::PermutedDistractor)));
    Ok(assemble(adm, task, background, options, rng))
}

pub fn gen_item(
    adm: &AdmissionRecord,
    seg: &SegmentedNote,
    task: TaskKind,
    cohort: &Cohort,
    table: &HeaderTable,
    params: &GenParams,
    permuter: &dyn InstructionPermuter,
) -> Result<QAItem, QaGenError> {
    let mut rng = item_rng(params.seed, &adm.admission_key, task);
    match task {
        TaskKind::InstructionInference => gen_instruction_item(adm, seg, cohort, table, params, &mut rng, permuter),
        _ => gen_multiselect_item(adm, seg, task, cohort, table, params, &mut rng),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub requested: usize,
    pub generated: usize,
    pub skipped: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub tasks: BTreeMap<String, TaskManifest>,
}

impl DatasetManifest {
    pub fn total_generated(&self) -> usize {
        self.tasks.values().map(|t| t.generated).sum()
    }
}

/// Items per task over admissions in key order, until each task's count is
/// reached. Items are ordered by task, then admission key.
pub fn build_dataset(
    cohort: &Cohort,
    table: &HeaderTable,
    params: &GenParams,
    permuter: &dyn InstructionPermuter,
) -> Result<(Vec<QAItem>, DatasetManifest), QaGenError> {
    params.validate()?;
    let mut manifest = DatasetManifest { seed: params.seed, tasks: BTreeMap::new() };
    let mut items = Vec::new();
    let mut segmented: BTreeMap<&str, SegmentedNote> = BTreeMap::new();
    for task in TaskKind::ALL {
        let want = params.count(task);
        let entry = manifest.tasks.entry(task.short_name().to_string()).or_default();
        entry.requested = want;
        if want == 0 {
            continue;
        }
        for (key, adm) in &cohort.admissions {
            if entry.generated == want {
                break;
            }
            let Some(note) = adm.note_text() else {
                *entry.skipped.entry(QaGenError::MissingNote.reason().to_string()).or_default() += 1;
                continue;
            };
            let seg = segmented.entry(key.as_str()).or_insert_with(|| segment_note(key, note, table));
            match gen_item(adm, seg, task, cohort, table, params, permuter) {
                Ok(item) => {
                    items.push(item);
                    entry.generated += 1;
                }
                Err(e) => *entry.skipped.entry(e.reason().to_string()).or_default() += 1,
            }
        }
    }
    Ok((items, manifest))
}

pub fn write_dataset<W: Write>(items: &[QAItem], mut out: W) -> std::io::Result<()> {
    for item in items {
        writeln!(out, "{}", serde_json::to_string(item).map_err(std::io::Error::other)?)?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<QAItem>, serde_json::Error> {
    let mut items = Vec::new();
    for line in input.lines() {
        let line = line.map_err(serde_json::Error::io)?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line)?);
    }
    Ok(items)
}
