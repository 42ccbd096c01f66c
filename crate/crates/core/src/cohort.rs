//! EHR cohort data model: code tables, discharge notes, admission records and
//! the admission filter applied before question generation and ranking.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The three structured modalities an admission is compared on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    Diagnosis,
    Medication,
    Procedure,
}

impl CodeKind {
    pub const ALL: [CodeKind; 3] = [CodeKind::Diagnosis, CodeKind::Medication, CodeKind::Procedure];

    pub fn as_str(self) -> &'static str {
        match self {
            CodeKind::Diagnosis => "diagnosis",
            CodeKind::Medication => "medication",
            CodeKind::Procedure => "procedure",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// ICD-10 for diagnoses and procedures, NDC for medications.
    pub fn is_icd(self) -> bool {
        !matches!(self, CodeKind::Medication)
    }

    /// Conventional file name of the table holding this kind.
    pub fn table_file_name(self) -> &'static str {
        match self {
            CodeKind::Diagnosis => "diagnoses.csv",
            CodeKind::Medication => "prescriptions.csv",
            CodeKind::Procedure => "procedures.csv",
        }
    }

    fn default_description_column(self) -> &'static str {
        if self.is_icd() {
            "long_title"
        } else {
            "drug"
        }
    }
}

impl fmt::Display for CodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "diagnosis" | "diag" => Ok(CodeKind::Diagnosis),
            "medication" | "med" => Ok(CodeKind::Medication),
            "procedure" | "proc" => Ok(CodeKind::Procedure),
            other => Err(format!("unknown code kind `{other}`")),
        }
    }
}

/// Trim and uppercase; ICD codes additionally lose their embedded dots.
/// NDC codes are otherwise kept as recorded.
pub fn normalize_code(raw: &str, kind: CodeKind) -> String {
    let upper = raw.trim().to_uppercase();
    if kind.is_icd() {
        upper.chars().filter(|c| *c != '.').collect()
    } else {
        upper
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeEntry {
    pub subject_key: String,
    pub admission_key: String,
    pub kind: CodeKind,
    pub code: String,
    pub description: Option<String>,
}

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("malformed row at line {line}: expected {expected} fields, found {found}")]
    MalformedRow { line: u64, expected: usize, found: usize },
    #[error("malformed note record at line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("admission {admission} is recorded under subjects {first} and {second}")]
    ConflictingSubject { admission: String, first: String, second: String },
    #[error("not a cohort archive: {0}")]
    BadArchive(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CohortError> = std::result::Result<T, E>;

/// Column layout of a code table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableFormat {
    pub delimiter: u8,
    pub subject_column: String,
    pub admission_column: String,
    pub code_column: String,
    /// Read when present in the header; never required.
    pub description_column: Option<String>,
}

impl TableFormat {
    pub fn for_kind(kind: CodeKind) -> Self {
        Self {
            delimiter: b',',
            subject_column: "subject_id".into(),
            admission_column: "hadm_id".into(),
            code_column: "code".into(),
            description_column: Some(kind.default_description_column().into()),
        }
    }
}

/// Entries of one code table plus the number of rows dropped for an empty code.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedTable {
    pub entries: Vec<CodeEntry>,
    pub skipped_empty: usize,
}

pub fn parse_code_table<R: Read>(input: R, kind: CodeKind, format: &TableFormat) -> Result<ParsedTable> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .flexible(true)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CohortError::MissingColumn(name.to_string()))
    };
    let subject_idx = column(&format.subject_column)?;
    let admission_idx = column(&format.admission_column)?;
    let code_idx = column(&format.code_column)?;
    let description_idx = format
        .description_column
        .as_deref()
        .and_then(|name| headers.iter().position(|h| h.trim() == name));

    let mut parsed = ParsedTable::default();
    for record in reader.records() {
        let record = record?;
        if record.len() != headers.len() {
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            return Err(CohortError::MalformedRow { line, expected: headers.len(), found: record.len() });
        }
        let code = normalize_code(&record[code_idx], kind);
        if code.is_empty() {
            parsed.skipped_empty += 1;
            continue;
        }
        let description = description_idx
            .map(|i| record[i].trim().to_string())
            .filter(|d| !d.is_empty());
        parsed.entries.push(CodeEntry {
            subject_key: record[subject_idx].trim().to_string(),
            admission_key: record[admission_idx].trim().to_string(),
            kind,
            code,
            description,
        });
    }
    if parsed.skipped_empty > 0 {
        log::warn!("{kind} table: skipped {} rows with an empty code", parsed.skipped_empty);
    }
    Ok(parsed)
}

/// One discharge note as read from the line-delimited note file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub admission_key: String,
    pub subject_key: String,
    pub text: String,
}

#[derive(Deserialize)]
struct RawNote {
    hadm_id: serde_json::Value,
    subject_id: serde_json::Value,
    text: String,
}

fn key_from_json(value: &serde_json::Value) -> Option<String> {
    match value {
        serde_json::Value::String(s) => Some(s.trim().to_string()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Parses one JSON object per line with `hadm_id`, `subject_id` and `text`.
/// Blank lines are ignored; ids may be strings or integers.
pub fn parse_notes<R: BufRead>(input: R) -> Result<Vec<NoteRecord>> {
    let mut notes = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawNote = serde_json::from_str(&line)
            .map_err(|e| CohortError::MalformedLine { line: line_no, reason: e.to_string() })?;
        let bad_key = |field: &str| CohortError::MalformedLine {
            line: line_no,
            reason: format!("`{field}` must be a string or integer"),
        };
        notes.push(NoteRecord {
            admission_key: key_from_json(&raw.hadm_id).ok_or_else(|| bad_key("hadm_id"))?,
            subject_key: key_from_json(&raw.subject_id).ok_or_else(|| bad_key("subject_id"))?,
            text: raw.text,
        });
    }
    Ok(notes)
}

/// One hospital encounter; the unit every ranker and dataset item refers to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissionRecord {
    pub subject_key: String,
    pub admission_key: String,
    pub diag_codes: BTreeSet<String>,
    pub med_codes: BTreeSet<String>,
    pub proc_codes: BTreeSet<String>,
    pub note: Option<String>,
}

impl AdmissionRecord {
    pub fn new(subject_key: impl Into<String>, admission_key: impl Into<String>) -> Self {
        Self {
            subject_key: subject_key.into(),
            admission_key: admission_key.into(),
            diag_codes: BTreeSet::new(),
            med_codes: BTreeSet::new(),
            proc_codes: BTreeSet::new(),
            note: None,
        }
    }

    pub fn codes(&self, kind: CodeKind) -> &BTreeSet<String> {
        match kind {
            CodeKind::Diagnosis => &self.diag_codes,
            CodeKind::Medication => &self.med_codes,
            CodeKind::Procedure => &self.proc_codes,
        }
    }

    pub fn codes_mut(&mut self, kind: CodeKind) -> &mut BTreeSet<String> {
        match kind {
            CodeKind::Diagnosis => &mut self.diag_codes,
            CodeKind::Medication => &mut self.med_codes,
            CodeKind::Procedure => &mut self.proc_codes,
        }
    }

    pub fn note_text(&self) -> Option<&str> {
        self.note.as_deref().filter(|n| !n.is_empty())
    }
}

/// All admissions keyed by admission key, plus the code descriptions seen
/// during ingestion (used as option text for generated questions).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cohort {
    pub admissions: BTreeMap<String, AdmissionRecord>,
    #[serde(with = "description_map")]
    pub descriptions: BTreeMap<(CodeKind, String), String>,
}

mod description_map {
    use super::CodeKind;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        kind: CodeKind,
        code: String,
        description: String,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<(CodeKind, String), String>, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|((kind, code), description)| Entry {
                kind: *kind,
                code: code.clone(),
                description: description.clone(),
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(CodeKind, String), String>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries.into_iter().map(|e| ((e.kind, e.code), e.description)).collect())
    }
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.admissions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.admissions.is_empty()
    }

    pub fn get(&self, admission_key: &str) -> Option<&AdmissionRecord> {
        self.admissions.get(admission_key)
    }

    pub fn description(&self, kind: CodeKind, code: &str) -> Option<&str> {
        self.descriptions.get(&(kind, code.to_string())).map(String::as_str)
    }

    pub fn insert(&mut self, record: AdmissionRecord) {
        self.admissions.insert(record.admission_key.clone(), record);
    }
}

fn attach<'a>(
    admissions: &'a mut BTreeMap<String, AdmissionRecord>,
    subject: &str,
    admission: &str,
) -> Result<&'a mut AdmissionRecord> {
    let record = admissions
        .entry(admission.to_string())
        .or_insert_with(|| AdmissionRecord::new(subject, admission));
    if record.subject_key != subject {
        return Err(CohortError::ConflictingSubject {
            admission: admission.to_string(),
            first: record.subject_key.clone(),
            second: subject.to_string(),
        });
    }
    Ok(record)
}

/// Groups code entries and notes by admission key.
pub fn build_cohort(
    diag: &[CodeEntry],
    med: &[CodeEntry],
    proc: &[CodeEntry],
    notes: &[NoteRecord],
) -> Result<Cohort> {
    let mut cohort = Cohort::default();
    for entry in diag.iter().chain(med).chain(proc) {
        let record = attach(&mut cohort.admissions, &entry.subject_key, &entry.admission_key)?;
        record.codes_mut(entry.kind).insert(entry.code.clone());
        if let Some(description) = &entry.description {
            cohort
                .descriptions
                .entry((entry.kind, entry.code.clone()))
                .or_insert_with(|| description.clone());
        }
    }
    for note in notes {
        let record = attach(&mut cohort.admissions, &note.subject_key, &note.admission_key)?;
        record.note = Some(note.text.clone());
    }
    Ok(cohort)
}

/// Inclusive bounds on each code-set size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterBounds {
    pub min_entries: usize,
    pub max_entries: usize,
}

impl Default for FilterBounds {
    fn default() -> Self {
        Self { min_entries: 3, max_entries: 40 }
    }
}

impl FilterBounds {
    pub fn admits(&self, record: &AdmissionRecord) -> bool {
        record.note_text().is_some()
            && CodeKind::ALL.iter().all(|&kind| {
                let n = record.codes(kind).len();
                n >= self.min_entries && n <= self.max_entries
            })
    }
}

/// Keeps admissions with a non-empty note and every code-set size within bounds.
pub fn filter_admissions(cohort: &Cohort, bounds: FilterBounds) -> Cohort {
    let admissions: BTreeMap<_, _> = cohort
        .admissions
        .iter()
        .filter(|(_, r)| bounds.admits(r))
        .map(|(k, r)| (k.clone(), r.clone()))
        .collect();
    let used: BTreeSet<(CodeKind, &String)> = admissions
        .values()
        .flat_map(|r| CodeKind::ALL.into_iter().flat_map(move |k| r.codes(k).iter().map(move |c| (k, c))))
        .collect();
    let descriptions = cohort
        .descriptions
        .iter()
        .filter(|((kind, code), _)| used.contains(&(*kind, code)))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Cohort { admissions, descriptions }
}

/// Writes one code table in the same layout `parse_code_table` reads by default.
pub fn write_code_table<W: Write>(cohort: &Cohort, kind: CodeKind, out: W) -> Result<()> {
    let format = TableFormat::for_kind(kind);
    let description_column = format.description_column.clone().unwrap_or_default();
    let mut writer = csv::WriterBuilder::new().delimiter(format.delimiter).from_writer(out);
    writer.write_record([
        format.subject_column.as_str(),
        format.admission_column.as_str(),
        format.code_column.as_str(),
        description_column.as_str(),
    ])?;
    for record in cohort.admissions.values() {
        for code in record.codes(kind) {
            let description = cohort.description(kind, code).unwrap_or("");
            writer.write_record([
                record.subject_key.as_str(),
                record.admission_key.as_str(),
                code.as_str(),
                description,
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct NoteOut<'a> {
    hadm_id: &'a str,
    subject_id: &'a str,
    text: &'a str,
}

pub fn write_notes<W: Write>(cohort: &Cohort, mut out: W) -> Result<()> {
    for record in cohort.admissions.values() {
        if let Some(text) = &record.note {
            let line = serde_json::to_string(&NoteOut {
                hadm_id: &record.admission_key,
                subject_id: &record.subject_key,
                text,
            })?;
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

const ARCHIVE_MAGIC: &str = "EXPRAG-COHORT";
pub const ARCHIVE_VERSION: u32 = 1;

/// Archive layout: one header line `EXPRAG-COHORT <version> <admission count>`
/// followed by the cohort as a single JSON document.
pub fn write_archive<W: Write>(cohort: &Cohort, mut out: W) -> Result<()> {
    writeln!(out, "{ARCHIVE_MAGIC} {ARCHIVE_VERSION} {}", cohort.len())?;
    serde_json::to_writer(&mut out, cohort)?;
    writeln!(out)?;
    Ok(())
}

pub fn read_archive<R: BufRead>(mut input: R) -> Result<Cohort> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(ARCHIVE_MAGIC) {
        return Err(CohortError::BadArchive("missing magic header".into()));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CohortError::BadArchive("missing version".into()))?;
    if version != ARCHIVE_VERSION {
        return Err(CohortError::BadArchive(format!("unsupported version {version}")));
    }
    let count: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CohortError::BadArchive("missing admission count".into()))?;
    let cohort: Cohort = serde_json::from_reader(input)?;
    if cohort.len() != count {
        return Err(CohortError::BadArchive(format!(
            "header declares {count} admissions, body holds {}",
            cohort.len()
        )));
    }
    Ok(cohort)
}

pub const NOTES_FILE_NAME: &str = "notes.jsonl";

/// Writes the three code tables and the notes file into `dir`.
pub fn write_cohort_dir(cohort: &Cohort, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for kind in CodeKind::ALL {
        let file = std::fs::File::create(dir.join(kind.table_file_name()))?;
        write_code_table(cohort, kind, BufWriter::new(file))?;
    }
    let mut notes = BufWriter::new(std::fs::File::create(dir.join(NOTES_FILE_NAME))?);
    write_notes(cohort, &mut notes)?;
    notes.flush()?;
    Ok(())
}

/// Reads a directory laid out by `write_cohort_dir` with default table formats.
pub fn read_cohort_dir(dir: &Path) -> Result<Cohort> {
    let mut tables = Vec::new();
    for kind in CodeKind::ALL {
        let file = std::fs::File::open(dir.join(kind.table_file_name()))?;
        tables.push(parse_code_table(BufReader::new(file), kind, &TableFormat::for_kind(kind))?.entries);
    }
    let notes = parse_notes(BufReader::new(std::fs::File::open(dir.join(NOTES_FILE_NAME))?))?;
    build_cohort(&tables[0], &tables[1], &tables[2], &notes)
}
