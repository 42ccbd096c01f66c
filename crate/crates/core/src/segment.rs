//! Discharge-note segmentation into seven canonical sections and three
//! phases, leakage-free background assembly, and gold-answer extraction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{normalize_text, strip_list_marker, SentenceSplitter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    PatientDemography,
    PresentingCondition,
    ClinicalAssessment,
    TreatmentPlan,
    InHospitalProgress,
    DischargeSummary,
    PostDischargeInstructions,
}

impl SectionKind {
    pub const ALL: [SectionKind; 7] = [
        SectionKind::PatientDemography,
        SectionKind::PresentingCondition,
        SectionKind::ClinicalAssessment,
        SectionKind::TreatmentPlan,
        SectionKind::InHospitalProgress,
        SectionKind::DischargeSummary,
        SectionKind::PostDischargeInstructions,
    ];

    pub fn phase(self) -> Phase {
        use SectionKind::*;
        match self {
            PatientDemography | PresentingCondition | ClinicalAssessment => Phase::ClinicalProfile,
            TreatmentPlan | InHospitalProgress => Phase::InHospital,
            DischargeSummary | PostDischargeInstructions => Phase::DischargePlan,
        }
    }

    /// Canonical header text.
    pub fn title(self) -> &'static str {
        use SectionKind::*;
        match self {
            PatientDemography => "Patient Demography",
            PresentingCondition => "Presenting Condition",
            ClinicalAssessment => "Clinical Assessment",
            TreatmentPlan => "Treatment Plan",
            InHospitalProgress => "In-Hospital Progress",
            DischargeSummary => "Discharge Summary",
            PostDischargeInstructions => "Post-Discharge Instructions",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ClinicalProfile,
    InHospital,
    DischargePlan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    DiagnosisInference,
    MedicationInference,
    InstructionInference,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::DiagnosisInference,
        TaskKind::MedicationInference,
        TaskKind::InstructionInference,
    ];

    /// Phases revealed as background for this task.
    pub fn background_phases(self) -> &'static [Phase] {
        match self {
            TaskKind::DiagnosisInference => &[Phase::ClinicalProfile],
            TaskKind::MedicationInference | TaskKind::InstructionInference => {
                &[Phase::ClinicalProfile, Phase::InHospital]
            }
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            TaskKind::DiagnosisInference => "diagnosis",
            TaskKind::MedicationInference => "medication",
            TaskKind::InstructionInference => "instruction",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "diagnosis" | "diagnosis_inference" => Ok(TaskKind::DiagnosisInference),
            "medication" | "medication_inference" => Ok(TaskKind::MedicationInference),
            "instruction" | "instruction_inference" => Ok(TaskKind::InstructionInference),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentError {
    #[error("no {0} background section present")]
    EmptyBackground(TaskKind),
    #[error("no usable {0} gold section")]
    MissingGoldSection(TaskKind),
    #[error("invalid header table: {0}")]
    InvalidHeaderTable(String),
}

/// Header synonyms per section kind plus the sub-headers inside the
/// discharge plan that hold the diagnosis and medication gold lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderTable {
    pub sections: BTreeMap<SectionKind, Vec<String>>,
    pub diagnosis_headers: Vec<String>,
    pub medication_headers: Vec<String>,
}

impl Default for HeaderTable {
    fn default() -> Self {
        use SectionKind::*;
        let list = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let diagnosis_headers = list(&["Discharge Diagnosis", "Discharge Diagnoses"]);
        let medication_headers = list(&["Discharge Medications", "Discharge Medication"]);
        let mut discharge = list(&[
            "Discharge Summary",
            "Discharge Condition",
            "Discharge Disposition",
        ]);
        discharge.extend(diagnosis_headers.iter().cloned());
        discharge.extend(medication_headers.iter().cloned());
        let sections = BTreeMap::from([
            (PatientDemography, list(&["Patient Demography", "Demographics", "Patient Information", "Name", "Sex", "Allergies"])),
            (
                PresentingCondition,
                list(&["Presenting Condition", "Chief Complaint", "History of Present Illness", "Past Medical History", "Social History", "Family History"]),
            ),
            (ClinicalAssessment, list(&["Clinical Assessment", "Physical Exam", "Pertinent Results"])),
            (TreatmentPlan, list(&["Treatment Plan", "Major Surgical or Invasive Procedure"])),
            (InHospitalProgress, list(&["In-Hospital Progress", "Brief Hospital Course", "Hospital Course"])),
            (DischargeSummary, discharge),
            (
                PostDischargeInstructions,
                list(&["Post-Discharge Instructions", "Discharge Instructions", "Followup Instructions"]),
            ),
        ]);
        Self { sections, diagnosis_headers, medication_headers }
    }
}

impl HeaderTable {
    pub fn from_toml(text: &str) -> Result<Self, SegmentError> {
        let table: HeaderTable = toml::from_str(text).map_err(|e| SegmentError::InvalidHeaderTable(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("header table serializes")
    }

    fn validate(&self) -> Result<(), SegmentError> {
        let discharge = self.sections.get(&SectionKind::DischargeSummary).cloned().unwrap_or_default();
        for gold in self.diagnosis_headers.iter().chain(&self.medication_headers) {
            if !discharge.iter().any(|h| h.eq_ignore_ascii_case(gold)) {
                return Err(SegmentError::InvalidHeaderTable(format!(
                    "gold header `{gold}` is not a discharge_summary header"
                )));
            }
        }
        Ok(())
    }

    /// Synonyms ordered longest first so "Discharge Diagnoses" wins over shorter prefixes.
    fn matchers(&self) -> Vec<(&str, SectionKind)> {
        let mut all: Vec<(&str, SectionKind)> = self
            .sections
            .iter()
            .flat_map(|(kind, names)| names.iter().map(move |n| (n.as_str(), *kind)))
            .filter(|(n, _)| !n.trim().is_empty())
            .collect();
        all.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(b.0)));
        all
    }
}

/// One recognized section: `[start, end)` covers the header line and body,
/// `body_start` points just past the header token and its colon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSpan {
    pub kind: SectionKind,
    pub header: String,
    pub start: usize,
    pub body_start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedNote {
    pub admission_key: String,
    text: String,
    /// Unmatched leading text is `text[..residual_end]`.
    residual_end: usize,
    spans: Vec<SectionSpan>,
}

impl SegmentedNote {
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn residual(&self) -> &str {
        &self.text[..self.residual_end]
    }

    /// Recognized sections in document order.
    pub fn spans(&self) -> &[SectionSpan] {
        &self.spans
    }

    pub fn span_text(&self, span: &SectionSpan) -> &str {
        &self.text[span.start..span.end]
    }

    pub fn span_body(&self, span: &SectionSpan) -> &str {
        &self.text[span.body_start..span.end]
    }

    /// All text of one section kind (every occurrence, document order).
    pub fn section(&self, kind: SectionKind) -> Option<String> {
        let parts: Vec<&str> = self
            .spans
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| self.span_text(s))
            .collect();
        (!parts.is_empty()).then(|| parts.concat())
    }

    pub fn kinds_present(&self) -> BTreeSet<SectionKind> {
        self.spans.iter().map(|s| s.kind).collect()
    }

    /// Residual followed by every span in document order.
    pub fn reconstruct(&self) -> String {
        let mut out = String::with_capacity(self.text.len());
        out.push_str(self.residual());
        for span in &self.spans {
            out.push_str(self.span_text(span));
        }
        out
    }

    fn spans_with_header<'a>(&'a self, headers: &'a [String]) -> impl Iterator<Item = &'a SectionSpan> + 'a {
        self.spans
            .iter()
            .filter(move |s| headers.iter().any(|h| h.eq_ignore_ascii_case(&s.header)))
    }
}

/// Length of the header match at the start of `line` (after indentation),
/// including a trailing colon when present.
fn match_header(line: &str, header: &str) -> Option<usize> {
    let indent = line.len() - line.trim_start_matches([' ', '\t']).len();
    let rest = &line[indent..];
    if rest.len() < header.len() || !rest.is_char_boundary(header.len()) {
        return None;
    }
    if !rest[..header.len()].eq_ignore_ascii_case(header) {
        return None;
    }
    let after = &rest[header.len()..];
    let after_trimmed = after.trim_start_matches([' ', '\t']);
    if let Some(stripped) = after_trimmed.strip_prefix(':') {
        Some(line.len() - stripped.len())
    } else if after.trim().is_empty() {
        Some(line.len())
    } else {
        None
    }
}

pub fn segment_note(admission_key: &str, text: &str, table: &HeaderTable) -> SegmentedNote {
    let matchers = table.matchers();
    let mut spans: Vec<SectionSpan> = Vec::new();
    let mut line_start = 0;
    for line in text.split_inclusive('\n') {
        let content = line.strip_suffix('\n').unwrap_or(line);
        let content = content.strip_suffix('\r').unwrap_or(content);
        let hit = matchers
            .iter()
            .find_map(|(name, kind)| match_header(content, name).map(|len| (*name, *kind, len)));
        if let Some((name, kind, len)) = hit {
            if let Some(prev) = spans.last_mut() {
                prev.end = line_start;
            }
            spans.push(SectionSpan {
                kind,
                header: name.to_string(),
                start: line_start,
                body_start: line_start + len,
                end: text.len(),
            });
        }
        line_start += line.len();
    }
    let residual_end = spans.first().map_or(text.len(), |s| s.start);
    SegmentedNote {
        admission_key: admission_key.to_string(),
        text: text.to_string(),
        residual_end,
        spans,
    }
}

/// Background for a task: the sections of its revealed phases, ordered by
/// section kind and then by position. Discharge-plan sections never appear.
pub fn assemble_background(seg: &SegmentedNote, task: TaskKind) -> Result<String, SegmentError> {
    let phases = task.background_phases();
    let mut out = String::new();
    for kind in SectionKind::ALL.into_iter().filter(|k| phases.contains(&k.phase())) {
        for span in seg.spans.iter().filter(|s| s.kind == kind) {
            out.push_str(seg.span_text(span));
            if !out.ends_with('\n') {
                out.push('\n');
            }
        }
    }
    if out.trim().is_empty() {
        return Err(SegmentError::EmptyBackground(task));
    }
    Ok(out)
}

/// One gold answer: `text` is the matching key (normalized for diagnosis and
/// medication items, verbatim for instructions), `display` the option text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldItem {
    pub text: String,
    pub display: String,
    pub detail: Option<String>,
}

/// List items of a section body: lines opened by `1.`, `-` or `*` (with
/// continuation lines folded in), or sentences when no marker is present.
pub fn list_items(body: &str) -> Vec<String> {
    let has_markers = body.lines().any(|l| strip_list_marker(l).is_some_and(|r| !r.is_empty()));
    if !has_markers {
        return SentenceSplitter::default()
            .split(body)
            .into_iter()
            .map(str::to_string)
            .collect();
    }
    let mut items: Vec<String> = Vec::new();
    let mut open = false;
    for line in body.lines() {
        match strip_list_marker(line) {
            Some(rest) if !rest.trim().is_empty() => {
                items.push(rest.trim().to_string());
                open = true;
            }
            _ if line.trim().is_empty() => open = false,
            _ if open => {
                let last = items.last_mut().expect("open item");
                last.push(' ');
                last.push_str(line.trim());
            }
            _ => {}
        }
    }
    items
}

/// Splits a medication line into the drug name (leading words up to the
/// first word containing a digit) and the remaining dose text.
pub fn split_drug_line(line: &str) -> (String, Option<String>) {
    let words: Vec<&str> = line.split_whitespace().collect();
    let name_len = words
        .iter()
        .position(|w| w.chars().any(|c| c.is_ascii_digit()))
        .unwrap_or(words.len())
        .max(1)
        .min(words.len());
    let name = words[..name_len].join(" ");
    let name = name.trim_end_matches([',', ';', ':']).to_string();
    let dose = words[name_len..].join(" ");
    (name, (!dose.is_empty()).then_some(dose))
}

pub fn extract_gold(seg: &SegmentedNote, task: TaskKind, table: &HeaderTable) -> Result<Vec<GoldItem>, SegmentError> {
    let missing = || SegmentError::MissingGoldSection(task);
    let items = match task {
        TaskKind::DiagnosisInference => seg
            .spans_with_header(&table.diagnosis_headers)
            .filter(|s| s.kind == SectionKind::DischargeSummary)
            .flat_map(|s| list_items(seg.span_body(s)))
            .map(|item| GoldItem {
                text: normalize_text(&item),
                display: item.trim_end_matches([',', ';', '.']).to_string(),
                detail: None,
            })
            .filter(|g| !g.text.is_empty())
            .collect::<Vec<_>>(),
        TaskKind::MedicationInference => seg
            .spans_with_header(&table.medication_headers)
            .filter(|s| s.kind == SectionKind::DischargeSummary)
            .flat_map(|s| list_items(seg.span_body(s)))
            .map(|item| {
                let (name, dose) = split_drug_line(&item);
                GoldItem { text: normalize_text(&name), display: name, detail: dose }
            })
            .filter(|g| !g.text.is_empty())
            .collect(),
        TaskKind::InstructionInference => {
            let bodies: Vec<&str> = seg
                .spans
                .iter()
                .filter(|s| s.kind == SectionKind::PostDischargeInstructions)
                .map(|s| seg.span_body(s).trim())
                .filter(|b| !b.is_empty())
                .collect();
            if bodies.is_empty() {
                Vec::new()
            } else {
                let text = bodies.join("\n");
                vec![GoldItem { text: text.clone(), display: text, detail: None }]
            }
        }
    };
    // Repeated list entries collapse to their first occurrence.
    let mut seen = BTreeSet::new();
    let items: Vec<GoldItem> = items.into_iter().filter(|g| seen.insert(g.text.clone())).collect();
    if items.is_empty() {
        return Err(missing());
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const FULL_NOTE: &str = "\
Hospital: General
Patient Demography:
Age 64, female.
Presenting Condition:
Chest pain for two days.
Clinical Assessment:
Troponin mildly elevated.
Treatment Plan:
Start heparin drip.
In-Hospital Progress:
Pain resolved by day 2.
Discharge Diagnosis:
1. Hypertension
2. Type 2 diabetes
Discharge Medications:
1. Metformin 500 mg PO BID
2. Aspirin EC 81 mg daily
Post-Discharge Instructions:
- Walk daily.
- Check sugars.
";

    fn seg(text: &str) -> SegmentedNote {
        segment_note("H1", text, &HeaderTable::default())
    }

    #[test]
    fn phases_partition_sections_3_2_2() {
        let count = |p| SectionKind::ALL.iter().filter(|k| k.phase() == p).count();
        assert_eq!(count(Phase::ClinicalProfile), 3);
        assert_eq!(count(Phase::InHospital), 2);
        assert_eq!(count(Phase::DischargePlan), 2);
    }

    #[test]
    fn full_note_recovers_all_sections() {
        let s = seg(FULL_NOTE);
        assert_eq!(s.kinds_present().len(), 7);
        assert_eq!(s.residual(), "Hospital: General\n");
        assert_eq!(s.reconstruct(), FULL_NOTE);
        assert_eq!(s.section(SectionKind::TreatmentPlan).unwrap(), "Treatment Plan:\nStart heparin drip.\n");
    }

    #[test]
    fn only_instructions_header() {
        let text = "Preamble text.\nDischarge Instructions:\nRest.";
        let s = seg(text);
        assert_eq!(s.spans().len(), 1);
        assert_eq!(s.residual(), "Preamble text.\n");
        assert_eq!(s.reconstruct(), text);
    }

    #[test]
    fn no_headers_means_all_residual() {
        let s = seg("just text\nmore");
        assert!(s.spans().is_empty());
        assert_eq!(s.residual(), "just text\nmore");
    }

    #[test]
    fn headers_are_case_insensitive_and_need_colon_or_line_end() {
        let s = seg("CHIEF COMPLAINT: cough\nDischarge instructions were given verbally.\nbrief hospital course\nok");
        let kinds: Vec<_> = s.spans().iter().map(|x| x.kind).collect();
        assert_eq!(kinds, [SectionKind::PresentingCondition, SectionKind::InHospitalProgress]);
        assert_eq!(s.span_body(&s.spans()[0]), " cough\nDischarge instructions were given verbally.\n");
    }

    #[test]
    fn backgrounds_follow_task_phases() {
        let s = seg(FULL_NOTE);
        let diag = assemble_background(&s, TaskKind::DiagnosisInference).unwrap();
        assert_eq!(
            diag,
            "Patient Demography:\nAge 64, female.\nPresenting Condition:\nChest pain for two days.\nClinical Assessment:\nTroponin mildly elevated.\n"
        );
        let med = assemble_background(&s, TaskKind::MedicationInference).unwrap();
        assert!(med.starts_with(&diag));
        assert!(med.ends_with("In-Hospital Progress:\nPain resolved by day 2.\n"));
        assert!(!med.contains("Metformin") && !med.contains("Hypertension"));
        assert_eq!(med, assemble_background(&s, TaskKind::InstructionInference).unwrap());
    }

    #[test]
    fn discharge_only_note_has_no_background() {
        let s = seg("Discharge Diagnosis:\n1. Flu\nDischarge Instructions:\nRest.\n");
        for task in TaskKind::ALL {
            assert_eq!(assemble_background(&s, task), Err(SegmentError::EmptyBackground(task)));
        }
    }

    #[test]
    fn diagnosis_gold_from_numbered_list() {
        let s = seg("Discharge Diagnosis:\n1. Hypertension\n2. Type 2 diabetes\n");
        let gold = extract_gold(&s, TaskKind::DiagnosisInference, &HeaderTable::default()).unwrap();
        let texts: Vec<_> = gold.iter().map(|g| g.text.as_str()).collect();
        assert_eq!(texts, ["hypertension", "type 2 diabetes"]);
        assert_eq!(gold[1].display, "Type 2 diabetes");
    }

    #[test]
    fn medication_gold_keeps_dose_as_detail() {
        let gold = extract_gold(&seg(FULL_NOTE), TaskKind::MedicationInference, &HeaderTable::default()).unwrap();
        assert_eq!(gold[0].text, "metformin");
        assert_eq!(gold[0].detail.as_deref(), Some("500 mg PO BID"));
        assert_eq!(gold[1].text, "aspirin ec");
    }

    #[test]
    fn empty_medication_section_is_missing() {
        let s = seg("Discharge Medications:\n\nDischarge Instructions:\nRest.\n");
        assert_eq!(
            extract_gold(&s, TaskKind::MedicationInference, &HeaderTable::default()),
            Err(SegmentError::MissingGoldSection(TaskKind::MedicationInference))
        );
    }

    #[test]
    fn instruction_gold_is_verbatim() {
        let body = "Take it easy.\n- Walk daily.";
        let s = seg(&format!("Discharge Instructions:\n{body}\n"));
        let gold = extract_gold(&s, TaskKind::InstructionInference, &HeaderTable::default()).unwrap();
        assert_eq!(gold.len(), 1);
        assert_eq!(gold[0].text, body);
    }

    #[test]
    fn list_items_fold_continuations_and_fall_back_to_sentences() {
        assert_eq!(list_items("- Walk daily\n  for 20 min\n\nignored\n* Eat"), ["Walk daily for 20 min", "Eat"]);
        assert_eq!(list_items("Rest well. Drink water."), ["Rest well.", "Drink water."]);
    }

    #[test]
    fn drug_lines() {
        assert_eq!(split_drug_line("Insulin glargine 10 units qhs"), ("Insulin glargine".into(), Some("10 units qhs".into())));
        assert_eq!(split_drug_line("Lisinopril"), ("Lisinopril".into(), None));
        assert_eq!(split_drug_line("5-FU 400 mg"), ("5-FU".into(), Some("400 mg".into())));
    }

    #[test]
    fn header_table_toml_round_trip_and_validation() {
        let table = HeaderTable::default();
        assert_eq!(HeaderTable::from_toml(&table.to_toml()).unwrap(), table);
        let mut bad = table.clone();
        bad.diagnosis_headers.push("Final Dx".into());
        assert!(HeaderTable::from_toml(&bad.to_toml()).is_err());
    }
}
