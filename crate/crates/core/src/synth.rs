//! Seeded synthetic cohorts with latent clusters. Code sets are drawn mostly
//! from a per-cluster pool, so same-cluster admissions overlap more, and
//! notes list the most common pool codes as discharge diagnoses and
//! medications.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{write_cohort_dir, AdmissionRecord, CodeKind, Cohort, CohortError, FilterBounds};
use crate::segment::SectionKind;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteStyle {
    /// Every section holds sentences unique to its (admission, section).
    Sentinel,
    /// Generic clinical filler; procedures are mentioned in the treatment
    /// plan, diagnoses and medications only in the discharge plan.
    Narrative,
}

impl std::str::FromStr for NoteStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sentinel" => Ok(NoteStyle::Sentinel),
            "narrative" => Ok(NoteStyle::Narrative),
            other => Err(format!("unknown note style `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub seed: u64,
    pub n_subjects: usize,
    /// Inclusive range of admissions per subject.
    pub admissions_per_subject: (usize, usize),
    pub n_clusters: usize,
    /// Inclusive range of codes per kind for each admission.
    pub codes_per_kind_range: (usize, usize),
    /// Vocabulary size per kind in `CodeKind::ALL` order.
    pub vocab_sizes: [usize; 3],
    /// Codes in each cluster's pool, per kind.
    pub cluster_pool_size: usize,
    /// Fraction of an admission's codes drawn from its cluster pool.
    pub cluster_overlap: f64,
    /// Pool position r is drawn with weight 1/(r+1)^skew; 0 is uniform.
    pub pool_skew: f64,
    pub note_style: NoteStyle,
    /// Discharge diagnoses and medications listed per note (capped at one
    /// less than the admission's code count of that kind).
    pub gold_per_kind: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 42,
            n_subjects: 200,
            admissions_per_subject: (1, 1),
            n_clusters: 4,
            codes_per_kind_range: (3, 40),
            vocab_sizes: [400, 300, 300],
            cluster_pool_size: 60,
            cluster_overlap: 0.9,
            pool_skew: 0.0,
            note_style: NoteStyle::Narrative,
            gold_per_kind: 3,
        }
    }
}

const DIAG_MODIFIERS: [&str; 16] = [
    "Acute", "Chronic", "Recurrent", "Primary", "Secondary", "Unspecified", "Congenital", "Benign", "Severe", "Mild",
    "Bilateral", "Idiopathic", "Persistent", "Transient", "Hereditary", "Localized",
];
const SITES: [&str; 20] = [
    "renal", "hepatic", "cardiac", "pulmonary", "gastric", "colonic", "thyroid", "adrenal", "pancreatic", "splenic",
    "vascular", "cerebral", "spinal", "dermal", "ocular", "otic", "esophageal", "biliary", "prostatic", "ovarian",
];
const CONDITIONS: [&str; 12] = [
    "insufficiency", "inflammation", "obstruction", "hemorrhage", "stenosis", "neoplasm", "infection", "ischemia",
    "fibrosis", "edema", "ulceration", "hypertrophy",
];
const DRUG_HEADS: [&str; 20] = [
    "Zor", "Vel", "Cal", "Dap", "Mer", "Tri", "Lox", "Ben", "Cor", "Fen", "Gal", "Hal", "Kel", "Lin", "Mon", "Nor",
    "Pra", "Quin", "Ros", "Sul",
];
const DRUG_VOWELS: [&str; 5] = ["a", "i", "o", "u", "e"];
const DRUG_TAILS: [&str; 10] = ["statin", "pril", "olol", "sartan", "mycin", "azole", "idine", "formin", "parin", "oxetine"];
const PROC_APPROACHES: [&str; 3] = ["Open", "Percutaneous", "Endoscopic"];
const PROC_ACTIONS: [&str; 10] = [
    "biopsy", "drainage", "excision", "repair", "imaging", "catheterization", "resection", "stenting", "ablation",
    "transplantation",
];

pub fn vocab_capacity(kind: CodeKind) -> usize {
    match kind {
        CodeKind::Diagnosis => DIAG_MODIFIERS.len() * SITES.len() * CONDITIONS.len(),
        CodeKind::Medication => DRUG_HEADS.len() * DRUG_VOWELS.len() * DRUG_TAILS.len(),
        CodeKind::Procedure => PROC_APPROACHES.len() * PROC_ACTIONS.len() * SITES.len(),
    }
}

/// Code and description of vocabulary entry `i`.
pub fn vocab_entry(kind: CodeKind, i: usize) -> (String, String) {
    match kind {
        CodeKind::Diagnosis => {
            let m = DIAG_MODIFIERS[i % DIAG_MODIFIERS.len()];
            let s = SITES[(i / DIAG_MODIFIERS.len()) % SITES.len()];
            let c = CONDITIONS[i / (DIAG_MODIFIERS.len() * SITES.len())];
            (format!("X{:03}{}", i / 10, i % 10), format!("{m} {s} {c}"))
        }
        CodeKind::Medication => {
            let h = DRUG_HEADS[i % DRUG_HEADS.len()];
            let v = DRUG_VOWELS[(i / DRUG_HEADS.len()) % DRUG_VOWELS.len()];
            let t = DRUG_TAILS[i / (DRUG_HEADS.len() * DRUG_VOWELS.len())];
            (format!("{:011}", 60_000_000_000u64 + i as u64), format!("{h}{v}{t}"))
        }
        CodeKind::Procedure => {
            let a = PROC_APPROACHES[i % PROC_APPROACHES.len()];
            let act = PROC_ACTIONS[(i / PROC_APPROACHES.len()) % PROC_ACTIONS.len()];
            let s = SITES[i / (PROC_APPROACHES.len() * PROC_ACTIONS.len())];
            (format!("P{i:04}"), format!("{a} {act} of {s} structure"))
        }
    }
}

const FILLER: [&str; 24] = [
    "The patient arrived accompanied by family members.",
    "Vital signs were recorded on arrival.",
    "Nursing staff noted a calm demeanor.",
    "Appetite was reported as fair.",
    "Sleep was described as interrupted.",
    "The patient ambulated with minimal assistance.",
    "Laboratory samples were sent for routine analysis.",
    "Family history was reviewed at the bedside.",
    "Occasional alcohol use was reported.",
    "The patient lives independently at home.",
    "Discomfort was rated as moderate on admission.",
    "The team discussed goals of care.",
    "Fluids were given overnight.",
    "The patient tolerated a regular diet.",
    "Mobility was evaluated by the therapy team.",
    "Hydration status improved over the stay.",
    "The patient was alert and oriented.",
    "Skin was warm and dry on examination.",
    "The patient reported feeling tired for several days.",
    "A friend provided transportation to the hospital.",
    "The patient denied recent travel.",
    "Medication reconciliation was completed.",
    "The patient asked detailed questions about the plan.",
    "Overnight events were unremarkable.",
];

const INSTRUCTIONS: [&str; 12] = [
    "Take {med} as directed every morning.",
    "Avoid lifting heavy objects for two weeks.",
    "Check your weight every morning.",
    "Resume walking gradually over the next week.",
    "Do not drive while taking sedating medication.",
    "Keep the incision clean and dry.",
    "Follow up with your primary care provider within one week.",
    "Return to the emergency department if fever develops.",
    "Limit salt intake at every meal.",
    "Avoid swimming until cleared by your surgeon.",
    "Call your doctor if you feel short of breath.",
    "Drink plenty of fluids each day.",
];

const DOSES: [u32; 7] = [5, 10, 20, 25, 40, 50, 100];
const FREQUENCIES: [&str; 4] = ["daily", "twice daily", "at bedtime", "every morning"];

/// What a note lists in its discharge plan, plus procedures for narrative
/// treatment plans.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NotePlan {
    pub diagnoses: Vec<String>,
    pub medications: Vec<String>,
    pub procedures: Vec<String>,
}

/// Sentence unique to one admission and section, e.g.
/// `Sentinel h0007 treatment plan 2.`
pub fn sentinel(admission_key: &str, kind: SectionKind, j: usize) -> String {
    format!("Sentinel {} {} {}.", admission_key.to_lowercase(), kind.title().to_lowercase().replace('-', " "), j)
}

fn section_prose(admission_key: &str, kind: SectionKind, plan: &NotePlan, style: NoteStyle, rng: &mut ChaCha8Rng) -> String {
    match style {
        NoteStyle::Sentinel => (1..=2).map(|j| sentinel(admission_key, kind, j)).collect::<Vec<_>>().join(" "),
        NoteStyle::Narrative => {
            let mut sentences: Vec<String> = Vec::new();
            if kind == SectionKind::PatientDemography {
                let sex = if rng.gen_bool(0.5) { "female" } else { "male" };
                sentences.push(format!("Age {}, {sex}.", rng.gen_range(25..90)));
            }
            if kind == SectionKind::TreatmentPlan {
                for p in &plan.procedures {
                    sentences.push(format!("Planned {}.", p.to_lowercase()));
                }
            }
            let n = rng.gen_range(2..=4);
            sentences.extend(FILLER.choose_multiple(rng, n).map(|s| s.to_string()));
            sentences.join(" ")
        }
    }
}

/// Note with all seven canonical headers. The discharge summary carries
/// numbered diagnosis and medication lists; the instructions are bullets.
pub fn gen_note(admission_key: &str, plan: &NotePlan, style: NoteStyle, rng: &mut ChaCha8Rng) -> String {
    let mut note = String::new();
    for kind in SectionKind::ALL {
        note.push_str(kind.title());
        note.push_str(":\n");
        note.push_str(&section_prose(admission_key, kind, plan, style, rng));
        note.push('\n');
        match kind {
            SectionKind::DischargeSummary => {
                note.push_str("\nDischarge Diagnoses:\n");
                for (i, d) in plan.diagnoses.iter().enumerate() {
                    note.push_str(&format!("{}. {d}\n", i + 1));
                }
                note.push_str("\nDischarge Medications:\n");
                for (i, m) in plan.medications.iter().enumerate() {
                    let dose = DOSES.choose(rng).expect("doses");
                    let freq = FREQUENCIES.choose(rng).expect("frequencies");
                    note.push_str(&format!("{}. {m} {dose} mg {freq}\n", i + 1));
                }
            }
            SectionKind::PostDischargeInstructions => {
                let n = rng.gen_range(4..=6);
                let med = plan.medications.first().map(String::as_str).unwrap_or("your medications");
                for b in INSTRUCTIONS.choose_multiple(rng, n) {
                    note.push_str(&format!("- {}\n", b.replace("{med}", med)));
                }
            }
            _ => {}
        }
        note.push('\n');
    }
    note
}

/// A generated cohort with each admission's latent cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub cohort: Cohort,
    pub clusters: BTreeMap<String, usize>,
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidParams(m));
        let (lo, hi) = self.codes_per_kind_range;
        if lo == 0 || lo > hi {
            return bad(format!("codes_per_kind_range ({lo}, {hi}) must satisfy 1 <= min <= max"));
        }
        let (alo, ahi) = self.admissions_per_subject;
        if alo == 0 || alo > ahi {
            return bad(format!("admissions_per_subject ({alo}, {ahi}) must satisfy 1 <= min <= max"));
        }
        if self.n_clusters == 0 {
            return bad("n_clusters must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cluster_overlap) {
            return bad(format!("cluster_overlap {} outside [0, 1]", self.cluster_overlap));
        }
        for (kind, &size) in CodeKind::ALL.iter().zip(&self.vocab_sizes) {
            if size > vocab_capacity(*kind) {
                return bad(format!("{kind} vocabulary {size} exceeds capacity {}", vocab_capacity(*kind)));
            }
            if size < hi || size < self.cluster_pool_size {
                return bad(format!("{kind} vocabulary {size} smaller than max codes or pool size"));
            }
        }
        if self.pool_skew.is_nan() || self.pool_skew < 0.0 {
            return bad(format!("pool_skew {} must be non-negative", self.pool_skew));
        }
        if self.cluster_pool_size == 0 {
            return bad("cluster_pool_size must be positive".into());
        }
        Ok(())
    }

    /// Whether every generated admission passes `bounds`.
    pub fn within(&self, bounds: FilterBounds) -> bool {
        self.codes_per_kind_range.0 >= bounds.min_entries && self.codes_per_kind_range.1 <= bounds.max_entries
    }
}

/// `n` distinct pool positions drawn with weight 1/(r+1)^skew.
fn weighted_pool_sample(pool_len: usize, n: usize, skew: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = (0..pool_len)
        .map(|r| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (u.ln() * ((r + 1) as f64).powf(skew), r)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = keyed.into_iter().take(n).map(|(_, r)| r).collect();
    out.sort_unstable();
    out
}

/// Code indices for one admission and kind, most common pool codes first,
/// noise codes last.
fn draw_codes(pool: &[usize], vocab: usize, n: usize, overlap: f64, skew: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let from_pool = ((n as f64 * overlap).round() as usize).min(pool.len()).min(n);
    let mut chosen: Vec<usize> = weighted_pool_sample(pool.len(), from_pool, skew, rng).into_iter().map(|r| pool[r]).collect();
    let mut taken: BTreeSet<usize> = chosen.iter().copied().collect();
    while chosen.len() < n {
        let c = rng.gen_range(0..vocab);
        if taken.insert(c) {
            chosen.push(c);
        }
    }
    chosen
}

pub fn gen_cohort(params: &SynthParams) -> Result<SynthCohort, SynthError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    // Disjoint pools while the vocabulary allows, wrapping otherwise.
    let pools: Vec<Vec<Vec<usize>>> = CodeKind::ALL
        .iter()
        .zip(params.vocab_sizes)
        .map(|(_, vocab)| {
            let mut order: Vec<usize> = (0..vocab).collect();
            order.shuffle(&mut rng);
            (0..params.n_clusters)
                .map(|c| (0..params.cluster_pool_size).map(|j| order[(c * params.cluster_pool_size + j) % vocab]).collect())
                .collect()
        })
        .collect();

    let mut cohort = Cohort::default();
    let mut clusters = BTreeMap::new();
    let mut next_admission = 1usize;
    for s in 1..=params.n_subjects {
        let subject_key = format!("S{s:04}");
        let n_adm = rng.gen_range(params.admissions_per_subject.0..=params.admissions_per_subject.1);
        for _ in 0..n_adm {
            let admission_key = format!("H{next_admission:04}");
            next_admission += 1;
            let cluster = rng.gen_range(0..params.n_clusters);
            let mut record = AdmissionRecord::new(subject_key.clone(), admission_key.clone());
            let mut plan = NotePlan::default();
            for (ki, kind) in CodeKind::ALL.into_iter().enumerate() {
                let n = rng.gen_range(params.codes_per_kind_range.0..=params.codes_per_kind_range.1);
                let drawn = draw_codes(&pools[ki][cluster], params.vocab_sizes[ki], n, params.cluster_overlap, params.pool_skew, &mut rng);
                let listed = params.gold_per_kind.min(n.saturating_sub(1)).max(1);
                for (j, &idx) in drawn.iter().enumerate() {
                    let (code, desc) = vocab_entry(kind, idx);
                    record.codes_mut(kind).insert(code.clone());
                    match kind {
                        CodeKind::Diagnosis if j < listed => plan.diagnoses.push(desc.clone()),
                        CodeKind::Medication if j < listed => plan.medications.push(desc.clone()),
                        CodeKind::Procedure if j < 2 => plan.procedures.push(desc.clone()),
                        _ => {}
                    }
                    cohort.descriptions.entry((kind, code)).or_insert(desc);
                }
            }
            record.note = Some(gen_note(&admission_key, &plan, params.note_style, &mut rng));
            clusters.insert(admission_key, cluster);
            cohort.insert(record);
        }
    }
    Ok(SynthCohort { cohort, clusters })
}

/// Generates a cohort and writes the code tables and notes into `dir`.
pub fn write_synth_cohort(params: &SynthParams, dir: &Path) -> Result<SynthCohort, SynthError> {
    let synth = gen_cohort(params)?;
    write_cohort_dir(&synth.cohort, dir)?;
    Ok(synth)
}
