// Parse raw code tables and a note file from memory and group them into
// admissions. Codes are normalized per vocabulary on the way in.

use exprag::cohort::{build_cohort, parse_code_table, parse_notes, CodeKind, TableFormat};

const DIAGNOSES: &str = "subject_id,hadm_id,code,long_title
1,100,i10,Essential hypertension
1,100,E11.9,Type 2 diabetes
2,200,I10,Essential hypertension
2,200,,empty code is skipped
";

const PRESCRIPTIONS: &str = "subject_id,hadm_id,code,drug
1,100,00093-7146-01,Metformin
2,200,0093714601,Metformin
";

const PROCEDURES: &str = "subject_id,hadm_id,code,long_title
1,100,0040,Procedure on single vessel
";

const NOTES: &str = r#"{"hadm_id": 100, "subject_id": 1, "text": "Chief Complaint: chest pain"}
{"hadm_id": "200", "subject_id": "2", "text": "Chief Complaint: dizziness"}
"#;

pub fn run_example() {
    let table = |text: &str, kind| parse_code_table(text.as_bytes(), kind, &TableFormat::for_kind(kind)).expect("table");
    let diag = table(DIAGNOSES, CodeKind::Diagnosis);
    let med = table(PRESCRIPTIONS, CodeKind::Medication);
    let proc = table(PROCEDURES, CodeKind::Procedure);
    println!("skipped {} diagnosis rows with empty codes", diag.skipped_empty);
    let notes = parse_notes(NOTES.as_bytes()).expect("notes");
    let cohort = build_cohort(&diag.entries, &med.entries, &proc.entries, &notes).expect("cohort");

    for (key, record) in &cohort.admissions {
        println!("{key}: diag {:?} med {:?} note {:?}", record.diag_codes, record.med_codes, record.note_text());
    }
    // ICD codes lose case and dots; NDC codes are compared exactly as recorded.
    assert!(cohort.get("100").unwrap().diag_codes.contains("I10"));
    assert!(cohort.get("100").unwrap().diag_codes.contains("E119"));
    assert_ne!(cohort.get("100").unwrap().med_codes, cohort.get("200").unwrap().med_codes);
}

#[allow(dead_code)]
fn main() {
    run_example();
}
