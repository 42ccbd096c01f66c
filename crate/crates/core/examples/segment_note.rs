// Split a discharge note into canonical sections and pull out the
// background and gold answers for each task.

use exprag::segment::{assemble_background, extract_gold, segment_note, HeaderTable, TaskKind};

const NOTE: &str = "Chief Complaint:
Shortness of breath for three days.

Physical Exam:
Crackles at both bases.

Treatment Plan:
Diuresis with intravenous furosemide.

Discharge Diagnoses:
1. Acute on chronic heart failure
2. Hypertension

Discharge Medications:
1. Furosemide 40 mg daily
2. Lisinopril 10 mg daily

Discharge Instructions:
- Weigh yourself every morning. Call if up 3 pounds.
- Limit salt to 2 grams per day.
- Do not lift more than 10 pounds.
- Keep your cardiology appointment.
";

pub fn run_example() {
    let table = HeaderTable::default();
    let seg = segment_note("H1", NOTE, &table);
    for span in seg.spans() {
        println!("{:?} `{}` bytes {}..{}", span.kind, span.header, span.start, span.end);
    }
    assert_eq!(seg.reconstruct(), NOTE);

    for task in TaskKind::ALL {
        let background = assemble_background(&seg, task).expect("background");
        let gold = extract_gold(&seg, task, &table).expect("gold");
        println!("{task}: {} background chars, gold {:?}", background.len(), gold.iter().map(|g| &g.display).collect::<Vec<_>>());
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
