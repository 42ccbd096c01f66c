// Build multiple-choice questions from segmented notes.

use exprag::qagen::{build_dataset, GenParams, RulePermuter};
use exprag::segment::HeaderTable;
use exprag::synth::{gen_cohort, SynthParams};

pub fn run_example() {
    let synth = gen_cohort(&SynthParams { seed: 11, n_subjects: 60, ..SynthParams::default() }).expect("synth");
    let params = GenParams { seed: 11, counts: [5, 5, 5], ..GenParams::default() };
    let (items, manifest) = build_dataset(&synth.cohort, &HeaderTable::default(), &params, &RulePermuter).expect("dataset");
    println!("{}", serde_json::to_string_pretty(&manifest).unwrap());

    let item = &items[0];
    println!("{} ({:?})\n{}", item.question_id, item.mode, item.question);
    for o in &item.options {
        let mark = if item.gold_letters.contains(&o.letter) { "*" } else { " " };
        println!("{mark} {}) {}", o.letter, o.text);
    }
    // Same seed, same dataset.
    let (again, _) = build_dataset(&synth.cohort, &HeaderTable::default(), &params, &RulePermuter).unwrap();
    assert_eq!(items, again);
}

#[allow(dead_code)]
fn main() {
    run_example();
}
