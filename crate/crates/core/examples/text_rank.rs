// The note-text baseline: TF-IDF vectors over whole notes ranked by cosine.

use exprag::text_ranker::{LexicalTfidf, TextRanker};
use exprag::synth::{gen_cohort, SynthParams};

pub fn run_example() {
    let synth = gen_cohort(&SynthParams { seed: 5, n_subjects: 80, ..SynthParams::default() }).expect("synth");
    let cohort = &synth.cohort;
    let provider = LexicalTfidf::fit_cohort(cohort);
    println!("vocabulary of {} terms", provider.vocabulary().len());
    let ranker = TextRanker::build(cohort, &provider).expect("embed");

    let (key, record) = cohort.admissions.iter().next().expect("non-empty");
    let ranked = ranker
        .rank(record.note_text().unwrap_or(""), Some(key), Some(&record.subject_key), 5)
        .expect("rank");
    for (other, score) in &ranked {
        println!("{other} cosine={score:.3}");
    }
    assert!(ranked.windows(2).all(|w| w[0].1 >= w[1].1));
    assert!(ranked.iter().all(|(k, _)| k != key));
}

#[allow(dead_code)]
fn main() {
    run_example();
}
