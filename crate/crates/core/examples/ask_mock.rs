// Run the QA harness offline with mock providers and print the results
// table for all three context modes.

use exprag::eval::{run_qa_harness, HarnessConfig, Rankers};
use exprag::llm::{ContextAware, EchoGold, FixedLetter, ChatProvider};
use exprag::qagen::{build_dataset, GenParams, RulePermuter};
use exprag::ranker::build_code_index;
use exprag::segment::HeaderTable;
use exprag::synth::{gen_cohort, SynthParams};
use exprag::text_ranker::{LexicalTfidf, TextRanker};

pub fn run_example() {
    let synth = gen_cohort(&SynthParams { seed: 2, n_subjects: 120, n_clusters: 2, ..SynthParams::default() }).expect("synth");
    let cohort = &synth.cohort;
    let (items, _) = build_dataset(cohort, &HeaderTable::default(), &GenParams { counts: [10, 10, 10], ..GenParams::default() }, &RulePermuter).unwrap();
    let index = build_code_index(cohort);
    let lexical = LexicalTfidf::fit_cohort(cohort);
    let text = TextRanker::build(cohort, &lexical).unwrap();
    let rankers = Rankers { cohort, index: &index, text: Some(&text) };

    let providers: [(&str, &dyn ChatProvider); 3] =
        [("mock:echo-gold", &EchoGold), ("mock:fixed-B", &FixedLetter('B')), ("mock:context-aware", &ContextAware)];
    for (name, provider) in providers {
        let config = HarnessConfig { model: name.into(), ..HarnessConfig::default() };
        let out = run_qa_harness(&items, &rankers, &config, provider).expect("harness");
        print!("{}", out.report.to_table());
        if name == "mock:echo-gold" {
            assert!(out.report.cells.iter().all(|c| c.accuracy == 100.0));
        }
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
