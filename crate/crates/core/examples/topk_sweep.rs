// Vary the number of similar admissions used for context.

use exprag::eval::{run_topk_sweep, ContextMode, HarnessConfig, Rankers};
use exprag::llm::ContextAware;
use exprag::qagen::{build_dataset, GenParams, RulePermuter};
use exprag::ranker::build_code_index;
use exprag::segment::HeaderTable;
use exprag::synth::{gen_cohort, SynthParams};

pub fn run_example() {
    let synth = gen_cohort(&SynthParams { seed: 4, n_subjects: 150, n_clusters: 2, ..SynthParams::default() }).expect("synth");
    let cohort = &synth.cohort;
    let (items, _) = build_dataset(cohort, &HeaderTable::default(), &GenParams { counts: [15, 15, 0], ..GenParams::default() }, &RulePermuter).unwrap();
    let index = build_code_index(cohort);
    let rankers = Rankers { cohort, index: &index, text: None };
    let config = HarnessConfig { model: "mock:context-aware".into(), modes: vec![ContextMode::ExpRagEhr], ..HarnessConfig::default() };
    let report = run_topk_sweep(&items, &rankers, &config, &ContextAware, &[1, 5, 15]).expect("sweep");
    print!("{}", report.to_table());
}

#[allow(dead_code)]
fn main() {
    run_example();
}
