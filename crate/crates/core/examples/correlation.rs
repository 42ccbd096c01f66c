// Correlate ranker scores with an annotator over sampled candidate pairs.
// The exact annotator rates the three code-set overlaps, so the EHR scorer
// matches it perfectly and the note-text scorer shows how far it drifts.

use exprag::eval::correlation::{EhrScorer, ExactEhrAnnotator, PairScorer, TextScorer};
use exprag::eval::{run_correlation_harness, CorrelationPlan};
use exprag::ranker::{build_code_index, SimilarityWeights};
use exprag::synth::{gen_cohort, SynthParams};
use exprag::text_ranker::{LexicalTfidf, TextRanker};

pub fn run_example() {
    let synth = gen_cohort(&SynthParams { seed: 9, n_subjects: 400, n_clusters: 3, ..SynthParams::default() }).expect("synth");
    let cohort = &synth.cohort;
    let index = build_code_index(cohort);
    let lexical = LexicalTfidf::fit_cohort(cohort);
    let text = TextRanker::build(cohort, &lexical).unwrap();
    let ehr = EhrScorer { weights: SimilarityWeights::uniform() };
    let lex = TextScorer { label: "text-lexical".into(), ranker: &text };
    let scorers: [&dyn PairScorer; 2] = [&ehr, &lex];
    let plan = CorrelationPlan { n_targets: 20, n_random: 10, n_pool: 20, seed: 9 };
    let report = run_correlation_harness(cohort, &index, &scorers, &ExactEhrAnnotator, plan).expect("correlation");
    print!("{}", report.to_table());
    let ehr_r = report.ranker(&ehr.name()).and_then(|r| r.mean_pearson).unwrap();
    assert!((ehr_r - 1.0).abs() < 1e-9);
}

#[allow(dead_code)]
fn main() {
    run_example();
}
