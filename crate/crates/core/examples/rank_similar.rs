// Rank similar admissions by weighted code-set Jaccard with the inverted
// index, and confirm it agrees with a full scan.

use exprag::ranker::{brute_force_rank, build_code_index, rank_top_k, RankParams, SimilarityWeights};
use exprag::segment::TaskKind;
use exprag::synth::{gen_cohort, SynthParams};

pub fn run_example() {
    let synth = gen_cohort(&SynthParams { seed: 3, n_subjects: 200, ..SynthParams::default() }).expect("synth");
    let cohort = &synth.cohort;
    let index = build_code_index(cohort);
    let query = cohort.admissions.keys().next().expect("non-empty").clone();

    for weights in [SimilarityWeights::uniform(), SimilarityWeights::task_focused(TaskKind::MedicationInference)] {
        let params = RankParams { k: 5, weights, exclude_same_subject: true };
        let fast = rank_top_k(&index, cohort, &query, &params).expect("rank");
        let slow = brute_force_rank(cohort, &query, &params).expect("scan");
        assert_eq!(fast, slow);
        println!("weights {weights:?}");
        for r in &fast {
            let [d, m, p] = r.score.parts();
            println!("  {} tau={:.3} (diag {d:.2} med {m:.2} proc {p:.2})", r.admission_key, r.score.tau);
        }
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
