// Generate a synthetic cohort, write it as code tables plus notes, then read
// it back and filter it the way `ingest` does.

use exprag::cohort::{filter_admissions, read_cohort_dir, CodeKind, FilterBounds};
use exprag::synth::{write_synth_cohort, SynthParams};

pub fn run_example() {
    let dir = tempfile::tempdir().expect("tempdir");
    let params = SynthParams { seed: 7, n_subjects: 40, n_clusters: 2, ..SynthParams::default() };
    let synth = write_synth_cohort(&params, dir.path()).expect("synth");
    println!("generated {} admissions in {} clusters", synth.cohort.len(), params.n_clusters);

    let read = read_cohort_dir(dir.path()).expect("read back");
    assert_eq!(read.len(), synth.cohort.len());
    let kept = filter_admissions(&read, FilterBounds::default());
    println!("{} admissions pass the default filter", kept.len());

    let (key, record) = kept.admissions.iter().next().expect("non-empty cohort");
    for kind in CodeKind::ALL {
        println!("{key} {kind}: {} codes", record.codes(kind).len());
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
