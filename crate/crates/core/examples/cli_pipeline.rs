// Drive the command-line stages in-process against a temporary directory:
// synth, ingest, genqa, ask, eval and report.

use exprag::cli::{main_with_args, RunConfig};

pub fn run_example() {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    let mut config = RunConfig::default();
    config.paths.cohort_dir = root.join("cohort");
    config.paths.archive = root.join("cohort.archive");
    config.paths.index = root.join("index.bin");
    config.paths.dataset = root.join("dataset.jsonl");
    config.paths.reports_dir = root.join("reports");
    config.synth.n_subjects = 80;
    config.qa.counts = [8, 8, 8];
    let config_path = root.join("run.toml");
    std::fs::write(&config_path, config.to_toml()).unwrap();
    let cfg = config_path.to_str().unwrap();

    let steps: [&[&str]; 6] = [
        &["synth"],
        &["ingest"],
        &["genqa"],
        &["ask", "--provider", "mock:context-aware", "--k", "10"],
        &["eval"],
        &["report"],
    ];
    for step in steps {
        let mut args = vec!["exprag", "--config", cfg];
        args.extend_from_slice(step);
        let code = main_with_args(args);
        assert_eq!(code, 0, "`{}` failed", step.join(" "));
    }
    // A missing upstream artifact is reported with exit code 2.
    std::fs::remove_file(&config.paths.dataset).unwrap();
    assert_eq!(main_with_args(["exprag", "--config", cfg, "ask"]), 2);
}

#[allow(dead_code)]
fn main() {
    run_example();
}
