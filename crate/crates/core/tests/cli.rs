//! End-to-end command-line runs against temporary directories.

use std::path::{Path, PathBuf};

use exprag::cli::{main_with_args, RunConfig};

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: RunConfig,
    config_path: PathBuf,
}

impl Workspace {
    fn new(edit: impl FnOnce(&mut RunConfig)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let mut config = RunConfig::default();
        config.paths.cohort_dir = root.join("cohort");
        config.paths.archive = root.join("cohort.archive");
        config.paths.index = root.join("index.bin");
        config.paths.dataset = root.join("dataset.jsonl");
        config.paths.reports_dir = root.join("reports");
        config.synth.n_subjects = 90;
        config.synth.n_clusters = 2;
        config.qa.counts = [6, 6, 6];
        config.correlation.n_targets = 10;
        config.correlation.n_random = 5;
        config.correlation.n_pool = 10;
        edit(&mut config);
        let config_path = root.join("run.toml");
        std::fs::write(&config_path, config.to_toml()).unwrap();
        Self { _dir: dir, root, config, config_path }
    }

    fn run(&self, args: &[&str]) -> i32 {
        let mut full = vec!["exprag", "--config", self.config_path.to_str().unwrap()];
        full.extend_from_slice(args);
        main_with_args(full)
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.root.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

fn prepare(ws: &Workspace) {
    for step in [&["synth"][..], &["ingest"], &["genqa"]] {
        assert_eq!(ws.run(step), 0, "{step:?}");
    }
}

#[test]
fn offline_pipeline_reruns_byte_identically() {
    let ws = Workspace::new(|_| {});
    prepare(&ws);
    let steps: [&[&str]; 4] = [
        &["ask", "--provider", "mock:context-aware", "--sweep", "1,5"],
        &["eval"],
        &["correlate", "--annotator", "exact-ehr"],
        &["report"],
    ];
    let files = [
        "reports/records-mock-context-aware.jsonl",
        "reports/transcript-mock-context-aware.jsonl",
        "reports/sweep-mock-context-aware.jsonl",
        "reports/metrics.jsonl",
        "reports/correlation.jsonl",
        "dataset.jsonl",
        "cohort.archive",
    ];
    let mut first = Vec::new();
    for round in 0..2 {
        if round == 1 {
            prepare(&ws);
        }
        for step in steps {
            assert_eq!(ws.run(step), 0, "{step:?}");
        }
        let snapshot: Vec<Vec<u8>> = files.iter().map(|f| ws.read(f)).collect();
        if round == 0 {
            first = snapshot;
        } else {
            for (f, (a, b)) in files.iter().zip(first.iter().zip(&snapshot)) {
                assert!(a == b, "{f} changed between runs");
            }
        }
    }
}

#[test]
fn stage_commands_write_their_outputs() {
    let ws = Workspace::new(|_| {});
    prepare(&ws);
    let query = {
        let archive = std::fs::File::open(&ws.config.paths.archive).unwrap();
        let cohort = exprag::cohort::read_archive(std::io::BufReader::new(archive)).unwrap();
        cohort.admissions.keys().next().unwrap().clone()
    };
    let out = |name: &str| ws.root.join(name).to_str().unwrap().to_string();
    let (seg, rank, text, hits) = (out("seg.jsonl"), out("rank.jsonl"), out("text.jsonl"), out("hits.jsonl"));
    assert_eq!(ws.run(&["segment", "--admission", &query, "--out", &seg]), 0);
    assert_eq!(ws.run(&["rank", "--query", &query, "--k", "4", "--weights", "1,0,1", "--out", &rank]), 0);
    assert_eq!(ws.run(&["rank", "--query", &query, "--k", "4", "--ranker", "text-lexical", "--out", &text]), 0);
    assert_eq!(ws.run(&["retrieve", "--retriever", "sentence-window", "--out", &hits]), 0);

    let lines = |p: &str| std::fs::read_to_string(p).unwrap().lines().map(String::from).collect::<Vec<_>>();
    let seg: serde_json::Value = serde_json::from_str(&lines(&seg)[0]).unwrap();
    let kinds: std::collections::BTreeSet<String> =
        seg["sections"].as_array().unwrap().iter().map(|s| s["kind"].to_string()).collect();
    assert_eq!(kinds.len(), 7);
    assert_eq!(lines(&rank).len(), 4);
    assert_eq!(lines(&text).len(), 4);
    assert!(!lines(&hits).is_empty());
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let ws = Workspace::new(|_| {});
    // Nothing ingested yet.
    assert_eq!(ws.run(&["ask"]), 2);
    assert_eq!(ws.run(&["report"]), 2);
    assert_eq!(main_with_args(["exprag", "--config", "/nonexistent/run.toml", "synth"]), 2);

    let bad = ws.root.join("bad.toml");
    std::fs::write(&bad, "[synth]\nn_clusters = \"many\"\n").unwrap();
    assert_eq!(main_with_args(["exprag", "--config", bad.to_str().unwrap(), "synth"]), 3);
    assert_eq!(ws.run(&["synth", "--overlap", "1.5"]), 3);

    prepare(&ws);
    assert_eq!(ws.run(&["ask", "--provider", "mock:nope"]), 3);
    assert_eq!(ws.run(&["rank", "--query", "no-such-admission"]), 2);
    assert_eq!(ws.run(&["genqa", "--counts", "1,2"]), 3);
}

#[test]
fn unreachable_provider_is_exit_4() {
    std::env::set_var("EXPRAG_TEST_KEY", "test");
    let ws = Workspace::new(|c| {
        c.provider.spec = "openai".into();
        c.provider.openai.base_url = "http://127.0.0.1:9/v1".into();
        c.provider.openai.api_key_env = "EXPRAG_TEST_KEY".into();
        c.provider.openai.timeout_secs = 2;
        c.harness.retry.max_attempts = 1;
        c.harness.modes = vec![exprag::eval::ContextMode::DirectAsk];
        c.qa.counts = [2, 2, 2];
    });
    prepare(&ws);
    assert_eq!(ws.run(&["ask"]), 4);
    // The failed run still leaves a timestamped transcript behind.
    let reports: Vec<PathBuf> = std::fs::read_dir(ws.root.join("reports")).unwrap().map(|e| e.unwrap().path()).collect();
    assert!(reports.iter().any(|p| name(p).starts_with("transcript-openai-")), "{reports:?}");
}

fn name(p: &Path) -> String {
    p.file_name().unwrap().to_string_lossy().into_owned()
}
