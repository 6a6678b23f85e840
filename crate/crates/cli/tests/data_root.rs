use std::fs;

use cmcm_cli::config::DATA_ROOT_VAR;
use cmcm_cli::{run, EXIT_OK};

// Alone in its binary: the test mutates the process environment.
#[test]
fn relative_corpus_paths_resolve_under_data_root() {
    let root = tempfile::tempdir().unwrap();
    let corpus = root.path().join("syn.jsonl");
    assert_eq!(
        run(["cmcm", "synth", "--pairs", "60", "--relations", "2", "--out", corpus.to_str().unwrap()]),
        EXIT_OK
    );
    std::env::set_var(DATA_ROOT_VAR, root.path());
    let out = root.path().join("data");
    let code = run([
        "cmcm", "ingest", "--corpus", "syn.jsonl", "--schema", "synthetic", "--word-dim", "8", "--w2v-epochs", "1", "--out",
        out.to_str().unwrap(),
    ]);
    std::env::remove_var(DATA_ROOT_VAR);
    assert_eq!(code, EXIT_OK);
    assert!(out.join("train.jsonl").is_file());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["corpus"], root.path().join("syn.jsonl").to_str().unwrap());
}
