#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// The CLI with a clean environment for the variables it reads.
pub fn sdoh() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sdoh"));
    cmd.env_remove("LLM_API_KEY").env("SOURCE_DATE_EPOCH", "0");
    cmd
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn sdoh")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Runs mock `extract` then stub `evaluate` on the fixture corpus.
pub fn run_pipeline(out_dir: &Path, parallel: usize) {
    let out = run(sdoh()
        .arg("extract")
        .arg("--notes")
        .arg(fixture("notes.jsonl"))
        .arg("--mock-backend")
        .arg(fixture("mock_replies.jsonl"))
        .arg("--parallel")
        .arg(parallel.to_string())
        .arg("--out-dir")
        .arg(out_dir));
    assert_eq!(code(&out), 0, "extract: {}", stderr(&out));
    let out = run(sdoh()
        .arg("evaluate")
        .arg("--gold")
        .arg(fixture("gold.jsonl"))
        .arg("--stub-embedder")
        .arg("42")
        .arg("--out-dir")
        .arg(out_dir));
    assert_eq!(code(&out), 0, "evaluate: {}", stderr(&out));
}

pub fn write_jsonl(path: &Path, lines: &[serde_json::Value]) {
    let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(path, body).unwrap();
}
