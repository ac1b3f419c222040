mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use common::*;
use sdoh_extract::eval_semantic::{EmbeddingProvider, HttpEmbedder};
use sdoh_extract::extraction::{
    build_prompt, BackendConfig, BackendError, ChatBackend, HttpChatBackend,
};
use sdoh_extract::ClinicalNote;
use serde_json::{json, Value};
use tempfile::tempdir;

#[derive(Debug, Clone)]
struct Captured {
    path: String,
    authorization: Option<String>,
    body: Value,
}

/// Minimal HTTP/1.1 server answering each request with the next scripted
/// `(status, body)`; the last entry repeats. One request per connection.
struct FakeServer {
    url: String,
    requests: Arc<Mutex<Vec<Captured>>>,
}

impl FakeServer {
    fn start(script: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        thread::spawn(move || {
            for (i, stream) in listener.incoming().enumerate() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let path = request_line
                    .split_whitespace()
                    .nth(1)
                    .unwrap_or("")
                    .to_string();
                let mut len = 0;
                let mut authorization = None;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let (k, v) = line.split_once(':').unwrap();
                    match k.to_ascii_lowercase().as_str() {
                        "content-length" => len = v.trim().parse().unwrap(),
                        "authorization" => authorization = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(Captured {
                    path,
                    authorization,
                    body: serde_json::from_slice(&body).unwrap_or(Value::Null),
                });
                let (status, reply) = &script[i.min(script.len() - 1)];
                let response = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        FakeServer { url, requests }
    }

    fn captured(&self) -> Vec<Captured> {
        self.requests.lock().unwrap().clone()
    }
}

fn chat_reply(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn config(url: &str, key_env: &str) -> BackendConfig {
    BackendConfig {
        endpoint_url: url.to_string(),
        api_key_env_name: key_env.to_string(),
        timeout: Duration::from_secs(5),
        max_retries: 2,
        backoff_base: Duration::ZERO,
    }
}

#[test]
fn chat_request_wire_format() {
    let server = FakeServer::start(vec![(200, chat_reply("Age: 54"))]);
    std::env::set_var("SDOH_TEST_KEY_WIRE", "k-wire");
    let backend = HttpChatBackend::new(&config(
        &format!("{}/v1/chat", server.url),
        "SDOH_TEST_KEY_WIRE",
    ))
    .unwrap();
    let note = ClinicalNote {
        note_id: "n".into(),
        text: "54-year-old Chinese female".into(),
    };
    let reply = backend
        .complete(&build_prompt(&note, "gpt-3.5-turbo"))
        .unwrap();
    assert_eq!(reply, "Age: 54");

    let req = &server.captured()[0];
    assert_eq!(req.path, "/v1/chat");
    assert_eq!(req.authorization.as_deref(), Some("Bearer k-wire"));
    assert_eq!(req.body["model"], "gpt-3.5-turbo");
    assert_eq!(req.body["temperature"], 0.0);
    let messages = req.body["messages"].as_array().unwrap();
    assert_eq!(messages.len(), 2);
    assert_eq!(messages[0]["role"], "system");
    assert_eq!(messages[1]["role"], "user");
    assert_eq!(messages[1]["content"], "54-year-old Chinese female");
}

#[test]
fn status_mapping() {
    std::env::set_var("SDOH_TEST_KEY_STATUS", "k");
    for (status, check) in [
        (
            401u16,
            (|e: &BackendError| matches!(e, BackendError::Auth { .. }))
                as fn(&BackendError) -> bool,
        ),
        (429, |e| e.is_retryable()),
        (503, |e| e.is_retryable()),
        (400, |e| matches!(e, BackendError::Rejected { .. })),
    ] {
        let server = FakeServer::start(vec![(status, "{}".into())]);
        let backend = HttpChatBackend::new(&config(&server.url, "SDOH_TEST_KEY_STATUS")).unwrap();
        let note = ClinicalNote {
            note_id: "n".into(),
            text: "x".into(),
        };
        let err = backend.complete(&build_prompt(&note, "m")).unwrap_err();
        assert!(check(&err), "{status}: {err:?}");
    }
}

#[test]
fn embeddings_wire_format_and_order() {
    let body = json!({"data": [
        {"index": 1, "embedding": [0.0, 1.0]},
        {"index": 0, "embedding": [1.0, 0.0]},
    ]})
    .to_string();
    let server = FakeServer::start(vec![(200, body)]);
    std::env::set_var("SDOH_TEST_KEY_EMB", "k-emb");
    let embedder = HttpEmbedder::new(
        &config(&server.url, "SDOH_TEST_KEY_EMB"),
        "all-MiniLM-L6-v2",
    )
    .unwrap();
    let vectors = embedder.embed_batch(&["first", "second"]).unwrap();
    assert_eq!(vectors, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let req = &server.captured()[0];
    assert_eq!(req.body["model"], "all-MiniLM-L6-v2");
    assert_eq!(req.body["input"], json!(["first", "second"]));
    assert_eq!(req.authorization.as_deref(), Some("Bearer k-emb"));
}

fn extract_against(
    server: &FakeServer,
    out_dir: &std::path::Path,
    secret: &str,
) -> std::process::Output {
    let cfg = out_dir.with_extension("toml");
    std::fs::write(&cfg, "[backend]\nbackoff_base = 0.0\nmax_retries = 2\n").unwrap();
    run(sdoh()
        .env("LLM_API_KEY", secret)
        .arg("--config")
        .arg(&cfg)
        .arg("extract")
        .arg("--notes")
        .arg(fixture("notes.jsonl"))
        .arg("--backend-url")
        .arg(&server.url)
        .arg("--parallel")
        .arg("2")
        .arg("--out-dir")
        .arg(out_dir))
}

#[test]
fn secret_never_reaches_persisted_artifacts() {
    let secret = "sk-test-7f3a9c0d2e1b";
    let server = FakeServer::start(vec![
        (503, json!({"error": "busy"}).to_string()),
        (200, chat_reply("Age: 76 year old\nGender: female\nEthnicity: White\nSocial History: N/A\nFamily History: N/A")),
    ]);
    let dir = tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = extract_against(&server, &out_dir, secret);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(!stderr(&out).contains(secret));
    assert!(String::from_utf8_lossy(&out.stdout).find(secret).is_none());
    // 6 notes plus one retried request.
    assert_eq!(server.captured().len(), 7);

    let mut scanned = 0;
    let mut stack = vec![dir.path().to_path_buf()];
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            stack.extend(std::fs::read_dir(&p).unwrap().map(|e| e.unwrap().path()));
        } else {
            let bytes = std::fs::read(&p).unwrap();
            assert!(
                !bytes.windows(secret.len()).any(|w| w == secret.as_bytes()),
                "secret found in {}",
                p.display()
            );
            scanned += 1;
        }
    }
    assert!(scanned >= 9, "only {scanned} files scanned");
}

#[test]
fn remote_auth_failure_exits_3() {
    let server = FakeServer::start(vec![(401, json!({"error": "bad key"}).to_string())]);
    let dir = tempdir().unwrap();
    let out = extract_against(&server, &dir.path().join("run"), "k");
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    // Auth is not retried, and the abort stops further requests beyond those in flight.
    assert!(server.captured().len() <= 2);
}

#[test]
fn exhausted_retries_count_as_failures() {
    let server = FakeServer::start(vec![(503, "{}".into())]);
    let dir = tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = extract_against(&server, &out_dir, "k");
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    // max_retries = 2 gives three attempts per note.
    assert_eq!(server.captured().len(), 18);
    let log = std::fs::read_to_string(out_dir.join("extract_log.jsonl")).unwrap();
    assert_eq!(log.matches("\"failed\"").count(), 6);
}
