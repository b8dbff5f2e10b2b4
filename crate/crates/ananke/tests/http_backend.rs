//! Wire-level checks for the OpenAI-compatible client against a scripted
//! local TCP server: request shape, auth header, retry and backoff behavior,
//! and error mapping. No real network involved.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use ananke::llm::{HttpBackend, HttpConfig, HttpEmbedder, LlmBackend, LlmError};
use ananke::vindex::{Embedder, VindexError};

struct StubServer {
    base_url: String,
    requests: Arc<Mutex<Vec<String>>>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Serves the scripted (status, body) responses in order, one connection
    /// each, recording every raw request. Closes each connection after
    /// responding so the client cannot pipeline past the script.
    fn serve(responses: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = match listener.accept() {
                    Ok(conn) => conn,
                    Err(_) => return,
                };
                log.lock().unwrap().push(read_request(&mut stream));
                let reply = format!(
                    "HTTP/1.1 {status} Scripted\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        StubServer { base_url, requests, handle: Some(handle) }
    }

    fn requests(&self) -> Vec<String> {
        self.requests.lock().unwrap().clone()
    }

    fn join(mut self) -> Vec<String> {
        self.handle.take().unwrap().join().unwrap();
        self.requests()
    }
}

fn read_request(stream: &mut std::net::TcpStream) -> String {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 1024];
    // headers first
    while !buf.windows(4).any(|w| w == b"\r\n\r\n") {
        let n = stream.read(&mut chunk).unwrap();
        assert!(n > 0, "client closed mid-headers");
        buf.extend_from_slice(&chunk[..n]);
    }
    let head_end = buf.windows(4).position(|w| w == b"\r\n\r\n").unwrap() + 4;
    let head = String::from_utf8_lossy(&buf[..head_end]).into_owned();
    let content_length: usize = head
        .lines()
        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse().unwrap()))
        .unwrap_or(0);
    while buf.len() < head_end + content_length {
        let n = stream.read(&mut chunk).unwrap();
        assert!(n > 0, "client closed mid-body");
        buf.extend_from_slice(&chunk[..n]);
    }
    String::from_utf8_lossy(&buf).into_owned()
}

fn body_json(raw: &str) -> serde_json::Value {
    let body = raw.split("\r\n\r\n").nth(1).expect("request has a body");
    serde_json::from_str(body).expect("request body is json")
}

fn fast_cfg(base_url: &str) -> HttpConfig {
    let mut cfg = HttpConfig::new(base_url, "test-model");
    cfg.backoff_base = Duration::from_millis(5);
    cfg
}

const CHAT_OK: &str = r#"{
    "choices": [{"message": {"content": "all clear"}}],
    "usage": {"prompt_tokens": 120, "completion_tokens": 30,
              "completion_tokens_details": {"reasoning_tokens": 10}}
}"#;

#[test]
fn sends_openai_chat_shape_and_maps_usage() {
    let server = StubServer::serve(vec![(200, CHAT_OK.to_string())]);
    let mut cfg = fast_cfg(&server.base_url);
    cfg.api_key = Some("sk-test-123".into());
    let backend = HttpBackend::new(cfg);

    let (content, usage) = backend.complete("be terse", "what happened?").unwrap();
    assert_eq!(content, "all clear");
    assert_eq!((usage.prompt_tokens, usage.reasoning_tokens, usage.answer_tokens), (120, 10, 20));

    let requests = server.join();
    assert_eq!(requests.len(), 1);
    let raw = &requests[0];
    assert!(raw.starts_with("POST /v1/chat/completions HTTP/1.1\r\n"), "request line:\n{raw}");
    assert!(raw.to_ascii_lowercase().contains("authorization: bearer sk-test-123"), "headers:\n{raw}");

    let body = body_json(raw);
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][0]["content"], "be terse");
    assert_eq!(body["messages"][1]["role"], "user");
    assert_eq!(body["messages"][1]["content"], "what happened?");
}

#[test]
fn usage_is_optional_and_missing_content_is_an_error() {
    let server = StubServer::serve(vec![
        (200, r#"{"choices": [{"message": {"content": "ok"}}]}"#.to_string()),
        (200, r#"{"choices": []}"#.to_string()),
    ]);
    let backend = HttpBackend::new(fast_cfg(&server.base_url));

    let (_, usage) = backend.complete("s", "u").unwrap();
    assert_eq!(usage.total(), 0);

    match backend.complete("s", "u") {
        Err(LlmError::Transport { status: 200, detail }) => assert!(detail.contains("without content"), "{detail}"),
        other => panic!("expected content error, got {other:?}"),
    }
    server.join();
}

#[test]
fn rate_limits_are_retried_with_backoff() {
    let server = StubServer::serve(vec![
        (429, r#"{"error": "slow down"}"#.to_string()),
        (429, r#"{"error": "slow down"}"#.to_string()),
        (200, CHAT_OK.to_string()),
    ]);
    let backend = HttpBackend::new(fast_cfg(&server.base_url));

    let start = Instant::now();
    let (content, _) = backend.complete("s", "u").unwrap();
    assert_eq!(content, "all clear");
    // two sleeps at 5ms and 10ms
    assert!(start.elapsed() >= Duration::from_millis(15), "backoff skipped: {:?}", start.elapsed());
    assert_eq!(server.join().len(), 3);
}

#[test]
fn server_errors_exhaust_retries_then_surface() {
    // max_retries 2 means three attempts total
    let server = StubServer::serve(vec![
        (500, "boom".to_string()),
        (502, "boom".to_string()),
        (503, "final failure detail".to_string()),
    ]);
    let mut cfg = fast_cfg(&server.base_url);
    cfg.max_retries = 2;
    let backend = HttpBackend::new(cfg);

    match backend.complete("s", "u") {
        Err(LlmError::Transport { status: 503, detail }) => assert!(detail.contains("final failure detail")),
        other => panic!("expected exhausted transport error, got {other:?}"),
    }
    assert_eq!(server.join().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = StubServer::serve(vec![(404, r#"{"error": "no such model"}"#.to_string())]);
    let backend = HttpBackend::new(fast_cfg(&server.base_url));

    match backend.complete("s", "u") {
        Err(LlmError::Transport { status: 404, detail }) => assert!(detail.contains("no such model")),
        other => panic!("expected 404 transport error, got {other:?}"),
    }
    assert_eq!(server.join().len(), 1, "a 404 must not be retried");
}

#[test]
fn connection_refused_maps_to_transport() {
    // bind then drop to find a port nothing listens on
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let backend = HttpBackend::new(fast_cfg(&format!("http://127.0.0.1:{port}/v1")));
    match backend.complete("s", "u") {
        Err(LlmError::Transport { status: 0, .. }) => {}
        other => panic!("expected transport status 0, got {other:?}"),
    }
}

#[test]
fn embedder_posts_input_and_checks_dimension() {
    let dim = 8;
    let good: Vec<f32> = (0..dim).map(|i| i as f32 / 10.0).collect();
    let server = StubServer::serve(vec![
        (200, format!(r#"{{"data": [{{"embedding": {good:?}}}]}}"#)),
        (200, r#"{"data": [{"embedding": [1.0, 2.0]}]}"#.to_string()),
    ]);
    let embedder = HttpEmbedder::new(fast_cfg(&server.base_url), dim);
    assert_eq!(embedder.id(), "http-test-model-8");

    let vector = embedder.embed("some log text").unwrap();
    assert_eq!(vector.values(), &good[..]);

    match embedder.embed("again") {
        Err(VindexError::DimensionMismatch { expected: 8, found: 2 }) => {}
        other => panic!("expected dimension mismatch, got {other:?}"),
    }

    let requests = server.join();
    assert!(requests[0].starts_with("POST /v1/embeddings HTTP/1.1\r\n"));
    let body = body_json(&requests[0]);
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["input"], serde_json::json!(["some log text"]));
}
