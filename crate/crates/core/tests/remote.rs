//! Remote backend against a minimal in-process HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use corap::data::Example;
use corap::generation::{
    GenerationBackend, GenerationError, RemoteBackend, RemoteConfig, SamplerConfig,
};
use corap::seed::SeedTree;
use serde_json::{json, Value};

type Handler = Box<dyn Fn(usize, &str, &Value) -> (u16, Value) + Send>;

/// Serves `requests` connections, answering each with `handler(i, path, body)`.
/// Returns the base url and the log of (path, body) pairs.
fn serve(requests: usize, handler: Handler) -> (String, Arc<Mutex<Vec<(String, Value)>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let log = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&log);
    thread::spawn(move || {
        for i in 0..requests {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_owned();
            let mut len = 0;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                if let Some((k, v)) = h.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            let (status, reply) = handler(i, &path, &body);
            seen.lock().unwrap().push((path, body));
            let text = reply.to_string();
            let mut s = stream;
            write!(
                s,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            )
            .unwrap();
        }
    });
    (url, log)
}

fn example() -> Example {
    Example::new(
        "r1",
        "what is 2 plus 3?",
        vec!["two plus three is five".into()],
        "5",
    )
}

fn config(url: &str) -> RemoteConfig {
    RemoteConfig {
        timeout_secs: 5.0,
        retries: 0,
        ..RemoteConfig::new(url)
    }
}

#[test]
fn single_phase_generation() {
    let (url, log) = serve(
        1,
        Box::new(|_, _, _| {
            (
                200,
                json!({"steps": ["two plus three is five"], "answer": "5",
                       "full_token_logprobs": [-0.1, -0.2, -0.3], "answer_token_logprobs": [-0.05]}),
            )
        }),
    );
    let backend = RemoteBackend::new(config(&url));
    let seq = backend
        .sample(&example(), &SamplerConfig::default(), &SeedTree::new(1))
        .unwrap();
    assert_eq!(seq.answer(), "5");
    assert_eq!(seq.full_token_logprobs(), &[-0.1, -0.2, -0.3]);
    let log = log.lock().unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].0, "/generate");
    assert_eq!(log[0].1["temperature"], 1.2);
    assert!(log[0].1.get("seed").is_none());
    assert!(!backend.capabilities().reproducible);
}

#[test]
fn two_phase_scoring_calls_score() {
    let (url, log) = serve(
        2,
        Box::new(|_, path, _| match path {
            "/generate" => (
                200,
                json!({"steps": ["a"], "answer": "5", "full_token_logprobs": [-0.4]}),
            ),
            _ => (200, json!({"answer_token_logprobs": [-0.2, -0.3]})),
        }),
    );
    let backend = RemoteBackend::new(RemoteConfig {
        honors_seed: true,
        ..config(&url)
    });
    let stream = SeedTree::new(9);
    let seq = backend
        .sample(&example(), &SamplerConfig::default(), &stream)
        .unwrap();
    assert_eq!(seq.answer_token_logprobs(), &[-0.2, -0.3]);
    let log = log.lock().unwrap();
    assert_eq!(log[0].1["seed"], stream.seed_u64());
    assert_eq!(log[1].0, "/score");
    assert_eq!(log[1].1["answer"], "5");
    assert_eq!(log[1].1["steps"], json!(["a"]));
}

#[test]
fn missing_full_logprobs_is_reported() {
    let (url, _) = serve(
        1,
        Box::new(|_, _, _| (200, json!({"steps": [], "answer": "5"}))),
    );
    let backend = RemoteBackend::new(config(&url));
    match backend.sample(&example(), &SamplerConfig::default(), &SeedTree::new(1)) {
        Err(GenerationError::MissingField(f)) => assert_eq!(f, "full_token_logprobs"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn server_errors_are_retried() {
    let (url, log) = serve(
        3,
        Box::new(|i, _, _| {
            if i < 2 {
                (503, json!({"error": "busy"}))
            } else {
                (
                    200,
                    json!({"steps": ["x"], "answer": "5", "full_token_logprobs": [-1.0], "answer_token_logprobs": [-0.1]}),
                )
            }
        }),
    );
    let backend = RemoteBackend::new(RemoteConfig {
        retries: 2,
        ..config(&url)
    });
    assert!(backend
        .sample(&example(), &SamplerConfig::default(), &SeedTree::new(1))
        .is_ok());
    assert_eq!(log.lock().unwrap().len(), 3);
}

#[test]
fn exhausted_retries_are_unavailable() {
    let (url, _) = serve(2, Box::new(|_, _, _| (500, json!({}))));
    let backend = RemoteBackend::new(RemoteConfig {
        retries: 1,
        ..config(&url)
    });
    match backend.sample(&example(), &SamplerConfig::default(), &SeedTree::new(1)) {
        Err(GenerationError::Unavailable(_)) => {}
        other => panic!("unexpected {other:?}"),
    }
}
