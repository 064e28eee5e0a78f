use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use ercforge_core::backend::{AdapterParams, RemoteBackend, RemoteConfig};
use ercforge_core::prompting::ExampleMeta;
use ercforge_core::*;

struct Request {
    method: String,
    path: String,
    authorization: Option<String>,
    body: Value,
}

type Handler = dyn Fn(&Request, usize) -> (u16, Value) + Send + Sync;

/// Minimal HTTP/1.1 server; `handler` gets each request and a global
/// request counter. Closes the connection after every response.
fn serve(handler: Arc<Handler>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let count = Arc::new(AtomicUsize::new(0));
    let counter = count.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let handler = handler.clone();
            thread::spawn(move || handle(stream, n, &*handler));
        }
    });
    (format!("http://{addr}"), count)
}

fn handle(stream: TcpStream, n: usize, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut length = 0;
    let mut authorization = None;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header).unwrap();
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        let (name, value) = header.split_once(':').unwrap();
        match name.to_ascii_lowercase().as_str() {
            "content-length" => length = value.trim().parse().unwrap(),
            "authorization" => authorization = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    let body = if body.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&body).unwrap()
    };
    let (status, reply) = handler(
        &Request {
            method,
            path,
            authorization,
            body,
        },
        n,
    );
    let reply = reply.to_string();
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
        reply.len()
    )
    .unwrap();
}

fn backend(base: &str) -> RemoteBackend {
    let mut config = RemoteConfig::new(base, "base-llm");
    config.retry.initial_backoff = Duration::from_millis(5);
    config.poll_interval = Duration::from_millis(5);
    config.api_key = Some("secret".into());
    RemoteBackend::new(config).unwrap()
}

#[test]
fn generate_sends_request_fields() {
    let (base, _) = serve(Arc::new(|req: &Request, _| {
        assert_eq!((req.method.as_str(), req.path.as_str()), ("POST", "/generate"));
        assert_eq!(req.authorization.as_deref(), Some("Bearer secret"));
        assert_eq!(req.body["model"], "base-llm");
        assert_eq!(req.body["max_new_tokens"], 8);
        assert_eq!(req.body["temperature"], 0.0);
        (
            200,
            json!({"text": "Listener looks surprised and excited.", "finish_reason": "stop"}),
        )
    }));
    let b = backend(&base);
    let out = b
        .generate(&b.base_handle(), &GenerationRequest::new("prompt", 8))
        .unwrap();
    assert_eq!(out.text, "Listener looks surprised and excited.");
    assert_eq!(out.token_count, 5);
}

#[test]
fn status_codes_map_to_errors() {
    let (base, _) = serve(Arc::new(|req: &Request, _| match req.body["prompt"].as_str() {
        Some("missing") => (404, json!({"error": "no such model"})),
        Some("huge") => (413, json!({"error": "too long"})),
        _ => (400, json!({"error": "bad"})),
    }));
    let b = backend(&base);
    let h = b.base_handle();
    assert!(matches!(
        b.generate(&h, &GenerationRequest::new("missing", 4)),
        Err(BackendError::ModelNotFound(m)) if m == "base-llm"
    ));
    assert!(matches!(
        b.generate(&h, &GenerationRequest::new("huge", 4)),
        Err(BackendError::BudgetExceeded(_))
    ));
    assert!(matches!(
        b.generate(&h, &GenerationRequest::new("other", 4)),
        Err(BackendError::Http { status: 400, .. })
    ));
}

#[test]
fn server_errors_are_retried() {
    let (base, count) = serve(Arc::new(|_: &Request, n| {
        if n < 2 {
            (503, json!({"error": "overloaded"}))
        } else {
            (200, json!({"text": "ok", "finish_reason": "length"}))
        }
    }));
    let b = backend(&base);
    let out = b.generate(&b.base_handle(), &GenerationRequest::new("p", 6)).unwrap();
    assert_eq!(out.text, "ok");
    assert_eq!(out.token_count, 6);
    assert_eq!(count.load(Ordering::SeqCst), 3);

    let (base, count) = serve(Arc::new(|_: &Request, _| (500, json!({"error": "down"}))));
    let b = backend(&base);
    let err = b
        .generate(&b.base_handle(), &GenerationRequest::new("p", 6))
        .unwrap_err();
    assert!(matches!(err, BackendError::Http { status: 500, .. }));
    assert_eq!(count.load(Ordering::SeqCst), 3);
}

fn example(stage: u8) -> InstructionExample {
    InstructionExample::new("input".into(), "happy".into(), stage, ExampleMeta::default())
}

#[test]
fn finetune_polls_until_done() {
    let (base, _) = serve(Arc::new(|req: &Request, _| {
        match (req.method.as_str(), req.path.as_str()) {
            ("POST", "/finetune") => {
                assert_eq!(req.body["base_model"], "base-llm");
                assert_eq!(req.body["dataset_url_or_inline"][0]["target"], "happy");
                assert_eq!(req.body["hyperparams"]["epochs"], 2);
                (200, json!({"job_id": "job-1"}))
            }
            ("GET", "/jobs/job-1") => (200, json!({"status": "done", "model": "tuned-1"})),
            other => panic!("unexpected {other:?}"),
        }
    }));
    let b = backend(&base);
    let params = AdapterParams {
        epochs: 2,
        ..Default::default()
    };
    let h = b.finetune(&b.base_handle(), &[example(2)], &params).unwrap();
    assert_eq!(h.model_id, "tuned-1");
    assert_eq!(h.stage_lineage.len(), 1);
    assert_eq!(h.stage_lineage[0].stage, 2);
}

#[test]
fn failed_job_is_reported() {
    let polls = Arc::new(AtomicUsize::new(0));
    let seen = polls.clone();
    let (base, _) = serve(Arc::new(move |req: &Request, _| {
        if req.path == "/finetune" {
            return (200, json!({"job_id": "j"}));
        }
        if seen.fetch_add(1, Ordering::SeqCst) < 2 {
            (200, json!({"status": "running"}))
        } else {
            (200, json!({"status": "failed", "error": "out of memory"}))
        }
    }));
    let b = backend(&base);
    let err = b
        .finetune(&b.base_handle(), &[example(1)], &AdapterParams::default())
        .unwrap_err();
    assert_eq!(
        err,
        BackendError::JobFailed {
            job_id: "j".into(),
            message: "out of memory".into()
        }
    );
    assert_eq!(polls.load(Ordering::SeqCst), 3);
}
