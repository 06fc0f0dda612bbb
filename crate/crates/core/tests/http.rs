//! Wire-format tests against a minimal in-process HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use inpars::corpus::Document;
use inpars::generator::{
    self, BackendError, CompletionBackend, CompletionRequest, FinishReason, GenerationSettings,
    RemoteBackend,
};
use inpars::promptkit::{FewShotExample, PromptMode, PromptTemplate};
use inpars::rerankeval::{RemoteScorer, RerankScorer};
use serde_json::{json, Value};

struct Recorded {
    headers: Vec<(String, String)>,
    body: Value,
}

struct Server {
    url: String,
    seen: Arc<Mutex<Vec<Recorded>>>,
}

/// Serves the canned `(status, extra header, body)` responses in order, one
/// per connection.
type Canned = (u16, Option<(&'static str, &'static str)>, String);

fn serve(responses: Vec<Canned>) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, header, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut len = 0;
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                let (k, v) = l.split_once(':').unwrap();
                let (k, v) = (k.trim().to_ascii_lowercase(), v.trim().to_string());
                if k == "content-length" {
                    len = v.parse().unwrap();
                }
                headers.push((k, v));
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Recorded {
                headers,
                body: serde_json::from_slice(&buf).unwrap(),
            });
            let extra = header
                .map(|(k, v)| format!("{k}: {v}\r\n"))
                .unwrap_or_default();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n{extra}\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    Server { url, seen }
}

fn completion_body(tokens: &[&str], logprobs: &[f64], finish: &str) -> String {
    json!({
        "choices": [{
            "text": tokens.concat(),
            "logprobs": { "tokens": tokens, "token_logprobs": logprobs },
            "finish_reason": finish,
        }]
    })
    .to_string()
}

fn request(prompt: &str) -> CompletionRequest {
    CompletionRequest {
        max_tokens: 64,
        ..CompletionRequest::new(prompt)
    }
}

#[test]
fn remote_completion_request_and_response() {
    let server = serve(vec![(
        200,
        None,
        completion_body(
            &[" what", " is", " this", "?", "\n", "Example"],
            &[-0.1, -0.2, -0.3, -0.4, -0.5, -0.6],
            "stop",
        ),
    )]);
    let backend = RemoteBackend::new(&server.url, Some("tiny".into()), Duration::from_secs(5))
        .with_api_key(Some("sekrit".into()));
    let mut req = request("Document: x\nRelevant Query:");
    req.top_p = Some(0.9);
    let c = generator::complete(&backend, &req).unwrap();
    assert_eq!(c.text, " what is this?");
    assert_eq!(c.token_logprobs, [-0.1, -0.2, -0.3, -0.4]);
    assert_eq!(c.finish_reason, FinishReason::Stop);

    let seen = server.seen.lock().unwrap();
    let body = &seen[0].body;
    assert_eq!(body["prompt"], "Document: x\nRelevant Query:");
    assert_eq!(body["max_tokens"], 64);
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["stop"], json!(["\n"]));
    assert_eq!(body["logprobs"], 0);
    assert_eq!(body["model"], "tiny");
    assert_eq!(body["top_p"], 0.9);
    assert!(body.get("source_id").is_none());
    assert!(seen[0]
        .headers
        .contains(&("authorization".into(), "Bearer sekrit".into())));
}

#[test]
fn status_codes_map_to_error_kinds() {
    let server = serve(vec![
        (429, Some(("retry-after", "2")), "{}".into()),
        (503, None, "down".into()),
        (400, None, "{\"error\":\"bad\"}".into()),
        (200, None, "{\"choices\":[]}".into()),
    ]);
    let backend = RemoteBackend::new(&server.url, None, Duration::from_secs(5)).with_api_key(None);
    let req = request("p");
    assert_eq!(
        backend.complete(&req),
        Err(BackendError::RateLimited {
            retry_after: Some(Duration::from_secs(2))
        })
    );
    assert!(matches!(
        backend.complete(&req),
        Err(BackendError::Unavailable(_))
    ));
    assert!(matches!(
        backend.complete(&req),
        Err(BackendError::Protocol(_))
    ));
    assert!(matches!(
        backend.complete(&req),
        Err(BackendError::Protocol(_))
    ));
    assert!(server.seen.lock().unwrap()[0]
        .headers
        .iter()
        .all(|(k, _)| k != "authorization"));
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let addr = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap();
    let backend = RemoteBackend::new(format!("http://{addr}/"), None, Duration::from_secs(2));
    assert!(matches!(
        backend.complete(&request("p")),
        Err(BackendError::Unavailable(_))
    ));
}

#[test]
fn generation_retries_transient_failures() {
    let ok = completion_body(
        &[" where", " is", " it", "?", "\n"],
        &[-0.5, -0.5, -0.5, -0.5, -0.1],
        "stop",
    );
    let server = serve(vec![
        (503, None, String::new()),
        (429, None, "{}".into()),
        (200, None, ok),
    ]);
    let backend = RemoteBackend::new(&server.url, None, Duration::from_secs(5));
    let template = PromptTemplate::new(
        PromptMode::Vanilla,
        vec![FewShotExample {
            document_text: "d".into(),
            good_question: "q".into(),
            bad_question: None,
        }],
    )
    .unwrap();
    let settings = GenerationSettings {
        backoff: Duration::from_millis(1),
        ..GenerationSettings::default()
    };
    let doc = Document::new("D1", None, "Some text.");
    let q = generator::generate_for_document(&backend, &template, &doc, &settings).unwrap();
    assert_eq!(q.question, "where is it?");
    assert_eq!(q.mean_logprob, -0.5);
    assert_eq!(server.seen.lock().unwrap().len(), 3);
}

#[test]
fn generation_gives_up_after_retry_budget() {
    let server = serve(vec![(503, None, String::new()); 3]);
    let backend = RemoteBackend::new(&server.url, None, Duration::from_secs(5));
    let template = PromptTemplate::new(
        PromptMode::Vanilla,
        vec![FewShotExample {
            document_text: "d".into(),
            good_question: "q".into(),
            bad_question: None,
        }],
    )
    .unwrap();
    let settings = GenerationSettings {
        retries: 2,
        backoff: Duration::from_millis(1),
        ..GenerationSettings::default()
    };
    let doc = Document::new("D1", None, "Some text.");
    assert!(generator::generate_for_document(&backend, &template, &doc, &settings).is_err());
    assert_eq!(server.seen.lock().unwrap().len(), 3);
}

#[test]
fn remote_scorer_wire_format() {
    let server = serve(vec![
        (200, None, "[0.25, 0.75]".into()),
        (200, None, "[0.5]".into()),
        (200, None, "[1.5, 0.1]".into()),
        (500, None, "boom".into()),
    ]);
    let scorer = RemoteScorer::new(&server.url, Duration::from_secs(5));
    let passages = vec!["first passage".to_string(), "second passage".to_string()];
    assert_eq!(scorer.score_passages("q", &passages).unwrap(), [0.25, 0.75]);
    assert!(scorer.score_passages("q", &passages).is_err());
    assert!(scorer.score_passages("q", &passages).is_err());
    assert!(scorer.score_passages("q", &passages).is_err());
    let seen = server.seen.lock().unwrap();
    assert_eq!(seen[0].body, json!({"query": "q", "passages": passages}));
}
