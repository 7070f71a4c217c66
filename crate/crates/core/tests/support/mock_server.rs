//! Minimal OpenAI-style `/v1/completions` server for tests.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub enum Behavior {
    /// Echo the prompt as whitespace-split tokens with deterministic logprobs.
    Echo,
    /// Like `Echo`, but answer 400 whenever `max_tokens` is 0.
    RejectZeroTokens,
    /// Answer 503 to the first `n` requests, then behave like `Echo`.
    FailFirst(usize),
    /// Always answer with this status and body.
    Status(u16, String),
    /// 200 with no logprobs field.
    NoLogprobs,
}

pub struct MockServer {
    pub url: String,
    requests: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<Value>>>,
}

impl MockServer {
    pub fn start(behavior: Behavior) -> MockServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let (r, b) = (requests.clone(), bodies.clone());
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let (behavior, r, b) = (behavior.clone(), r.clone(), b.clone());
                thread::spawn(move || serve(stream, &behavior, &r, &b));
            }
        });
        MockServer { url, requests, bodies }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn bodies(&self) -> Vec<Value> {
        self.bodies.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, behavior: &Behavior, count: &AtomicUsize, bodies: &Mutex<Vec<Value>>) {
    let mut writer = stream.try_clone().unwrap();
    let mut reader = BufReader::new(stream);
    loop {
        let mut content_length = 0usize;
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    content_length = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0u8; content_length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let n = count.fetch_add(1, Ordering::SeqCst);
        let request: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
        bodies.lock().unwrap().push(request.clone());
        let (status, payload) = respond(behavior, n, &request);
        let reason = if status == 200 { "OK" } else { "Error" };
        let head = format!(
            "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            payload.len()
        );
        if writer.write_all(head.as_bytes()).is_err() || writer.write_all(payload.as_bytes()).is_err() {
            return;
        }
    }
}

/// Splits text into tokens that each start at a whitespace boundary.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens: Vec<String> = Vec::new();
    let mut cur = String::new();
    let mut prev_ws = false;
    for c in text.chars() {
        let ws = c.is_whitespace();
        if ws && !prev_ws && !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
        cur.push(c);
        prev_ws = ws;
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

/// Deterministic pseudo log-probability of a token given its offset.
pub fn token_logprob(token: &str, offset: usize) -> f64 {
    let mut h: u64 = 1469598103934665603;
    for b in token.bytes().chain(offset.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(1099511628211);
    }
    -((h % 4000) as f64) / 1000.0 - 0.01
}

fn echo(request: &Value) -> Value {
    let prompt = request["prompt"].as_str().unwrap_or("");
    let mut tokens = tokenize(prompt);
    if request["max_tokens"].as_u64().unwrap_or(0) > 0 {
        tokens.push(" generated".to_string());
    }
    let mut offsets = Vec::new();
    let mut lps = Vec::new();
    let mut at = 0;
    for (i, t) in tokens.iter().enumerate() {
        offsets.push(at);
        lps.push(if i == 0 {
            Value::Null
        } else {
            json!(token_logprob(t, at))
        });
        at += t.chars().count();
    }
    json!({
        "id": "cmpl-test",
        "object": "text_completion",
        "choices": [{
            "index": 0,
            "text": tokens.concat(),
            "logprobs": {
                "tokens": tokens,
                "token_logprobs": lps,
                "text_offset": offsets,
            },
            "finish_reason": "length",
        }],
    })
}

fn respond(behavior: &Behavior, n: usize, request: &Value) -> (u16, String) {
    match behavior {
        Behavior::Echo => (200, echo(request).to_string()),
        Behavior::RejectZeroTokens => {
            if request["max_tokens"].as_u64() == Some(0) {
                (400, json!({"error": "max_tokens must be at least 1"}).to_string())
            } else {
                (200, echo(request).to_string())
            }
        }
        Behavior::FailFirst(k) => {
            if n < *k {
                (503, "overloaded".to_string())
            } else {
                (200, echo(request).to_string())
            }
        }
        Behavior::Status(code, body) => (*code, body.clone()),
        Behavior::NoLogprobs => (
            200,
            json!({"choices": [{"text": request["prompt"], "logprobs": null}]}).to_string(),
        ),
    }
}
