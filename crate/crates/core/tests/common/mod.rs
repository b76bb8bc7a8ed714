#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::Value;

pub type Handler = dyn Fn(usize, &Value) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server answering every request through `handler`, which
/// receives the zero-based request number and the parsed JSON body.
pub struct MockServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<(Option<String>, Value)>>>,
    pub peak_concurrency: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn start(handler: Box<Handler>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let peak = Arc::new(AtomicUsize::new(0));
        let live = Arc::new(AtomicUsize::new(0));
        let counter = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::from(handler);
        {
            let requests = requests.clone();
            let peak = peak.clone();
            thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { break };
                    let (requests, peak, live, counter, handler) = (
                        requests.clone(),
                        peak.clone(),
                        live.clone(),
                        counter.clone(),
                        handler.clone(),
                    );
                    thread::spawn(move || {
                        serve(stream, &requests, &peak, &live, &counter, handler.as_ref())
                    });
                }
            });
        }
        Self {
            url,
            requests,
            peak_concurrency: peak,
        }
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

fn serve(
    stream: TcpStream,
    requests: &Mutex<Vec<(Option<String>, Value)>>,
    peak: &AtomicUsize,
    live: &AtomicUsize,
    counter: &AtomicUsize,
    handler: &Handler,
) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    let mut auth = None;
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    loop {
        line.clear();
        if reader.read_line(&mut line).unwrap() == 0 {
            return;
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        let lower = l.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
        if lower.starts_with("authorization:") {
            auth = Some(l["authorization:".len()..].trim().to_string());
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    let json: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);

    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
    peak.fetch_max(now, Ordering::SeqCst);
    let n = counter.fetch_add(1, Ordering::SeqCst);
    requests.lock().unwrap().push((auth, json.clone()));
    let (status, reply) = handler(n, &json);
    live.fetch_sub(1, Ordering::SeqCst);

    let mut stream = stream;
    let head = format!(
        "HTTP/1.1 {status} Mock\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        reply.len()
    );
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(reply.as_bytes());
    let _ = stream.flush();
}

pub fn completion_body(texts: &[&str]) -> String {
    let choices: Vec<Value> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| serde_json::json!({"index": i, "text": t, "finish_reason": "stop", "logprobs": null}))
        .collect();
    serde_json::json!({"object": "text_completion", "choices": choices}).to_string()
}

pub fn top_logprobs_body(entries: &[(&str, f64)]) -> String {
    let top: serde_json::Map<String, Value> =
        entries.iter().map(|(k, v)| (k.to_string(), Value::from(*v))).collect();
    serde_json::json!({
        "choices": [{
            "index": 0,
            "text": entries.first().map_or("", |e| e.0),
            "logprobs": {
                "tokens": [entries.first().map_or("", |e| e.0)],
                "token_logprobs": [entries.first().map_or(0.0, |e| e.1)],
                "top_logprobs": [top],
                "text_offset": [0]
            }
        }]
    })
    .to_string()
}
