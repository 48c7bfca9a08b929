//! Shared fixtures for the integration suites: a scriptable HTTP stub that
//! speaks enough HTTP/1.1 for the blocking client, plus corpus and model
//! builders sized for fast tests.
#![allow(dead_code)]

pub mod oracle;

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use slmforge::corpus::{build_dataset, format_instance, DatasetShards, PromptPair, Task};
use slmforge::distiller::{grammar_generate, GrammarTeacherSpec, IntentRecord};
use slmforge::tokenizer::{train_bpe, ControlToken, TokenizerArtifact};

/// One captured request: start line, lowercased headers, raw body.
#[derive(Debug, Clone)]
pub struct CapturedRequest {
    pub start_line: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl CapturedRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        let want = name.to_ascii_lowercase();
        self.headers
            .iter()
            .find(|(k, _)| *k == want)
            .map(|(_, v)| v.as_str())
    }
}

/// What the stub returns for one request.
#[derive(Debug, Clone)]
pub struct StubResponse {
    pub status: u16,
    pub body: String,
    /// Held while the request counts as in flight, so concurrency is
    /// observable.
    pub hold: Duration,
}

impl StubResponse {
    pub fn ok(body: impl Into<String>) -> Self {
        StubResponse {
            status: 200,
            body: body.into(),
            hold: Duration::ZERO,
        }
    }

    pub fn status(code: u16, body: impl Into<String>) -> Self {
        StubResponse {
            status: code,
            body: body.into(),
            hold: Duration::ZERO,
        }
    }

    pub fn held(mut self, hold: Duration) -> Self {
        self.hold = hold;
        self
    }
}

/// A chat-completions body with one choice per content string.
pub fn chat_body(contents: &[&str]) -> String {
    let choices: Vec<serde_json::Value> = contents
        .iter()
        .map(|c| serde_json::json!({"message": {"content": c}}))
        .collect();
    serde_json::json!({ "choices": choices }).to_string()
}

type Responder = dyn Fn(usize, &CapturedRequest) -> StubResponse + Send + Sync;

/// Minimal scripted HTTP server. Each connection is served on its own
/// thread; `max_in_flight` records the concurrency high-water mark over
/// fully read requests.
pub struct StubServer {
    endpoint: String,
    hits: Arc<AtomicUsize>,
    in_flight: Arc<AtomicUsize>,
    max_in_flight: Arc<AtomicUsize>,
    requests: Arc<Mutex<Vec<CapturedRequest>>>,
    stop: Arc<AtomicBool>,
    addr: std::net::SocketAddr,
}

impl StubServer {
    pub fn start<F>(respond: F) -> Self
    where
        F: Fn(usize, &CapturedRequest) -> StubResponse + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
        let addr = listener.local_addr().expect("stub addr");
        let hits = Arc::new(AtomicUsize::new(0));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let max_in_flight = Arc::new(AtomicUsize::new(0));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let respond: Arc<Responder> = Arc::new(respond);

        {
            let hits = hits.clone();
            let in_flight = in_flight.clone();
            let max_in_flight = max_in_flight.clone();
            let requests = requests.clone();
            let stop = stop.clone();
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let hits = hits.clone();
                    let in_flight = in_flight.clone();
                    let max_in_flight = max_in_flight.clone();
                    let requests = requests.clone();
                    let respond = respond.clone();
                    std::thread::spawn(move || {
                        serve_one(
                            stream,
                            &hits,
                            &in_flight,
                            &max_in_flight,
                            &requests,
                            respond.as_ref(),
                        );
                    });
                }
            });
        }

        StubServer {
            endpoint: format!("http://{addr}/v1/chat/completions"),
            hits,
            in_flight,
            max_in_flight,
            requests,
            stop,
            addr,
        }
    }

    pub fn endpoint(&self) -> String {
        self.endpoint.clone()
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<CapturedRequest> {
        self.requests.lock().expect("requests lock").clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Poke the accept loop so it observes the stop flag.
        let _ = TcpStream::connect(self.addr);
    }
}

fn serve_one(
    mut stream: TcpStream,
    hits: &AtomicUsize,
    in_flight: &AtomicUsize,
    max_in_flight: &AtomicUsize,
    requests: &Mutex<Vec<CapturedRequest>>,
    respond: &Responder,
) {
    let Some(req) = read_request(&mut stream) else {
        return;
    };
    let cur = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    max_in_flight.fetch_max(cur, Ordering::SeqCst);
    let hit = hits.fetch_add(1, Ordering::SeqCst);
    requests.lock().expect("requests lock").push(req.clone());

    let resp = respond(hit, &req);
    if !resp.hold.is_zero() {
        std::thread::sleep(resp.hold);
    }
    in_flight.fetch_sub(1, Ordering::SeqCst);

    let reason = match resp.status {
        200 => "OK",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    };
    let reply = format!(
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        resp.status,
        reason,
        resp.body.len(),
        resp.body
    );
    let _ = stream.write_all(reply.as_bytes());
    let _ = stream.flush();
}

fn read_request(stream: &mut TcpStream) -> Option<CapturedRequest> {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    let mut raw = Vec::new();
    let mut buf = [0u8; 16384];
    let (head_end, content_len) = loop {
        let n = stream.read(&mut buf).ok()?;
        if n == 0 {
            return None;
        }
        raw.extend_from_slice(&buf[..n]);
        if let Some(pos) = find_blank_line(&raw) {
            let head = String::from_utf8_lossy(&raw[..pos]);
            let len = head
                .lines()
                .find_map(|l| {
                    let (k, v) = l.split_once(':')?;
                    k.trim()
                        .eq_ignore_ascii_case("content-length")
                        .then(|| v.trim().parse::<usize>().ok())?
                })
                .unwrap_or(0);
            break (pos + 4, len);
        }
    };
    while raw.len() < head_end + content_len {
        let n = stream.read(&mut buf).ok()?;
        if n == 0 {
            break;
        }
        raw.extend_from_slice(&buf[..n]);
    }

    let head = String::from_utf8_lossy(&raw[..head_end - 4]).to_string();
    let mut lines = head.lines();
    let start_line = lines.next().unwrap_or_default().to_string();
    let headers = lines
        .filter_map(|l| {
            let (k, v) = l.split_once(':')?;
            Some((k.trim().to_ascii_lowercase(), v.trim().to_string()))
        })
        .collect();
    let body = String::from_utf8_lossy(&raw[head_end..head_end + content_len.min(raw.len() - head_end)])
        .to_string();
    Some(CapturedRequest {
        start_line,
        headers,
        body,
    })
}

fn find_blank_line(raw: &[u8]) -> Option<usize> {
    raw.windows(4).position(|w| w == b"\r\n\r\n")
}

/// A sleeper that records requested delays without waiting, so retry tests
/// run at full speed while still asserting the backoff schedule.
#[derive(Default)]
pub struct RecordingSleeper {
    delays: Mutex<Vec<Duration>>,
}

impl RecordingSleeper {
    pub fn shared() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn delays(&self) -> Vec<Duration> {
        self.delays.lock().expect("delays lock").clone()
    }
}

impl slmforge::distiller::Sleeper for RecordingSleeper {
    fn sleep(&self, d: Duration) {
        self.delays.lock().expect("delays lock").push(d);
    }
}

/// Forwards to a shared recorder; lets tests keep a handle while the client
/// owns the boxed sleeper.
pub struct SharedSleeper(pub Arc<RecordingSleeper>);

impl slmforge::distiller::Sleeper for SharedSleeper {
    fn sleep(&self, d: Duration) {
        self.0.sleep(d);
    }
}

pub fn intent_records(n: usize) -> Vec<IntentRecord> {
    (0..n)
        .map(|i| {
            IntentRecord::new(vec![
                ("Topic", format!("topic {i}")),
                ("Scene object", format!("object {i}")),
            ])
        })
        .collect()
}

/// Deterministic grammar corpus: every record crossed with both tasks and
/// all targets, one pair each.
pub fn grammar_pairs(n_records: usize, targets: &[u32], seed: u64) -> Vec<PromptPair> {
    let spec = GrammarTeacherSpec::standard(seed);
    let mut pairs = Vec::new();
    for (i, record) in intent_records(n_records).iter().enumerate() {
        for task in [Task::Ip, Task::Tp] {
            for &target in targets {
                let prompt =
                    grammar_generate(record, task, target, seed ^ (i as u64) << 1, &spec)
                        .expect("grammar prompt");
                pairs.push(PromptPair {
                    intent: record.rendered(),
                    prompt,
                    task,
                    source: None,
                });
            }
        }
    }
    pairs
}

/// Concatenated training text for the pairs, one instance per line.
pub fn instances_text(pairs: &[PromptPair]) -> String {
    let mut text = String::new();
    for p in pairs {
        text.push_str(&format_instance(p).expect("instance").text);
        text.push('\n');
    }
    text
}

pub fn micro_artifact(pairs: &[PromptPair], vocab: usize) -> TokenizerArtifact {
    train_bpe(
        instances_text(pairs).as_bytes(),
        vocab,
        &ControlToken::standard_set(),
    )
    .expect("tokenizer")
}

pub fn micro_shards(
    pairs: &[PromptPair],
    artifact: &TokenizerArtifact,
    block_size: usize,
) -> DatasetShards {
    build_dataset(pairs, artifact, block_size, 0.1, 1337).expect("shards")
}
