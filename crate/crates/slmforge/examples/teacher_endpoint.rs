//! Point the HTTP teacher at a local stub endpoint and watch the retry
//! path: the first request is rate-limited with 429, the retry succeeds.
//! The stub speaks just enough HTTP/1.1 for a blocking JSON client.
//!
//! The real credential is read from the SLMFORGE_TEACHER_KEY environment
//! variable; this example sets nothing and sends unauthenticated requests.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use anyhow::Result;
use slmforge::corpus::Task;
use slmforge::distiller::{HttpTeacher, HttpTeacherConfig, IntentRecord, Teacher};

fn respond(status: &str, body: &str) -> String {
    format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
}

fn main() -> Result<()> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let endpoint = format!("http://{}/v1/chat/completions", listener.local_addr()?);
    let hits = Arc::new(AtomicUsize::new(0));

    let server_hits = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut buf = [0u8; 65536];
            let mut req = Vec::new();
            // Read until the JSON body is complete (headers + content-length).
            loop {
                let n = stream.read(&mut buf).unwrap_or(0);
                if n == 0 {
                    break;
                }
                req.extend_from_slice(&buf[..n]);
                let text = String::from_utf8_lossy(&req);
                if let Some(split) = text.find("\r\n\r\n") {
                    let need: usize = text
                        .lines()
                        .find_map(|l| l.strip_prefix("content-length: "))
                        .or_else(|| {
                            text.lines().find_map(|l| l.strip_prefix("Content-Length: "))
                        })
                        .and_then(|v| v.trim().parse().ok())
                        .unwrap_or(0);
                    if req.len() >= split + 4 + need {
                        break;
                    }
                }
            }
            let hit = server_hits.fetch_add(1, Ordering::SeqCst);
            let reply = if hit == 0 {
                respond("429 Too Many Requests", r#"{"error": "rate limited"}"#)
            } else {
                let content = "1. glowing paper lantern floating over a night market\\n\
                               2. warm lantern light on a rainy festival street";
                respond(
                    "200 OK",
                    &format!(r#"{{"choices":[{{"message":{{"content":"{content}"}}}}]}}"#),
                )
            };
            let _ = stream.write_all(reply.as_bytes());
        }
    });

    let mut cfg = HttpTeacherConfig::new(endpoint);
    cfg.retry.base_delay = std::time::Duration::from_millis(20);
    let teacher = HttpTeacher::new(cfg, None)?;

    let record = IntentRecord::new(vec![
        ("Topic", "festival"),
        ("Scene object", "paper lantern"),
    ]);
    let prompts = teacher.prompts_for(&record, Task::Ip, 2)?;

    println!("requests the stub saw: {}", hits.load(Ordering::SeqCst));
    println!("prompts after the 429 retry:");
    for p in &prompts {
        println!("  {p}");
    }
    assert_eq!(hits.load(Ordering::SeqCst), 2, "429 then 200");
    assert_eq!(prompts.len(), 2);
    Ok(())
}
