//! HTTP teacher behavior against a scripted local endpoint: bounded
//! concurrency, retry/backoff schedule, auth header handling, and terminal
//! failure classification.

mod support;

use std::time::Duration;

use slmforge::corpus::{read_pairs_jsonl, Task};
use slmforge::distiller::{
    distill_run, DistillError, HttpTeacher, HttpTeacherConfig, SafetyFilter, Teacher,
    TeacherTemplate,
};
use support::{chat_body, RecordingSleeper, SharedSleeper, StubServer, StubResponse};

fn teacher_with_recorder(
    endpoint: String,
    api_key: Option<String>,
) -> (HttpTeacher, std::sync::Arc<RecordingSleeper>) {
    let recorder = RecordingSleeper::shared();
    let mut cfg = HttpTeacherConfig::new(endpoint);
    cfg.retry.base_delay = Duration::from_millis(200);
    cfg.retry.max_delay = Duration::from_secs(4);
    let teacher = HttpTeacher::with_parts(
        cfg,
        TeacherTemplate::default_for(Task::Ip),
        TeacherTemplate::default_for(Task::Tp),
        api_key,
        Box::new(SharedSleeper(recorder.clone())),
    )
    .expect("teacher");
    (teacher, recorder)
}

#[test]
fn max_in_flight_requests_equal_the_configured_limit() {
    let server = StubServer::start(|_, _| {
        StubResponse::ok(chat_body(&["one fine prompt", "another fine prompt"]))
            .held(Duration::from_millis(60))
    });
    let (teacher, _) = teacher_with_recorder(server.endpoint(), None);

    let records = support::intent_records(12);
    let dir = tempfile::tempdir().expect("tempdir");
    let filter = SafetyFilter::new(Vec::<String>::new());
    let report = distill_run(&records, &teacher, &filter, 2, 3, dir.path()).expect("run");

    assert_eq!(report.failures.len(), 0);
    assert_eq!(server.hits(), 24, "one request per (record, task)");
    assert_eq!(
        server.max_in_flight(),
        3,
        "in-flight requests must saturate exactly the configured limit"
    );
}

#[test]
fn rate_limited_then_ok_succeeds_with_exponential_backoff() {
    let server = StubServer::start(|hit, _| {
        if hit < 2 {
            StubResponse::status(429, r#"{"error":"slow down"}"#)
        } else {
            StubResponse::ok(chat_body(&["prompt alpha", "prompt beta"]))
        }
    });
    let (teacher, recorder) = teacher_with_recorder(server.endpoint(), None);

    let record = &support::intent_records(1)[0];
    let prompts = teacher.prompts_for(record, Task::Ip, 2).expect("prompts");
    assert_eq!(prompts, vec!["prompt alpha".to_string(), "prompt beta".to_string()]);
    assert_eq!(server.hits(), 3, "two 429s then success");

    let delays = recorder.delays();
    assert_eq!(delays.len(), 2, "one sleep per retry");
    let base = Duration::from_millis(200);
    for (attempt, d) in delays.iter().enumerate() {
        let floor = base * 2u32.pow(attempt as u32);
        let ceiling = floor + base / 2;
        assert!(
            *d >= floor && *d < ceiling,
            "retry {attempt} slept {d:?}, outside [{floor:?}, {ceiling:?})"
        );
    }
}

#[test]
fn server_errors_are_retried_and_exhaustion_reports_attempts() {
    let server = StubServer::start(|_, _| StubResponse::status(503, "overloaded"));
    let (teacher, recorder) = teacher_with_recorder(server.endpoint(), None);

    let record = &support::intent_records(1)[0];
    let err = teacher.prompts_for(record, Task::Tp, 2).unwrap_err();
    match err {
        DistillError::ExhaustedRetries { attempts, .. } => {
            assert_eq!(attempts, 4, "initial try plus three retries")
        }
        other => panic!("expected retry exhaustion, got {other:?}"),
    }
    assert_eq!(server.hits(), 4);
    assert_eq!(recorder.delays().len(), 3);
}

#[test]
fn bearer_token_from_key_is_attached_and_absent_without_key() {
    let server = StubServer::start(|_, _| StubResponse::ok(chat_body(&["p one", "p two"])));
    let (teacher, _) = teacher_with_recorder(server.endpoint(), Some("sk-test-123".into()));
    let record = &support::intent_records(1)[0];
    teacher.prompts_for(record, Task::Ip, 2).expect("prompts");

    let reqs = server.requests();
    assert!(!reqs.is_empty());
    assert_eq!(reqs[0].header("authorization"), Some("Bearer sk-test-123"));

    let server2 = StubServer::start(|_, _| StubResponse::ok(chat_body(&["p one", "p two"])));
    let (teacher2, _) = teacher_with_recorder(server2.endpoint(), None);
    teacher2.prompts_for(record, Task::Ip, 2).expect("prompts");
    assert_eq!(server2.requests()[0].header("authorization"), None);
}

#[test]
fn undecodable_reply_is_terminal_not_retried() {
    let server = StubServer::start(|_, _| StubResponse::ok("this is not json"));
    let (teacher, recorder) = teacher_with_recorder(server.endpoint(), None);

    let record = &support::intent_records(1)[0];
    let err = teacher.prompts_for(record, Task::Ip, 2).unwrap_err();
    match err {
        DistillError::Unparseable { raw } => assert!(raw.contains("this is not json")),
        other => panic!("expected unparseable, got {other:?}"),
    }
    assert_eq!(server.hits(), 1, "malformed content is not a retry case");
    assert!(recorder.delays().is_empty());
}

#[test]
fn client_errors_other_than_429_are_terminal() {
    let server = StubServer::start(|_, _| StubResponse::status(400, r#"{"error":"bad"}"#));
    let (teacher, recorder) = teacher_with_recorder(server.endpoint(), None);
    let record = &support::intent_records(1)[0];
    let err = teacher.prompts_for(record, Task::Ip, 2).unwrap_err();
    match err {
        DistillError::HttpStatus { status, .. } => assert_eq!(status, 400),
        other => panic!("expected status error, got {other:?}"),
    }
    assert_eq!(server.hits(), 1);
    assert!(recorder.delays().is_empty());
}

#[test]
fn request_body_carries_model_messages_and_sampling_knobs() {
    let server = StubServer::start(|_, _| StubResponse::ok(chat_body(&["a", "b"])));
    let (teacher, _) = teacher_with_recorder(server.endpoint(), None);
    let record = &support::intent_records(1)[0];
    teacher.prompts_for(record, Task::Ip, 2).expect("prompts");

    let req = &server.requests()[0];
    let body: serde_json::Value = serde_json::from_str(&req.body).expect("json body");
    assert_eq!(body["model"], "teacher-large");
    assert_eq!(body["n"], 2);
    assert!((body["temperature"].as_f64().unwrap() - 0.9).abs() < 1e-12);
    let messages = body["messages"].as_array().expect("messages");
    assert_eq!(messages[0]["role"], "system");
    assert_eq!(messages.last().unwrap()["role"], "user");
    let last = messages.last().unwrap()["content"].as_str().unwrap();
    assert!(last.contains(&record.rendered()));
}

#[test]
fn distill_run_over_http_writes_schema_valid_pairs() {
    let server = StubServer::start(|hit, req| {
        // Alternate replies so templates and image prompts differ.
        let body: serde_json::Value = serde_json::from_str(&req.body).expect("body");
        let sys = body["messages"][0]["content"].as_str().unwrap_or_default();
        if sys.contains("template") {
            StubResponse::ok(chat_body(&[&format!(
                "create a themed template number {hit}\nsecond template line {hit}"
            )]))
        } else {
            StubResponse::ok(chat_body(&[&format!(
                "a detailed scene photo number {hit}\nsecond photo line {hit}"
            )]))
        }
    });
    let (teacher, _) = teacher_with_recorder(server.endpoint(), None);

    let records = support::intent_records(5);
    let dir = tempfile::tempdir().expect("tempdir");
    let filter = SafetyFilter::new(Vec::<String>::new());
    let report = distill_run(&records, &teacher, &filter, 2, 2, dir.path()).expect("run");
    assert_eq!(report.teacher, "http");
    assert_eq!(report.jobs, 10);
    assert!(report.failures.is_empty());

    let pairs = read_pairs_jsonl(&dir.path().join("pairs.jsonl")).expect("pairs");
    assert_eq!(pairs.len() as usize, report.accepted);
    for p in &pairs {
        assert!(!p.intent.is_empty());
        assert!(!p.prompt.is_empty());
        // Source carries the intent record's provenance tag; these records
        // had none.
        assert_eq!(p.source, None);
    }
}
