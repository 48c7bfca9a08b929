//! Evaluator integration: hand-computed statistics on fixed inputs, the
//! HTTP judge against a scripted endpoint, and report emission.

mod support;

use std::time::Duration;

use slmforge::corpus::Task;
use slmforge::evaluator::{
    emit_report, judge_relevance_with, length_adherence, measured_lengths,
    modality_separation, EvalReport, EvalSample, HttpJudge, HttpJudgeConfig, JudgeConfig,
    ModalityReport, ReportReferences, PAPER_REFERENCE_LABEL,
};
use support::{chat_body, RecordingSleeper, SharedSleeper, StubResponse, StubServer};

fn sample(target: u32, task: Task, text: &str) -> EvalSample {
    EvalSample {
        target,
        intent: "Topic: test, Scene object: probe".into(),
        task,
        text: text.into(),
    }
}

#[test]
fn length_statistics_match_hand_computed_values_exactly() {
    // Target 10: lengths 9, 10, 12 -> mean 31/3, MSE (1+0+4)/3, within 2/3.
    // Target 20: lengths 20, 25    -> mean 22.5, MSE (0+25)/2,  within 1/2.
    let samples = vec![
        sample(10, Task::Ip, &vec!["w"; 9].join(" ")),
        sample(10, Task::Ip, &vec!["w"; 10].join(" ")),
        sample(10, Task::Ip, &vec!["w"; 12].join(" ")),
        sample(20, Task::Ip, &vec!["w"; 20].join(" ")),
        sample(20, Task::Ip, &vec!["w"; 25].join(" ")),
    ];
    let report = length_adherence(&measured_lengths(&samples)).expect("report");
    assert_eq!(report.rows.len(), 2);

    let r10 = &report.rows[0];
    assert_eq!(r10.target, 10);
    assert_eq!(r10.n, 3);
    assert_eq!(r10.mean_len, 31.0 / 3.0);
    assert_eq!(r10.mse, 5.0 / 3.0);
    assert_eq!(r10.pct_within_2, 100.0 * 2.0 / 3.0);

    let r20 = &report.rows[1];
    assert_eq!(r20.target, 20);
    assert_eq!(r20.n, 2);
    assert_eq!(r20.mean_len, 22.5);
    assert_eq!(r20.mse, 12.5);
    assert_eq!(r20.pct_within_2, 50.0);
}

#[test]
fn modality_separation_matches_hand_count() {
    // 3 of 4 correct: one template prompt lacks the marker word.
    let labeled = vec![
        (Task::Ip, "a photo of a lantern".to_string()),
        (Task::Ip, "sunset over the bay".to_string()),
        (Task::Tp, "create an invitation template now".to_string()),
        (Task::Tp, "create an invitation design".to_string()),
    ];
    let acc = modality_separation(&labeled).expect("separation");
    assert_eq!(acc, 0.75);

    let report = ModalityReport::compute(&labeled).expect("report");
    assert_eq!(report.accuracy, 0.75);
    assert_eq!(report.n, 4);
    assert_eq!((report.n_ip, report.n_tp), (2, 2));
}

fn judge_with_recorder(
    endpoint: String,
) -> (HttpJudge, std::sync::Arc<RecordingSleeper>) {
    let recorder = RecordingSleeper::shared();
    let mut cfg = HttpJudgeConfig::new(endpoint);
    cfg.retry.base_delay = Duration::from_millis(100);
    let judge = HttpJudge::with_sleeper(cfg, Some("sk-judge".into()), Box::new(SharedSleeper(recorder.clone())))
        .expect("judge");
    (judge, recorder)
}

#[test]
fn http_judge_scores_prompts_and_retries_rate_limits() {
    let server = StubServer::start(|hit, _| {
        if hit == 0 {
            StubResponse::status(429, "busy")
        } else {
            StubResponse::ok(chat_body(&["8"]))
        }
    });
    let (judge, recorder) = judge_with_recorder(server.endpoint());

    let prompts = vec![
        sample(10, Task::Ip, "a lantern over the harbor at dusk"),
        sample(12, Task::Tp, "create a flyer template with bold shapes"),
    ];
    let cfg = JudgeConfig::http(HttpJudgeConfig::new(server.endpoint()));
    let report = judge_relevance_with(&prompts, &cfg, &judge).expect("report");

    assert!(!report.incomplete);
    assert!(report.failures.is_empty());
    // Two prompts, four criteria each, plus one rate-limited retry.
    assert_eq!(report.n_scores, 8);
    assert_eq!(server.hits(), 9);
    assert_eq!(recorder.delays().len(), 1);
    for tm in &report.per_task {
        assert_eq!(tm.mean, 8.0);
    }
    for cm in &report.per_criterion {
        assert_eq!(cm.mean, 8.0);
    }

    // Requests carry the rubric and the prompt under test.
    let reqs = server.requests();
    let body: serde_json::Value = serde_json::from_str(&reqs[0].body).expect("json");
    assert_eq!(body["model"], "judge-large");
    assert_eq!(reqs[0].header("authorization"), Some("Bearer sk-judge"));
    let n_with_rubric = reqs
        .iter()
        .filter(|r| r.body.contains("Correctness"))
        .count();
    assert!(n_with_rubric >= 2, "each prompt gets a Correctness request");
}

#[test]
fn judge_failures_are_excluded_from_means_and_flagged() {
    // Score replies come back as "3" except one criterion that always
    // errors terminally.
    let server = StubServer::start(|_, req| {
        if req.body.contains("Usefulness") {
            StubResponse::status(400, "no")
        } else {
            StubResponse::ok(chat_body(&["3"]))
        }
    });
    let (judge, _) = judge_with_recorder(server.endpoint());
    let prompts = vec![sample(8, Task::Ip, "a quiet cabin in snowfall")];
    let cfg = JudgeConfig::http(HttpJudgeConfig::new(server.endpoint()));
    let report = judge_relevance_with(&prompts, &cfg, &judge).expect("report");

    assert!(report.incomplete);
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].criterion, "Usefulness");
    assert_eq!(report.n_scores, 3);
    assert_eq!(report.per_task.len(), 1);
    assert_eq!(report.per_task[0].mean, 3.0);
    // Usefulness contributes no per-criterion row.
    assert!(report.per_criterion.iter().all(|c| c.name != "Usefulness"));
}

#[test]
fn non_numeric_judge_reply_is_a_failure_not_a_panic() {
    let server = StubServer::start(|_, _| StubResponse::ok(chat_body(&["no idea, sorry"])));
    let (judge, _) = judge_with_recorder(server.endpoint());
    let prompts = vec![sample(8, Task::Ip, "a pier at dawn")];
    let cfg = JudgeConfig::http(HttpJudgeConfig::new(server.endpoint()));
    let report = judge_relevance_with(&prompts, &cfg, &judge).expect("report");
    assert!(report.incomplete);
    assert_eq!(report.failures.len(), 4, "every criterion failed to parse");
    assert_eq!(report.n_scores, 0);
    assert!(report.per_task.is_empty());
}

#[test]
fn emitted_report_labels_reference_rows_and_roundtrips() {
    let samples = vec![
        sample(10, Task::Ip, &vec!["w"; 10].join(" ")),
        sample(10, Task::Tp, "create a template with stars"),
    ];
    let length = length_adherence(&measured_lengths(&samples)).expect("length");
    let labeled: Vec<(Task, String)> =
        samples.iter().map(|s| (s.task, s.text.clone())).collect();
    let modality = ModalityReport::compute(&labeled).expect("modality");

    let report = EvalReport {
        length: Some(length),
        modality: Some(modality),
        relevance: None,
        references: ReportReferences::paper(),
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let paths = emit_report(&report, dir.path()).expect("emit");

    let json = std::fs::read_to_string(&paths.json).expect("json");
    let parsed: EvalReport = serde_json::from_str(&json).expect("parse");
    assert_eq!(parsed, report);

    let md = std::fs::read_to_string(&paths.markdown).expect("markdown");
    assert!(md.contains(PAPER_REFERENCE_LABEL));
    // Reference length rows and throughput are labeled, never bare.
    assert!(md.contains("10.3"));
    assert_eq!(parsed.references.throughput.label, PAPER_REFERENCE_LABEL);
    assert_eq!(parsed.references.length.label, PAPER_REFERENCE_LABEL);
    assert_eq!(parsed.references.relevance.label, PAPER_REFERENCE_LABEL);
}
