//! Quantitative evaluation of generated prompts: length adherence per
//! target, modality separation by the marker-word rule, and relevance
//! scored by a pluggable judge. Reports serialize to JSON and markdown;
//! rows quoting published full-scale results are carried for context only
//! and always labeled "paper (not reproduced)".

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{word_count, Task};
use crate::distiller::{ChatMessage, RetryPolicy, Sleeper, ThreadSleeper};

/// Judge scale bounds; every accepted score lies in this closed range.
pub const SCALE_MIN: u32 = 1;
pub const SCALE_MAX: u32 = 10;

/// Label attached to every reference row quoted from the published
/// full-scale system rather than measured by this build.
pub const PAPER_REFERENCE_LABEL: &str = "paper (not reproduced)";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    InvalidInput(String),
    #[error("invalid judge configuration: {0}")]
    InvalidConfig(String),
    #[error("judge endpoint returned HTTP {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("judge transport failure: {0}")]
    Transport(String),
    #[error("judge retries exhausted after {attempts} attempts; last error: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("samples line {line}: {msg}")]
    MalformedSample { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One evaluated generation: the conditioning that produced it and the
/// text that came out. This is the interchange row for all `eval`
/// subcommands; length adherence uses `target`, relevance ignores it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSample {
    pub target: u32,
    pub intent: String,
    pub task: Task,
    pub text: String,
}

/// Reads one JSON sample per non-blank line, reporting the first bad line.
pub fn read_samples_jsonl(path: &Path) -> Result<Vec<EvalSample>, EvalError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = serde_json::from_str(&line).map_err(|e| EvalError::MalformedSample {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn write_samples_jsonl(path: &Path, samples: &[EvalSample]) -> Result<(), EvalError> {
    let mut out = String::new();
    for sample in samples {
        out.push_str(&serde_json::to_string(sample)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Length adherence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    /// Requested length in words.
    pub target: u32,
    /// Mean realized length in words.
    pub mean_len: f64,
    /// Mean squared error between realized and target lengths, in words
    /// squared.
    pub mse: f64,
    /// Percentage of samples within two words of the target, in [0, 100].
    pub pct_within_2: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthReport {
    /// One row per distinct target, ascending.
    pub rows: Vec<LengthRow>,
}

/// Maps samples to (target, realized length) pairs using the corpus word
/// count, the single length definition used across training and eval.
pub fn measured_lengths(samples: &[EvalSample]) -> Vec<(u32, usize)> {
    samples
        .iter()
        .map(|s| (s.target, word_count(&s.text)))
        .collect()
}

/// Groups samples by target and computes mean length, MSE, and the share
/// within two words. All sums are over integer-valued doubles, so results
/// are exact and independent of sample order.
pub fn length_adherence(samples: &[(u32, usize)]) -> Result<LengthReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::InvalidInput(
            "length adherence needs at least one sample".into(),
        ));
    }
    let mut by_target: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &(target, realized) in samples {
        by_target.entry(target).or_default().push(realized);
    }
    let rows = by_target
        .into_iter()
        .map(|(target, realized)| {
            let n = realized.len();
            let sum: f64 = realized.iter().map(|&r| r as f64).sum();
            let sse: f64 = realized
                .iter()
                .map(|&r| {
                    let d = r as f64 - target as f64;
                    d * d
                })
                .sum();
            let within = realized
                .iter()
                .filter(|&&r| (r as i64 - target as i64).abs() <= 2)
                .count();
            let row = LengthRow {
                target,
                mean_len: sum / n as f64,
                mse: sse / n as f64,
                pct_within_2: 100.0 * within as f64 / n as f64,
                n,
            };
            debug_assert!(row.mse + 1e-9 >= (row.mean_len - target as f64).powi(2));
            debug_assert!((0.0..=100.0).contains(&row.pct_within_2));
            row
        })
        .collect();
    Ok(LengthReport { rows })
}

// ---------------------------------------------------------------------------
// Modality separation
// ---------------------------------------------------------------------------

/// Classifies a generation by its marker word: any whole word `template`
/// (case-insensitive) marks a template prompt, everything else an image
/// prompt. This is definitional for grammar-teacher data, and measures
/// task separation for model output.
pub fn classify_by_marker(text: &str) -> Task {
    let is_marker = text
        .split(|c: char| !c.is_alphanumeric())
        .any(|w| w.eq_ignore_ascii_case("template"));
    if is_marker {
        Task::Tp
    } else {
        Task::Ip
    }
}

/// Fraction of generations whose marker classification matches the task
/// they were conditioned on. Requires both tasks in the input, otherwise
/// a degenerate set would score 1.0 vacuously.
pub fn modality_separation(samples: &[(Task, String)]) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::InvalidInput(
            "modality separation needs at least one sample".into(),
        ));
    }
    let n_tp = samples.iter().filter(|(t, _)| *t == Task::Tp).count();
    if n_tp == 0 || n_tp == samples.len() {
        return Err(EvalError::InvalidInput(
            "modality separation needs samples from both tasks".into(),
        ));
    }
    let matching = samples
        .iter()
        .filter(|(task, text)| classify_by_marker(text) == *task)
        .count();
    Ok(matching as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityReport {
    /// Fraction of samples classified into their conditioned task, in
    /// [0, 1].
    pub accuracy: f64,
    pub n: usize,
    pub n_ip: usize,
    pub n_tp: usize,
}

impl ModalityReport {
    pub fn compute(samples: &[(Task, String)]) -> Result<Self, EvalError> {
        let accuracy = modality_separation(samples)?;
        let n_tp = samples.iter().filter(|(t, _)| *t == Task::Tp).count();
        Ok(ModalityReport {
            accuracy,
            n: samples.len(),
            n_ip: samples.len() - n_tp,
            n_tp,
        })
    }
}

// ---------------------------------------------------------------------------
// Judge-scored relevance
// ---------------------------------------------------------------------------

/// A named rubric the judge scores against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeCriterion {
    pub name: String,
    pub rubric: String,
}

/// A worked example shown to the judge before scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeExemplar {
    pub intent: String,
    pub task: Task,
    pub text: String,
    pub score: u32,
}

#[derive(Debug, Clone)]
pub struct HttpJudgeConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub request_timeout: Duration,
    pub retry: RetryPolicy,
    /// Seeds backoff jitter only.
    pub seed: u64,
}

impl HttpJudgeConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpJudgeConfig {
            endpoint: endpoint.into(),
            model: "judge-large".into(),
            temperature: 0.0,
            request_timeout: Duration::from_secs(30),
            retry: RetryPolicy::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum JudgeBackend {
    /// Deterministic hash-based scores for pipeline testing.
    Mock,
    Http(HttpJudgeConfig),
}

#[derive(Debug, Clone)]
pub struct JudgeConfig {
    pub criteria: Vec<JudgeCriterion>,
    /// Fixed at (1, 10); kept explicit so reports state their scale.
    pub scale: (u32, u32),
    pub backend: JudgeBackend,
    pub exemplars: Vec<JudgeExemplar>,
    /// Bounded number of in-flight scoring requests.
    pub concurrency: usize,
}

impl JudgeConfig {
    /// Default configuration with the mock backend and the four standard
    /// criteria.
    pub fn mock() -> Self {
        JudgeConfig {
            criteria: default_criteria(),
            scale: (SCALE_MIN, SCALE_MAX),
            backend: JudgeBackend::Mock,
            exemplars: default_exemplars(),
            concurrency: 4,
        }
    }

    pub fn http(cfg: HttpJudgeConfig) -> Self {
        JudgeConfig {
            backend: JudgeBackend::Http(cfg),
            ..Self::mock()
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.criteria.is_empty() {
            return Err(EvalError::InvalidConfig("no criteria".into()));
        }
        let mut names: Vec<&str> = self.criteria.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.criteria.len() || names.iter().any(|n| n.trim().is_empty()) {
            return Err(EvalError::InvalidConfig(
                "criterion names must be unique and non-empty".into(),
            ));
        }
        if self.scale != (SCALE_MIN, SCALE_MAX) {
            return Err(EvalError::InvalidConfig(format!(
                "scale must be ({SCALE_MIN}, {SCALE_MAX})"
            )));
        }
        if self.concurrency == 0 {
            return Err(EvalError::InvalidConfig("concurrency must be >= 1".into()));
        }
        for ex in &self.exemplars {
            if !(SCALE_MIN..=SCALE_MAX).contains(&ex.score) {
                return Err(EvalError::InvalidConfig(format!(
                    "exemplar score {} outside the scale",
                    ex.score
                )));
            }
        }
        Ok(())
    }

    /// Builds the backend this configuration selects.
    pub fn build_judge(&self) -> Result<Box<dyn Judge>, EvalError> {
        match &self.backend {
            JudgeBackend::Mock => Ok(Box::new(MockJudge)),
            JudgeBackend::Http(cfg) => Ok(Box::new(HttpJudge::new(
                cfg.clone(),
                crate::distiller::teacher_key_from_env(),
            )?)),
        }
    }
}

fn default_criteria() -> Vec<JudgeCriterion> {
    [
        (
            "Correctness",
            "does the prompt contain grammatical or semantic errors.",
        ),
        (
            "Clarity",
            "is the prompt clear to understand, is the grammar structure sound.",
        ),
        (
            "Completeness",
            "does the prompt utilize all of the provided query context.",
        ),
        (
            "Usefulness",
            "is the prompt generated useful for the task provided.",
        ),
    ]
    .into_iter()
    .map(|(name, rubric)| JudgeCriterion {
        name: name.into(),
        rubric: rubric.into(),
    })
    .collect()
}

fn default_exemplars() -> Vec<JudgeExemplar> {
    vec![
        JudgeExemplar {
            intent: "Topic: birthday, Scene object: balloon".into(),
            task: Task::Ip,
            text: "whimsical red balloon drifting over a pastel birthday party at dusk".into(),
            score: 9,
        },
        JudgeExemplar {
            intent: "Design type: invitation, Topic: wedding".into(),
            task: Task::Tp,
            text: "create a template".into(),
            score: 3,
        },
    ]
}

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Ip => "text-to-image",
        Task::Tp => "text-to-template",
    }
}

/// Builds one scoring request: a system message with the criterion's
/// rubric and the reply contract, exemplar user/assistant pairs, then the
/// prompt under evaluation.
pub fn render_judge_messages(
    sample: &EvalSample,
    criterion: &JudgeCriterion,
    cfg: &JudgeConfig,
) -> Vec<ChatMessage> {
    let item = |intent: &str, task: Task, text: &str| {
        format!(
            "Intent: {intent}\nTask: {}\nPrompt: {text}",
            task_name(task)
        )
    };
    let mut messages = Vec::with_capacity(2 + 2 * cfg.exemplars.len());
    messages.push(ChatMessage {
        role: "system".into(),
        content: format!(
            "You judge prompts written for a graphic design tool. Rate the prompt \
             below on one criterion.\n\n{}: {}\n\nReply with a single integer from \
             {} to {}, where higher is better.",
            criterion.name, criterion.rubric, cfg.scale.0, cfg.scale.1
        ),
    });
    for ex in &cfg.exemplars {
        messages.push(ChatMessage {
            role: "user".into(),
            content: item(&ex.intent, ex.task, &ex.text),
        });
        messages.push(ChatMessage {
            role: "assistant".into(),
            content: ex.score.to_string(),
        });
    }
    messages.push(ChatMessage {
        role: "user".into(),
        content: item(&sample.intent, sample.task, &sample.text),
    });
    messages
}

/// Finds the first integer in a judge reply and checks it against the
/// scale. "9", "Score: 9." and "9/10" all parse to 9; "11" is rejected.
pub(crate) fn extract_score(reply: &str) -> Result<u32, String> {
    let bytes = reply.as_bytes();
    let start = bytes
        .iter()
        .position(|b| b.is_ascii_digit())
        .ok_or_else(|| format!("no integer in reply {reply:?}"))?;
    let len = bytes[start..].iter().take_while(|b| b.is_ascii_digit()).count();
    let score: u32 = reply[start..start + len]
        .parse()
        .map_err(|_| format!("integer out of range in reply {reply:?}"))?;
    if !(SCALE_MIN..=SCALE_MAX).contains(&score) {
        return Err(format!("score {score} outside {SCALE_MIN}..={SCALE_MAX}"));
    }
    Ok(score)
}

/// A scoring backend. Returns the raw reply text; parsing and range
/// checking happen in one place so every backend obeys the same contract.
pub trait Judge: Sync {
    fn score_reply(
        &self,
        sample: &EvalSample,
        criterion: &JudgeCriterion,
        cfg: &JudgeConfig,
    ) -> Result<String, EvalError>;

    fn label(&self) -> &'static str;
}

/// Deterministic offline judge: the score is a hash of the request, so
/// identical inputs always produce identical reports.
pub struct MockJudge;

impl Judge for MockJudge {
    fn score_reply(
        &self,
        sample: &EvalSample,
        criterion: &JudgeCriterion,
        _cfg: &JudgeConfig,
    ) -> Result<String, EvalError> {
        let mut hasher = Sha256::new();
        hasher.update(sample.intent.as_bytes());
        hasher.update([0u8, sample.task as u8, 0u8]);
        hasher.update(sample.text.as_bytes());
        hasher.update([0u8]);
        hasher.update(criterion.name.as_bytes());
        let digest = hasher.finalize();
        let h = u64::from_le_bytes(digest[..8].try_into().expect("8-byte slice"));
        Ok((1 + h % 10).to_string())
    }

    fn label(&self) -> &'static str {
        "mock"
    }
}

/// Chat-completion judge backend with the same retry and backoff contract
/// as the distiller's teacher client.
pub struct HttpJudge {
    cfg: HttpJudgeConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    sleeper: Box<dyn Sleeper>,
    jitter: Mutex<ChaCha8Rng>,
}

impl HttpJudge {
    pub fn new(cfg: HttpJudgeConfig, api_key: Option<String>) -> Result<Self, EvalError> {
        Self::with_sleeper(cfg, api_key, Box::new(ThreadSleeper))
    }

    pub fn with_sleeper(
        cfg: HttpJudgeConfig,
        api_key: Option<String>,
        sleeper: Box<dyn Sleeper>,
    ) -> Result<Self, EvalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.request_timeout)
            .build()
            .map_err(|e| EvalError::Transport(e.to_string()))?;
        let jitter = Mutex::new(ChaCha8Rng::seed_from_u64(cfg.seed));
        Ok(HttpJudge {
            cfg,
            api_key,
            client,
            sleeper,
            jitter,
        })
    }

    fn post_once(&self, messages: &[ChatMessage]) -> Result<String, EvalError> {
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": self.cfg.temperature,
            "n": 1,
        });
        let mut req = self.client.post(&self.cfg.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| EvalError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .text()
            .map_err(|e| EvalError::Transport(e.to_string()))?;
        if status != 200 {
            return Err(EvalError::HttpStatus {
                status,
                body: crate::distiller::http_retained(&text),
            });
        }
        crate::distiller::http_choice_contents(&text)
            .and_then(|choices| choices.into_iter().next())
            .ok_or_else(|| EvalError::Transport("undecodable judge response body".into()))
    }
}

fn is_retryable(err: &EvalError) -> bool {
    match err {
        EvalError::HttpStatus { status, .. } => *status == 429 || *status >= 500,
        EvalError::Transport(_) => true,
        _ => false,
    }
}

impl Judge for HttpJudge {
    fn score_reply(
        &self,
        sample: &EvalSample,
        criterion: &JudgeCriterion,
        cfg: &JudgeConfig,
    ) -> Result<String, EvalError> {
        let messages = render_judge_messages(sample, criterion, cfg);
        let mut attempt = 0u32;
        loop {
            match self.post_once(&messages) {
                Ok(reply) => return Ok(reply),
                Err(e) if is_retryable(&e) && attempt < self.cfg.retry.max_retries => {
                    let delay = {
                        let mut rng = self.jitter.lock().expect("jitter rng");
                        crate::distiller::http_backoff_delay(&self.cfg.retry, attempt, &mut rng)
                    };
                    self.sleeper.sleep(delay);
                    attempt += 1;
                }
                Err(e) if is_retryable(&e) => {
                    return Err(EvalError::ExhaustedRetries {
                        attempts: attempt + 1,
                        last: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn label(&self) -> &'static str {
        "http"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMean {
    pub task: Task,
    pub mean: f64,
    pub n_scores: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionMean {
    pub criterion: String,
    pub mean: f64,
    pub n_scores: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeFailure {
    pub prompt_index: usize,
    pub criterion: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub judge: String,
    pub scale: (u32, u32),
    /// Mean over accepted scores of prompts conditioned on each task.
    pub per_task: Vec<TaskMean>,
    /// Mean over accepted scores of each criterion, in configured order.
    pub per_criterion: Vec<CriterionMean>,
    pub n_prompts: usize,
    pub n_scores: usize,
    pub failures: Vec<JudgeFailure>,
    /// True when any request failed; means then cover only a subset of
    /// the requested scores.
    pub incomplete: bool,
}

/// Scores every prompt on every configured criterion with the backend the
/// config selects.
pub fn judge_relevance(
    prompts: &[EvalSample],
    cfg: &JudgeConfig,
) -> Result<RelevanceReport, EvalError> {
    let judge = cfg.build_judge()?;
    judge_relevance_with(prompts, cfg, judge.as_ref())
}

/// As [`judge_relevance`] but with an injected backend, used by tests to
/// exercise failure handling.
///
/// One request is issued per (prompt, criterion) pair through a bounded
/// worker pool. Replies that fail to parse or fall outside the scale are
/// recorded as failures and excluded from every mean.
pub fn judge_relevance_with(
    prompts: &[EvalSample],
    cfg: &JudgeConfig,
    judge: &dyn Judge,
) -> Result<RelevanceReport, EvalError> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(EvalError::InvalidInput(
            "relevance judging needs at least one prompt".into(),
        ));
    }

    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..cfg.criteria.len()).map(move |c| (p, c)))
        .collect();
    let cursor = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<u32, String>>>> = Mutex::new(vec![None; jobs.len()]);
    let workers = cfg.concurrency.min(jobs.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = cursor.fetch_add(1, Ordering::Relaxed);
                if j >= jobs.len() {
                    break;
                }
                let (p, c) = jobs[j];
                let outcome = judge
                    .score_reply(&prompts[p], &cfg.criteria[c], cfg)
                    .map_err(|e| e.to_string())
                    .and_then(|reply| extract_score(&reply));
                results.lock().expect("worker panicked")[j] = Some(outcome);
            });
        }
    });

    let results = results.into_inner().expect("pool finished");
    let mut failures = Vec::new();
    let mut task_acc = [(Task::Ip, 0u64, 0usize), (Task::Tp, 0u64, 0usize)];
    let mut crit_acc = vec![(0u64, 0usize); cfg.criteria.len()];
    let mut n_scores = 0usize;
    for (j, outcome) in results.into_iter().enumerate() {
        let (p, c) = jobs[j];
        match outcome.expect("every job ran") {
            Ok(score) => {
                n_scores += 1;
                let slot = &mut task_acc[(prompts[p].task == Task::Tp) as usize];
                slot.1 += score as u64;
                slot.2 += 1;
                crit_acc[c].0 += score as u64;
                crit_acc[c].1 += 1;
            }
            Err(reason) => failures.push(JudgeFailure {
                prompt_index: p,
                criterion: cfg.criteria[c].name.clone(),
                reason,
            }),
        }
    }

    let per_task = task_acc
        .iter()
        .filter(|(_, _, n)| *n > 0)
        .map(|&(task, sum, n)| TaskMean {
            task,
            mean: sum as f64 / n as f64,
            n_scores: n,
        })
        .collect();
    let per_criterion = cfg
        .criteria
        .iter()
        .zip(&crit_acc)
        .filter(|(_, (_, n))| *n > 0)
        .map(|(criterion, &(sum, n))| CriterionMean {
            criterion: criterion.name.clone(),
            mean: sum as f64 / n as f64,
            n_scores: n,
        })
        .collect();
    let incomplete = !failures.is_empty();
    Ok(RelevanceReport {
        judge: judge.label().to_string(),
        scale: cfg.scale,
        per_task,
        per_criterion,
        n_prompts: prompts.len(),
        n_scores,
        failures,
        incomplete,
    })
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthReference {
    pub target: u32,
    pub mean_len: f64,
    pub mse: f64,
    pub pct_within_2: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReference {
    pub task: Task,
    pub mean: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReference {
    pub tokens_per_sec: f64,
    pub memory: String,
    pub n_params: String,
    pub label: String,
}

/// Published full-scale results, quoted for context next to desk-scale
/// measurements and never asserted by any test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportReferences {
    pub length: Vec<LengthReference>,
    pub relevance: Vec<RelevanceReference>,
    pub throughput: ThroughputReference,
}

impl ReportReferences {
    pub fn paper() -> Self {
        let row = |target, mean_len, mse, pct_within_2| LengthReference {
            target,
            mean_len,
            mse,
            pct_within_2,
            label: PAPER_REFERENCE_LABEL.into(),
        };
        ReportReferences {
            length: vec![
                row(10, 10.3, 0.365, 98.0),
                row(20, 19.2, 0.881, 96.0),
                row(30, 31.1, 1.131, 93.0),
                row(35, 33.8, 1.179, 95.0),
            ],
            relevance: vec![
                RelevanceReference {
                    task: Task::Ip,
                    mean: 8.31,
                    label: PAPER_REFERENCE_LABEL.into(),
                },
                RelevanceReference {
                    task: Task::Tp,
                    mean: 8.45,
                    label: PAPER_REFERENCE_LABEL.into(),
                },
            ],
            throughput: ThroughputReference {
                tokens_per_sec: 353.0,
                memory: "~500MB".into(),
                n_params: "104M".into(),
                label: PAPER_REFERENCE_LABEL.into(),
            },
        }
    }
}

/// Everything one evaluation run produced. At least one measured section
/// must be present to emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub length: Option<LengthReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub modality: Option<ModalityReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub relevance: Option<RelevanceReport>,
    pub references: ReportReferences,
}

impl EvalReport {
    pub fn new() -> Self {
        EvalReport {
            length: None,
            modality: None,
            relevance: None,
            references: ReportReferences::paper(),
        }
    }
}

impl Default for EvalReport {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportPaths {
    pub json: PathBuf,
    pub markdown: PathBuf,
}

/// Writes `report.json` and `report.md` into `out_dir`.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<ReportPaths, EvalError> {
    if report.length.is_none() && report.modality.is_none() && report.relevance.is_none() {
        return Err(EvalError::InvalidInput(
            "nothing to report: no measured section present".into(),
        ));
    }
    fs::create_dir_all(out_dir)?;
    let json = out_dir.join("report.json");
    let markdown = out_dir.join("report.md");
    let mut file = fs::File::create(&json)?;
    serde_json::to_writer_pretty(&mut file, report)?;
    file.write_all(b"\n")?;
    fs::write(&markdown, render_markdown(report))?;
    Ok(ReportPaths { json, markdown })
}

/// Renders the measured-metrics-as-rows, targets-as-columns table layout.
fn length_table<R>(rows: &[R], cells: impl Fn(&R) -> (u32, [String; 4])) -> String {
    let mut header = String::from("| Metric |");
    let mut rule = String::from("| --- |");
    let mut lines = [
        String::from("| Mean length (words) |"),
        String::from("| Mean squared error (words^2) |"),
        String::from("| Prompts within +/-2 words (%) |"),
        String::from("| Samples (n) |"),
    ];
    for row in rows {
        let (target, values) = cells(row);
        header.push_str(&format!(" {target} |"));
        rule.push_str(" --- |");
        for (line, value) in lines.iter_mut().zip(values) {
            line.push_str(&format!(" {value} |"));
        }
    }
    let mut out = format!("{header}\n{rule}\n");
    for line in lines {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn render_markdown(report: &EvalReport) -> String {
    let mut md = String::from("# Evaluation report\n");
    if let Some(length) = &report.length {
        md.push_str("\n## Length adherence\n\n");
        md.push_str(&length_table(&length.rows, |r| {
            (
                r.target,
                [
                    format!("{:.3}", r.mean_len),
                    format!("{:.3}", r.mse),
                    format!("{:.1}", r.pct_within_2),
                    r.n.to_string(),
                ],
            )
        }));
        md.push_str(&format!(
            "\n### Full-scale reference, {}\n\n",
            PAPER_REFERENCE_LABEL
        ));
        md.push_str(&length_table(&report.references.length, |r| {
            (
                r.target,
                [
                    format!("{:.1}", r.mean_len),
                    format!("{:.3}", r.mse),
                    format!("{:.0}", r.pct_within_2),
                    String::from("-"),
                ],
            )
        }));
    }
    if let Some(modality) = &report.modality {
        md.push_str("\n## Modality separation\n\n");
        md.push_str("| Metric | Value |\n| --- | --- |\n");
        md.push_str(&format!("| Accuracy | {:.4} |\n", modality.accuracy));
        md.push_str(&format!("| Samples (n) | {} |\n", modality.n));
        md.push_str(&format!(
            "| Image-prompt / template-prompt split | {} / {} |\n",
            modality.n_ip, modality.n_tp
        ));
    }
    if let Some(relevance) = &report.relevance {
        md.push_str(&format!(
            "\n## Relevance (judge: {}, scale {}..{})\n\n",
            relevance.judge, relevance.scale.0, relevance.scale.1
        ));
        md.push_str("| Task | Mean score | Scores (n) |\n| --- | --- | --- |\n");
        for row in &relevance.per_task {
            md.push_str(&format!(
                "| {} | {:.2} | {} |\n",
                task_name(row.task),
                row.mean,
                row.n_scores
            ));
        }
        for reference in &report.references.relevance {
            md.push_str(&format!(
                "| {} | {:.2} | {} |\n",
                task_name(reference.task),
                reference.mean,
                reference.label
            ));
        }
        md.push_str("\n| Criterion | Mean score | Scores (n) |\n| --- | --- | --- |\n");
        for row in &relevance.per_criterion {
            md.push_str(&format!(
                "| {} | {:.2} | {} |\n",
                row.criterion, row.mean, row.n_scores
            ));
        }
        md.push_str(&format!(
            "\nPrompts: {}, accepted scores: {}, failures: {}{}\n",
            relevance.n_prompts,
            relevance.n_scores,
            relevance.failures.len(),
            if relevance.incomplete {
                " (report incomplete)"
            } else {
                ""
            }
        ));
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_core::RngCore;

    fn sample(target: u32, task: Task, text: &str) -> EvalSample {
        EvalSample {
            target,
            intent: "Topic: birthday, Scene object: balloon".into(),
            task,
            text: text.into(),
        }
    }

    #[test]
    fn hand_checked_single_target_statistics() {
        let report = length_adherence(&[(10, 10), (10, 10), (10, 12)]).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert_eq!(row.n, 3);
        assert!((row.mean_len - 32.0 / 3.0).abs() < 1e-12);
        assert_eq!(row.mse, 4.0 / 3.0);
        assert_eq!(row.pct_within_2, 100.0);
    }

    #[test]
    fn perfect_adherence_scores_zero_mse_and_full_coverage() {
        let pairs: Vec<(u32, usize)> = (5..25).map(|t| (t, t as usize)).collect();
        let report = length_adherence(&pairs).unwrap();
        for row in &report.rows {
            assert_eq!(row.mse, 0.0);
            assert_eq!(row.pct_within_2, 100.0);
            assert_eq!(row.mean_len, row.target as f64);
        }
    }

    #[test]
    fn statistics_match_brute_force_and_ignore_sample_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pairs: Vec<(u32, usize)> = (0..300)
            .map(|_| {
                let t = 5 + (rng.next_u32() % 16);
                let r = (t as i64 + (rng.next_u32() % 9) as i64 - 4).max(0) as usize;
                (t, r)
            })
            .collect();
        let report = length_adherence(&pairs).unwrap();
        for row in &report.rows {
            let subset: Vec<i64> = pairs
                .iter()
                .filter(|(t, _)| *t == row.target)
                .map(|&(_, r)| r as i64)
                .collect();
            let n = subset.len() as f64;
            let mean: f64 = subset.iter().map(|&r| r as f64).sum::<f64>() / n;
            let mse: f64 = subset
                .iter()
                .map(|&r| ((r - row.target as i64) * (r - row.target as i64)) as f64)
                .sum::<f64>()
                / n;
            let pct = 100.0
                * subset
                    .iter()
                    .filter(|&&r| (r - row.target as i64).abs() <= 2)
                    .count() as f64
                / n;
            assert_eq!(row.mean_len, mean);
            assert_eq!(row.mse, mse);
            assert_eq!(row.pct_within_2, pct);
            assert!(row.mse + 1e-9 >= (row.mean_len - row.target as f64).powi(2));
        }
        pairs.reverse();
        pairs.swap(0, 150);
        let shuffled = length_adherence(&pairs).unwrap();
        assert_eq!(report, shuffled);
    }

    #[test]
    fn empty_length_input_is_rejected() {
        assert!(matches!(
            length_adherence(&[]),
            Err(EvalError::InvalidInput(_))
        ));
    }

    #[test]
    fn marker_rule_requires_the_whole_word() {
        assert_eq!(classify_by_marker("create a template now"), Task::Tp);
        assert_eq!(classify_by_marker("many templates galore"), Task::Ip);
        assert_eq!(classify_by_marker("A Template, yes"), Task::Tp);
        assert_eq!(classify_by_marker("sunset over the bay"), Task::Ip);
    }

    #[test]
    fn ground_truth_labels_separate_perfectly() {
        let samples = vec![
            (Task::Ip, "vibrant balloon at a party".to_string()),
            (Task::Tp, "create a birthday template".to_string()),
            (Task::Ip, "moody forest path".to_string()),
            (Task::Tp, "create a flyer template now".to_string()),
        ];
        assert_eq!(modality_separation(&samples).unwrap(), 1.0);
        let report = ModalityReport::compute(&samples).unwrap();
        assert_eq!((report.n_ip, report.n_tp, report.n), (2, 2, 4));
    }

    #[test]
    fn shuffled_labels_score_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<(Task, String)> = (0..200)
            .map(|i| {
                let label = if rng.next_u32() % 2 == 0 { Task::Ip } else { Task::Tp };
                let text = if i % 2 == 0 {
                    "create a template".to_string()
                } else {
                    "a painting of the sea".to_string()
                };
                (label, text)
            })
            .collect();
        let accuracy = modality_separation(&samples).unwrap();
        assert!((0.4..=0.6).contains(&accuracy), "accuracy {accuracy}");
    }

    #[test]
    fn single_task_and_empty_modality_inputs_are_rejected()
    {
        assert!(modality_separation(&[]).is_err());
        let only_ip = vec![(Task::Ip, "x".to_string()); 4];
        assert!(modality_separation(&only_ip).is_err());
    }

    #[test]
    fn score_extraction_takes_the_first_integer_and_guards_the_range() {
        assert_eq!(extract_score("7"), Ok(7));
        assert_eq!(extract_score(" Score: 9.\n"), Ok(9));
        assert_eq!(extract_score("8/10"), Ok(8));
        assert_eq!(extract_score("10"), Ok(10));
        assert!(extract_score("11").unwrap_err().contains("outside"));
        assert!(extract_score("0 out of 10").unwrap_err().contains("outside"));
        assert!(extract_score("no number here").unwrap_err().contains("no integer"));
    }

    #[test]
    fn mock_judge_reports_are_identical_across_runs() {
        let prompts = vec![
            sample(8, Task::Ip, "whimsical balloon over a party"),
            sample(12, Task::Tp, "create a birthday party template"),
            sample(16, Task::Ip, "dreamy sunset in pastel colors"),
        ];
        let cfg = JudgeConfig::mock();
        let a = judge_relevance(&prompts, &cfg).unwrap();
        let b = judge_relevance(&prompts, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.judge, "mock");
        assert_eq!(a.n_prompts, 3);
        assert_eq!(a.n_scores, 3 * cfg.criteria.len());
        assert!(a.failures.is_empty());
        assert!(!a.incomplete);
        assert_eq!(a.per_criterion.len(), cfg.criteria.len());
        for row in &a.per_task {
            assert!((1.0..=10.0).contains(&row.mean));
        }
        for row in &a.per_criterion {
            assert!((1.0..=10.0).contains(&row.mean));
        }
    }

    #[test]
    fn mock_scores_vary_across_inputs() {
        let cfg = JudgeConfig::mock();
        let judge = MockJudge;
        let mut distinct = std::collections::HashSet::new();
        for i in 0..40 {
            let s = sample(8, Task::Ip, &format!("prompt variant number {i}"));
            let reply = judge.score_reply(&s, &cfg.criteria[0], &cfg).unwrap();
            distinct.insert(extract_score(&reply).unwrap());
        }
        assert!(distinct.len() >= 3, "only {} distinct scores", distinct.len());
    }

    /// Replies come from a scripted list keyed by (prompt index, criterion
    /// index), so failure handling can be exercised without a network.
    struct ScriptedJudge {
        replies: Vec<Vec<&'static str>>,
    }

    impl Judge for ScriptedJudge {
        fn score_reply(
            &self,
            sample: &EvalSample,
            criterion: &JudgeCriterion,
            cfg: &JudgeConfig,
        ) -> Result<String, EvalError> {
            let p: usize = sample.target as usize;
            let c = cfg
                .criteria
                .iter()
                .position(|x| x.name == criterion.name)
                .unwrap();
            match self.replies[p][c] {
                "TRANSPORT" => Err(EvalError::Transport("connection reset".into())),
                reply => Ok(reply.to_string()),
            }
        }

        fn label(&self) -> &'static str {
            "scripted"
        }
    }

    #[test]
    fn out_of_range_and_failed_replies_never_contaminate_means() {
        // Prompt index is smuggled through `target`.
        let prompts = vec![
            sample(0, Task::Ip, "first"),
            sample(1, Task::Tp, "second template"),
        ];
        let mut cfg = JudgeConfig::mock();
        cfg.criteria.truncate(2);
        let judge = ScriptedJudge {
            replies: vec![vec!["4", "11"], vec!["8", "TRANSPORT"]],
        };
        let report = judge_relevance_with(&prompts, &cfg, &judge).unwrap();
        assert_eq!(report.n_scores, 2);
        assert_eq!(report.failures.len(), 2);
        assert!(report.incomplete);
        let ip = report.per_task.iter().find(|t| t.task == Task::Ip).unwrap();
        let tp = report.per_task.iter().find(|t| t.task == Task::Tp).unwrap();
        assert_eq!((ip.mean, ip.n_scores), (4.0, 1));
        assert_eq!((tp.mean, tp.n_scores), (8.0, 1));
        let first = &report.per_criterion[0];
        assert_eq!((first.mean, first.n_scores), (6.0, 2));
        assert_eq!(report.per_criterion.len(), 1, "failed criterion has no mean");
        let reasons: Vec<&str> = report.failures.iter().map(|f| f.reason.as_str()).collect();
        assert!(reasons.iter().any(|r| r.contains("outside")));
        assert!(reasons.iter().any(|r| r.contains("connection reset")));
    }

    #[test]
    fn judge_messages_carry_rubric_exemplars_and_the_prompt() {
        let cfg = JudgeConfig::mock();
        let s = sample(8, Task::Tp, "create a lovely template");
        let messages = render_judge_messages(&s, &cfg.criteria[2], &cfg);
        assert_eq!(messages.len(), 2 + 2 * cfg.exemplars.len());
        assert_eq!(messages[0].role, "system");
        assert!(messages[0].content.contains("Completeness"));
        assert!(messages[0]
            .content
            .contains("does the prompt utilize all of the provided query context."));
        assert!(messages[0].content.contains("from 1 to 10"));
        assert_eq!(messages[2].role, "assistant");
        assert_eq!(messages[2].content, "9");
        let last = &messages.last().unwrap().content;
        assert!(last.contains("create a lovely template"));
        assert!(last.contains("text-to-template"));
    }

    #[test]
    fn judge_config_validation_guards_scale_criteria_and_concurrency() {
        let mut cfg = JudgeConfig::mock();
        cfg.scale = (0, 10);
        assert!(cfg.validate().is_err());
        let mut cfg = JudgeConfig::mock();
        cfg.criteria.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = JudgeConfig::mock();
        cfg.criteria[1].name = cfg.criteria[0].name.clone();
        assert!(cfg.validate().is_err());
        let mut cfg = JudgeConfig::mock();
        cfg.concurrency = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = JudgeConfig::mock();
        cfg.exemplars[0].score = 11;
        assert!(cfg.validate().is_err());
        assert!(JudgeConfig::mock().validate().is_ok());
    }

    #[test]
    fn emitted_reports_roundtrip_and_carry_labeled_reference_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = EvalReport::new();
        report.length = Some(
            length_adherence(&[(8, 8), (8, 9), (12, 12), (16, 15), (20, 20)]).unwrap(),
        );
        report.modality = Some(
            ModalityReport::compute(&[
                (Task::Ip, "a vivid scene".to_string()),
                (Task::Tp, "create a template".to_string()),
            ])
            .unwrap(),
        );
        report.relevance = Some(
            judge_relevance(
                &[sample(8, Task::Ip, "prompt one")],
                &JudgeConfig::mock(),
            )
            .unwrap(),
        );
        let paths = emit_report(&report, dir.path()).unwrap();

        let reparsed: EvalReport =
            serde_json::from_str(&fs::read_to_string(&paths.json).unwrap()).unwrap();
        assert_eq!(reparsed, report);

        let md = fs::read_to_string(&paths.markdown).unwrap();
        let header = md
            .lines()
            .find(|l| l.starts_with("| Metric | 8 |"))
            .expect("measured length header");
        assert_eq!(header.matches('|').count(), 6, "4 data columns: {header}");
        assert!(md.contains("| Metric | 10 | 20 | 30 | 35 |"));
        assert!(md.contains(PAPER_REFERENCE_LABEL));
        assert!(md.contains("| text-to-image | 8.31 | paper (not reproduced) |"));
        assert!(md.contains("| text-to-template | 8.45 | paper (not reproduced) |"));
        let json = fs::read_to_string(&paths.json).unwrap();
        assert!(json.contains("\"label\": \"paper (not reproduced)\""));
    }

    #[test]
    fn reports_with_no_measured_section_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_report(&EvalReport::new(), dir.path()).unwrap_err();
        assert!(matches!(err, EvalError::InvalidInput(_)));
    }

    #[test]
    fn samples_jsonl_roundtrips_and_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.jsonl");
        let samples = vec![
            sample(8, Task::Ip, "vivid scene"),
            sample(12, Task::Tp, "create a template"),
        ];
        write_samples_jsonl(&path, &samples).unwrap();
        assert_eq!(read_samples_jsonl(&path).unwrap(), samples);

        fs::write(&path, "{\"target\":8,\"intent\":\"a: b\",\"task\":\"IP\",\"text\":\"x\"}\nnot json\n").unwrap();
        match read_samples_jsonl(&path).unwrap_err() {
            EvalError::MalformedSample { line, .. } => assert_eq!(line, 2),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn scoring_respects_the_concurrency_bound() {
        use std::sync::atomic::AtomicIsize;

        struct GaugeJudge {
            current: AtomicIsize,
            max_seen: AtomicIsize,
        }

        impl Judge for GaugeJudge {
            fn score_reply(
                &self,
                _sample: &EvalSample,
                _criterion: &JudgeCriterion,
                _cfg: &JudgeConfig,
            ) -> Result<String, EvalError> {
                let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
                self.max_seen.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(5));
                self.current.fetch_sub(1, Ordering::SeqCst);
                Ok("6".into())
            }

            fn label(&self) -> &'static str {
                "gauge"
            }
        }

        let prompts: Vec<EvalSample> = (0..6)
            .map(|i| sample(i, Task::Ip, &format!("text {i}")))
            .collect();
        let mut cfg = JudgeConfig::mock();
        cfg.concurrency = 2;
        let judge = GaugeJudge {
            current: AtomicIsize::new(0),
            max_seen: AtomicIsize::new(0),
        };
        let report = judge_relevance_with(&prompts, &cfg, &judge).unwrap();
        assert_eq!(report.n_scores, 6 * cfg.criteria.len());
        let max = judge.max_seen.load(Ordering::SeqCst);
        assert!(max <= 2, "observed {max} concurrent scoring requests");
        assert!(max >= 2, "pool never reached its width");
    }
}
