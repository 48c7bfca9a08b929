//! Teacher-driven training-pair generation: render intents into teacher
//! requests (remote chat-completion endpoint or the deterministic grammar
//! teacher), run them through a bounded worker pool, then filter, dedup,
//! and write the accepted pairs as JSONL plus a run report.

mod grammar;
mod http;

pub use grammar::{grammar_generate, GrammarTeacher, GrammarTeacherSpec};
pub use http::{
    parse_prompts, render_teacher_messages, teacher_key_from_env, ChatMessage, HttpTeacher,
    HttpTeacherConfig, RetryPolicy, Sleeper, TeacherTemplate, ThreadSleeper, TEACHER_KEY_ENV,
};
pub(crate) use http::{
    backoff_delay as http_backoff_delay, choice_contents as http_choice_contents,
    retained as http_retained,
};

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, PromptPair, Task};

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("invalid intent record{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    InvalidIntent { line: Option<usize>, msg: String },
    #[error("invalid teacher template: {0}")]
    InvalidTemplate(String),
    #[error("target length {0} outside 3..=64")]
    TargetLenOutOfRange(u32),
    #[error("invalid distillation settings: {0}")]
    InvalidConfig(String),
    #[error("teacher endpoint returned status {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("teacher request failed: {0}")]
    Transport(String),
    #[error("unparseable teacher output: {raw}")]
    Unparseable { raw: String },
    #[error("retries exhausted after {attempts} attempts; last error: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("{failed} of {total} teacher jobs failed (over half); partial output kept at {}", out_dir.display())]
    MostlyFailed {
        failed: usize,
        total: usize,
        out_dir: PathBuf,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A structured description of user purpose as ordered key-value
/// attributes, read from the intents JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentRecord {
    /// Ordered attribute pairs, e.g. [("Topic", "birthday"), ("Scene
    /// object", "balloon")].
    pub attributes: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub source_tag: String,
}

impl IntentRecord {
    pub fn new<K: Into<String>, V: Into<String>>(attributes: Vec<(K, V)>) -> Self {
        IntentRecord {
            attributes: attributes
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
            source_tag: String::new(),
        }
    }

    /// The canonical single-line form: `key: value` joined by ", ".
    pub fn rendered(&self) -> String {
        self.attributes
            .iter()
            .map(|(k, v)| format!("{k}: {v}"))
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        let invalid = |msg: String| DistillError::InvalidIntent { line: None, msg };
        if self.attributes.is_empty() {
            return Err(invalid("record has no attributes".into()));
        }
        let mut keys = HashSet::new();
        for (k, v) in &self.attributes {
            if k.trim().is_empty() {
                return Err(invalid("empty attribute key".into()));
            }
            if !keys.insert(k.as_str()) {
                return Err(invalid(format!("duplicate attribute key {k:?}")));
            }
            for field in [k.as_str(), v.as_str()] {
                for seq in ["<|", "|>", "\n"] {
                    if field.contains(seq) {
                        return Err(invalid(format!(
                            "attribute contains reserved sequence {seq:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reads and validates one [`IntentRecord`] per JSONL line.
pub fn read_intents_jsonl(path: &Path) -> Result<Vec<IntentRecord>, DistillError> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: IntentRecord =
            serde_json::from_str(&line).map_err(|e| DistillError::InvalidIntent {
                line: Some(i + 1),
                msg: e.to_string(),
            })?;
        record.validate().map_err(|e| DistillError::InvalidIntent {
            line: Some(i + 1),
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Case-insensitive whole-word rejection list. A term matches when it
/// equals a maximal alphanumeric run of the lowercased text, so "BadWord,"
/// is caught and "badwording" is not.
#[derive(Debug, Clone, Default)]
pub struct SafetyFilter {
    blocklist: HashSet<String>,
}

impl SafetyFilter {
    /// Terms are lowercased on entry. The default filter is empty; ship
    /// deployments load a list from file.
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(terms: I) -> Self {
        SafetyFilter {
            blocklist: terms.into_iter().map(|t| t.into().to_lowercase()).collect(),
        }
    }

    /// One lowercase term per line; blank lines and `#` comments skipped.
    pub fn from_file(path: &Path) -> Result<Self, DistillError> {
        let text = std::fs::read_to_string(path)?;
        Ok(SafetyFilter::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_owned),
        ))
    }

    pub fn is_empty(&self) -> bool {
        self.blocklist.is_empty()
    }

    /// First blocklisted word found in `text`, if any.
    pub fn matches(&self, text: &str) -> Option<String> {
        if self.blocklist.is_empty() {
            return None;
        }
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .find(|w| !w.is_empty() && self.blocklist.contains(*w))
            .map(str::to_owned)
    }

    fn rejects(&self, pair: &PromptPair) -> bool {
        self.matches(&pair.intent).is_some() || self.matches(&pair.prompt).is_some()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SanitizeStats {
    pub accepted: usize,
    pub rejected_blocklist: usize,
    pub rejected_duplicate: usize,
}

/// Applies the safety filter, then drops exact-duplicate (intent, prompt,
/// task) triples, keeping first occurrences in order. Idempotent.
pub fn sanitize_and_dedup(
    pairs: Vec<PromptPair>,
    filter: &SafetyFilter,
) -> (Vec<PromptPair>, SanitizeStats) {
    let mut stats = SanitizeStats::default();
    let mut seen: HashSet<(String, String, Task)> = HashSet::new();
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if filter.rejects(&pair) {
            stats.rejected_blocklist += 1;
            continue;
        }
        let key = (pair.intent.clone(), pair.prompt.clone(), pair.task);
        if !seen.insert(key) {
            stats.rejected_duplicate += 1;
            continue;
        }
        stats.accepted += 1;
        out.push(pair);
    }
    (out, stats)
}

/// A source of prompts for one (intent, task) request. Implementations
/// must be safe to call from multiple worker threads.
pub trait Teacher: Sync {
    /// Up to `n` prompt strings for this intent and task.
    fn prompts_for(
        &self,
        record: &IntentRecord,
        task: Task,
        n: usize,
    ) -> Result<Vec<String>, DistillError>;

    /// Label recorded in the run report.
    fn label(&self) -> &'static str;
}

/// One failed (intent, task) job.
#[derive(Debug, Clone, Serialize)]
pub struct JobFailure {
    pub intent_index: usize,
    pub task: Task,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub teacher: &'static str,
    pub intents_in: usize,
    pub jobs: usize,
    pub pairs_from_teacher: usize,
    pub accepted: usize,
    pub rejected_blocklist: usize,
    pub rejected_duplicate: usize,
    pub failures: Vec<JobFailure>,
    pub failure_rate: f64,
}

/// Runs every intent through the teacher for both tasks with at most
/// `concurrency` requests in flight, sanitizes and dedups the results, and
/// writes `pairs.jsonl` plus `report.json` into `out_dir`. Output order is
/// (intent index, task IP then TP, prompt index) regardless of completion
/// order. Per-job failures are recorded, not fatal; when more than half
/// the jobs fail the partial output is kept and an error is returned.
pub fn distill_run(
    records: &[IntentRecord],
    teacher: &dyn Teacher,
    filter: &SafetyFilter,
    n_per_intent: usize,
    concurrency: usize,
    out_dir: &Path,
) -> Result<RunReport, DistillError> {
    if records.is_empty() {
        return Err(DistillError::InvalidConfig("no intent records".into()));
    }
    if n_per_intent == 0 || concurrency == 0 {
        return Err(DistillError::InvalidConfig(
            "n_per_intent and concurrency must be positive".into(),
        ));
    }
    for record in records {
        record.validate()?;
    }

    let jobs: Vec<(usize, Task)> = (0..records.len())
        .flat_map(|i| [(i, Task::Ip), (i, Task::Tp)])
        .collect();
    let results: Mutex<Vec<Option<Result<Vec<String>, String>>>> =
        Mutex::new(vec![None; jobs.len()]);
    let next_job = AtomicUsize::new(0);
    let workers = concurrency.min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next_job.fetch_add(1, Ordering::Relaxed);
                if j >= jobs.len() {
                    break;
                }
                let (rec_idx, task) = jobs[j];
                let outcome = teacher
                    .prompts_for(&records[rec_idx], task, n_per_intent)
                    .map_err(|e| e.to_string());
                results.lock().expect("worker panicked")[j] = Some(outcome);
            });
        }
    });

    let results = results.into_inner().expect("worker panicked");
    let mut pairs = Vec::new();
    let mut failures = Vec::new();
    for (j, outcome) in results.into_iter().enumerate() {
        let (rec_idx, task) = jobs[j];
        match outcome.expect("every job slot filled") {
            Ok(prompts) => {
                let record = &records[rec_idx];
                for prompt in prompts {
                    pairs.push(PromptPair {
                        intent: record.rendered(),
                        prompt,
                        task,
                        source: (!record.source_tag.is_empty())
                            .then(|| record.source_tag.clone()),
                    });
                }
            }
            Err(error) => failures.push(JobFailure {
                intent_index: rec_idx,
                task,
                error,
            }),
        }
    }

    let pairs_from_teacher = pairs.len();
    let (accepted_pairs, stats) = sanitize_and_dedup(pairs, filter);
    std::fs::create_dir_all(out_dir)?;
    crate::corpus::write_pairs_jsonl(&out_dir.join("pairs.jsonl"), &accepted_pairs)?;
    let report = RunReport {
        teacher: teacher.label(),
        intents_in: records.len(),
        jobs: jobs.len(),
        pairs_from_teacher,
        accepted: stats.accepted,
        rejected_blocklist: stats.rejected_blocklist,
        rejected_duplicate: stats.rejected_duplicate,
        failure_rate: failures.len() as f64 / jobs.len() as f64,
        failures,
    };
    let mut f = std::fs::File::create(out_dir.join("report.json"))?;
    serde_json::to_writer_pretty(&mut f, &report)?;
    f.write_all(b"\n")?;

    if 2 * report.failures.len() > report.jobs {
        return Err(DistillError::MostlyFailed {
            failed: report.failures.len(),
            total: report.jobs,
            out_dir: out_dir.to_path_buf(),
        });
    }
    Ok(report)
}
