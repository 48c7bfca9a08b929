//! Chat-completion teacher client: few-shot message rendering, a blocking
//! JSON-over-HTTP call, and retry with exponential backoff plus jitter on
//! rate limits and server errors. The credential is read from the
//! `SLMFORGE_TEACHER_KEY` environment variable, never from a flag.

use std::sync::Mutex;
use std::time::Duration;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::{format_instance, PromptPair, Task};

use super::{DistillError, IntentRecord, Teacher};

pub const TEACHER_KEY_ENV: &str = "SLMFORGE_TEACHER_KEY";

/// Reads the teacher credential from the environment.
pub fn teacher_key_from_env() -> Option<String> {
    std::env::var(TEACHER_KEY_ENV).ok().filter(|k| !k.is_empty())
}

/// One chat message in the wire format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: impl Into<String>) -> Self {
        ChatMessage {
            role: role.into(),
            content: content.into(),
        }
    }
}

/// Task description, style constraints, and few-shot exemplars rendered
/// into every teacher request for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherTemplate {
    pub task_description: String,
    pub style_constraints: String,
    /// (intent, prompt) pairs shown to the teacher, at least two.
    pub few_shot_exemplars: Vec<(String, String)>,
    pub task: Task,
}

impl TeacherTemplate {
    /// Built-in template for a task; the mechanism is configurable, this
    /// content is merely a serviceable default.
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Ip => TeacherTemplate {
                task_description: "You write text-to-image prompts for a graphic design tool. \
                                   Given a user intent as comma-separated key: value attributes, \
                                   write vivid scene descriptions an image model can render."
                    .into(),
                style_constraints: "Write each prompt as a single lowercase line with no \
                                    surrounding quotes, one prompt per line."
                    .into(),
                few_shot_exemplars: vec![
                    (
                        "Topic: birthday, Scene object: balloon".into(),
                        "whimsical and colorful balloon floating over a pastel birthday party"
                            .into(),
                    ),
                    (
                        "Topic: autumn, Scene object: forest path".into(),
                        "golden forest path covered in fallen leaves under soft morning light"
                            .into(),
                    ),
                ],
                task: Task::Ip,
            },
            Task::Tp => TeacherTemplate {
                task_description: "You write text-to-template prompts for a graphic design tool. \
                                   Given a user intent as comma-separated key: value attributes, \
                                   describe a design template to assemble; every prompt must \
                                   contain the word template."
                    .into(),
                style_constraints: "Write each prompt as a single lowercase line starting with \
                                    create a, one prompt per line."
                    .into(),
                few_shot_exemplars: vec![
                    (
                        "Design type: invitation, Topic: wedding".into(),
                        "create a romantic wedding invitation template with floral borders"
                            .into(),
                    ),
                    (
                        "Design type: flyer, Topic: concert".into(),
                        "create a bold concert flyer template with neon typography".into(),
                    ),
                ],
                task: Task::Tp,
            },
        }
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        if self.few_shot_exemplars.len() < 2 {
            return Err(DistillError::InvalidTemplate(format!(
                "need at least 2 exemplars, got {}",
                self.few_shot_exemplars.len()
            )));
        }
        for (intent, prompt) in &self.few_shot_exemplars {
            let pair = PromptPair {
                intent: intent.clone(),
                prompt: prompt.clone(),
                task: self.task,
                source: None,
            };
            format_instance(&pair).map_err(|e| {
                DistillError::InvalidTemplate(format!("exemplar {intent:?}: {e}"))
            })?;
        }
        Ok(())
    }
}

/// Builds the request messages: one system message (task description plus
/// style constraints), alternating user/assistant exemplar pairs, then a
/// user message asking for `n` prompts for this intent. Two exemplars give
/// six messages.
pub fn render_teacher_messages(
    record: &IntentRecord,
    template: &TeacherTemplate,
    n: usize,
) -> Vec<ChatMessage> {
    let mut messages = Vec::with_capacity(2 + 2 * template.few_shot_exemplars.len());
    messages.push(ChatMessage::new(
        "system",
        format!(
            "{}\n\n{}",
            template.task_description, template.style_constraints
        ),
    ));
    for (intent, prompt) in &template.few_shot_exemplars {
        messages.push(ChatMessage::new(
            "user",
            format!("Write 1 prompt for this intent: {intent}"),
        ));
        messages.push(ChatMessage::new("assistant", prompt.clone()));
    }
    messages.push(ChatMessage::new(
        "user",
        format!(
            "Write {n} prompts for this intent: {}",
            record.rendered()
        ),
    ));
    messages
}

/// Splits a teacher reply into prompt strings: a JSON string array is taken
/// as-is, otherwise one prompt per non-empty line with bullet or numbered
/// prefixes stripped.
pub fn parse_prompts(content: &str) -> Vec<String> {
    let trimmed = content.trim();
    if trimmed.starts_with('[') {
        if let Ok(list) = serde_json::from_str::<Vec<String>>(trimmed) {
            return list
                .into_iter()
                .map(|s| s.trim().to_owned())
                .filter(|s| !s.is_empty())
                .collect();
        }
    }
    trimmed.lines().filter_map(clean_line).collect()
}

fn clean_line(line: &str) -> Option<String> {
    let mut s = line.trim();
    s = s.trim_start_matches(['-', '*']).trim_start();
    let digits = s.trim_start_matches(|c: char| c.is_ascii_digit());
    if digits.len() < s.len() {
        if let Some(rest) = digits.strip_prefix(['.', ')']) {
            s = rest.trim_start();
        }
    }
    (!s.is_empty()).then(|| s.to_owned())
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    n: usize,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessageBody,
}

#[derive(Deserialize)]
struct ChatMessageBody {
    content: String,
}

// Unparseable payloads are kept for diagnosis but capped so a pathological
// reply cannot flood the report.
const RAW_RETAIN_LIMIT: usize = 2_000;

pub(crate) fn retained(raw: &str) -> String {
    if raw.len() <= RAW_RETAIN_LIMIT {
        return raw.to_owned();
    }
    let mut cut = RAW_RETAIN_LIMIT;
    while !raw.is_char_boundary(cut) {
        cut -= 1;
    }
    format!("{}... [{} bytes total]", &raw[..cut], raw.len())
}

/// Decodes a chat-completion body into each choice's message content.
pub(crate) fn choice_contents(raw: &str) -> Option<Vec<String>> {
    let parsed: ChatResponse = serde_json::from_str(raw).ok()?;
    Some(
        parsed
            .choices
            .into_iter()
            .map(|c| c.message.content)
            .collect(),
    )
}

/// Extracts prompt strings from a chat-completion response body; an
/// undecodable body or one with no extractable prompts is an
/// ["unparseable teacher output"](DistillError::Unparseable) error with
/// the raw payload retained.
pub(crate) fn parse_chat_response(raw: &str) -> Result<Vec<String>, DistillError> {
    let unparseable = || DistillError::Unparseable { raw: retained(raw) };
    let contents = choice_contents(raw).ok_or_else(unparseable)?;
    let prompts: Vec<String> = contents.iter().flat_map(|c| parse_prompts(c)).collect();
    if prompts.is_empty() {
        return Err(unparseable());
    }
    Ok(prompts)
}

/// Exponential backoff with jitter: attempt k waits base * 2^k (capped at
/// max_delay) plus up to half of base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(4),
        }
    }
}

pub(crate) fn backoff_delay(policy: &RetryPolicy, attempt: u32, rng: &mut ChaCha8Rng) -> Duration {
    let exp = policy
        .base_delay
        .saturating_mul(2u32.saturating_pow(attempt))
        .min(policy.max_delay);
    let jitter_ns = (policy.base_delay.as_nanos() / 2).max(1) as u64;
    exp + Duration::from_nanos(rng.next_u64() % jitter_ns)
}

/// Injectable wait, so fault-injection tests can observe backoff delays on
/// a virtual clock instead of sleeping.
pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

/// The real clock.
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

#[derive(Debug, Clone)]
pub struct HttpTeacherConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub request_timeout: Duration,
    pub retry: RetryPolicy,
    /// Seeds backoff jitter only; response content is the teacher's.
    pub seed: u64,
}

impl HttpTeacherConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpTeacherConfig {
            endpoint: endpoint.into(),
            model: "teacher-large".into(),
            temperature: 0.9,
            request_timeout: Duration::from_secs(30),
            retry: RetryPolicy::default(),
            seed: 0,
        }
    }
}

/// Remote chat-completion teacher. Safe to share across worker threads;
/// each request owns its retry loop and the jitter generator is locked.
pub struct HttpTeacher {
    cfg: HttpTeacherConfig,
    ip_template: TeacherTemplate,
    tp_template: TeacherTemplate,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    sleeper: Box<dyn Sleeper>,
    jitter: Mutex<ChaCha8Rng>,
}

impl HttpTeacher {
    /// `api_key` comes from [`teacher_key_from_env`]; callers must not
    /// accept it as a command-line flag.
    pub fn new(cfg: HttpTeacherConfig, api_key: Option<String>) -> Result<Self, DistillError> {
        Self::with_parts(
            cfg,
            TeacherTemplate::default_for(Task::Ip),
            TeacherTemplate::default_for(Task::Tp),
            api_key,
            Box::new(ThreadSleeper),
        )
    }

    pub fn with_parts(
        cfg: HttpTeacherConfig,
        ip_template: TeacherTemplate,
        tp_template: TeacherTemplate,
        api_key: Option<String>,
        sleeper: Box<dyn Sleeper>,
    ) -> Result<Self, DistillError> {
        if ip_template.task != Task::Ip || tp_template.task != Task::Tp {
            return Err(DistillError::InvalidTemplate(
                "templates assigned to the wrong tasks".into(),
            ));
        }
        ip_template.validate()?;
        tp_template.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.request_timeout)
            .build()
            .map_err(|e| DistillError::Transport(e.to_string()))?;
        let jitter = Mutex::new(ChaCha8Rng::seed_from_u64(cfg.seed));
        Ok(HttpTeacher {
            cfg,
            ip_template,
            tp_template,
            api_key,
            client,
            sleeper,
            jitter,
        })
    }

    fn template_for(&self, task: Task) -> &TeacherTemplate {
        match task {
            Task::Ip => &self.ip_template,
            Task::Tp => &self.tp_template,
        }
    }

    fn post_once(&self, messages: &[ChatMessage], n: usize) -> Result<Vec<String>, DistillError> {
        let body = ChatRequest {
            model: &self.cfg.model,
            messages,
            temperature: self.cfg.temperature,
            n,
        };
        let mut req = self.client.post(&self.cfg.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| DistillError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .text()
            .map_err(|e| DistillError::Transport(e.to_string()))?;
        if status != 200 {
            return Err(DistillError::HttpStatus {
                status,
                body: retained(&text),
            });
        }
        parse_chat_response(&text)
    }
}

// Rate limits, server errors, and transport failures are transient;
// anything else (including unparseable output) fails the job immediately.
fn is_retryable(err: &DistillError) -> bool {
    match err {
        DistillError::HttpStatus { status, .. } => *status == 429 || *status >= 500,
        DistillError::Transport(_) => true,
        _ => false,
    }
}

impl Teacher for HttpTeacher {
    fn prompts_for(
        &self,
        record: &IntentRecord,
        task: Task,
        n: usize,
    ) -> Result<Vec<String>, DistillError> {
        let messages = render_teacher_messages(record, self.template_for(task), n);
        let mut attempt = 0u32;
        loop {
            match self.post_once(&messages, n) {
                Ok(mut prompts) => {
                    prompts.truncate(n);
                    return Ok(prompts);
                }
                Err(e) if is_retryable(&e) && attempt < self.cfg.retry.max_retries => {
                    let delay = {
                        let mut rng = self.jitter.lock().expect("jitter rng");
                        backoff_delay(&self.cfg.retry, attempt, &mut rng)
                    };
                    self.sleeper.sleep(delay);
                    attempt += 1;
                }
                Err(e) if is_retryable(&e) => {
                    return Err(DistillError::ExhaustedRetries {
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
