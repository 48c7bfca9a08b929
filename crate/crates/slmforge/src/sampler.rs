//! Conditioned autoregressive generation: a command prefix (length token,
//! intent, modality token) steers the decoder, tokens are drawn with
//! temperature plus top-k truncation from a seeded generator, and a
//! single-stream throughput bench reports tokens/second and peak memory.
//!
//! Each step recomputes the full forward pass over the growing context (no
//! key/value cache); the bench makes that cost visible.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::{word_count, Task};
use crate::model::{forward_reuse, ModelError, Parameters, Workspace};
use crate::tokenizer::{ControlKind, TokenizerArtifact, TokenizerError, MAX_LENGTH_TOKEN};

#[derive(Debug, thiserror::Error)]
pub enum SampleError {
    #[error("invalid generation spec: {0}")]
    InvalidSpec(String),
    #[error("target length {0} outside 1..={MAX_LENGTH_TOKEN}")]
    LengthOutOfRange(u32),
    #[error("prefix is {len} tokens but the model context is {ctx}")]
    PrefixTooLong { len: usize, ctx: usize },
    #[error("tokenizer vocab {tokenizer} exceeds model vocab {model}")]
    VocabMismatch { tokenizer: usize, model: usize },
    #[error("tokenizer lacks the {0} control token")]
    MissingControl(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// What to generate: the command-token conditioning (intent, task, target
/// length) plus decoding settings. Temperature 0 selects greedy argmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub intent: String,
    pub task: Task,
    /// Commanded word count, 1..=64.
    pub target_len: u32,
    pub temperature: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl GenSpec {
    /// Defaults: temperature 0.8, top-k 50, room for the longest commanded
    /// prompt.
    pub fn new(intent: impl Into<String>, task: Task, target_len: u32) -> Self {
        GenSpec {
            intent: intent.into(),
            task,
            target_len,
            temperature: 0.8,
            top_k: 50,
            max_new_tokens: 128,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), SampleError> {
        if self.target_len == 0 || self.target_len > MAX_LENGTH_TOKEN {
            return Err(SampleError::LengthOutOfRange(self.target_len));
        }
        if self.intent.trim().is_empty() {
            return Err(SampleError::InvalidSpec("empty intent".into()));
        }
        for seq in ["<|", "|>", "\n"] {
            if self.intent.contains(seq) {
                return Err(SampleError::InvalidSpec(format!(
                    "intent contains reserved sequence {seq:?}"
                )));
            }
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(SampleError::InvalidSpec(format!(
                "temperature {} must be finite and >= 0 (0 = greedy)",
                self.temperature
            )));
        }
        if self.top_k == 0 {
            return Err(SampleError::InvalidSpec("top_k must be >= 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(SampleError::InvalidSpec(
                "max_new_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One generation result. `realized_len` is the word count of `text`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratedPrompt {
    pub text: String,
    pub realized_len: usize,
    pub tokens_emitted: usize,
    /// Wall-clock seconds for the sampling loop.
    pub elapsed: f64,
}

/// Encodes the command head `<|N|> <|intent|> INTENT <|IP or TP|>` so the
/// returned ids are an exact token prefix of a training instance with the
/// same conditioning (the space before the first prompt word belongs to the
/// prompt-side byte segment, so the prefix ends at the modality token).
pub fn build_prefix(
    spec: &GenSpec,
    artifact: &TokenizerArtifact,
) -> Result<Vec<u32>, SampleError> {
    spec.validate()?;
    let length_id = artifact
        .control_id(ControlKind::Length(spec.target_len))
        .ok_or(SampleError::MissingControl("length"))?;
    let modality_id = artifact
        .control_id(spec.task.control_kind())
        .ok_or(SampleError::MissingControl("modality"))?;
    let text = format!(
        "<|{}|> <|intent|> {} <|{}|>",
        spec.target_len, spec.intent, spec.task
    );
    let ids = artifact.encode(&text);
    debug_assert_eq!(ids.first(), Some(&length_id));
    debug_assert_eq!(ids.last(), Some(&modality_id));
    Ok(ids)
}

const GREEDY_EPS: f64 = 1e-8;

/// Draws the next id from one logits row: temperature scaling, top-k
/// truncation (ties broken toward the lower id), then a seeded categorical
/// draw in f64. Temperature below [`GREEDY_EPS`] is exact argmax.
pub(crate) fn sample_from_row(
    row: &[f32],
    temperature: f64,
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> u32 {
    debug_assert!(!row.is_empty());
    if temperature < GREEDY_EPS {
        return crate::math::argmax(row) as u32;
    }
    let mut order: Vec<u32> = (0..row.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        row[b as usize]
            .partial_cmp(&row[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(top_k.min(row.len()));
    let mx = row[order[0] as usize] as f64;
    let weights: Vec<f64> = order
        .iter()
        .map(|&id| ((row[id as usize] as f64 - mx) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    // 53-bit uniform in [0, 1), the same convention the dropout masks use.
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * total;
    let mut cum = 0.0;
    for (&id, &w) in order.iter().zip(&weights) {
        cum += w;
        if u < cum {
            return id;
        }
    }
    *order.last().expect("top_k >= 1")
}

/// Ids left after dropping every control token.
pub(crate) fn strip_controls(artifact: &TokenizerArtifact, ids: &[u32]) -> Vec<u32> {
    ids.iter()
        .copied()
        .filter(|&id| !artifact.is_control(id))
        .collect()
}

/// Generates one prompt conditioned on the command prefix. Sampling stops
/// at the first `<|endoftext|>`, at a stray modality token (a malformed
/// continuation), at max_new_tokens, or when the context fills; the stop
/// token counts toward tokens_emitted but never reaches the text. Sampling
/// is restricted to ids the tokenizer can decode, so a model with a padded
/// (larger) vocab never emits an untrained id.
pub fn generate(
    params: &Parameters<f32>,
    artifact: &TokenizerArtifact,
    spec: &GenSpec,
) -> Result<GeneratedPrompt, SampleError> {
    let cfg = *params.config();
    if artifact.vocab_size() > cfg.vocab_size {
        return Err(SampleError::VocabMismatch {
            tokenizer: artifact.vocab_size(),
            model: cfg.vocab_size,
        });
    }
    let eot = artifact
        .end_of_text_id()
        .ok_or(SampleError::MissingControl("end-of-text"))?;
    let prefix = build_prefix(spec, artifact)?;
    if prefix.len() > cfg.context_len {
        return Err(SampleError::PrefixTooLong {
            len: prefix.len(),
            ctx: cfg.context_len,
        });
    }

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ids = prefix.clone();
    let tok_vocab = artifact.vocab_size();
    let mut emitted = 0usize;
    while emitted < spec.max_new_tokens && ids.len() <= cfg.context_len {
        let t = ids.len();
        let mut ws = Workspace::new(&cfg, 1, t);
        forward_reuse(params, &ids, &mut ws)?;
        let logits = ws.logits();
        let row = &logits.data()[(t - 1) * logits.cols()..][..tok_vocab];
        let next = sample_from_row(row, spec.temperature, spec.top_k, &mut rng);
        emitted += 1;
        if next == eot {
            break;
        }
        if matches!(
            artifact.control_kind(next),
            Some(ControlKind::ModalityT2i | ControlKind::ModalityT2t)
        ) {
            break;
        }
        ids.push(next);
    }

    let body = strip_controls(artifact, &ids[prefix.len()..]);
    let text = artifact.decode(&body)?.trim().to_owned();
    Ok(GeneratedPrompt {
        realized_len: word_count(&text),
        text,
        tokens_emitted: emitted,
        elapsed: start.elapsed().as_secs_f64(),
    })
}

/// Throughput report over repeated single-stream generation runs. `runs`
/// holds the per-run tokens/second after the warmup run is discarded.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub median_tps: f64,
    pub p10_tps: f64,
    pub p90_tps: f64,
    pub peak_rss_bytes: u64,
    pub runs: Vec<f64>,
}

/// Runs `generate` n_runs times (n_runs >= 3; the first run warms caches
/// and is discarded), each with the spec's seed offset by the run index so
/// runs are independent but reproducible.
pub fn bench_throughput(
    params: &Parameters<f32>,
    artifact: &TokenizerArtifact,
    spec: &GenSpec,
    n_runs: usize,
) -> Result<BenchReport, SampleError> {
    if n_runs < 3 {
        return Err(SampleError::InvalidSpec(format!(
            "n_runs {n_runs} must be >= 3 (first run is warmup)"
        )));
    }
    let mut runs = Vec::with_capacity(n_runs - 1);
    for i in 0..n_runs {
        let mut s = spec.clone();
        s.seed = spec.seed.wrapping_add(i as u64);
        let g = generate(params, artifact, &s)?;
        if i == 0 {
            continue;
        }
        runs.push(g.tokens_emitted as f64 / g.elapsed.max(1e-12));
    }
    let mut sorted = runs.clone();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite throughput"));
    Ok(BenchReport {
        median_tps: percentile(&sorted, 0.5),
        p10_tps: percentile(&sorted, 0.1),
        p90_tps: percentile(&sorted, 0.9),
        peak_rss_bytes: peak_rss_bytes(),
        runs,
    })
}

// Nearest-rank percentile on a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Peak resident set size of this process in bytes (VmHWM), or 0 when the
/// proc interface is unavailable.
pub fn peak_rss_bytes() -> u64 {
    let Ok(status) = std::fs::read_to_string("/proc/self/status") else {
        return 0;
    };
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            let kb: u64 = rest
                .trim()
                .trim_end_matches("kB")
                .trim()
                .parse()
                .unwrap_or(0);
            return kb * 1024;
        }
    }
    0
}
