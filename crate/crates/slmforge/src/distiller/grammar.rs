//! Deterministic template-based teacher for offline runs: prompts are
//! assembled from an opener, the intent's content words, and seeded filler
//! to an exact word count, so the whole corpus is reproducible without a
//! network.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

use crate::corpus::Task;

use super::{DistillError, IntentRecord, Teacher};

/// Shortest constructible prompt: the template opener "create a" plus the
/// mandatory word "template" already takes three words.
pub const MIN_TARGET_LEN: u32 = 3;
pub const MAX_TARGET_LEN: u32 = 64;

/// Lexicons and settings for the grammar teacher. Every word is a single
/// lowercase token; "template" appears only where the template task plants
/// it, so the modality-marker ground truth is exact by construction.
#[derive(Debug, Clone)]
pub struct GrammarTeacherSpec {
    /// Style adjectives opening an image prompt.
    pub ip_openers: Vec<String>,
    /// Filler vocabulary drawn after the content words.
    pub filler: Vec<String>,
    /// Inclusive range the teacher draws per-prompt targets from.
    pub target_min: u32,
    pub target_max: u32,
    pub seed: u64,
}

impl GrammarTeacherSpec {
    /// Built-in clean lexicon with per-prompt targets in 5..=20.
    pub fn standard(seed: u64) -> Self {
        let words = |list: &[&str]| list.iter().map(|w| w.to_string()).collect();
        GrammarTeacherSpec {
            ip_openers: words(&[
                "whimsical", "vibrant", "minimalist", "dreamy", "elegant", "playful", "moody",
                "radiant", "serene", "bold",
            ]),
            filler: words(&[
                "with", "soft", "light", "and", "warm", "colors", "detailed", "background",
                "golden", "accents", "gentle", "tones", "crisp", "lines", "subtle", "texture",
                "layered", "depth", "balanced", "composition",
            ]),
            target_min: 5,
            target_max: 20,
            seed,
        }
    }

    fn validate(&self) -> Result<(), DistillError> {
        if self.ip_openers.is_empty() || self.filler.is_empty() {
            return Err(DistillError::InvalidConfig(
                "grammar lexicons must be non-empty".into(),
            ));
        }
        if self.target_min < MIN_TARGET_LEN
            || self.target_max > MAX_TARGET_LEN
            || self.target_min > self.target_max
        {
            return Err(DistillError::InvalidConfig(format!(
                "target range {}..={} outside {MIN_TARGET_LEN}..={MAX_TARGET_LEN}",
                self.target_min, self.target_max
            )));
        }
        for w in self.ip_openers.iter().chain(&self.filler) {
            if w.split_whitespace().count() != 1 || *w != w.to_lowercase() {
                return Err(DistillError::InvalidConfig(format!(
                    "lexicon entry {w:?} must be one lowercase word"
                )));
            }
            if w == "template" {
                return Err(DistillError::InvalidConfig(
                    "\"template\" is reserved for the template task marker".into(),
                ));
            }
        }
        Ok(())
    }
}

// All randomness flows from a stable content hash, so outputs depend only
// on the argument values, never on process state or platform.
fn rng_for(record: &IntentRecord, task: Task, target_len: u32, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(record.rendered().as_bytes());
    h.update([0u8, task as u8]);
    h.update(target_len.to_le_bytes());
    h.update(seed.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn pick<'a>(list: &'a [String], rng: &mut ChaCha8Rng) -> &'a str {
    &list[(rng.next_u64() % list.len() as u64) as usize]
}

// Lowercased single words from the intent's attribute values, in order.
// The image task must never say "template", so it is dropped there.
fn content_words(record: &IntentRecord, task: Task) -> Vec<String> {
    record
        .attributes
        .iter()
        .flat_map(|(_, v)| v.split_whitespace())
        .map(str::to_lowercase)
        .filter(|w| task != Task::Ip || w != "template")
        .collect()
}

/// Builds one prompt of exactly `target_len` words for the record: image
/// prompts open with a style adjective and never contain "template";
/// template prompts read `create a <content and filler> template`. Same
/// arguments always produce the same prompt.
pub fn grammar_generate(
    record: &IntentRecord,
    task: Task,
    target_len: u32,
    seed: u64,
    spec: &GrammarTeacherSpec,
) -> Result<String, DistillError> {
    spec.validate()?;
    record.validate()?;
    if !(MIN_TARGET_LEN..=MAX_TARGET_LEN).contains(&target_len) {
        return Err(DistillError::TargetLenOutOfRange(target_len));
    }
    let mut rng = rng_for(record, task, target_len, seed);
    let content = content_words(record, task);
    let target = target_len as usize;

    let mut words: Vec<String> = Vec::with_capacity(target);
    let tail: &[&str] = match task {
        Task::Ip => {
            words.push(pick(&spec.ip_openers, &mut rng).to_owned());
            &[]
        }
        Task::Tp => {
            words.push("create".to_owned());
            words.push("a".to_owned());
            &["template"]
        }
    };
    let budget = target - tail.len();
    for w in content {
        if words.len() >= budget {
            break;
        }
        words.push(w);
    }
    while words.len() < budget {
        words.push(pick(&spec.filler, &mut rng).to_owned());
    }
    words.extend(tail.iter().map(|w| w.to_string()));
    debug_assert_eq!(words.len(), target);
    Ok(words.join(" "))
}

/// [`Teacher`] over the grammar: per request it draws `n` distinct target
/// lengths from the spec's range (distinct targets guarantee distinct
/// prompts, so a clean run yields exactly intents x tasks x n pairs), then
/// generates one prompt per target.
pub struct GrammarTeacher {
    spec: GrammarTeacherSpec,
}

impl GrammarTeacher {
    pub fn new(spec: GrammarTeacherSpec) -> Self {
        GrammarTeacher { spec }
    }

    pub fn spec(&self) -> &GrammarTeacherSpec {
        &self.spec
    }
}

impl Teacher for GrammarTeacher {
    fn prompts_for(
        &self,
        record: &IntentRecord,
        task: Task,
        n: usize,
    ) -> Result<Vec<String>, DistillError> {
        self.spec.validate()?;
        let span = (self.spec.target_max - self.spec.target_min + 1) as usize;
        if n > span {
            return Err(DistillError::InvalidConfig(format!(
                "n_per_intent {n} exceeds the {span} distinct targets in {}..={}",
                self.spec.target_min, self.spec.target_max
            )));
        }
        // Partial Fisher-Yates over the target range, keyed off the record
        // itself (target_len slot pinned to 0 so the draw order is a pure
        // function of record, task, and seed).
        let mut rng = rng_for(record, task, 0, self.spec.seed);
        let mut targets: Vec<u32> = (self.spec.target_min..=self.spec.target_max).collect();
        for i in 0..n {
            let j = i + (rng.next_u64() % (span - i) as u64) as usize;
            targets.swap(i, j);
        }
        targets.truncate(n);
        targets
            .into_iter()
            .map(|t| grammar_generate(record, task, t, self.spec.seed, &self.spec))
            .collect()
    }

    fn label(&self) -> &'static str {
        "grammar"
    }
}
