//! Training-instance grammar and dataset packing.
//!
//! Every training example is one line of the command grammar
//! `<|N|> <|intent|> INTENT <|IP|> PROMPT` (or `<|TP|>`), where N is the
//! word count of the lowercased prompt. This module formats and parses that
//! grammar, packs tokenized instances into fixed-size blocks with a seeded
//! shuffle and train/val split, and reads/writes the JSONL and shard file
//! formats.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::tokenizer::{ControlKind, TokenizerArtifact};

pub const SHARD_MAGIC: &[u8; 8] = b"SLMSHD1\0";
/// Longest prompt length the command grammar can declare, in words.
pub const MAX_PROMPT_WORDS: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("length out of command range: prompt has {0} words (allowed 1..={MAX_PROMPT_WORDS})")]
    LengthOutOfRange(usize),
    #[error("intent is empty")]
    EmptyIntent,
    #[error("{field} contains reserved sequence {seq:?}")]
    ReservedSequence { field: &'static str, seq: String },
    #[error("parse error at byte {offset}: {what}")]
    Parse { offset: usize, what: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("val fraction {0} outside (0, 0.5)")]
    BadValFraction(f64),
    #[error("tokenizer is missing control token {0}")]
    MissingControl(&'static str),
    #[error("pairs file line {line}: {source}")]
    PairsLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error("malformed shard data: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which downstream system a prompt is written for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Text-to-image prompt.
    #[serde(rename = "IP")]
    Ip,
    /// Text-to-template prompt.
    #[serde(rename = "TP")]
    Tp,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ip => "IP",
            Task::Tp => "TP",
        })
    }
}

impl Task {
    pub fn control_kind(self) -> ControlKind {
        match self {
            Task::Ip => ControlKind::ModalityT2i,
            Task::Tp => ControlKind::ModalityT2t,
        }
    }
}

/// An (intent, prompt) example, the unit the distiller produces and the
/// corpus consumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    /// Comma-separated `Key: value` attributes, e.g.
    /// "Topic: birthday, Scene object: balloon".
    pub intent: String,
    pub prompt: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

/// One serialized line of training data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingInstance {
    pub text: String,
    pub declared_len: u32,
    pub task: Task,
}

/// Count of maximal non-whitespace runs; punctuation stays attached to its
/// word.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn check_field(field: &'static str, value: &str) -> Result<(), CorpusError> {
    for seq in ["<|", "|>", "\n"] {
        if value.contains(seq) {
            return Err(CorpusError::ReservedSequence {
                field,
                seq: seq.to_owned(),
            });
        }
    }
    Ok(())
}

/// Serialize a pair into the command grammar. The prompt is lowercased and
/// the length tag is computed from the lowercased prompt's word count.
pub fn format_instance(pair: &PromptPair) -> Result<TrainingInstance, CorpusError> {
    if pair.intent.trim().is_empty() {
        return Err(CorpusError::EmptyIntent);
    }
    check_field("intent", &pair.intent)?;
    check_field("prompt", &pair.prompt)?;
    let prompt = pair.prompt.to_lowercase();
    let n = word_count(&prompt);
    if n == 0 || n > MAX_PROMPT_WORDS {
        return Err(CorpusError::LengthOutOfRange(n));
    }
    let text = format!("<|{n}|> <|intent|> {} <|{}|> {prompt}", pair.intent, pair.task);
    Ok(TrainingInstance {
        text,
        declared_len: n as u32,
        task: pair.task,
    })
}

/// Parse one line of the command grammar back into a pair plus the declared
/// length (returned verbatim from the tag, not recomputed).
pub fn parse_instance(text: &str) -> Result<(PromptPair, u32), CorpusError> {
    let err = |offset: usize, what: &str| CorpusError::Parse {
        offset,
        what: what.to_owned(),
    };

    let rest = text
        .strip_prefix("<|")
        .ok_or_else(|| err(0, "expected length tag <|N|>"))?;
    let close = rest
        .find("|>")
        .ok_or_else(|| err(0, "unterminated length tag"))?;
    let digits = &rest[..close];
    let declared: u32 = digits
        .parse()
        .map_err(|_| err(0, "length tag is not a number"))?;
    if declared == 0 || declared as usize > MAX_PROMPT_WORDS {
        return Err(err(0, "length tag outside 1..=64"));
    }
    let mut pos = 2 + close + 2; // past "<|", digits, "|>"

    const INTENT_MARK: &str = " <|intent|> ";
    if !text[pos..].starts_with(INTENT_MARK) {
        return Err(err(pos, "expected ` <|intent|> ` after length tag"));
    }
    pos += INTENT_MARK.len();

    let intent_start = pos;
    let ip_at = text[pos..].find(" <|IP|> ").map(|i| (i, Task::Ip, 8));
    let tp_at = text[pos..].find(" <|TP|> ").map(|i| (i, Task::Tp, 8));
    let (marker_rel, task, marker_len) = match (ip_at, tp_at) {
        (Some(a), Some(b)) => {
            if a.0 <= b.0 {
                a
            } else {
                b
            }
        }
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return Err(err(pos, "missing modality marker <|IP|> or <|TP|>")),
    };
    let intent = &text[intent_start..intent_start + marker_rel];
    if intent.is_empty() {
        return Err(err(intent_start, "empty intent segment"));
    }
    pos = intent_start + marker_rel + marker_len;

    let prompt = &text[pos..];
    if prompt.is_empty() {
        return Err(err(pos, "empty prompt segment"));
    }

    Ok((
        PromptPair {
            intent: intent.to_owned(),
            prompt: prompt.to_owned(),
            task,
            source: None,
        },
        declared,
    ))
}

/// Fixed-size blocks of token ids, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBlocks {
    block_size: usize,
    ids: Vec<u32>,
}

impl TokenBlocks {
    pub fn new(block_size: usize, ids: Vec<u32>) -> Self {
        assert!(block_size > 0);
        assert_eq!(ids.len() % block_size, 0, "ids not a whole number of blocks");
        TokenBlocks { block_size, ids }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.ids.len() / self.block_size
    }

    pub fn block(&self, i: usize) -> &[u32] {
        &self.ids[i * self.block_size..(i + 1) * self.block_size]
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Binary shard: magic, block_size (u32), block count (u32), then the
    /// ids as little-endian u32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.ids.len() * 4);
        out.extend_from_slice(SHARD_MAGIC);
        out.extend_from_slice(&(self.block_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_blocks() as u32).to_le_bytes());
        for &id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, CorpusError> {
        if data.len() < 16 || &data[..8] != SHARD_MAGIC {
            return Err(CorpusError::Malformed("bad shard magic".into()));
        }
        let block_size = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(data[12..16].try_into().unwrap()) as usize;
        if block_size == 0 {
            return Err(CorpusError::Malformed("zero block size".into()));
        }
        let want = 16 + block_size * count * 4;
        if data.len() != want {
            return Err(CorpusError::Malformed(format!(
                "shard length {} does not match header ({} blocks of {})",
                data.len(),
                count,
                block_size
            )));
        }
        let ids = data[16..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(TokenBlocks { block_size, ids })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let mut data = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }
}

/// Sidecar metadata written next to the shard files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardMeta {
    pub pairs_in: usize,
    pub instances_packed: usize,
    pub skipped_too_long: usize,
    pub skipped_invalid: usize,
    pub train_instances: usize,
    pub val_instances: usize,
    pub train_blocks: usize,
    pub val_blocks: usize,
    pub block_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub tokenizer_hash: String,
}

#[derive(Debug, Clone)]
pub struct DatasetShards {
    pub train: TokenBlocks,
    pub val: TokenBlocks,
    pub meta: ShardMeta,
}

impl DatasetShards {
    /// Writes train.bin, val.bin, and meta.json into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir)?;
        self.train.save(&dir.join("train.bin"))?;
        self.val.save(&dir.join("val.bin"))?;
        let meta = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(dir.join("meta.json"), meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let train = TokenBlocks::load(&dir.join("train.bin"))?;
        let val = TokenBlocks::load(&dir.join("val.bin"))?;
        let meta: ShardMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        Ok(DatasetShards { train, val, meta })
    }
}

/// Tokenize, shuffle, split, and pack pairs into fixed-size blocks.
///
/// Instances are shuffled with a ChaCha stream seeded by `seed`, the first
/// `round(n * val_fraction)` of the shuffled order become validation, and
/// each split is concatenated in order and chunked into `block_size` blocks,
/// padding the final partial block with `<|endoftext|>`. Instances that do
/// not fit a block (token length + terminator > block_size) or fail to
/// format are skipped and counted in the metadata.
pub fn build_dataset(
    pairs: &[PromptPair],
    artifact: &TokenizerArtifact,
    block_size: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetShards, CorpusError> {
    if pairs.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    if !(val_fraction > 0.0 && val_fraction < 0.5) {
        return Err(CorpusError::BadValFraction(val_fraction));
    }
    let eot = artifact
        .end_of_text_id()
        .ok_or(CorpusError::MissingControl("<|endoftext|>"))?;

    let mut skipped_invalid = 0usize;
    let mut skipped_too_long = 0usize;
    let mut tokenized: Vec<Vec<u32>> = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let inst = match format_instance(pair) {
            Ok(inst) => inst,
            Err(_) => {
                skipped_invalid += 1;
                continue;
            }
        };
        let mut ids = artifact.encode(&inst.text);
        ids.push(eot);
        if ids.len() > block_size {
            skipped_too_long += 1;
            continue;
        }
        tokenized.push(ids);
    }
    if tokenized.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }

    let mut order: Vec<usize> = (0..tokenized.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }

    let val_count = ((tokenized.len() as f64) * val_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(val_count);

    let pack = |idx: &[usize]| -> TokenBlocks {
        let mut ids = Vec::new();
        for &i in idx {
            ids.extend_from_slice(&tokenized[i]);
        }
        let rem = ids.len() % block_size;
        if rem != 0 {
            ids.resize(ids.len() + block_size - rem, eot);
        }
        TokenBlocks::new(block_size, ids)
    };
    let val = pack(val_idx);
    let train = pack(train_idx);

    let meta = ShardMeta {
        pairs_in: pairs.len(),
        instances_packed: tokenized.len(),
        skipped_too_long,
        skipped_invalid,
        train_instances: train_idx.len(),
        val_instances: val_idx.len(),
        train_blocks: train.n_blocks(),
        val_blocks: val.n_blocks(),
        block_size,
        val_fraction,
        seed,
        tokenizer_hash: artifact.content_hash_hex(),
    };
    Ok(DatasetShards { train, val, meta })
}

/// Read a JSONL pairs file: one object per line with `intent`, `prompt`,
/// `task` ("IP"|"TP"), and optional `source`. Blank lines are skipped.
pub fn read_pairs_jsonl(path: &Path) -> Result<Vec<PromptPair>, CorpusError> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PromptPair =
            serde_json::from_str(&line).map_err(|source| CorpusError::PairsLine {
                line: i + 1,
                source,
            })?;
        out.push(pair);
    }
    Ok(out)
}

pub fn write_pairs_jsonl(path: &Path, pairs: &[PromptPair]) -> Result<(), CorpusError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for pair in pairs {
        serde_json::to_writer(&mut f, pair)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Sanity sweep used by data inspection: every packed id must be in vocab
/// range and every block the declared size.
pub fn validate_blocks(blocks: &TokenBlocks, vocab_size: usize) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for &id in blocks.ids() {
        if (id as usize) >= vocab_size && seen.insert(id) {
            return Err(CorpusError::Malformed(format!(
                "token id {id} outside vocab of {vocab_size}"
            )));
        }
    }
    Ok(())
}
