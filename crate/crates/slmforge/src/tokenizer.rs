//! Byte-level BPE tokenizer with atomic control tokens.
//!
//! Training fuses the most frequent adjacent token pair, repeatedly, until
//! the vocabulary target is met: ties break toward the lexicographically
//! smallest (left, right) byte sequences, and a candidate whose fused bytes
//! would collide with a control-token surface is skipped. Control tokens are
//! appended after all merges and are matched atomically (longest first)
//! during encoding, so they can never be produced or split by the byte
//! machinery.

use std::collections::{HashMap, HashSet};
use std::hash::{BuildHasherDefault, Hasher};
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

pub const TOKENIZER_MAGIC: &[u8; 8] = b"SLMTOK1\0";
pub const BASE_VOCAB: usize = 256;
pub const MAX_LENGTH_TOKEN: u32 = 64;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("insufficient merge material: achieved vocab {achieved}, target {target}")]
    InsufficientMergeMaterial { achieved: usize, target: usize },
    #[error("target vocab {target} below minimum {min} (256 byte tokens + {specials} specials)")]
    TargetVocabTooSmall {
        target: usize,
        min: usize,
        specials: usize,
    },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("duplicate special surface {0:?}")]
    DuplicateSpecialSurface(String),
    #[error("length token value {0} outside 1..={MAX_LENGTH_TOKEN}")]
    LengthOutOfRange(u32),
    #[error("token id {id} out of range (vocab size {vocab}) at position {index}")]
    IdOutOfRange {
        id: u32,
        vocab: usize,
        index: usize,
    },
    #[error("merge at rank {rank} does not replay to the id pair chosen during training")]
    AmbiguousMerge { rank: usize },
    #[error("merge at rank {rank} references an unknown token byte sequence")]
    UnknownMergeOperand { rank: usize },
    #[error("malformed tokenizer file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Kind of reserved control token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ControlKind {
    /// Declared word count of the prompt that follows; value in 1..=64.
    Length(u32),
    /// Separates the length declaration from the intent text.
    IntentMarker,
    /// Text-to-image prompt follows.
    ModalityT2i,
    /// Text-to-template prompt follows.
    ModalityT2t,
    /// Instance terminator, also used as block padding.
    EndOfText,
}

/// A reserved token with a fixed surface string that encodes to exactly one
/// id and is never produced by byte merges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlToken {
    pub kind: ControlKind,
    pub surface: String,
}

impl ControlToken {
    pub fn length(words: u32) -> Result<Self, TokenizerError> {
        if words == 0 || words > MAX_LENGTH_TOKEN {
            return Err(TokenizerError::LengthOutOfRange(words));
        }
        Ok(ControlToken {
            kind: ControlKind::Length(words),
            surface: format!("<|{words}|>"),
        })
    }

    pub fn intent_marker() -> Self {
        ControlToken {
            kind: ControlKind::IntentMarker,
            surface: "<|intent|>".to_owned(),
        }
    }

    pub fn modality_t2i() -> Self {
        ControlToken {
            kind: ControlKind::ModalityT2i,
            surface: "<|IP|>".to_owned(),
        }
    }

    pub fn modality_t2t() -> Self {
        ControlToken {
            kind: ControlKind::ModalityT2t,
            surface: "<|TP|>".to_owned(),
        }
    }

    pub fn end_of_text() -> Self {
        ControlToken {
            kind: ControlKind::EndOfText,
            surface: "<|endoftext|>".to_owned(),
        }
    }

    /// The full reserved set: `<|1|>`..`<|64|>`, `<|intent|>`, `<|IP|>`,
    /// `<|TP|>`, `<|endoftext|>` (68 tokens), in that order.
    pub fn standard_set() -> Vec<ControlToken> {
        let mut out = Vec::with_capacity(MAX_LENGTH_TOKEN as usize + 4);
        for n in 1..=MAX_LENGTH_TOKEN {
            out.push(ControlToken::length(n).expect("range checked"));
        }
        out.push(ControlToken::intent_marker());
        out.push(ControlToken::modality_t2i());
        out.push(ControlToken::modality_t2t());
        out.push(ControlToken::end_of_text());
        out
    }

    /// Stable name used in the serialized specials table.
    pub fn name(&self) -> String {
        match self.kind {
            ControlKind::Length(n) => format!("length_{n}"),
            ControlKind::IntentMarker => "intent".to_owned(),
            ControlKind::ModalityT2i => "modality_t2i".to_owned(),
            ControlKind::ModalityT2t => "modality_t2t".to_owned(),
            ControlKind::EndOfText => "endoftext".to_owned(),
        }
    }

    fn kind_from_name(name: &str) -> Option<ControlKind> {
        if let Some(num) = name.strip_prefix("length_") {
            return num.parse::<u32>().ok().map(ControlKind::Length);
        }
        match name {
            "intent" => Some(ControlKind::IntentMarker),
            "modality_t2i" => Some(ControlKind::ModalityT2i),
            "modality_t2t" => Some(ControlKind::ModalityT2t),
            "endoftext" => Some(ControlKind::EndOfText),
            _ => None,
        }
    }
}

/// Trained tokenizer: 256 byte tokens, learned merges, then control tokens.
/// Immutable once built; encode/decode take `&self` and are safe to share
/// across threads.
pub struct TokenizerArtifact {
    version: u32,
    merges: Vec<(Vec<u8>, Vec<u8>)>,
    vocab: Vec<Vec<u8>>,
    specials: Vec<ControlToken>,
    // Derived lookups, rebuilt on load.
    merge_rank: PairMap<u32>,
    special_ids: HashMap<String, u32>, // surface -> id
    special_id_set: Vec<bool>,         // indexed by id
    specials_by_len: Vec<(Vec<u8>, u32)>, // surfaces sorted longest first
}

impl std::fmt::Debug for TokenizerArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "TokenizerArtifact(vocab {}, merges {}, specials {})",
            self.vocab.len(),
            self.merges.len(),
            self.specials.len()
        )
    }
}

impl TokenizerArtifact {
    /// Rebuild an artifact from its persistent parts. Replays the merge
    /// list to recover the id pair behind each rank; byte sequences that
    /// resolve ambiguously (two ids sharing a rendering) pick the earliest
    /// id, and training verifies this replay matches its own choices.
    pub fn from_parts(
        merges: Vec<(Vec<u8>, Vec<u8>)>,
        specials: Vec<ControlToken>,
    ) -> Result<Self, TokenizerError> {
        let mut vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut first_id: HashMap<Vec<u8>, u32> =
            vocab.iter().cloned().zip(0..256u32).collect();
        let mut merge_rank = PairMap::default();

        for (rank, (left, right)) in merges.iter().enumerate() {
            let &a = first_id
                .get(left)
                .ok_or(TokenizerError::UnknownMergeOperand { rank })?;
            let &b = first_id
                .get(right)
                .ok_or(TokenizerError::UnknownMergeOperand { rank })?;
            let fused: Vec<u8> = left.iter().chain(right.iter()).copied().collect();
            let new_id = vocab.len() as u32;
            vocab.push(fused.clone());
            first_id.entry(fused).or_insert(new_id);
            merge_rank.insert(pair_key(a, b), rank as u32);
        }

        let mut seen = HashSet::new();
        let mut special_ids = HashMap::new();
        let mut specials_by_len = Vec::new();
        for sp in &specials {
            if !sp.surface.starts_with("<|") || !sp.surface.ends_with("|>") {
                return Err(TokenizerError::Malformed(format!(
                    "special surface {:?} is not <|...|>",
                    sp.surface
                )));
            }
            if !seen.insert(sp.surface.clone()) {
                return Err(TokenizerError::DuplicateSpecialSurface(sp.surface.clone()));
            }
            let id = vocab.len() as u32;
            vocab.push(sp.surface.as_bytes().to_vec());
            special_ids.insert(sp.surface.clone(), id);
            specials_by_len.push((sp.surface.as_bytes().to_vec(), id));
        }
        specials_by_len.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));

        let mut special_id_set = vec![false; vocab.len()];
        for &id in special_ids.values() {
            special_id_set[id as usize] = true;
        }

        Ok(TokenizerArtifact {
            version: 1,
            merges,
            vocab,
            specials,
            merge_rank,
            special_ids,
            special_id_set,
            specials_by_len,
        })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(Vec<u8>, Vec<u8>)] {
        &self.merges
    }

    pub fn specials(&self) -> &[ControlToken] {
        &self.specials
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(|v| v.as_slice())
    }

    /// Id of a control token by kind, if registered.
    pub fn control_id(&self, kind: ControlKind) -> Option<u32> {
        let surface = self
            .specials
            .iter()
            .find(|sp| sp.kind == kind)?
            .surface
            .as_str();
        self.special_ids.get(surface).copied()
    }

    pub fn end_of_text_id(&self) -> Option<u32> {
        self.control_id(ControlKind::EndOfText)
    }

    pub fn is_control(&self, id: u32) -> bool {
        self.special_id_set.get(id as usize).copied().unwrap_or(false)
    }

    /// Control kind of an id, if it is a control token.
    pub fn control_kind(&self, id: u32) -> Option<ControlKind> {
        if !self.is_control(id) {
            return None;
        }
        let bytes = self.token_bytes(id)?;
        let surface = std::str::from_utf8(bytes).ok()?;
        self.specials
            .iter()
            .find(|sp| sp.surface == surface)
            .map(|sp| sp.kind)
    }

    /// Encode text to token ids. Control-token surfaces are matched first
    /// (longest match, left to right); the segments between them go through
    /// the byte merges in rank order. Never fails: unknown text falls back
    /// to raw byte tokens.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut ids = Vec::new();
        let mut seg_start = 0;
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'<' {
                if let Some((sp_id, sp_len)) = self.match_special(&bytes[i..]) {
                    self.encode_segment(&bytes[seg_start..i], &mut ids);
                    ids.push(sp_id);
                    i += sp_len;
                    seg_start = i;
                    continue;
                }
            }
            i += 1;
        }
        self.encode_segment(&bytes[seg_start..], &mut ids);
        ids
    }

    fn match_special(&self, rest: &[u8]) -> Option<(u32, usize)> {
        for (surface, id) in &self.specials_by_len {
            if rest.len() >= surface.len() && &rest[..surface.len()] == surface.as_slice() {
                return Some((*id, surface.len()));
            }
        }
        None
    }

    fn encode_segment(&self, seg: &[u8], out: &mut Vec<u32>) {
        if seg.is_empty() {
            return;
        }
        let mut toks: Vec<u32> = seg.iter().map(|&b| b as u32).collect();
        while toks.len() >= 2 {
            let mut best: Option<(u32, u32, u32)> = None; // (rank, a, b)
            for w in toks.windows(2) {
                if let Some(rank) = self.merge_rank.get(pair_key(w[0], w[1])) {
                    if best.map_or(true, |(r, _, _)| rank < r) {
                        best = Some((rank, w[0], w[1]));
                    }
                }
            }
            let Some((rank, a, b)) = best else { break };
            toks = merge_rewrite(&toks, a, b, BASE_VOCAB as u32 + rank);
        }
        out.extend_from_slice(&toks);
    }

    /// Decode ids back to text. Control tokens decode to their surface
    /// strings. Byte sequences that are not valid UTF-8 (possible for
    /// arbitrary generated ids) decode with U+FFFD replacement; encode
    /// output always decodes byte-exact.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for (index, &id) in ids.iter().enumerate() {
            let tok = self
                .token_bytes(id)
                .ok_or(TokenizerError::IdOutOfRange {
                    id,
                    vocab: self.vocab.len(),
                    index,
                })?;
            bytes.extend_from_slice(tok);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Binary serialization: magic, vocab size, merges in rank order as
    /// length-prefixed byte pairs, then the specials table. Little-endian
    /// throughout; bit-identical for identical artifacts.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TOKENIZER_MAGIC);
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.merges.len() as u32).to_le_bytes());
        for (l, r) in &self.merges {
            out.extend_from_slice(&(l.len() as u32).to_le_bytes());
            out.extend_from_slice(l);
            out.extend_from_slice(&(r.len() as u32).to_le_bytes());
            out.extend_from_slice(r);
        }
        out.extend_from_slice(&(self.specials.len() as u32).to_le_bytes());
        let first_special = BASE_VOCAB + self.merges.len();
        for (i, sp) in self.specials.iter().enumerate() {
            let name = sp.name();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(sp.surface.len() as u32).to_le_bytes());
            out.extend_from_slice(sp.surface.as_bytes());
            out.extend_from_slice(&((first_special + i) as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, TokenizerError> {
        let mut rd = ByteReader::new(data);
        let magic = rd.take(8)?;
        if magic != TOKENIZER_MAGIC {
            return Err(TokenizerError::Malformed("bad magic".into()));
        }
        let vocab_size = rd.u32()? as usize;
        let n_merges = rd.u32()? as usize;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let l_len = rd.u32()? as usize;
            let l = rd.take(l_len)?.to_vec();
            let r_len = rd.u32()? as usize;
            let r = rd.take(r_len)?.to_vec();
            merges.push((l, r));
        }
        let n_specials = rd.u32()? as usize;
        let mut specials = Vec::with_capacity(n_specials);
        for i in 0..n_specials {
            let name_len = rd.u32()? as usize;
            let name = String::from_utf8(rd.take(name_len)?.to_vec())
                .map_err(|_| TokenizerError::Malformed("special name not UTF-8".into()))?;
            let surf_len = rd.u32()? as usize;
            let surface = String::from_utf8(rd.take(surf_len)?.to_vec())
                .map_err(|_| TokenizerError::Malformed("special surface not UTF-8".into()))?;
            let id = rd.u32()?;
            let expect = (BASE_VOCAB + n_merges + i) as u32;
            if id != expect {
                return Err(TokenizerError::Malformed(format!(
                    "special id {id} out of order, expected {expect}"
                )));
            }
            let kind = ControlToken::kind_from_name(&name).ok_or_else(|| {
                TokenizerError::Malformed(format!("unknown special name {name:?}"))
            })?;
            specials.push(ControlToken { kind, surface });
        }
        if !rd.done() {
            return Err(TokenizerError::Malformed("trailing bytes".into()));
        }
        let artifact = Self::from_parts(merges, specials)?;
        if artifact.vocab_size() != vocab_size {
            return Err(TokenizerError::Malformed(format!(
                "vocab size field {vocab_size} does not match contents {}",
                artifact.vocab_size()
            )));
        }
        Ok(artifact)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let mut data = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }

    /// SHA-256 of the binary serialization; identifies the exact vocabulary
    /// in shard metadata and checkpoints.
    pub fn content_hash(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.to_bytes());
        digest.into()
    }

    pub fn content_hash_hex(&self) -> String {
        hex::encode(self.content_hash())
    }

    /// Human-readable JSON view (lossy strings alongside raw bytes).
    pub fn to_json(&self) -> serde_json::Value {
        let merges: Vec<serde_json::Value> = self
            .merges
            .iter()
            .enumerate()
            .map(|(rank, (l, r))| {
                serde_json::json!({
                    "rank": rank,
                    "left": l,
                    "right": r,
                    "display": format!(
                        "{:?} + {:?}",
                        String::from_utf8_lossy(l),
                        String::from_utf8_lossy(r)
                    ),
                })
            })
            .collect();
        let specials: Vec<serde_json::Value> = self
            .specials
            .iter()
            .enumerate()
            .map(|(i, sp)| {
                serde_json::json!({
                    "name": sp.name(),
                    "surface": sp.surface,
                    "id": BASE_VOCAB + self.merges.len() + i,
                })
            })
            .collect();
        serde_json::json!({
            "version": self.version,
            "base_size": BASE_VOCAB,
            "vocab_size": self.vocab.len(),
            "merges": merges,
            "specials": specials,
        })
    }
}

/// Train a byte-level BPE tokenizer. `target_vocab` counts everything:
/// 256 byte tokens + learned merges + the given specials.
pub fn train_bpe(
    corpus: &[u8],
    target_vocab: usize,
    specials: &[ControlToken],
) -> Result<TokenizerArtifact, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let min = BASE_VOCAB + specials.len();
    if target_vocab < min {
        return Err(TokenizerError::TargetVocabTooSmall {
            target: target_vocab,
            min,
            specials: specials.len(),
        });
    }
    let mut surfaces = HashSet::new();
    for sp in specials {
        if !surfaces.insert(sp.surface.as_bytes().to_vec()) {
            return Err(TokenizerError::DuplicateSpecialSurface(sp.surface.clone()));
        }
    }

    let n_merges_wanted = target_vocab - min;
    let mut seq: Vec<u32> = corpus.iter().map(|&b| b as u32).collect();
    let mut vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut merges: Vec<(Vec<u8>, Vec<u8>)> = Vec::with_capacity(n_merges_wanted);
    let mut chosen_ids: Vec<(u32, u32)> = Vec::with_capacity(n_merges_wanted);

    while merges.len() < n_merges_wanted {
        let counts = count_pairs(&seq);
        let Some((a, b)) = best_pair(&counts, &vocab, &surfaces) else {
            return Err(TokenizerError::InsufficientMergeMaterial {
                achieved: BASE_VOCAB + merges.len() + specials.len(),
                target: target_vocab,
            });
        };
        let new_id = vocab.len() as u32;
        let fused: Vec<u8> = vocab[a as usize]
            .iter()
            .chain(vocab[b as usize].iter())
            .copied()
            .collect();
        merges.push((vocab[a as usize].clone(), vocab[b as usize].clone()));
        chosen_ids.push((a, b));
        vocab.push(fused);
        seq = merge_rewrite(&seq, a, b, new_id);
    }

    let artifact = TokenizerArtifact::from_parts(merges, specials.to_vec())?;
    // The file stores merges as byte pairs; replaying them must land on the
    // id pairs training actually fused, or the artifact would encode
    // differently after a save/load cycle.
    for (rank, &(a, b)) in chosen_ids.iter().enumerate() {
        if artifact.merge_rank.get(pair_key(a, b)) != Some(rank as u32) {
            return Err(TokenizerError::AmbiguousMerge { rank });
        }
    }
    Ok(artifact)
}

/// Replace every non-overlapping (a, b) adjacency with `id`, left to right.
fn merge_rewrite(seq: &[u32], a: u32, b: u32, id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
            out.push(id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// Count every adjacency, overlapping occurrences included ("aaa" counts
/// ("a","a") twice).
fn count_pairs(seq: &[u32]) -> PairMap<u64> {
    let mut counts = PairMap::with_capacity(seq.len().min(1 << 16));
    for w in seq.windows(2) {
        counts.bump(pair_key(w[0], w[1]));
    }
    counts
}

/// Highest count wins; ties prefer the lexicographically smallest left byte
/// sequence, then the smallest right. Pairs whose fused bytes equal a
/// special surface are never eligible.
fn best_pair(
    counts: &PairMap<u64>,
    vocab: &[Vec<u8>],
    banned: &HashSet<Vec<u8>>,
) -> Option<(u32, u32)> {
    let mut best: Option<(u64, u32, u32)> = None;
    for (key, cnt) in counts.iter() {
        let (a, b) = ((key >> 32) as u32, key as u32);
        if let Some((bc, ba, bb)) = best {
            let better = cnt > bc
                || (cnt == bc
                    && (vocab[a as usize].as_slice(), vocab[b as usize].as_slice())
                        < (vocab[ba as usize].as_slice(), vocab[bb as usize].as_slice()));
            if !better {
                continue;
            }
        }
        if !banned.is_empty() {
            let mut fused = vocab[a as usize].clone();
            fused.extend_from_slice(&vocab[b as usize]);
            if banned.contains(&fused) {
                continue;
            }
        }
        best = Some((cnt, a, b));
    }
    best.map(|(_, a, b)| (a, b))
}

#[inline]
fn pair_key(a: u32, b: u32) -> u64 {
    ((a as u64) << 32) | b as u64
}

// Multiplicative hasher for u64 pair keys; pair counting is the hot loop of
// training and SipHash costs ~4x here.
#[derive(Default)]
struct PairHasher(u64);

impl Hasher for PairHasher {
    fn finish(&self) -> u64 {
        self.0
    }
    fn write(&mut self, _bytes: &[u8]) {
        unreachable!("pair keys hash via write_u64");
    }
    fn write_u64(&mut self, v: u64) {
        self.0 = (self.0 ^ v).wrapping_mul(0x517c_c1b7_2722_0a95);
    }
}

struct PairMap<V> {
    map: HashMap<u64, V, BuildHasherDefault<PairHasher>>,
}

impl<V> Default for PairMap<V> {
    fn default() -> Self {
        PairMap {
            map: HashMap::default(),
        }
    }
}

impl<V: Copy> PairMap<V> {
    fn with_capacity(cap: usize) -> Self {
        PairMap {
            map: HashMap::with_capacity_and_hasher(cap, BuildHasherDefault::default()),
        }
    }

    fn get(&self, key: u64) -> Option<V> {
        self.map.get(&key).copied()
    }

    fn insert(&mut self, key: u64, value: V) {
        self.map.insert(key, value);
    }

    fn iter(&self) -> impl Iterator<Item = (u64, V)> + '_ {
        self.map.iter().map(|(&k, &v)| (k, v))
    }
}

impl PairMap<u64> {
    fn bump(&mut self, key: u64) {
        *self.map.entry(key).or_insert(0) += 1;
    }
}

struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(data: &'a [u8]) -> Self {
        ByteReader { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TokenizerError> {
        if self.pos + n > self.data.len() {
            return Err(TokenizerError::Malformed("truncated file".into()));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, TokenizerError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}
