//! Next-token-prediction training loop: AdamW with decoupled weight decay
//! on matrix tensors, linear-warmup cosine learning-rate schedule, global
//! gradient-norm clipping, seeded batch sampling, deterministic
//! checkpointing, and a CSV metrics log.
//!
//! Determinism contract: given identical seeds, configs, and shards, the
//! whole trajectory (losses, parameters, checkpoints) is bit-reproducible
//! on one platform, and resuming from a checkpoint replays the remaining
//! steps exactly. The only non-reproducible output is the tokens_per_sec
//! metrics column, which reports wall-clock throughput.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetShards, TokenBlocks};
use crate::model::{
    forward_reuse, init_params, loss, loss_and_grad, Batch, ModelConfig, ModelError, Parameters,
    Workspace, IGNORE_ID,
};
use crate::tokenizer::TokenizerArtifact;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SLMCKP1\0";
const CHECKPOINT_VERSION: u32 = 1;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.95;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("divergence at step {step} (non-finite loss or gradient){}",
        last_checkpoint.as_ref().map(|p| format!("; last good checkpoint: {}", p.display())).unwrap_or_default())]
    Divergence {
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("tokenizer hash mismatch: shards were built with {shard_hash}, given tokenizer is {tokenizer_hash}")]
    HashMismatch {
        shard_hash: String,
        tokenizer_hash: String,
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint config mismatch: stored {stored}, expected {expected}")]
    ConfigMismatch { stored: String, expected: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Optimizer and loop settings. The learning rate and batch size carry the
/// reference values (6e-4, batch 128) with a desk-scale batch default of 32.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub warmup_iters: usize,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Global L2 gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_interval: usize,
    pub eval_batches: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: 2,000 iterations at batch 32, warmup 5% of the
    /// run, cosine decay to a tenth of the peak rate.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 6e-4,
            batch_size: 32,
            max_iters: 2_000,
            warmup_iters: 100,
            min_lr: 6e-5,
            weight_decay: 0.1,
            grad_clip: 1.0,
            seed: 1337,
            eval_interval: 200,
            eval_batches: 8,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.min_lr >= 0.0 && self.learning_rate > self.min_lr) {
            return err(format!(
                "need learning_rate > min_lr >= 0, got {} and {}",
                self.learning_rate, self.min_lr
            ));
        }
        if self.warmup_iters >= self.max_iters {
            return err(format!(
                "warmup_iters {} must be below max_iters {}",
                self.warmup_iters, self.max_iters
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if self.eval_interval == 0 || self.eval_batches == 0 {
            return err("eval_interval and eval_batches must be positive".into());
        }
        if self.grad_clip < 0.0 || !self.grad_clip.is_finite() {
            return err(format!(
                "grad_clip {} must be finite and >= 0",
                self.grad_clip
            ));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear warmup from 0 to learning_rate over
/// warmup_iters, cosine decay to min_lr at max_iters, constant after.
/// lr_at(warmup_iters) equals learning_rate exactly.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_iters > 0 && step <= cfg.warmup_iters {
        return cfg.learning_rate * step as f64 / cfg.warmup_iters as f64;
    }
    if step >= cfg.max_iters {
        return cfg.min_lr;
    }
    let progress = (step - cfg.warmup_iters) as f64 / (cfg.max_iters - cfg.warmup_iters) as f64;
    if progress <= 0.0 {
        return cfg.learning_rate;
    }
    cfg.min_lr
        + 0.5 * (cfg.learning_rate - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales all gradients so their global L2 norm is at most `clip` (0
/// disables). Returns the pre-clip norm, accumulated in f64.
pub fn clip_gradients(grads: &mut Parameters<f32>, clip: f64) -> f64 {
    let mut sq = 0.0f64;
    for i in 0..grads.n_tensors() {
        for &g in grads.tensor(i).data() {
            sq += g as f64 * g as f64;
        }
    }
    let norm = sq.sqrt();
    if clip > 0.0 && norm > clip {
        let scale = (clip / norm) as f32;
        for i in 0..grads.n_tensors() {
            for g in grads.tensor_mut(i).data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// Draws `batch_size` random blocks (uniform, with replacement) and shifts
/// them into next-token (inputs, targets) pairs of length block_size - 1.
/// Positions where an end-of-text token is followed by another are the
/// padding tail of the final packed block; their targets become
/// [`IGNORE_ID`] so padding is never supervised.
pub fn draw_batch(
    blocks: &TokenBlocks,
    batch_size: usize,
    eot_id: u32,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let n = blocks.n_blocks();
    assert!(n > 0, "cannot sample from an empty shard");
    assert!(blocks.block_size() >= 2, "blocks too short to shift");
    let t = blocks.block_size() - 1;
    let mut inputs = Vec::with_capacity(batch_size * t);
    let mut targets = Vec::with_capacity(batch_size * t);
    for _ in 0..batch_size {
        let idx = (rng.next_u64() % n as u64) as usize;
        let block = blocks.block(idx);
        inputs.extend_from_slice(&block[..t]);
        for j in 0..t {
            let tgt = block[j + 1];
            if block[j] == eot_id && tgt == eot_id {
                targets.push(IGNORE_ID);
            } else {
                targets.push(tgt);
            }
        }
    }
    Batch::new(inputs, targets, batch_size, t).expect("sizes chosen to match")
}

/// Mean loss over `n_batches` batches drawn with a fresh fixed-seed
/// generator, so successive evaluations see identical data.
pub fn eval_loss(
    params: &Parameters<f32>,
    blocks: &TokenBlocks,
    batch_size: usize,
    n_batches: usize,
    eot_id: u32,
    seed: u64,
    ws: &mut Workspace<f32>,
) -> Result<f64, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0f64;
    for _ in 0..n_batches {
        let batch = draw_batch(blocks, batch_size, eot_id, &mut rng);
        forward_reuse(params, &batch.inputs, ws)?;
        total += loss(ws.logits(), &batch.targets, IGNORE_ID)? as f64;
    }
    Ok(total / n_batches as f64)
}

/// Everything a training run owns: parameters, AdamW moments, the step
/// counter, and the two generators (batch sampling, dropout). Checkpoints
/// serialize this struct losslessly.
pub struct TrainState {
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    pub params: Parameters<f32>,
    m: Parameters<f32>,
    v: Parameters<f32>,
    step: usize,
    sample_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    tokenizer_hash: String,
}

impl std::fmt::Debug for TrainState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainState")
            .field("step", &self.step)
            .field("model_cfg", &self.model_cfg)
            .field("train_cfg", &self.train_cfg)
            .field("tokenizer_hash", &self.tokenizer_hash)
            .finish_non_exhaustive()
    }
}

impl TrainState {
    /// Fresh state: parameters from the model init seed, zero moments.
    /// Batch sampling and dropout use offset seeds so the three streams
    /// never coincide.
    pub fn new(
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        tokenizer_hash: &str,
    ) -> Result<Self, TrainError> {
        train_cfg.validate()?;
        let params = init_params::<f32>(&model_cfg, train_cfg.seed)?;
        let m = Parameters::zeros(&model_cfg);
        let v = Parameters::zeros(&model_cfg);
        Ok(TrainState {
            model_cfg,
            train_cfg,
            params,
            m,
            v,
            step: 0,
            sample_rng: ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(1)),
            dropout_rng: ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(2)),
            tokenizer_hash: tokenizer_hash.to_string(),
        })
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_cfg
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train_cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn tokenizer_hash(&self) -> &str {
        &self.tokenizer_hash
    }

    pub fn next_train_batch(&mut self, blocks: &TokenBlocks, eot_id: u32) -> Batch {
        draw_batch(
            blocks,
            self.train_cfg.batch_size,
            eot_id,
            &mut self.sample_rng,
        )
    }

    /// One optimizer step on `batch`: exact gradients, global-norm clip,
    /// AdamW with bias correction at lr_at(step), decoupled weight decay
    /// on tensors with more than one row (matrices; the 1 x n vectors
    /// holding biases and norm parameters are never decayed). Per-element
    /// arithmetic runs in f64 and rounds once back to f32.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        ws: &mut Workspace<f32>,
        grads: &mut Parameters<f32>,
    ) -> Result<f32, TrainError> {
        let rng = if self.model_cfg.dropout > 0.0 {
            Some(&mut self.dropout_rng)
        } else {
            None
        };
        let realized = loss_and_grad(&self.params, batch, IGNORE_ID, ws, grads, rng)?;
        let norm = clip_gradients(grads, self.train_cfg.grad_clip);
        if !realized.is_finite() || !norm.is_finite() {
            return Err(TrainError::Divergence {
                step: self.step,
                last_checkpoint: None,
            });
        }

        let lr = lr_at(self.step, &self.train_cfg);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for i in 0..self.params.n_tensors() {
            let decay = if self.params.tensor(i).rows() > 1 {
                self.train_cfg.weight_decay
            } else {
                0.0
            };
            let g = grads.tensor(i).data();
            let p = self.params.tensor_mut(i).data_mut();
            let ms = self.m.tensor_mut(i).data_mut();
            let vs = self.v.tensor_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g[j] as f64;
                let mj = BETA1 * ms[j] as f64 + (1.0 - BETA1) * gj;
                let vj = BETA2 * vs[j] as f64 + (1.0 - BETA2) * gj * gj;
                ms[j] = mj as f32;
                vs[j] = vj as f32;
                let update = (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
                let pj = p[j] as f64;
                p[j] = (pj - lr * (update + decay * pj)) as f32;
            }
        }
        self.step += 1;
        Ok(realized)
    }
}

// Serialized generator state: seed, 128-bit word position split into two
// u64 halves, and the stream id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed_hex: String,
    word_pos: [u64; 2],
    stream: u64,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed_hex: hex::encode(rng.get_seed()),
            word_pos: [(pos >> 64) as u64, pos as u64],
            stream: rng.get_stream(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng, TrainError> {
        let bytes = hex::decode(&self.seed_hex)
            .map_err(|e| TrainError::CorruptCheckpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| TrainError::CorruptCheckpoint("rng seed length".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos[0] as u128) << 64) | self.word_pos[1] as u128);
        Ok(rng)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    tokenizer_hash: String,
    sample_rng: RngState,
    dropout_rng: RngState,
    n_elements: usize,
}

/// Writes the state as magic, version, a length-prefixed JSON header, then
/// parameters, first moments, and second moments as raw little-endian f32
/// in declared tensor order. save -> load -> save is byte-identical.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), TrainError> {
    let header = CheckpointHeader {
        model: state.model_cfg,
        train: state.train_cfg,
        step: state.step,
        tokenizer_hash: state.tokenizer_hash.clone(),
        sample_rng: RngState::capture(&state.sample_rng),
        dropout_rng: RngState::capture(&state.dropout_rng),
        n_elements: state.params.n_elements(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| TrainError::CorruptCheckpoint(format!("header encode: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + 12 * state.params.n_elements());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for group in [&state.params, &state.m, &state.v] {
        for i in 0..group.n_tensors() {
            for &x in group.tensor(i).data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    // Write-then-rename so a crash never leaves a half-written file at the
    // final path.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint back into a [`TrainState`]. When `expect` is given,
/// a differing stored model config is an error naming both configs.
pub fn load_checkpoint(path: &Path, expect: Option<&ModelConfig>) -> Result<TrainState, TrainError> {
    let data = fs::read(path)?;
    let corrupt = |m: &str| TrainError::CorruptCheckpoint(format!("{m} ({})", path.display()));
    if data.len() < 16 || &data[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(data[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let json_len = u32::from_le_bytes(data[12..16].try_into().unwrap()) as usize;
    if data.len() < 16 + json_len {
        return Err(corrupt("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&data[16..16 + json_len])
        .map_err(|e| corrupt(&format!("header decode: {e}")))?;
    if let Some(want) = expect {
        if *want != header.model {
            return Err(TrainError::ConfigMismatch {
                stored: format!("{:?}", header.model),
                expected: format!("{want:?}"),
            });
        }
    }
    header
        .model
        .validate()
        .map_err(|e| corrupt(&format!("stored model config: {e}")))?;
    header.train.validate()?;

    let mut state = TrainState::new(header.model, header.train, &header.tokenizer_hash)?;
    if state.params.n_elements() != header.n_elements {
        return Err(corrupt("element count disagrees with config"));
    }
    let body = &data[16 + json_len..];
    if body.len() != 12 * header.n_elements {
        return Err(corrupt("tensor payload length"));
    }
    let mut off = 0usize;
    for group in [&mut state.params, &mut state.m, &mut state.v] {
        for i in 0..group.n_tensors() {
            for x in group.tensor_mut(i).data_mut() {
                *x = f32::from_le_bytes(body[off..off + 4].try_into().unwrap());
                off += 4;
            }
        }
    }
    state.step = header.step;
    state.sample_rng = header.sample_rng.restore()?;
    state.dropout_rng = header.dropout_rng.restore()?;
    Ok(state)
}

/// One metrics row, written at every evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean training loss since the previous row; at step 0 (no training
    /// steps yet) it mirrors val_loss.
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub tokens_per_sec: f64,
}

pub const METRICS_HEADER: &str = "step,train_loss,val_loss,lr,tokens_per_sec";

/// Summary of a [`train`] run segment.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_step: usize,
    pub initial_val: f64,
    pub final_val: f64,
    pub best_val: f64,
    pub metrics_path: PathBuf,
    pub latest_path: PathBuf,
    pub best_path: PathBuf,
}

/// Runs the loop from the state's current step to max_iters: seeded batch
/// sampling, an evaluation every eval_interval steps (and at the start and
/// end), a metrics row per evaluation, and checkpoints retaining both the
/// latest state and the best-validation state. Refuses shards whose
/// tokenizer hash differs from `artifact`. `on_eval` sees each metrics row
/// as it is written.
pub fn train(
    state: &mut TrainState,
    shards: &DatasetShards,
    artifact: &TokenizerArtifact,
    out_dir: &Path,
    mut on_eval: Option<&mut dyn FnMut(&MetricsRow)>,
) -> Result<TrainOutcome, TrainError> {
    let tok_hash = artifact.content_hash_hex();
    if shards.meta.tokenizer_hash != tok_hash {
        return Err(TrainError::HashMismatch {
            shard_hash: shards.meta.tokenizer_hash.clone(),
            tokenizer_hash: tok_hash,
        });
    }
    if state.tokenizer_hash != tok_hash {
        return Err(TrainError::HashMismatch {
            shard_hash: state.tokenizer_hash.clone(),
            tokenizer_hash: tok_hash,
        });
    }
    if shards.train.n_blocks() == 0 || shards.val.n_blocks() == 0 {
        return Err(TrainError::InvalidConfig("empty train or val shard".into()));
    }
    let t = shards.train.block_size() - 1;
    if t > state.model_cfg.context_len {
        return Err(TrainError::InvalidConfig(format!(
            "block size {} needs context {} but model has {}",
            shards.train.block_size(),
            t,
            state.model_cfg.context_len
        )));
    }
    if artifact.vocab_size() > state.model_cfg.vocab_size {
        return Err(TrainError::InvalidConfig(format!(
            "tokenizer vocab {} exceeds model vocab {}",
            artifact.vocab_size(),
            state.model_cfg.vocab_size
        )));
    }

    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let latest_path = out_dir.join("ckpt_latest.bin");
    let best_path = out_dir.join("ckpt_best.bin");
    let fresh = !metrics_path.exists() || fs::metadata(&metrics_path)?.len() == 0;
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    if fresh {
        writeln!(metrics, "{METRICS_HEADER}")?;
    }

    let eot = artifact.end_of_text_id().ok_or_else(|| {
        TrainError::InvalidConfig("tokenizer lacks an end-of-text control token".into())
    })?;
    let cfg = state.train_cfg;
    // Validation batches draw from a seed outside the streams used by
    // init (seed), sampling (seed+1), and dropout (seed+2).
    let val_seed = cfg.seed.wrapping_add(3);
    let mut ws = Workspace::new(&state.model_cfg, cfg.batch_size, t);
    let mut grads = Parameters::zeros(&state.model_cfg);

    let write_row = |metrics: &mut fs::File,
                         row: &MetricsRow,
                         on_eval: &mut Option<&mut dyn FnMut(&MetricsRow)>|
     -> Result<(), TrainError> {
        writeln!(
            metrics,
            "{},{},{},{},{}",
            row.step, row.train_loss, row.val_loss, row.lr, row.tokens_per_sec
        )?;
        if let Some(cb) = on_eval.as_mut() {
            cb(row);
        }
        Ok(())
    };

    let mut val = eval_loss(
        &state.params,
        &shards.val,
        cfg.batch_size,
        cfg.eval_batches,
        eot,
        val_seed,
        &mut ws,
    )?;
    let initial_val = val;
    let mut best_val = val;
    let mut last_checkpoint: Option<PathBuf> = None;
    if state.step == 0 {
        save_checkpoint(state, &latest_path)?;
        save_checkpoint(state, &best_path)?;
        last_checkpoint = Some(latest_path.clone());
        let row = MetricsRow {
            step: 0,
            train_loss: val,
            val_loss: val,
            lr: lr_at(0, &cfg),
            tokens_per_sec: 0.0,
        };
        write_row(&mut metrics, &row, &mut on_eval)?;
    }

    let mut interval_loss_sum = 0.0f64;
    let mut interval_steps = 0usize;
    let mut interval_start = Instant::now();
    while state.step < cfg.max_iters {
        let batch = state.next_train_batch(&shards.train, eot);
        let realized = match state.train_step(&batch, &mut ws, &mut grads) {
            Ok(l) => l,
            Err(TrainError::Divergence { step, .. }) => {
                return Err(TrainError::Divergence {
                    step,
                    last_checkpoint,
                });
            }
            Err(e) => return Err(e),
        };
        interval_loss_sum += realized as f64;
        interval_steps += 1;

        let at_eval = state.step % cfg.eval_interval == 0 || state.step == cfg.max_iters;
        if at_eval {
            val = eval_loss(
                &state.params,
                &shards.val,
                cfg.batch_size,
                cfg.eval_batches,
                eot,
                val_seed,
                &mut ws,
            )?;
            // Checkpoints land before the row is reported, so every row
            // describes state that is already durable on disk.
            save_checkpoint(state, &latest_path)?;
            last_checkpoint = Some(latest_path.clone());
            if val <= best_val {
                best_val = val;
                save_checkpoint(state, &best_path)?;
            }
            let elapsed = interval_start.elapsed().as_secs_f64().max(1e-9);
            let tokens = (interval_steps * cfg.batch_size * t) as f64;
            let row = MetricsRow {
                step: state.step,
                train_loss: interval_loss_sum / interval_steps as f64,
                val_loss: val,
                lr: lr_at(state.step, &cfg),
                tokens_per_sec: tokens / elapsed,
            };
            write_row(&mut metrics, &row, &mut on_eval)?;
            interval_loss_sum = 0.0;
            interval_steps = 0;
            interval_start = Instant::now();
        }
    }
    metrics.flush()?;

    Ok(TrainOutcome {
        final_step: state.step,
        initial_val,
        final_val: val,
        best_val,
        metrics_path,
        latest_path,
        best_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ShardMeta;
    use crate::tokenizer::ControlToken;

    fn micro_model() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 32,
            context_len: 16,
            tie_embeddings: true,
            dropout: 0.0,
        }
    }

    fn micro_train(max_iters: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 2,
            max_iters,
            warmup_iters: max_iters / 20 + 1,
            min_lr: 3e-4,
            weight_decay: 0.1,
            grad_clip: 1.0,
            seed: 7,
            eval_interval: 10,
            eval_batches: 2,
        }
    }

    fn micro_batch(cfg: &ModelConfig, b: usize, t: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * t;
        let inputs = (0..n)
            .map(|_| (rng.next_u64() % cfg.vocab_size as u64) as u32)
            .collect();
        let targets = (0..n)
            .map(|_| (rng.next_u64() % cfg.vocab_size as u64) as u32)
            .collect();
        Batch::new(inputs, targets, b, t).unwrap()
    }

    #[test]
    fn lr_schedule_hits_anchor_points() {
        let cfg = TrainConfig {
            learning_rate: 6e-4,
            warmup_iters: 100,
            max_iters: 2_000,
            min_lr: 6e-5,
            ..TrainConfig::desk()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(100, &cfg), 6e-4);
        assert_eq!(lr_at(50, &cfg), 6e-4 * 0.5);
        // Midpoint of the cosine leg, evaluated by hand from the formula.
        let step = (100 + 2_000) / 2;
        let progress = (step - 100) as f64 / (2_000 - 100) as f64;
        let want = 6e-5 + 0.5 * (6e-4 - 6e-5) * (1.0 + (std::f64::consts::PI * progress).cos());
        assert_eq!(lr_at(step, &cfg), want);
        assert_eq!(lr_at(2_000, &cfg), 6e-5);
        assert_eq!(lr_at(5_000, &cfg), 6e-5);
        // Monotone decay across the cosine leg.
        for s in 101..2_000 {
            assert!(lr_at(s, &cfg) >= lr_at(s + 1, &cfg), "rose at {s}");
        }
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let mut cfg = TrainConfig::desk();
        cfg.min_lr = cfg.learning_rate;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.warmup_iters = cfg.max_iters;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.grad_clip = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn clipping_scales_to_the_ceiling_and_reports_the_norm() {
        let cfg = micro_model();
        let mut grads: Parameters<f32> = Parameters::zeros(&cfg);
        // A single nonzero entry of 2.0 gives global norm 2.0 exactly.
        grads.tensor_mut(0).data_mut()[0] = 2.0;
        let norm = clip_gradients(&mut grads, 1.0);
        assert_eq!(norm, 2.0);
        assert_eq!(grads.tensor(0).data()[0], 1.0);
        // Below the ceiling: untouched.
        let norm = clip_gradients(&mut grads, 4.0);
        assert_eq!(norm, 1.0);
        assert_eq!(grads.tensor(0).data()[0], 1.0);
        // Zero disables.
        grads.tensor_mut(0).data_mut()[0] = 8.0;
        clip_gradients(&mut grads, 0.0);
        assert_eq!(grads.tensor(0).data()[0], 8.0);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        // At step 0 with warmup > 0 the schedule gives exactly 0.
        let mut state = TrainState::new(micro_model(), micro_train(100), "h").unwrap();
        let before: Vec<Vec<u32>> = (0..state.params.n_tensors())
            .map(|i| state.params.tensor(i).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let batch = micro_batch(&micro_model(), 2, 8, 1);
        let mut ws = Workspace::new(&micro_model(), 2, 8);
        let mut grads = Parameters::zeros(&micro_model());
        state.train_step(&batch, &mut ws, &mut grads).unwrap();
        for i in 0..state.params.n_tensors() {
            let after: Vec<u32> = state.params.tensor(i).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(before[i], after, "tensor {i} moved at lr 0");
        }
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn weight_decay_touches_only_matrix_tensors() {
        let model = micro_model();
        let mk = |wd: f64| {
            let mut tc = micro_train(100);
            tc.weight_decay = wd;
            tc.warmup_iters = 1;
            let mut state = TrainState::new(model, tc, "h").unwrap();
            let batch = micro_batch(&model, 2, 8, 3);
            let mut ws = Workspace::new(&model, 2, 8);
            let mut grads = Parameters::zeros(&model);
            // Two steps so the second runs at a nonzero learning rate.
            state.train_step(&batch, &mut ws, &mut grads).unwrap();
            state.train_step(&batch, &mut ws, &mut grads).unwrap();
            state
        };
        let no_decay = mk(0.0);
        let with_decay = mk(0.5);
        let mut matrices_differ = false;
        for i in 0..no_decay.params.n_tensors() {
            let a = no_decay.params.tensor(i);
            let b = with_decay.params.tensor(i);
            if a.rows() > 1 {
                matrices_differ |= a.data() != b.data();
            } else {
                assert_eq!(a.data(), b.data(), "vector tensor {i} was decayed");
            }
        }
        assert!(matrices_differ, "decay changed nothing");
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let run = || {
            let model = micro_model();
            let mut state = TrainState::new(model, micro_train(100), "h").unwrap();
            let blocks = TokenBlocks::new(8, (0..64u32).map(|i| i % 32).collect());
            let mut ws = Workspace::new(&model, 2, 7);
            let mut grads = Parameters::zeros(&model);
            let mut losses = Vec::new();
            for _ in 0..20 {
                let batch = state.next_train_batch(&blocks, 31);
                losses.push(state.train_step(&batch, &mut ws, &mut grads).unwrap().to_bits());
            }
            (losses, state)
        };
        let (l1, s1) = run();
        let (l2, s2) = run();
        assert_eq!(l1, l2);
        for i in 0..s1.params.n_tensors() {
            assert_eq!(s1.params.tensor(i).data(), s2.params.tensor(i).data());
        }
    }

    #[test]
    fn overfits_one_batch_with_mostly_monotone_loss() {
        let model = micro_model();
        let mut tc = micro_train(500);
        tc.weight_decay = 0.0;
        let mut state = TrainState::new(model, tc, "h").unwrap();
        let batch = micro_batch(&model, 2, 8, 5);
        let mut ws = Workspace::new(&model, 2, 8);
        let mut grads = Parameters::zeros(&model);
        let mut losses = Vec::new();
        for _ in 0..500 {
            losses.push(state.train_step(&batch, &mut ws, &mut grads).unwrap() as f64);
        }
        let initial = losses[0];
        let final_loss = *losses.last().unwrap();
        assert!(
            final_loss < 0.1 * initial,
            "failed to overfit: {initial} -> {final_loss}"
        );
        let decreasing = losses.windows(2).filter(|w| w[1] < w[0]).count();
        let frac = decreasing as f64 / (losses.len() - 1) as f64;
        assert!(frac >= 0.95, "only {frac:.3} of steps decreased");
    }

    #[test]
    fn divergence_is_reported_not_propagated_as_nan() {
        let model = micro_model();
        let mut state = TrainState::new(model, micro_train(100), "h").unwrap();
        state.params.tensor_mut(0).fill(f32::INFINITY);
        let batch = micro_batch(&model, 1, 4, 2);
        let mut ws = Workspace::new(&model, 1, 4);
        let mut grads = Parameters::zeros(&model);
        let err = state.train_step(&batch, &mut ws, &mut grads).unwrap_err();
        assert!(matches!(err, TrainError::Divergence { step: 0, .. }), "{err}");
    }

    #[test]
    fn draw_batch_ignores_padding_and_is_seeded() {
        // One real block and one whose tail is end-of-text padding.
        let eot = 31u32;
        let ids = vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, eot, eot, eot, eot, eot];
        let blocks = TokenBlocks::new(8, ids);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = draw_batch(&blocks, 6, eot, &mut rng);
        assert_eq!(batch.t, 7);
        for row in 0..batch.b {
            for j in 0..batch.t {
                let inp = batch.inputs[row * batch.t + j];
                let tgt = batch.targets[row * batch.t + j];
                if inp == eot && tgt == IGNORE_ID {
                    continue; // rewritten padding
                }
                assert_ne!(
                    (inp, tgt),
                    (eot, eot),
                    "padding position left supervised at row {row} pos {j}"
                );
            }
        }
        // The padded block keeps its one real supervision edge (11 -> eot).
        let mut rng_a = ChaCha8Rng::seed_from_u64(9);
        let mut rng_b = ChaCha8Rng::seed_from_u64(9);
        let a = draw_batch(&blocks, 4, eot, &mut rng_a);
        let b = draw_batch(&blocks, 4, eot, &mut rng_b);
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise_stable() {
        let model = micro_model();
        let mut state = TrainState::new(model, micro_train(100), "tokhash").unwrap();
        let batch = micro_batch(&model, 2, 8, 4);
        let mut ws = Workspace::new(&model, 2, 8);
        let mut grads = Parameters::zeros(&model);
        for _ in 0..3 {
            state.train_step(&batch, &mut ws, &mut grads).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save_checkpoint(&state, &p1).unwrap();
        let loaded = load_checkpoint(&p1, Some(&model)).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(loaded.step(), state.step());
        assert_eq!(loaded.tokenizer_hash(), "tokhash");

        // The restored state continues identically.
        let mut next_a = state;
        let mut next_b = loaded;
        let la = next_a.train_step(&batch, &mut ws, &mut grads).unwrap();
        let lb = next_b.train_step(&batch, &mut ws, &mut grads).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
    }

    #[test]
    fn corrupt_and_mismatched_checkpoints_are_rejected() {
        let model = micro_model();
        let state = TrainState::new(model, micro_train(100), "h").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&state, &path).unwrap();

        let full = fs::read(&path).unwrap();
        let beheaded = dir.path().join("trunc.bin");
        fs::write(&beheaded, &full[..full.len() - 7]).unwrap();
        let err = load_checkpoint(&beheaded, None).unwrap_err();
        assert!(matches!(err, TrainError::CorruptCheckpoint(_)), "{err}");

        let scribbled = dir.path().join("magic.bin");
        let mut bad = full.clone();
        bad[0] = b'X';
        fs::write(&scribbled, &bad).unwrap();
        let err = load_checkpoint(&scribbled, None).unwrap_err();
        assert!(matches!(err, TrainError::CorruptCheckpoint(_)));

        let other = ModelConfig {
            d_model: 16,
            ..model
        };
        let err = load_checkpoint(&path, Some(&other)).unwrap_err();
        assert!(matches!(err, TrainError::ConfigMismatch { .. }), "{err}");
    }

    // Builds a real tokenizer plus shards so train() hash checks run
    // against genuine content hashes.
    fn tiny_corpus_setup() -> (TokenizerArtifact, DatasetShards) {
        let corpus = "alpha beta gamma delta epsilon zeta eta theta ".repeat(8);
        let artifact = crate::tokenizer::train_bpe(
            corpus.as_bytes(),
            330,
            &ControlToken::standard_set(),
        )
        .unwrap();
        let eot = artifact.end_of_text_id().unwrap();
        let mut ids = Vec::new();
        for word in ["alpha beta gamma", "delta epsilon", "zeta eta theta alpha"] {
            ids.extend(artifact.encode(word));
            ids.push(eot);
        }
        let block_size = 8;
        while ids.len() % block_size != 0 {
            ids.push(eot);
        }
        let blocks = TokenBlocks::new(block_size, ids);
        let meta = ShardMeta {
            pairs_in: 3,
            instances_packed: 3,
            skipped_too_long: 0,
            skipped_invalid: 0,
            train_instances: 3,
            val_instances: 3,
            train_blocks: blocks.n_blocks(),
            val_blocks: blocks.n_blocks(),
            block_size,
            val_fraction: 0.5,
            seed: 1,
            tokenizer_hash: artifact.content_hash_hex(),
        };
        let shards = DatasetShards {
            train: blocks.clone(),
            val: blocks,
            meta,
        };
        (artifact, shards)
    }

    fn shard_model(artifact: &TokenizerArtifact) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            vocab_size: artifact.vocab_size(),
            context_len: 16,
            tie_embeddings: true,
            dropout: 0.0,
        }
    }

    #[test]
    fn train_refuses_mismatched_tokenizer_hash() {
        let (artifact, mut shards) = tiny_corpus_setup();
        shards.meta.tokenizer_hash = "0000".into();
        let model = shard_model(&artifact);
        let mut state =
            TrainState::new(model, micro_train(20), &artifact.content_hash_hex()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = train(&mut state, &shards, &artifact, dir.path(), None).unwrap_err();
        assert!(matches!(err, TrainError::HashMismatch { .. }), "{err}");
    }

    #[test]
    fn train_writes_metrics_and_checkpoints() {
        let (artifact, shards) = tiny_corpus_setup();
        let model = shard_model(&artifact);
        let mut tc = micro_train(20);
        tc.eval_interval = 5;
        tc.eval_batches = 2;
        let mut state = TrainState::new(model, tc, &artifact.content_hash_hex()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut seen = Vec::new();
        let mut cb = |row: &MetricsRow| seen.push(row.step);
        let outcome = train(&mut state, &shards, &artifact, dir.path(), Some(&mut cb)).unwrap();
        assert_eq!(outcome.final_step, 20);
        assert_eq!(seen, vec![0, 5, 10, 15, 20]);
        assert!(outcome.latest_path.exists());
        assert!(outcome.best_path.exists());
        let text = fs::read_to_string(&outcome.metrics_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert_eq!(lines.count(), 5);
        let latest = load_checkpoint(&outcome.latest_path, Some(&model)).unwrap();
        assert_eq!(latest.step(), 20);
    }

    #[test]
    #[ignore = "timing probe, run manually"]
    fn desk_step_timing() {
        let model = ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            vocab_size: 4096,
            context_len: 256,
            tie_embeddings: true,
            dropout: 0.0,
        };
        let mut tc = micro_train(2_000);
        tc.batch_size = 32;
        for t in [63usize, 127] {
            let mut state = TrainState::new(model, tc, "h").unwrap();
            let batch = micro_batch(&model, 32, t, 1);
            let mut ws = Workspace::new(&model, 32, t);
            let mut grads = Parameters::zeros(&model);
            state.train_step(&batch, &mut ws, &mut grads).unwrap();
            let t0 = Instant::now();
            let n = 5;
            for _ in 0..n {
                state.train_step(&batch, &mut ws, &mut grads).unwrap();
            }
            let per = t0.elapsed().as_secs_f64() / n as f64;
            eprintln!(
                "desk step t={t}: {per:.3}s -> 2000 iters ~ {:.1} min",
                per * 2_000.0 / 60.0
            );
        }
    }

    #[test]
    fn resume_replays_the_uninterrupted_trajectory() {
        let (artifact, shards) = tiny_corpus_setup();
        let model = shard_model(&artifact);
        let mut tc = micro_train(30);
        tc.eval_interval = 10;
        tc.eval_batches = 2;

        // Uninterrupted run; grab a copy of the step-10 checkpoint as it
        // is written, simulating a kill right after that eval.
        let mut full = TrainState::new(model, tc, &artifact.content_hash_hex()).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let snapshot = dir_a.path().join("ckpt_step10.bin");
        let latest_a = dir_a.path().join("ckpt_latest.bin");
        let mut rows_a = Vec::new();
        let mut cb_a = |r: &MetricsRow| {
            if r.step == 10 {
                fs::copy(&latest_a, &snapshot).unwrap();
            }
            rows_a.push((r.step, r.train_loss, r.val_loss, r.lr));
        };
        train(&mut full, &shards, &artifact, dir_a.path(), Some(&mut cb_a)).unwrap();

        // Restart from the snapshot in a fresh directory; the remaining 20
        // steps must replay the uninterrupted trajectory exactly.
        let mut resumed = load_checkpoint(&snapshot, Some(&model)).unwrap();
        assert_eq!(resumed.step(), 10);
        let dir_b = tempfile::tempdir().unwrap();
        let mut rows_b = Vec::new();
        let mut cb_b = |r: &MetricsRow| rows_b.push((r.step, r.train_loss, r.val_loss, r.lr));
        train(&mut resumed, &shards, &artifact, dir_b.path(), Some(&mut cb_b)).unwrap();

        let tail_a: Vec<_> = rows_a.iter().filter(|r| r.0 > 10).collect();
        assert_eq!(tail_a, rows_b.iter().collect::<Vec<_>>(), "resumed trajectory diverged");
        for i in 0..full.params.n_tensors() {
            assert_eq!(
                full.params.tensor(i).data(),
                resumed.params.tensor(i).data(),
                "tensor {i} differs after resume"
            );
        }
    }
}
