//! Decoder-only transformer with hand-written exact gradients.
//!
//! Pre-norm GPT-2-style blocks: LN -> causal multi-head attention ->
//! residual, LN -> GELU MLP with 4x expansion -> residual, then a final LN
//! and a linear head (tied to the token embedding unless configured
//! otherwise). Forward, loss, and backward run in either f32 (training) or
//! f64 (gradient verification) through the same generic code.

mod net;

use rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::math::{Mat, Scalar};

pub use net::{loss_and_grad, Workspace};

/// Target id that marks a position as unsupervised (excluded from the
/// loss). Never a valid token id.
pub const IGNORE_ID: u32 = u32::MAX;

/// Layer-norm epsilon, inside the square root.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} at position {pos} outside vocab of {vocab}")]
    IdOutOfRange { id: u32, pos: usize, vocab: usize },
    #[error("sequence length {t} exceeds context length {ctx}")]
    ContextOverflow { t: usize, ctx: usize },
    #[error("no supervised positions (every target is the ignore id)")]
    NoSupervisedPositions,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub tie_embeddings: bool,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale default: small enough to train on one CPU in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            vocab_size,
            context_len: 256,
            tie_embeddings: true,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.d_model == 0 || self.n_heads == 0 {
            return err("d_model and n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size == 0 {
            return err("vocab_size must be positive".into());
        }
        if self.context_len == 0 {
            return err("context_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One (inputs, targets) training batch, row-major B x T. Targets are the
/// inputs shifted left by one within each block; positions to exclude from
/// the loss carry [`IGNORE_ID`].
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub b: usize,
    pub t: usize,
}

impl Batch {
    pub fn new(inputs: Vec<u32>, targets: Vec<u32>, b: usize, t: usize) -> Result<Self, ModelError> {
        if inputs.len() != b * t || targets.len() != b * t {
            return Err(ModelError::ShapeMismatch(format!(
                "inputs {} / targets {} vs {b} x {t}",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Batch {
            inputs,
            targets,
            b,
            t,
        })
    }
}

// Per-block tensor order; the checkpoint format and the optimizer walk
// tensors in exactly this order.
const PER_BLOCK: usize = 12;
const BLOCK_TENSOR_NAMES: [&str; PER_BLOCK] = [
    "ln1.gain", "ln1.bias", "w_qkv", "b_qkv", "w_o", "b_o", "ln2.gain", "ln2.bias", "w_fc",
    "b_fc", "w_proj", "b_proj",
];

/// Shape and init metadata for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Sampled Normal(0, 0.02); false means a constant init (0 or 1).
    pub random: bool,
    /// Residual-projection matrices get std 0.02 / sqrt(2 * n_layers).
    pub residual_scaled: bool,
    /// Constant value when not random (1.0 for norm gains, else 0.0).
    pub init_value: f64,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The full tensor layout for a config, in serialization order:
/// wte, wpe, [per-block x12] x L, ln_f.gain, ln_f.bias, [w_head if untied].
pub fn tensor_specs(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let d = cfg.d_model;
    let mut specs = Vec::with_capacity(3 + cfg.n_layers * PER_BLOCK + 1);
    let t = |name: String, rows, cols, random, residual_scaled, init_value| TensorSpec {
        name,
        rows,
        cols,
        random,
        residual_scaled,
        init_value,
    };
    specs.push(t("wte".into(), cfg.vocab_size, d, true, false, 0.0));
    specs.push(t("wpe".into(), cfg.context_len, d, true, false, 0.0));
    for l in 0..cfg.n_layers {
        for (k, base) in BLOCK_TENSOR_NAMES.iter().enumerate() {
            let name = format!("block{l}.{base}");
            let spec = match k {
                0 | 6 => t(name, 1, d, false, false, 1.0), // ln gains
                1 | 7 => t(name, 1, d, false, false, 0.0), // ln biases
                2 => t(name, d, 3 * d, true, false, 0.0),  // w_qkv
                3 => t(name, 1, 3 * d, false, false, 0.0), // b_qkv
                4 => t(name, d, d, true, true, 0.0),       // w_o (residual proj)
                5 => t(name, 1, d, false, false, 0.0),     // b_o
                8 => t(name, d, 4 * d, true, false, 0.0),  // w_fc
                9 => t(name, 1, 4 * d, false, false, 0.0), // b_fc
                10 => t(name, 4 * d, d, true, true, 0.0),  // w_proj (residual proj)
                11 => t(name, 1, d, false, false, 0.0),    // b_proj
                _ => unreachable!(),
            };
            specs.push(spec);
        }
    }
    specs.push(t("ln_f.gain".into(), 1, d, false, false, 1.0));
    specs.push(t("ln_f.bias".into(), 1, d, false, false, 0.0));
    if !cfg.tie_embeddings {
        specs.push(t("w_head".into(), cfg.vocab_size, d, true, false, 0.0));
    }
    specs
}

/// Closed-form parameter count; equals the element count of constructed
/// parameters for every valid config. For a tied model this is
/// V*d + ctx*d + L*(12*d^2 + 13*d) + 2*d.
pub fn count_params(cfg: &ModelConfig) -> usize {
    tensor_specs(cfg).iter().map(|s| s.len()).sum()
}

/// All weights for one model, stored as a flat list of matrices in the
/// layout of [`tensor_specs`]. Vectors (biases, norm parameters) are 1 x n
/// matrices so the optimizer and serializer can treat every tensor
/// uniformly; weight decay applies exactly to the tensors with more than
/// one row.
#[derive(Clone)]
pub struct Parameters<T> {
    cfg: ModelConfig,
    tensors: Vec<Mat<T>>,
}

impl<T: Scalar> Parameters<T> {
    /// Zero-valued parameters with the layout of `cfg`; the gradient
    /// container.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let tensors = tensor_specs(cfg)
            .iter()
            .map(|s| Mat::zeros(s.rows, s.cols))
            .collect();
        Parameters { cfg: *cfg, tensors }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensor(&self, i: usize) -> &Mat<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Mat<T> {
        &mut self.tensors[i]
    }

    pub fn n_elements(&self) -> usize {
        self.tensors.iter().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|m| m.data().iter().all(|v| v.is_finite()))
    }

    pub fn zero_fill(&mut self) {
        for m in &mut self.tensors {
            m.fill(T::ZERO);
        }
    }

    pub fn map_to_f64(&self) -> Parameters<f64> {
        Parameters {
            cfg: self.cfg,
            tensors: self.tensors.iter().map(|m| m.map_to_f64()).collect(),
        }
    }

    // Typed accessors into the flat layout.
    pub fn wte(&self) -> &Mat<T> {
        &self.tensors[0]
    }

    pub fn wpe(&self) -> &Mat<T> {
        &self.tensors[1]
    }

    #[inline]
    fn bidx(&self, l: usize, k: usize) -> usize {
        2 + l * PER_BLOCK + k
    }

    pub fn ln1_gain(&self, l: usize) -> &[T] {
        self.tensors[self.bidx(l, 0)].data()
    }
    pub fn ln1_bias(&self, l: usize) -> &[T] {
        self.tensors[self.bidx(l, 1)].data()
    }
    pub fn w_qkv(&self, l: usize) -> &Mat<T> {
        &self.tensors[self.bidx(l, 2)]
    }
    pub fn b_qkv(&self, l: usize) -> &[T] {
        self.tensors[self.bidx(l, 3)].data()
    }
    pub fn w_o(&self, l: usize) -> &Mat<T> {
        &self.tensors[self.bidx(l, 4)]
    }
    pub fn b_o(&self, l: usize) -> &[T] {
        self.tensors[self.bidx(l, 5)].data()
    }
    pub fn ln2_gain(&self, l: usize) -> &[T] {
        self.tensors[self.bidx(l, 6)].data()
    }
    pub fn ln2_bias(&self, l: usize) -> &[T] {
        self.tensors[self.bidx(l, 7)].data()
    }
    pub fn w_fc(&self, l: usize) -> &Mat<T> {
        &self.tensors[self.bidx(l, 8)]
    }
    pub fn b_fc(&self, l: usize) -> &[T] {
        self.tensors[self.bidx(l, 9)].data()
    }
    pub fn w_proj(&self, l: usize) -> &Mat<T> {
        &self.tensors[self.bidx(l, 10)]
    }
    pub fn b_proj(&self, l: usize) -> &[T] {
        self.tensors[self.bidx(l, 11)].data()
    }

    pub fn ln_f_gain(&self) -> &[T] {
        self.tensors[2 + self.cfg.n_layers * PER_BLOCK].data()
    }
    pub fn ln_f_bias(&self) -> &[T] {
        self.tensors[2 + self.cfg.n_layers * PER_BLOCK + 1].data()
    }

    /// Output head matrix (vocab x d): the token embedding when tied.
    pub fn head(&self) -> &Mat<T> {
        if self.cfg.tie_embeddings {
            self.wte()
        } else {
            &self.tensors[2 + self.cfg.n_layers * PER_BLOCK + 2]
        }
    }

    /// Index of the tensor the head gradient accumulates into.
    pub(crate) fn head_index(&self) -> usize {
        if self.cfg.tie_embeddings {
            0
        } else {
            2 + self.cfg.n_layers * PER_BLOCK + 2
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Parameters<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Parameters({} tensors, {} elements)",
            self.tensors.len(),
            self.n_elements()
        )
    }
}

/// Initialize parameters: Normal(0, 0.02) for matrices (residual
/// projections scaled down by 1/sqrt(2*n_layers)), zeros for biases, ones
/// for norm gains. Deterministic per seed; the same seed yields the same
/// values for f32 and f64 up to rounding because sampling happens in f64.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Parameters<T>, ModelError> {
    cfg.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let base = Normal::new(0.0f64, 0.02).expect("valid std");
    let scaled_std = 0.02 / ((2.0 * cfg.n_layers.max(1) as f64).sqrt());
    let scaled = Normal::new(0.0f64, scaled_std).expect("valid std");

    let specs = tensor_specs(cfg);
    let mut params = Parameters::zeros(cfg);
    for (i, spec) in specs.iter().enumerate() {
        let data = params.tensor_mut(i).data_mut();
        if spec.random {
            let dist = if spec.residual_scaled { &scaled } else { &base };
            for v in data.iter_mut() {
                *v = T::from_f64(dist.sample(&mut rng));
            }
        } else if spec.init_value != 0.0 {
            for v in data.iter_mut() {
                *v = T::from_f64(spec.init_value);
            }
        }
    }
    Ok(params)
}

/// Run the model over a B x T grid of token ids and return logits as a
/// (B*T) x vocab matrix (row b*T + t holds position t of sequence b).
pub fn forward<T: Scalar>(
    params: &Parameters<T>,
    inputs: &[u32],
    b: usize,
    t: usize,
) -> Result<Mat<T>, ModelError> {
    let mut ws = Workspace::new(params.config(), b, t);
    net::forward_into(params, inputs, &mut ws, None)?;
    Ok(ws.take_logits())
}

/// Like [`forward`] but reuses a caller-owned workspace sized for the same
/// config and (B, T); the logits stay inside `ws`. No dropout.
pub fn forward_reuse<T: Scalar>(
    params: &Parameters<T>,
    inputs: &[u32],
    ws: &mut Workspace<T>,
) -> Result<(), ModelError> {
    net::forward_into(params, inputs, ws, None)
}

/// Mean cross-entropy over positions whose target is not `ignore_id`.
pub fn loss<T: Scalar>(logits: &Mat<T>, targets: &[u32], ignore_id: u32) -> Result<T, ModelError> {
    if logits.rows() != targets.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "logit rows {} vs targets {}",
            logits.rows(),
            targets.len()
        )));
    }
    let mut total = 0.0f64;
    let mut n = 0usize;
    for (row, &target) in targets.iter().enumerate() {
        if target == ignore_id {
            continue;
        }
        if target as usize >= logits.cols() {
            return Err(ModelError::IdOutOfRange {
                id: target,
                pos: row,
                vocab: logits.cols(),
            });
        }
        let xs = logits.row(row);
        let mut max = xs[0];
        for &v in xs {
            max = max.maxs(v);
        }
        let mut sum = T::ZERO;
        for &v in xs {
            sum += (v - max).exp_fast();
        }
        let log_prob = (xs[target as usize] - max).to_f64() - sum.to_f64().ln();
        total -= log_prob;
        n += 1;
    }
    if n == 0 {
        return Err(ModelError::NoSupervisedPositions);
    }
    Ok(T::from_f64(total / n as f64))
}

/// Exact gradients of loss(forward(inputs), targets) with respect to every
/// parameter. Returns (loss, gradients); gradients share the parameter
/// layout. Convenience wrapper over [`loss_and_grad`] that allocates its
/// own workspace.
pub fn backward<T: Scalar>(
    params: &Parameters<T>,
    batch: &Batch,
    ignore_id: u32,
) -> Result<(T, Parameters<T>), ModelError> {
    let mut ws = Workspace::new(params.config(), batch.b, batch.t);
    let mut grads = Parameters::zeros(params.config());
    let loss = loss_and_grad(params, batch, ignore_id, &mut ws, &mut grads, None)?;
    Ok((loss, grads))
}
