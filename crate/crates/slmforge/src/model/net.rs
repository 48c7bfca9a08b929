//! Forward, loss, and gradient kernels.
//!
//! Activations live in a [`Workspace`] sized once per (batch, sequence)
//! shape and reused across steps. The backward pass replays the caches the
//! forward pass wrote; [`loss_and_grad`] runs the two back to back so the
//! pairing cannot drift. All reductions that feed the reported loss
//! accumulate in f64 regardless of the element type.

use rand_chacha::ChaCha8Rng;
use rand_core::RngCore;

use crate::math::{gemm_strided, Mat, Scalar};

use super::{Batch, ModelConfig, ModelError, Parameters, LN_EPS, PER_BLOCK};

// tanh-approximation GELU: sqrt(2/pi) and the cubic coefficient.
const GELU_C1: f64 = 0.797_884_560_802_865_4;
const GELU_C2: f64 = 0.044_715;

/// Per-layer activation caches consumed by the backward pass.
struct BlockCache<T> {
    /// Residual stream entering the block, (B*T) x d.
    x_in: Mat<T>,
    /// First norm, pre-affine (zero mean, unit variance per row).
    ln1_yn: Mat<T>,
    /// First norm after gain and bias; the attention input.
    ln1_yh: Mat<T>,
    ln1_rstd: Vec<T>,
    /// Packed query/key/value, (B*T) x 3d. Head h of sequence b reads a
    /// strided sub-block; nothing is copied out.
    qkv: Mat<T>,
    /// Post-softmax attention, (B*H*T) x T. Masked entries hold exact
    /// zeros, which the backward pass relies on.
    probs: Mat<T>,
    /// Heads re-interleaved back to (B*T) x d.
    att_concat: Mat<T>,
    /// Residual stream after the attention add.
    x_mid: Mat<T>,
    ln2_yn: Mat<T>,
    ln2_yh: Mat<T>,
    ln2_rstd: Vec<T>,
    /// MLP pre-activation, (B*T) x 4d.
    h_pre: Mat<T>,
    /// tanh of the GELU inner polynomial, cached for the derivative.
    tanh_u: Mat<T>,
    /// GELU output, (B*T) x 4d.
    h_act: Mat<T>,
    /// Inverted-scale dropout masks; None whenever dropout was off for the
    /// most recent forward, so backward sees exactly what forward applied.
    att_mask: Option<Mat<T>>,
    mlp_mask: Option<Mat<T>>,
}

/// Reusable activation and scratch buffers for one (batch, sequence) shape.
pub struct Workspace<T> {
    cfg: ModelConfig,
    b: usize,
    t: usize,
    blocks: Vec<BlockCache<T>>,
    /// Residual stream entering the final norm.
    x_last: Mat<T>,
    lnf_yn: Mat<T>,
    lnf_yh: Mat<T>,
    lnf_rstd: Vec<T>,
    /// (B*T) x vocab. [`loss_and_grad`] overwrites it with dloss/dlogits.
    logits: Mat<T>,
    emb_mask: Option<Mat<T>>,
    // Backward scratch, all (B*T) rows.
    dx: Mat<T>,
    dd1: Mat<T>,
    dd2: Mat<T>,
    d4: Mat<T>,
    d_qkv: Mat<T>,
    /// T x T attention-score gradient for one head at a time.
    dp: Mat<T>,
}

impl<T: Scalar> Workspace<T> {
    pub fn new(cfg: &ModelConfig, b: usize, t: usize) -> Self {
        let m = b * t;
        let d = cfg.d_model;
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockCache {
                x_in: Mat::zeros(m, d),
                ln1_yn: Mat::zeros(m, d),
                ln1_yh: Mat::zeros(m, d),
                ln1_rstd: vec![T::ZERO; m],
                qkv: Mat::zeros(m, 3 * d),
                probs: Mat::zeros(b * cfg.n_heads * t, t),
                att_concat: Mat::zeros(m, d),
                x_mid: Mat::zeros(m, d),
                ln2_yn: Mat::zeros(m, d),
                ln2_yh: Mat::zeros(m, d),
                ln2_rstd: vec![T::ZERO; m],
                h_pre: Mat::zeros(m, 4 * d),
                tanh_u: Mat::zeros(m, 4 * d),
                h_act: Mat::zeros(m, 4 * d),
                att_mask: None,
                mlp_mask: None,
            })
            .collect();
        Workspace {
            cfg: *cfg,
            b,
            t,
            blocks,
            x_last: Mat::zeros(m, d),
            lnf_yn: Mat::zeros(m, d),
            lnf_yh: Mat::zeros(m, d),
            lnf_rstd: vec![T::ZERO; m],
            logits: Mat::zeros(m, cfg.vocab_size),
            emb_mask: None,
            dx: Mat::zeros(m, d),
            dd1: Mat::zeros(m, d),
            dd2: Mat::zeros(m, d),
            d4: Mat::zeros(m, 4 * d),
            d_qkv: Mat::zeros(m, 3 * d),
            dp: Mat::zeros(t, t),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.b, self.t)
    }

    pub fn logits(&self) -> &Mat<T> {
        &self.logits
    }

    /// Moves the logits out, leaving the workspace unusable until rebuilt.
    pub fn take_logits(&mut self) -> Mat<T> {
        std::mem::replace(&mut self.logits, Mat::zeros(0, 0))
    }
}

/// Runs the model over `inputs` (row-major B x T) into `ws`. Dropout fires
/// only when a generator is supplied and the config rate is positive;
/// inference passes None.
pub(crate) fn forward_into<T: Scalar>(
    params: &Parameters<T>,
    inputs: &[u32],
    ws: &mut Workspace<T>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(), ModelError> {
    let cfg = *params.config();
    if ws.cfg != cfg {
        return Err(ModelError::ShapeMismatch(
            "workspace was built for a different config".into(),
        ));
    }
    let (b, t) = (ws.b, ws.t);
    let m_rows = b * t;
    if t > cfg.context_len {
        return Err(ModelError::ContextOverflow {
            t,
            ctx: cfg.context_len,
        });
    }
    if inputs.len() != m_rows {
        return Err(ModelError::ShapeMismatch(format!(
            "{} input ids vs {b} x {t}",
            inputs.len()
        )));
    }
    for (pos, &id) in inputs.iter().enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::IdOutOfRange {
                id,
                pos,
                vocab: cfg.vocab_size,
            });
        }
    }

    let d = cfg.d_model;
    let d3 = 3 * d;
    let hd = cfg.head_dim();
    let inv_sqrt_hd = T::from_f64(1.0 / (hd as f64).sqrt());
    let dropout_active = cfg.dropout > 0.0 && dropout_rng.is_some();

    // Token plus position embedding, then embedding dropout.
    if dropout_active {
        let rng = dropout_rng.as_mut().expect("active implies generator");
        let mask = ws.emb_mask.get_or_insert_with(|| Mat::zeros(m_rows, d));
        fill_dropout_mask(mask, cfg.dropout, rng);
    } else {
        ws.emb_mask = None;
    }
    {
        let (x0, emb_mask) = if cfg.n_layers == 0 {
            (&mut ws.x_last, ws.emb_mask.as_ref())
        } else {
            (&mut ws.blocks[0].x_in, ws.emb_mask.as_ref())
        };
        let wte = params.wte();
        let wpe = params.wpe();
        for m in 0..m_rows {
            let te = wte.row(inputs[m] as usize);
            let pe = wpe.row(m % t);
            let xr = x0.row_mut(m);
            for j in 0..d {
                xr[j] = te[j] + pe[j];
            }
        }
        if let Some(mask) = emb_mask {
            apply_mask(x0, mask);
        }
    }

    for l in 0..cfg.n_layers {
        if dropout_active {
            let rng = dropout_rng.as_mut().expect("active implies generator");
            let bc = &mut ws.blocks[l];
            let am = bc.att_mask.get_or_insert_with(|| Mat::zeros(m_rows, d));
            fill_dropout_mask(am, cfg.dropout, rng);
            let mm = bc.mlp_mask.get_or_insert_with(|| Mat::zeros(m_rows, d));
            fill_dropout_mask(mm, cfg.dropout, rng);
        } else {
            ws.blocks[l].att_mask = None;
            ws.blocks[l].mlp_mask = None;
        }

        let (head_bl, tail) = ws.blocks.split_at_mut(l + 1);
        let bc = &mut head_bl[l];
        let next_x: &mut Mat<T> = if l + 1 == cfg.n_layers {
            &mut ws.x_last
        } else {
            &mut tail[0].x_in
        };

        layernorm_fwd(
            &bc.x_in,
            params.ln1_gain(l),
            params.ln1_bias(l),
            &mut bc.ln1_yn,
            &mut bc.ln1_yh,
            &mut bc.ln1_rstd,
        );
        bc.ln1_yh.matmul_into(params.w_qkv(l), &mut bc.qkv, false);
        add_bias(&mut bc.qkv, params.b_qkv(l));

        // Attention. Q, K, V for head h of sequence bi are strided views
        // into the packed qkv rows; scores and the head output go through
        // the raw gemm so nothing is copied.
        for bi in 0..b {
            let m0 = bi * t;
            for h in 0..cfg.n_heads {
                let p0 = (bi * cfg.n_heads + h) * t;
                unsafe {
                    // S = Q K^T / sqrt(hd), written as t x t rows.
                    let s_ptr = bc.probs.data_mut().as_mut_ptr().add(p0 * t);
                    let q_ptr = bc.qkv.data().as_ptr().add(m0 * d3 + h * hd);
                    gemm_strided(
                        t,
                        t,
                        hd,
                        s_ptr,
                        t as isize,
                        1,
                        q_ptr,
                        d3 as isize,
                        1,
                        q_ptr.add(d),
                        1,
                        d3 as isize,
                        inv_sqrt_hd,
                        false,
                    );
                }
                // Causal softmax; positions j > i become exact zeros.
                for i in 0..t {
                    let row = bc.probs.row_mut(p0 + i);
                    let (vis, masked) = row.split_at_mut(i + 1);
                    let mut mx = vis[0];
                    for &v in vis.iter() {
                        mx = mx.maxs(v);
                    }
                    let mut sum = T::ZERO;
                    for v in vis.iter_mut() {
                        *v = (*v - mx).exp_fast();
                        sum += *v;
                    }
                    let inv = T::ONE / sum;
                    for v in vis.iter_mut() {
                        *v *= inv;
                    }
                    for v in masked.iter_mut() {
                        *v = T::ZERO;
                    }
                }
                unsafe {
                    // Head output Y = P V into its att_concat columns.
                    let y_ptr = bc.att_concat.data_mut().as_mut_ptr().add(m0 * d + h * hd);
                    gemm_strided(
                        t,
                        hd,
                        t,
                        y_ptr,
                        d as isize,
                        1,
                        bc.probs.data().as_ptr().add(p0 * t),
                        t as isize,
                        1,
                        bc.qkv.data().as_ptr().add(m0 * d3 + 2 * d + h * hd),
                        d3 as isize,
                        1,
                        T::ONE,
                        false,
                    );
                }
            }
        }

        bc.att_concat.matmul_into(params.w_o(l), &mut bc.x_mid, false);
        add_bias(&mut bc.x_mid, params.b_o(l));
        if let Some(mask) = &bc.att_mask {
            apply_mask(&mut bc.x_mid, mask);
        }
        add_assign(&mut bc.x_mid, &bc.x_in);

        layernorm_fwd(
            &bc.x_mid,
            params.ln2_gain(l),
            params.ln2_bias(l),
            &mut bc.ln2_yn,
            &mut bc.ln2_yh,
            &mut bc.ln2_rstd,
        );
        bc.ln2_yh.matmul_into(params.w_fc(l), &mut bc.h_pre, false);
        add_bias(&mut bc.h_pre, params.b_fc(l));
        gelu_fwd(&bc.h_pre, &mut bc.tanh_u, &mut bc.h_act);
        bc.h_act.matmul_into(params.w_proj(l), next_x, false);
        add_bias(next_x, params.b_proj(l));
        if let Some(mask) = &bc.mlp_mask {
            apply_mask(next_x, mask);
        }
        add_assign(next_x, &bc.x_mid);
    }

    layernorm_fwd(
        &ws.x_last,
        params.ln_f_gain(),
        params.ln_f_bias(),
        &mut ws.lnf_yn,
        &mut ws.lnf_yh,
        &mut ws.lnf_rstd,
    );
    ws.lnf_yh.matmul_nt_into(params.head(), &mut ws.logits, false);
    Ok(())
}

/// Forward, mean cross-entropy, and exact gradients for every parameter in
/// one pass. `grads` must share the parameter layout; it is zeroed first,
/// so each call produces the gradient of this batch alone. Returns the
/// loss; `ws.logits` is left holding dloss/dlogits.
pub fn loss_and_grad<T: Scalar>(
    params: &Parameters<T>,
    batch: &Batch,
    ignore_id: u32,
    ws: &mut Workspace<T>,
    grads: &mut Parameters<T>,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<T, ModelError> {
    let cfg = *params.config();
    if grads.config() != params.config() {
        return Err(ModelError::ShapeMismatch(
            "gradient buffer config differs from parameters".into(),
        ));
    }
    if batch.b != ws.b || batch.t != ws.t {
        return Err(ModelError::ShapeMismatch(format!(
            "batch {} x {} vs workspace {} x {}",
            batch.b, batch.t, ws.b, ws.t
        )));
    }
    grads.zero_fill();
    forward_into(params, &batch.inputs, ws, dropout_rng)?;
    let loss = ce_loss_dlogits(&mut ws.logits, &batch.targets, ignore_id)?;

    let (b, t) = (ws.b, ws.t);
    let m_rows = b * t;
    let d = cfg.d_model;
    let d3 = 3 * d;
    let hd = cfg.head_dim();
    let inv_sqrt_hd = T::from_f64(1.0 / (hd as f64).sqrt());

    // Head: dX_f = dlogits * W_head, dW_head += dlogits^T * X_f.
    ws.logits.matmul_into(params.head(), &mut ws.dx, false);
    ws.logits
        .matmul_tn_into(&ws.lnf_yh, grads.tensor_mut(params.head_index()), true);

    // Final norm; its input gradient becomes the residual-stream gradient.
    let lnf_g = 2 + cfg.n_layers * PER_BLOCK;
    {
        let (dg, db) = grads.tensor_pair_mut(lnf_g, lnf_g + 1);
        layernorm_bwd(
            &ws.dx,
            &ws.lnf_yn,
            &ws.lnf_rstd,
            params.ln_f_gain(),
            &mut ws.dd1,
            false,
            dg.data_mut(),
            db.data_mut(),
        );
    }
    std::mem::swap(&mut ws.dx, &mut ws.dd1);

    for l in (0..cfg.n_layers).rev() {
        let base = 2 + l * PER_BLOCK;
        let bc = &ws.blocks[l];

        // MLP branch. dd1 carries the branch gradient after dropout.
        copy_masked(&mut ws.dd1, &ws.dx, bc.mlp_mask.as_ref());
        bc.h_act
            .matmul_tn_into(&ws.dd1, grads.tensor_mut(base + 10), true);
        grad_bias(&ws.dd1, grads.tensor_mut(base + 11).data_mut());
        ws.dd1.matmul_nt_into(params.w_proj(l), &mut ws.d4, false);
        gelu_bwd(&mut ws.d4, &bc.h_pre, &bc.tanh_u);
        bc.ln2_yh
            .matmul_tn_into(&ws.d4, grads.tensor_mut(base + 8), true);
        grad_bias(&ws.d4, grads.tensor_mut(base + 9).data_mut());
        ws.d4.matmul_nt_into(params.w_fc(l), &mut ws.dd2, false);
        {
            let (dg, db) = grads.tensor_pair_mut(base + 6, base + 7);
            layernorm_bwd(
                &ws.dd2,
                &bc.ln2_yn,
                &bc.ln2_rstd,
                params.ln2_gain(l),
                &mut ws.dx,
                true,
                dg.data_mut(),
                db.data_mut(),
            );
        }

        // Attention branch; ws.dx now holds the gradient at x_mid.
        copy_masked(&mut ws.dd1, &ws.dx, bc.att_mask.as_ref());
        bc.att_concat
            .matmul_tn_into(&ws.dd1, grads.tensor_mut(base + 4), true);
        grad_bias(&ws.dd1, grads.tensor_mut(base + 5).data_mut());
        ws.dd1.matmul_nt_into(params.w_o(l), &mut ws.dd2, false);

        for bi in 0..b {
            let m0 = bi * t;
            for h in 0..cfg.n_heads {
                let p0 = (bi * cfg.n_heads + h) * t;
                unsafe {
                    // dP = dY V^T.
                    let dp_ptr = ws.dp.data_mut().as_mut_ptr();
                    let dy_ptr = ws.dd2.data().as_ptr().add(m0 * d + h * hd);
                    gemm_strided(
                        t,
                        t,
                        hd,
                        dp_ptr,
                        t as isize,
                        1,
                        dy_ptr,
                        d as isize,
                        1,
                        bc.qkv.data().as_ptr().add(m0 * d3 + 2 * d + h * hd),
                        1,
                        d3 as isize,
                        T::ONE,
                        false,
                    );
                    // dV = P^T dY; the zero rows above the diagonal drop
                    // masked positions exactly.
                    gemm_strided(
                        t,
                        hd,
                        t,
                        ws.d_qkv.data_mut().as_mut_ptr().add(m0 * d3 + 2 * d + h * hd),
                        d3 as isize,
                        1,
                        bc.probs.data().as_ptr().add(p0 * t),
                        1,
                        t as isize,
                        dy_ptr,
                        d as isize,
                        1,
                        T::ONE,
                        false,
                    );
                }
                // Softmax backward per row; probs carries exact zeros past
                // the diagonal, so the full-width write re-masks dS.
                for i in 0..t {
                    let prow = bc.probs.row(p0 + i);
                    let drow = ws.dp.row_mut(i);
                    let mut s = T::ZERO;
                    for j in 0..=i {
                        s += prow[j] * drow[j];
                    }
                    for j in 0..t {
                        drow[j] = prow[j] * (drow[j] - s);
                    }
                }
                unsafe {
                    // dQ = dS K / sqrt(hd); dK = dS^T Q / sqrt(hd).
                    let q_ptr = bc.qkv.data().as_ptr().add(m0 * d3 + h * hd);
                    let dq_ptr = ws.d_qkv.data_mut().as_mut_ptr().add(m0 * d3 + h * hd);
                    gemm_strided(
                        t,
                        hd,
                        t,
                        dq_ptr,
                        d3 as isize,
                        1,
                        ws.dp.data().as_ptr(),
                        t as isize,
                        1,
                        q_ptr.add(d),
                        d3 as isize,
                        1,
                        inv_sqrt_hd,
                        false,
                    );
                    gemm_strided(
                        t,
                        hd,
                        t,
                        dq_ptr.add(d),
                        d3 as isize,
                        1,
                        ws.dp.data().as_ptr(),
                        1,
                        t as isize,
                        q_ptr,
                        d3 as isize,
                        1,
                        inv_sqrt_hd,
                        false,
                    );
                }
            }
        }

        bc.ln1_yh
            .matmul_tn_into(&ws.d_qkv, grads.tensor_mut(base + 2), true);
        grad_bias(&ws.d_qkv, grads.tensor_mut(base + 3).data_mut());
        ws.d_qkv.matmul_nt_into(params.w_qkv(l), &mut ws.dd2, false);
        {
            let (dg, db) = grads.tensor_pair_mut(base, base + 1);
            layernorm_bwd(
                &ws.dd2,
                &bc.ln1_yn,
                &bc.ln1_rstd,
                params.ln1_gain(l),
                &mut ws.dx,
                true,
                dg.data_mut(),
                db.data_mut(),
            );
        }
    }

    // Embedding scatter; dropout is undone before the table updates.
    if let Some(mask) = &ws.emb_mask {
        apply_mask(&mut ws.dx, mask);
    }
    {
        let dwte = grads.tensor_mut(0);
        for (m, &id) in batch.inputs.iter().enumerate() {
            let src = ws.dx.row(m);
            for (a, &v) in dwte.row_mut(id as usize).iter_mut().zip(src) {
                *a += v;
            }
        }
    }
    {
        let dwpe = grads.tensor_mut(1);
        for m in 0..m_rows {
            let src = ws.dx.row(m);
            for (a, &v) in dwpe.row_mut(m % t).iter_mut().zip(src) {
                *a += v;
            }
        }
    }
    Ok(loss)
}

impl<T: Scalar> Parameters<T> {
    /// Disjoint mutable views of two tensors, for norm gain/bias pairs.
    fn tensor_pair_mut(&mut self, i: usize, j: usize) -> (&mut Mat<T>, &mut Mat<T>) {
        assert!(i < j, "indices must be ordered");
        let (lo, hi) = self.tensors.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    }
}

/// Mean cross-entropy over rows whose target is not `ignore_id`, replacing
/// the logits with dloss/dlogits in place. Ignored rows become zero rows.
fn ce_loss_dlogits<T: Scalar>(
    logits: &mut Mat<T>,
    targets: &[u32],
    ignore_id: u32,
) -> Result<T, ModelError> {
    assert_eq!(logits.rows(), targets.len(), "one target per row");
    let vocab = logits.cols();
    let mut n_sup = 0usize;
    for (pos, &tg) in targets.iter().enumerate() {
        if tg == ignore_id {
            continue;
        }
        if tg as usize >= vocab {
            return Err(ModelError::IdOutOfRange {
                id: tg,
                pos,
                vocab,
            });
        }
        n_sup += 1;
    }
    if n_sup == 0 {
        return Err(ModelError::NoSupervisedPositions);
    }
    let inv_n = T::from_f64(1.0 / n_sup as f64);
    let mut total = 0.0f64;
    for (m, &tg) in targets.iter().enumerate() {
        let row = logits.row_mut(m);
        if tg == ignore_id {
            for v in row.iter_mut() {
                *v = T::ZERO;
            }
            continue;
        }
        let xt = row[tg as usize];
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.maxs(v);
        }
        let delta = xt - mx;
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - mx).exp_fast();
            sum += *v;
        }
        total += sum.to_f64().ln() - delta.to_f64();
        let w = inv_n / sum;
        for v in row.iter_mut() {
            *v = *v * w;
        }
        row[tg as usize] -= inv_n;
    }
    Ok(T::from_f64(total / n_sup as f64))
}

/// Row-wise layer norm with biased variance: yn = (x - mean) * rstd,
/// yh = yn * gain + bias, rstd = 1/sqrt(var + eps).
fn layernorm_fwd<T: Scalar>(
    x: &Mat<T>,
    gain: &[T],
    bias: &[T],
    yn: &mut Mat<T>,
    yh: &mut Mat<T>,
    rstd: &mut [T],
) {
    let d = x.cols();
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(LN_EPS);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let mut mean = T::ZERO;
        for &v in xr {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::ZERO;
        for &v in xr {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let rs = T::ONE / (var + eps).sqrt();
        rstd[r] = rs;
        let ynr = yn.row_mut(r);
        for j in 0..d {
            ynr[j] = (xr[j] - mean) * rs;
        }
        let yhr = yh.row_mut(r);
        for j in 0..d {
            yhr[j] = ynr[j] * gain[j] + bias[j];
        }
    }
}

/// Layer-norm gradient. Writes (or accumulates into) `dst` the gradient at
/// the norm input and accumulates gain/bias gradients.
#[allow(clippy::too_many_arguments)]
fn layernorm_bwd<T: Scalar>(
    dyh: &Mat<T>,
    yn: &Mat<T>,
    rstd: &[T],
    gain: &[T],
    dst: &mut Mat<T>,
    accumulate: bool,
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let d = dyh.cols();
    let inv_d = T::from_f64(1.0 / d as f64);
    for r in 0..dyh.rows() {
        let dr = dyh.row(r);
        let nr = yn.row(r);
        for j in 0..d {
            dgain[j] += dr[j] * nr[j];
            dbias[j] += dr[j];
        }
        let mut m1 = T::ZERO;
        let mut m2 = T::ZERO;
        for j in 0..d {
            let dy = dr[j] * gain[j];
            m1 += dy;
            m2 += dy * nr[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let rs = rstd[r];
        let out = dst.row_mut(r);
        for j in 0..d {
            let dy = dr[j] * gain[j];
            let g = rs * (dy - m1 - nr[j] * m2);
            if accumulate {
                out[j] += g;
            } else {
                out[j] = g;
            }
        }
    }
}

/// tanh-approximation GELU: act = 0.5 x (1 + tanh(c1 (x + c2 x^3))).
fn gelu_fwd<T: Scalar>(h_pre: &Mat<T>, tanh_u: &mut Mat<T>, h_act: &mut Mat<T>) {
    let c1 = T::from_f64(GELU_C1);
    let c2 = T::from_f64(GELU_C2);
    let half = T::from_f64(0.5);
    for ((&x, tu), act) in h_pre
        .data()
        .iter()
        .zip(tanh_u.data_mut().iter_mut())
        .zip(h_act.data_mut().iter_mut())
    {
        let u = c1 * (x + c2 * x * x * x);
        let th = u.tanh_fast();
        *tu = th;
        *act = half * x * (T::ONE + th);
    }
}

/// GELU derivative applied in place to the incoming activation gradient.
fn gelu_bwd<T: Scalar>(d: &mut Mat<T>, h_pre: &Mat<T>, tanh_u: &Mat<T>) {
    let c1 = T::from_f64(GELU_C1);
    let c2 = T::from_f64(GELU_C2);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    for ((dv, &x), &th) in d
        .data_mut()
        .iter_mut()
        .zip(h_pre.data().iter())
        .zip(tanh_u.data().iter())
    {
        let du_dx = c1 * (T::ONE + three * c2 * x * x);
        let sech2 = T::ONE - th * th;
        *dv = *dv * (half * (T::ONE + th) + half * x * sech2 * du_dx);
    }
}

fn add_bias<T: Scalar>(y: &mut Mat<T>, bias: &[T]) {
    for r in 0..y.rows() {
        for (v, &bv) in y.row_mut(r).iter_mut().zip(bias) {
            *v += bv;
        }
    }
}

/// db[j] += sum over rows of dy[., j].
fn grad_bias<T: Scalar>(dy: &Mat<T>, db: &mut [T]) {
    debug_assert_eq!(dy.cols(), db.len());
    for r in 0..dy.rows() {
        for (acc, &v) in db.iter_mut().zip(dy.row(r)) {
            *acc += v;
        }
    }
}

fn add_assign<T: Scalar>(dst: &mut Mat<T>, src: &Mat<T>) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn apply_mask<T: Scalar>(x: &mut Mat<T>, mask: &Mat<T>) {
    debug_assert_eq!(x.len(), mask.len());
    for (v, &m) in x.data_mut().iter_mut().zip(mask.data()) {
        *v *= m;
    }
}

fn copy_masked<T: Scalar>(dst: &mut Mat<T>, src: &Mat<T>, mask: Option<&Mat<T>>) {
    debug_assert_eq!(dst.len(), src.len());
    match mask {
        Some(m) => {
            for ((d, &s), &k) in dst
                .data_mut()
                .iter_mut()
                .zip(src.data())
                .zip(m.data())
            {
                *d = s * k;
            }
        }
        None => dst.data_mut().copy_from_slice(src.data()),
    }
}

/// Keep-probability mask with inverted scaling: kept entries hold
/// 1/(1 - p) so activation expectations match inference.
fn fill_dropout_mask<T: Scalar>(mask: &mut Mat<T>, p: f64, rng: &mut ChaCha8Rng) {
    let keep = 1.0 - p;
    let scale = T::from_f64(1.0 / keep);
    for v in mask.data_mut().iter_mut() {
        let u = (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
        *v = if u < keep { scale } else { T::ZERO };
    }
}
