//! Causal self-attention sequence encoder with a personalized relative
//! positional bias, plus the sequence augmentations and contrastive
//! loss used for the sequence-level self-supervised objective.
//!
//! Architecture follows the SASRec post-norm convention: per layer,
//! multi-head attention (Q/K/V/output projections without biases), then
//! residual + layer norm, then a two-layer rectifier FFN with biases,
//! then residual + layer norm. Sequences are left-padded so the last
//! row always holds the newest position. The personalized bias P'_u is
//! added to every head's pre-softmax logits and masked afterwards, so
//! causal and padding masking always win.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::PADDING_ID;
use crate::error::{CoreError, Result};
use crate::num::tape::{NodeId, Tape};
use crate::num::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub n_layers: usize,
    pub max_len: usize,
    /// Dropout rate on attention probabilities and FFN hidden units;
    /// active only when a dropout RNG is supplied to `encode_batch`.
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.n_layers == 0 || self.max_len == 0 {
            return Err(CoreError::InvalidConfig(format!(
                "encoder dimensions must be positive: d={}, heads={}, layers={}, max_len={}",
                self.d, self.heads, self.n_layers, self.max_len
            )));
        }
        if self.d % self.heads != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "model width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::InvalidConfig(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Tape nodes of one encoder layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerWeights {
    pub attn_q: NodeId,
    pub attn_k: NodeId,
    pub attn_v: NodeId,
    pub attn_o: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub ln1_scale: NodeId,
    pub ln1_shift: NodeId,
    pub ln2_scale: NodeId,
    pub ln2_shift: NodeId,
}

#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub item_emb: NodeId,
    pub pos_emb: NodeId,
    pub layers: Vec<LayerWeights>,
}

/// Personalized-extractor parameter nodes (user table + scalar MLP).
#[derive(Debug, Clone, Copy)]
pub struct PgeWeights {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

#[derive(Debug)]
pub struct EncodeOutput {
    /// (B, N, d) hidden states of the final layer.
    pub hidden: NodeId,
    /// (B, d) final-position rows.
    pub h_last: NodeId,
    /// Per (layer, head) attention probabilities (B, N, N), populated
    /// when requested.
    pub attention: Vec<NodeId>,
}

/// P'_u for a batch: project each user embedding to a scalar through the
/// rectifier MLP, then scale that user's sub-graph by it.
pub fn personalized_pe_tape(
    tape: &mut Tape,
    user_rows: NodeId,
    subgraph: NodeId,
    pge: &PgeWeights,
) -> NodeId {
    let h = tape.matmul(user_rows, pge.w1);
    let hb = tape.add_row_bias(h, pge.b1);
    let act = tape.relu(hb);
    let o = tape.matmul(act, pge.w2);
    let c = tape.add_row_bias(o, pge.b2);
    tape.batch_scale(c, subgraph)
}

/// Value-level scalar of the personalized extractor for one user row.
pub fn personalized_scalar(user_row: &[f64], w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> f64 {
    let hidden = w1.dims()[1];
    let mut h = vec![0.0; hidden];
    for (j, hj) in h.iter_mut().enumerate() {
        let mut s = 0.0;
        for (i, &x) in user_row.iter().enumerate() {
            s += x * w1.at2(i, j);
        }
        *hj = (s + b1.data()[j]).max(0.0);
    }
    let mut out = 0.0;
    for (j, &hj) in h.iter().enumerate() {
        out += hj * w2.at2(j, 0);
    }
    out + b2.data()[0]
}

fn flat_matmul(tape: &mut Tape, x3: NodeId, w: NodeId, batch: usize, n: usize) -> NodeId {
    let d_in = tape.value(x3).dims()[2];
    let d_out = tape.value(w).dims()[1];
    let flat = tape.reshape(x3, &[batch * n, d_in]);
    let y = tape.matmul(flat, w);
    tape.reshape(y, &[batch, n, d_out])
}

fn dropout_mask(tape: &mut Tape, dims: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> NodeId {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
        .collect();
    tape.constant(Tensor::from_vec(dims, data))
}

/// Encode a batch of left-padded sequences. `pprime` is an optional
/// (B, N, N) personalized bias shared by all heads and layers.
/// `dropout_rng` activates dropout at the configured rate (training
/// only); omit it for deterministic inference.
pub fn encode_batch(
    tape: &mut Tape,
    ids: &[Vec<u32>],
    weights: &EncoderWeights,
    pprime: Option<NodeId>,
    cfg: &EncoderConfig,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    record_attention: bool,
) -> Result<EncodeOutput> {
    cfg.validate()?;
    let batch = ids.len();
    let (n, d, heads) = (cfg.max_len, cfg.d, cfg.heads);
    let dh = d / heads;
    if batch == 0 {
        return Err(CoreError::Precondition("empty batch".into()));
    }
    let mut flat_ids = Vec::with_capacity(batch * n);
    for (b, seq) in ids.iter().enumerate() {
        if seq.len() != n {
            return Err(CoreError::DimensionMismatch {
                what: format!("sequence {b}"),
                expected: format!("{n} padded positions"),
                actual: format!("{}", seq.len()),
            });
        }
        if seq.iter().all(|&i| i == PADDING_ID) {
            return Err(CoreError::EmptySequence(format!(
                "sequence {b} is all padding"
            )));
        }
        flat_ids.extend(seq.iter().map(|&i| i as usize));
    }
    if let Some(p) = pprime {
        let pd = tape.value(p).dims();
        assert_eq!(pd, &[batch, n, n], "personalized bias shape {pd:?}");
    }

    // causal + padding mask over (B, N, N): true = excluded
    let mut mask = vec![false; batch * n * n];
    for (b, seq) in ids.iter().enumerate() {
        for p in 0..n {
            for q in 0..n {
                if q > p || seq[q] == PADDING_ID {
                    mask[(b * n + p) * n + q] = true;
                }
            }
        }
    }
    let mask: Rc<Vec<bool>> = Rc::new(mask);

    let emb = tape.gather_rows(weights.item_emb, Rc::new(flat_ids));
    let emb3 = tape.reshape(emb, &[batch, n, d]);
    let mut x = tape.add_batch_broadcast(emb3, weights.pos_emb);

    let mut attention = Vec::new();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for layer in &weights.layers {
        let q = flat_matmul(tape, x, layer.attn_q, batch, n);
        let k = flat_matmul(tape, x, layer.attn_k, batch, n);
        let v = flat_matmul(tape, x, layer.attn_v, batch, n);
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_last_dim(q, lo, hi);
            let kh = tape.slice_last_dim(k, lo, hi);
            let vh = tape.slice_last_dim(v, lo, hi);
            let raw = tape.bmatmul_nt(qh, kh);
            let mut scores = tape.scale(raw, inv_sqrt);
            if let Some(p) = pprime {
                scores = tape.add(scores, p);
            }
            let mut probs = tape.masked_softmax_rows(scores, mask.clone());
            if record_attention {
                attention.push(probs);
            }
            if let Some(rng) = dropout_rng.as_deref_mut() {
                if cfg.dropout > 0.0 {
                    let m = dropout_mask(tape, &[batch, n, n], cfg.dropout, rng);
                    probs = tape.mul(probs, m);
                }
            }
            head_outs.push(tape.bmatmul(probs, vh));
        }
        let ctx = tape.concat_last_dim(&head_outs);
        let attn_out = flat_matmul(tape, ctx, layer.attn_o, batch, n);
        let res1 = tape.add(x, attn_out);
        let norm1 = tape.layer_norm_rows(res1, layer.ln1_scale, layer.ln1_shift);

        let h1 = flat_matmul(tape, norm1, layer.ffn_w1, batch, n);
        let h1b = tape.add_row_bias(h1, layer.ffn_b1);
        let mut act = tape.relu(h1b);
        if let Some(rng) = dropout_rng.as_deref_mut() {
            if cfg.dropout > 0.0 {
                let dims = tape.value(act).dims().to_vec();
                let m = dropout_mask(tape, &dims, cfg.dropout, rng);
                act = tape.mul(act, m);
            }
        }
        let h2 = flat_matmul(tape, act, layer.ffn_w2, batch, n);
        let h2b = tape.add_row_bias(h2, layer.ffn_b2);
        let res2 = tape.add(norm1, h2b);
        x = tape.layer_norm_rows(res2, layer.ln2_scale, layer.ln2_shift);
    }

    let flat = tape.reshape(x, &[batch * n, d]);
    let last_rows: Rc<Vec<usize>> = Rc::new((0..batch).map(|b| b * n + n - 1).collect());
    let h_last = tape.gather_rows(flat, last_rows);
    Ok(EncodeOutput {
        hidden: x,
        h_last,
        attention,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentationConfig {
    pub crop_ratio: f64,
    pub mask_ratio: f64,
    pub reorder_ratio: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            crop_ratio: 0.6,
            mask_ratio: 0.3,
            reorder_ratio: 0.6,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("crop_ratio", self.crop_ratio),
            ("mask_ratio", self.mask_ratio),
            ("reorder_ratio", self.reorder_ratio),
        ] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(CoreError::InvalidConfig(format!(
                    "{name} must be in (0, 1], got {r}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AugmentOp {
    Crop,
    Mask,
    Reorder,
}

fn span_len(ratio: f64, len: usize) -> usize {
    ((ratio * len as f64).ceil() as usize).clamp(1, len)
}

fn augment_once(
    s: &[u32],
    mask_token: u32,
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let op = match rng.gen_range(0..3u8) {
        0 => AugmentOp::Crop,
        1 => AugmentOp::Mask,
        _ => AugmentOp::Reorder,
    };
    match op {
        AugmentOp::Crop => {
            let keep = span_len(cfg.crop_ratio, s.len());
            let start = rng.gen_range(0..=s.len() - keep);
            s[start..start + keep].to_vec()
        }
        AugmentOp::Mask => {
            let m = span_len(cfg.mask_ratio, s.len());
            let positions = rand::seq::index::sample(rng, s.len(), m);
            let mut out = s.to_vec();
            for p in positions.iter() {
                out[p] = mask_token;
            }
            out
        }
        AugmentOp::Reorder => {
            let span = span_len(cfg.reorder_ratio, s.len());
            let start = rng.gen_range(0..=s.len() - span);
            let mut out = s.to_vec();
            out[start..start + span].shuffle(rng);
            out
        }
    }
}

/// Two independently augmented views of one training view, each with an
/// independently drawn operation.
pub fn augment(
    s: &[u32],
    mask_token: u32,
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<u32>, Vec<u32>)> {
    cfg.validate()?;
    if s.len() < 2 {
        return Err(CoreError::Precondition(format!(
            "augmentation needs at least 2 items, got {}",
            s.len()
        )));
    }
    let v1 = augment_once(s, mask_token, cfg, rng);
    let v2 = augment_once(s, mask_token, cfg, rng);
    Ok((v1, v2))
}

/// InfoNCE over paired sequence views. Rows are interleaved
/// [view1_0, view2_0, view1_1, ...]; each anchor's positive is its
/// partner and its negatives are every other row (2B-1 terms in the
/// denominator), dot-product critic.
pub fn seq_cl_loss_tape(tape: &mut Tape, reps: NodeId, tau_seq: f64) -> Result<NodeId> {
    let rows = tape.value(reps).dims()[0];
    if rows == 0 || rows % 2 != 0 {
        return Err(CoreError::Precondition(format!(
            "paired views require an even, positive row count; got {rows}"
        )));
    }
    assert!(tau_seq > 0.0, "temperature must be positive, got {tau_seq}");
    for r in 0..rows {
        if tape.value(reps).row(r).iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite {
                what: "sequence representation",
                detail: format!("view row {r}"),
            });
        }
    }
    let sim_raw = tape.matmul_nt(reps, reps);
    let sim = tape.scale(sim_raw, 1.0 / tau_seq);
    let mut diag = vec![false; rows * rows];
    for i in 0..rows {
        diag[i * rows + i] = true;
    }
    let partners: Rc<Vec<usize>> = Rc::new((0..rows).map(|i| i ^ 1).collect());
    let pos = tape.gather_elems(sim, partners);
    let lse = tape.masked_log_sum_exp_rows(sim, Rc::new(diag));
    let diff = tape.sub(lse, pos);
    Ok(tape.sum_all(diff))
}

/// Value-level wrapper for tests.
pub fn seq_cl_loss(reps: &Tensor, tau_seq: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let r = tape.constant(reps.clone());
    let loss = seq_cl_loss_tape(&mut tape, r, tau_seq)?;
    Ok(tape.value(loss).item())
}
