//! Feedback-aware sequential encoder.
//!
//! Each history position is the item embedding concatenated with the three
//! feedback bits (EVV, FVV, GVV), plus a learned position row. `B` blocks of
//! single-head self-attention with residual LayerNorm and a ReLU FFN follow;
//! the pooled output `e_h` has width `d + 3`.
//!
//! Histories are left-padded, so the most recent item always sits at
//! position `L - 1`. Padding rows use reserved embedding row 0 (item `i`
//! lives at row `i + 1`) and are masked as attention keys.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{FeedbackFlags, NUM_TASKS};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// One history position: the item and its feedback bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HistoryItem {
    pub item: u32,
    pub flags: FeedbackFlags,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Output row of the most recent (last non-padding) position.
    #[default]
    Last,
    /// Mean of all non-padding output rows.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub item_embeddings: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<BlockParams>,
    pub num_items: usize,
    pub dim: usize,
    pub seq_len: usize,
    pub eps: f64,
    pub pooling: Pooling,
    /// When false the feedback channels are fed as zeros (ablation).
    pub use_feedback: bool,
}

/// Encoder output: the pooled vector and, when computed, every position.
#[derive(Clone, Copy, Debug)]
pub struct EncodedHistory {
    pub e_h: Var,
    pub h: Option<Var>,
}

impl EncoderParams {
    pub fn width(&self) -> usize {
        self.dim + NUM_TASKS
    }

    /// Registers encoder tensors under `encoder.*`, initialised by `init`.
    pub fn register(
        store: &mut ParamStore,
        num_items: usize,
        dim: usize,
        seq_len: usize,
        blocks: usize,
        init: &mut impl FnMut(&[usize], f64) -> Tensor,
    ) -> Result<Self> {
        if blocks == 0 || seq_len == 0 || dim == 0 {
            return Err(Error::Config("encoder needs blocks, seq_len and dim >= 1".into()));
        }
        let w = dim + NUM_TASKS;
        let wstd = 1.0 / (w as f64).sqrt();
        let item_embeddings = store.add("encoder.item_emb", init(&[num_items + 1, dim], 0.1))?;
        let positions = store.add("encoder.pos", init(&[seq_len, w], 0.1))?;
        let mut bs = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let mut add = |name: &str, t: Tensor| store.add(format!("encoder.block{b}.{name}"), t);
            bs.push(BlockParams {
                wq: add("wq", init(&[w, w], wstd))?,
                wk: add("wk", init(&[w, w], wstd))?,
                wv: add("wv", init(&[w, w], wstd))?,
                ffn_w1: add("ffn_w1", init(&[w, w], wstd))?,
                ffn_b1: add("ffn_b1", Tensor::zeros(&[1, w]).requires_grad())?,
                ffn_w2: add("ffn_w2", init(&[w, w], wstd))?,
                ffn_b2: add("ffn_b2", Tensor::zeros(&[1, w]).requires_grad())?,
                ln1_gain: add("ln1_gain", Tensor::matrix(1, w, vec![1.0; w])?.requires_grad())?,
                ln1_bias: add("ln1_bias", Tensor::zeros(&[1, w]).requires_grad())?,
                ln2_gain: add("ln2_gain", Tensor::matrix(1, w, vec![1.0; w])?.requires_grad())?,
                ln2_bias: add("ln2_bias", Tensor::zeros(&[1, w]).requires_grad())?,
            });
        }
        Ok(Self {
            item_embeddings,
            positions,
            blocks: bs,
            num_items,
            dim,
            seq_len,
            eps: 1e-5,
            pooling: Pooling::Last,
            use_feedback: true,
        })
    }

    /// Looks up tensors registered by [`EncoderParams::register`].
    pub fn bind(store: &ParamStore, dim: usize, seq_len: usize, blocks: usize) -> Result<Self> {
        let w = dim + NUM_TASKS;
        let get = |name: &str, shape: &[usize]| expect_param(store, name, shape);
        let item_embeddings = store
            .id("encoder.item_emb")
            .ok_or_else(|| Error::Schema("missing encoder.item_emb".into()))?;
        let rows = store.get(item_embeddings).rows();
        if rows < 1 || store.get(item_embeddings).cols() != dim {
            return Err(Error::Schema("encoder.item_emb has the wrong shape".into()));
        }
        let positions = get("encoder.pos", &[seq_len, w])?;
        let mut bs = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let p = |n: &str, shape: &[usize]| get(&format!("encoder.block{b}.{n}"), shape);
            bs.push(BlockParams {
                wq: p("wq", &[w, w])?,
                wk: p("wk", &[w, w])?,
                wv: p("wv", &[w, w])?,
                ffn_w1: p("ffn_w1", &[w, w])?,
                ffn_b1: p("ffn_b1", &[1, w])?,
                ffn_w2: p("ffn_w2", &[w, w])?,
                ffn_b2: p("ffn_b2", &[1, w])?,
                ln1_gain: p("ln1_gain", &[1, w])?,
                ln1_bias: p("ln1_bias", &[1, w])?,
                ln2_gain: p("ln2_gain", &[1, w])?,
                ln2_bias: p("ln2_bias", &[1, w])?,
            });
        }
        Ok(Self {
            item_embeddings,
            positions,
            blocks: bs,
            num_items: rows - 1,
            dim,
            seq_len,
            eps: 1e-5,
            pooling: Pooling::Last,
            use_feedback: true,
        })
    }
}

pub(crate) fn expect_param(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Schema(format!("missing parameter {name}")))?;
    let t = store.get(id);
    if [t.rows(), t.cols()] != [shape[0], shape[1]] {
        return Err(Error::Schema(format!(
            "parameter {name} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(id)
}

/// Builds the `capacity x (d+3)` encoder input and its key mask.
///
/// Only the last `min(len, L)` records are used; shorter histories are
/// left-padded up to `capacity`.
pub fn build_encoder_input(
    tape: &mut Tape,
    store: &ParamStore,
    p: &EncoderParams,
    history: &[HistoryItem],
    capacity: usize,
) -> Result<(Var, Vec<bool>)> {
    if capacity == 0 || capacity > p.seq_len {
        return Err(Error::Usage(format!(
            "encoder capacity {capacity} outside 1..={}",
            p.seq_len
        )));
    }
    let history = &history[history.len().saturating_sub(capacity)..];
    let pad = capacity - history.len();
    let mut rows = vec![0usize; capacity];
    let mut flags = vec![0.0; capacity * NUM_TASKS];
    let mut mask = vec![false; capacity];
    for (j, h) in history.iter().enumerate() {
        if h.item as usize >= p.num_items {
            return Err(Error::Index {
                what: "history item",
                index: h.item as usize,
                bound: p.num_items,
            });
        }
        let r = pad + j;
        rows[r] = h.item as usize + 1;
        mask[r] = true;
        if p.use_feedback {
            flags[r * NUM_TASKS..(r + 1) * NUM_TASKS].copy_from_slice(&h.flags.as_array());
        }
    }
    let emb = tape.gather(store, p.item_embeddings, &rows)?;
    let fl = tape.constant(capacity, NUM_TASKS, flags)?;
    let x = tape.concat_cols(&[emb, fl])?;
    let pos_rows: Vec<usize> = (p.seq_len - capacity..p.seq_len).collect();
    let pos = tape.gather(store, p.positions, &pos_rows)?;
    Ok((tape.add(x, pos)?, mask))
}

/// Single-head scaled dot-product attention with padding keys masked.
/// `query_rows` restricts the query positions (all rows when `None`).
pub fn self_attention(
    tape: &mut Tape,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    mask: &[bool],
    query_rows: Option<&[usize]>,
) -> Result<Var> {
    let xq = match query_rows {
        Some(rows) => tape.select_rows(x, rows)?,
        None => x,
    };
    let q = tape.matmul(xq, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let width = tape.shape(q).1 as f64;
    let logits = tape.matmul_bt(q, k)?;
    let scaled = tape.scale(logits, 1.0 / width.sqrt());
    let att = tape.softmax_rows_masked(scaled, Some(mask))?;
    tape.matmul(att, v)
}

/// `H' = LN(SA(x) + x)`, `H = LN(FFN(H') + H')`.
pub fn encoder_block(
    tape: &mut Tape,
    store: &ParamStore,
    b: &BlockParams,
    x: Var,
    mask: &[bool],
    eps: f64,
    query_rows: Option<&[usize]>,
) -> Result<Var> {
    let p = |tape: &mut Tape, id| tape.param(store, id);
    let (wq, wk, wv) = (p(tape, b.wq), p(tape, b.wk), p(tape, b.wv));
    let att = self_attention(tape, x, wq, wk, wv, mask, query_rows)?;
    let residual = match query_rows {
        Some(rows) => tape.select_rows(x, rows)?,
        None => x,
    };
    let s = tape.add(att, residual)?;
    let (g1, b1) = (p(tape, b.ln1_gain), p(tape, b.ln1_bias));
    let h1 = tape.layer_norm(s, g1, b1, eps)?;

    let (w1, c1, w2, c2) = (p(tape, b.ffn_w1), p(tape, b.ffn_b1), p(tape, b.ffn_w2), p(tape, b.ffn_b2));
    let f = tape.matmul(h1, w1)?;
    let f = tape.add_row(f, c1)?;
    let f = tape.relu(f);
    let f = tape.matmul(f, w2)?;
    let f = tape.add_row(f, c2)?;
    let s2 = tape.add(f, h1)?;
    let (g2, b2) = (p(tape, b.ln2_gain), p(tape, b.ln2_bias));
    tape.layer_norm(s2, g2, b2, eps)
}

/// Runs the block stack at `capacity` positions (default: the history
/// length, at least 1). With `full = false` and last-position pooling the
/// final block only computes the last query row, which yields the same
/// `e_h` bit for bit.
pub fn encode_history(
    tape: &mut Tape,
    store: &ParamStore,
    p: &EncoderParams,
    history: &[HistoryItem],
    capacity: Option<usize>,
    full: bool,
) -> Result<EncodedHistory> {
    let len = history.len().min(p.seq_len);
    let cap = capacity.unwrap_or(len.max(1));
    if cap < len.max(1) {
        return Err(Error::Usage(format!("capacity {cap} below history length {len}")));
    }
    let (mut x, mask) = build_encoder_input(tape, store, p, history, cap)?;
    let last = [cap - 1];
    let nblocks = p.blocks.len();
    let mut h = None;
    for (i, b) in p.blocks.iter().enumerate() {
        let final_block = i + 1 == nblocks;
        let rows = (final_block && !full && p.pooling == Pooling::Last).then_some(&last[..]);
        x = encoder_block(tape, store, b, x, &mask, p.eps, rows)?;
        if final_block && rows.is_none() {
            h = Some(x);
        }
    }
    let e_h = match (p.pooling, h) {
        (Pooling::Last, Some(hh)) => tape.select_rows(hh, &last)?,
        (Pooling::Last, None) => x,
        (Pooling::Mean, Some(hh)) => {
            let valid = mask.iter().filter(|&&m| m).count();
            let weights: Vec<f64> = if valid == 0 {
                (0..cap).map(|j| if j + 1 == cap { 1.0 } else { 0.0 }).collect()
            } else {
                mask.iter().map(|&m| if m { 1.0 / valid as f64 } else { 0.0 }).collect()
            };
            let wv = tape.constant(1, cap, weights)?;
            tape.matmul(wv, hh)?
        }
        (Pooling::Mean, None) => unreachable!("mean pooling always computes all rows"),
    };
    Ok(EncodedHistory { e_h, h })
}
