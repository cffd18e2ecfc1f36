//! Recurrent encoder-decoder: bidirectional GRU encoder, additive attention.
//!
//! The encoder runs one forward and one backward GRU per layer; their
//! per-position states are concatenated. Padding is handled by freezing the
//! state through invalid steps, so the forward state at the last column
//! equals the state at each row's true end, and the backward pass sees each
//! row as if it had been reversed within its own length. The decoder is a
//! stacked unidirectional GRU initialized from a learned projection of the
//! encoder summary; at every step the top state scores the encoder states
//! with a single-layer additive attention and the context is concatenated
//! with the state before the output projection.

use super::{key_padding_mask, BoundParams, DecodeCache, EncodedSource, Model};
use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::subword::PAD_ID;
use crate::tensor::{Element, Graph, Tensor, Var};

/// One GRU cell application (reset gate applied to the projected hidden
/// state): `h' = (1-z)·n + z·h`.
fn gru_cell<'p, F: Element>(
    g: &mut Graph<'p, F>,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
    h: Var,
    hidden: usize,
) -> Result<Var> {
    let gi = g.matmul(x, bound.var(&format!("{prefix}.w")))?;
    let gi = g.add_bias(gi, bound.var(&format!("{prefix}.bi")))?;
    let gh = g.matmul(h, bound.var(&format!("{prefix}.u")))?;
    let gh = g.add_bias(gh, bound.var(&format!("{prefix}.bh")))?;
    let ri = g.slice(gi, 1, 0, hidden)?;
    let zi = g.slice(gi, 1, hidden, hidden)?;
    let ni = g.slice(gi, 1, 2 * hidden, hidden)?;
    let rh = g.slice(gh, 1, 0, hidden)?;
    let zh = g.slice(gh, 1, hidden, hidden)?;
    let nh = g.slice(gh, 1, 2 * hidden, hidden)?;
    let r_pre = g.add(ri, rh)?;
    let r = g.sigmoid(r_pre)?;
    let z_pre = g.add(zi, zh)?;
    let z = g.sigmoid(z_pre)?;
    let gated = g.mul(r, nh)?;
    let n_pre = g.add(ni, gated)?;
    let n = g.tanh(n_pre)?;
    let keep = g.mul(z, h)?;
    let one_minus_z = g.affine(z, -1.0, 1.0)?;
    let update = g.mul(one_minus_z, n)?;
    g.add(update, keep)
}

/// `h_prev + valid · (h_new − h_prev)`: take the new state on valid steps,
/// keep the old one where the row has run out of tokens.
fn masked_update<'p, F: Element>(
    g: &mut Graph<'p, F>,
    h_new: Var,
    h_prev: Var,
    valid: Var,
) -> Result<Var> {
    let diff = g.sub(h_new, h_prev)?;
    let gated = g.mul(valid, diff)?;
    g.add(h_prev, gated)
}

/// 0/1 validity column mask for step `t`, expanded to `[rows, width]`.
fn step_mask<F: Element>(rows: usize, width: usize, lens: &[usize], t: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(rows * width);
    for len in lens.iter().take(rows) {
        let v = if t < *len { F::one() } else { F::zero() };
        data.extend(std::iter::repeat(v).take(width));
    }
    Tensor::new(vec![rows, width], data).expect("mask shape")
}

struct EncoderPass {
    /// `[rows, te, 2H]`
    states: Var,
    /// `[rows, 2H]`: forward state at each row's end ++ backward state at 0.
    summary: Var,
}

/// Bidirectional encoder over column-major steps of the source matrix.
#[allow(clippy::too_many_arguments)]
fn encoder_pass<'p, F: Element>(
    model: &'p Model<F>,
    g: &mut Graph<'p, F>,
    bound: &BoundParams,
    src_col: &dyn Fn(usize) -> Vec<u32>,
    rows: usize,
    te: usize,
    src_len: &[usize],
    train: bool,
    rng: &mut Rng,
) -> Result<EncoderPass> {
    let cfg = &model.config;
    let h = cfg.hidden_size;

    // Layer-0 inputs: embedded columns with embedding and input dropout.
    let mut inputs: Vec<Var> = Vec::with_capacity(te);
    for t in 0..te {
        let ids = src_col(t);
        let emb = g.embedding(bound.var("embed"), &ids, &[rows])?;
        let emb = g.dropout(emb, cfg.dropout_emb_hidden, train, rng)?;
        let emb = g.dropout(emb, cfg.dropout_in_out, train, rng)?;
        inputs.push(emb);
    }

    let masks: Vec<Var> = (0..te)
        .map(|t| g.constant(step_mask::<F>(rows, h, src_len, t)))
        .collect();

    let mut fwd_states: Vec<Var> = Vec::new();
    let mut bwd_states: Vec<Var> = Vec::new();
    for l in 0..cfg.encoder_depth {
        let mut fwd = Vec::with_capacity(te);
        let zero = g.constant(Tensor::zeros(&[rows, h]));
        let mut state = zero;
        for t in 0..te {
            let x = layer_input(g, &inputs, &fwd_states, &bwd_states, l, t)?;
            let x = if l > 0 { g.dropout(x, cfg.dropout_emb_hidden, train, rng)? } else { x };
            let next = gru_cell(g, bound, &format!("enc.{l}.fwd"), x, state, h)?;
            state = masked_update(g, next, state, masks[t])?;
            fwd.push(state);
        }
        let mut bwd: Vec<Option<Var>> = vec![None; te];
        let mut state = g.constant(Tensor::zeros(&[rows, h]));
        for t in (0..te).rev() {
            let x = layer_input(g, &inputs, &fwd_states, &bwd_states, l, t)?;
            let x = if l > 0 { g.dropout(x, cfg.dropout_emb_hidden, train, rng)? } else { x };
            let next = gru_cell(g, bound, &format!("enc.{l}.bwd"), x, state, h)?;
            state = masked_update(g, next, state, masks[t])?;
            bwd[t] = Some(state);
        }
        fwd_states = fwd;
        bwd_states = bwd.into_iter().map(|v| v.expect("bwd state")).collect();
    }

    // Stack [rows, 1, 2H] slices along time.
    let mut steps = Vec::with_capacity(te);
    for t in 0..te {
        let both = g.concat(&[fwd_states[t], bwd_states[t]], 1)?;
        steps.push(g.reshape(both, &[rows, 1, 2 * h])?);
    }
    let states = g.concat(&steps, 1)?;
    // The forward state is frozen past each row's end, so the last column
    // holds the state at the true end of every row.
    let summary = g.concat(&[fwd_states[te - 1], bwd_states[0]], 1)?;
    Ok(EncoderPass { states, summary })
}

fn layer_input<'p, F: Element>(
    g: &mut Graph<'p, F>,
    inputs: &[Var],
    fwd_below: &[Var],
    bwd_below: &[Var],
    layer: usize,
    t: usize,
) -> Result<Var> {
    if layer == 0 {
        Ok(inputs[t])
    } else {
        g.concat(&[fwd_below[t], bwd_below[t]], 1)
    }
}

/// Decoder hidden states initialized from the encoder summary.
fn init_decoder_states<'p, F: Element>(
    model: &Model<F>,
    g: &mut Graph<'p, F>,
    bound: &BoundParams,
    summary: Var,
) -> Result<Vec<Var>> {
    (0..model.config.decoder_depth)
        .map(|l| {
            let w = g.matmul(summary, bound.var(&format!("dec.{l}.init.w")))?;
            let w = g.add_bias(w, bound.var(&format!("dec.{l}.init.b")))?;
            g.tanh(w)
        })
        .collect()
}

/// Additive attention projection of the encoder states, computed once.
fn attention_keys<'p, F: Element>(
    model: &Model<F>,
    g: &mut Graph<'p, F>,
    bound: &BoundParams,
    states: Var,
    rows: usize,
    te: usize,
) -> Result<Var> {
    let h = model.config.hidden_size;
    let flat = g.reshape(states, &[rows * te, 2 * h])?;
    let proj = g.matmul(flat, bound.var("attn.enc"))?;
    let proj = g.add_bias(proj, bound.var("attn.b"))?;
    g.reshape(proj, &[rows, te, h])
}

/// One attention read: scores from the top decoder state, masked softmax
/// over encoder positions, context as the weighted state sum.
#[allow(clippy::too_many_arguments)]
fn attend<'p, F: Element>(
    model: &Model<F>,
    g: &mut Graph<'p, F>,
    bound: &BoundParams,
    state: Var,
    keys: Var,
    states: Var,
    mask: Var,
    rows: usize,
    te: usize,
) -> Result<Var> {
    let h = model.config.hidden_size;
    let query = g.matmul(state, bound.var("attn.dec"))?;
    let combined = g.add_per_batch(keys, query)?;
    let act = g.tanh(combined)?;
    let flat = g.reshape(act, &[rows * te, h])?;
    let scores = g.matmul(flat, bound.var("attn.v"))?;
    let scores = g.reshape(scores, &[rows, te])?;
    let scores = g.add(scores, mask)?;
    let weights = g.softmax(scores, 1)?;
    let w3 = g.reshape(weights, &[rows, 1, te])?;
    let ctx = g.bmm(w3, states)?;
    g.reshape(ctx, &[rows, 2 * h])
}

/// Pre-logit feature: `tanh(W·[state; context] + b)`, sharing the embedding
/// matrix as the output projection.
fn readout<'p, F: Element>(
    model: &Model<F>,
    g: &mut Graph<'p, F>,
    bound: &BoundParams,
    state: Var,
    ctx: Var,
    train: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let feat = g.concat(&[state, ctx], 1)?;
    let feat = g.dropout(feat, model.config.dropout_in_out, train, rng)?;
    let pre = g.matmul(feat, bound.var("out.w"))?;
    let pre = g.add_bias(pre, bound.var("out.b"))?;
    g.tanh(pre)
}

/// Teacher-forced logits for a batch: `[rows·(tgt_cols-1), vocab]`.
pub(super) fn batch_logits<'p, F: Element>(
    model: &'p Model<F>,
    g: &mut Graph<'p, F>,
    bound: &BoundParams,
    batch: &Batch,
    train: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let cfg = &model.config;
    let rows = batch.rows;
    let te = batch.src_cols;
    let td = batch.tgt_cols - 1;
    let h = cfg.hidden_size;
    let e = cfg.embedding_size;

    let src_col = |t: usize| (0..rows).map(|r| batch.src_row(r)[t]).collect::<Vec<u32>>();
    let enc = encoder_pass(model, g, bound, &src_col, rows, te, &batch.src_len, train, rng)?;
    let keys = attention_keys(model, g, bound, enc.states, rows, te)?;
    let attn_mask = {
        let m = key_padding_mask::<F>(rows, 1, te, &batch.src_len, false);
        let m = m.reshaped(vec![rows, te])?;
        g.constant(m)
    };
    let mut hidden = init_decoder_states(model, g, bound, enc.summary)?;

    let mut outputs = Vec::with_capacity(td);
    for t in 0..td {
        let ids: Vec<u32> = (0..rows).map(|r| batch.tgt_row(r)[t]).collect();
        let emb = g.embedding(bound.var("embed"), &ids, &[rows])?;
        let emb = g.dropout(emb, cfg.dropout_emb_hidden, train, rng)?;
        let mut x = g.dropout(emb, cfg.dropout_in_out, train, rng)?;
        for l in 0..cfg.decoder_depth {
            if l > 0 {
                x = g.dropout(x, cfg.dropout_emb_hidden, train, rng)?;
            }
            hidden[l] = gru_cell(g, bound, &format!("dec.{l}.gru"), x, hidden[l], h)?;
            x = hidden[l];
        }
        let top = hidden[cfg.decoder_depth - 1];
        let ctx = attend(model, g, bound, top, keys, enc.states, attn_mask, rows, te)?;
        let pre = readout(model, g, bound, top, ctx, train, rng)?;
        outputs.push(g.reshape(pre, &[rows, 1, e])?);
    }
    let stacked = g.concat(&outputs, 1)?;
    let flat = g.reshape(stacked, &[rows * td, e])?;
    g.matmul_nt(flat, bound.var("embed"))
}

/// Encode source rows for decoding; freezes states, summary, and the
/// additive-attention key projection (stored as the single entry of
/// `cross_keys`).
pub(super) fn encode_source<F: Element>(
    model: &Model<F>,
    src_rows: &[Vec<u32>],
) -> Result<EncodedSource<F>> {
    let rows = src_rows.len();
    let te = src_rows.iter().map(Vec::len).max().unwrap();
    let src_len: Vec<usize> = src_rows.iter().map(Vec::len).collect();
    let mut flat = vec![PAD_ID; rows * te];
    for (r, row) in src_rows.iter().enumerate() {
        flat[r * te..r * te + row.len()].copy_from_slice(row);
    }

    let mut rng = Rng::seed_from(0);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let src_col = |t: usize| (0..rows).map(|r| flat[r * te + t]).collect::<Vec<u32>>();
    let enc = encoder_pass(model, &mut g, &bound, &src_col, rows, te, &src_len, false, &mut rng)?;
    let keys = attention_keys(model, &mut g, &bound, enc.states, rows, te)?;
    Ok(EncodedSource {
        states: g.value(enc.states).clone(),
        src_len,
        summary: Some(g.value(enc.summary).clone()),
        cross_keys: vec![g.value(keys).clone()],
        cross_values: Vec::new(),
    })
}

/// Fresh decoder hidden states from the frozen encoder summary.
pub(super) fn start_cache<F: Element>(
    model: &Model<F>,
    enc: &EncodedSource<F>,
) -> DecodeCache<F> {
    let summary = enc.summary.as_ref().expect("recurrent encoding carries a summary");
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let s = g.leaf(summary, false);
    let states = init_decoder_states(model, &mut g, &bound, s).expect("decoder init");
    DecodeCache::Recurrent {
        hidden: states.into_iter().map(|v| g.value(v).clone()).collect(),
        rows: enc.rows(),
    }
}

/// One decoding step: advance the GRU stack, attend, project logits.
pub(super) fn decode_step<F: Element>(
    model: &Model<F>,
    enc: &EncodedSource<F>,
    prev_ids: &[u32],
    cache: &mut DecodeCache<F>,
) -> Result<Tensor<F>> {
    let DecodeCache::Recurrent { hidden, rows } = cache else {
        return Err(Error::State("recurrent model got a transformer cache".into()));
    };
    let rows = *rows;
    let cfg = &model.config;
    let h = cfg.hidden_size;
    let te = enc.states.shape()[1];

    let mut rng = Rng::seed_from(0);
    let mut new_hidden: Vec<Tensor<F>> = Vec::with_capacity(cfg.decoder_depth);
    let logits: Tensor<F>;
    {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let emb = g.embedding(bound.var("embed"), prev_ids, &[rows])?;
        let mut x = emb;
        let mut tops = Vec::with_capacity(cfg.decoder_depth);
        for (l, prev) in hidden.iter().enumerate() {
            let state = g.leaf(prev, false);
            let next = gru_cell(&mut g, &bound, &format!("dec.{l}.gru"), x, state, h)?;
            tops.push(next);
            x = next;
        }
        let states = g.leaf(&enc.states, false);
        let keys = g.leaf(&enc.cross_keys[0], false);
        let mask = {
            let m = key_padding_mask::<F>(rows, 1, te, &enc.src_len, false);
            g.constant(m.reshaped(vec![rows, te])?)
        };
        let top = tops[cfg.decoder_depth - 1];
        let ctx = attend(model, &mut g, &bound, top, keys, states, mask, rows, te)?;
        let pre = readout(model, &mut g, &bound, top, ctx, false, &mut rng)?;
        let lv = g.matmul_nt(pre, bound.var("embed"))?;
        logits = g.value(lv).clone();
        for v in tops {
            new_hidden.push(g.value(v).clone());
        }
    }
    *cache = DecodeCache::Recurrent { hidden: new_hidden, rows };
    Ok(logits)
}
