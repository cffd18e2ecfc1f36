//! Self-attentive encoder-decoder with sinusoidal absolute positions.
//!
//! Pre-norm residual blocks: each sub-layer (multi-head attention or
//! position-wise feed-forward) reads a layer-normalized input and its
//! output is added back to the running stream; a final normalization closes
//! each stack. The decoder adds an extra multi-head attention over the
//! encoder states between self-attention and feed-forward. Incremental
//! decoding keeps the per-layer projected keys/values of the prefix and
//! re-projects only the newest position.

use super::{key_padding_mask, BoundParams, DecodeCache, EncodedSource, Model};
use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Graph, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Embedding · √d + position table slice, followed by dropout.
fn embed_positions<'p, F: Element>(
    model: &'p Model<F>,
    g: &mut Graph<'p, F>,
    bound: &BoundParams,
    ids: &[u32],
    rows: usize,
    cols: usize,
    first_pos: usize,
    train: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let d = model.config.embedding_size;
    let emb = g.embedding(bound.var("embed"), ids, &[rows * cols])?;
    let scaled = g.scale(emb, (d as f64).sqrt())?;
    let table = model.pos_table().data();
    let mut pe = Vec::with_capacity(rows * cols * d);
    for _ in 0..rows {
        pe.extend_from_slice(&table[first_pos * d..(first_pos + cols) * d]);
    }
    let pe = g.constant(Tensor::new(vec![rows * cols, d], pe)?);
    let x = g.add(scaled, pe)?;
    g.dropout(x, model.config.dropout, train, rng)
}

fn norm<'p, F: Element>(
    g: &mut Graph<'p, F>,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    g.layer_norm(x, bound.var(&format!("{prefix}.gain")), bound.var(&format!("{prefix}.bias")), LN_EPS)
}

fn projection<'p, F: Element>(
    g: &mut Graph<'p, F>,
    bound: &BoundParams,
    prefix: &str,
    which: (&str, &str),
    x: Var,
) -> Result<Var> {
    let w = g.matmul(x, bound.var(&format!("{prefix}.{}", which.0)))?;
    g.add_bias(w, bound.var(&format!("{prefix}.{}", which.1)))
}

/// Multi-head attention. `q_in` is `[b·tq, d]`, `kv_in` is `[b·tk, d]`;
/// heads are column slices of the fused projections. The optional mask is
/// `[b, tq, tk]` and is added to the scores before softmax.
#[allow(clippy::too_many_arguments)]
fn multi_head<'p, F: Element>(
    g: &mut Graph<'p, F>,
    bound: &BoundParams,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    b: usize,
    tq: usize,
    tk: usize,
    mask: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let d = g.value(q_in).shape()[1];
    let dh = d / heads;
    let q = projection(g, bound, prefix, ("wq", "bq"), q_in)?;
    let k = projection(g, bound, prefix, ("wk", "bk"), kv_in)?;
    let v = projection(g, bound, prefix, ("wv", "bv"), kv_in)?;
    let mut contexts = Vec::with_capacity(heads);
    for hidx in 0..heads {
        let qh = g.slice(q, 1, hidx * dh, dh)?;
        let kh = g.slice(k, 1, hidx * dh, dh)?;
        let vh = g.slice(v, 1, hidx * dh, dh)?;
        let q3 = g.reshape(qh, &[b, tq, dh])?;
        let k3 = g.reshape(kh, &[b, tk, dh])?;
        let v3 = g.reshape(vh, &[b, tk, dh])?;
        let mut scores = g.bmm_nt(q3, k3)?;
        scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let weights = g.softmax(scores, 2)?;
        let ctx = g.bmm(weights, v3)?;
        contexts.push(g.reshape(ctx, &[b * tq, dh])?);
    }
    let cat = g.concat(&contexts, 1)?;
    projection(g, bound, prefix, ("wo", "bo"), cat)
}

fn feed_forward<'p, F: Element>(
    g: &mut Graph<'p, F>,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let h = g.matmul(x, bound.var(&format!("{prefix}.w1")))?;
    let h = g.add_bias(h, bound.var(&format!("{prefix}.b1")))?;
    let h = g.relu(h)?;
    let h = g.matmul(h, bound.var(&format!("{prefix}.w2")))?;
    g.add_bias(h, bound.var(&format!("{prefix}.b2")))
}

/// Residual wrapper: `x + dropout(f(...))`.
fn residual<'p, F: Element>(
    g: &mut Graph<'p, F>,
    x: Var,
    sub: Var,
    rate: f64,
    train: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let dropped = g.dropout(sub, rate, train, rng)?;
    g.add(x, dropped)
}

/// Encoder stack over flattened source ids; returns `[rows·cols, d]`.
#[allow(clippy::too_many_arguments)]
pub(super) fn encoder_vars<'p, F: Element>(
    model: &'p Model<F>,
    g: &mut Graph<'p, F>,
    bound: &BoundParams,
    src_ids: &[u32],
    rows: usize,
    cols: usize,
    src_len: &[usize],
    train: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let cfg = &model.config;
    let mut x = embed_positions(model, g, bound, src_ids, rows, cols, 0, train, rng)?;
    let mask = g.constant(key_padding_mask::<F>(rows, cols, cols, src_len, false));
    for l in 0..cfg.encoder_depth {
        let a_in = norm(g, bound, &format!("enc.{l}.ln1"), x)?;
        let a = multi_head(
            g,
            bound,
            &format!("enc.{l}.attn"),
            a_in,
            a_in,
            rows,
            cols,
            cols,
            Some(mask),
            cfg.num_heads,
        )?;
        x = residual(g, x, a, cfg.dropout, train, rng)?;
        let f_in = norm(g, bound, &format!("enc.{l}.ln2"), x)?;
        let f = feed_forward(g, bound, &format!("enc.{l}.ff"), f_in)?;
        x = residual(g, x, f, cfg.dropout, train, rng)?;
    }
    norm(g, bound, "enc.final_ln", x)
}

/// Teacher-forced decoder logits for a batch: `[rows·(tgt_cols-1), vocab]`.
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

    let enc = encoder_vars(model, g, bound, batch.src_flat(), rows, te, &batch.src_len, train, rng)?;

    let mut dec_ids = Vec::with_capacity(rows * td);
    for r in 0..rows {
        dec_ids.extend_from_slice(&batch.tgt_row(r)[..td]);
    }
    let mut x = embed_positions(model, g, bound, &dec_ids, rows, td, 0, train, rng)?;
    // Causal masking is enough for the self-attention: padding always
    // trails the real tokens, so no real position can attend into it.
    let self_mask = g.constant(key_padding_mask::<F>(rows, td, td, &vec![td; rows], true));
    let cross_mask = g.constant(key_padding_mask::<F>(rows, td, te, &batch.src_len, false));
    for l in 0..cfg.decoder_depth {
        let a_in = norm(g, bound, &format!("dec.{l}.ln1"), x)?;
        let a = multi_head(
            g,
            bound,
            &format!("dec.{l}.self"),
            a_in,
            a_in,
            rows,
            td,
            td,
            Some(self_mask),
            cfg.num_heads,
        )?;
        x = residual(g, x, a, cfg.dropout, train, rng)?;
        let c_in = norm(g, bound, &format!("dec.{l}.ln2"), x)?;
        let c = multi_head(
            g,
            bound,
            &format!("dec.{l}.cross"),
            c_in,
            enc,
            rows,
            td,
            te,
            Some(cross_mask),
            cfg.num_heads,
        )?;
        x = residual(g, x, c, cfg.dropout, train, rng)?;
        let f_in = norm(g, bound, &format!("dec.{l}.ln3"), x)?;
        let f = feed_forward(g, bound, &format!("dec.{l}.ff"), f_in)?;
        x = residual(g, x, f, cfg.dropout, train, rng)?;
    }
    let h = norm(g, bound, "dec.final_ln", x)?;
    g.matmul_nt(h, bound.var("embed"))
}

/// Run the encoder once and pre-project the cross-attention keys/values of
/// every decoder layer.
pub(super) fn encode_source<F: Element>(
    model: &Model<F>,
    src_rows: &[Vec<u32>],
) -> Result<EncodedSource<F>> {
    let rows = src_rows.len();
    let cols = src_rows.iter().map(Vec::len).max().unwrap();
    let src_len: Vec<usize> = src_rows.iter().map(Vec::len).collect();
    let mut flat = vec![crate::subword::PAD_ID; rows * cols];
    for (r, row) in src_rows.iter().enumerate() {
        flat[r * cols..r * cols + row.len()].copy_from_slice(row);
    }

    let mut rng = Rng::seed_from(0); // inference: no stochastic draws
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let enc = encoder_vars(model, &mut g, &bound, &flat, rows, cols, &src_len, false, &mut rng)?;
    let d = model.config.embedding_size;
    let states = g.value(enc).clone().reshaped(vec![rows, cols, d])?;

    let mut cross_keys = Vec::with_capacity(model.config.decoder_depth);
    let mut cross_values = Vec::with_capacity(model.config.decoder_depth);
    for l in 0..model.config.decoder_depth {
        let prefix = format!("dec.{l}.cross");
        let k = projection(&mut g, &bound, &prefix, ("wk", "bk"), enc)?;
        let v = projection(&mut g, &bound, &prefix, ("wv", "bv"), enc)?;
        cross_keys.push(g.value(k).clone().reshaped(vec![rows, cols, d])?);
        cross_values.push(g.value(v).clone().reshaped(vec![rows, cols, d])?);
    }
    Ok(EncodedSource { states, src_len, summary: None, cross_keys, cross_values })
}

/// One incremental decoding step with a key/value cache.
pub(super) fn decode_step<F: Element>(
    model: &Model<F>,
    enc: &EncodedSource<F>,
    prev_ids: &[u32],
    cache: &mut DecodeCache<F>,
) -> Result<Tensor<F>> {
    let DecodeCache::Transformer { keys, values, len, rows } = cache else {
        return Err(Error::State("transformer model got a recurrent cache".into()));
    };
    let rows = *rows;
    let pos = *len;
    let cfg = &model.config;
    let d = cfg.embedding_size;
    let heads = cfg.num_heads;
    let dh = d / heads;
    let te = enc.states.shape()[1];

    let mut new_keys: Vec<Tensor<F>> = Vec::with_capacity(cfg.decoder_depth);
    let mut new_values: Vec<Tensor<F>> = Vec::with_capacity(cfg.decoder_depth);
    let logits: Tensor<F>;
    {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);

        let emb = g.embedding(bound.var("embed"), prev_ids, &[rows])?;
        let scaled = g.scale(emb, (d as f64).sqrt())?;
        let pe_row = Tensor::new(
            vec![d],
            model.pos_table().data()[pos * d..(pos + 1) * d].to_vec(),
        )?;
        let pe = g.constant(pe_row);
        let mut x = g.add_bias(scaled, pe)?;

        let cross_mask = g.constant(key_padding_mask::<F>(rows, 1, te, &enc.src_len, false));
        for l in 0..cfg.decoder_depth {
            // Self-attention over the cached prefix plus this position.
            let a_in = norm(&mut g, &bound, &format!("dec.{l}.ln1"), x)?;
            let prefix = format!("dec.{l}.self");
            let q = projection(&mut g, &bound, &prefix, ("wq", "bq"), a_in)?;
            let k = projection(&mut g, &bound, &prefix, ("wk", "bk"), a_in)?;
            let v = projection(&mut g, &bound, &prefix, ("wv", "bv"), a_in)?;
            let k3 = g.reshape(k, &[rows, 1, d])?;
            let v3 = g.reshape(v, &[rows, 1, d])?;
            let (k_all, v_all) = match (&keys[l], &values[l]) {
                (Some(pk), Some(pv)) => {
                    let pk = g.leaf(pk, false);
                    let pv = g.leaf(pv, false);
                    (g.concat(&[pk, k3], 1)?, g.concat(&[pv, v3], 1)?)
                }
                _ => (k3, v3),
            };
            let mut contexts = Vec::with_capacity(heads);
            for hidx in 0..heads {
                let qh = g.slice(q, 1, hidx * dh, dh)?;
                let q3 = g.reshape(qh, &[rows, 1, dh])?;
                let kh = g.slice(k_all, 2, hidx * dh, dh)?;
                let vh = g.slice(v_all, 2, hidx * dh, dh)?;
                let mut scores = g.bmm_nt(q3, kh)?;
                scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
                let weights = g.softmax(scores, 2)?;
                let ctx = g.bmm(weights, vh)?;
                contexts.push(g.reshape(ctx, &[rows, dh])?);
            }
            let cat = g.concat(&contexts, 1)?;
            let a = projection(&mut g, &bound, &prefix, ("wo", "bo"), cat)?;
            x = g.add(x, a)?;
            new_keys.push(g.value(k_all).clone());
            new_values.push(g.value(v_all).clone());

            // Cross-attention against the pre-projected encoder keys/values.
            let c_in = norm(&mut g, &bound, &format!("dec.{l}.ln2"), x)?;
            let cprefix = format!("dec.{l}.cross");
            let qc = projection(&mut g, &bound, &cprefix, ("wq", "bq"), c_in)?;
            let kc = g.leaf(&enc.cross_keys[l], false);
            let vc = g.leaf(&enc.cross_values[l], false);
            let mut contexts = Vec::with_capacity(heads);
            for hidx in 0..heads {
                let qh = g.slice(qc, 1, hidx * dh, dh)?;
                let q3 = g.reshape(qh, &[rows, 1, dh])?;
                let kh = g.slice(kc, 2, hidx * dh, dh)?;
                let vh = g.slice(vc, 2, hidx * dh, dh)?;
                let mut scores = g.bmm_nt(q3, kh)?;
                scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
                scores = g.add(scores, cross_mask)?;
                let weights = g.softmax(scores, 2)?;
                let ctx = g.bmm(weights, vh)?;
                contexts.push(g.reshape(ctx, &[rows, dh])?);
            }
            let cat = g.concat(&contexts, 1)?;
            let c = projection(&mut g, &bound, &cprefix, ("wo", "bo"), cat)?;
            x = g.add(x, c)?;

            let f_in = norm(&mut g, &bound, &format!("dec.{l}.ln3"), x)?;
            let f = feed_forward(&mut g, &bound, &format!("dec.{l}.ff"), f_in)?;
            x = g.add(x, f)?;
        }
        let h = norm(&mut g, &bound, "dec.final_ln", x)?;
        let lv = g.matmul_nt(h, bound.var("embed"))?;
        logits = g.value(lv).clone();
    }

    *cache = DecodeCache::Transformer {
        keys: new_keys.into_iter().map(Some).collect(),
        values: new_values.into_iter().map(Some).collect(),
        len: pos + 1,
        rows,
    };
    Ok(logits)
}
