//! The two trainable architectures behind one model contract.
//!
//! A [`Model`] is a named parameter map plus its [`ModelConfig`]; the
//! architecture field selects between the recurrent encoder-decoder
//! (bidirectional GRU encoder, additive attention) and the transformer
//! (multi-head self-attention with sinusoidal positions, pre-norm residual
//! blocks). Source and target share one embedding matrix over the joint
//! vocabulary, and the output projection is tied to it.
//!
//! Training code drives [`Model::loss_and_grads`]; decoding drives
//! [`Model::encode_source`] and [`Model::decode_step`] with an incremental
//! [`DecodeCache`]. Target sequences always start from `<bos>`; the
//! target language is selected solely by the flag token at source
//! position 0.

mod recurrent;
mod transformer;

use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::subword::PAD_ID;
use crate::tensor::{Element, Graph, Tensor, Var};
use std::collections::BTreeMap;

/// Architecture selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Recurrent,
    Transformer,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::Recurrent => "recurrent",
            Arch::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "recurrent" => Ok(Arch::Recurrent),
            "transformer" => Ok(Arch::Transformer),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Hyper-parameters of a model.
///
/// `dropout` is the single global rate used by the transformer.
/// `dropout_emb_hidden` applies to the recurrent model's embeddings and
/// stacked hidden states, `dropout_in_out` to its first-layer inputs and
/// pre-logit output features.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub num_heads: usize,
    pub feedforward_size: usize,
    pub dropout: f64,
    pub dropout_emb_hidden: f64,
    pub dropout_in_out: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    /// Desk-scale transformer: 64-dim, 2+2 layers, 4 heads, feed-forward 128.
    pub fn desk_transformer(vocab_size: usize) -> Self {
        ModelConfig {
            arch: Arch::Transformer,
            embedding_size: 64,
            hidden_size: 64,
            encoder_depth: 2,
            decoder_depth: 2,
            num_heads: 4,
            feedforward_size: 128,
            dropout: 0.1,
            dropout_emb_hidden: 0.0,
            dropout_in_out: 0.0,
            vocab_size,
            max_positions: 80,
        }
    }

    /// Desk-scale recurrent model: 64/64, depth 1/1.
    pub fn desk_recurrent(vocab_size: usize) -> Self {
        ModelConfig {
            arch: Arch::Recurrent,
            embedding_size: 64,
            hidden_size: 64,
            encoder_depth: 1,
            decoder_depth: 1,
            num_heads: 0,
            feedforward_size: 0,
            dropout: 0.0,
            dropout_emb_hidden: 0.2,
            dropout_in_out: 0.1,
            vocab_size,
            max_positions: 80,
        }
    }

    /// Full-scale recurrent configuration (GRU 1024/1024, depth 2/2).
    pub fn paper_recurrent(vocab_size: usize) -> Self {
        ModelConfig {
            arch: Arch::Recurrent,
            embedding_size: 1024,
            hidden_size: 1024,
            encoder_depth: 2,
            decoder_depth: 2,
            num_heads: 0,
            feedforward_size: 0,
            dropout: 0.0,
            dropout_emb_hidden: 0.2,
            dropout_in_out: 0.1,
            vocab_size,
            max_positions: 256,
        }
    }

    /// Full-scale transformer configuration (512-dim, depth 6/6).
    pub fn paper_transformer(vocab_size: usize) -> Self {
        ModelConfig {
            arch: Arch::Transformer,
            embedding_size: 512,
            hidden_size: 512,
            encoder_depth: 6,
            decoder_depth: 6,
            num_heads: 8,
            feedforward_size: 2048,
            dropout: 0.3,
            dropout_emb_hidden: 0.0,
            dropout_in_out: 0.0,
            vocab_size,
            max_positions: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.embedding_size == 0 {
            return err("embedding_size", "must be positive".into());
        }
        if self.vocab_size < 5 {
            return err("vocab_size", format!("{} is too small", self.vocab_size));
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 {
            return err("encoder_depth/decoder_depth", "must be at least 1".into());
        }
        if self.max_positions < 2 {
            return err("max_positions", "must be at least 2".into());
        }
        for (name, rate) in [
            ("dropout", self.dropout),
            ("dropout_emb_hidden", self.dropout_emb_hidden),
            ("dropout_in_out", self.dropout_in_out),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return err(name, format!("rate {rate} outside [0, 1)"));
            }
        }
        match self.arch {
            Arch::Transformer => {
                if self.num_heads == 0 {
                    return err("num_heads", "must be positive".into());
                }
                if self.embedding_size % self.num_heads != 0 {
                    return err(
                        "num_heads",
                        format!(
                            "embedding_size {} not divisible by num_heads {}",
                            self.embedding_size, self.num_heads
                        ),
                    );
                }
                if self.feedforward_size == 0 {
                    return err("feedforward_size", "must be positive".into());
                }
                if self.hidden_size != self.embedding_size {
                    return err(
                        "hidden_size",
                        format!(
                            "transformer requires hidden_size == embedding_size ({} != {})",
                            self.hidden_size, self.embedding_size
                        ),
                    );
                }
            }
            Arch::Recurrent => {
                if self.hidden_size == 0 {
                    return err("hidden_size", "must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Closed-form parameter count; kept in sync with `build` by a test.
    pub fn parameter_count(&self) -> usize {
        let v = self.vocab_size;
        let e = self.embedding_size;
        let h = self.hidden_size;
        match self.arch {
            Arch::Transformer => {
                let d = e;
                let f = self.feedforward_size;
                let enc_layer = 4 * d * d + 2 * d * f + f + 9 * d;
                let dec_layer = 8 * d * d + 2 * d * f + f + 15 * d;
                v * d + self.encoder_depth * enc_layer + self.decoder_depth * dec_layer + 4 * d
            }
            Arch::Recurrent => {
                let gru = |input: usize| input * 3 * h + h * 3 * h + 6 * h;
                let enc = 2 * gru(e) + 2 * (self.encoder_depth - 1) * gru(2 * h);
                let dec = gru(e) + (self.decoder_depth - 1) * gru(h);
                let init = self.decoder_depth * (2 * h * h + h);
                let attn = 2 * h * h + h * h + h + h;
                let out = 3 * h * e + e;
                v * e + enc + dec + init + attn + out
            }
        }
    }

    /// Flat `key = value` rendering, the checkpoint's self-description.
    pub fn to_text(&self) -> String {
        format!(
            "arch = {}\nembedding_size = {}\nhidden_size = {}\nencoder_depth = {}\n\
             decoder_depth = {}\nnum_heads = {}\nfeedforward_size = {}\ndropout = {}\n\
             dropout_emb_hidden = {}\ndropout_in_out = {}\nvocab_size = {}\nmax_positions = {}\n",
            self.arch.name(),
            self.embedding_size,
            self.hidden_size,
            self.encoder_depth,
            self.decoder_depth,
            self.num_heads,
            self.feedforward_size,
            self.dropout,
            self.dropout_emb_hidden,
            self.dropout_in_out,
            self.vocab_size,
            self.max_positions
        )
    }

    pub fn from_text(text: &str) -> Result<ModelConfig> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad config line: {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k).ok_or_else(|| Error::Config(format!("missing config key '{k}'")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Config(format!("bad number for '{k}'")))
        };
        let flt = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Config(format!("bad float for '{k}'")))
        };
        let cfg = ModelConfig {
            arch: Arch::parse(get("arch")?)?,
            embedding_size: num("embedding_size")?,
            hidden_size: num("hidden_size")?,
            encoder_depth: num("encoder_depth")?,
            decoder_depth: num("decoder_depth")?,
            num_heads: num("num_heads")?,
            feedforward_size: num("feedforward_size")?,
            dropout: flt("dropout")?,
            dropout_emb_hidden: flt("dropout_emb_hidden")?,
            dropout_in_out: flt("dropout_in_out")?,
            vocab_size: num("vocab_size")?,
            max_positions: num("max_positions")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A configured architecture with its parameters and step counter.
#[derive(Clone, Debug)]
pub struct Model<F: Element> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor<F>>,
    pub step: u64,
    pos_table: Tensor<F>,
}

/// Name → graph-leaf bindings for one forward pass.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter '{name}'"))
    }

    /// Pull accumulated leaf gradients out of a back-propagated graph.
    pub fn collect_grads<F: Element>(
        &self,
        g: &Graph<'_, F>,
    ) -> Result<BTreeMap<String, Tensor<F>>> {
        let mut out = BTreeMap::new();
        for (name, &var) in &self.vars {
            let grad = g.grad_tensor(var).ok_or_else(|| {
                Error::Contract(format!("parameter '{name}' received no gradient"))
            })?;
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }
}

/// Incremental decoding state, one entry per hypothesis row.
#[derive(Clone, Debug)]
pub enum DecodeCache<F: Element> {
    Recurrent {
        /// Per decoder layer: hidden state `[rows, hidden]`.
        hidden: Vec<Tensor<F>>,
        rows: usize,
    },
    Transformer {
        /// Per decoder layer: projected keys and values `[rows, t, d]`.
        keys: Vec<Option<Tensor<F>>>,
        values: Vec<Option<Tensor<F>>>,
        len: usize,
        rows: usize,
    },
}

impl<F: Element> DecodeCache<F> {
    pub fn rows(&self) -> usize {
        match self {
            DecodeCache::Recurrent { rows, .. } => *rows,
            DecodeCache::Transformer { rows, .. } => *rows,
        }
    }

    /// Prefix length already decoded.
    pub fn len(&self) -> usize {
        match self {
            DecodeCache::Recurrent { .. } => 0, // recurrent state is position-free
            DecodeCache::Transformer { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reorder/replicate hypothesis rows (beam pruning and expansion).
    pub fn select_rows(&self, idx: &[usize]) -> DecodeCache<F> {
        match self {
            DecodeCache::Recurrent { hidden, .. } => DecodeCache::Recurrent {
                hidden: hidden.iter().map(|h| select_rows(h, idx)).collect(),
                rows: idx.len(),
            },
            DecodeCache::Transformer { keys, values, len, .. } => DecodeCache::Transformer {
                keys: keys.iter().map(|k| k.as_ref().map(|t| select_rows(t, idx))).collect(),
                values: values.iter().map(|v| v.as_ref().map(|t| select_rows(t, idx))).collect(),
                len: *len,
                rows: idx.len(),
            },
        }
    }
}

/// Frozen encoder output for decoding, selectable by hypothesis row.
#[derive(Clone, Debug)]
pub struct EncodedSource<F: Element> {
    /// `[rows, src_len, dim]` where dim is `d` (transformer) or `2H` (GRU).
    pub states: Tensor<F>,
    pub src_len: Vec<usize>,
    /// Recurrent only: decoder-init summary `[rows, 2H]`.
    pub(crate) summary: Option<Tensor<F>>,
    /// Transformer only: per decoder layer, cross-attention keys/values.
    pub(crate) cross_keys: Vec<Tensor<F>>,
    pub(crate) cross_values: Vec<Tensor<F>>,
}

impl<F: Element> EncodedSource<F> {
    pub fn rows(&self) -> usize {
        self.src_len.len()
    }

    pub fn select_rows(&self, idx: &[usize]) -> EncodedSource<F> {
        EncodedSource {
            states: select_rows(&self.states, idx),
            src_len: idx.iter().map(|&i| self.src_len[i]).collect(),
            summary: self.summary.as_ref().map(|s| select_rows(s, idx)),
            cross_keys: self.cross_keys.iter().map(|t| select_rows(t, idx)).collect(),
            cross_values: self.cross_values.iter().map(|t| select_rows(t, idx)).collect(),
        }
    }
}

/// Gather blocks along the leading axis.
pub(crate) fn select_rows<F: Element>(t: &Tensor<F>, idx: &[usize]) -> Tensor<F> {
    let shape = t.shape();
    let block: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * block);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * block..(i + 1) * block]);
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = idx.len();
    Tensor::new(new_shape, data).expect("select_rows shape")
}

impl<F: Element> Model<F> {
    /// Initialize parameters: matrices uniform in ±1/√fan_in, biases and
    /// norm offsets zero, norm gains one. Deterministic by seed.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model<F>> {
        config.validate()?;
        let mut rng = Rng::seed_from(seed);
        let mut params = BTreeMap::new();
        let names = parameter_specs(&config);
        for spec in names {
            let tensor = match spec.init {
                Init::FanIn => {
                    let bound = 1.0 / (spec.shape[0] as f64).sqrt();
                    Tensor::uniform(&spec.shape, -bound, bound, &mut rng)
                }
                Init::Zero => Tensor::zeros(&spec.shape),
                Init::One => Tensor::full(&spec.shape, F::one()),
            };
            params.insert(spec.name, tensor);
        }
        let pos_table = sinusoidal_table(config.max_positions, config.embedding_size);
        Ok(Model { config, params, step: 0, pos_table })
    }

    /// Reassemble a model from loaded parts (checkpoint restore).
    pub fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Tensor<F>>,
        step: u64,
    ) -> Result<Model<F>> {
        config.validate()?;
        let expected: BTreeMap<String, Vec<usize>> =
            parameter_specs(&config).into_iter().map(|s| (s.name, s.shape)).collect();
        if expected.len() != params.len() {
            return Err(Error::Input(format!(
                "checkpoint has {} parameters, config implies {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Input(format!(
                        "parameter '{name}' has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Input(format!("checkpoint missing parameter '{name}'"))),
            }
        }
        let pos_table = sinusoidal_table(config.max_positions, config.embedding_size);
        Ok(Model { config, params, step, pos_table })
    }

    pub fn parameter_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn pos_table(&self) -> &Tensor<F> {
        &self.pos_table
    }

    /// Bind every parameter as a graph leaf.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p, F>, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, tensor)| (name.clone(), g.leaf(tensor, trainable)))
            .collect();
        BoundParams { vars }
    }

    /// Teacher-forced per-position logits `[rows, tgt_cols-1, vocab]`.
    pub fn forward_logits(&self, batch: &Batch, train: bool, rng: &mut Rng) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let logits = self.logits_var(&mut g, &bound, batch, train, rng)?;
        let rows = batch.rows;
        let steps = batch.tgt_cols - 1;
        let v = self.config.vocab_size;
        g.value(logits).clone().reshaped(vec![rows, steps, v])
    }

    /// Mean per-token negative log-likelihood of a batch (no dropout,
    /// no gradients).
    pub fn eval_loss(&self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let mut rng = Rng::seed_from(0); // unused: train=false draws nothing
        let loss = self.loss_var(&mut g, &bound, batch, false, &mut rng)?;
        Ok(g.value(loss).item()?.as_f64())
    }

    /// One training forward+backward: loss value and per-parameter grads.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        rng: &mut Rng,
    ) -> Result<(f64, BTreeMap<String, Tensor<F>>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, true);
        let loss = self.loss_var(&mut g, &bound, batch, true, rng)?;
        let value = g.value(loss).item()?.as_f64();
        g.backward(loss)?;
        let grads = bound.collect_grads(&g)?;
        Ok((value, grads))
    }

    /// Loss node over a batch: cross-entropy from log-softmax with padding
    /// masked out of the mean.
    pub fn loss_var<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        bound: &BoundParams,
        batch: &Batch,
        train: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let logits = self.logits_var(g, bound, batch, train, rng)?;
        let targets = shifted_targets(batch);
        g.cross_entropy(logits, &targets, PAD_ID)
    }

    fn logits_var<'p>(
        &'p self,
        g: &mut Graph<'p, F>,
        bound: &BoundParams,
        batch: &Batch,
        train: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        match self.config.arch {
            Arch::Transformer => transformer::batch_logits(self, g, bound, batch, train, rng),
            Arch::Recurrent => recurrent::batch_logits(self, g, bound, batch, train, rng),
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let max = self.config.max_positions;
        if batch.src_cols > max || batch.tgt_cols > max {
            return Err(Error::Input(format!(
                "batch length exceeds max_positions {max}: src {}, tgt {}",
                batch.src_cols, batch.tgt_cols
            )));
        }
        Ok(())
    }

    /// Encode source rows for decoding (no dropout, frozen values).
    pub fn encode_source(&self, src_rows: &[Vec<u32>]) -> Result<EncodedSource<F>> {
        if src_rows.is_empty() {
            return Err(Error::Input("encode_source: no rows".into()));
        }
        for row in src_rows {
            if row.is_empty() {
                return Err(Error::Input("encode_source: empty source row".into()));
            }
            if row.len() > self.config.max_positions {
                return Err(Error::Input(format!(
                    "source length {} exceeds max_positions {}",
                    row.len(),
                    self.config.max_positions
                )));
            }
        }
        match self.config.arch {
            Arch::Transformer => transformer::encode_source(self, src_rows),
            Arch::Recurrent => recurrent::encode_source(self, src_rows),
        }
    }

    /// Fresh cache for `rows` parallel hypotheses of one encoded source.
    pub fn start_cache(&self, enc: &EncodedSource<F>) -> DecodeCache<F> {
        match self.config.arch {
            Arch::Recurrent => recurrent::start_cache(self, enc),
            Arch::Transformer => DecodeCache::Transformer {
                keys: vec![None; self.config.decoder_depth],
                values: vec![None; self.config.decoder_depth],
                len: 0,
                rows: enc.rows(),
            },
        }
    }

    /// One autoregressive step: logits `[rows, vocab]` for the next
    /// position given each row's previous token. O(1) model passes per
    /// step thanks to the cache.
    pub fn decode_step(
        &self,
        enc: &EncodedSource<F>,
        prev_ids: &[u32],
        cache: &mut DecodeCache<F>,
    ) -> Result<Tensor<F>> {
        if prev_ids.len() != cache.rows() || prev_ids.len() != enc.rows() {
            return Err(Error::State(format!(
                "decode_step: {} ids vs cache of {} rows vs {} encoded rows",
                prev_ids.len(),
                cache.rows(),
                enc.rows()
            )));
        }
        if let DecodeCache::Transformer { len, .. } = cache {
            if *len + 1 >= self.config.max_positions {
                return Err(Error::State(format!(
                    "decode prefix {} reached max_positions {}",
                    len, self.config.max_positions
                )));
            }
        }
        match self.config.arch {
            Arch::Transformer => transformer::decode_step(self, enc, prev_ids, cache),
            Arch::Recurrent => recurrent::decode_step(self, enc, prev_ids, cache),
        }
    }

    pub fn to_f32_model(&self) -> Model<f32> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.to_f32())).collect(),
            step: self.step,
            pos_table: self.pos_table.to_f32(),
        }
    }
}

/// Label ids aligned with teacher-forced input positions: row-major
/// `[rows × (tgt_cols-1)]`, padding where the target row has ended.
pub(crate) fn shifted_targets(batch: &Batch) -> Vec<u32> {
    let steps = batch.tgt_cols - 1;
    let mut out = Vec::with_capacity(batch.rows * steps);
    for r in 0..batch.rows {
        let row = batch.tgt_row(r);
        out.extend_from_slice(&row[1..]);
        debug_assert_eq!(row.len() - 1, steps);
    }
    out
}

enum Init {
    FanIn,
    Zero,
    One,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn spec(name: String, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { name, shape, init }
}

/// The full parameter inventory of a configuration, in construction order.
/// This order also fixes the initialization draw order.
fn parameter_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let e = cfg.embedding_size;
    let v = cfg.vocab_size;
    let mut out = vec![spec("embed".into(), vec![v, e], Init::FanIn)];
    match cfg.arch {
        Arch::Transformer => {
            let d = e;
            let f = cfg.feedforward_size;
            let attn = |out: &mut Vec<ParamSpec>, prefix: &str| {
                for w in ["wq", "wk", "wv", "wo"] {
                    out.push(spec(format!("{prefix}.{w}"), vec![d, d], Init::FanIn));
                }
                for b in ["bq", "bk", "bv", "bo"] {
                    out.push(spec(format!("{prefix}.{b}"), vec![d], Init::Zero));
                }
            };
            let norm = |out: &mut Vec<ParamSpec>, prefix: &str| {
                out.push(spec(format!("{prefix}.gain"), vec![d], Init::One));
                out.push(spec(format!("{prefix}.bias"), vec![d], Init::Zero));
            };
            let ff = |out: &mut Vec<ParamSpec>, prefix: &str| {
                out.push(spec(format!("{prefix}.w1"), vec![d, f], Init::FanIn));
                out.push(spec(format!("{prefix}.b1"), vec![f], Init::Zero));
                out.push(spec(format!("{prefix}.w2"), vec![f, d], Init::FanIn));
                out.push(spec(format!("{prefix}.b2"), vec![d], Init::Zero));
            };
            for l in 0..cfg.encoder_depth {
                norm(&mut out, &format!("enc.{l}.ln1"));
                attn(&mut out, &format!("enc.{l}.attn"));
                norm(&mut out, &format!("enc.{l}.ln2"));
                ff(&mut out, &format!("enc.{l}.ff"));
            }
            norm(&mut out, "enc.final_ln");
            for l in 0..cfg.decoder_depth {
                norm(&mut out, &format!("dec.{l}.ln1"));
                attn(&mut out, &format!("dec.{l}.self"));
                norm(&mut out, &format!("dec.{l}.ln2"));
                attn(&mut out, &format!("dec.{l}.cross"));
                norm(&mut out, &format!("dec.{l}.ln3"));
                ff(&mut out, &format!("dec.{l}.ff"));
            }
            norm(&mut out, "dec.final_ln");
        }
        Arch::Recurrent => {
            let h = cfg.hidden_size;
            let gru = |out: &mut Vec<ParamSpec>, prefix: &str, input: usize| {
                out.push(spec(format!("{prefix}.w"), vec![input, 3 * h], Init::FanIn));
                out.push(spec(format!("{prefix}.u"), vec![h, 3 * h], Init::FanIn));
                out.push(spec(format!("{prefix}.bi"), vec![3 * h], Init::Zero));
                out.push(spec(format!("{prefix}.bh"), vec![3 * h], Init::Zero));
            };
            for l in 0..cfg.encoder_depth {
                let input = if l == 0 { e } else { 2 * h };
                gru(&mut out, &format!("enc.{l}.fwd"), input);
                gru(&mut out, &format!("enc.{l}.bwd"), input);
            }
            for l in 0..cfg.decoder_depth {
                let input = if l == 0 { e } else { h };
                gru(&mut out, &format!("dec.{l}.gru"), input);
                out.push(spec(format!("dec.{l}.init.w"), vec![2 * h, h], Init::FanIn));
                out.push(spec(format!("dec.{l}.init.b"), vec![h], Init::Zero));
            }
            out.push(spec("attn.enc".into(), vec![2 * h, h], Init::FanIn));
            out.push(spec("attn.dec".into(), vec![h, h], Init::FanIn));
            out.push(spec("attn.b".into(), vec![h], Init::Zero));
            out.push(spec("attn.v".into(), vec![h, 1], Init::FanIn));
            out.push(spec("out.w".into(), vec![3 * h, e], Init::FanIn));
            out.push(spec("out.b".into(), vec![e], Init::Zero));
        }
    }
    out
}

/// The sinusoidal position table `[max_positions, d]`, computed in f64.
fn sinusoidal_table<F: Element>(max_positions: usize, d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(max_positions * d);
    for pos in 0..max_positions {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            data.push(F::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![max_positions, d], data).expect("position table shape")
}

/// Additive attention mask: 0 where the key position is real, a large
/// negative number where it is padding, materialized at full rank so no
/// broadcasting is needed. After max-subtracted softmax the masked weights
/// underflow to exactly zero.
pub(crate) fn key_padding_mask<F: Element>(
    rows: usize,
    q_len: usize,
    k_len: usize,
    key_len: &[usize],
    causal: bool,
) -> Tensor<F> {
    let neg = F::from_f64(-1e9);
    let zero = F::zero();
    let mut data = Vec::with_capacity(rows * q_len * k_len);
    for len in key_len.iter().take(rows) {
        for q in 0..q_len {
            for k in 0..k_len {
                let pad = k >= *len;
                let future = causal && k > q;
                data.push(if pad || future { neg } else { zero });
            }
        }
    }
    Tensor::new(vec![rows, q_len, k_len], data).expect("mask shape")
}
