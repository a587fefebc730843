//! Miniature pre-norm Transformer encoder/decoder with prefix-to-prefix
//! attention masks.
//!
//! Source prefixes are encoded with one of two masks:
//!
//! * [`EncoderMode::PrefixBidirectional`]: at decoding step `t` every source
//!   position `i <= g(t)` attends to all `j <= g(t)`, so earlier states are
//!   recomputed as new words arrive. Equivalent to re-encoding the prefix
//!   from scratch.
//! * [`EncoderMode::Unidirectional`]: position `i` attends to `j <= i`, so a
//!   single pass over the whole sentence serves every prefix.
//!
//! The decoder uses causal self-attention, and target step `t` attends only
//! to the encoding of the first `g(t)` source tokens.

mod checkpoint;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::matrix::{matmul, Matrix};
use crate::policy::PolicySchedule;
use crate::tape::{masked_softmax, AttentionMask, NodeId, Tape};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};

pub type TokenId = u32;

/// Uniform initialization range for weights.
pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderMode {
    PrefixBidirectional,
    Unidirectional,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub encoder_mode: EncoderMode,
}

impl ModelConfig {
    /// Two layers each side, width 32, two heads, feed-forward 4x width.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            src_vocab,
            tgt_vocab,
            enc_layers: 2,
            dec_layers: 2,
            width: 32,
            heads: 2,
            ffn: 128,
            max_len: 64,
            encoder_mode: EncoderMode::PrefixBidirectional,
        }
    }

    /// One layer each side, width 8, for gradient checks.
    pub fn tiny(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            src_vocab,
            tgt_vocab,
            enc_layers: 1,
            dec_layers: 1,
            width: 8,
            heads: 2,
            ffn: 16,
            max_len: 16,
            encoder_mode: EncoderMode::PrefixBidirectional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad("width must be a positive multiple of heads");
        }
        if self.src_vocab <= EOS as usize || self.tgt_vocab <= EOS as usize {
            return bad("vocabularies must include the reserved tokens");
        }
        if self.ffn == 0 || self.max_len == 0 {
            return bad("ffn width and max length must be positive");
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
struct LnIds {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FfIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncLayerIds {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ff: FfIds,
}

#[derive(Debug, Clone, Copy)]
struct DecLayerIds {
    ln1: LnIds,
    self_attn: AttnIds,
    ln2: LnIds,
    cross: AttnIds,
    ln3: LnIds,
    ff: FfIds,
}

#[derive(Debug, Clone)]
struct Layout {
    src_emb: usize,
    tgt_emb: usize,
    enc: Vec<EncLayerIds>,
    enc_ln: LnIds,
    dec: Vec<DecLayerIds>,
    dec_ln: LnIds,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform,
    Ones,
    Zeros,
}

struct LayoutBuilder {
    specs: Vec<(String, usize, usize, Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push((name, rows, cols, init));
        self.specs.len() - 1
    }

    fn ln(&mut self, prefix: &str, w: usize) -> LnIds {
        LnIds {
            g: self.add(format!("{prefix}.g"), 1, w, Init::Ones),
            b: self.add(format!("{prefix}.b"), 1, w, Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, w: usize) -> AttnIds {
        AttnIds {
            wq: self.add(format!("{prefix}.wq"), w, w, Init::Uniform),
            wk: self.add(format!("{prefix}.wk"), w, w, Init::Uniform),
            wv: self.add(format!("{prefix}.wv"), w, w, Init::Uniform),
            wo: self.add(format!("{prefix}.wo"), w, w, Init::Uniform),
        }
    }

    fn ff(&mut self, prefix: &str, w: usize, hidden: usize) -> FfIds {
        FfIds {
            w1: self.add(format!("{prefix}.w1"), w, hidden, Init::Uniform),
            b1: self.add(format!("{prefix}.b1"), 1, hidden, Init::Uniform),
            w2: self.add(format!("{prefix}.w2"), hidden, w, Init::Uniform),
            b2: self.add(format!("{prefix}.b2"), 1, w, Init::Uniform),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<(String, usize, usize, Init)>) {
    let w = cfg.width;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let src_emb = b.add("src_emb".into(), cfg.src_vocab, w, Init::Uniform);
    let tgt_emb = b.add("tgt_emb".into(), cfg.tgt_vocab, w, Init::Uniform);
    let enc = (0..cfg.enc_layers)
        .map(|l| EncLayerIds {
            ln1: b.ln(&format!("enc.{l}.ln1"), w),
            attn: b.attn(&format!("enc.{l}.attn"), w),
            ln2: b.ln(&format!("enc.{l}.ln2"), w),
            ff: b.ff(&format!("enc.{l}.ff"), w, cfg.ffn),
        })
        .collect();
    let enc_ln = b.ln("enc.ln", w);
    let dec = (0..cfg.dec_layers)
        .map(|l| DecLayerIds {
            ln1: b.ln(&format!("dec.{l}.ln1"), w),
            self_attn: b.attn(&format!("dec.{l}.self"), w),
            ln2: b.ln(&format!("dec.{l}.ln2"), w),
            cross: b.attn(&format!("dec.{l}.cross"), w),
            ln3: b.ln(&format!("dec.{l}.ln3"), w),
            ff: b.ff(&format!("dec.{l}.ff"), w, cfg.ffn),
        })
        .collect();
    let dec_ln = b.ln("dec.ln", w);
    let out_w = b.add("out.w".into(), w, cfg.tgt_vocab, Init::Uniform);
    let out_b = b.add("out.b".into(), 1, cfg.tgt_vocab, Init::Uniform);
    (
        Layout {
            src_emb,
            tgt_emb,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_w,
            out_b,
        },
        b.specs,
    )
}

/// Sinusoidal position table, `max_len x width`.
pub fn positional_table(max_len: usize, width: usize) -> Matrix {
    let mut pe = Matrix::zeros(max_len, width);
    for pos in 0..max_len {
        for i in 0..width {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 / rate;
            pe.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    pub value: Matrix,
}

/// All weights of the model. Immutable during inference and `Sync`, so one
/// instance can serve concurrent decoders.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
    layout: Layout,
    positions: Matrix,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}

/// Source context for one decoder step.
#[derive(Debug, Clone, Copy)]
pub enum SourceContext<'m> {
    /// Encoder states for the first `g(t) >= 1` source positions.
    States(&'m Matrix),
    /// Oracle mode: no source at all; cross-attention contributes nothing.
    ZeroSource,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_range(config, seed, INIT_RANGE)
    }

    /// As [`ModelParams::init`] with weights uniform in `[-range, range]`.
    pub fn init_with_range(config: ModelConfig, seed: u64, range: f64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .into_iter()
            .map(|(name, rows, cols, init)| {
                let mut value = Matrix::zeros(rows, cols);
                match init {
                    Init::Uniform => {
                        for v in value.data_mut() {
                            *v = rng.gen_range(-range..=range);
                        }
                    }
                    Init::Ones => value.data_mut().fill(1.0),
                    Init::Zeros => {}
                }
                Tensor { name, value }
            })
            .collect();
        let positions = positional_table(config.max_len, config.width);
        Ok(Self {
            config,
            tensors,
            layout,
            positions,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if specs.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, rows, cols, _), t) in specs.iter().zip(&tensors) {
            if *name != t.name || (*rows, *cols) != t.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match expected `{name}` ({rows}, {cols})",
                    t.name,
                    t.value.shape()
                )));
            }
        }
        let positions = positional_table(config.max_len, config.width);
        Ok(Self {
            config,
            tensors,
            layout,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.value.data().len()).sum()
    }

    pub(crate) fn zero_grads(&self) -> Vec<Matrix> {
        self.tensors
            .iter()
            .map(|t| Matrix::zeros(t.value.rows(), t.value.cols()))
            .collect()
    }

    /// Pushes every parameter onto a fresh tape, so parameter `i` is node `i`.
    fn bind(&self) -> Tape<'_> {
        let mut tape = Tape::new();
        for (i, t) in self.tensors.iter().enumerate() {
            let id = tape.param(i, &t.value);
            debug_assert_eq!(id, i);
        }
        tape
    }

    fn check_tokens(&self, tokens: &[TokenId], vocab: usize) -> Result<()> {
        if tokens.len() > self.config.max_len {
            return Err(Error::Dimension(format!(
                "sequence of {} tokens exceeds max length {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&id) => Err(Error::TokenOutOfVocab { id, size: vocab }),
            None => Ok(()),
        }
    }

    fn embed<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        table: usize,
        tokens: &[TokenId],
        positions: &[usize],
    ) -> NodeId {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let e = tape.gather(table, &ids);
        let e = tape.scale(e, (self.config.width as f64).sqrt());
        let pe = tape.constant_ref(&self.positions);
        let p = tape.gather(pe, positions);
        tape.add(e, p)
    }

    fn layer_norm(tape: &mut Tape<'_>, x: NodeId, ln: LnIds) -> NodeId {
        tape.layer_norm(x, ln.g, ln.b)
    }

    fn multi_head(
        &self,
        tape: &mut Tape<'_>,
        ids: AttnIds,
        q_in: NodeId,
        kv_in: NodeId,
        mask: &AttentionMask,
        allow_empty: bool,
    ) -> Result<NodeId> {
        let q = tape.matmul(q_in, ids.wq);
        let k = tape.matmul(kv_in, ids.wk);
        let v = tape.matmul(kv_in, ids.wv);
        let hw = self.config.head_width();
        let scale = 1.0 / (hw as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * hw, hw);
            let kh = tape.slice_cols(k, h * hw, hw);
            let vh = tape.slice_cols(v, h * hw, hw);
            let e = tape.matmul_bt(qh, kh);
            let e = tape.scale(e, scale);
            let a = tape.masked_softmax(e, mask, allow_empty)?;
            heads.push(tape.matmul(a, vh));
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        Ok(tape.matmul(cat, ids.wo))
    }

    fn feed_forward(tape: &mut Tape<'_>, ids: FfIds, x: NodeId) -> NodeId {
        let h = tape.matmul(x, ids.w1);
        let h = tape.add_row(h, ids.b1);
        let h = tape.relu(h);
        let h = tape.matmul(h, ids.w2);
        tape.add_row(h, ids.b2)
    }

    /// Encoder over arbitrary rows; `positions[i]` is the sentence position
    /// of row `i`. Rows with an empty mask row are computed but meaningless.
    fn encoder_graph<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        tokens: &[TokenId],
        positions: &[usize],
        mask: &AttentionMask,
        allow_empty: bool,
    ) -> Result<NodeId> {
        let mut x = self.embed(tape, self.layout.src_emb, tokens, positions);
        for layer in &self.layout.enc {
            let h = Self::layer_norm(tape, x, layer.ln1);
            let a = self.multi_head(tape, layer.attn, h, h, mask, allow_empty)?;
            x = tape.add(x, a);
            let h = Self::layer_norm(tape, x, layer.ln2);
            let f = Self::feed_forward(tape, layer.ff, h);
            x = tape.add(x, f);
        }
        Ok(Self::layer_norm(tape, x, self.layout.enc_ln))
    }

    /// Decoder logits for every input row. `memory` is the stacked source
    /// context with the per-row cross mask; rows whose cross mask is empty
    /// receive no source context.
    fn decoder_graph<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        tgt_in: &[TokenId],
        memory: Option<(NodeId, &AttentionMask)>,
    ) -> Result<NodeId> {
        let positions: Vec<usize> = (0..tgt_in.len()).collect();
        let mut x = self.embed(tape, self.layout.tgt_emb, tgt_in, &positions);
        let causal = AttentionMask::causal(tgt_in.len());
        for layer in &self.layout.dec {
            let h = Self::layer_norm(tape, x, layer.ln1);
            let a = self.multi_head(tape, layer.self_attn, h, h, &causal, false)?;
            x = tape.add(x, a);
            if let Some((mem, cross_mask)) = memory {
                let h = Self::layer_norm(tape, x, layer.ln2);
                let c = self.multi_head(tape, layer.cross, h, mem, cross_mask, true)?;
                x = tape.add(x, c);
            }
            let h = Self::layer_norm(tape, x, layer.ln3);
            let f = Self::feed_forward(tape, layer.ff, h);
            x = tape.add(x, f);
        }
        let h = Self::layer_norm(tape, x, self.layout.dec_ln);
        let logits = tape.matmul(h, self.layout.out_w);
        Ok(tape.add_row(logits, self.layout.out_b))
    }

    /// Standard encoder over the whole input (every position sees every other).
    pub fn encode(&self, src: &[TokenId]) -> Result<Matrix> {
        if src.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        self.check_tokens(src, self.config.src_vocab)?;
        let mut tape = self.bind();
        let positions: Vec<usize> = (0..src.len()).collect();
        let mask = AttentionMask::full(src.len(), src.len());
        let out = self.encoder_graph(&mut tape, src, &positions, &mask, false)?;
        Ok(tape.value(out).clone())
    }

    /// Hidden states `z^(t)` for positions `1..=g_t`, computed over the whole
    /// sentence under the step-`t` mask.
    pub fn encode_prefix(&self, src: &[TokenId], g_t: usize, mode: EncoderMode) -> Result<Matrix> {
        if g_t == 0 || g_t > src.len() {
            return Err(Error::PrefixOutOfRange {
                g: g_t,
                len: src.len(),
            });
        }
        self.check_tokens(src, self.config.src_vocab)?;
        let n = src.len();
        let (mask, allow_empty) = match mode {
            EncoderMode::PrefixBidirectional => (AttentionMask::prefix(n, g_t), true),
            EncoderMode::Unidirectional => (AttentionMask::causal(n), false),
        };
        let mut tape = self.bind();
        let positions: Vec<usize> = (0..n).collect();
        let out = self.encoder_graph(&mut tape, src, &positions, &mask, allow_empty)?;
        Ok(tape.value(out).slice_rows(0, g_t))
    }

    /// Next-token distribution `p(y_t | x_{<=g(t)}, y_{<t})`.
    /// `tgt_prefix` starts with `<bos>`.
    pub fn decoder_step(&self, src: SourceContext<'_>, tgt_prefix: &[TokenId]) -> Result<Vec<f64>> {
        if tgt_prefix.first() != Some(&BOS) {
            return Err(Error::Dimension("target prefix must start with <bos>".into()));
        }
        self.check_tokens(tgt_prefix, self.config.tgt_vocab)?;
        let mut tape = self.bind();
        let rows = tgt_prefix.len();
        let cross;
        let memory = match src {
            SourceContext::States(states) => {
                if states.cols() != self.config.width {
                    return Err(Error::Dimension(format!(
                        "source states have width {}, model width is {}",
                        states.cols(),
                        self.config.width
                    )));
                }
                if states.rows() == 0 {
                    return Err(Error::NoSourceContext { step: rows });
                }
                cross = AttentionMask::full(rows, states.rows());
                Some((tape.constant_ref(states), &cross))
            }
            SourceContext::ZeroSource => None,
        };
        let logits = self.decoder_graph(&mut tape, tgt_prefix, memory)?;
        let last = tape.value(logits).row(rows - 1);
        let max = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = last.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / z).collect())
    }

    /// Teacher-forced negative log-likelihood of `tgt` (plus the final
    /// `<eos>`) under `schedule`, built as one graph: every distinct source
    /// prefix is encoded once and target step `t` attends to the block for
    /// `g(t)`. Returns the loss node and the number of predicted tokens.
    pub(crate) fn pair_loss_graph<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        src: &[TokenId],
        tgt: &[TokenId],
        schedule: &PolicySchedule,
    ) -> Result<(NodeId, usize)> {
        if src.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        self.check_tokens(src, self.config.src_vocab)?;
        self.check_tokens(tgt, self.config.tgt_vocab)?;
        let steps = tgt.len() + 1;
        let mut tgt_in = Vec::with_capacity(steps);
        tgt_in.push(BOS);
        tgt_in.extend_from_slice(tgt);
        self.check_tokens(&tgt_in, self.config.tgt_vocab)?;
        let targets: Vec<usize> = tgt
            .iter()
            .chain(std::iter::once(&EOS))
            .map(|&t| t as usize)
            .collect();
        let g = schedule.g_values(src.len(), steps);

        let memory = if schedule.is_zero_source() {
            None
        } else {
            if let Some(t) = g.iter().position(|&v| v == 0) {
                return Err(Error::NoSourceContext { step: t + 1 });
            }
            Some(self.stacked_prefixes(tape, src, &g)?)
        };
        let logits = match &memory {
            Some((mem, mask)) => self.decoder_graph(tape, &tgt_in, Some((*mem, mask)))?,
            None => self.decoder_graph(tape, &tgt_in, None)?,
        };
        Ok((tape.cross_entropy(logits, &targets), steps))
    }

    /// Encodes the prefixes required by `g` and returns the memory node with
    /// the cross-attention mask selecting, for row `t`, the states of prefix
    /// `g[t]`.
    fn stacked_prefixes<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        src: &[TokenId],
        g: &[usize],
    ) -> Result<(NodeId, AttentionMask)> {
        match self.config.encoder_mode {
            EncoderMode::Unidirectional => {
                let max_g = *g.iter().max().expect("non-empty schedule");
                let positions: Vec<usize> = (0..max_g).collect();
                let mask = AttentionMask::causal(max_g);
                let mem = self.encoder_graph(tape, &src[..max_g], &positions, &mask, false)?;
                let cross = AttentionMask::from_fn(g.len(), max_g, |t, j| j < g[t]);
                Ok((mem, cross))
            }
            EncoderMode::PrefixBidirectional => {
                let mut lens: Vec<usize> = g.to_vec();
                lens.dedup();
                let mut offsets = Vec::with_capacity(lens.len());
                let mut tokens = Vec::new();
                let mut positions = Vec::new();
                let mut block_of_row = Vec::new();
                for (b, &p) in lens.iter().enumerate() {
                    offsets.push(tokens.len());
                    tokens.extend_from_slice(&src[..p]);
                    positions.extend(0..p);
                    block_of_row.extend(std::iter::repeat(b).take(p));
                }
                let total = tokens.len();
                let mask =
                    AttentionMask::from_fn(total, total, |i, j| block_of_row[i] == block_of_row[j]);
                let mem = self.encoder_graph(tape, &tokens, &positions, &mask, false)?;
                let block_for = |len: usize| lens.iter().position(|&p| p == len).expect("present");
                let cross = AttentionMask::from_fn(g.len(), total, |t, j| {
                    let b = block_for(g[t]);
                    j >= offsets[b] && j < offsets[b] + g[t]
                });
                Ok((mem, cross))
            }
        }
    }

    /// `log p_g(y | x)`, summed over target tokens and the final `<eos>`.
    pub fn sequence_log_prob(
        &self,
        src: &[TokenId],
        tgt: &[TokenId],
        schedule: &PolicySchedule,
    ) -> Result<f64> {
        let mut tape = self.bind();
        let (loss, _) = self.pair_loss_graph(&mut tape, src, tgt, schedule)?;
        Ok(-tape.value(loss).get(0, 0))
    }

    /// Loss and its gradient, accumulated into `grads`. Returns
    /// `(nll, predicted tokens)`.
    pub(crate) fn loss_and_grad(
        &self,
        src: &[TokenId],
        tgt: &[TokenId],
        schedule: &PolicySchedule,
        grads: &mut [Matrix],
        weight: f64,
    ) -> Result<(f64, usize)> {
        let mut tape = self.bind();
        let (loss, steps) = self.pair_loss_graph(&mut tape, src, tgt, schedule)?;
        let value = tape.value(loss).get(0, 0);
        let root = tape.scale(loss, weight);
        tape.backward(root, grads);
        Ok((value, steps))
    }

    pub(crate) fn loss(
        &self,
        src: &[TokenId],
        tgt: &[TokenId],
        schedule: &PolicySchedule,
    ) -> Result<f64> {
        Ok(-self.sequence_log_prob(src, tgt, schedule)?)
    }
}

/// Single-head scaled dot-product attention restricted to `allowed`.
/// Row `i` of the output is `sum_j a_ij v_j` with
/// `a_ij = softmax_j(q_i . k_j / sqrt(d))` over allowed `j`.
pub fn attention(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    allowed: &AttentionMask,
) -> Result<Matrix> {
    Ok(matmul(&attention_weights(queries, keys, allowed)?, check_values(keys, values)?))
}

fn check_values<'v>(keys: &Matrix, values: &'v Matrix) -> Result<&'v Matrix> {
    if keys.rows() != values.rows() {
        return Err(Error::Dimension(format!(
            "{} keys but {} values",
            keys.rows(),
            values.rows()
        )));
    }
    Ok(values)
}

/// The attention weights used by [`attention`].
pub fn attention_weights(queries: &Matrix, keys: &Matrix, allowed: &AttentionMask) -> Result<Matrix> {
    if queries.cols() != keys.cols() {
        return Err(Error::Dimension(format!(
            "query width {} vs key width {}",
            queries.cols(),
            keys.cols()
        )));
    }
    let mut e = crate::matrix::matmul_bt(queries, keys);
    e.scale_in_place(1.0 / (queries.cols() as f64).sqrt());
    masked_softmax(&e, allowed, false)
}

#[cfg(test)]
mod tests;
