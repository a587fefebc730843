//! Simultaneous decoding under a fixed schedule.
//!
//! Target words before the cutoff step are chosen greedily from
//! `p(y_t | x_{<=g(t)}, y_{<t})`. Once the whole source is available the
//! remaining tail is found by beam search and the completed tail with the
//! highest length-normalized log probability wins; the greedy tail is always
//! among the candidates.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::eval::corpus_bleu;
use crate::latency::DecodingTrace;
use crate::matrix::Matrix;
use crate::model::{Checkpoint, EncoderMode, ModelParams, SourceContext, TokenId};
use crate::policy::PolicySchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub schedule: PolicySchedule,
    /// Tail beam width, at least 1.
    pub beam: usize,
    /// Maximum number of target words; `None` means `2 * |src| + 8`.
    pub max_len: Option<usize>,
    /// The model was trained under a different schedule. Prefixes are then
    /// always encoded from scratch with the full (unmasked) encoder.
    pub test_time: bool,
}

impl DecodeConfig {
    pub fn new(schedule: PolicySchedule) -> Self {
        Self {
            schedule,
            beam: 1,
            max_len: None,
            test_time: false,
        }
    }

    pub fn with_beam(mut self, beam: usize) -> Self {
        self.beam = beam;
        self
    }

    pub fn test_time(mut self, on: bool) -> Self {
        self.test_time = on;
        self
    }
}

/// A partial or completed target sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// `<eos>` not yet emitted.
    pub alive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Target words without `<bos>`/`<eos>`.
    pub tokens: Vec<TokenId>,
    /// `g(t)` for each emitted word. An empty translation records the step
    /// that emitted `<eos>`.
    pub trace: DecodingTrace,
    /// Log probability of the words and, unless truncated, the final `<eos>`.
    pub log_prob: f64,
    /// Length-normalized log probability of the tail (0 when there is none).
    pub tail_score: f64,
    /// The length limit was reached before `<eos>`.
    pub truncated: bool,
}

/// Source encodings for each prefix length, computed on first use.
struct SourceCache<'a> {
    params: &'a ModelParams,
    src: &'a [TokenId],
    scratch: bool,
    full_pass: Option<Matrix>,
    prefixes: HashMap<usize, Matrix>,
}

impl<'a> SourceCache<'a> {
    fn new(params: &'a ModelParams, src: &'a [TokenId], test_time: bool) -> Self {
        let scratch = test_time || params.config().encoder_mode == EncoderMode::PrefixBidirectional;
        Self {
            params,
            src,
            scratch,
            full_pass: None,
            prefixes: HashMap::new(),
        }
    }

    fn states(&mut self, g: usize) -> Result<&Matrix> {
        if !self.prefixes.contains_key(&g) {
            let m = if self.scratch {
                self.params.encode(&self.src[..g])?
            } else {
                if self.full_pass.is_none() {
                    let n = self.src.len();
                    self.full_pass = Some(self.params.encode_prefix(self.src, n, EncoderMode::Unidirectional)?);
                }
                self.full_pass.as_ref().expect("computed").slice_rows(0, g)
            };
            self.prefixes.insert(g, m);
        }
        Ok(&self.prefixes[&g])
    }
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `n` largest entries, ties toward the smaller index.
fn top_n(probs: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

fn step_probs(
    params: &ModelParams,
    cache: &mut SourceCache<'_>,
    zero_source: bool,
    g: usize,
    step: usize,
    prefix: &[TokenId],
) -> Result<Vec<f64>> {
    if zero_source {
        return params.decoder_step(SourceContext::ZeroSource, prefix);
    }
    if g == 0 {
        return Err(Error::NoSourceContext { step });
    }
    let states = cache.states(g)?;
    params.decoder_step(SourceContext::States(states), prefix)
}

pub fn decode(params: &ModelParams, src: &[TokenId], config: &DecodeConfig) -> Result<DecodeOutput> {
    if src.is_empty() {
        return Err(Error::Empty("source sentence"));
    }
    if config.beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if let Some(&id) = src.iter().find(|&&t| t as usize >= params.config().src_vocab) {
        return Err(Error::TokenOutOfVocab {
            id,
            size: params.config().src_vocab,
        });
    }
    let n = src.len();
    // the decoder input is <bos> plus the words, within the model's positions
    let max_words = config
        .max_len
        .unwrap_or(2 * n + 8)
        .min(params.config().max_len - 1);
    let zero_source = config.schedule.is_zero_source();
    let g = config.schedule.g_values(n, max_words + 1);
    let mut cache = SourceCache::new(params, src, config.test_time);

    let mut prefix = vec![BOS];
    let mut log_prob = 0.0;
    // greedy until the whole source is available
    let mut t = 1;
    while t <= max_words + 1 && (zero_source || g[t - 1] < n) {
        let probs = step_probs(params, &mut cache, zero_source, g[t - 1], t, &prefix)?;
        let y = argmax(&probs);
        if y as TokenId == EOS {
            return finish(n, &g, prefix, log_prob + probs[y].ln(), 0.0, false);
        }
        if t > max_words {
            return finish(n, &g, prefix, log_prob, 0.0, true);
        }
        log_prob += probs[y].ln();
        prefix.push(y as TokenId);
        t += 1;
    }

    let start = Hypothesis {
        tokens: prefix,
        log_prob,
        alive: true,
    };
    let states = cache.states(n)?.clone();
    let ctx = SourceContext::States(&states);
    let head_len = start.tokens.len();
    let tail_len = |h: &Hypothesis| (h.tokens.len() - head_len + usize::from(!h.alive)) as f64;
    let norm = |h: &Hypothesis| (h.log_prob - start.log_prob) / tail_len(h).max(1.0);

    let greedy = tail_search(params, ctx, &start, 1, max_words)?;
    let mut best = greedy.into_iter().next().expect("greedy tail");
    if config.beam > 1 {
        for h in tail_search(params, ctx, &start, config.beam, max_words)? {
            if norm(&h) > norm(&best) {
                best = h;
            }
        }
    }
    let score = norm(&best);
    let truncated = best.alive;
    finish(n, &g, best.tokens, best.log_prob, score, truncated)
}

/// Beam search from `start` over full-source continuations. Returns the
/// completed hypotheses, or the ones stopped by the length limit if none
/// completes.
fn tail_search(
    params: &ModelParams,
    ctx: SourceContext<'_>,
    start: &Hypothesis,
    width: usize,
    max_words: usize,
) -> Result<Vec<Hypothesis>> {
    let words = |h: &Hypothesis| h.tokens.len() - 1;
    let mut alive = vec![start.clone()];
    let mut done = Vec::new();
    let mut capped = Vec::new();
    while !alive.is_empty() && done.len() < width {
        // (rank score, hypothesis, stopped by the length limit)
        let mut cands: Vec<(f64, Hypothesis, bool)> = Vec::new();
        for h in &alive {
            let probs = params.decoder_step(ctx, &h.tokens)?;
            for y in top_n(&probs, width) {
                let score = h.log_prob + probs[y].ln();
                if y as TokenId == EOS {
                    let mut f = h.clone();
                    f.log_prob = score;
                    f.alive = false;
                    cands.push((score, f, false));
                } else if words(h) >= max_words {
                    cands.push((score, h.clone(), true));
                } else {
                    let mut e = h.clone();
                    e.tokens.push(y as TokenId);
                    e.log_prob = score;
                    cands.push((score, e, false));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        cands.truncate(width);
        alive.clear();
        for (_, h, stopped) in cands {
            if stopped {
                capped.push(h);
            } else if h.alive {
                alive.push(h);
            } else {
                done.push(h);
            }
        }
    }
    Ok(if done.is_empty() { capped } else { done })
}

fn finish(
    n: usize,
    g: &[usize],
    prefix: Vec<TokenId>,
    log_prob: f64,
    tail_score: f64,
    truncated: bool,
) -> Result<DecodeOutput> {
    let tokens = prefix[1..].to_vec();
    let steps = tokens.len().max(1);
    let trace = DecodingTrace::new(n, g[..steps].to_vec())?;
    Ok(DecodeOutput {
        tokens,
        trace,
        log_prob,
        tail_score,
        truncated,
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Decodes every sentence; `jobs` worker threads, output order = input order.
pub fn decode_corpus(
    params: &ModelParams,
    sources: &[Vec<TokenId>],
    config: &DecodeConfig,
    jobs: usize,
) -> Result<Vec<DecodeOutput>> {
    pool(jobs)?.install(|| {
        sources
            .par_iter()
            .map(|s| decode(params, s, config))
            .collect()
    })
}

/// One cell of a train-schedule by test-schedule table.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixCell {
    pub train: PolicySchedule,
    pub test: PolicySchedule,
    /// Decoded with a schedule other than the training one.
    pub test_time: bool,
    pub bleu: f64,
}

/// Decodes `sources` with every model under every test schedule and scores
/// against `references` (one or more per sentence).
pub fn decode_matrix(
    models: &[&Checkpoint],
    test: &[PolicySchedule],
    sources: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    beam: usize,
    jobs: usize,
) -> Result<Vec<MatrixCell>> {
    let first = models.first().ok_or(Error::Empty("model set"))?;
    for m in models {
        if m.src_vocab != first.src_vocab || m.tgt_vocab != first.tgt_vocab {
            return Err(Error::VocabMismatch(format!(
                "models trained with {} and {} use different vocabularies",
                first.train_policy, m.train_policy
            )));
        }
    }
    let encoded: Vec<Vec<TokenId>> = sources.iter().map(|s| first.src_vocab.encode(s)).collect();
    let mut cells = Vec::with_capacity(models.len() * test.len());
    for m in models {
        for &schedule in test {
            let test_time = m.train_policy != schedule;
            let config = DecodeConfig::new(schedule).with_beam(beam).test_time(test_time);
            let outs = decode_corpus(&m.params, &encoded, &config, jobs)?;
            let hyps: Vec<Vec<String>> = outs.iter().map(|o| m.tgt_vocab.decode(&o.tokens)).collect();
            cells.push(MatrixCell {
                train: m.train_policy,
                test: schedule,
                test_time,
                bleu: corpus_bleu(&hyps, references)?,
            });
        }
    }
    Ok(cells)
}
