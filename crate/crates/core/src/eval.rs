//! BLEU, alignment-based anticipation statistics and quality/latency sweeps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{AlignmentLink, Role};
use crate::decoding::{decode_corpus, DecodeConfig};
use crate::error::{Error, Result};
use crate::latency::{corpus_latency, stable_mean, DecodingTrace, RatioMode};
use crate::model::{Checkpoint, TokenId};
use crate::policy::PolicySchedule;

const MAX_ORDER: usize = 4;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Matched (clipped) and total n-gram counts for orders 1..=4, and the
/// reference length closest to the hypothesis length (shorter on ties).
fn sentence_stats<S: AsRef<str>>(hyp: &[S], refs: &[Vec<S>]) -> ([usize; MAX_ORDER], [usize; MAX_ORDER], usize) {
    let mut matched = [0; MAX_ORDER];
    let mut total = [0; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        matched[n - 1] = h
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        total[n - 1] = hyp.len().saturating_sub(n - 1);
    }
    let closest = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
        .unwrap_or(0);
    (matched, total, closest)
}

fn check_refs<S>(hyps: &[Vec<S>], refs: &[Vec<Vec<S>>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Empty("hypothesis set"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Dimension(format!(
            "{} hypotheses but {} reference sets",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.iter().any(Vec::is_empty) {
        return Err(Error::Empty("reference set"));
    }
    Ok(())
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Corpus BLEU-4 in `[0, 1]`: geometric mean of clipped n-gram precisions
/// pooled over the corpus, times the brevity penalty. `refs[i]` holds every
/// reference for sentence `i`.
pub fn corpus_bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<Vec<S>>]) -> Result<f64> {
    check_refs(hyps, refs)?;
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let (m, t, c) = sentence_stats(h, r);
        for n in 0..MAX_ORDER {
            matched[n] += m[n];
            total[n] += t[n];
        }
        hyp_len += h.len();
        ref_len += c;
    }
    if matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_ORDER)
        .map(|n| (matched[n] as f64 / total[n] as f64).ln())
        .sum::<f64>()
        / MAX_ORDER as f64;
    Ok(brevity_penalty(hyp_len, ref_len) * log_p.exp())
}

/// Sentence BLEU-4 with add-one smoothing of the 2..4-gram precisions.
pub fn sentence_bleu<S: AsRef<str>>(hyp: &[S], refs: &[Vec<S>]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    let (m, t, c) = sentence_stats(hyp, refs);
    if m[0] == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_ORDER)
        .map(|n| {
            if n == 0 {
                (m[0] as f64 / t[0] as f64).ln()
            } else {
                ((m[n] + 1) as f64 / (t[n] + 1) as f64).ln()
            }
        })
        .sum::<f64>()
        / MAX_ORDER as f64;
    Ok(brevity_penalty(hyp.len(), c) * log_p.exp())
}

/// Alignment-based anticipation statistics.
///
/// Hypothesis word `j` is compared with reference word `j`; if the gold
/// alignment links reference position `j` to source position `i`, the
/// hypothesis word counts as anticipated when it was emitted with
/// `g(j) < i`, i.e. before its source counterpart was read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnticipationReport {
    /// Fraction of sentences with at least one anticipated word.
    pub sentence_rate: f64,
    /// Fraction of aligned emitted words that were anticipated.
    pub word_rate: f64,
    /// Fraction of anticipated words equal to the reference word; `None`
    /// when nothing was anticipated.
    pub word_accuracy: Option<f64>,
    pub anticipated_words: usize,
    pub aligned_words: usize,
}

fn check_parallel(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{a} hypotheses but {b} {what}")));
    }
    Ok(())
}

pub fn anticipation_report<S: AsRef<str>>(
    traces: &[DecodingTrace],
    hyps: &[Vec<S>],
    refs: &[Vec<S>],
    alignments: &[Vec<AlignmentLink>],
) -> Result<AnticipationReport> {
    if hyps.is_empty() {
        return Err(Error::Empty("hypothesis set"));
    }
    check_parallel("traces", hyps.len(), traces.len())?;
    check_parallel("references", hyps.len(), refs.len())?;
    check_parallel("alignments", hyps.len(), alignments.len())?;
    let mut sentences = 0;
    let mut aligned = 0;
    let mut anticipated = 0;
    let mut correct = 0;
    for (((trace, hyp), reference), links) in traces.iter().zip(hyps).zip(refs).zip(alignments) {
        if links.is_empty() && !reference.is_empty() {
            return Err(Error::Empty("alignment"));
        }
        let mut any = false;
        for l in links {
            if l.tgt == 0 || l.tgt > reference.len() {
                return Err(Error::Dimension(format!(
                    "alignment target index {} outside reference of length {}",
                    l.tgt,
                    reference.len()
                )));
            }
            if l.tgt > hyp.len() || l.tgt > trace.tgt_len() {
                continue;
            }
            aligned += 1;
            if trace.g_values[l.tgt - 1] < l.src {
                anticipated += 1;
                any = true;
                if hyp[l.tgt - 1].as_ref() == reference[l.tgt - 1].as_ref() {
                    correct += 1;
                }
            }
        }
        sentences += usize::from(any);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(AnticipationReport {
        sentence_rate: ratio(sentences, hyps.len()),
        word_rate: ratio(anticipated, aligned),
        word_accuracy: (anticipated > 0).then(|| ratio(correct, anticipated)),
        anticipated_words: anticipated,
        aligned_words: aligned,
    })
}

/// Fraction of sentences whose hypothesis reproduces the reference word
/// realizing the head of `role`.
pub fn role_accuracy<S: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<S>],
    alignments: &[Vec<AlignmentLink>],
    role: Role,
) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Empty("hypothesis set"));
    }
    check_parallel("references", hyps.len(), refs.len())?;
    check_parallel("alignments", hyps.len(), alignments.len())?;
    let mut hits = 0;
    for ((h, r), links) in hyps.iter().zip(refs).zip(alignments) {
        let head = links
            .iter()
            .filter(|l| l.role == role)
            .min_by_key(|l| l.tgt)
            .ok_or(Error::Empty("alignment for role"))?;
        let j = head.tgt - 1;
        if j < h.len() && j < r.len() && h[j].as_ref() == r[j].as_ref() {
            hits += 1;
        }
    }
    Ok(hits as f64 / hyps.len() as f64)
}

/// Row label: the test schedule, qualified by the training schedule when
/// the two differ (`3/train=inf`).
pub fn sweep_label(train: &PolicySchedule, test: &PolicySchedule) -> String {
    if train == test {
        test.to_string()
    } else {
        format!("{test}/train={train}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub train: PolicySchedule,
    pub test: PolicySchedule,
    pub bleu: f64,
    pub al: f64,
    pub ap: f64,
    pub cw: f64,
    pub anticipation: Option<AnticipationReport>,
    /// Verb accuracy, when alignments are available.
    pub verb_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

/// Evaluation data for a sweep: sources, references and (optionally) gold
/// alignments of the first reference.
#[derive(Debug, Clone, Copy)]
pub struct SweepData<'a> {
    pub sources: &'a [Vec<String>],
    pub references: &'a [Vec<String>],
    pub alignments: Option<&'a [Vec<AlignmentLink>]>,
}

/// Scores already-decoded output against `data`.
pub fn score_row(
    train: PolicySchedule,
    test: PolicySchedule,
    hyps: &[Vec<String>],
    traces: &[DecodingTrace],
    data: &SweepData<'_>,
) -> Result<SweepRow> {
    let refs: Vec<Vec<Vec<String>>> = data.references.iter().map(|r| vec![r.clone()]).collect();
    let latency = corpus_latency(traces, RatioMode::PerSentence)?;
    let (anticipation, verb_accuracy) = match data.alignments {
        Some(a) => (
            Some(anticipation_report(traces, hyps, data.references, a)?),
            Some(role_accuracy(hyps, data.references, a, Role::Verb)?),
        ),
        None => (None, None),
    };
    Ok(SweepRow {
        label: sweep_label(&train, &test),
        train,
        test,
        bleu: corpus_bleu(hyps, &refs)?,
        al: latency.al,
        ap: latency.ap,
        cw: latency.cw,
        anticipation,
        verb_accuracy,
    })
}

/// One row per (model, test schedule): decode, then score BLEU and latency.
/// A model decoded with a schedule other than its training schedule runs in
/// test-time mode.
pub fn sweep(
    models: &[&Checkpoint],
    test: &[PolicySchedule],
    data: &SweepData<'_>,
    beam: usize,
    jobs: usize,
) -> Result<SweepResult> {
    let first = models.first().ok_or(Error::Empty("model set"))?;
    if models
        .iter()
        .any(|m| m.src_vocab != first.src_vocab || m.tgt_vocab != first.tgt_vocab)
    {
        return Err(Error::VocabMismatch("sweep models use different vocabularies".into()));
    }
    let encoded: Vec<Vec<TokenId>> = data.sources.iter().map(|s| first.src_vocab.encode(s)).collect();
    let mut rows = Vec::new();
    for m in models {
        for &schedule in test {
            let test_time = m.train_policy != schedule;
            let config = DecodeConfig::new(schedule).with_beam(beam).test_time(test_time);
            let outs = decode_corpus(&m.params, &encoded, &config, jobs)?;
            let hyps: Vec<Vec<String>> = outs.iter().map(|o| m.tgt_vocab.decode(&o.tokens)).collect();
            let traces: Vec<DecodingTrace> = outs.into_iter().map(|o| o.trace).collect();
            rows.push(score_row(m.train_policy, schedule, &hyps, &traces, data)?);
        }
    }
    Ok(SweepResult { rows })
}

impl SweepResult {
    /// `k,bleu,al,ap,cw`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,bleu,al,ap,cw\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{:.6}", r.label, r.bleu, r.al, r.ap, r.cw);
        }
        out
    }

    /// `k,sent_rate,word_rate,word_acc`, for rows with alignments. An
    /// undefined accuracy is left empty.
    pub fn anticipation_csv(&self) -> String {
        let mut out = String::from("k,sent_rate,word_rate,word_acc\n");
        for r in &self.rows {
            if let Some(a) = &r.anticipation {
                let acc = a.word_accuracy.map(|v| format!("{v:.6}")).unwrap_or_default();
                let _ = writeln!(out, "{},{:.6},{:.6},{acc}", r.label, a.sentence_rate, a.word_rate);
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn write_anticipation_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.anticipation_csv())?;
        Ok(())
    }

    pub fn find(&self, train: &PolicySchedule, test: &PolicySchedule) -> Option<&SweepRow> {
        self.rows.iter().find(|r| &r.train == train && &r.test == test)
    }
}

/// Mean sentence BLEU, a less pooled alternative to [`corpus_bleu`].
pub fn mean_sentence_bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<Vec<S>>]) -> Result<f64> {
    check_refs(hyps, refs)?;
    let scores = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| sentence_bleu(h, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(stable_mean(&scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn link(role: Role, src: usize, tgt: usize) -> AlignmentLink {
        AlignmentLink { role, src, tgt }
    }

    #[test]
    fn bleu_examples() {
        let h = vec![toks("a b c d")];
        let r = vec![vec![toks("a b c d e")]];
        let want = (1.0f64 - 5.0 / 4.0).exp();
        assert!((corpus_bleu(&h, &r).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.7788).abs() < 1e-4);

        let same = vec![toks("x y z w v"), toks("p q r s")];
        let refs: Vec<Vec<Vec<String>>> = same.iter().map(|s| vec![s.clone()]).collect();
        assert_eq!(corpus_bleu(&same, &refs).unwrap(), 1.0);

        let none = vec![toks("m n o p")];
        assert_eq!(corpus_bleu(&none, &[vec![toks("a b c d")]]).unwrap(), 0.0);
        assert!(corpus_bleu::<String>(&[], &[]).is_err());
        assert!(corpus_bleu(&none, &[]).is_err());
    }

    #[test]
    fn bleu_hand_computed_partial_match() {
        // hyp: the cat sat on mat ; ref: the cat sat on the mat
        // p1 = 5/5, p2 = 3/4, p3 = 2/3, p4 = 1/2, BP = exp(1 - 6/5)
        let h = vec![toks("the cat sat on mat")];
        let r = vec![vec![toks("the cat sat on the mat")]];
        let want = (1.0f64 - 6.0 / 5.0).exp() * (1.0 * 0.75 * (2.0 / 3.0) * 0.5f64).powf(0.25);
        assert!((corpus_bleu(&h, &r).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn multiple_references_clip_by_maximum() {
        let h = vec![toks("a a a a")];
        let one = vec![vec![toks("a b c d")]];
        let two = vec![vec![toks("a b c d"), toks("a a e f")]];
        // unigram clip rises from 1 to 2 with the second reference
        assert_eq!(corpus_bleu(&h, &one).unwrap(), 0.0);
        let s1 = sentence_bleu(&h[0], &one[0]).unwrap();
        let s2 = sentence_bleu(&h[0], &two[0]).unwrap();
        assert!(s2 > s1);
    }

    #[test]
    fn bleu_ignores_sentence_order() {
        let h = vec![toks("a b c d e"), toks("f g h"), toks("a c b d")];
        let r = vec![
            vec![toks("a b c d f")],
            vec![toks("f g h i")],
            vec![toks("a b c d")],
        ];
        let base = corpus_bleu(&h, &r).unwrap();
        let order = [2, 0, 1];
        let h2: Vec<_> = order.iter().map(|&i| h[i].clone()).collect();
        let r2: Vec<_> = order.iter().map(|&i| r[i].clone()).collect();
        assert_eq!(corpus_bleu(&h2, &r2).unwrap(), base);
    }

    #[test]
    fn sentence_bleu_is_smoothed() {
        let s = sentence_bleu(&toks("a b x"), &[toks("a b c")]).unwrap();
        // p1 = 2/3, p2 = (1+1)/(2+1), p3 = (0+1)/(1+1), p4 = (0+1)/(0+1)
        let want = (2.0f64 / 3.0 * 2.0 / 3.0 * 0.5 * 1.0).powf(0.25);
        assert!((s - want).abs() < 1e-12);
    }

    #[test]
    fn anticipation_counts() {
        // S V A O target, source S A O V (1-based src positions 1, 2, 3, 4)
        let links = vec![vec![
            link(Role::Subject, 1, 1),
            link(Role::Verb, 4, 2),
            link(Role::Adjunct, 2, 3),
            link(Role::Object, 3, 4),
        ]];
        let r = vec![toks("S V A O")];
        let wait1 = vec![DecodingTrace::new(4, vec![1, 2, 3, 4]).unwrap()];
        let rep = anticipation_report(&wait1, &r, &r, &links).unwrap();
        assert_eq!(rep.anticipated_words, 1);
        assert_eq!(rep.sentence_rate, 1.0);
        assert_eq!(rep.word_rate, 0.25);
        assert_eq!(rep.word_accuracy, Some(1.0));

        let wrong = vec![toks("S X A O")];
        let rep = anticipation_report(&wait1, &wrong, &r, &links).unwrap();
        assert_eq!(rep.word_accuracy, Some(0.0));

        let full = vec![DecodingTrace::new(4, vec![4; 4]).unwrap()];
        let rep = anticipation_report(&full, &r, &r, &links).unwrap();
        assert_eq!((rep.sentence_rate, rep.word_rate, rep.word_accuracy), (0.0, 0.0, None));

        let zero = vec![DecodingTrace::new(4, vec![0; 4]).unwrap()];
        let rep = anticipation_report(&zero, &r, &r, &links).unwrap();
        assert_eq!(rep.word_rate, 1.0);

        assert!(anticipation_report(&wait1, &r, &r, &[vec![]]).is_err());
        assert!(anticipation_report(&wait1, &r, &r, &[]).is_err());
    }

    #[test]
    fn verb_accuracy() {
        let links = vec![
            vec![link(Role::Subject, 1, 1), link(Role::Verb, 2, 2)],
            vec![link(Role::Subject, 1, 1), link(Role::Verb, 2, 2)],
        ];
        let refs = vec![toks("S V"), toks("S W")];
        let hyps = vec![toks("S V"), toks("S")];
        assert_eq!(role_accuracy(&hyps, &refs, &links, Role::Verb).unwrap(), 0.5);
    }

    #[test]
    fn sweep_csv_layout() {
        let w3 = PolicySchedule::wait_k(3);
        let full = PolicySchedule::full_sentence();
        assert_eq!(sweep_label(&w3, &w3), "3");
        assert_eq!(sweep_label(&full, &w3), "3/train=inf");
        let res = SweepResult {
            rows: vec![SweepRow {
                label: "3".into(),
                train: w3,
                test: w3,
                bleu: 0.5,
                al: 3.0,
                ap: 0.75,
                cw: 1.25,
                anticipation: Some(AnticipationReport {
                    sentence_rate: 0.5,
                    word_rate: 0.125,
                    word_accuracy: None,
                    anticipated_words: 0,
                    aligned_words: 8,
                }),
                verb_accuracy: None,
            }],
        };
        assert_eq!(res.to_csv(), "k,bleu,al,ap,cw\n3,0.500000,3.000000,0.750000,1.250000\n");
        assert_eq!(res.anticipation_csv(), "k,sent_rate,word_rate,word_acc\n3,0.500000,0.125000,\n");
    }
}
