//! End-to-end experiment on the synthetic grammar: generate data, train
//! one model per training schedule, then decode the dev set with every
//! genuine schedule and with the full-sentence model under each wait-k
//! schedule (test-time wait-k).

use std::fs;
use std::path::Path;

use crate::data::{generate_corpus, io, AlignmentLink, SyntheticGrammar, Vocab};
use crate::decoding::{decode_corpus, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::{score_row, SweepData, SweepResult, SweepRow};
use crate::latency::DecodingTrace;
use crate::model::{save_checkpoint, Checkpoint, ModelConfig, TokenId};
use crate::policy::PolicySchedule;
use crate::training::{train, write_loss_history, EncodedPair, Optimizer, TrainConfig};

/// Thresholds for the qualitative claims checked on the results.
#[derive(Debug, Clone, PartialEq)]
pub struct Margins {
    /// Required genuine-minus-test-time verb accuracy at the smallest k.
    pub min_verb_gap: f64,
    /// Largest tolerated BLEU decrease between consecutive genuine rows
    /// (at most one such inversion).
    pub bleu_inversion: f64,
    /// Allowed BLEU distance from the full-sentence model at the largest k.
    pub full_sentence_tolerance: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            min_verb_gap: 0.20,
            bleu_inversion: 0.01,
            full_sentence_tolerance: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub grammar: SyntheticGrammar,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    /// Wait-k training schedules; a full-sentence model is always trained.
    pub ks: Vec<u32>,
    /// Model shape; vocabulary sizes are filled in from the data.
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub clip: Option<f64>,
    pub seed: u64,
    pub beam: usize,
    pub jobs: usize,
    pub margins: Margins,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grammar: SyntheticGrammar::sov_to_svo(2024),
            train_pairs: 8000,
            dev_pairs: 1000,
            ks: vec![1, 3, 5, 7, 9],
            model: ModelConfig::desk(0, 0),
            epochs: 4,
            batch_size: 32,
            learning_rate: 2e-3,
            optimizer: Optimizer::adam(),
            clip: Some(5.0),
            seed: 7,
            beam: 4,
            jobs: 1,
            margins: Margins::default(),
        }
    }
}

/// Decoded dev output for one (training, test) schedule pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedSet {
    pub train: PolicySchedule,
    pub test: PolicySchedule,
    pub hypotheses: Vec<Vec<String>>,
    pub traces: Vec<DecodingTrace>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub models: Vec<Checkpoint>,
    pub histories: Vec<(PolicySchedule, Vec<f64>)>,
    pub decoded: Vec<DecodedSet>,
    pub sweep: SweepResult,
    pub dev_sources: Vec<Vec<String>>,
    pub dev_references: Vec<Vec<String>>,
    pub dev_alignments: Vec<Vec<AlignmentLink>>,
}

fn file_label(p: &PolicySchedule) -> String {
    p.to_string().replace('/', "_")
}

pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentResult> {
    if config.train_pairs == 0 || config.dev_pairs == 0 {
        return Err(Error::Config("train and dev sets must be non-empty".into()));
    }
    let corpus = generate_corpus(&config.grammar, config.train_pairs + config.dev_pairs)?;
    let (train_set, dev_set) = corpus.pairs.split_at(config.train_pairs);
    let train_src: Vec<Vec<String>> = train_set.iter().map(|p| p.src.clone()).collect();
    let train_tgt: Vec<Vec<String>> = train_set.iter().map(|p| p.tgt.clone()).collect();
    let src_vocab = Vocab::build(&train_src);
    let tgt_vocab = Vocab::build(&train_tgt);
    let encoded: Vec<EncodedPair> = train_src
        .iter()
        .zip(&train_tgt)
        .map(|(s, t)| EncodedPair::new(src_vocab.encode(s), tgt_vocab.encode(t)))
        .collect();

    let mut model = config.model.clone();
    model.src_vocab = src_vocab.len();
    model.tgt_vocab = tgt_vocab.len();

    let mut schedules: Vec<PolicySchedule> = config.ks.iter().map(|&k| PolicySchedule::wait_k(k)).collect();
    schedules.push(PolicySchedule::full_sentence());

    let mut models = Vec::with_capacity(schedules.len());
    let mut histories = Vec::with_capacity(schedules.len());
    for &schedule in &schedules {
        let mut tc = TrainConfig::new(schedule, model.clone());
        tc.epochs = config.epochs;
        tc.batch_size = config.batch_size;
        tc.learning_rate = config.learning_rate;
        tc.optimizer = config.optimizer;
        tc.clip = config.clip;
        tc.seed = config.seed;
        let out = train(&encoded, &tc, None)?;
        histories.push((schedule, out.history));
        models.push(Checkpoint {
            params: out.params,
            train_policy: schedule,
            src_vocab: src_vocab.clone(),
            tgt_vocab: tgt_vocab.clone(),
        });
    }

    let dev_sources: Vec<Vec<String>> = dev_set.iter().map(|p| p.src.clone()).collect();
    let dev_references: Vec<Vec<String>> = dev_set.iter().map(|p| p.tgt.clone()).collect();
    let dev_alignments: Vec<Vec<AlignmentLink>> = dev_set.iter().map(|p| p.alignment.clone()).collect();
    let dev_encoded: Vec<Vec<TokenId>> = dev_sources.iter().map(|s| src_vocab.encode(s)).collect();
    let data = SweepData {
        sources: &dev_sources,
        references: &dev_references,
        alignments: Some(&dev_alignments),
    };

    // genuine rows, then the full-sentence model under every schedule
    let full = models.last().expect("full-sentence model");
    let mut jobs: Vec<(&Checkpoint, PolicySchedule)> = models.iter().map(|m| (m, m.train_policy)).collect();
    jobs.pop();
    jobs.extend(schedules.iter().map(|&s| (full, s)));

    let mut decoded = Vec::with_capacity(jobs.len());
    let mut rows: Vec<SweepRow> = Vec::with_capacity(jobs.len());
    for (m, test) in jobs {
        let dc = DecodeConfig::new(test)
            .with_beam(config.beam)
            .test_time(m.train_policy != test);
        let outs = decode_corpus(&m.params, &dev_encoded, &dc, config.jobs)?;
        let hypotheses: Vec<Vec<String>> = outs.iter().map(|o| tgt_vocab.decode(&o.tokens)).collect();
        let traces: Vec<DecodingTrace> = outs.into_iter().map(|o| o.trace).collect();
        rows.push(score_row(m.train_policy, test, &hypotheses, &traces, &data)?);
        decoded.push(DecodedSet {
            train: m.train_policy,
            test,
            hypotheses,
            traces,
        });
    }

    let result = ExperimentResult {
        models,
        histories,
        decoded,
        sweep: SweepResult { rows },
        dev_sources,
        dev_references,
        dev_alignments,
    };
    if let Some(dir) = out_dir {
        result.write(dir)?;
    }
    Ok(result)
}

impl ExperimentResult {
    /// Writes checkpoints, loss histories, dev data, hypotheses, traces and
    /// the two CSV summaries under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        io::write_sentences(dir.join("dev.src"), &self.dev_sources)?;
        io::write_sentences(dir.join("dev.ref"), &self.dev_references)?;
        io::write_alignments(dir.join("dev.align"), &self.dev_alignments)?;
        for m in &self.models {
            save_checkpoint(dir.join(format!("model_{}.ckpt", file_label(&m.train_policy))), m)?;
        }
        for (s, h) in &self.histories {
            write_loss_history(dir.join(format!("loss_{}.csv", file_label(s))), h)?;
        }
        for d in &self.decoded {
            let tag = format!("{}_train{}", file_label(&d.test), file_label(&d.train));
            io::write_sentences(dir.join(format!("hyp_{tag}.txt")), &d.hypotheses)?;
            io::write_traces(dir.join(format!("trace_{tag}.txt")), &d.traces)?;
        }
        self.sweep.write_csv(dir.join("sweep.csv"))?;
        self.sweep.write_anticipation_csv(dir.join("anticipation.csv"))?;
        Ok(())
    }

    /// Genuine wait-k row.
    pub fn genuine(&self, k: u32) -> Option<&SweepRow> {
        let s = PolicySchedule::wait_k(k);
        self.sweep.find(&s, &s)
    }

    /// Full-sentence model decoded with wait-k.
    pub fn test_time(&self, k: u32) -> Option<&SweepRow> {
        self.sweep.find(&PolicySchedule::full_sentence(), &PolicySchedule::wait_k(k))
    }

    pub fn full_sentence(&self) -> Option<&SweepRow> {
        let f = PolicySchedule::full_sentence();
        self.sweep.find(&f, &f)
    }

    /// (verb accuracy gap, BLEU gap) between genuine and test-time wait-k.
    pub fn gaps(&self, k: u32) -> Option<(f64, f64)> {
        let g = self.genuine(k)?;
        let t = self.test_time(k)?;
        Some((g.verb_accuracy? - t.verb_accuracy?, g.bleu - t.bleu))
    }
}
