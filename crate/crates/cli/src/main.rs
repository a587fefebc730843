use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use simulmt::data::{generate_corpus, io, SyntheticGrammar, Vocab};
use simulmt::decoding::{decode_corpus, DecodeConfig};
use simulmt::eval::{anticipation_report, corpus_bleu, role_accuracy, sweep, SweepData};
use simulmt::latency::{corpus_latency, RatioMode};
use simulmt::model::{load_checkpoint, save_checkpoint, Checkpoint, EncoderMode, ModelConfig};
use simulmt::policy::parse_ratio;
use simulmt::training::{
    standard_gradient_check, train, write_loss_history, EncodedPair, Optimizer, TrainConfig,
};
use simulmt::{Error, PolicySchedule};

const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "simulmt", version, about = "Simultaneous translation with wait-k policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus with gold alignments.
    GenData(GenData),
    /// Train a model under a wait-k or full-sentence schedule.
    Train(Train),
    /// Decode a source file simultaneously.
    Translate(Translate),
    /// Score hypotheses (BLEU, optionally latency and anticipation).
    Evaluate(Evaluate),
    /// Quality/latency table over models and test schedules.
    Sweep(Sweep),
    /// Latency metrics of a trace file.
    Latency(Latency),
    /// Gradient check on a tiny model.
    GradCheck(GradCheck),
}

/// `--k K`, `--full` and `--catchup C` select a schedule.
#[derive(Args)]
struct ScheduleArgs {
    /// Wait-k lag.
    #[arg(long, conflicts_with = "full")]
    k: Option<u32>,
    /// Full-sentence schedule.
    #[arg(long)]
    full: bool,
    /// Catchup rate for wait-k ("0.25" or "1/4").
    #[arg(long, requires = "k")]
    catchup: Option<String>,
}

impl ScheduleArgs {
    fn schedule(&self) -> Result<PolicySchedule, Error> {
        match (self.k, self.full) {
            (Some(k), false) => match &self.catchup {
                Some(c) => Ok(PolicySchedule::wait_k_catchup(k, parse_ratio(c)?)),
                None => Ok(PolicySchedule::wait_k(k)),
            },
            (None, true) => Ok(PolicySchedule::full_sentence()),
            _ => Err(Error::Config("one of --k or --full is required".into())),
        }
    }
}

#[derive(Args)]
struct GenData {
    /// Grammar TOML; the built-in SOV to SVO grammar when omitted.
    #[arg(long)]
    grammar: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the grammar seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Prefix,
    Unidirectional,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    optimizer: OptimizerArg,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, value_enum, default_value_t = EncoderArg::Prefix)]
    encoder: EncoderArg,
    /// Write the per-epoch loss history (CSV) here.
    #[arg(long)]
    loss_history: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Translate {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Decode with a schedule the model was not trained with.
    #[arg(long)]
    test_time: bool,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum RatioArg {
    PerSentence,
    Corpus,
}

impl From<RatioArg> for RatioMode {
    fn from(r: RatioArg) -> Self {
        match r {
            RatioArg::PerSentence => RatioMode::PerSentence,
            RatioArg::Corpus => RatioMode::Corpus,
        }
    }
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    hyp: PathBuf,
    /// One or more comma-separated reference files.
    #[arg(long, value_delimiter = ',', required = true)]
    r#ref: Vec<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Gold alignments of the first reference (needs --trace).
    #[arg(long, requires = "trace")]
    align: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RatioArg::PerSentence)]
    r_mode: RatioArg,
}

#[derive(Args)]
struct Sweep {
    /// Comma-separated `label=checkpoint` pairs; the label is the training
    /// schedule (`3`, `inf`, ...).
    #[arg(long, value_delimiter = ',', required = true)]
    ckpts: Vec<String>,
    /// Comma-separated test schedules (`1,3,5,inf`).
    #[arg(long, value_delimiter = ',', required = true)]
    ks: Vec<String>,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    r#ref: PathBuf,
    #[arg(long)]
    align: Option<PathBuf>,
    /// Anticipation CSV (needs --align).
    #[arg(long, requires = "align")]
    anticipation_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Latency {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum, default_value_t = RatioArg::PerSentence)]
    r_mode: RatioArg,
}

#[derive(Args)]
struct GradCheck {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Translate(a) => translate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Latency(a) => latency(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn gen_data(a: GenData) -> Result<(), Error> {
    let mut grammar = match &a.grammar {
        Some(p) => SyntheticGrammar::from_toml(&std::fs::read_to_string(p)?)?,
        None => SyntheticGrammar::sov_to_svo(1),
    };
    if let Some(s) = a.seed {
        grammar.seed = s;
    }
    let corpus = generate_corpus(&grammar, a.n)?;
    std::fs::create_dir_all(&a.out)?;
    io::write_sentences(a.out.join("src.txt"), &corpus.sources())?;
    io::write_sentences(a.out.join("tgt.txt"), &corpus.targets())?;
    io::write_alignments(a.out.join("align.txt"), &corpus.alignments())?;
    std::fs::write(a.out.join("grammar.toml"), grammar.to_toml())?;
    println!("wrote {} pairs to {}", a.n, a.out.display());
    Ok(())
}

fn train_cmd(a: Train) -> Result<(), Error> {
    let schedule = a.schedule.schedule()?;
    let src = io::read_sentences(&a.src, false)?;
    let tgt = io::read_sentences(&a.tgt, true)?;
    if src.len() != tgt.len() {
        return Err(Error::Dimension(format!(
            "{} source lines but {} target lines",
            src.len(),
            tgt.len()
        )));
    }
    let src_vocab = Vocab::build(&src);
    let tgt_vocab = Vocab::build(&tgt);
    let corpus: Vec<EncodedPair> = src
        .iter()
        .zip(&tgt)
        .map(|(s, t)| EncodedPair::new(src_vocab.encode(s), tgt_vocab.encode(t)))
        .collect();
    let mut model = ModelConfig::desk(src_vocab.len(), tgt_vocab.len());
    model.encoder_mode = match a.encoder {
        EncoderArg::Prefix => EncoderMode::PrefixBidirectional,
        EncoderArg::Unidirectional => EncoderMode::Unidirectional,
    };
    let longest = src.iter().chain(&tgt).map(Vec::len).max().unwrap_or(0);
    model.max_len = model.max_len.max(2 * longest + 10);
    let mut config = TrainConfig::new(schedule, model);
    config.epochs = a.epochs;
    config.learning_rate = a.lr;
    config.seed = a.seed;
    config.batch_size = a.batch_size;
    config.clip = (a.clip > 0.0).then_some(a.clip);
    config.optimizer = match a.optimizer {
        OptimizerArg::Sgd => Optimizer::Sgd,
        OptimizerArg::Adam => Optimizer::adam(),
    };
    let out = train(&corpus, &config, None)?;
    for (i, l) in out.history.iter().enumerate() {
        println!("epoch {} mean_nll {l:.6}", i + 1);
    }
    if let Some(p) = &a.loss_history {
        write_loss_history(p, &out.history)?;
    }
    save_checkpoint(
        &a.out,
        &Checkpoint {
            params: out.params,
            train_policy: schedule,
            src_vocab,
            tgt_vocab,
        },
    )
}

fn translate(a: Translate) -> Result<(), Error> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let schedule = a.schedule.schedule()?;
    let src = io::read_sentences(&a.src, false)?;
    let encoded: Vec<_> = src.iter().map(|s| ckpt.src_vocab.encode(s)).collect();
    let mut config = DecodeConfig::new(schedule).with_beam(a.beam).test_time(a.test_time);
    config.max_len = a.max_len;
    let outs = decode_corpus(&ckpt.params, &encoded, &config, a.jobs)?;
    let hyps: Vec<Vec<String>> = outs.iter().map(|o| ckpt.tgt_vocab.decode(&o.tokens)).collect();
    let traces: Vec<_> = outs.iter().map(|o| o.trace.clone()).collect();
    io::write_sentences(&a.out, &hyps)?;
    io::write_traces(&a.trace, &traces)?;
    let truncated = outs.iter().filter(|o| o.truncated).count();
    if truncated > 0 {
        eprintln!("warning: {truncated} translations hit the length limit");
    }
    Ok(())
}

fn read_refs(paths: &[PathBuf], n: usize) -> Result<Vec<Vec<Vec<String>>>, Error> {
    let mut per_sentence: Vec<Vec<Vec<String>>> = vec![Vec::new(); n];
    for p in paths {
        let r = io::read_sentences(p, true)?;
        if r.len() != n {
            return Err(Error::Dimension(format!(
                "{} has {} lines, expected {n}",
                p.display(),
                r.len()
            )));
        }
        for (slot, s) in per_sentence.iter_mut().zip(r) {
            slot.push(s);
        }
    }
    Ok(per_sentence)
}

fn evaluate(a: Evaluate) -> Result<(), Error> {
    let hyps = io::read_sentences(&a.hyp, true)?;
    let refs = read_refs(&a.r#ref, hyps.len())?;
    println!("bleu={:.6}", corpus_bleu(&hyps, &refs)?);
    if let Some(t) = &a.trace {
        let traces = io::read_traces(t)?;
        let rep = corpus_latency(&traces, a.r_mode.into())?;
        println!("al={:.6}\nap={:.6}\ncw={:.6}", rep.al, rep.ap, rep.cw);
        if let Some(al) = &a.align {
            let aligns = io::read_alignments(al)?;
            let first: Vec<Vec<String>> = refs.iter().map(|r| r[0].clone()).collect();
            let ant = anticipation_report(&traces, &hyps, &first, &aligns)?;
            println!("sent_rate={:.6}\nword_rate={:.6}", ant.sentence_rate, ant.word_rate);
            match ant.word_accuracy {
                Some(acc) => println!("word_acc={acc:.6}"),
                None => println!("word_acc="),
            }
            println!(
                "verb_acc={:.6}",
                role_accuracy(&hyps, &first, &aligns, simulmt::data::Role::Verb)?
            );
        }
    }
    Ok(())
}

fn sweep_cmd(a: Sweep) -> Result<(), Error> {
    let mut models = Vec::with_capacity(a.ckpts.len());
    for item in &a.ckpts {
        let (label, path) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected label=checkpoint, got `{item}`")))?;
        let expected: PolicySchedule = label.parse()?;
        let ckpt = load_checkpoint(Path::new(path))?;
        if ckpt.train_policy != expected {
            return Err(Error::Config(format!(
                "{path} was trained with {}, not {label}",
                ckpt.train_policy
            )));
        }
        models.push(ckpt);
    }
    let ks = a
        .ks
        .iter()
        .map(|k| k.parse::<PolicySchedule>())
        .collect::<Result<Vec<_>, _>>()?;
    let sources = io::read_sentences(&a.src, false)?;
    let references = io::read_sentences(&a.r#ref, true)?;
    if sources.len() != references.len() {
        return Err(Error::Dimension("source and reference line counts differ".into()));
    }
    let alignments = a.align.as_ref().map(io::read_alignments).transpose()?;
    let data = SweepData {
        sources: &sources,
        references: &references,
        alignments: alignments.as_deref(),
    };
    let refs: Vec<&Checkpoint> = models.iter().collect();
    let result = sweep(&refs, &ks, &data, a.beam, a.jobs)?;
    result.write_csv(&a.out)?;
    if let Some(p) = &a.anticipation_out {
        result.write_anticipation_csv(p)?;
    }
    print!("{}", result.to_csv());
    Ok(())
}

fn latency(a: Latency) -> Result<(), Error> {
    let traces = io::read_traces(&a.trace)?;
    let rep = corpus_latency(&traces, a.r_mode.into())?;
    println!("sentences={}", traces.len());
    println!("al={:.6}\nap={:.6}\ncw={:.6}\nr={:.6}", rep.al, rep.ap, rep.cw, rep.r);
    if rep.incomplete_read {
        println!("incomplete_read=true");
    }
    Ok(())
}

fn grad_check(a: GradCheck) -> Result<(), Error> {
    let err = standard_gradient_check(a.seed)?;
    println!("max_rel_error={err:.3e}");
    if err < GRAD_CHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Error::GradientMismatch {
            error: err,
            tolerance: GRAD_CHECK_TOLERANCE,
        })
    }
}
