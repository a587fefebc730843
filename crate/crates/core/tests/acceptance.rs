//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line and then
//! asserts. Run with
//! `cargo test --release -p simulmt --test acceptance -- --nocapture --test-threads=1`.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simulmt::experiment::{run_experiment, ExperimentConfig, ExperimentResult};
use simulmt::latency::{
    average_lagging, average_proportion, average_proportion_exact, consecutive_wait_exact, DecodingTrace,
};
use simulmt::model::{EncoderMode, ModelConfig, ModelParams, SourceContext, TokenId};
use simulmt::policy::{cutoff_step, schedule_to_actions};
use simulmt::training::standard_gradient_check;
use simulmt::PolicySchedule;

fn report(id: &str, pass: bool, elapsed: Duration, limit: Option<Duration>, detail: String) {
    let in_time = limit.map_or(true, |l| elapsed <= l);
    let ok = pass && in_time;
    // written directly so the line shows even when test output is captured
    let line = format!(
        "{} {id}: {detail} [{:.2}s{}]\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.map_or(String::new(), |l| format!(" / limit {}s", l.as_secs()))
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{id} failed: {detail}");
    assert!(in_time, "{id} exceeded its time limit");
}

fn wait_k_trace(k: u32, src: usize, tgt: usize) -> DecodingTrace {
    DecodingTrace::new(src, PolicySchedule::wait_k(k).g_values(src, tgt)).unwrap()
}

#[test]
fn c01_al_identity() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for k in 1..=9u32 {
        for n in k as usize..=40 {
            let al = average_lagging(&wait_k_trace(k, n, n), 1.0).unwrap();
            worst = worst.max((al - k as f64).abs());
        }
    }
    report(
        "criterion 1 (AL of wait-k equals k)",
        worst <= 1e-12,
        start.elapsed(),
        Some(Duration::from_secs(1)),
        format!("max |AL - k| = {worst:.2e}"),
    );
}

#[test]
fn c02_ap_values() {
    let start = Instant::now();
    let ap = |n: usize| average_proportion(&wait_k_trace(1, n, n));
    let exact1 = average_proportion_exact(&wait_k_trace(1, 1, 1)) == Ratio::from_integer(1);
    let exact2 = average_proportion_exact(&wait_k_trace(1, 2, 2)) == Ratio::new(3, 4);
    let decreasing = (1..100).all(|n| ap(n + 1) < ap(n));
    let ap100 = ap(100);
    report(
        "criterion 2 (AP values)",
        exact1 && exact2 && decreasing && ap100 < 0.51,
        start.elapsed(),
        Some(Duration::from_secs(1)),
        format!("AP(1)={} AP(2)={} decreasing={decreasing} AP(100)={ap100:.6}", ap(1), ap(2)),
    );
}

#[test]
fn c03_cw_closed_form() {
    let start = Instant::now();
    let mut mismatches = 0;
    for n in 1..=40usize {
        for k in 1..=n {
            let cw = consecutive_wait_exact(&wait_k_trace(k as u32, n, n)).unwrap();
            if cw != Ratio::new(n as i64, (n - k + 1) as i64) {
                mismatches += 1;
            }
        }
    }
    report(
        "criterion 3 (CW closed form)",
        mismatches == 0,
        start.elapsed(),
        Some(Duration::from_secs(1)),
        format!("{mismatches} mismatches over 1 <= k <= n <= 40"),
    );
}

#[test]
fn c04_cutoff_identity() {
    let start = Instant::now();
    let mut mismatches = 0;
    for n in 1..=40usize {
        for k in 1..=n {
            if cutoff_step(&PolicySchedule::wait_k(k as u32), n).unwrap() != n - k + 1 {
                mismatches += 1;
            }
        }
    }
    let example = cutoff_step(&PolicySchedule::wait_k(2), 7).unwrap();
    report(
        "criterion 4 (cutoff step)",
        mismatches == 0 && example == 6,
        start.elapsed(),
        Some(Duration::from_secs(1)),
        format!("{mismatches} mismatches, wait-2 on 7 words -> {example}"),
    );
}

#[test]
fn c05_catchup_al() {
    let start = Instant::now();
    let c = Ratio::new(1, 4);
    let (n, m) = (40usize, 50usize);
    let mut als = Vec::new();
    for k in 1..=5u32 {
        let sched = PolicySchedule::wait_k_catchup(k, c);
        let trace = DecodingTrace::new(n, sched.g_values(n, m)).unwrap();
        als.push((k, average_lagging(&trace, 1.25).unwrap()));
    }
    let al_ok = als.iter().all(|&(k, al)| (al - k as f64).abs() <= 0.5);

    // steady-state pattern: writes and reads inside the first full period
    // after the initial k reads, before the source runs out
    let actions = schedule_to_actions(&PolicySchedule::wait_k_catchup(3, c), n, m).unwrap();
    let body = &actions[3..];
    let window: String = body.chars().take(63).collect();
    let writes = window.chars().filter(|&a| a == 'W').count();
    let reads = window.chars().filter(|&a| a == 'R').count();
    let pattern_ok = writes * 4 == reads * 5;
    let shown: Vec<String> = als.iter().map(|(k, al)| format!("k={k}:{al:.3}")).collect();
    report(
        "criterion 5 (catchup AL within k +- 0.5, 5 writes per 4 reads)",
        al_ok && pattern_ok,
        start.elapsed(),
        Some(Duration::from_secs(1)),
        format!("AL {} ; steady state {writes} W / {reads} R", shown.join(" ")),
    );
}

fn random_model(rng: &mut ChaCha8Rng, mode: EncoderMode) -> ModelParams {
    let mut cfg = ModelConfig::desk(24, 24);
    cfg.encoder_mode = mode;
    cfg.max_len = 20;
    ModelParams::init_with_range(cfg, rng.gen(), rng.gen_range(0.1..1.0)).unwrap()
}

fn random_sentence(rng: &mut ChaCha8Rng, n: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.gen_range(4..24)).collect()
}

#[test]
fn c06_prefix_encoder_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let mode = if trial % 2 == 0 {
            EncoderMode::PrefixBidirectional
        } else {
            EncoderMode::Unidirectional
        };
        let p = random_model(&mut rng, mode);
        let n = rng.gen_range(1..=16);
        let src = random_sentence(&mut rng, n);
        let g = rng.gen_range(1..=n);
        let masked = p.encode_prefix(&src, g, mode).unwrap();
        let scratch = match mode {
            EncoderMode::PrefixBidirectional => p.encode(&src[..g]).unwrap(),
            EncoderMode::Unidirectional => p.encode_prefix(&src[..g], g, mode).unwrap(),
        };
        for (a, b) in masked.data().iter().zip(scratch.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    report(
        "criterion 6 (masked prefix encoding equals scratch re-encoding)",
        worst < 1e-9,
        start.elapsed(),
        Some(Duration::from_secs(10)),
        format!("max abs difference {worst:.2e} over 100 trials"),
    );
}

#[test]
fn c07_mask_causality() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut differing = 0;
    for trial in 0..100 {
        let mode = if trial % 2 == 0 {
            EncoderMode::PrefixBidirectional
        } else {
            EncoderMode::Unidirectional
        };
        let p = random_model(&mut rng, mode);
        let n = rng.gen_range(2..=16);
        let src = random_sentence(&mut rng, n);
        let g = rng.gen_range(1..n);
        let mut other = src.clone();
        for tok in &mut other[g..] {
            *tok = rng.gen_range(4..24);
        }
        let mut prefix = vec![simulmt::data::BOS];
        let extra = rng.gen_range(0..5);
        prefix.extend(random_sentence(&mut rng, extra));
        let a = p.encode_prefix(&src, g, mode).unwrap();
        let b = p.encode_prefix(&other, g, mode).unwrap();
        let pa = p.decoder_step(SourceContext::States(&a), &prefix).unwrap();
        let pb = p.decoder_step(SourceContext::States(&b), &prefix).unwrap();
        let same = pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            differing += 1;
        }
    }
    report(
        "criterion 7 (source beyond g(t) never affects step t)",
        differing == 0,
        start.elapsed(),
        Some(Duration::from_secs(10)),
        format!("{differing} of 100 trials not bit-identical"),
    );
}

#[test]
fn c08_gradient_check() {
    let start = Instant::now();
    let err = standard_gradient_check(1).unwrap();
    report(
        "criterion 8 (gradient check, width 8, one layer, wait-1)",
        err < 1e-4,
        start.elapsed(),
        Some(Duration::from_secs(30)),
        format!("max relative error {err:.3e}"),
    );
}

struct Experiment {
    result: ExperimentResult,
    elapsed: Duration,
    dir: tempfile::TempDir,
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

fn experiment() -> &'static Experiment {
    static CELL: OnceLock<Experiment> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let result =
            single_threaded(|| run_experiment(&ExperimentConfig::default(), Some(dir.path())).unwrap());
        Experiment {
            result,
            elapsed: start.elapsed(),
            dir,
        }
    })
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

#[test]
fn c09_anticipation_experiment() {
    let e = experiment();
    let r = &e.result;
    let ks = [1u32, 3, 5];
    let gaps: Vec<(f64, f64)> = ks.iter().map(|&k| r.gaps(k).unwrap()).collect();
    let verb: Vec<f64> = gaps.iter().map(|g| g.0).collect();
    let bleu: Vec<f64> = gaps.iter().map(|g| g.1).collect();
    let margin = ExperimentConfig::default().margins.min_verb_gap;
    let pass = verb[0] >= margin && non_increasing(&verb) && non_increasing(&bleu);
    let acc = |k| {
        (
            r.genuine(k).unwrap().verb_accuracy.unwrap(),
            r.test_time(k).unwrap().verb_accuracy.unwrap(),
        )
    };
    let (g1, t1) = acc(1);
    report(
        "criterion 9 (anticipation experiment)",
        pass,
        e.elapsed,
        Some(Duration::from_secs(600)),
        format!(
            "wait-1 verb acc genuine {g1:.3} vs test-time {t1:.3}; verb gaps {verb:.3?}; BLEU gaps {bleu:.3?} at k=1,3,5"
        ),
    );
}

#[test]
fn c09b_anticipation_rate_trend() {
    let r = &experiment().result;
    let rates: Vec<f64> = [3u32, 5, 7]
        .iter()
        .map(|&k| r.genuine(k).unwrap().anticipation.as_ref().unwrap().word_rate)
        .collect();
    report(
        "supplementary (genuine anticipation word rate decreases over k=3,5,7)",
        rates.windows(2).all(|w| w[1] < w[0]),
        Duration::ZERO,
        None,
        format!("rates {rates:.4?}"),
    );
}

/// BLEU non-decreasing with at most one drop of at most `tol`.
fn nearly_monotone(v: &[f64], tol: f64) -> bool {
    let drops: Vec<f64> = v.windows(2).map(|w| w[0] - w[1]).filter(|&d| d > 0.0).collect();
    drops.len() <= 1 && drops.iter().all(|&d| d <= tol)
}

#[test]
fn c10_sweep_trends() {
    let e = experiment();
    let r = &e.result;
    let cfg = ExperimentConfig::default();
    let ks = &cfg.ks;
    let series = |f: &dyn Fn(u32) -> f64| ks.iter().map(|&k| f(k)).collect::<Vec<f64>>();
    let gen_bleu = series(&|k| r.genuine(k).unwrap().bleu);
    let tt_bleu = series(&|k| r.test_time(k).unwrap().bleu);
    let gen_al = series(&|k| r.genuine(k).unwrap().al);
    let tt_al = series(&|k| r.test_time(k).unwrap().al);
    let full = r.full_sentence().unwrap().bleu;
    let last = *ks.last().unwrap();
    let tol = cfg.margins.full_sentence_tolerance;
    let inv = cfg.margins.bleu_inversion;

    let bleu_ok = nearly_monotone(&gen_bleu, inv) && nearly_monotone(&tt_bleu, inv);
    let al_ok = gen_al.windows(2).all(|w| w[1] > w[0]) && tt_al.windows(2).all(|w| w[1] > w[0]);
    let gen_last = r.genuine(last).unwrap().bleu;
    let tt_last = r.test_time(last).unwrap().bleu;
    let close_ok = (gen_last - full).abs() <= tol && (tt_last - full).abs() <= tol;
    report(
        "criterion 10 (sweep trends)",
        bleu_ok && al_ok && close_ok,
        e.elapsed,
        Some(Duration::from_secs(600)),
        format!(
            "k={ks:?} BLEU wait-k {gen_bleu:.4?} test-time {tt_bleu:.4?} full {full:.4}; AL wait-k {gen_al:.3?} test-time {tt_al:.3?}"
        ),
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn c11_determinism() {
    let start = Instant::now();
    let first = experiment();
    let again = tempfile::tempdir().unwrap();
    // second run with a multi-threaded pool and parallel decoding
    let cfg = ExperimentConfig {
        jobs: 4,
        ..ExperimentConfig::default()
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| run_experiment(&cfg, Some(again.path())).unwrap());
    let a = dir_bytes(first.dir.path());
    let b = dir_bytes(again.path());
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let names_match = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.0 == y.0);
    report(
        "criterion 11 (repeated pipeline runs are bit-identical)",
        names_match && differing.is_empty(),
        start.elapsed(),
        None,
        format!("{} files compared, differing: {differing:?}", a.len()),
    );
}
