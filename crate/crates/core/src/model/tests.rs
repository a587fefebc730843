use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::policy::PolicySchedule;

const V: usize = 12;

fn model(seed: u64, mode: EncoderMode) -> ModelParams {
    let mut cfg = ModelConfig::tiny(V, V);
    cfg.encoder_mode = mode;
    ModelParams::init(cfg, seed).unwrap()
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.gen_range(4..V as TokenId)).collect()
}

fn m(rows: &[&[f64]]) -> Matrix {
    Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Per-step log-likelihood with every prefix encoded from scratch.
fn naive_log_prob(p: &ModelParams, src: &[TokenId], tgt: &[TokenId], sched: &PolicySchedule) -> f64 {
    let mut prefix = vec![BOS];
    let mut total = 0.0;
    let targets: Vec<TokenId> = tgt.iter().copied().chain([EOS]).collect();
    for (i, &y) in targets.iter().enumerate() {
        let g = sched.g(i + 1, src.len());
        let states = match p.config().encoder_mode {
            EncoderMode::PrefixBidirectional => p.encode(&src[..g]).unwrap(),
            EncoderMode::Unidirectional => p.encode_prefix(src, g, EncoderMode::Unidirectional).unwrap(),
        };
        let probs = p.decoder_step(SourceContext::States(&states), &prefix).unwrap();
        total += probs[y as usize].ln();
        prefix.push(y);
    }
    total
}

#[test]
fn attention_hand_values() {
    let q = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
    // e = q k^T / sqrt(2); choose keys so row 0 gives [0, ln 3]
    let s = 3f64.ln() * 2f64.sqrt();
    let k = m(&[&[0.0, 1.0], &[s, 0.0]]);
    let w = attention_weights(&q, &k, &AttentionMask::full(2, 2)).unwrap();
    assert!((w.get(0, 0) - 0.25).abs() < 1e-15);
    assert!((w.get(0, 1) - 0.75).abs() < 1e-15);
    assert_eq!(w.get(1, 0), 0.5);

    // constant scores: mean of allowed values
    let v = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 9.0]]);
    let q = m(&[&[0.0, 0.0]]);
    let k = m(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]);
    let out = attention(&q, &k, &v, &AttentionMask::from_fn(1, 3, |_, j| j != 1)).unwrap();
    assert_eq!(out.row(0), &[3.0, 5.5]);

    // single allowed position returns that value row exactly
    let q = m(&[&[0.3, -0.7]]);
    let out = attention(&q, &k, &v, &AttentionMask::from_fn(1, 3, |_, j| j == 2)).unwrap();
    assert_eq!(out.row(0), v.row(2));

    let empty = AttentionMask::from_fn(1, 3, |_, _| false);
    assert!(matches!(
        attention(&q, &k, &v, &empty),
        Err(Error::EmptyAttentionSupport { row: 0 })
    ));
}

#[test]
fn masked_key_rows_do_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rand_m = |r: usize, c: usize| {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let q = rand_m(3, 4);
    let k = rand_m(5, 4);
    let v = rand_m(5, 4);
    let mask = AttentionMask::prefix(5, 3).clone();
    let mask3 = AttentionMask::from_fn(3, 5, |_, j| j < 3);
    let w = attention_weights(&q, &k, &mask3).unwrap();
    for i in 0..3 {
        let s: f64 = w.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(&w.row(i)[3..], &[0.0, 0.0]);
    }
    let short = attention(&q, &k.slice_rows(0, 3), &v.slice_rows(0, 3), &AttentionMask::full(3, 3)).unwrap();
    let long = attention(&q, &k, &v, &mask3).unwrap();
    assert_eq!(short, long);
    assert_eq!(mask.shape(), (5, 5));
}

#[test]
fn full_prefix_equals_standard_encoder() {
    let p = model(3, EncoderMode::PrefixBidirectional);
    let src = [5, 6, 7, 8, 9];
    let full = p.encode(&src).unwrap();
    let pre = p.encode_prefix(&src, 5, EncoderMode::PrefixBidirectional).unwrap();
    assert!(full.max_abs_diff(&pre) < 1e-12);
    let one = p.encode_prefix(&src, 1, EncoderMode::PrefixBidirectional).unwrap();
    assert!(one.max_abs_diff(&p.encode(&src[..1]).unwrap()) < 1e-12);
    assert!(matches!(
        p.encode_prefix(&src, 0, EncoderMode::PrefixBidirectional),
        Err(Error::PrefixOutOfRange { .. })
    ));
    assert!(p.encode_prefix(&src, 6, EncoderMode::PrefixBidirectional).is_err());
}

#[test]
fn prefix_encoding_matches_scratch_six_four() {
    let p = model(4, EncoderMode::PrefixBidirectional);
    let src = [4, 9, 11, 5, 7, 6];
    let masked = p.encode_prefix(&src, 4, EncoderMode::PrefixBidirectional).unwrap();
    let scratch = p.encode(&src[..4]).unwrap();
    assert!(masked.max_abs_diff(&scratch) < 1e-9);
}

#[test]
fn unidirectional_states_ignore_the_future() {
    let p = model(5, EncoderMode::Unidirectional);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let src = random_tokens(&mut rng, 7);
    let base = p.encode_prefix(&src, 7, EncoderMode::Unidirectional).unwrap();
    for i in 0..7 {
        let mut pert = src.clone();
        for t in pert.iter_mut().skip(i + 1) {
            *t = rng.gen_range(4..V as TokenId);
        }
        let other = p.encode_prefix(&pert, 7, EncoderMode::Unidirectional).unwrap();
        assert_eq!(base.slice_rows(0, i + 1), other.slice_rows(0, i + 1));
    }
}

#[test]
fn decoder_distribution_and_extra_state() {
    let p = model(6, EncoderMode::PrefixBidirectional);
    let src = [4, 5, 6, 7];
    let states = p.encode(&src[..2]).unwrap();
    let probs = p.decoder_step(SourceContext::States(&states), &[BOS, 8]).unwrap();
    assert_eq!(probs.len(), V);
    assert!(probs.iter().all(|&x| x >= 0.0));
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let more = p.encode(&src[..3]).unwrap();
    let probs3 = p.decoder_step(SourceContext::States(&more), &[BOS, 8]).unwrap();
    assert_ne!(probs, probs3);

    assert!(matches!(
        p.decoder_step(SourceContext::States(&states), &[8]),
        Err(Error::Dimension(_))
    ));
    let empty = Matrix::zeros(0, p.config().width);
    assert!(matches!(
        p.decoder_step(SourceContext::States(&empty), &[BOS]),
        Err(Error::NoSourceContext { .. })
    ));
    let narrow = Matrix::zeros(2, 3);
    assert!(p.decoder_step(SourceContext::States(&narrow), &[BOS]).is_err());
}

#[test]
fn sequence_log_prob_matches_naive_loop() {
    for mode in [EncoderMode::PrefixBidirectional, EncoderMode::Unidirectional] {
        let p = model(7, mode);
        let src = [4, 5, 6];
        let tgt = [7, 8, 9];
        for sched in [
            PolicySchedule::wait_k(1),
            PolicySchedule::wait_k(2),
            PolicySchedule::full_sentence(),
            PolicySchedule::wait_k_catchup(1, crate::policy::Catchup::new(1, 2)),
        ] {
            let a = p.sequence_log_prob(&src, &tgt, &sched).unwrap();
            let b = naive_log_prob(&p, &src, &tgt, &sched);
            assert!((a - b).abs() < 1e-10, "{mode:?} {sched}: {a} vs {b}");
        }
    }
}

#[test]
fn wait_k_beyond_source_is_full_sentence() {
    let p = model(8, EncoderMode::PrefixBidirectional);
    let src = [4, 5, 6, 7];
    let tgt = [8, 9, 10, 11, 4];
    let full = p.sequence_log_prob(&src, &tgt, &PolicySchedule::full_sentence()).unwrap();
    for k in [4, 5, 100] {
        let w = p.sequence_log_prob(&src, &tgt, &PolicySchedule::wait_k(k)).unwrap();
        assert_eq!(w, full);
    }
}

#[test]
fn zero_source_ignores_the_source() {
    let p = model(9, EncoderMode::PrefixBidirectional);
    let z = PolicySchedule::zero_source();
    let a = p.sequence_log_prob(&[4, 5], &[6, 7], &z).unwrap();
    let b = p.sequence_log_prob(&[11, 10, 9, 8], &[6, 7], &z).unwrap();
    assert_eq!(a, b);
    let mut prefix = vec![BOS];
    let mut lm = 0.0;
    for y in [6, 7, EOS] {
        lm += p.decoder_step(SourceContext::ZeroSource, &prefix).unwrap()[y as usize].ln();
        prefix.push(y);
    }
    assert!((a - lm).abs() < 1e-12);
}

#[test]
fn token_range_is_checked() {
    let p = model(10, EncoderMode::PrefixBidirectional);
    assert!(matches!(
        p.encode(&[4, V as TokenId]),
        Err(Error::TokenOutOfVocab { .. })
    ));
    assert!(matches!(p.encode(&[]), Err(Error::Empty(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    use crate::data::Vocab;
    let p = model(11, EncoderMode::Unidirectional);
    let toks: Vec<String> = (0..V - 4).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::build(&[toks]);
    let ckpt = Checkpoint {
        params: p,
        train_policy: "3+c1/4".parse().unwrap(),
        src_vocab: vocab.clone(),
        tgt_vocab: vocab,
    };
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &ckpt).unwrap();
    let back = read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(back, ckpt);
    let mut again = Vec::new();
    write_checkpoint(&mut again, &back).unwrap();
    assert_eq!(buf, again);

    let mut trailing = buf.clone();
    trailing.push(0);
    assert!(read_checkpoint(&mut trailing.as_slice()).is_err());
    assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prefix_encoding_equivalence(seed in 0u64..1000, n in 1usize..=16, gsel in 0usize..16) {
        let mut cfg = ModelConfig::tiny(V, V);
        cfg.enc_layers = 2;
        let p = ModelParams::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let src = random_tokens(&mut rng, n);
        let g = 1 + gsel % n;
        let masked = p.encode_prefix(&src, g, EncoderMode::PrefixBidirectional).unwrap();
        let scratch = p.encode(&src[..g]).unwrap();
        prop_assert!(masked.max_abs_diff(&scratch) < 1e-9);
    }

    #[test]
    fn source_beyond_prefix_never_leaks(seed in 0u64..1000, n in 2usize..=10, gsel in 0usize..10) {
        let p = model(seed, EncoderMode::PrefixBidirectional);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = random_tokens(&mut rng, n);
        let g = 1 + gsel % (n - 1);
        let mut pert = src.clone();
        for t in pert.iter_mut().skip(g) {
            *t = rng.gen_range(4..V as TokenId);
        }
        let a = p.encode_prefix(&src, g, EncoderMode::PrefixBidirectional).unwrap();
        let b = p.encode_prefix(&pert, g, EncoderMode::PrefixBidirectional).unwrap();
        let prefix = [BOS, 5, 6];
        let pa = p.decoder_step(SourceContext::States(&a), &prefix).unwrap();
        let pb = p.decoder_step(SourceContext::States(&b), &prefix).unwrap();
        prop_assert_eq!(pa, pb);
    }
}
