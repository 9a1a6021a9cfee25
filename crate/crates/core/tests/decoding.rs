mod common;

use domaingen::decoding::{
    beam_decode, generate_all_domains, generate_baseline, greedy_decode, sample_decode, Baseline, DecodeMode,
    DecodeOptions, Hypothesis, StepModel,
};
use domaingen::graph::log_softmax;
use domaingen::metrics::pairwise_bleu;
use domaingen::model::{ModelConfig, Seq2Seq, TokenMatrix};
use domaingen::rng::{self, Stream};
use domaingen::vocab::{EOS, PAD, START};
use domaingen::Tensor;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Next-token logits depend on the previous token and the position.
#[derive(Debug, Clone)]
struct Markov {
    vocab: usize,
    /// `[position][previous token or START][next token]`.
    table: Vec<Vec<Vec<f64>>>,
}

impl Markov {
    fn random(r: &mut ChaCha8Rng, vocab: usize, len: usize) -> Self {
        let table = (0..len)
            .map(|_| (0..vocab).map(|_| (0..vocab).map(|_| r.gen_range(-2.0..2.0)).collect()).collect())
            .collect();
        Self { vocab, table }
    }

    fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let prev = prefix.last().copied().unwrap_or(START);
        log_softmax(&self.table[prefix.len()][prev])
    }

    fn score(&self, tokens: &[usize]) -> f64 {
        let mut s = 0.0;
        for i in 0..tokens.len() {
            s += self.log_probs(&tokens[..i])[tokens[i]];
        }
        s
    }
}

impl StepModel for Markov {
    type State = Vec<usize>;

    fn step(&self, states: &mut [Vec<usize>]) -> domaingen::Result<Vec<Vec<f64>>> {
        Ok(states
            .iter()
            .map(|p| {
                let prev = p.last().copied().unwrap_or(START);
                self.table[p.len()][prev].clone()
            })
            .collect())
    }

    fn push(&self, state: &mut Vec<usize>, token: usize) {
        state.push(token);
    }
}

/// Every sequence a decoder can return: finished ones of length at most
/// `max_len` and unfinished ones cut at exactly `max_len`.
fn enumerate(m: &Markov, max_len: usize) -> (Vec<(Vec<usize>, f64)>, Vec<(Vec<usize>, f64)>) {
    let mut finished = Vec::new();
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for t in 0..m.vocab {
                let mut s: Vec<usize> = p.clone();
                s.push(t);
                if t == EOS {
                    finished.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    let scored = |v: Vec<Vec<usize>>| {
        let mut v: Vec<(Vec<usize>, f64)> = v.into_iter().map(|s| (s.clone(), m.score(&s))).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        v
    };
    (scored(finished), scored(frontier))
}

fn same_tokens(a: &[Hypothesis], b: &[(Vec<usize>, f64)]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(h, (t, _))| &h.tokens == t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn full_width_beam_is_exhaustive(seed in any::<u64>(), vocab in 3usize..=6, max_len in 1usize..=4) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let m = Markov::random(&mut r, vocab, max_len);
        let (finished, cut) = enumerate(&m, max_len);
        let width = vocab.pow(max_len as u32);
        let got = beam_decode(&m, Vec::new(), width, max_len).unwrap();
        let mut expect = finished.clone();
        expect.extend(cut);
        prop_assert!(same_tokens(&got, &expect));
        for (h, (_, s)) in got.iter().zip(&expect) {
            prop_assert!((h.score - s).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_returns_true_top_b_when_it_can_hold_every_prefix(
        seed in any::<u64>(),
        vocab in 3usize..=6,
        max_len in 1usize..=5,
        b in 1usize..=4,
    ) {
        // Only search-error-free configurations are compared: a beam wide
        // enough for all candidates at each step but asked to return `b`.
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let m = Markov::random(&mut r, vocab, max_len);
        let (finished, _) = enumerate(&m, max_len);
        let width = vocab.pow(max_len as u32);
        let got = beam_decode(&m, Vec::new(), width, max_len).unwrap();
        let top: Vec<&Vec<usize>> = got.iter().filter(|h| h.finished()).take(b).map(|h| &h.tokens).collect();
        let oracle: Vec<&Vec<usize>> = finished.iter().take(b).map(|(t, _)| t).collect();
        prop_assert_eq!(top, oracle);
    }

    #[test]
    fn any_beam_returns_valid_scored_hypotheses(
        seed in any::<u64>(),
        vocab in 3usize..=6,
        max_len in 1usize..=5,
        b in 1usize..=6,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let m = Markov::random(&mut r, vocab, max_len);
        let got = beam_decode(&m, Vec::new(), b, max_len).unwrap();
        prop_assert!(!got.is_empty() && got.len() <= b);
        let done = got.iter().take_while(|h| h.finished()).count();
        prop_assert!(got[done..].iter().all(|h| !h.finished() && h.tokens.len() == max_len));
        prop_assert!(got[..done].windows(2).all(|w| w[0].score >= w[1].score));
        for (i, h) in got.iter().enumerate() {
            prop_assert!(h.tokens.iter().rev().skip(1).all(|&t| t != EOS));
            prop_assert!((h.score - m.score(&h.tokens)).abs() < 1e-12);
            prop_assert!(got[..i].iter().all(|o| o.tokens != h.tokens));
        }
        // The best finished hypothesis cannot beat the exhaustive best.
        let (finished, _) = enumerate(&m, max_len);
        if let (Some(h), Some((_, best))) = (got.first().filter(|h| h.finished()), finished.first()) {
            prop_assert!(h.score <= *best + 1e-12);
        }
    }

    #[test]
    fn beam_one_equals_greedy_on_rigged_models(seed in any::<u64>(), vocab in 3usize..=6, max_len in 1usize..=6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let m = Markov::random(&mut r, vocab, max_len);
        let g = greedy_decode(&m, Vec::new(), max_len).unwrap();
        let b = beam_decode(&m, Vec::new(), 1, max_len).unwrap();
        prop_assert_eq!(b.len(), 1);
        prop_assert_eq!(&b[0].tokens, &g.tokens);
        prop_assert_eq!(b[0].score.to_bits(), g.score.to_bits());
    }
}

fn model(n_domains: usize, seed: u64, max_len: usize) -> Seq2Seq {
    Seq2Seq::with_domains(&ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        src_vocab_size: 12,
        tgt_vocab_size: 12,
        n_domains,
        dropout_enc_dec: 0.0,
        dropout_target_enc: 0.0,
        max_len,
        seed,
    })
    .unwrap()
}

fn random_sources(r: &mut ChaCha8Rng, count: usize) -> Vec<Vec<usize>> {
    (0..count)
        .map(|_| {
            let len = r.gen_range(1..=7);
            (0..len).map(|_| r.gen_range(4..12)).collect()
        })
        .collect()
}

fn single_state(m: &Seq2Seq, src: &[usize], k: usize) -> domaingen::model::DecoderState {
    let zx = m.encode_source(&TokenMatrix::from_rows(&[src.to_vec()], PAD)).unwrap();
    let cache = m.cross_caches(&zx).unwrap().remove(0);
    m.start_state(cache, m.domain_embedding(k)).unwrap()
}

/// Sum of teacher-forced log-probabilities of `tokens` given domain `k`.
fn teacher_forced_score(m: &Seq2Seq, src: &[usize], k: usize, tokens: &[usize]) -> f64 {
    let zx = m.encode_source(&TokenMatrix::from_rows(&[src.to_vec()], PAD)).unwrap();
    let mut tgt_in = vec![START];
    tgt_in.extend_from_slice(&tokens[..tokens.len() - 1]);
    let e = Tensor::from_rows(&[m.domain_embedding(k)]).unwrap();
    let logits = m.decode_teacher_forced(&zx, &e, &TokenMatrix::from_rows(&[tgt_in], PAD)).unwrap();
    let v = m.tgt_vocab();
    tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| log_softmax(&logits.data()[i * v..(i + 1) * v])[t])
        .sum()
}

#[test]
fn beam_one_equals_greedy_on_100_model_decodes() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for i in 0..100u64 {
        let m = model(2, i / 10, 10);
        let src = random_sources(&mut r, 1).remove(0);
        let k = (i % 2) as usize;
        let g = greedy_decode(&m, single_state(&m, &src, k), 10).unwrap();
        let b = beam_decode(&m, single_state(&m, &src, k), 1, 10).unwrap();
        assert_eq!(b[0].tokens, g.tokens, "decode {i}");
        assert_eq!(b[0].score.to_bits(), g.score.to_bits(), "decode {i}");
    }
}

#[test]
fn all_domain_outputs_match_independent_decodes() {
    let m = model(3, 11, 9);
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let sources = random_sources(&mut r, 70);
    let sets = generate_all_domains(&m, &sources, DecodeOptions::default()).unwrap();
    assert_eq!(sets.len(), sources.len());
    for (src, set) in sources.iter().zip(&sets) {
        assert_eq!(set.len(), 3);
        for (k, h) in set.iter().enumerate() {
            assert_eq!(h.domain, Some(k));
            let alone = greedy_decode(&m, single_state(&m, src, k), 9).unwrap();
            assert_eq!(h.tokens, alone.tokens);
            assert!((h.score - alone.score).abs() < 1e-9);
            assert!((h.score - teacher_forced_score(&m, src, k, &h.tokens)).abs() < 1e-9);
        }
    }
    let beam = DecodeOptions {
        mode: DecodeMode::Beam,
        beam_size: 3,
        max_len: 0,
    };
    let sets = generate_all_domains(&m, &sources[..5], beam).unwrap();
    for (src, set) in sources.iter().zip(&sets) {
        for (k, h) in set.iter().enumerate() {
            let direct = beam_decode(&m, single_state(&m, src, k), 3, 9).unwrap().remove(0);
            assert_eq!(h.tokens, direct.tokens);
            assert!((h.score - direct.score).abs() < 1e-9);
        }
    }
}

#[test]
fn single_domain_is_one_decode() {
    let m = model(1, 5, 8);
    let src = vec![4, 5, 6, 7];
    let sets = generate_all_domains(&m, std::slice::from_ref(&src), DecodeOptions::default()).unwrap();
    assert_eq!(sets[0].len(), 1);
    assert_eq!(sets[0][0].tokens, greedy_decode(&m, single_state(&m, &src, 0), 8).unwrap().tokens);
}

#[test]
fn equal_domain_embeddings_give_identical_hypotheses() {
    let mut m = model(4, 2, 12);
    let id = m.domain_embeddings;
    let e = m.params.get_mut(id);
    let (d, n) = (e.shape()[0], e.shape()[1]);
    for i in 0..d {
        let v = e.data()[i * n];
        for k in 1..n {
            e.data_mut()[i * n + k] = v;
        }
    }
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let sources = random_sources(&mut r, 12);
    let sets = generate_all_domains(&m, &sources, DecodeOptions::default()).unwrap();
    for set in &sets {
        assert!(set.iter().all(|h| h.tokens == set[0].tokens));
    }
    let content: Vec<Vec<Vec<usize>>> = sets
        .iter()
        .map(|s| s.iter().map(|h| h.content().to_vec()).collect())
        .collect();
    assert!(content.iter().any(|s| s[0].len() >= 4), "need some 4-grams");
    assert_eq!(pairwise_bleu(&content).unwrap().score, 100.0);
}

/// First step: tokens 3 and 4 with probabilities 0.7 and 0.3; then end.
struct TwoWay;

impl StepModel for TwoWay {
    type State = usize;

    fn step(&self, states: &mut [usize]) -> domaingen::Result<Vec<Vec<f64>>> {
        Ok(states
            .iter()
            .map(|&pos| {
                if pos == 0 {
                    vec![f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY, 0.7f64.ln(), 0.3f64.ln()]
                } else {
                    vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]
                }
            })
            .collect())
    }

    fn push(&self, state: &mut usize, _token: usize) {
        *state += 1;
    }
}

#[test]
fn sampling_frequencies_within_three_sigma() {
    let n = 10_000;
    let mut r = rng::stream(4, Stream::Sampling, 0);
    let mut first = 0usize;
    for _ in 0..n {
        let h = sample_decode(&TwoWay, 0, &mut r, 5).unwrap();
        assert_eq!(h.tokens.len(), 2);
        assert_eq!(h.tokens[1], EOS);
        if h.tokens[0] == 3 {
            first += 1;
        }
    }
    let (p, nf) = (0.7, n as f64);
    let sigma = (nf * p * (1.0 - p)).sqrt();
    assert!((first as f64 - nf * p).abs() <= 3.0 * sigma, "{first} of {n}");
}

#[test]
fn sampling_is_reproducible_per_seed() {
    let m = model(1, 4, 10);
    let sources = vec![vec![4, 5, 6], vec![7, 8]];
    let a = generate_baseline(&m, &sources, Baseline::Sample(5), 0, 13).unwrap();
    let b = generate_baseline(&m, &sources, Baseline::Sample(5), 0, 13).unwrap();
    assert_eq!(a, b);
    let c = generate_baseline(&m, &sources, Baseline::Sample(5), 0, 14).unwrap();
    assert_ne!(a, c);
    assert!(a.iter().all(|s| s.len() == 5));
}
