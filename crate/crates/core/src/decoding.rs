//! Greedy, beam and ancestral-sampling decoders and the per-domain fan-out.

use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::log_softmax;
use crate::latent::argmax;
use crate::model::{DecoderState, Seq2Seq, TokenMatrix};
use crate::rng::{self, Stream};
use crate::vocab::{Vocabulary, EOS, PAD};

/// Anything that yields next-token logits for a set of equally long prefixes.
pub trait StepModel {
    type State: Clone;

    /// Logits `[rows][V]` for the next token of every state; advances each
    /// state's cache by one position.
    fn step(&self, states: &mut [Self::State]) -> Result<Vec<Vec<f64>>>;

    /// Appends the chosen token to a state.
    fn push(&self, state: &mut Self::State, token: usize);
}

impl StepModel for Seq2Seq {
    type State = DecoderState;

    fn step(&self, states: &mut [DecoderState]) -> Result<Vec<Vec<f64>>> {
        self.decode_one_step(states)
    }

    fn push(&self, state: &mut DecoderState, token: usize) {
        state.push(token);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated ids, ending in end-of-sequence unless cut at `max_len`.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities.
    pub score: f64,
    pub domain: Option<usize>,
}

impl Hypothesis {
    /// Tokens before the end-of-sequence marker.
    pub fn content(&self) -> &[usize] {
        let end = self.tokens.iter().position(|&t| t == EOS).unwrap_or(self.tokens.len());
        &self.tokens[..end]
    }

    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

/// Hypotheses of one source; the same count for every source in a run.
pub type HypothesisSet = Vec<Hypothesis>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

/// Argmax decoding from a single state.
pub fn greedy_decode<M: StepModel>(model: &M, state: M::State, max_len: usize) -> Result<Hypothesis> {
    Ok(greedy_batch(model, vec![state], max_len)?.remove(0))
}

/// Greedy decoding of many states stepped together; finished rows drop out.
pub fn greedy_batch<M: StepModel>(model: &M, states: Vec<M::State>, max_len: usize) -> Result<Vec<Hypothesis>> {
    check_max_len(max_len)?;
    let n = states.len();
    let mut hyps: Vec<Hypothesis> = (0..n)
        .map(|_| Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            domain: None,
        })
        .collect();
    let mut active: Vec<usize> = (0..n).collect();
    let mut live = states;
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let logits = model.step(&mut live)?;
        let mut next_active = Vec::with_capacity(active.len());
        let mut next_live = Vec::with_capacity(active.len());
        for ((&row, mut state), l) in active.iter().zip(live).zip(logits) {
            let lp = log_softmax(&l);
            let tok = argmax(&lp);
            let h = &mut hyps[row];
            h.tokens.push(tok);
            h.score += lp[tok];
            if tok != EOS {
                model.push(&mut state, tok);
                next_active.push(row);
                next_live.push(state);
            }
        }
        active = next_active;
        live = next_live;
    }
    Ok(hyps)
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    Ok(())
}

/// Beam search on summed log-probabilities, without length normalization.
///
/// Each step ranks all `B × V` extensions (ties keep expansion order); hypotheses
/// ending in end-of-sequence among the top `B` move to the completed pool and
/// the live beam is refilled with the best unfinished extensions. Search stops
/// once `B` completed hypotheses all score at least as well as the best live
/// one. Returns the best `B` completed, padded with the best live ones.
pub fn beam_decode<M: StepModel>(model: &M, state: M::State, beam: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::contract("beam size must be at least 1"));
    }
    check_max_len(max_len)?;
    let mut live_states = vec![state];
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut completed: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let logits = model.step(&mut live_states)?;
        let mut cand: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * logits[0].len());
        for (i, l) in logits.iter().enumerate() {
            for (tok, lp) in log_softmax(l).into_iter().enumerate() {
                cand.push((live[i].1 + lp, i, tok));
            }
        }
        // Stable: equal scores keep (row, token) expansion order.
        cand.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next_states = Vec::with_capacity(beam);
        let mut next_live = Vec::with_capacity(beam);
        for (rank, &(score, i, tok)) in cand.iter().enumerate() {
            if next_live.len() == beam {
                break;
            }
            let mut tokens = live[i].0.clone();
            tokens.push(tok);
            if tok == EOS {
                if rank < beam {
                    completed.push(Hypothesis {
                        tokens,
                        score,
                        domain: None,
                    });
                }
            } else {
                let mut s = live_states[i].clone();
                model.push(&mut s, tok);
                next_states.push(s);
                next_live.push((tokens, score));
            }
        }
        live_states = next_states;
        live = next_live;
        sort_stable(&mut completed);
        completed.truncate(beam);
        let best_live = live.first().map_or(f64::NEG_INFINITY, |l| l.1);
        if live.is_empty() || (completed.len() == beam && completed[beam - 1].score >= best_live) {
            break;
        }
    }
    let mut out = completed;
    for (tokens, score) in live {
        if out.len() >= beam {
            break;
        }
        out.push(Hypothesis {
            tokens,
            score,
            domain: None,
        });
    }
    Ok(out)
}

fn sort_stable(h: &mut [Hypothesis]) {
    h.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Ancestral sampling at temperature 1.
pub fn sample_decode<M: StepModel, R: Rng>(
    model: &M,
    mut state: M::State,
    rng: &mut R,
    max_len: usize,
) -> Result<Hypothesis> {
    check_max_len(max_len)?;
    let mut h = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        domain: None,
    };
    for _ in 0..max_len {
        let logits = model.step(std::slice::from_mut(&mut state))?;
        let lp = log_softmax(&logits[0]);
        let dist = WeightedIndex::new(lp.iter().map(|v| v.exp()))
            .map_err(|e| Error::NonFinite(format!("sampling distribution: {e}")))?;
        let tok = dist.sample(rng);
        h.tokens.push(tok);
        h.score += lp[tok];
        if tok == EOS {
            break;
        }
        model.push(&mut state, tok);
    }
    Ok(h)
}

/// Decoding options for whole corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    #[serde(default = "default_beam")]
    pub beam_size: usize,
    /// Generation limit; `0` means the model's `max_len`.
    #[serde(default)]
    pub max_len: usize,
}

fn default_beam() -> usize {
    4
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam_size: default_beam(),
            max_len: 0,
        }
    }
}

impl DecodeOptions {
    fn limit(&self, model: &Seq2Seq) -> usize {
        if self.max_len == 0 || self.max_len > model.config.max_len {
            model.config.max_len
        } else {
            self.max_len
        }
    }
}

const CHUNK: usize = 64;

fn chunks(sources: &[Vec<usize>]) -> impl Iterator<Item = (usize, &[Vec<usize>])> {
    sources.chunks(CHUNK).enumerate().map(|(i, c)| (i * CHUNK, c))
}

fn encode_chunk(model: &Seq2Seq, chunk: &[Vec<usize>]) -> Result<Vec<Arc<crate::model::CrossCache>>> {
    let zx = model.encode_source(&TokenMatrix::from_rows(chunk, PAD))?;
    model.cross_caches(&zx)
}

/// One hypothesis per domain for every source: hypothesis `k` is decoded
/// with the one-hot domain `k`. Beam mode keeps the top-1 of each
/// per-domain beam.
pub fn generate_all_domains(model: &Seq2Seq, sources: &[Vec<usize>], opts: DecodeOptions) -> Result<Vec<HypothesisSet>> {
    let n = model.n_domains();
    let max_len = opts.limit(model);
    let embeddings: Vec<Vec<f64>> = (0..n).map(|k| model.domain_embedding(k)).collect();
    let mut out = Vec::with_capacity(sources.len());
    for (_, chunk) in chunks(sources) {
        let caches = encode_chunk(model, chunk)?;
        let mut states = Vec::with_capacity(chunk.len() * n);
        for c in &caches {
            for e in &embeddings {
                states.push(model.start_state(c.clone(), e.clone())?);
            }
        }
        let hyps = match opts.mode {
            DecodeMode::Greedy => greedy_batch(model, states, max_len)?,
            DecodeMode::Beam => states
                .into_iter()
                .map(|s| Ok(beam_decode(model, s, opts.beam_size, max_len)?.remove(0)))
                .collect::<Result<Vec<_>>>()?,
        };
        let mut it = hyps.into_iter();
        for _ in 0..chunk.len() {
            out.push(
                (0..n)
                    .map(|k| {
                        let mut h = it.next().expect("n hypotheses per source");
                        h.domain = Some(k);
                        h
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Baseline diversity strategies for a model without usable domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum Baseline {
    /// All `K` hypotheses of a beam of width `K`.
    Beam(usize),
    /// `K` ancestral samples.
    Sample(usize),
}

/// `K` hypotheses per source from domain 0, via beam or sampling.
pub fn generate_baseline(
    model: &Seq2Seq,
    sources: &[Vec<usize>],
    baseline: Baseline,
    max_len: usize,
    seed: u64,
) -> Result<Vec<HypothesisSet>> {
    let max_len = if max_len == 0 { model.config.max_len } else { max_len.min(model.config.max_len) };
    let e = model.domain_embedding(0);
    let mut out = Vec::with_capacity(sources.len());
    for (offset, chunk) in chunks(sources) {
        let caches = encode_chunk(model, chunk)?;
        for (i, c) in caches.into_iter().enumerate() {
            let state = model.start_state(c, e.clone())?;
            let set = match baseline {
                Baseline::Beam(k) => {
                    let mut hs = beam_decode(model, state, k, max_len)?;
                    // A beam can end with fewer than K hypotheses when the
                    // search space is tiny; repeat the best to keep K.
                    while hs.len() < k {
                        hs.push(hs[0].clone());
                    }
                    hs
                }
                Baseline::Sample(k) => {
                    let mut r = rng::stream(seed, Stream::Sampling, (offset + i) as u64);
                    (0..k)
                        .map(|_| sample_decode(model, state.clone(), &mut r, max_len))
                        .collect::<Result<_>>()?
                }
            };
            out.push(set);
        }
    }
    Ok(out)
}

/// One line of a hypothesis file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisRecord {
    pub source_id: u64,
    pub domain: Option<usize>,
    pub tokens: Vec<usize>,
    pub text: String,
    pub score: f64,
}

/// Flattens hypothesis sets into records, in source then slot order.
pub fn to_records(ids: &[u64], sets: &[HypothesisSet], vocab: &Vocabulary) -> Result<Vec<HypothesisRecord>> {
    if ids.len() != sets.len() {
        return Err(Error::contract(format!("{} ids for {} hypothesis sets", ids.len(), sets.len())));
    }
    Ok(ids
        .iter()
        .zip(sets)
        .flat_map(|(&id, set)| {
            set.iter().map(move |h| HypothesisRecord {
                source_id: id,
                domain: h.domain,
                tokens: h.content().to_vec(),
                text: vocab.detokenize(&h.tokens),
                score: h.score,
            })
        })
        .collect())
}
