//! Synthetic one-to-many translation corpus.
//!
//! Every source has `K` valid translations, one per rewrite mode. Modes are
//! recoverable from the target alone: sources only use the first half `A` of
//! the content vocabulary, start with a head token from `H ⊂ A` and never use
//! `H` elsewhere; substitution maps `A` into the second half `B`; rotating
//! modes append their own marker.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::CorpusEntry;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::vocab::{Vocabulary, RESERVED};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub modes: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// 20 content tokens, 4 modes, lengths 5..=10, 5k training pairs.
    pub fn desk(seed: u64) -> Self {
        Self {
            vocab_size: 20,
            modes: 4,
            min_len: 5,
            max_len: 10,
            train_size: 5_000,
            valid_size: 500,
            test_size: 500,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must be at least 4".into()));
        }
        if self.modes < 2 {
            return Err(Error::Config("modes must be at least 2".into()));
        }
        // Identity and reversal coincide on single-token sources.
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::Config("need 2 <= min_len <= max_len".into()));
        }
        if self.train_size + self.valid_size + self.test_size == 0 {
            return Err(Error::Config("corpus sizes are all zero".into()));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.vocab_size, self.modes.saturating_sub(3))
    }
}

/// Seeded rewrite parameters shared by all modes.
#[derive(Debug, Clone)]
pub struct ModeFamily {
    vocab: Vocabulary,
    modes: usize,
    /// Content offset -> content offset; maps `A` into `B`.
    perm: Vec<usize>,
    head: usize,
    half: usize,
    /// `(substitute, reverse, rotation)` for composed modes `m ≥ 4`.
    composed: Vec<(bool, bool, usize)>,
}

impl ModeFamily {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let v = spec.vocab_size;
        let half = v / 2;
        let head = (half / 3).max(1);
        let mut rng = rng::stream(spec.seed, Stream::Synth, 0);
        let mut b: Vec<usize> = (half..v).collect();
        b.shuffle(&mut rng);
        let mut a: Vec<usize> = (0..half).collect();
        a.shuffle(&mut rng);
        let mut perm = vec![0; v];
        for (i, &x) in (0..half).zip(b.iter()) {
            perm[i] = x;
        }
        for (i, &x) in (half..v).zip(b[half.min(b.len())..].iter().chain(a.iter())) {
            perm[i] = x;
        }
        let composed = (4..spec.modes)
            .map(|_| {
                let sub = rng.gen_bool(0.5);
                let rev = rng.gen_bool(0.5);
                let rot = rng.gen_range(1..=3);
                (sub, rev, rot)
            })
            .collect();
        Ok(Self {
            vocab: spec.vocabulary(),
            modes: spec.modes,
            perm,
            head,
            half,
            composed,
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    fn substitute(&self, xs: &[usize]) -> Vec<usize> {
        xs.iter().map(|&t| RESERVED + self.perm[t - RESERVED]).collect()
    }

    /// Applies mode `m` to a source sentence.
    pub fn apply(&self, src: &[usize], m: usize) -> Result<Vec<usize>> {
        if m >= self.modes {
            return Err(Error::Index {
                what: "mode",
                index: m,
                size: self.modes,
            });
        }
        if let Some(&bad) = src.iter().find(|&&t| !self.vocab.content_ids().contains(&t)) {
            return Err(Error::Input(format!("token {bad} is not a content token")));
        }
        let rotate = |xs: &mut Vec<usize>, r: usize| {
            if !xs.is_empty() {
                let r = r % xs.len();
                xs.rotate_left(r);
            }
        };
        Ok(match m {
            0 => src.to_vec(),
            1 => src.iter().rev().copied().collect(),
            2 => self.substitute(src),
            3 => {
                let mut y = src.to_vec();
                rotate(&mut y, 1);
                y.push(self.vocab.marker(3).expect("marker"));
                y
            }
            _ => {
                let (sub, rev, rot) = self.composed[m - 4];
                let mut y = if sub { self.substitute(src) } else { src.to_vec() };
                if rev {
                    y.reverse();
                }
                rotate(&mut y, rot);
                y.push(self.vocab.marker(m).expect("marker"));
                y
            }
        })
    }

    /// All `K` references of a source.
    pub fn references(&self, src: &[usize]) -> Result<Vec<Vec<usize>>> {
        (0..self.modes).map(|m| self.apply(src, m)).collect()
    }

    /// Modes that map `src` to `tgt` (usually exactly one).
    pub fn modes_of(&self, src: &[usize], tgt: &[usize]) -> Vec<usize> {
        (0..self.modes)
            .filter(|&m| self.apply(src, m).map(|y| y == tgt).unwrap_or(false))
            .collect()
    }

    fn sample_source<R: Rng>(&self, rng: &mut R, len: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(len);
        s.push(RESERVED + rng.gen_range(0..self.head));
        for _ in 1..len {
            s.push(RESERVED + rng.gen_range(self.head..self.half));
        }
        s
    }
}

/// Generated splits; test entries carry all `K` references.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthCorpus {
    pub train: Vec<CorpusEntry>,
    pub valid: Vec<CorpusEntry>,
    pub test: Vec<CorpusEntry>,
}

pub fn generate_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    let family = ModeFamily::new(spec)?;
    let mut rng = rng::stream(spec.seed, Stream::Synth, 1);
    let total = spec.train_size + spec.valid_size + spec.test_size;
    let mut seen = HashSet::with_capacity(total);
    let mut sources = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while sources.len() < total {
        attempts += 1;
        if attempts > total * 50 + 1000 {
            return Err(Error::Config(format!(
                "could only draw {} distinct sources out of {total}",
                sources.len()
            )));
        }
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let s = family.sample_source(&mut rng, len);
        if seen.insert(s.clone()) {
            sources.push(s);
        }
    }
    let mut out = SynthCorpus {
        train: Vec::with_capacity(spec.train_size),
        valid: Vec::with_capacity(spec.valid_size),
        test: Vec::with_capacity(spec.test_size),
    };
    for (i, source) in sources.into_iter().enumerate() {
        let id = i as u64;
        if i < spec.train_size + spec.valid_size {
            let m = rng.gen_range(0..spec.modes);
            let y = family.apply(&source, m)?;
            let e = CorpusEntry {
                id,
                source,
                references: vec![y],
            };
            if i < spec.train_size {
                out.train.push(e);
            } else {
                out.valid.push(e);
            }
        } else {
            let references = family.references(&source)?;
            out.test.push(CorpusEntry {
                id,
                source,
                references,
            });
        }
    }
    Ok(out)
}
