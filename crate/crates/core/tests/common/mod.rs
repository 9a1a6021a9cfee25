//! Helpers shared by integration tests.
#![allow(dead_code)]

pub mod gradsuite;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Brute-force corpus BLEU statistics: n-gram occurrences found by scanning
/// every window against every other window, no hashing.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct OracleStats {
    pub matches: [u64; 4],
    pub totals: [u64; 4],
    pub hyp_len: u64,
    pub ref_len: u64,
}

fn occurrences(tokens: &[u32], gram: &[u32]) -> u64 {
    let n = gram.len();
    if tokens.len() < n {
        return 0;
    }
    (0..=tokens.len() - n).filter(|&i| &tokens[i..i + n] == gram).count() as u64
}

impl OracleStats {
    pub fn add(&mut self, hyp: &[u32], refs: &[Vec<u32>]) {
        self.hyp_len += hyp.len() as u64;
        let mut best = refs[0].len();
        for r in refs {
            let (d, bd) = (r.len().abs_diff(hyp.len()), best.abs_diff(hyp.len()));
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        self.ref_len += best as u64;
        for n in 1..=4 {
            if hyp.len() < n {
                continue;
            }
            self.totals[n - 1] += (hyp.len() - n + 1) as u64;
            // Visit each distinct n-gram once: at its first position.
            for i in 0..=hyp.len() - n {
                let g = &hyp[i..i + n];
                if (0..i).any(|j| &hyp[j..j + n] == g) {
                    continue;
                }
                let count = occurrences(hyp, g);
                let cap = refs.iter().map(|r| occurrences(r, g)).max().unwrap_or(0);
                self.matches[n - 1] += count.min(cap);
            }
        }
    }

    /// Score with the standard formula, in the same floating-point order as
    /// the library so the comparison can be exact.
    pub fn score(&self) -> f64 {
        let mut p = [0.0; 4];
        for n in 0..4 {
            if self.totals[n] > 0 {
                p[n] = self.matches[n] as f64 / self.totals[n] as f64;
            }
        }
        if p.contains(&0.0) {
            return 0.0;
        }
        let bp = if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        let log_mean = p.iter().map(|x| x.ln()).sum::<f64>() / 4.0;
        100.0 * bp * log_mean.exp()
    }
}

pub fn oracle_bleu(hyps: &[Vec<u32>], refs: &[Vec<Vec<u32>>]) -> OracleStats {
    let mut s = OracleStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        s.add(h, r);
    }
    s
}

pub fn oracle_mbleu(sets: &[Vec<Vec<u32>>], refs: &[Vec<Vec<u32>>]) -> OracleStats {
    let mut s = OracleStats::default();
    for (set, r) in sets.iter().zip(refs) {
        for h in set {
            s.add(h, r);
        }
    }
    s
}

pub fn oracle_pairwise(sets: &[Vec<Vec<u32>>]) -> OracleStats {
    let mut s = OracleStats::default();
    for set in sets {
        for j in 0..set.len() {
            for k in 0..set.len() {
                if j != k {
                    s.add(&set[j], &[set[k].clone()]);
                }
            }
        }
    }
    s
}

/// A random corpus of at most 10 sources over a 4-token alphabet, with
/// `n_hyp` hypotheses and 1 to 3 references per source.
pub struct RandomCorpus {
    pub sets: Vec<Vec<Vec<u32>>>,
    pub refs: Vec<Vec<Vec<u32>>>,
}

pub fn random_corpus(seed: u64, n_hyp: usize) -> RandomCorpus {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let sources = r.gen_range(1..=10);
    let sentence = |r: &mut ChaCha8Rng| -> Vec<u32> {
        let len = r.gen_range(0..=9);
        (0..len).map(|_| r.gen_range(0..4)).collect()
    };
    let mut sets = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..sources {
        sets.push((0..n_hyp).map(|_| sentence(&mut r)).collect());
        let k = r.gen_range(1..=3);
        refs.push((0..k).map(|_| sentence(&mut r)).collect());
    }
    RandomCorpus { sets, refs }
}
