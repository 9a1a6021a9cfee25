//! Corpus BLEU with multiple references, mBLEU, Pairwise-BLEU and domain usage.
//!
//! BLEU-4, clipped n-gram counts (max over a hypothesis's references),
//! closest-reference brevity penalty with ties to the shorter length, no
//! smoothing. Counts are integers, so results do not depend on the order in
//! which sentences are visited.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::entropy_of;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// In `[0, 100]`.
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Reference length closest to `len`; ties go to the shorter one.
fn closest_ref_len<T>(len: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(len), r))
        .unwrap_or(0)
}

/// Integer statistics accumulated over a corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Stats {
    matches: [u64; MAX_ORDER],
    totals: [u64; MAX_ORDER],
    hyp_len: u64,
    ref_len: u64,
}

impl Stats {
    fn add<T: Eq + Hash>(&mut self, hyp: &[T], refs: &[Vec<T>]) {
        self.hyp_len += hyp.len() as u64;
        self.ref_len += closest_ref_len(hyp.len(), refs) as u64;
        for n in 1..=MAX_ORDER {
            let counts = ngram_counts(hyp, n);
            let mut max_ref: HashMap<&[T], u64> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &counts {
                self.matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
            }
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1) as u64;
        }
    }

    fn report(&self) -> BleuReport {
        let mut precisions = [0.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            if self.totals[n] > 0 {
                precisions[n] = self.matches[n] as f64 / self.totals[n] as f64;
            }
        }
        let brevity_penalty = if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        let score = if precisions.contains(&0.0) {
            0.0
        } else {
            let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
            100.0 * brevity_penalty * log_mean.exp()
        };
        BleuReport {
            score,
            precisions,
            matches: self.matches,
            totals: self.totals,
            brevity_penalty,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
        }
    }
}

/// Corpus-level BLEU of `hyps[i]` against the reference list `refs[i]`.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<Vec<T>>]) -> Result<BleuReport> {
    if hyps.is_empty() {
        return Err(Error::contract("BLEU of an empty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "{} hypotheses for {} reference lists",
            hyps.len(),
            refs.len()
        )));
    }
    let mut s = Stats::default();
    for (h, r) in hyps.iter().zip(refs) {
        if r.is_empty() {
            return Err(Error::contract("a hypothesis has no references"));
        }
        s.add(h, r);
    }
    Ok(s.report())
}

fn uniform_count<T>(sets: &[Vec<Vec<T>>]) -> Result<usize> {
    let n = sets.first().map_or(0, Vec::len);
    if let Some((i, s)) = sets.iter().enumerate().find(|(_, s)| s.len() != n) {
        return Err(Error::contract(format!(
            "source {i} has {} hypotheses, expected {n}",
            s.len()
        )));
    }
    Ok(n)
}

/// BLEU of every hypothesis of every source against that source's references.
pub fn mbleu<T: Eq + Hash>(hyp_sets: &[Vec<Vec<T>>], refs: &[Vec<Vec<T>>]) -> Result<BleuReport> {
    uniform_count(hyp_sets)?;
    if hyp_sets.len() != refs.len() {
        return Err(Error::contract(format!(
            "{} hypothesis sets for {} reference lists",
            hyp_sets.len(),
            refs.len()
        )));
    }
    if hyp_sets.is_empty() {
        return Err(Error::contract("BLEU of an empty corpus"));
    }
    let mut s = Stats::default();
    for (set, r) in hyp_sets.iter().zip(refs) {
        if r.is_empty() {
            return Err(Error::contract("a source has no references"));
        }
        for h in set {
            s.add(h, r);
        }
    }
    Ok(s.report())
}

/// BLEU over all ordered pairs `(j, k)`, `j ≠ k`, of a source's own hypotheses.
pub fn pairwise_bleu<T: Eq + Hash + Clone>(hyp_sets: &[Vec<Vec<T>>]) -> Result<BleuReport> {
    let n = uniform_count(hyp_sets)?;
    if n < 2 {
        return Err(Error::contract(format!("Pairwise-BLEU needs at least 2 hypotheses, got {n}")));
    }
    let mut s = Stats::default();
    for set in hyp_sets {
        for (j, hj) in set.iter().enumerate() {
            for (k, hk) in set.iter().enumerate() {
                if j != k {
                    s.add(hj, std::slice::from_ref(hk));
                }
            }
        }
    }
    Ok(s.report())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub histogram: Vec<usize>,
    pub entropy: f64,
    pub max_share: f64,
}

/// Histogram, entropy and largest share of domain assignments in `[0, n)`.
pub fn domain_usage_stats(assignments: &[usize], n: usize) -> Result<UsageStats> {
    if assignments.is_empty() {
        return Err(Error::contract("domain usage of an empty assignment list"));
    }
    let mut histogram = vec![0; n];
    for &a in assignments {
        if a >= n {
            return Err(Error::Index {
                what: "domain",
                index: a,
                size: n,
            });
        }
        histogram[a] += 1;
    }
    let total = assignments.len() as f64;
    let p: Vec<f64> = histogram.iter().map(|&c| c as f64 / total).collect();
    Ok(UsageStats {
        entropy: entropy_of(&p),
        max_share: p.iter().copied().fold(0.0, f64::max),
        histogram,
    })
}

/// Usage statistics of the argmax of each posterior row.
pub fn domain_usage_from_posteriors(posteriors: &[Vec<f64>]) -> Result<UsageStats> {
    let n = posteriors.first().map_or(0, Vec::len);
    let a: Vec<usize> = posteriors.iter().map(|p| crate::latent::argmax(p)).collect();
    domain_usage_stats(&a, n)
}

/// How the hypotheses of each source relate to its references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    /// Mean number of distinct hypotheses per source.
    pub mean_distinct: f64,
    /// Mean fraction of a source's references produced exactly by some hypothesis.
    pub reference_coverage: f64,
    /// Fraction of sources whose every hypothesis equals one of its references.
    pub all_exact: f64,
}

pub fn coverage_stats<T: Eq + Hash>(hyp_sets: &[Vec<Vec<T>>], refs: &[Vec<Vec<T>>]) -> Result<CoverageStats> {
    uniform_count(hyp_sets)?;
    if hyp_sets.is_empty() || hyp_sets.len() != refs.len() {
        return Err(Error::contract("coverage needs one non-empty reference list per hypothesis set"));
    }
    let (mut distinct, mut covered, mut exact) = (0.0, 0.0, 0.0);
    for (set, r) in hyp_sets.iter().zip(refs) {
        let uniq: HashSet<&Vec<T>> = set.iter().collect();
        distinct += uniq.len() as f64;
        let refset: HashSet<&Vec<T>> = r.iter().collect();
        covered += refset.iter().filter(|x| uniq.contains(*x)).count() as f64 / refset.len().max(1) as f64;
        if set.iter().all(|h| refset.contains(h)) {
            exact += 1.0;
        }
    }
    let n = hyp_sets.len() as f64;
    Ok(CoverageStats {
        mean_distinct: distinct / n,
        reference_coverage: covered / n,
        all_exact: exact / n,
    })
}

/// Whitespace tokenization for external text files.
pub fn whitespace_tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}
