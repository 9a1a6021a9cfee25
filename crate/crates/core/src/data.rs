//! Corpus records, line-delimited JSON IO and training batches.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenMatrix;
use crate::rng::{self, Stream};
use crate::vocab::{EOS, PAD, START};

/// A source with one (training) or several (evaluation) references.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub id: u64,
    pub source: Vec<usize>,
    pub references: Vec<Vec<usize>>,
}

pub type Corpus = Vec<CorpusEntry>;

/// Writes one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Input(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads one JSON record per non-empty line; errors carry the line number.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, corpus: &[CorpusEntry]) -> Result<()> {
    write_jsonl(path, corpus)
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let corpus: Corpus = read_jsonl(path)?;
    for (i, e) in corpus.iter().enumerate() {
        if e.references.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("entry {} has no references", e.id),
            });
        }
    }
    Ok(corpus)
}

/// A padded training batch.
///
/// `tgt_in` is `[start] + y` and `tgt_out` is `y + [eos]`; both share the mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<u64>,
    pub src: TokenMatrix,
    pub tgt_in: TokenMatrix,
    pub tgt_out: TokenMatrix,
}

impl Batch {
    /// Builds a batch from `(id, source, target)` triples.
    pub fn new(items: &[(u64, &[usize], &[usize])]) -> Self {
        let src: Vec<Vec<usize>> = items.iter().map(|(_, s, _)| s.to_vec()).collect();
        let tgt_in: Vec<Vec<usize>> = items
            .iter()
            .map(|(_, _, t)| std::iter::once(START).chain(t.iter().copied()).collect())
            .collect();
        let tgt_out: Vec<Vec<usize>> = items
            .iter()
            .map(|(_, _, t)| t.iter().copied().chain(std::iter::once(EOS)).collect())
            .collect();
        Self {
            ids: items.iter().map(|(id, _, _)| *id).collect(),
            src: TokenMatrix::from_rows(&src, PAD),
            tgt_in: TokenMatrix::from_rows(&tgt_in, PAD),
            tgt_out: TokenMatrix::from_rows(&tgt_out, PAD),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            src: self.src.select(rows),
            tgt_in: self.tgt_in.select(rows),
            tgt_out: self.tgt_out.select(rows),
        }
    }
}

/// Batches of one epoch over the first reference of every entry, in a
/// seeded order that depends on `(seed, epoch)`.
pub fn batch_iter(
    corpus: &[CorpusEntry],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Batch> + '_> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Data, epoch));
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |idx| {
        let items: Vec<(u64, &[usize], &[usize])> = idx
            .iter()
            .map(|&i| {
                let e = &corpus[i];
                (e.id, e.source.as_slice(), e.references[0].as_slice())
            })
            .collect();
        Batch::new(&items)
    }))
}

/// Endless stream of batches: epoch after epoch.
pub struct BatchStream<'a> {
    corpus: &'a [CorpusEntry],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    current: std::vec::IntoIter<Batch>,
}

impl<'a> BatchStream<'a> {
    pub fn new(corpus: &'a [CorpusEntry], batch_size: usize, seed: u64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("empty training corpus".into()));
        }
        let current = batch_iter(corpus, batch_size, seed, 0)?.collect::<Vec<_>>().into_iter();
        Ok(Self {
            corpus,
            batch_size,
            seed,
            epoch: 0,
            current,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if let Some(b) = self.current.next() {
            return Some(b);
        }
        self.epoch += 1;
        self.current = batch_iter(self.corpus, self.batch_size, self.seed, self.epoch)
            .ok()?
            .collect::<Vec<_>>()
            .into_iter();
        self.current.next()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Corpus {
        (0..n)
            .map(|i| CorpusEntry {
                id: i as u64,
                source: vec![4 + i % 3; 1 + i % 4],
                references: vec![vec![5; 2 + i % 2]],
            })
            .collect()
    }

    #[test]
    fn batch_shift_and_padding() {
        let b = Batch::new(&[(0, &[4, 5], &[6, 7, 8]), (1, &[4], &[9])]);
        assert_eq!(b.tgt_in.row(0), &[START, 6, 7, 8]);
        assert_eq!(b.tgt_out.row(0), &[6, 7, 8, EOS]);
        assert_eq!(b.tgt_in.row(1), &[START, 9, PAD, PAD]);
        assert_eq!(b.tgt_out.row(1), &[9, EOS, PAD, PAD]);
        assert_eq!(b.tgt_out.row_mask(1), &[true, true, false, false]);
        assert_eq!(b.src.row_mask(1), &[true, false]);
    }

    #[test]
    fn one_batch_when_size_covers_dataset() {
        let c = toy(7);
        let batches: Vec<_> = batch_iter(&c, 7, 1, 0).unwrap().collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 7);
    }

    #[test]
    fn epoch_is_a_partition_and_seeded() {
        let c = toy(23);
        let ids: Vec<u64> = batch_iter(&c, 5, 9, 2).unwrap().flat_map(|b| b.ids).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(sorted, (0..23).collect::<Vec<u64>>());
        let again: Vec<u64> = batch_iter(&c, 5, 9, 2).unwrap().flat_map(|b| b.ids).collect();
        assert_eq!(ids, again);
        let other: Vec<u64> = batch_iter(&c, 5, 9, 3).unwrap().flat_map(|b| b.ids).collect();
        assert_ne!(ids, other);
        assert!(batch_iter(&c, 0, 9, 2).is_err());
    }

    #[test]
    fn stream_rolls_over_epochs() {
        let c = toy(4);
        let mut s = BatchStream::new(&c, 3, 0).unwrap();
        let sizes: Vec<usize> = (&mut s).take(4).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 1, 3, 1]);
        assert_eq!(s.epoch(), 1);
    }

    #[test]
    fn hand_written_fixture_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            "{\"id\":0,\"source\":[4,5],\"references\":[[5,4],[6]]}\n{\"id\":7,\"source\":[9],\"references\":[[9]]}\n",
        )
        .unwrap();
        let c = read_corpus(&path).unwrap();
        assert_eq!(
            c,
            vec![
                CorpusEntry {
                    id: 0,
                    source: vec![4, 5],
                    references: vec![vec![5, 4], vec![6]],
                },
                CorpusEntry {
                    id: 7,
                    source: vec![9],
                    references: vec![vec![9]],
                },
            ]
        );
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"id\":0,\"source\":[4],\"references\":[[4]]}\n{\"id\":1,\"source\":\n").unwrap();
        match read_corpus(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        write_corpus(&path, &[]).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 0);
        assert!(read_corpus(&path).unwrap().is_empty());
    }
}
