//! Corpus files, batching and synthetic tasks.
//!
//! Parallel corpora are stored as aligned text files sharing a prefix:
//! `<prefix>.src`, `<prefix>.tgt` and, for refinement, `<prefix>.init`.
//! One whitespace-tokenised sequence per line; every file ends with a
//! newline and empty lines are rejected.

use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::vocab::{TokenId, TokenSeq, Vocab, DEFAULT_MAX_LEN, PAD};

pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthTask {
    Copy,
    Reverse,
    Sort,
    ToyTranslate,
}

impl FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "sort" => Ok(Self::Sort),
            "toy-translate" => Ok(Self::ToyTranslate),
            other => Err(Error::Usage(format!(
                "unknown task {other:?} (expected copy, reverse, sort or toy-translate)"
            ))),
        }
    }
}

/// One example of a parallel corpus in surface form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextPair {
    pub source: String,
    pub target: String,
}

/// Seed of the token mapping used by `toy-translate`; fixed so that every
/// split generated for a vocabulary size shares one translation rule.
const TRANSLATION_SEED: u64 = 0x7e57_ab1e;

fn translation_table(vocab_size: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..vocab_size).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(
        TRANSLATION_SEED ^ vocab_size as u64,
    ));
    perm
}

/// Deterministic synthetic parallel corpus over the symbols `0..vocab_size`.
pub fn make_synthetic_corpus(
    task: SynthTask,
    vocab_size: usize,
    length_range: RangeInclusive<usize>,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<TextPair>> {
    if vocab_size < 2 {
        return Err(Error::Usage(
            "synthetic vocabulary needs at least 2 symbols".into(),
        ));
    }
    if length_range.is_empty() || *length_range.end() + 2 > DEFAULT_MAX_LEN {
        return Err(Error::Usage(format!("bad length range {length_range:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = translation_table(vocab_size);
    let render = |xs: &[usize]| xs.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    Ok((0..n_pairs)
        .map(|_| {
            let len = rng.random_range(length_range.clone());
            let src: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab_size)).collect();
            let tgt = apply_task(task, &src, &table);
            TextPair {
                source: render(&src),
                target: render(&tgt),
            }
        })
        .collect())
}

fn apply_task(task: SynthTask, src: &[usize], table: &[usize]) -> Vec<usize> {
    match task {
        SynthTask::Copy => src.to_vec(),
        SynthTask::Reverse => src.iter().rev().copied().collect(),
        SynthTask::Sort => {
            let mut t = src.to_vec();
            t.sort_unstable();
            t
        }
        SynthTask::ToyTranslate => src.iter().rev().map(|&x| table[x]).collect(),
    }
}

/// Synthetic noise standing in for an imperfect first-pass output.
///
/// Each interior token is deleted with probability `drop_prob`; independently,
/// with probability `insert_prob` a random content token is inserted right
/// after its position. The expected length change is therefore exactly
/// `n * (insert_prob - drop_prob)`.
pub fn corrupt<R: Rng + ?Sized>(
    seq: &TokenSeq,
    drop_prob: f64,
    insert_prob: f64,
    vocab: &Vocab,
    rng: &mut R,
) -> TokenSeq {
    assert!((0.0..=1.0).contains(&drop_prob) && (0.0..=1.0).contains(&insert_prob));
    let content = vocab.content_ids();
    let mut out: Vec<TokenId> = Vec::with_capacity(seq.len() * 2);
    for &tok in seq.interior() {
        if rng.random::<f64>() >= drop_prob {
            out.push(tok);
        }
        if rng.random::<f64>() < insert_prob && !content.is_empty() && out.len() + 2 < DEFAULT_MAX_LEN {
            out.push(rng.random_range(content.clone()));
        }
    }
    TokenSeq::from_interior(&out).expect("corruption keeps sentinels")
}

/// Encoded training or evaluation example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub source: TokenSeq,
    pub target: TokenSeq,
    /// Initial sequence for refinement; `None` means generation from empty.
    pub init: Option<TokenSeq>,
}

impl Pair {
    pub fn initial(&self) -> TokenSeq {
        self.init.clone().unwrap_or_else(TokenSeq::empty)
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    if !text.ends_with('\n') {
        return Err(Error::Corpus {
            path: path.to_owned(),
            detail: "file does not end with a newline".into(),
        });
    }
    let lines: Vec<String> = text.lines().map(str::to_owned).collect();
    if let Some(i) = lines.iter().position(|l| l.trim().is_empty()) {
        return Err(Error::Corpus {
            path: path.to_owned(),
            detail: format!("line {} is empty", i + 1),
        });
    }
    Ok(lines)
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Aligned `.src` / `.tgt` / optional `.init` files in surface form.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TextCorpus {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub inits: Option<Vec<String>>,
}

impl TextCorpus {
    pub fn from_pairs(pairs: &[TextPair]) -> Self {
        Self {
            sources: pairs.iter().map(|p| p.source.clone()).collect(),
            targets: pairs.iter().map(|p| p.target.clone()).collect(),
            inits: None,
        }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Loads `<prefix>.src` and `<prefix>.tgt`, plus `<prefix>.init` when it
    /// exists.
    pub fn load(prefix: &Path) -> Result<Self> {
        let src = with_extension(prefix, "src");
        let tgt = with_extension(prefix, "tgt");
        let init = with_extension(prefix, "init");
        let sources = read_lines(&src)?;
        let targets = read_lines(&tgt)?;
        if sources.len() != targets.len() {
            return Err(Error::Corpus {
                path: tgt,
                detail: format!("{} targets for {} sources", targets.len(), sources.len()),
            });
        }
        let inits = if init.exists() {
            let lines = read_lines(&init)?;
            if lines.len() != sources.len() {
                return Err(Error::Corpus {
                    path: init,
                    detail: format!("{} initial lines for {} sources", lines.len(), sources.len()),
                });
            }
            Some(lines)
        } else {
            None
        };
        Ok(Self {
            sources,
            targets,
            inits,
        })
    }

    pub fn save(&self, prefix: &Path) -> Result<()> {
        write_lines(&with_extension(prefix, "src"), &self.sources)?;
        write_lines(&with_extension(prefix, "tgt"), &self.targets)?;
        if let Some(inits) = &self.inits {
            write_lines(&with_extension(prefix, "init"), inits)?;
        }
        Ok(())
    }

    pub fn encode(&self, vocab: &Vocab) -> Result<Vec<Pair>> {
        (0..self.len())
            .map(|i| {
                Ok(Pair {
                    source: vocab.encode(&self.sources[i])?,
                    target: vocab.encode(&self.targets[i])?,
                    init: match &self.inits {
                        Some(inits) => Some(vocab.encode(&inits[i])?),
                        None => None,
                    },
                })
            })
            .collect()
    }

    /// All lines, for vocabulary construction.
    pub fn all_lines(&self) -> impl Iterator<Item = &str> {
        self.sources
            .iter()
            .chain(&self.targets)
            .chain(self.inits.iter().flatten())
            .map(String::as_str)
    }
}

/// A minibatch with pad-extended id matrices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelBatch {
    pub sources: Vec<TokenSeq>,
    pub targets: Vec<TokenSeq>,
    pub inits: Vec<TokenSeq>,
    pub source_ids: Vec<Vec<TokenId>>,
    pub target_ids: Vec<Vec<TokenId>>,
    pub source_lens: Vec<usize>,
    pub target_lens: Vec<usize>,
}

fn pad_matrix(seqs: &[TokenSeq]) -> (Vec<Vec<TokenId>>, Vec<usize>) {
    let width = seqs.iter().map(TokenSeq::len).max().unwrap_or(0);
    let rows = seqs
        .iter()
        .map(|s| {
            let mut r = s.ids().to_vec();
            r.resize(width, PAD);
            r
        })
        .collect();
    (rows, seqs.iter().map(TokenSeq::len).collect())
}

impl ParallelBatch {
    pub fn new<'a>(pairs: impl IntoIterator<Item = &'a Pair>) -> Self {
        let mut sources = Vec::new();
        let mut targets = Vec::new();
        let mut inits = Vec::new();
        for p in pairs {
            sources.push(p.source.clone());
            targets.push(p.target.clone());
            inits.push(p.initial());
        }
        let (source_ids, source_lens) = pad_matrix(&sources);
        let (target_ids, target_lens) = pad_matrix(&targets);
        Self {
            sources,
            targets,
            inits,
            source_ids,
            target_ids,
            source_lens,
            target_lens,
        }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Epoch-wise shuffled minibatch indices with a fixed sentence count.
#[derive(Clone, Debug)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        assert!(n > 0 && batch_size > 0, "empty corpus or batch");
        let mut b = Self {
            order: (0..n).collect(),
            pos: n,
            batch_size: batch_size.min(n),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{BOS, EOS};

    #[test]
    fn task_rules() {
        let t = translation_table(10);
        assert_eq!(apply_task(SynthTask::Copy, &[3, 7, 1], &t), vec![3, 7, 1]);
        assert_eq!(apply_task(SynthTask::Reverse, &[3, 7, 1], &t), vec![1, 7, 3]);
        assert_eq!(apply_task(SynthTask::Sort, &[3, 7, 1], &t), vec![1, 3, 7]);
        assert_eq!(
            apply_task(SynthTask::ToyTranslate, &[3, 7, 1], &t),
            vec![t[1], t[7], t[3]]
        );
        let mut sorted = t.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_corpus_is_seed_deterministic() {
        let a = make_synthetic_corpus(SynthTask::Reverse, 20, 3..=12, 50, 9).unwrap();
        let b = make_synthetic_corpus(SynthTask::Reverse, 20, 3..=12, 50, 9).unwrap();
        let c = make_synthetic_corpus(SynthTask::Reverse, 20, 3..=12, 50, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for p in &a {
            let n = p.source.split_whitespace().count();
            assert!((3..=12).contains(&n));
        }
    }

    #[test]
    fn synthetic_corpus_needs_two_symbols() {
        assert!(make_synthetic_corpus(SynthTask::Copy, 1, 1..=2, 3, 0).is_err());
    }

    #[test]
    fn corrupt_extremes() {
        let vocab = Vocab::build(["1 2 3 4"], 1).unwrap();
        let s = vocab.encode("1 2 3").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(corrupt(&s, 0.0, 0.0, &vocab, &mut rng), s);
        assert_eq!(corrupt(&s, 1.0, 0.0, &vocab, &mut rng), TokenSeq::empty());
        let grown = corrupt(&s, 0.0, 1.0, &vocab, &mut rng);
        assert_eq!(grown.len(), 2 * s.len() - 2);
    }

    #[test]
    fn batch_pads_after_end_sentinel() {
        let vocab = Vocab::build(["a b c"], 1).unwrap();
        let pairs = vec![
            Pair {
                source: vocab.encode("a").unwrap(),
                target: vocab.encode("a b c").unwrap(),
                init: None,
            },
            Pair {
                source: vocab.encode("a b c").unwrap(),
                target: vocab.encode("c").unwrap(),
                init: None,
            },
        ];
        let b = ParallelBatch::new(&pairs);
        assert_eq!(b.source_lens, vec![3, 5]);
        assert_eq!(b.source_ids[0][..3], [BOS, vocab.id("a").unwrap(), EOS]);
        assert_eq!(b.source_ids[0][3..], [PAD, PAD]);
        assert_eq!(b.target_ids[1][3..], [PAD, PAD]);
        assert_eq!(b.inits[0], TokenSeq::empty());
    }

    #[test]
    fn batcher_covers_every_index_each_epoch() {
        let mut b = Batcher::new(10, 5, 3);
        let mut seen: Vec<usize> = b.next_batch();
        seen.extend(b.next_batch());
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn corpus_files_round_trip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("train");
        let mut corpus = TextCorpus::from_pairs(&[
            TextPair {
                source: "1 2".into(),
                target: "2 1".into(),
            },
            TextPair {
                source: "3".into(),
                target: "3".into(),
            },
        ]);
        corpus.inits = Some(vec!["2".into(), "3 3".into()]);
        corpus.save(&prefix).unwrap();
        assert_eq!(TextCorpus::load(&prefix).unwrap(), corpus);

        fs::write(with_extension(&prefix, "src"), "1 2\n\n").unwrap();
        assert!(matches!(TextCorpus::load(&prefix), Err(Error::Corpus { .. })));
        fs::write(with_extension(&prefix, "src"), "1 2\n3").unwrap();
        assert!(TextCorpus::load(&prefix).is_err());
        fs::write(with_extension(&prefix, "src"), "1 2\n").unwrap();
        assert!(TextCorpus::load(&prefix).is_err());
    }
}
