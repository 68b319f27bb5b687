//! Synthetic sequence-reversal corpus used for smoke runs and the
//! MLE-versus-SEARNN comparison.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReversalSpec {
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for ReversalSpec {
    fn default() -> Self {
        ReversalSpec {
            vocab: 20,
            min_len: 5,
            max_len: 12,
            train: 2000,
            dev: 500,
            test: 500,
        }
    }
}

pub type Lines = Vec<(String, String)>;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Lines,
    pub dev: Lines,
    pub test: Lines,
}

/// Source lines of `w0 … w{vocab-1}` words; each target is its source reversed.
pub fn reversal_corpus(spec: ReversalSpec, seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize| -> Lines {
        (0..n)
            .map(|_| {
                let len = rng.random_range(spec.min_len..=spec.max_len);
                let words: Vec<String> = (0..len)
                    .map(|_| format!("w{}", rng.random_range(0..spec.vocab)))
                    .collect();
                let rev: Vec<String> = words.iter().rev().cloned().collect();
                (words.join(" "), rev.join(" "))
            })
            .collect()
    };
    SyntheticCorpus {
        train: make(spec.train),
        dev: make(spec.dev),
        test: make(spec.test),
    }
}

#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    pub dev_src: PathBuf,
    pub dev_tgt: PathBuf,
    pub test_src: PathBuf,
    pub test_tgt: PathBuf,
}

impl SyntheticCorpus {
    /// Writes `{train,dev,test}.{src,tgt}` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<CorpusFiles> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, lines: &Lines, src: bool| -> Result<PathBuf> {
            let path = dir.join(name);
            let mut text = String::new();
            for (s, t) in lines {
                text.push_str(if src { s } else { t });
                text.push('\n');
            }
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        };
        Ok(CorpusFiles {
            train_src: write("train.src", &self.train, true)?,
            train_tgt: write("train.tgt", &self.train, false)?,
            dev_src: write("dev.src", &self.dev, true)?,
            dev_tgt: write("dev.tgt", &self.dev, false)?,
            test_src: write("test.src", &self.test, true)?,
            test_tgt: write("test.tgt", &self.test, false)?,
        })
    }
}
