//! Training loop for both objectives with periodic evaluation, checkpoints
//! and a JSON-lines metrics log.
//!
//! A run directory holds `config.resolved.json`, `metrics.jsonl`,
//! `src.vocab`, `tgt.vocab`, `best.srnn` and `last.srnn`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{Objective, RunConfig};
use crate::corpus::{encode_pairs, make_batches, read_parallel, SentencePair, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, strip_special};
use crate::model::Seq2Seq;
use crate::optim::{adam_step, AdamConfig, LrScheduler};
use crate::params::Gradients;
use crate::policy::derive_seed;
use crate::searnn::{build_targets, mle_loss, mle_loss_graph, searnn_loss_graph};

pub const CONFIG_FILE: &str = "config.resolved.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.srnn";
pub const LAST_CHECKPOINT: &str = "last.srnn";
pub const SRC_VOCAB_FILE: &str = "src.vocab";
pub const TGT_VOCAB_FILE: &str = "tgt.vocab";

// seed-derivation streams
pub const INIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;
const STEP_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub bleu: f64,
    pub lr: f64,
    pub secs: f64,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Option<Vec<SentencePair>>,
}

impl Corpus {
    /// Reads the configured files and builds both vocabularies from the
    /// training side.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        cfg.check_files()?;
        let d = &cfg.data;
        let train = read_parallel(&d.train_src, &d.train_tgt)?;
        if train.is_empty() {
            return Err(Error::Data(format!("{} is empty", d.train_src.display())));
        }
        let dev = read_parallel(&d.dev_src, &d.dev_tgt)?;
        if dev.is_empty() {
            return Err(Error::Data(format!("{} is empty", d.dev_src.display())));
        }
        let test = match (&d.test_src, &d.test_tgt) {
            (Some(s), Some(t)) => Some(read_parallel(s, t)?),
            _ => None,
        };
        let src_lines: Vec<&str> = train.iter().map(|(s, _)| s.as_str()).collect();
        let tgt_lines: Vec<&str> = train.iter().map(|(_, t)| t.as_str()).collect();
        let src_vocab = Vocabulary::build(&src_lines, cfg.vocab.src_size, cfg.vocab.min_freq)?;
        let tgt_vocab = Vocabulary::build(&tgt_lines, cfg.vocab.tgt_size, cfg.vocab.min_freq)?;
        Ok(Corpus {
            train: encode_pairs(&src_vocab, &tgt_vocab, &train),
            dev: encode_pairs(&src_vocab, &tgt_vocab, &dev),
            test: test.map(|t| encode_pairs(&src_vocab, &tgt_vocab, &t)),
            src_vocab,
            tgt_vocab,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub steps: u64,
    pub best_dev_bleu: f64,
    pub test_bleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub bleu: f64,
}

/// Greedy-decodes every source and scores the outputs with corpus BLEU.
pub fn bleu_on(model: &Seq2Seq, pairs: &[SentencePair], max_len: usize) -> Result<f64> {
    let hyps = pairs
        .par_iter()
        .map(|p| model.greedy_decode(&p.source, max_len).map(|h| strip_special(&h)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<u32>> = pairs.iter().map(|p| strip_special(&p.target)).collect();
    Ok(corpus_bleu(&hyps, &refs)?.0)
}

/// Mean teacher-forced loss and greedy corpus BLEU.
pub fn evaluate(model: &Seq2Seq, pairs: &[SentencePair], max_len: usize) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let losses = pairs
        .par_iter()
        .map(|p| mle_loss(model, &p.source, &p.target))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        loss: losses.iter().sum::<f64>() / losses.len() as f64,
        bleu: bleu_on(model, pairs, max_len)?,
    })
}

pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    corpus: &'a Corpus,
    poison_at: Option<u64>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, corpus: &'a Corpus) -> Self {
        Trainer {
            cfg,
            corpus,
            poison_at: None,
        }
    }

    /// Test hook: overwrite one gradient entry with NaN before the update of
    /// the given step.
    pub fn poison_gradient_at(mut self, step: u64) -> Self {
        self.poison_at = Some(step);
        self
    }

    pub fn run(self) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        let tc = &cfg.train;
        let corpus = self.corpus;
        let dir = cfg.output_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let write = |name: &str, bytes: &[u8]| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write(CONFIG_FILE, cfg.to_json_pretty().as_bytes())?;
        corpus.src_vocab.save(&dir.join(SRC_VOCAB_FILE))?;
        corpus.tgt_vocab.save(&dir.join(TGT_VOCAB_FILE))?;
        let metrics_path = dir.join(METRICS_FILE);
        let mut log = MetricsLog::create(&metrics_path)?;

        let dims = cfg.model_dims(corpus.src_vocab.len(), corpus.tgt_vocab.len());
        let mut model = Seq2Seq::new(dims, derive_seed(cfg.seed, &[INIT_STREAM]))?;
        let mut sched = LrScheduler::new(tc.lr, tc.anneal_factor, tc.anneal_patience);
        let base_meta = CheckpointMeta::for_vocabs(&corpus.src_vocab, &corpus.tgt_vocab);
        let started = Instant::now();
        let secs = || {
            if tc.record_wall_clock {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            }
        };
        let train_eval = &corpus.train[..tc.train_eval_size.min(corpus.train.len())];

        let mut epoch = 0u64;
        let mut batches = make_batches(&corpus.train, tc.batch_size, derive_seed(cfg.seed, &[BATCH_STREAM, epoch]));
        let mut next_batch = 0usize;
        let mut best: Option<f64> = None;
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);

        for step in 1..=tc.max_steps as u64 {
            if next_batch == batches.len() {
                epoch += 1;
                batches = make_batches(&corpus.train, tc.batch_size, derive_seed(cfg.seed, &[BATCH_STREAM, epoch]));
                next_batch = 0;
            }
            let pairs: Vec<SentencePair> = batches[next_batch].pairs().collect();
            next_batch += 1;

            let loss = batch_gradients(&mut model, cfg, &pairs, derive_seed(cfg.seed, &[STEP_STREAM, step]))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at step {step}; last checkpoints kept in {}",
                    dir.display()
                )));
            }
            if self.poison_at == Some(step) {
                if let Some(p) = model.store_mut().iter_mut().next() {
                    p.grad.data_mut()[0] = f64::NAN;
                }
            }
            model.store_mut().clip_grad_norm(tc.clip_norm);
            adam_step(model.store_mut(), sched.lr(), AdamConfig::default()).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!(
                    "{m} at step {step}; last checkpoints kept in {}",
                    dir.display()
                )),
                e => e,
            })?;
            loss_sum += loss;
            loss_n += 1;

            if step % tc.eval_every as u64 == 0 || step == tc.max_steps as u64 {
                let lr = sched.lr();
                log.push(&RunMetrics {
                    step,
                    split: Split::Train,
                    loss: loss_sum / loss_n as f64,
                    bleu: bleu_on(&model, train_eval, tc.max_decode_len)?,
                    lr,
                    secs: secs(),
                })?;
                (loss_sum, loss_n) = (0.0, 0);
                let dev = evaluate(&model, &corpus.dev, tc.max_decode_len)?;
                log.push(&RunMetrics {
                    step,
                    split: Split::Dev,
                    loss: dev.loss,
                    bleu: dev.bleu,
                    lr,
                    secs: secs(),
                })?;
                sched.observe(dev.bleu);
                let meta = CheckpointMeta {
                    step,
                    dev_bleu: Some(dev.bleu),
                    ..base_meta.clone()
                };
                if best.is_none_or(|b| dev.bleu > b) {
                    best = Some(dev.bleu);
                    save_checkpoint(&dir.join(BEST_CHECKPOINT), &model, &meta)?;
                }
                save_checkpoint(&dir.join(LAST_CHECKPOINT), &model, &meta)?;
            }
        }

        let steps = tc.max_steps as u64;
        let test_bleu = match &corpus.test {
            Some(test) => {
                let best_model = load_checkpoint(&dir.join(BEST_CHECKPOINT))?.into_model()?;
                let ev = evaluate(&best_model, test, tc.max_decode_len)?;
                log.push(&RunMetrics {
                    step: steps,
                    split: Split::Test,
                    loss: ev.loss,
                    bleu: ev.bleu,
                    lr: sched.lr(),
                    secs: secs(),
                })?;
                Some(ev.bleu)
            }
            None => None,
        };
        log.finish()?;
        Ok(TrainOutcome {
            run_dir: dir,
            steps,
            best_dev_bleu: best.expect("the final step always evaluates"),
            test_bleu,
        })
    }
}

/// Loads the corpus and trains.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let corpus = Corpus::load(cfg)?;
    Trainer::new(cfg, &corpus).run()
}

/// Fills the store's gradient buffers with the batch-mean gradient and
/// returns the batch-mean loss.
///
/// SEARNN targets (roll-ins and roll-outs over frozen parameters) are built in
/// parallel; the differentiable pass then runs row by row.
fn batch_gradients(model: &mut Seq2Seq, cfg: &RunConfig, pairs: &[SentencePair], step_seed: u64) -> Result<f64> {
    let targets = match cfg.train.objective {
        Objective::Mle => None,
        Objective::Searnn => Some(
            pairs
                .par_iter()
                .enumerate()
                .map(|(row, p)| build_targets(model, &p.source, &p.target, &cfg.searnn, derive_seed(step_seed, &[row as u64])))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let mut grads = Gradients::for_store(model.store());
    let mut total = 0.0;
    for (row, p) in pairs.iter().enumerate() {
        let mut tape = model.tape();
        let loss = match &targets {
            None => mle_loss_graph(&mut tape, model, &p.source, &p.target)?,
            Some(t) => searnn_loss_graph(&mut tape, model, &p.source, &t[row], &cfg.searnn)?,
        };
        total += tape.value(loss).data()[0];
        tape.backward_into(loss, &mut grads)?;
    }
    let n = pairs.len() as f64;
    let store = model.store_mut();
    store.zero_grads();
    store.accumulate(&grads, 1.0 / n);
    Ok(total / n)
}

struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    fn push(&mut self, m: &RunMetrics) -> Result<()> {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<RunMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Appends one record to an existing metrics log.
pub fn append_metrics(path: &Path, m: &RunMetrics) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(m).expect("metrics serialize");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{reversal_corpus, ReversalSpec};
    use serde_json::json;

    fn tiny_config(dir: &Path, objective: &str, steps: usize) -> RunConfig {
        let spec = ReversalSpec {
            vocab: 6,
            min_len: 2,
            max_len: 4,
            train: 40,
            dev: 10,
            test: 10,
        };
        let files = reversal_corpus(spec, 7).write(&dir.join("data")).unwrap();
        RunConfig::from_value(json!({
            "data": {
                "train_src": files.train_src, "train_tgt": files.train_tgt,
                "dev_src": files.dev_src, "dev_tgt": files.dev_tgt,
                "test_src": files.test_src, "test_tgt": files.test_tgt,
            },
            "model": {"embed_dim": 6, "hidden_dim": 8},
            "train": {"objective": objective, "max_steps": steps, "batch_size": 4, "eval_every": 2,
                      "max_decode_len": 10, "train_eval_size": 10},
            "output_dir": dir.join("run"),
            "seed": 5,
        }))
        .unwrap()
    }

    #[test]
    fn one_step_smoke_run_writes_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), "mle", 1);
        let out = train(&cfg).unwrap();
        let m = read_metrics(&out.run_dir.join(METRICS_FILE)).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[0].split, Split::Train);
        assert_eq!(m[1].split, Split::Dev);
        assert_eq!(m[2].split, Split::Test);
        assert!(m.iter().all(|r| r.loss.is_finite() && r.secs == 0.0));
        for f in [CONFIG_FILE, BEST_CHECKPOINT, LAST_CHECKPOINT, SRC_VOCAB_FILE, TGT_VOCAB_FILE] {
            assert!(out.run_dir.join(f).is_file(), "{f}");
        }
    }

    #[test]
    fn searnn_runs_are_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path(), "searnn", 5);
        train(&cfg).unwrap();
        let first = fs::read(cfg.output_dir.join(METRICS_FILE)).unwrap();
        cfg.output_dir = dir.path().join("again");
        train(&cfg).unwrap();
        let second = fs::read(cfg.output_dir.join(METRICS_FILE)).unwrap();
        assert_eq!(first, second);
        let m = read_metrics(&cfg.output_dir.join(METRICS_FILE)).unwrap();
        assert!(m.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn best_checkpoint_records_max_dev_bleu() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), "mle", 12);
        let out = train(&cfg).unwrap();
        let m = read_metrics(&out.run_dir.join(METRICS_FILE)).unwrap();
        let max_dev = m
            .iter()
            .filter(|r| r.split == Split::Dev)
            .map(|r| r.bleu)
            .fold(f64::MIN, f64::max);
        let ck = load_checkpoint(&out.run_dir.join(BEST_CHECKPOINT)).unwrap();
        assert_eq!(ck.meta.dev_bleu, Some(max_dev));
        assert_eq!(out.best_dev_bleu, max_dev);
        // steps within a split are increasing
        for split in [Split::Train, Split::Dev] {
            let steps: Vec<u64> = m.iter().filter(|r| r.split == split).map(|r| r.step).collect();
            assert!(steps.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn poisoned_gradient_aborts_and_keeps_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), "mle", 10);
        let corpus = Corpus::load(&cfg).unwrap();
        let err = Trainer::new(&cfg, &corpus).poison_gradient_at(5).run().unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert!(err.to_string().contains("src_embed"), "{err}");
        let last = load_checkpoint(&cfg.output_dir.join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(last.meta.step, 4);
        assert!(last.store.iter().all(|(_, p)| p.value.is_finite()));
    }
}
