//! `searnn` command-line driver.
//!
//! Exit codes: 0 success, 2 invalid configuration or arguments, 3 data or
//! checkpoint problems, 4 numeric failure (non-finite loss or gradient, or a
//! failed gradient check).

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use searnn::autodiff::{Fault, OpKind};
use searnn::checkpoint::{load_checkpoint, Checkpoint};
use searnn::config::{Objective, RunConfig};
use searnn::corpus::{encode_pairs, read_parallel, tokenize, write_cache, SentencePair, Vocabulary};
use searnn::layer_checks::{check_all_layers, small_dims, CheckOptions, DEFAULT_EPS, DEFAULT_TOL};
use searnn::metrics::{corpus_bleu, strip_special, truncate_at_eos};
use searnn::policy::{derive_seed, roll_in, roll_out, PolicyKind, ROLLIN_STREAM};
use searnn::searnn::{compute_cost_vector, mle_loss, sample_candidates, Sampling, SearnnConfig};
use searnn::synthetic::{reversal_corpus, ReversalSpec};
use searnn::trainer::{self, append_metrics, RunMetrics, Split};
use searnn::{Error, ErrorKind, Seq2Seq};

#[derive(Parser, Debug)]
#[command(name = "searnn", version, about = "Train and inspect roll-in/roll-out sequence models")]
struct Cli {
    /// Cap on worker threads used for roll-outs and evaluation.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build vocabularies and a binary token-id cache from a parallel corpus.
    Prepare {
        #[arg(long, value_name = "FILE")]
        src: PathBuf,
        #[arg(long, value_name = "FILE")]
        tgt: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Maximum vocabulary size per side, including the four specials.
        #[arg(long, default_value_t = 30_000)]
        vocab_size: usize,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
    },
    /// Train a model; writes checkpoints, metrics and the resolved config.
    Train {
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
        /// Override a config value, e.g. `--set train.lr=0.01`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Corpus BLEU of greedy translations; appends a test record to the metrics log.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        src: PathBuf,
        #[arg(long, value_name = "FILE")]
        tgt: PathBuf,
        /// Directory holding src.vocab and tgt.vocab (default: the checkpoint's directory).
        #[arg(long, value_name = "DIR")]
        vocab_dir: Option<PathBuf>,
        /// Metrics log to append to (default: metrics.jsonl next to the checkpoint).
        #[arg(long, value_name = "FILE")]
        metrics: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        max_len: usize,
        /// Score the references against themselves instead of decoding.
        #[arg(long, hide = true)]
        oracle_copy: bool,
    },
    /// Translate one sentence per line from a file or stdin.
    Translate {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Input file; stdin when omitted.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        vocab_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        max_len: usize,
    },
    /// Finite-difference check of every primitive and model layer.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = DimsArg::Small)]
        dims: DimsArg,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        /// Scale the backward rule of this primitive (negative control).
        #[arg(long, value_name = "OP")]
        corrupt: Option<String>,
        #[arg(long, default_value_t = 1.1)]
        corrupt_factor: f64,
    },
    /// Show candidates, roll-out completions and costs for one cell.
    RolloutDebug {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Zero-based line index into the corpus.
        #[arg(long)]
        pair: usize,
        /// Decoder cell (zero-based).
        #[arg(long)]
        step: usize,
        /// Source file (default: the run's training source).
        #[arg(long, value_name = "FILE")]
        src: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        tgt: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        vocab_dir: Option<PathBuf>,
        /// reference | learned | mixed:<p> (default: the run's setting).
        #[arg(long)]
        rollin: Option<PolicyKind>,
        #[arg(long)]
        rollout: Option<PolicyKind>,
        /// Use the whole vocabulary as candidates.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic reversal corpus and a starter config.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        dev: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ObjectiveArg {
    Mle,
    Searnn,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DimsArg {
    Small,
}

/// Outcome that is not an error but should still exit non-zero.
struct Failed(u8);

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(Failed(code))) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()).map(Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Numeric) => 4,
        _ => 1,
    }
}

fn run(cmd: Command) -> Result<Option<Failed>> {
    match cmd {
        Command::Prepare {
            src,
            tgt,
            out,
            vocab_size,
            min_freq,
        } => prepare(&src, &tgt, &out, vocab_size, min_freq).map(|_| None),
        Command::Train {
            config,
            objective,
            mut overrides,
        } => {
            if let Some(o) = objective {
                let name = match o {
                    ObjectiveArg::Mle => Objective::Mle,
                    ObjectiveArg::Searnn => Objective::Searnn,
                };
                overrides.push(format!("train.objective=\"{name}\""));
            }
            let cfg = RunConfig::load(&config, &overrides)?;
            let out = trainer::train(&cfg)?;
            println!("run directory: {}", out.run_dir.display());
            println!("steps: {}", out.steps);
            println!("best dev BLEU: {:.4}", out.best_dev_bleu);
            if let Some(b) = out.test_bleu {
                println!("test BLEU: {b:.4}");
            }
            Ok(None)
        }
        Command::Evaluate {
            checkpoint,
            src,
            tgt,
            vocab_dir,
            metrics,
            max_len,
            oracle_copy,
        } => evaluate(&checkpoint, &src, &tgt, vocab_dir, metrics, max_len, oracle_copy).map(|_| None),
        Command::Translate {
            checkpoint,
            input,
            vocab_dir,
            max_len,
        } => translate(&checkpoint, input.as_deref(), vocab_dir, max_len).map(|_| None),
        Command::Gradcheck {
            dims: DimsArg::Small,
            seeds,
            eps,
            tol,
            corrupt,
            corrupt_factor,
        } => {
            let fault = match corrupt {
                Some(name) => Some(Fault {
                    op: OpKind::from_name(&name).ok_or_else(|| {
                        let all: Vec<&str> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
                        Error::Config {
                            path: "--corrupt".into(),
                            message: format!("unknown primitive `{name}`; allowed: {}", all.join(", ")),
                        }
                    })?,
                    factor: corrupt_factor,
                }),
                None => None,
            };
            gradcheck(CheckOptions {
                seeds,
                eps,
                tol,
                dims: small_dims(),
                fault,
            })
        }
        Command::RolloutDebug {
            checkpoint,
            pair,
            step,
            src,
            tgt,
            vocab_dir,
            rollin,
            rollout,
            full,
            seed,
        } => rollout_debug(RolloutDebug {
            checkpoint,
            pair,
            step,
            src,
            tgt,
            vocab_dir,
            rollin,
            rollout,
            full,
            seed,
        })
        .map(|_| None),
        Command::Synth {
            out,
            seed,
            train,
            dev,
            test,
        } => synth(&out, seed, train, dev, test).map(|_| None),
    }
}

fn prepare(src: &Path, tgt: &Path, out: &Path, vocab_size: usize, min_freq: usize) -> Result<()> {
    // everything is read and validated before the first write
    let lines = read_parallel(src, tgt)?;
    let src_lines: Vec<&str> = lines.iter().map(|(s, _)| s.as_str()).collect();
    let tgt_lines: Vec<&str> = lines.iter().map(|(_, t)| t.as_str()).collect();
    let src_vocab = Vocabulary::build(&src_lines, vocab_size, min_freq)?;
    let tgt_vocab = Vocabulary::build(&tgt_lines, vocab_size, min_freq)?;
    let pairs = encode_pairs(&src_vocab, &tgt_vocab, &lines);

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    src_vocab.save(&out.join(trainer::SRC_VOCAB_FILE))?;
    tgt_vocab.save(&out.join(trainer::TGT_VOCAB_FILE))?;
    write_cache(&out.join("corpus.cache"), &pairs)?;

    println!("pairs: {}", pairs.len());
    println!("source vocabulary: {}", src_vocab.len());
    println!("target vocabulary: {}", tgt_vocab.len());
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for (s, _) in &lines {
        *hist.entry(tokenize(s).len()).or_default() += 1;
    }
    println!("source length histogram (tokens: pairs):");
    for (len, n) in hist {
        println!("  {len:>4}: {n}");
    }
    Ok(())
}

struct Loaded {
    model: Seq2Seq,
    checkpoint: Checkpoint,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
}

fn load_model(checkpoint: &Path, vocab_dir: Option<PathBuf>) -> Result<Loaded> {
    let dir = vocab_dir.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    let src_vocab = Vocabulary::load(&dir.join(trainer::SRC_VOCAB_FILE))?;
    let tgt_vocab = Vocabulary::load(&dir.join(trainer::TGT_VOCAB_FILE))?;
    let ck = load_checkpoint(checkpoint)?;
    ck.check_vocabs(checkpoint, &src_vocab, &tgt_vocab)?;
    let model = ck.clone().into_model()?;
    Ok(Loaded {
        model,
        checkpoint: ck,
        src_vocab,
        tgt_vocab,
    })
}

fn evaluate(
    checkpoint: &Path,
    src: &Path,
    tgt: &Path,
    vocab_dir: Option<PathBuf>,
    metrics: Option<PathBuf>,
    max_len: usize,
    oracle_copy: bool,
) -> Result<()> {
    let loaded = load_model(checkpoint, vocab_dir)?;
    let lines = read_parallel(src, tgt)?;
    if lines.is_empty() {
        return Err(Error::Data(format!("{} is empty", src.display())).into());
    }
    let pairs = encode_pairs(&loaded.src_vocab, &loaded.tgt_vocab, &lines);
    let refs: Vec<Vec<u32>> = pairs.iter().map(|p| strip_special(&p.target)).collect();
    let hyps: Vec<Vec<u32>> = if oracle_copy {
        refs.clone()
    } else {
        pairs
            .iter()
            .map(|p| loaded.model.greedy_decode(&p.source, max_len).map(|h| strip_special(&h)))
            .collect::<searnn::Result<_>>()?
    };
    let bleu = corpus_bleu(&hyps, &refs)?.0;
    let loss = pairs
        .iter()
        .map(|p| mle_loss(&loaded.model, &p.source, &p.target))
        .sum::<searnn::Result<f64>>()?
        / pairs.len() as f64;
    println!("BLEU: {bleu:.4}");
    println!("loss: {loss:.6}");
    let metrics = metrics.unwrap_or_else(|| {
        checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(trainer::METRICS_FILE)
    });
    append_metrics(
        &metrics,
        &RunMetrics {
            step: loaded.checkpoint.meta.step,
            split: Split::Test,
            loss,
            bleu,
            lr: 0.0,
            secs: 0.0,
        },
    )?;
    Ok(())
}

fn translate(checkpoint: &Path, input: Option<&Path>, vocab_dir: Option<PathBuf>, max_len: usize) -> Result<()> {
    let loaded = load_model(checkpoint, vocab_dir)?;
    let reader: Box<dyn BufRead> = match input {
        Some(p) => Box::new(io::BufReader::new(
            fs::File::open(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?,
        )),
        None => Box::new(io::stdin().lock()),
    };
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for line in reader.lines() {
        let line = line?;
        if tokenize(&line).is_empty() {
            writeln!(out)?;
            continue;
        }
        let ids = loaded.src_vocab.encode(&line);
        let hyp = loaded.model.greedy_decode(&ids, max_len)?;
        writeln!(out, "{}", loaded.tgt_vocab.decode(&hyp))?;
    }
    out.flush()?;
    Ok(())
}

fn gradcheck(opts: CheckOptions) -> Result<Option<Failed>> {
    println!(
        "gradient check: {} seeds, eps {:e}, tolerance {:e}{}",
        opts.seeds,
        opts.eps,
        opts.tol,
        match opts.fault {
            Some(f) => format!(", corrupted `{}` x{}", f.op.name(), f.factor),
            None => String::new(),
        }
    );
    let reports = check_all_layers(&opts)?;
    let mut all = true;
    for r in &reports {
        all &= r.passed;
        println!(
            "{} {:<12} max rel err {:.3e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.layer,
            r.max_rel_err
        );
        for p in &r.params {
            println!("       {:<14} {:.3e}", p.name, p.max_rel_err);
        }
    }
    println!("{}", if all { "all layers passed" } else { "gradient check FAILED" });
    Ok(if all { None } else { Some(Failed(4)) })
}

struct RolloutDebug {
    checkpoint: PathBuf,
    pair: usize,
    step: usize,
    src: Option<PathBuf>,
    tgt: Option<PathBuf>,
    vocab_dir: Option<PathBuf>,
    rollin: Option<PolicyKind>,
    rollout: Option<PolicyKind>,
    full: bool,
    seed: u64,
}

fn rollout_debug(args: RolloutDebug) -> Result<()> {
    let loaded = load_model(&args.checkpoint, args.vocab_dir.clone())?;
    let run_dir = args.checkpoint.parent().unwrap_or(Path::new("."));
    let run_cfg = fs::read_to_string(run_dir.join(trainer::CONFIG_FILE))
        .ok()
        .map(|t| RunConfig::from_json_str(&t))
        .transpose()?;
    let mut cfg = run_cfg.as_ref().map(|c| c.searnn).unwrap_or_else(SearnnConfig::default);
    if let Some(p) = args.rollin {
        cfg.rollin = p;
    }
    if let Some(p) = args.rollout {
        cfg.rollout = p;
    }
    if args.full {
        cfg.sampling = Sampling::Full;
    }
    let (src, tgt) = match (args.src, args.tgt, &run_cfg) {
        (Some(s), Some(t), _) => (s, t),
        (None, None, Some(c)) => (c.data.train_src.clone(), c.data.train_tgt.clone()),
        _ => bail!(Error::Config {
            path: "--src/--tgt".into(),
            message: "give both files, or neither to use the run's training data".into(),
        }),
    };
    let lines = read_parallel(&src, &tgt)?;
    let (s, t) = lines.get(args.pair).ok_or_else(|| {
        anyhow!(Error::Data(format!(
            "pair {} out of range: corpus has {} pairs",
            args.pair,
            lines.len()
        )))
    })?;
    let pair = SentencePair::encode(&loaded.src_vocab, &loaded.tgt_vocab, s, t);
    let model = &loaded.model;
    let traj = roll_in(
        model,
        &pair.source,
        &pair.target,
        cfg.rollin,
        derive_seed(args.seed, &[ROLLIN_STREAM]),
    )?;
    if args.step >= traj.steps() {
        bail!(Error::Data(format!(
            "step {} out of range: reference has {} cells",
            args.step,
            traj.steps()
        )));
    }
    let t_step = args.step;
    let candidates = match cfg.sampling {
        Sampling::Full => (0..model.dims().tgt_vocab as u32).collect(),
        Sampling::Sampled { top_k, neighbors } => sample_candidates(
            &traj.score_vectors[t_step].scores,
            &pair.target,
            t_step,
            top_k,
            neighbors,
        ),
    };
    let costs = compute_cost_vector(
        model,
        &traj,
        t_step,
        &candidates,
        cfg.rollout,
        cfg.max_rollout_len,
        args.seed,
    )?;
    let words = |ids: &[u32]| -> String {
        ids.iter()
            .map(|&i| loaded.tgt_vocab.token(i).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("source:    {s}");
    println!("reference: {t}");
    println!("roll-in {} / roll-out {}, cell {t_step}", cfg.rollin, cfg.rollout);
    let prefix = &traj.chosen_tokens[1..=t_step];
    println!("prefix:    {}", words(prefix));
    println!("gold next: {}", words(&pair.target[t_step + 1..t_step + 2]));
    println!("candidates: {}", candidates.len());
    let suffix = &pair.target[(t_step + 2).min(pair.target.len())..];
    for (&a, &c) in costs.candidates.iter().zip(&costs.costs) {
        let completion = roll_out(
            model,
            &traj.states[t_step + 1],
            a,
            suffix,
            cfg.rollout,
            cfg.max_rollout_len,
            derive_seed(args.seed, &[t_step as u64, a as u64]),
        )?;
        let full: Vec<u32> = prefix.iter().chain(&completion).copied().collect();
        println!(
            "  {:>10}  cost {c:.4}  ŷ = {}",
            loaded.tgt_vocab.token(a).unwrap_or("?"),
            words(truncate_at_eos(&full))
        );
    }
    Ok(())
}

fn synth(out: &Path, seed: u64, train: usize, dev: usize, test: usize) -> Result<()> {
    let spec = ReversalSpec {
        train,
        dev,
        test,
        ..ReversalSpec::default()
    };
    let files = reversal_corpus(spec, seed).write(out)?;
    let config = serde_json::json!({
        "data": {
            "train_src": "train.src", "train_tgt": "train.tgt",
            "dev_src": "dev.src", "dev_tgt": "dev.tgt",
            "test_src": "test.src", "test_tgt": "test.tgt",
        },
        "output_dir": "run",
        "seed": seed,
    });
    let cfg_path = out.join("run.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&config)? + "\n")
        .with_context(|| format!("writing {}", cfg_path.display()))?;
    println!("wrote {} and a starter config {}", files.train_src.parent().unwrap_or(out).display(), cfg_path.display());
    Ok(())
}
