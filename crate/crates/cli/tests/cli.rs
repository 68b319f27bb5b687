use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use tempfile::TempDir;

fn searnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_searnn"))
        .args(args)
        .output()
        .expect("spawn searnn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_lines(path: &Path, lines: &[&str]) {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).unwrap();
}

/// Small synthetic corpus plus a trained tiny model, shared by several tests.
struct Fixture {
    _dir: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(objective: &str) -> Fixture {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let o = searnn(&[
            "synth", "--out", p(&root), "--seed", "3", "--train", "60", "--dev", "20", "--test", "20",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let cfg = root.join("run.json");
        let o = searnn(&[
            "train",
            "--config",
            p(&cfg),
            "--objective",
            objective,
            "--set",
            "model.embed_dim=6",
            "--set",
            "model.hidden_dim=8",
            "--set",
            "train.max_steps=12",
            "--set",
            "train.eval_every=6",
            "--set",
            "train.batch_size=4",
            "--set",
            "train.max_decode_len=15",
            "--set",
            "train.train_eval_size=20",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        Fixture { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn checkpoint(&self) -> PathBuf {
        self.root.join("run").join("best.srnn")
    }
}

#[test]
fn prepare_counts_pairs_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let src = dir.path().join("a.src");
    let tgt = dir.path().join("a.tgt");
    let lines: Vec<String> = (0..10).map(|i| format!("tok{} shared word{}", i % 3, i)).collect();
    let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
    write_lines(&src, &refs);
    write_lines(&tgt, &refs);

    let run = |out: &Path| {
        let o = searnn(&["prepare", "--src", p(&src), "--tgt", p(&tgt), "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let (a, b) = (dir.path().join("one"), dir.path().join("two"));
    let text = run(&a);
    assert!(text.contains("pairs: 10"), "{text}");
    assert!(text.contains("histogram"));
    assert_eq!(text, run(&b));
    for f in ["src.vocab", "tgt.vocab", "corpus.cache"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn prepare_rejects_misaligned_files_without_writing() {
    let dir = TempDir::new().unwrap();
    let src = dir.path().join("a.src");
    let tgt = dir.path().join("a.tgt");
    let ten: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
    let ten: Vec<&str> = ten.iter().map(String::as_str).collect();
    write_lines(&src, &ten);
    write_lines(&tgt, &ten[..9]);
    let out = dir.path().join("out");
    let o = searnn(&["prepare", "--src", p(&src), "--tgt", p(&tgt), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("a.src") && err.contains("a.tgt"), "{err}");
    assert!(err.contains("10") && err.contains('9'), "{err}");
    assert!(!out.exists());
}

#[test]
fn train_writes_run_directory_and_reruns_identically() {
    let fx = Fixture::new("mle");
    let run = fx.path("run");
    for f in ["best.srnn", "last.srnn", "metrics.jsonl", "config.resolved.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() >= 4);

    // the resolved config alone reproduces the run
    let resolved = run.join("config.resolved.json");
    let rerun = fx.path("rerun");
    let o = searnn(&["train", "--config", p(&resolved), "--set", &format!("output_dir=\"{}\"", p(&rerun))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(metrics, fs::read_to_string(rerun.join("metrics.jsonl")).unwrap());
}

#[test]
fn searnn_training_logs_finite_losses() {
    let fx = Fixture::new("searnn");
    let metrics = fs::read_to_string(fx.path("run").join("metrics.jsonl")).unwrap();
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite(), "{line}");
    }
    let cfg = fs::read_to_string(fx.path("run").join("config.resolved.json")).unwrap();
    assert!(cfg.contains("\"searnn\""));
}

#[test]
fn invalid_config_values_exit_with_config_error() {
    let dir = TempDir::new().unwrap();
    let o = searnn(&["synth", "--out", p(dir.path()), "--train", "10", "--dev", "5", "--test", "5"]);
    assert!(o.status.success());
    let cfg = dir.path().join("run.json");

    let o = searnn(&["train", "--config", p(&cfg), "--set", "searnn.rollin=\"oracle\""]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("searnn.rollin"), "{err}");
    assert!(err.contains("reference") && err.contains("learned") && err.contains("mixed"), "{err}");

    let o = searnn(&["train", "--config", p(&cfg), "--set", "train.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.bogus"));
}

#[test]
fn evaluate_reports_bleu_and_appends_metrics() {
    let fx = Fixture::new("mle");
    let ck = fx.checkpoint();
    let log = fx.path("eval.jsonl");
    let (src, tgt) = (fx.path("test.src"), fx.path("test.tgt"));
    let o = searnn(&[
        "evaluate", "--checkpoint", p(&ck), "--src", p(&src), "--tgt", p(&tgt), "--metrics", p(&log),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("BLEU: "));
    let record: serde_json::Value = serde_json::from_str(fs::read_to_string(&log).unwrap().trim()).unwrap();
    assert_eq!(record["split"], "test");

    let o = searnn(&[
        "evaluate", "--checkpoint", p(&ck), "--src", p(&src), "--tgt", p(&tgt), "--metrics", p(&log),
        "--oracle-copy",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("BLEU: 1.0000"), "{}", stdout(&o));
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 2);
}

#[test]
fn evaluate_refuses_empty_data_and_foreign_vocabularies() {
    let fx = Fixture::new("mle");
    let ck = fx.checkpoint();
    let empty = fx.path("empty.txt");
    fs::write(&empty, "").unwrap();
    let o = searnn(&["evaluate", "--checkpoint", p(&ck), "--src", p(&empty), "--tgt", p(&empty)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("empty"));

    let other = fx.path("other");
    let words = fx.path("words.txt");
    write_lines(&words, &["completely different words", "nothing shared here"]);
    let o = searnn(&["prepare", "--src", p(&words), "--tgt", p(&words), "--out", p(&other)]);
    assert!(o.status.success());
    let o = searnn(&[
        "evaluate",
        "--checkpoint",
        p(&ck),
        "--src",
        p(&fx.path("test.src")),
        "--tgt",
        p(&fx.path("test.tgt")),
        "--vocab-dir",
        p(&other),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("vocabulary mismatch"), "{}", stderr(&o));
}

#[test]
fn translate_keeps_line_structure_and_handles_oov() {
    let fx = Fixture::new("mle");
    let ck = fx.checkpoint();
    let input = "w1 w2 w3\n\nzzz qqq unseen w4\n";
    let translate = || {
        let mut child = Command::new(env!("CARGO_BIN_EXE_searnn"))
            .args(["translate", "--checkpoint", p(&ck), "--max-len", "10"])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
        let o = child.wait_with_output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let out = translate();
    let lines: Vec<&str> = out.split('\n').collect();
    assert_eq!(lines.len(), 4, "{out:?}");
    assert_eq!(lines[1], "");
    assert_eq!(out, translate());

    let file = fx.path("in.txt");
    fs::write(&file, input).unwrap();
    let o = searnn(&["translate", "--checkpoint", p(&ck), "--max-len", "10", "--input", p(&file)]);
    assert_eq!(stdout(&o), out);
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_rule() {
    let o = searnn(&["gradcheck", "--dims", "small", "--seeds", "20"]);
    let out = stdout(&o);
    assert!(o.status.success(), "{out}{}", stderr(&o));
    assert!(out.contains("all layers passed"));
    for layer in ["matmul", "gru_step", "encoder", "decoder", "mle_loss", "ll_loss", "kl_loss"] {
        assert!(out.contains(&format!("PASS {layer}")), "{layer} missing:\n{out}");
    }
    for name in [
        "src_embed", "tgt_embed", "enc_fwd.W_z", "enc_bwd.U_h", "bridge.W", "dec.b_r", "out.W", "out.b",
    ] {
        assert!(out.contains(name), "{name} missing");
    }

    let o = searnn(&["gradcheck", "--seeds", "3", "--corrupt", "tanh"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).contains("FAIL"));

    let o = searnn(&["gradcheck", "--corrupt", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}

fn cost_lines(out: &str) -> Vec<(String, f64)> {
    out.lines()
        .filter(|l| l.contains(" cost "))
        .map(|l| {
            let mut it = l.split_whitespace();
            let tok = it.next().unwrap().to_string();
            assert_eq!(it.next(), Some("cost"));
            (tok, it.next().unwrap().parse().unwrap())
        })
        .collect()
}

#[test]
fn rollout_debug_shows_costs() {
    let fx = Fixture::new("mle");
    let ck = fx.checkpoint();
    let run = |extra: &[&str]| {
        let mut args = vec!["rollout-debug", "--checkpoint", p(&ck), "--pair", "2", "--step", "1"];
        args.extend_from_slice(extra);
        let o = searnn(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };

    let out = run(&["--rollin", "reference", "--rollout", "reference"]);
    let gold = out
        .lines()
        .find_map(|l| l.strip_prefix("gold next: "))
        .unwrap()
        .trim()
        .to_string();
    let costs = cost_lines(&out);
    // synthetic target vocabulary is 20 words plus 4 specials, under the 25 budget
    assert_eq!(costs.len(), 24);
    let gold_cost = costs.iter().find(|(t, _)| *t == gold).unwrap().1;
    assert_eq!(gold_cost, 0.0);
    assert!(costs.iter().filter(|(t, _)| *t != gold).all(|(_, c)| *c > 0.0));

    let mixed = run(&["--rollout", "mixed:0.5", "--seed", "9"]);
    assert_eq!(mixed, run(&["--rollout", "mixed:0.5", "--seed", "9"]));
    assert_eq!(cost_lines(&run(&["--full"])).len(), 24);

    let o = searnn(&["rollout-debug", "--checkpoint", p(&ck), "--pair", "999", "--step", "0"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn rollout_debug_samples_25_candidates_on_a_larger_vocabulary() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    let lines: Vec<String> = (0..40)
        .map(|i| (0..8).map(|j| format!("v{}", (i * 7 + j * 3) % 40)).collect::<Vec<_>>().join(" "))
        .collect();
    let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
    for f in ["train.src", "train.tgt", "dev.src", "dev.tgt"] {
        write_lines(&root.join(f), &refs);
    }
    let cfg = root.join("cfg.json");
    fs::write(
        &cfg,
        r#"{"data": {"train_src": "train.src", "train_tgt": "train.tgt", "dev_src": "dev.src", "dev_tgt": "dev.tgt"},
            "model": {"embed_dim": 4, "hidden_dim": 6},
            "train": {"max_steps": 2, "eval_every": 2, "batch_size": 2, "max_decode_len": 10, "train_eval_size": 4},
            "output_dir": "run"}"#,
    )
    .unwrap();
    let o = searnn(&["train", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = root.join("run").join("best.srnn");
    let o = searnn(&["rollout-debug", "--checkpoint", p(&ck), "--pair", "0", "--step", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(cost_lines(&stdout(&o)).len(), 25);
    let o = searnn(&["rollout-debug", "--checkpoint", p(&ck), "--pair", "0", "--step", "3", "--full"]);
    assert_eq!(cost_lines(&stdout(&o)).len(), 44);
}

#[test]
fn threads_flag_is_accepted() {
    let o = searnn(&["--threads", "2", "gradcheck", "--seeds", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
}
