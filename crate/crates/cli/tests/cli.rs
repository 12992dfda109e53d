use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_semmatch");

const SMALL: &str = "\
seed = 3
synth.products = 1200
synth.queries = 200
tokenizer.budget.unigram = 400
tokenizer.budget.ngram2 = 100
tokenizer.budget.char3 = 300
tokenizer.oov_bins = 500
model.dim = 16
train.epochs = 2
train.batch_size = 64
eval.k = 20
eval.corpus_size = 600
";

fn semmatch(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = semmatch(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs generate, vocabulary, preprocess, train, embed and evaluate in `dir`.
fn pipeline(dir: &Path) -> Vec<u8> {
    let conf = dir.join("small.conf");
    std::fs::write(&conf, SMALL).unwrap();
    let c = s(&conf);
    let data = dir.join("data");
    let model = dir.join("model");
    ok(&["--config", c, "gen-synthetic", "--out", s(&data)]);
    let log = data.join("train_log.tsv");
    let vocab = model.join("vocab.txt");
    ok(&["--config", c, "build-vocab", "--input", s(&log), "--out", s(&vocab)]);
    let rec = model.join("train.rec");
    ok(&["--config", c, "preprocess", "--input", s(&log), "--vocab", s(&vocab), "--out", s(&rec)]);
    let ckpt = model.join("model.ckpt");
    ok(&[
        "--config", c, "train", "--data", s(&data), "--vocab", s(&vocab), "--records", s(&rec), "--out", s(&ckpt),
    ]);
    let idx = model.join("products.idx");
    ok(&[
        "--config",
        c,
        "embed-products",
        "--model",
        s(&ckpt),
        "--catalog",
        s(&data.join("catalog.tsv")),
        "--out",
        s(&idx),
    ]);
    let metrics = model.join("metrics.txt");
    let out = ok(&["--config", c, "evaluate", "--model", s(&ckpt), "--data", s(&data), "--metrics", s(&metrics)]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("Recall@20"), "{table}");
    std::fs::read(metrics).unwrap()
}

#[test]
fn end_to_end_runs_are_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = pipeline(a.path());
    let mb = pipeline(b.path());
    assert_eq!(ma, mb);
    let text = String::from_utf8(ma).unwrap();
    for key in ["recall", "map", "matching_ndcg", "ranking_mrr"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{key} = "))), "{text}");
    }
    for name in ["model.ckpt", "products.idx", "vocab.txt", "train.rec"] {
        assert_eq!(
            std::fs::read(a.path().join("model").join(name)).unwrap(),
            std::fs::read(b.path().join("model").join(name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn query_prints_at_most_k_sorted_lines() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let model = dir.path().join("model");
    let out = ok(&[
        "--config",
        s(&dir.path().join("small.conf")),
        "query",
        "--model",
        s(&model.join("model.ckpt")),
        "--index",
        s(&model.join("products.idx")),
        "--text",
        "running shoes",
        "--k",
        "10",
        "--threshold",
        "-1",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let scores: Vec<f64> = text
        .lines()
        .map(|l| {
            let (id, score) = l.split_once('\t').expect("id and score");
            assert!(!id.is_empty());
            score.parse().unwrap()
        })
        .collect();
    assert!(!scores.is_empty() && scores.len() <= 10, "{text}");
    assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{text}");
}

#[test]
fn worker_count_does_not_change_metrics() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let c = dir.path().join("small.conf");
    let model = dir.path().join("model").join("model.ckpt");
    let data = dir.path().join("data");
    let mut files = Vec::new();
    for workers in ["1", "3"] {
        let m = dir.path().join(format!("metrics-{workers}.txt"));
        ok(&[
            "--config",
            s(&c),
            "--set",
            &format!("workers={workers}"),
            "evaluate",
            "--model",
            s(&model),
            "--data",
            s(&data),
            "--metrics",
            s(&m),
        ]);
        files.push(std::fs::read(m).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn shard_check_reports_three_scalars_per_shard() {
    let out = ok(&["shard-check", "--n", "4", "--dim", "32", "--pairs", "50", "--seed", "1"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let partials = text.lines().find(|l| l.starts_with("exchange = partials")).unwrap();
    assert!(partials.contains("scalars_per_pair = 12"), "{partials}");
    let dev: f64 = partials
        .split('\t')
        .find_map(|f| f.strip_prefix("max_deviation = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(dev < 1e-12);
}

#[test]
fn missing_config_exits_one_with_error_line() {
    let out = semmatch(&["--config", "/nonexistent/run.conf", "gen-synthetic", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    let last = err.lines().last().unwrap();
    assert!(last.starts_with("error\tkind=io\t"), "{err}");
}

#[test]
fn unknown_key_exits_one() {
    let out = semmatch(&["--set", "model.depth=3", "shard-check", "--n", "1", "--dim", "4"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("kind=config"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(semmatch(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(semmatch(&["shard-check", "--bogus"]).status.code(), Some(2));
    assert_eq!(semmatch(&[]).status.code(), Some(2));
}

#[test]
fn help_succeeds_for_every_subcommand() {
    for sub in [
        "gen-synthetic",
        "build-vocab",
        "preprocess",
        "train",
        "embed-products",
        "query",
        "evaluate",
        "shard-check",
    ] {
        let out = semmatch(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
    }
}

#[test]
fn uneven_shards_are_rejected() {
    let out = semmatch(&["shard-check", "--n", "3", "--dim", "32"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("kind=uneven_shards"));
}
