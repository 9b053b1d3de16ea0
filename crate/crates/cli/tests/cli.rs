use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spe_core::corpus::synth::{generate, SynthConfig};
use spe_core::corpus::{parse_corpus, CorpusKind};

fn spe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spe"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn spe")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = spe(dir, args);
    assert!(
        out.status.success(),
        "spe {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn bundled_corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/abc_toy.txt")
}

/// A small corpus and a config sized for seconds, not minutes.
fn tiny_setup(dir: &Path, extra: &str) -> PathBuf {
    let corpus = dir.join("tiny.abc");
    let cfg = SynthConfig {
        tunes: 40,
        min_phrases: 2,
        max_phrases: 4,
        ..SynthConfig::default()
    };
    std::fs::write(&corpus, generate(&cfg).unwrap()).unwrap();
    write_config(dir, &corpus, extra)
}

fn write_config(dir: &Path, corpus: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"seed = 7
{extra}
[paths]
corpus = "{}"
out = "run"

[model]
emb_dim = 6
hidden = 8
layers = 1
dropout = 0.1

[pretrain]
epochs = 2
batch_size = 10

[bilm]
emb_dim = 6
hidden = 6
[bilm.train]
epochs = 1
batch_size = 10

[train]
batch_size = 4
nu = 3
epochs = 2
checkpoint_interval = 1

[questions]
choices = 4
"#,
        corpus.display()
    );
    let path = dir.join("spe.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

const STAGES: [&[&str]; 6] = [
    &["prep"],
    &["pretrain"],
    &["train-bilm"],
    &["train-nce"],
    &["gen-questions"],
    &["evaluate"],
];

#[test]
fn prep_on_the_bundled_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &bundled_corpus(), "");
    ok(dir.path(), &["prep", "--config", cfg.to_str().unwrap()]);
    let prep = dir.path().join("run/prep");
    for f in ["vocab.json", "split.json", "meta.json", "config.json"] {
        assert!(prep.join(f).is_file(), "{f}");
    }
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(prep.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["documents"], 560);
    assert!(meta["vocab_size"].as_u64().unwrap() <= 200);
    let pairs: u64 = ["train_pairs", "validation_pairs", "holdout_pairs"]
        .iter()
        .map(|k| meta[k].as_u64().unwrap())
        .sum();
    assert!(pairs >= 5000, "{pairs}");
}

#[test]
fn full_pipeline_twice_is_byte_identical() {
    let runs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    // Both runs read the same corpus file so the configs match exactly.
    let shared = tempfile::tempdir().unwrap();
    tiny_setup(shared.path(), "");
    let corpus = shared.path().join("tiny.abc");
    for run in &runs {
        let cfg = write_config(run.path(), &corpus, "");
        for stage in STAGES {
            let mut args = stage.to_vec();
            args.extend(["--config", cfg.to_str().unwrap()]);
            ok(run.path(), &args);
        }
        // The resampling sampler as well.
        ok(run.path(), &["train-nce", "--config", cfg.to_str().unwrap(), "--sampler", "resampling"]);
    }
    let a = files(&runs[0].path().join("run"));
    let b = files(&runs[1].path().join("run"));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(b[k] == *v, "{} differs", k.display());
    }
    let report = Path::new("eval/nce-batch-nce-0.1,10,0.1/report.json");
    let checkpoint = Path::new("nce-resampling-0.1,10,0.1/epoch-0002/params.bin");
    assert!(a.contains_key(report) && a.contains_key(checkpoint));
    let text = String::from_utf8(a[report].clone()).unwrap();
    assert!(!text.contains(runs[0].path().to_str().unwrap()));
    assert!(!text.contains("wall"));
}

#[test]
fn evaluate_refuses_a_checkpoint_from_another_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    for stage in [&["prep"][..], &["pretrain"], &["gen-questions"]] {
        let mut args = stage.to_vec();
        args.extend(["--config", cfg]);
        ok(dir.path(), &args);
    }
    // Same corpus, different cutoff: a different vocabulary.
    let other = dir.path().join("other");
    std::fs::create_dir(&other).unwrap();
    let other_cfg = write_config(&other, &dir.path().join("tiny.abc"), "");
    let text = std::fs::read_to_string(&other_cfg).unwrap().replace("[model]", "[corpus]\nvocab_cutoff = 3\n\n[model]");
    std::fs::write(&other_cfg, text).unwrap();
    ok(&other, &["prep", "--config", other_cfg.to_str().unwrap()]);
    ok(&other, &["pretrain", "--config", other_cfg.to_str().unwrap()]);

    let foreign = other.join("run/pretrain");
    let out = spe(dir.path(), &["evaluate", "--config", cfg, "--checkpoint", foreign.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("hash mismatch") && err.lines().count() == 1, "{err}");
    assert!(!dir.path().join("run/eval").exists());

    // The matching checkpoint evaluates fine.
    let own = dir.path().join("run/pretrain");
    let out = ok(dir.path(), &["evaluate", "--config", cfg, "--checkpoint", own.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("pretrained"));
    assert!(dir.path().join("run/eval/pretrain/report.txt").is_file());
}

#[test]
fn stages_refuse_inputs_from_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(dir.path(), &["prep", "--config", cfg]);
    ok(dir.path(), &["pretrain", "--config", cfg]);
    // A new seed changes the split, so the prepared files no longer apply.
    let out = spe(dir.path(), &["pretrain", "--config", cfg, "--seed", "8"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| spe(dir.path(), args).status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(code(&["prep", "--weights", "1,2"]), Some(1));
    assert_eq!(code(&["prep", "--criterion", "3"]), Some(1));
    assert_eq!(code(&["prep", "--sampler", "uniform"]), Some(1));
    assert_eq!(code(&["prep", "--config", "missing.toml"]), Some(2));
    std::fs::write(dir.path().join("bad.toml"), "seed = \"seven\"\n").unwrap();
    assert_eq!(code(&["prep", "--config", "bad.toml"]), Some(2));
    assert_eq!(code(&["evaluate"]), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_spe"))
        .args(["prep"])
        .current_dir(dir.path())
        .env("SPE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn score_writes_one_line_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), "criterion = 1");
    let cfg = cfg.to_str().unwrap();
    ok(dir.path(), &["prep", "--config", cfg]);
    ok(dir.path(), &["pretrain", "--config", cfg]);
    let text = std::fs::read_to_string(dir.path().join("tiny.abc")).unwrap();
    let doc = &parse_corpus(&text, CorpusKind::Abc)[0];
    let (a, b) = (doc.sentences[0].join(" "), doc.sentences[1].join(" "));
    std::fs::write(dir.path().join("pairs.tsv"), format!("{a}\t{b}\n\n{b}\t{a}\n")).unwrap();
    let out = ok(
        dir.path(),
        &["score", "--config", cfg, "--checkpoint", "run/pretrain", "--input", "pairs.tsv"],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split('\t').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r.len(), 3);
        assert!(r[0] < 0.0 && r[1] < 0.0);
        // Criterion 1 is the conditional log-probability itself.
        assert_eq!(r[2], r[0]);
    }
    std::fs::write(dir.path().join("bad.tsv"), "no tab here\n").unwrap();
    let out = spe(dir.path(), &["score", "--config", cfg, "--checkpoint", "run/pretrain", "--input", "bad.tsv"]);
    assert_eq!(out.status.code(), Some(2));
}
