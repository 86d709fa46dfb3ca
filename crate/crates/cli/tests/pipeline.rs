use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn postedit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_postedit"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = postedit(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn bleu_of(report: &str) -> f64 {
    let line = report.lines().find(|l| l.starts_with("BLEU = ")).unwrap();
    line["BLEU = ".len()..].split(',').next().unwrap().parse().unwrap()
}

#[test]
fn score_identity_is_100() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("f"), "a b c d e\nf g h i\n").unwrap();
    let out = ok(dir.path(), &["score", "--hyp", "f", "--ref", "f"]);
    assert!(out.starts_with("BLEU = 100.00,"), "{out}");
    assert!(out.contains("TER = 0.00"));
}

#[test]
fn usage_errors_exit_2_and_module_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad_flag = postedit(dir.path(), &["score", "--bogus"]);
    assert_eq!(bad_flag.status.code(), Some(2));
    let bad_metric = postedit(dir.path(), &["score", "--metric", "chrf", "--hyp", "a", "--ref", "b"]);
    assert_eq!(bad_metric.status.code(), Some(2));

    let missing = postedit(dir.path(), &["score", "--hyp", "nope", "--ref", "nope"]);
    assert_eq!(missing.status.code(), Some(1));
    let err = String::from_utf8(missing.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));

    fs::write(dir.path().join("a"), "x\n").unwrap();
    fs::write(dir.path().join("b"), "x\ny\n").unwrap();
    let misaligned = postedit(dir.path(), &["score", "--hyp", "a", "--ref", "b"]);
    assert_eq!(misaligned.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out-dir", "d", "--train", "20", "--dev", "5", "--test", "5"]);
    let out = postedit(dir.path(), &["train", "--train", "d/train", "--out-dir", "run", "--set", "colour=blue"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

const TOY_CONFIG: &str = "\
n_layers=1
d_model=32
d_ffn=64
n_heads=4
max_positions=64
lambda=1
warmup_steps=100
batch_pe_tokens=200
save_interval=10
max_steps=200
epochs=1000
seed=7
";

#[test]
fn toy_pipeline_beats_the_do_nothing_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out-dir", "data", "--train", "2000", "--seed", "3"]);
    ok(d, &["learn-bpe", "--merges", "60", "--input", "data/train.src", "data/train.mt", "data/train.pe", "--output", "bpe.model"]);
    for split in ["train", "dev", "test"] {
        for side in ["src", "mt", "pe"] {
            let input = format!("data/{split}.{side}");
            let output = format!("data/{split}.bpe.{side}");
            ok(d, &["apply-bpe", "--model", "bpe.model", "--input", &input, "--output", &output]);
        }
    }
    let before = fs::read(d.join("data/train.bpe.pe")).unwrap();
    ok(d, &[
        "prepare", "--src", "data/train.bpe.src", "--mt", "data/train.bpe.mt", "--pe", "data/train.bpe.pe",
        "--upsample", "1", "--output", "prep",
    ]);
    ok(d, &["build-vocab", "--train", "prep", "--output", "vocab.txt"]);
    fs::write(d.join("toy.cfg"), TOY_CONFIG).unwrap();
    ok(d, &["train", "--config", "toy.cfg", "--train", "prep", "--dev", "data/dev.bpe", "--vocab", "vocab.txt", "--out-dir", "run"]);
    ok(d, &["average", "--ckpt-dir", "run/checkpoints", "--out-dir", "avg"]);

    assert_eq!(fs::read(d.join("data/train.bpe.pe")).unwrap(), before, "inputs must not change");
    let loss = fs::read_to_string(d.join("run/loss.tsv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step\tlr\tloss_ape\tloss_dn\tjoint"));
    assert_eq!(loss.lines().count(), 21);
    let ckpts = fs::read_dir(d.join("run/checkpoints")).unwrap().count();
    assert_eq!(ckpts, 21, "20 step checkpoints plus best.ckpt");
    let averaged: Vec<_> = (1..=4).map(|i| d.join(format!("avg/avg-{i}.ckpt"))).collect();
    assert!(averaged.iter().all(|p| p.exists()) && !d.join("avg/avg-5.ckpt").exists());

    for m in ["bpe.model.manifest.json", "prep.manifest.json", "vocab.txt.manifest.json", "run/manifest.json", "avg/manifest.json", "data/manifest.json"] {
        let text = fs::read_to_string(d.join(m)).unwrap_or_else(|_| panic!("missing {m}"));
        let json: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["config_digest", "tool_version", "started", "finished", "command_line", "outputs"] {
            assert!(json.get(key).is_some(), "{m} lacks {key}");
        }
    }
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 7);

    let decode = |models: &str, beam: &str, out: &str| {
        ok(d, &[
            "decode", "--models", models, "--vocab", "run/vocab.txt", "--src", "data/test.bpe.src", "--mt",
            "data/test.bpe.mt", "--out", out, "--beam", beam, "--extra-len", "5", "--join-bpe",
        ]);
    };
    decode("avg/avg-4.ckpt,avg/avg-3.ckpt", "4", "hyp.txt");
    let system = bleu_of(&ok(d, &["score", "--metric", "bleu", "--hyp", "hyp.txt", "--ref", "data/test.pe"]));
    let baseline = bleu_of(&ok(d, &["compare-data", "--mt", "data/test.mt", "--pe", "data/test.pe"]));
    assert!(system > baseline, "decoded {system} vs baseline {baseline}");

    decode("avg/avg-4.ckpt", "1", "a.txt");
    decode("avg/avg-4.ckpt", "1", "b.txt");
    assert_eq!(fs::read(d.join("a.txt")).unwrap(), fs::read(d.join("b.txt")).unwrap());

    let clash = postedit(d, &[
        "decode", "--models", "avg/avg-4.ckpt", "--vocab", "run/vocab.txt", "--src", "data/test.bpe.src", "--mt",
        "data/test.bpe.mt", "--out", "data/test.bpe.mt",
    ]);
    assert_eq!(clash.status.code(), Some(1), "writing over an input must fail");
}
