use std::path::Path;
use std::process::{Command, Output};

use anyhow::Result;
use loopy_rnn::data::{load_dataset, write_pgm};
use loopy_rnn::trainer::Checkpoint;
use tempfile::TempDir;

fn loopy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loopy"))
        .args(args)
        .env_remove("LOOPY_SEED")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(out: &Path, bases: &str, ppb: &str, size: &str, seed: &str, split: &str) -> Output {
    loopy(&["gen-data", "--bases", bases, "--pairs-per-base", ppb, "--size", size, "--seed", seed, "--split", split, "--out", s(out)])
}

fn train_tiny(data: &Path, out: &Path, lambda: &str) -> Output {
    loopy(&[
        "train", "--data", s(data), "--tiny", "--n-nodes", "6", "--hidden-dim", "8", "--lambda", lambda, "--lr", "0.1",
        "--batch", "4", "--epochs", "2", "--seed", "5", "--out", s(out),
    ])
}

#[test]
fn gen_data_counts_and_determinism() -> Result<()> {
    let tmp = TempDir::new()?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(gen(&a, "10", "4", "16", "3", "train").status.success());
    assert!(gen(&b, "10", "4", "16", "3", "train").status.success());
    let ds = load_dataset(&a)?;
    assert_eq!(ds.pairs.len(), 80);
    for f in ["patches.lprd", "pairs.tsv"] {
        assert_eq!(std::fs::read(a.join(f))?, std::fs::read(b.join(f))?, "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json"))?)?;
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["run_id"].as_str().unwrap().len(), 64);
    Ok(())
}

#[test]
fn gen_data_full_size_header() -> Result<()> {
    let tmp = TempDir::new()?;
    let out = tmp.path().join("d");
    assert!(gen(&out, "2", "1", "64", "0", "test").status.success());
    let bytes = std::fs::read(out.join("patches.lprd"))?;
    assert_eq!(&bytes[..4], b"LPRD");
    assert_eq!(u16::from_le_bytes([bytes[12], bytes[13]]), 64);
    assert_eq!(u16::from_le_bytes([bytes[14], bytes[15]]), 64);
    assert!(std::fs::read_to_string(out.join("pairs.tsv"))?.contains("split=test"));
    Ok(())
}

#[test]
fn seed_falls_back_to_environment() -> Result<()> {
    let tmp = TempDir::new()?;
    let run = |dir: &Path, seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_loopy"))
            .args(["gen-data", "--bases", "3", "--pairs-per-base", "1", "--size", "16", "--out", s(dir)])
            .env("LOOPY_SEED", seed)
            .output()
            .unwrap()
    };
    assert!(run(&tmp.path().join("x"), "9").status.success());
    assert!(gen(&tmp.path().join("y"), "3", "1", "16", "9", "train").status.success());
    assert_eq!(
        std::fs::read(tmp.path().join("x/patches.lprd"))?,
        std::fs::read(tmp.path().join("y/patches.lprd"))?
    );
    Ok(())
}

#[test]
fn invalid_flags_fail_before_any_output() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("never");
    let r = loopy(&["train", "--data", "/nonexistent", "--tiny", "--n-nodes", "7", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("even"));
    assert!(!out.exists());

    let r = loopy(&["train", "--data", "/nonexistent", "--tiny", "--batch", "3", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists());

    assert_eq!(loopy(&["gen-data", "--size", "32", "--out", s(&out)]).status.code(), Some(1));
    assert_eq!(loopy(&["bogus"]).status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn train_eval_match_pipeline() -> Result<()> {
    let tmp = TempDir::new()?;
    let (tr, te, run) = (tmp.path().join("tr"), tmp.path().join("te"), tmp.path().join("run"));
    assert!(gen(&tr, "3", "2", "16", "1", "train").status.success());
    assert!(gen(&te, "3", "2", "16", "2", "test").status.success());
    let r = train_tiny(&tr, &run, "0.4");
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let log = std::fs::read_to_string(run.join("train.log"))?;
    let first: Vec<&str> = log.lines().next().unwrap().split('\t').collect();
    assert_eq!(first.len(), 4);
    assert_eq!(first[0], "0");
    assert_eq!(log.lines().count(), 6);

    let ck = run.join("checkpoint.lpmc");
    let metrics = tmp.path().join("m.json");
    let r = loopy(&["eval", "--checkpoint", s(&ck), "--data", s(&te), "--out", s(&metrics)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("last-two"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics)?)?;
    for key in ["fpr95", "map", "num_pos", "num_neg", "roc"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["num_pos"], 6);
    assert!(tmp.path().join("m.manifest.json").exists());

    let r = loopy(&["eval", "--checkpoint", s(&ck), "--data", s(&te), "--aggregation", "mean-all", "--out", s(&metrics)]);
    assert!(String::from_utf8_lossy(&r.stdout).contains("mean-all"));

    let ds = load_dataset(&te)?;
    let p = ds.pair(0);
    let (pa, pb) = (tmp.path().join("a.pgm"), tmp.path().join("b.pgm"));
    write_pgm(&p.a, &pa)?;
    write_pgm(&p.b, &pb)?;
    let ab = loopy(&["match", "--checkpoint", s(&ck), "--a", s(&pa), "--b", s(&pb)]);
    let ba = loopy(&["match", "--checkpoint", s(&ck), "--a", s(&pb), "--b", s(&pa)]);
    assert!(ab.status.success());
    assert_eq!(ab.stdout, ba.stdout);
    let text = String::from_utf8(ab.stdout)?;
    assert!(text.starts_with("score\t"));
    assert_eq!(text.lines().filter(|l| l.starts_with("node\t")).count(), 5);
    Ok(())
}

#[test]
fn zero_lambda_switches_eval_to_mean_all() -> Result<()> {
    let tmp = TempDir::new()?;
    let (tr, run) = (tmp.path().join("tr"), tmp.path().join("run"));
    assert!(gen(&tr, "3", "1", "16", "1", "train").status.success());
    assert!(train_tiny(&tr, &run, "0").status.success());
    let ck = Checkpoint::load(&run.join("checkpoint.lpmc"))?;
    assert_eq!(ck.train.lambda, 0.0);
    let r = loopy(&["eval", "--checkpoint", s(&run.join("checkpoint.lpmc")), "--data", s(&tr), "--out", s(&tmp.path().join("m.json"))]);
    assert!(String::from_utf8_lossy(&r.stdout).contains("mean-all"));
    Ok(())
}

#[test]
fn resume_continues_identically() -> Result<()> {
    let tmp = TempDir::new()?;
    let tr = tmp.path().join("tr");
    assert!(gen(&tr, "3", "2", "16", "1", "train").status.success());
    let common = ["--tiny", "--n-nodes", "6", "--hidden-dim", "8", "--lr", "0.1", "--batch", "4", "--seed", "2"];
    let full = tmp.path().join("full");
    let mut args = vec!["train", "--data", s(&tr), "--epochs", "3", "--out", s(&full)];
    args.extend(common);
    assert!(loopy(&args).status.success());

    let part = tmp.path().join("part");
    let mut args = vec!["train", "--data", s(&tr), "--epochs", "1", "--out", s(&part)];
    args.extend(common);
    assert!(loopy(&args).status.success());
    let rest = tmp.path().join("rest");
    let ck = part.join("checkpoint.lpmc");
    let r = loopy(&["train", "--data", s(&tr), "--resume", s(&ck), "--epochs", "3", "--out", s(&rest)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(std::fs::read(full.join("checkpoint.lpmc"))?, std::fs::read(rest.join("checkpoint.lpmc"))?);
    let full_log = std::fs::read_to_string(full.join("train.log"))?;
    let joined = std::fs::read_to_string(part.join("train.log"))? + &std::fs::read_to_string(rest.join("train.log"))?;
    assert_eq!(full_log, joined);
    Ok(())
}

#[test]
fn missing_or_mismatched_inputs_are_data_errors() -> Result<()> {
    let tmp = TempDir::new()?;
    let r = loopy(&["eval", "--checkpoint", "/nonexistent.lpmc", "--data", "/nowhere", "--out", s(&tmp.path().join("m.json"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&r.stderr).is_empty());

    let (tr, big, run) = (tmp.path().join("tr"), tmp.path().join("big"), tmp.path().join("run"));
    assert!(gen(&tr, "3", "1", "16", "1", "train").status.success());
    assert!(gen(&big, "2", "1", "64", "1", "test").status.success());
    assert!(train_tiny(&tr, &run, "0.4").status.success());
    let r = loopy(&["eval", "--checkpoint", s(&run.join("checkpoint.lpmc")), "--data", s(&big), "--out", s(&tmp.path().join("m.json"))]);
    assert_eq!(r.status.code(), Some(2));

    let garbage = tmp.path().join("garbage.lpmc");
    std::fs::write(&garbage, b"not a checkpoint")?;
    let r = loopy(&["eval", "--checkpoint", s(&garbage), "--data", s(&tr), "--out", s(&tmp.path().join("m.json"))]);
    assert_eq!(r.status.code(), Some(2));
    Ok(())
}

#[test]
fn gradcheck_exit_codes() {
    let ok = loopy(&["gradcheck", "--seed", "0", "--max-per-group", "16"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.contains("worst_rel") && text.contains("metric.theta") && text.contains("PASS"));

    let strict = loopy(&["gradcheck", "--seed", "0", "--max-per-group", "16", "--tolerance", "1e-12"]);
    assert_eq!(strict.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&strict.stdout).contains("FAIL"));
}
