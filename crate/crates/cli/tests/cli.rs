use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn refnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = refnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    refnet(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "synth",
        "--out-dir",
        s(dir),
        "--kind",
        "copy",
        "--synth-vocab",
        "12",
        "--pairs",
        "120",
        "--dev-pairs",
        "20",
        "--test-pairs",
        "10",
        "--min-length",
        "2",
        "--max-length",
        "5",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

const TINY: [&str; 10] = ["--embed", "8", "--hidden", "10", "--attention", "8", "--readout", "8", "--batch-size", "16"];

#[test]
fn synth_is_deterministic_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    synth(a.path(), &["--seed", "5"]);
    synth(b.path(), &["--seed", "5"]);
    synth(c.path(), &["--seed", "6"]);
    for f in ["train.src", "train.tgt", "dev.src", "test.tgt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.path().join("train.src")).unwrap(), fs::read(c.path().join("train.src")).unwrap());
    let lines = fs::read_to_string(a.path().join("train.src")).unwrap();
    assert_eq!(lines.lines().count(), 120);
    // Copy task: target equals source.
    assert_eq!(lines, fs::read_to_string(a.path().join("train.tgt")).unwrap());
}

#[test]
fn help_lists_defaults() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["--lr", "[default: 0.001]", "--beam", "[default: 10]", "--seed", "[default: 42]", "--config"] {
        assert!(text.contains(needle), "missing {needle}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // Usage errors.
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["train", "--no-such-flag", "1"]), 1);
    // Configuration errors.
    assert_eq!(code(&["train", "--lr", "abc", "--save", "x"]), 2);
    assert_eq!(code(&["train", "--save", s(&dir.path().join("m.ckpt"))]), 2);
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "learning_rate = 3\n").unwrap();
    assert_eq!(code(&["params", "--config", s(&cfg)]), 2);
    // Missing or unusable checkpoints.
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(code(&["finetune-m", "--checkpoint", s(&missing), "--save", "y"]), 3);
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&["params", "--checkpoint", s(&junk)]), 3);
    // Failing gradient checks.
    assert_eq!(code(&["gradcheck", "--gradcheck-seeds", "1", "--tolerance", "0"]), 4);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# model\nembed = 8\nhidden = 10\nmax-vocab = 20\n").unwrap();
    let out = ok(&["params", "--config", s(&cfg), "--hidden", "12"]);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let out2 = ok(&["params", "--embed", "8", "--hidden", "12", "--max-vocab", "20"]);
    assert_eq!(text, String::from_utf8_lossy(&out2.stdout));
    let out3 = ok(&["params", "--embed", "8", "--hidden", "10", "--max-vocab", "20"]);
    assert_ne!(text, String::from_utf8_lossy(&out3.stdout));
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, &["--seed", "3"]);
    let p = |f: &str| d.join(f).to_str().unwrap().to_string();
    let data = [
        "--train-src".to_string(),
        p("train.src"),
        "--train-tgt".into(),
        p("train.tgt"),
        "--dev-src".into(),
        p("dev.src"),
        "--dev-tgt".into(),
        p("dev.tgt"),
    ];
    let run = |cmd: &str, extra: &[String]| {
        let mut args: Vec<String> = vec![cmd.into()];
        args.extend(data.iter().cloned());
        args.extend(TINY.iter().map(|s| s.to_string()));
        args.extend(extra.iter().cloned());
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs)
    };

    let log = p("train.log");
    let out = run("train", &["--epochs".into(), "2".into(), "--save".into(), p("base.ckpt"), "--log-file".into(), log.clone()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("epoch\tstage"), "{stdout}");
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 2);
    assert!(d.join("base.ckpt.src.vocab").exists());

    // Later stages refuse a checkpoint that lacks fitted anchors.
    assert_eq!(
        code(&["finetune-m", "--checkpoint", &p("base.ckpt"), "--save", &p("bad.ckpt"), "--train-src", &p("train.src"), "--train-tgt", &p("train.tgt")]),
        3
    );

    run(
        "fit-anchors",
        &["--checkpoint".into(), p("base.ckpt"), "--save".into(), p("anch.ckpt"), "--m-anchors".into(), "4".into(), "--fit-iterations".into(), "20".into()],
    );
    run(
        "finetune-m",
        &[
            "--checkpoint".into(),
            p("anch.ckpt"),
            "--save".into(),
            p("m.ckpt"),
            "--epochs".into(),
            "1".into(),
            "--m-anchors".into(),
            "4".into(),
            "--m-attention".into(),
            "6".into(),
        ],
    );
    run(
        "train-b",
        &[
            "--checkpoint".into(),
            p("base.ckpt"),
            "--save".into(),
            p("b.ckpt"),
            "--epochs".into(),
            "1".into(),
            "--b-anchors".into(),
            "3".into(),
            "--anchor-dim".into(),
            "4".into(),
        ],
    );
    // Changing an architecture flag against an existing checkpoint is a shape error.
    assert_eq!(
        code(&["train-b", "--checkpoint", &p("base.ckpt"), "--save", &p("x.ckpt"), "--train-src", &p("train.src"), "--train-tgt", &p("train.tgt"), "--hidden", "99"]),
        2
    );

    for ckpt in ["m.ckpt", "b.ckpt"] {
        let hyp = p(&format!("{ckpt}.hyp"));
        ok(&["translate", "--checkpoint", &p(ckpt), "--input", &p("test.src"), "--output", &hyp, "--beam", "3", "--threads", "2"]);
        assert_eq!(fs::read_to_string(&hyp).unwrap().lines().count(), 10);
        let report = p(&format!("{ckpt}.tsv"));
        let out = ok(&["evaluate", "--hypotheses", &hyp, "--references", &p("test.tgt"), "--test-src", &p("test.src"), "--report", &report]);
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("BLEU = "));
        assert!(fs::read_to_string(&report).unwrap().starts_with("bleu\t"));
    }

    let out = ok(&["params", "--checkpoint", &p("m.ckpt")]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("m-ref\t"));
}

#[test]
fn decoding_does_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, &["--seed", "9"]);
    let p = |f: &str| d.join(f).to_str().unwrap().to_string();
    let mut args = vec!["train".to_string(), "--train-src".into(), p("train.src"), "--train-tgt".into(), p("train.tgt")];
    args.extend(TINY.iter().map(|s| s.to_string()));
    args.extend(["--epochs".into(), "2".into(), "--save".into(), p("m.ckpt")]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    let decode = |beam: &str, threads: &str, norm: &str| {
        let out = ok(&["translate", "--checkpoint", &p("m.ckpt"), "--input", &p("test.src"), "--beam", beam, "--threads", threads, "--normalize", norm]);
        String::from_utf8_lossy(&out.stdout).to_string()
    };
    assert_eq!(decode("1", "1", "true"), decode("1", "3", "true"));
    assert_eq!(decode("4", "1", "true"), decode("4", "4", "true"));
}
