use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_NET: [&str; 6] = [
    "--set",
    "net.channels=4,4,6,6,8,8",
    "--set",
    "net.beta_channels=3",
    "--set",
    "net.alpha_width=3",
];

fn stf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stf")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = stf(args);
    assert!(out.status.success(), "stf {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn presets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("presets")
}

/// A 4-class dataset with 4 train and 2 test sequences per class.
fn synth(dir: &Path) -> PathBuf {
    let out = ok(&[
        "synth",
        "--out",
        s(dir),
        "--seed",
        "3",
        "--set",
        "train_per_class=4",
        "--set",
        "test_per_class=2",
        "--set",
        "frames=12",
        "--set",
        "class.0.window=0,6",
        "--set",
        "class.1.window=6,12",
        "--set",
        "class.2.window=2,10",
        "--set",
        "class.3.window=2,10",
    ]);
    PathBuf::from(out.trim())
}

fn train(manifest: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--data",
        s(manifest),
        "--out",
        s(out),
        "--set",
        "train.epochs=1",
        "--set",
        "train.finetune_epochs=1",
        "--set",
        "train.threads=1",
    ];
    args.extend_from_slice(&TINY_NET);
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(stf(&[]).status.code(), Some(1));
    assert_eq!(stf(&["train"]).status.code(), Some(1));
    assert_eq!(stf(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(stf(&["eval", "--data", "x"]).status.code(), Some(1));
    assert_eq!(stf(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let out = stf(&["train", "--data", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.txt"));

    let manifest = synth(dir.path());
    let bad = stf(&["train", "--data", s(&manifest), "--set", "train.lr=-1", "--out", s(&dir.path().join("o"))]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = stf(&["train", "--data", s(&manifest), "--set", "oops"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"));
    let run = dir.path().join("run");
    train(&manifest, &run, &[]);
    for f in ["metrics.csv", "timing.csv", "train.cfg", "baseline.ckpt", "branch_e.ckpt", "branch_dcg.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let cfg = std::fs::read_to_string(run.join("train.cfg")).unwrap();
    assert!(cfg.lines().any(|l| l == "net.channels=4,4,6,6,8,8"), "{cfg}");

    let (e, dcg) = (run.join("branch_e.ckpt"), run.join("branch_dcg.ckpt"));
    let report = ok(&["eval", s(&e), s(&dcg), "--data", s(&manifest)]);
    assert!(report.contains("split=test samples=8"), "{report}");
    assert!(report.contains("top1=") && report.contains("focus_iou=") && report.contains("masked_prob="));

    let fused = |name: &str, ckpts: &[&Path]| {
        let out = dir.path().join(name);
        let mut args = vec!["fuse"];
        args.extend(ckpts.iter().map(|p| s(p)));
        args.extend(["--data", s(&manifest), "--out", s(&out)]);
        ok(&args);
        std::fs::read_to_string(out.join("fused.csv")).unwrap()
    };
    let single = fused("f1", &[&e]);
    assert_eq!(fused("f2", &[&e, &e]), single);
    let both = fused("f3", &[&e, &dcg]);
    assert_eq!(both.lines().count(), 9);
    for line in both.lines().skip(1) {
        let probs = line.rsplit(',').next().unwrap();
        let sum: f64 = probs.split(';').map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    let maps = dir.path().join("maps");
    ok(&["focus", s(&e), "--data", s(&manifest), "--out", s(&maps), "--input-resolution"]);
    let csvs: Vec<_> = std::fs::read_dir(&maps)
        .unwrap()
        .filter_map(|f| f.ok())
        .filter(|f| f.path().to_string_lossy().ends_with(".focus.csv"))
        .collect();
    assert_eq!(csvs.len(), 8);
    let text = std::fs::read_to_string(csvs[0].path()).unwrap();
    assert!(text.lines().count() >= 12);
    let none = stf(&["focus", s(&e), "--data", s(&manifest), "--out", s(&maps), "no_such_sequence"]);
    assert_eq!(none.status.code(), Some(2));

    let tr = dir.path().join("transfer");
    let out = ok(&["transfer", s(&run.join("baseline.ckpt")), "--data", s(&manifest), "--out", s(&tr), "--set", "transfer.epochs=1"]);
    assert!(out.contains("transfer"));
    assert!(tr.join("transfer.ckpt").exists());
}

#[test]
fn repeated_training_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&manifest, &a, &["--seed", "5", "--set", "train.epochs=3"]);
    train(&manifest, &b, &["--seed", "5", "--set", "train.epochs=3"]);
    for f in ["metrics.csv", "baseline.ckpt", "branch_e.ckpt", "branch_dcg.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn subsample_flag_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"));
    let run = dir.path().join("run");
    train(&manifest, &run, &["--subsample-fraction", "0.25", "--set", "train.branches=none"]);
    let cfg = std::fs::read_to_string(run.join("train.cfg")).unwrap();
    assert!(cfg.contains("data.subsample_fraction"));
}

#[test]
fn ablation_presets_select_their_branches() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"));
    let expect: [(&str, &[&str]); 5] = [
        ("m1", &["baseline.ckpt"]),
        ("m2", &["baseline.ckpt", "branch_dcg.ckpt"]),
        ("m3", &["baseline.ckpt", "branch_dcg.ckpt"]),
        ("m4", &["baseline.ckpt", "branch_dcg.ckpt"]),
        ("m5", &["baseline.ckpt", "branch_e.ckpt", "branch_dcg.ckpt"]),
    ];
    let terms = ["", "c", "c,d", "c,d,gk", "c,d,gk"];
    for ((name, files), want_terms) in expect.iter().zip(terms) {
        let run = dir.path().join(name);
        let preset = presets().join(format!("{name}.cfg"));
        train(&manifest, &run, &["--config", s(&preset)]);
        let mut present: Vec<String> = std::fs::read_dir(&run)
            .unwrap()
            .filter_map(|f| f.ok())
            .map(|f| f.file_name().to_string_lossy().into_owned())
            .filter(|f| f.ends_with(".ckpt"))
            .collect();
        present.sort();
        let mut want: Vec<String> = files.iter().map(|f| f.to_string()).collect();
        want.sort();
        assert_eq!(present, want, "{name}");
        if !want_terms.is_empty() {
            let cfg = std::fs::read_to_string(run.join("train.cfg")).unwrap();
            let line = cfg.lines().find_map(|l| l.strip_prefix("train.dcg_terms=")).unwrap();
            let mut got: Vec<&str> = line.split(',').collect();
            let mut want: Vec<&str> = want_terms.split(',').collect();
            got.sort();
            want.sort();
            assert_eq!(got, want, "{name}");
        }
    }
}
