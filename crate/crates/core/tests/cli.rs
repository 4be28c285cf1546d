use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn serkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_serkit"))
        .arg("--quiet")
        .args(args)
        .env_remove("SERKIT_SEED")
        .output()
        .expect("spawn serkit")
}

fn ok(args: &[&str]) -> Output {
    let out = serkit(args);
    assert!(
        out.status.success(),
        "serkit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// synth (3 per class) -> split 50/25/25 -> features; returns (manifest, features).
fn small_corpus(root: &Path) -> (String, String) {
    let syn = root.join("syn");
    let split = root.join("split");
    let feat = root.join("feat");
    ok(&["--out", p(&syn), "synth", "--per-class", "3"]);
    let src = syn.join("manifest.csv");
    ok(&["--out", p(&split), "split", "--manifest", p(&src), "--train", "0.34", "--val", "0.33", "--test", "0.33"]);
    let manifest = split.join("manifest.csv");
    ok(&["--out", p(&feat), "features", "--manifest", p(&manifest), "--jobs", "2"]);
    (p(&manifest).to_string(), p(&feat).to_string())
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = serkit(&["--out", p(dir.path()), "synth", "--per-class", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = serkit(&["--out", p(dir.path()), "split", "--manifest", "x.csv", "--split-mode", "sideways"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[InvalidConfig]"));
    let out = serkit(&["synth"]);
    assert_eq!(out.status.code(), Some(2), "missing --out");
    let out = serkit(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = serkit(&["--out", p(dir.path()), "split", "--manifest", p(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error["), "{stderr}");

    let wav = dir.path().join("bad.wav");
    fs::write(&wav, b"RIFF....not audio").unwrap();
    let out = serkit(&["dump", "--wav", p(&wav), "--csv", p(&dir.path().join("w.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[MalformedContainer]"));
}

#[test]
fn synth_writes_corpus_and_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["--out", p(dir.path()), "--seed", "9", "synth", "--per-class", "2", "--sample-rate", "8000"]);
    let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.contains(".wav")).count(), 16);
    assert_eq!(fs::read_dir(dir.path().join("audio")).unwrap().count(), 16);
    let config = fs::read_to_string(dir.path().join("config.txt")).unwrap();
    assert!(config.contains("seed=9"));
    assert!(config.contains("per_class=2"));
    let hist = fs::read_to_string(dir.path().join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 9);
}

#[test]
fn seed_comes_from_environment() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |dir: &Path, seed: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_serkit"));
        cmd.args(["--quiet", "--out", p(dir), "synth", "--per-class", "1"]);
        match seed {
            Some(s) => cmd.env("SERKIT_SEED", s),
            None => cmd.env_remove("SERKIT_SEED"),
        };
        assert!(cmd.status().unwrap().success());
        fs::read_to_string(dir.join("config.txt")).unwrap()
    };
    assert!(run(a.path(), Some("1234")).contains("seed=1234"));
    assert!(run(b.path(), None).contains("seed=42"));
    let wav = |d: &Path| {
        let mut names: Vec<_> = fs::read_dir(d.join("audio")).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        fs::read(&names[0]).unwrap()
    };
    run(c.path(), Some("42"));
    assert_eq!(wav(b.path()), wav(c.path()));
    assert_ne!(wav(a.path()), wav(b.path()));
}

#[test]
fn svm_pipeline_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, feat) = small_corpus(dir.path());
    let index = fs::read_to_string(Path::new(&feat).join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 25);

    let run = dir.path().join("svm");
    ok(&["--out", p(&run), "train", "--model", "svm", "--manifest", &manifest, "--features", &feat]);
    for f in ["best.ckpt", "last.ckpt", "epochs.csv", "timing.csv", "config.txt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let config = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("model=svm"), "{config}");

    let ev = dir.path().join("eval");
    let ckpt = run.join("best.ckpt");
    let out = ok(&["--out", p(&ev), "eval", "--ckpt", p(&ckpt), "--manifest", &manifest, "--features", &feat, "--split", "test"]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("accuracy "));
    let metrics = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("label,precision,recall,f1,support,accuracy\n"));
    assert_eq!(metrics.lines().count(), 10);
    let confusion = fs::read_to_string(ev.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 9);
    assert!(ev.join("report.txt").exists());
}

#[test]
fn progressive_requires_a_cnn() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, feat) = small_corpus(dir.path());
    let out = serkit(&[
        "--out", p(&dir.path().join("x")), "train", "--model", "lstm", "--progressive",
        "--manifest", &manifest, "--features", &feat,
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn preview_and_dump_render_images() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, feat) = small_corpus(dir.path());
    let pv = dir.path().join("preview");
    ok(&["--out", p(&pv), "augment-preview", "--manifest", &manifest, "--features", &feat, "--count", "2", "--size", "32"]);
    for i in 0..2 {
        for tag in ["before", "after"] {
            let img = fs::read(pv.join(format!("preview_{i}_{tag}.pgm"))).unwrap();
            assert!(img.starts_with(b"P5\n32 32\n65535\n"));
            assert_eq!(img.len(), 15 + 32 * 32 * 2);
        }
    }

    let audio = dir.path().join("syn/audio");
    let wav = fs::read_dir(&audio).unwrap().next().unwrap().unwrap().path();
    let (pgm, csv, wcsv) = (dir.path().join("s.pgm"), dir.path().join("s.csv"), dir.path().join("w.csv"));
    ok(&["dump", "--spec", p(&wav), "--pgm", p(&pgm), "--csv", p(&csv), "--mels", "40"]);
    let img = fs::read(&pgm).unwrap();
    let header = String::from_utf8_lossy(&img[..img.len().min(32)]).to_string();
    assert!(header.starts_with("P5\n"));
    assert!(header.split('\n').nth(1).unwrap().ends_with(" 40"), "{header}");
    let rows = fs::read_to_string(&csv).unwrap();
    assert!(rows.lines().all(|l| l.split(',').count() == 40));

    ok(&["dump", "--wav", p(&wav), "--csv", p(&wcsv)]);
    let wave = fs::read_to_string(&wcsv).unwrap();
    assert!(wave.starts_with("time_s,amplitude\n0,"));
    assert!(wave.lines().count() > 16_000 * 2);

    let out = serkit(&["dump", "--wav", p(&wav), "--pgm", p(&pgm)]);
    assert_eq!(out.status.code(), Some(2));
}
