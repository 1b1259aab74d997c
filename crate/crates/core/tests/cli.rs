//! End-to-end runs of the command-line front end.

use std::path::Path;

use lmfc::cli::{run, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

fn lmfc(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut argv = vec!["lmfc"];
    argv.extend_from_slice(args);
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &Path, corpus: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let ckpt = dir.join(name);
    let mut args = vec!["train", "--corpus", s(corpus), "-o", s(&ckpt), "--steps", "2", "--set", "codec.n=8"];
    args.extend_from_slice(extra);
    let (code, _, err) = lmfc(&args);
    assert_eq!(code, EXIT_OK, "{err}");
    ckpt
}

#[test]
fn encode_decode_is_deterministic_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    for seed in ["0", "1"] {
        let p = corpus.join(format!("p{seed}.fpf"));
        let args = ["synth", "--seed", seed, "--width", "96", "--height", "80", "--channels", "2", "-o", s(&p)];
        assert_eq!(lmfc(&args).0, EXIT_OK);
    }
    let log = dir.path().join("train.jsonl");
    let ckpt = train(dir.path(), &corpus, "a.ckpt", &["--log", s(&log)]);
    let lines: Vec<String> = std::fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("{\"effective_config\""));

    let input = corpus.join("p0.fpf");
    let (s1, s2) = (dir.path().join("1.lmfc"), dir.path().join("2.lmfc"));
    for out in [&s1, &s2] {
        let (code, stdout, stderr) = lmfc(&["encode", "--checkpoint", s(&ckpt), "-i", s(&input), "-o", s(out)]);
        assert_eq!(code, EXIT_OK, "{stderr}");
        assert!(stdout.contains("bpp"));
        assert!(stderr.contains("coder"));
    }
    assert_eq!(std::fs::read(&s1).unwrap(), std::fs::read(&s2).unwrap());

    let (r1, r2) = (dir.path().join("r1.fpf"), dir.path().join("r2.fpf"));
    assert_eq!(lmfc(&["decode", "--checkpoint", s(&ckpt), "-i", s(&s1), "-o", s(&r1)]).0, EXIT_OK);
    assert_eq!(lmfc(&["decode", "--checkpoint", s(&ckpt), "-i", s(&s1), "-o", s(&r2)]).0, EXIT_OK);
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());

    // Re-encoding a reconstruction gives the same stream every time as well.
    let (t1, t2) = (dir.path().join("t1.lmfc"), dir.path().join("t2.lmfc"));
    assert_eq!(lmfc(&["encode", "--checkpoint", s(&ckpt), "-i", s(&r1), "-o", s(&t1)]).0, EXIT_OK);
    assert_eq!(lmfc(&["encode", "--checkpoint", s(&ckpt), "-i", s(&r2), "-o", s(&t2)]).0, EXIT_OK);
    assert_eq!(std::fs::read(&t1).unwrap(), std::fs::read(&t2).unwrap());

    let other = train(dir.path(), &corpus, "b.ckpt", &["--no-context-model"]);
    let (code, _, err) = lmfc(&["decode", "--checkpoint", s(&other), "-i", s(&s1), "-o", s(&r2)]);
    assert_eq!(code, EXIT_FAILURE);
    assert!(err.contains("error"), "{err}");

    let mut bytes = std::fs::read(&s1).unwrap();
    bytes[12] ^= 0x40;
    std::fs::write(&s2, &bytes).unwrap();
    let (code, _, err) = lmfc(&["decode", "--checkpoint", s(&ckpt), "-i", s(&s2), "-o", s(&r2)]);
    assert_eq!(code, EXIT_FAILURE);
    assert!(err.to_lowercase().contains("crc"), "{err}");
}

#[test]
fn exit_codes() {
    assert_eq!(lmfc(&["--help"]).0, EXIT_OK);
    assert_eq!(lmfc(&["encode", "--help"]).0, EXIT_OK);
    assert_eq!(lmfc(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(lmfc(&["synth", "--width", "wide", "-o", "x.fpf"]).0, EXIT_USAGE);
    let (code, _, err) = lmfc(&["train", "--corpus", "/no/such/dir", "-o", "x.ckpt"]);
    assert_eq!(code, EXIT_USAGE, "{err}");
    assert_eq!(lmfc(&["bdrate", "--results", "/no/such.jsonl", "--test", "a", "--anchor", "b"]).0, EXIT_USAGE);
}

#[test]
fn results_to_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results.jsonl");
    let mut text = String::new();
    for (label, k) in [("anchor", 1.0), ("test", 0.5)] {
        for (bpp, m) in [(0.1, 30.0), (0.2, 34.0), (0.4, 37.0), (0.8, 38.5)] {
            text += &format!("{{\"label\": \"{label}\", \"bpp\": {}, \"metric\": {m}}}\n", bpp * k);
        }
        text += &format!("{{\"label\": \"{label}\", \"bpp\": 680.0, \"metric\": 38.8, \"uncompressed\": true}}\n");
    }
    std::fs::write(&results, text).unwrap();
    let (code, out, _) = lmfc(&["bdrate", "--results", s(&results), "--test", "test", "--anchor", "anchor"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("-50.0000%"), "{out}");

    let (code, out, _) = lmfc(&["nearlossless", "--results", s(&results)]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out.lines().count(), 2, "{out}");

    let report = dir.path().join("report");
    let (code, _, err) = lmfc(&["eval", "--results", s(&results), "--out", s(&report), "--anchor", "anchor"]);
    assert_eq!(code, EXIT_OK, "{err}");
    for f in ["points.csv", "metrics.csv", "rate_metric.svg", "distortion_metric.svg"] {
        assert!(report.join(f).exists(), "{f}");
    }
}
