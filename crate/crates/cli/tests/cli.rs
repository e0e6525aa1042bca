use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use holdshift_core::dataset::read_samples;
use holdshift_core::{Channel, TurnLabel};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_holdshift"));
    c.env("HOLDSHIFT_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn golden_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("samples.jsonl");
    let o = run(&["label", "--input", s(&fixture("golden_recordings.jsonl")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&out).unwrap(), fs::read(fixture("golden_samples.jsonl")).unwrap());

    // Worked by hand from the segment layout of each recording.
    use Channel::*;
    use TurnLabel::*;
    let want = [
        ("pause", 60, Ch0, Hold, 440),
        ("pause", 175, Ch0, Hold, 325),
        ("handover", 110, Ch0, Shift, 390),
        ("handover", 300, Ch1, Hold, 325),
        ("monologue", 60, Ch0, Hold, 440),
        ("monologue", 200, Ch0, Shift, 300),
    ];
    let (got, diags) = read_samples(&out).unwrap();
    assert!(diags.is_empty());
    let got: Vec<_> = got
        .iter()
        .map(|x| (x.source_id.as_str(), x.decision_frame, x.channel, x.label, x.pad_frames))
        .collect();
    assert_eq!(got, want);
}

#[test]
fn empty_manifest_gives_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty.jsonl");
    fs::write(&input, "").unwrap();
    let out = dir.path().join("samples.jsonl");
    let o = run(&["label", "--input", s(&input), "--out", s(&out)]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&out).unwrap(), "");
    assert!(String::from_utf8_lossy(&o.stderr).contains("no recordings"));

    let o = run(&["label", "--input", s(&input), "--out", s(&out), "--strict"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_lines_are_skipped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = fs::read_to_string(fixture("golden_recordings.jsonl")).unwrap();
    text.push_str("{not json\n");
    text.push_str("{\"id\":\"bad\",\"frame_rate_hz\":50,\"ch0\":\"0012\"}\n");
    text.push_str("{\"id\":\"uneven\",\"frame_rate_hz\":50,\"ch0\":\"0011\",\"ch1\":\"00\"}\n");
    let input = dir.path().join("mixed.jsonl");
    fs::write(&input, text).unwrap();
    let out = dir.path().join("samples.jsonl");
    let stats = dir.path().join("stats.json");
    let o = run(&["label", "--input", s(&input), "--out", s(&out), "--stats", s(&stats)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("malformed lines skipped: 3"));
    assert_eq!(fs::read(&out).unwrap(), fs::read(fixture("golden_samples.jsonl")).unwrap());
    let j: serde_json::Value = serde_json::from_str(&fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(j["malformed_lines"], 3);
    assert_eq!(j["recordings"], 3);
}

#[test]
fn synth_is_seeded_and_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str, seed: &str| {
        let d = dir.path().join(name);
        let o = run(&["synth", "--out-dir", s(&d), "--seed", seed]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        d
    };
    let a = gen("a", "3");
    let b = gen("b", "3");
    let c = gen("c", "4");
    let read = |d: &Path| fs::read(d.join("recordings.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("synth_report.json")).unwrap()).unwrap();
    assert_eq!(report["agreement_rate"], 1.0);

    let out = dir.path().join("samples.jsonl");
    let o = run(&["label", "--input", s(&a.join("recordings.jsonl")), "--out", s(&out)]);
    assert!(o.status.success());
    let (samples, _) = read_samples(&out).unwrap();
    let shift = samples.iter().filter(|x| x.label == TurnLabel::Shift).count() as f64 / samples.len() as f64;
    assert!((shift - 0.5).abs() <= 0.05, "shift fraction {shift}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = dir.path().join("o.jsonl");
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["bogus"]).status.code(), Some(1));
    assert_eq!(
        run(&["--set", "nope=1", "label", "--input", s(&missing), "--out", s(&out)]).status.code(),
        Some(1)
    );
    let o = run(&["label", "--input", s(&missing), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.matches("error:").count(), 1, "{err}");

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let samples = fixture("golden_samples.jsonl");
    let m = dir.path().join("m.json");
    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--data", s(&samples), "--checkpoint", s(&junk), "--out", s(&m)];
        args.extend_from_slice(extra);
        run(&args).status.code()
    };
    assert_eq!(eval(&[]), Some(2));
}

/// Settings for a model small enough to train in seconds.
const TINY: [&str; 16] = [
    "--set",
    "model_dim=8",
    "--set",
    "heads=2",
    "--set",
    "fusion_layers=1",
    "--set",
    "transformer_layers=1",
    "--set",
    "ffn_hidden=16",
    "--set",
    "linguistic_dim=8",
    "--set",
    "acoustic_dim=6",
    "--set",
    "epochs=1",
];

fn tiny(args: &[&str]) -> Output {
    let mut full: Vec<&str> = TINY.to_vec();
    full.extend_from_slice(args);
    run(&full)
}

#[test]
fn train_eval_stream_attribute() {
    let dir = tempfile::tempdir().unwrap();
    let p = |rel: &str| dir.path().join(rel);
    let ok = |o: Output| assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    ok(tiny(&["synth", "--out-dir", s(&p("synth")), "--n-recordings", "5"]));
    ok(tiny(&["label", "--input", s(&p("synth/recordings.jsonl")), "--out", s(&p("samples.jsonl"))]));
    ok(tiny(&["train", "--data", s(&p("samples.jsonl")), "--out-dir", s(&p("run")), "--batch-size", "16"]));
    for f in ["split.json", "train_log.jsonl", "best.ckpt", "final.ckpt"] {
        assert!(p("run").join(f).exists(), "{f}");
    }
    assert!(!p("run/last_good.ckpt").exists());

    let ck = p("run/final.ckpt");
    // Val subset needs the split.
    let o = tiny(&["eval", "--data", s(&p("samples.jsonl")), "--checkpoint", s(&ck), "--subset", "val", "--out", s(&p("m.json"))]);
    assert_eq!(o.status.code(), Some(1));
    ok(tiny(&[
        "eval",
        "--data",
        s(&p("samples.jsonl")),
        "--checkpoint",
        s(&ck),
        "--split",
        s(&p("run/split.json")),
        "--subset",
        "val",
        "--out",
        s(&p("metrics.json")),
        "--timing",
        s(&p("timing.json")),
    ]));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("metrics.json")).unwrap()).unwrap();
    assert!(m["accuracy"].as_f64().is_some() && m["f1"].as_f64().is_some());
    assert!(m.get("latency_ms").is_none());
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("timing.json")).unwrap()).unwrap();
    assert!(t["latency_ms"]["p50"].as_f64().unwrap() <= t["latency_ms"]["max"].as_f64().unwrap());

    ok(tiny(&[
        "stream",
        "--recordings",
        s(&p("synth/recordings.jsonl")),
        "--checkpoint",
        s(&ck),
        "--clock-factor",
        "100",
        "--events",
        s(&p("events.jsonl")),
        "--summary",
        s(&p("stream.json")),
    ]));
    let events = fs::read_to_string(p("events.jsonl")).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("stream.json")).unwrap()).unwrap();
    assert_eq!(summary["events"].as_u64().unwrap() as usize, events.lines().count());

    ok(tiny(&[
        "attribute",
        "--data",
        s(&p("samples.jsonl")),
        "--checkpoint",
        s(&ck),
        "--out-dir",
        s(&p("attr")),
        "--limit",
        "20",
    ]));
    let bins = fs::read_to_string(p("attr/rho_bins.csv")).unwrap();
    assert!(bins.starts_with("bin,count,rho_linguistic,rho_acoustic"));
    let temporal = fs::read_to_string(p("attr/temporal.csv")).unwrap();
    let header = temporal.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 101);
}
