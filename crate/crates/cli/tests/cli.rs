use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use wavlm_core::signal::{synth, write_wav, SynthKind, SynthParams};

fn wavlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wavlm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_corpus(dir: &Path, count: usize, seconds: f64) {
    fs::create_dir_all(dir).unwrap();
    let kinds = [
        SynthKind::Sine,
        SynthKind::Chirp,
        SynthKind::WhiteNoise,
        SynthKind::PinkNoise,
    ];
    for i in 0..count {
        let p = SynthParams {
            frequency: 200.0 + 150.0 * i as f64,
            amplitude: 0.3,
            ..SynthParams::default()
        };
        let w = synth(kinds[i % 4], seconds, i as u64, &p).unwrap();
        write_wav(dir.join(format!("utt{i:02}.wav")), &w).unwrap();
    }
}

#[test]
fn inspect_buckets_saturates() {
    let o = wavlm(&["inspect-buckets", "--n", "320", "--m", "800", "--range", "-1200..1200"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some("offset,bucket"));
    assert_eq!(text.lines().count(), 2402);
    assert!(text.lines().any(|l| l == "-1000,159"));
    assert!(text.lines().any(|l| l == "1000,319"));
    assert!(text.lines().any(|l| l == "0,0"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("buckets.csv");
    let o = wavlm(&[
        "inspect-buckets",
        "--range",
        "-1000..-1000",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(path).unwrap(), "offset,bucket\n-1000,159\n");
}

#[test]
fn pseudo_labels_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    write_corpus(&input, 6, 0.5);
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("out{run}"));
        let o = wavlm(&[
            "pseudo-label",
            "--in-dir",
            input.to_str().unwrap(),
            "--C",
            "5",
            "--iters",
            "20",
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push((
            fs::read(out.join("labels.txt")).unwrap(),
            fs::read(out.join("codebook.bin")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    let labels = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert_eq!(labels.lines().count(), 6);
    // 0.5 s → 24 encoder frames.
    assert!(labels.lines().all(|l| l.split(' ').count() == 24));
}

#[test]
fn simulate_mix_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    let noise = dir.path().join("noise");
    write_corpus(&input, 5, 0.2);
    write_corpus(&noise, 2, 0.1);
    let mut runs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("mix{run}"));
        let o = wavlm(&[
            "simulate-mix",
            "--in-dir",
            input.to_str().unwrap(),
            "--noise-dir",
            noise.to_str().unwrap(),
            "--p",
            "1",
            "--pn",
            "0.5",
            "--seed",
            "9",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let events = fs::read_to_string(out.join("events.json")).unwrap();
        runs.push((events, fs::read(out.join("utt03.wav")).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
    let events: serde_json::Value = serde_json::from_str(&runs[0].0).unwrap();
    assert_eq!(events.as_array().unwrap().len(), 5);
}

#[test]
fn usage_and_config_errors_exit_with_2() {
    assert_eq!(wavlm(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(wavlm(&["inspect-buckets", "--bogus"]).status.code(), Some(2));
    assert_eq!(wavlm(&["inspect-buckets", "--range", "7..1"]).status.code(), Some(2));
    assert_eq!(wavlm(&["verify"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"steps": 10, "unknown_field": 1}"#).unwrap();
    let o = wavlm(&["pretrain-toy", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(
        wavlm(&["pretrain-toy", "--config", bad.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn runtime_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = wavlm(&["pseudo-label", "--in-dir", empty.to_str().unwrap(), "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn dump_config_round_trips_and_short_run_writes_outputs() {
    let o = wavlm(&["pretrain-toy", "--dump-config"]);
    assert!(o.status.success());
    let mut cfg: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(cfg["steps"], 200);

    cfg["steps"] = 2.into();
    cfg["warmup_steps"] = 1.into();
    cfg["batch_size"] = 2.into();
    cfg["corpus"]["utterances"] = 4.into();
    cfg["corpus"]["seconds"] = 0.3.into();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = dir.path().join("run");
    let o = wavlm(&[
        "pretrain-toy",
        "--config",
        path.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("loss.csv")).unwrap().lines().count(), 3);
    assert!(out.join("checkpoint-final.json").exists());
    assert!(out.join("checkpoint-final.bin").exists());
}

#[test]
fn gradcheck_micro_passes() {
    let o = wavlm(&["gradcheck", "--preset", "micro", "--seed", "5"]);
    assert!(
        o.status.success(),
        "{}{}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("parameter groups agree"));
    assert_eq!(wavlm(&["gradcheck", "--preset", "huge"]).status.code(), Some(2));
}
