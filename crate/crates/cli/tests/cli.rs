use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chunkvc::dsp::{load_wav, write_wav};
use chunkvc::model::config_to_text;
use chunkvc::{ModelConfig, PcmAudio};
use sha2::{Digest, Sha256};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chunkvc"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn chunkvc")
}

fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig::fast();
    cfg.extractor.layers = 2;
    cfg.extractor.d_model = 8;
    cfg.extractor.heads = 2;
    cfg.extractor.ffn_dim = 16;
    cfg.extractor.left_context_frames = 3;
    cfg.extractor.memory_slots = 2;
    cfg.extractor.classes = 5;
    cfg.mel.n_mels = 6;
    cfg.style.codebook_size = 4;
    cfg.style.d_code = 4;
    cfg.style.d_timbre = 6;
    cfg.style.conv_channels = 5;
    cfg.decoder.pitch_hidden = 7;
    cfg.decoder.pitch_emb_dim = 3;
    cfg.decoder.mel_hidden = 7;
    cfg.vocoder.base_channels = 4;
    cfg
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.cfg");
    std::fs::write(&path, config_to_text(&small_config())).unwrap();
    path
}

fn init_model(dir: &Path) -> PathBuf {
    let cfg = write_config(dir);
    let model = dir.join("model.cnvc");
    let out = run(&[
        "init-weights",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "42",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    model
}

fn sine_wav(dir: &Path, name: &str, samples: usize) -> PathBuf {
    let path = dir.join(name);
    let audio = PcmAudio::new(
        (0..samples)
            .map(|i| 0.4 * (i as f32 * 0.05).sin() + 0.1 * (i as f32 * 0.013).cos())
            .collect(),
    );
    write_wav(&audio, &path).unwrap();
    path
}

fn sha256(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap();
    format!("{:x}", Sha256::digest(bytes))
}

#[test]
fn init_weights_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a.cnvc");
    let b = dir.path().join("b.cnvc");
    for out in [&a, &b] {
        let res = run(&[
            "init-weights",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "42",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(res.status.success());
    }
    assert_eq!(sha256(&a), sha256(&b));
}

#[test]
fn invalid_config_exits_1_listing_violations() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.vocoder.factors = vec![8, 8, 2, 2];
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, config_to_text(&cfg)).unwrap();
    let out = run(&[
        "init-weights",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("x.cnvc").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("vocoder.factors"), "{stderr}");
}

#[test]
fn missing_out_flag_is_a_usage_error() {
    let out = run(&["init-weights", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn unknown_flag_rejected() {
    let out = run(&["bench", "--model", "x", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn convert_conserves_duration_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let model = init_model(dir.path());
    let source = sine_wav(dir.path(), "source.wav", 7_003);
    let reference = sine_wav(dir.path(), "reference.wav", 5_000);
    let out_a = dir.path().join("out_a.wav");
    let out_b = dir.path().join("out_b.wav");
    for out in [&out_a, &out_b] {
        let res = run(&[
            "convert",
            "--model",
            model.to_str().unwrap(),
            "--source",
            source.to_str().unwrap(),
            "--reference",
            reference.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    assert_eq!(load_wav(&out_a).unwrap().samples.len(), 7_003);
    assert_eq!(sha256(&out_a), sha256(&out_b));
}

#[test]
fn pipelined_convert_matches_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let model = init_model(dir.path());
    let source = sine_wav(dir.path(), "source.wav", 6_400);
    let reference = sine_wav(dir.path(), "reference.wav", 4_000);
    let seq = dir.path().join("seq.wav");
    let pip = dir.path().join("pip.wav");
    let base = [
        "convert",
        "--model",
        model.to_str().unwrap(),
        "--source",
        source.to_str().unwrap(),
        "--reference",
        reference.to_str().unwrap(),
    ];
    let mut seq_args: Vec<&str> = base.to_vec();
    seq_args.extend(["--out", seq.to_str().unwrap()]);
    assert!(run(&seq_args).status.success());
    let mut pip_args: Vec<&str> = base.to_vec();
    pip_args.extend(["--out", pip.to_str().unwrap(), "--pipelined"]);
    assert!(run(&pip_args).status.success());
    assert_eq!(sha256(&seq), sha256(&pip));
}

#[test]
fn chunk_ms_not_multiple_of_20_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let model = init_model(dir.path());
    let source = sine_wav(dir.path(), "source.wav", 4_000);
    let reference = sine_wav(dir.path(), "reference.wav", 4_000);
    let out = run(&[
        "convert",
        "--model",
        model.to_str().unwrap(),
        "--source",
        source.to_str().unwrap(),
        "--reference",
        reference.to_str().unwrap(),
        "--out",
        dir.path().join("o.wav").to_str().unwrap(),
        "--chunk-ms",
        "30",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiple of 20"));
}

#[test]
fn too_short_reference_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let model = init_model(dir.path());
    let source = sine_wav(dir.path(), "source.wav", 4_000);
    let reference = sine_wav(dir.path(), "short.wav", 1_000);
    let out = run(&[
        "convert",
        "--model",
        model.to_str().unwrap(),
        "--source",
        source.to_str().unwrap(),
        "--reference",
        reference.to_str().unwrap(),
        "--out",
        dir.path().join("o.wav").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("reference"));
}

#[test]
fn corrupt_model_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.cnvc");
    std::fs::write(&model, b"CNVyes this is not a container").unwrap();
    let out = run(&["verify", "--model", model.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // also: a well-formed container with a tensor of the wrong shape
    let good = init_model(dir.path());
    let mut bytes = std::fs::read(&good).unwrap();
    let mid = bytes.len() / 2;
    bytes.truncate(mid);
    std::fs::write(&model, bytes).unwrap();
    let out = run(&["verify", "--model", model.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_wav_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let model = init_model(dir.path());
    let reference = sine_wav(dir.path(), "reference.wav", 4_000);
    let out = run(&[
        "convert",
        "--model",
        model.to_str().unwrap(),
        "--source",
        dir.path().join("nope.wav").to_str().unwrap(),
        "--reference",
        reference.to_str().unwrap(),
        "--out",
        dir.path().join("o.wav").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_prints_a_consistent_report() {
    let dir = tempfile::tempdir().unwrap();
    let model = init_model(dir.path());
    let report_path = dir.path().join("report.txt");
    let out = run(&[
        "bench",
        "--model",
        model.to_str().unwrap(),
        "--seconds",
        "1",
        "--report",
        report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("chunk_ms = 20"), "{stdout}");
    assert!(stdout.contains("overall_rtf = "), "{stdout}");

    let text = std::fs::read_to_string(&report_path).unwrap();
    assert_eq!(text, stdout);
    let get = |key: &str| -> f64 {
        text.lines()
            .find(|l| l.starts_with(key))
            .and_then(|l| l.split(" = ").nth(1))
            .unwrap()
            .parse()
            .unwrap()
    };
    let overall = chunkvc::pipeline::overall_latency(
        [get("content_ms"), get("main_ms"), get("vocoder_ms")],
        get("chunk_ms"),
        get("right_context_ms"),
    )
    .unwrap();
    assert_eq!(get("overall_ms"), overall);
}

#[test]
fn bench_rejects_zero_seconds() {
    let dir = tempfile::tempdir().unwrap();
    let model = init_model(dir.path());
    let out = run(&["bench", "--model", model.to_str().unwrap(), "--seconds", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_passes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let model = init_model(dir.path());
    let a = run(&["verify", "--model", model.to_str().unwrap()]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stdout));
    let stdout = String::from_utf8_lossy(&a.stdout);
    assert_eq!(stdout.matches("PASS").count(), 5, "{stdout}");
    assert_eq!(stdout.matches("FAIL").count(), 0);

    let b = run(&["verify", "--model", model.to_str().unwrap()]);
    assert_eq!(a.stdout, b.stdout);
}
