//! `chunkvc` — convert, benchmark, verify, and initialize weights from the
//! command line. Streaming is simulated by pushing chunk-sized slices of a
//! WAV file through a session; exit codes are 0 (success), 1 (validation
//! failure), 2 (I/O or format failure).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chunkvc::dsp::{load_wav, write_wav, WavError};
use chunkvc::model::{
    config_from_text, init_weights, load_model, save_model, validate_config, ModelConfig,
    ModelIoError,
};
use chunkvc::pipeline::{convert_pipelined, Model, PipelineError, StreamSession};
use chunkvc::verify::run_probes;
use chunkvc::PcmAudio;

#[derive(Parser)]
#[command(name = "chunkvc", version, about = "Chunkwise streaming voice conversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Full,
    Fast,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a config and write a deterministically initialized container
    InitWeights {
        /// Flat-text config document; defaults to the full-setting preset
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a source WAV in streaming chunks, styled by a reference WAV
    Convert {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the container's chunking preset
        #[arg(long)]
        setting: Option<SettingArg>,
        /// Override the chunk duration (must stay a multiple of 20)
        #[arg(long)]
        chunk_ms: Option<u32>,
        /// Write the latency report here (sequential mode only)
        #[arg(long, conflicts_with = "pipelined")]
        report: Option<PathBuf>,
        /// Run content / main / vocoder as concurrent pipeline stages
        #[arg(long)]
        pipelined: bool,
    },
    /// Push seeded noise through a session and print the latency report
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..))]
        seconds: u32,
        #[arg(long)]
        setting: Option<SettingArg>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the built-in property probes against a model
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum CliError {
    Validation(String),
    Io(String),
}

impl From<ModelIoError> for CliError {
    fn from(e: ModelIoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<WavError> for CliError {
    fn from(e: WavError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::ReferenceTooShort { .. }
            | PipelineError::NoReference
            | PipelineError::BadSampleRate { .. }
            | PipelineError::NoChunksProcessed
            | PipelineError::NegativeLatency
            | PipelineError::EmptyStack => CliError::Validation(e.to_string()),
            other => CliError::Io(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    return ExitCode::SUCCESS;
                }
                _ => ExitCode::from(1),
            };
            eprint!("{e}");
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::InitWeights { config, seed, out } => cmd_init_weights(config, seed, &out),
        Command::Convert {
            model,
            source,
            reference,
            out,
            setting,
            chunk_ms,
            report,
            pipelined,
        } => cmd_convert(
            &model, &source, &reference, &out, setting, chunk_ms, report, pipelined,
        ),
        Command::Bench {
            model,
            seconds,
            setting,
            report,
        } => cmd_bench(&model, seconds, setting, report),
        Command::Verify { model, seed } => cmd_verify(&model, seed),
    }
}

fn check_config(cfg: &ModelConfig) -> Result<(), CliError> {
    let violations = validate_config(cfg);
    if violations.is_empty() {
        return Ok(());
    }
    let lines: Vec<String> = violations
        .iter()
        .map(|v| format!("  {}: {}", v.field, v.rule))
        .collect();
    Err(CliError::Validation(format!(
        "invalid config:\n{}",
        lines.join("\n")
    )))
}

/// Chunking is a runtime choice, not a weight shape: switching presets swaps
/// the session schedule and the extractor's chunk/right-context geometry.
fn apply_overrides(
    cfg: &mut ModelConfig,
    setting: Option<SettingArg>,
    chunk_ms: Option<u32>,
) -> Result<(), CliError> {
    if let Some(s) = setting {
        let preset = match s {
            SettingArg::Full => ModelConfig::full(),
            SettingArg::Fast => ModelConfig::fast(),
        };
        cfg.session = preset.session;
        cfg.extractor.chunk_frames = preset.extractor.chunk_frames;
        cfg.extractor.right_context_chunks = preset.extractor.right_context_chunks;
    }
    if let Some(ms) = chunk_ms {
        cfg.session.chunk_ms = ms;
        cfg.extractor.chunk_frames = ms as usize / 20;
        cfg.session.right_context_ms = cfg.extractor.right_context_chunks as f32 * ms as f32;
    }
    check_config(cfg)
}

fn cmd_init_weights(config: Option<PathBuf>, seed: u64, out: &Path) -> Result<(), CliError> {
    let cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            config_from_text(&text).map_err(|e| CliError::Validation(e.to_string()))?
        }
        None => ModelConfig::full(),
    };
    check_config(&cfg)?;
    let weights = init_weights(&cfg, seed)?;
    save_model(&cfg, &weights, out)?;
    println!("wrote {} tensors to {}", weights.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_convert(
    model_path: &Path,
    source: &Path,
    reference: &Path,
    out: &Path,
    setting: Option<SettingArg>,
    chunk_ms: Option<u32>,
    report: Option<PathBuf>,
    pipelined: bool,
) -> Result<(), CliError> {
    let (mut cfg, weights) = load_model(model_path)?;
    apply_overrides(&mut cfg, setting, chunk_ms)?;
    let model = Model::new(cfg, &weights)?;
    let source_audio = load_wav(source)?;
    let reference_audio = load_wav(reference)?;

    let converted = if pipelined {
        let ctx = model.reference_context(&reference_audio)?;
        convert_pipelined(&model, &ctx, &source_audio)?
    } else {
        let mut session = StreamSession::new(&model);
        session.prepare_reference(&reference_audio)?;
        let push = model.config().extractor.chunk_frames * model.config().mel.hop;
        let mut samples = Vec::with_capacity(source_audio.samples.len());
        let mut at = 0;
        while at < source_audio.samples.len() {
            let take = push.min(source_audio.samples.len() - at);
            let piece = PcmAudio::new(source_audio.samples[at..at + take].to_vec());
            samples.extend(session.push_chunk(&piece)?.samples);
            at += take;
        }
        samples.extend(session.flush()?.samples);
        if let Some(path) = report {
            std::fs::write(&path, session.latency_report()?.to_text())?;
        }
        samples
    };
    write_wav(&PcmAudio::new(converted), out)?;
    Ok(())
}

fn cmd_bench(
    model_path: &Path,
    seconds: u32,
    setting: Option<SettingArg>,
    report: Option<PathBuf>,
) -> Result<(), CliError> {
    let (mut cfg, weights) = load_model(model_path)?;
    apply_overrides(&mut cfg, setting, None)?;
    let model = Model::new(cfg, &weights)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xbe7c4);
    let hop = model.config().mel.hop;
    let frames_per_s = 16_000usize.div_ceil(hop);
    let reference = PcmAudio::new((0..hop * frames_per_s).map(|_| rng.gen_range(-0.5..0.5)).collect());
    let input = PcmAudio::new(
        (0..hop * frames_per_s * seconds as usize)
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect(),
    );

    let mut session = StreamSession::new(&model);
    session.prepare_reference(&reference)?;
    let push = model.config().extractor.chunk_frames * hop;
    let mut at = 0;
    while at < input.samples.len() {
        let take = push.min(input.samples.len() - at);
        session.push_chunk(&PcmAudio::new(input.samples[at..at + take].to_vec()))?;
        at += take;
    }
    session.flush()?;

    let text = session.latency_report()?.to_text();
    print!("{text}");
    if let Some(path) = report {
        std::fs::write(&path, text)?;
    }
    Ok(())
}

fn cmd_verify(model_path: &Path, seed: u64) -> Result<(), CliError> {
    let (cfg, weights) = load_model(model_path)?;
    let model = Model::new(cfg, &weights)?;
    let results = run_probes(&model, seed);
    let mut all_pass = true;
    for r in &results {
        println!(
            "{} {} — {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        all_pass &= r.passed;
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Validation("one or more probes failed".into()))
    }
}
