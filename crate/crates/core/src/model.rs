//! Model configuration, deterministic weight initialization, and the `.cnvc`
//! weight container.
//!
//! A container holds the canonical config text plus every named weight
//! tensor, so `save_model` → `load_model` → `save_model` is byte-identical.
//! Weight names form a closed set: [`weight_manifest`] lists exactly the
//! tensors the runtime consumes, and [`WeightReader::finish`] fails if any
//! tensor in a container was never read.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsp::MelConfig;

pub const CONTAINER_MAGIC: &[u8; 4] = b"CNVC";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("bad magic (not a CNVC container)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("container truncated")]
    Truncated,
    #[error("duplicate tensor name {0:?}")]
    DuplicateTensor(String),
    #[error("tensor {name:?}: dims product {expected} disagrees with payload length {got}")]
    PayloadMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("trailing bytes after last tensor")]
    TrailingBytes,
    #[error("non-finite value in tensor {0:?}")]
    NonFinite(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?}: expected dims {expected:?}, found {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unused tensors in container: {0:?}")]
    UnusedTensors(Vec<String>),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    Full,
    Fast,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Full => "full",
            Setting::Fast => "fast",
        })
    }
}

impl std::str::FromStr for Setting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Setting::Full),
            "fast" => Ok(Setting::Fast),
            other => Err(format!("unknown setting {other:?} (want full or fast)")),
        }
    }
}

/// Emformer-style content extractor dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Frames per chunk (20 ms each): 4 in the full setting, 1 in fast.
    pub chunk_frames: usize,
    pub right_context_chunks: usize,
    pub left_context_frames: usize,
    pub memory_slots: usize,
    /// Content label vocabulary size J.
    pub classes: usize,
}

/// Timbre/style reference encoder dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StyleConfig {
    pub codebook_size: usize,
    pub d_code: usize,
    pub d_timbre: usize,
    /// Hidden width of the timbre and token conv stacks.
    pub conv_channels: usize,
    /// Mel frames pooled into one style token (4 = 80 ms).
    pub token_stride: usize,
}

/// Pitch predictor and mel decoder dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub kernel: usize,
    pub pitch_hidden: usize,
    pub pitch_dilations: Vec<usize>,
    pub pitch_emb_dim: usize,
    pub mel_hidden: usize,
    pub mel_dilations: Vec<usize>,
}

/// Causal shuffle vocoder dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocoderConfig {
    pub base_channels: usize,
    /// Per-stage upsample factors; the product must equal the mel hop.
    pub factors: Vec<usize>,
    pub branch_kernels: Vec<usize>,
    pub branch_dilations: Vec<usize>,
    pub pre_kernel: usize,
    pub post_kernel: usize,
}

/// Streaming session parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub setting: Setting,
    pub chunk_ms: u32,
    pub right_context_chunks: usize,
    /// Right-context term of the latency identity, in ms. Defaults to
    /// `right_context_chunks * chunk_ms` but is an independent knob.
    pub right_context_ms: f32,
}

impl SessionConfig {
    pub fn chunk_samples(&self) -> usize {
        self.chunk_ms as usize * 16
    }

    pub fn chunk_frames(&self) -> usize {
        self.chunk_ms as usize / 20
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mel: MelConfig,
    pub extractor: ExtractorConfig,
    pub style: StyleConfig,
    pub decoder: DecoderConfig,
    pub vocoder: VocoderConfig,
    pub session: SessionConfig,
}

impl ModelConfig {
    /// 80 ms chunks with two chunks of lookahead; 6 extractor layers.
    pub fn full() -> Self {
        ModelConfig {
            mel: MelConfig::default(),
            extractor: ExtractorConfig {
                layers: 6,
                d_model: 256,
                heads: 4,
                ffn_dim: 1024,
                chunk_frames: 4,
                right_context_chunks: 2,
                left_context_frames: 8,
                memory_slots: 4,
                classes: 100,
            },
            style: StyleConfig {
                codebook_size: 128,
                d_code: 64,
                d_timbre: 128,
                conv_channels: 128,
                token_stride: 4,
            },
            decoder: DecoderConfig {
                kernel: 3,
                pitch_hidden: 256,
                pitch_dilations: vec![1, 2, 4],
                pitch_emb_dim: 32,
                mel_hidden: 256,
                mel_dilations: vec![1, 1, 2, 2, 4, 4],
            },
            vocoder: VocoderConfig {
                base_channels: 128,
                factors: vec![8, 5, 4, 2],
                branch_kernels: vec![3, 7, 11],
                branch_dilations: vec![1, 3, 5],
                pre_kernel: 7,
                post_kernel: 7,
            },
            session: SessionConfig {
                setting: Setting::Full,
                chunk_ms: 80,
                right_context_chunks: 2,
                right_context_ms: 160.0,
            },
        }
    }

    /// 20 ms chunks, no lookahead; 3 extractor layers.
    pub fn fast() -> Self {
        let mut cfg = ModelConfig::full();
        cfg.extractor.layers = 3;
        cfg.extractor.chunk_frames = 1;
        cfg.extractor.right_context_chunks = 0;
        cfg.session = SessionConfig {
            setting: Setting::Fast,
            chunk_ms: 20,
            right_context_chunks: 0,
            right_context_ms: 0.0,
        };
        cfg
    }

    pub fn preset(setting: Setting) -> Self {
        match setting {
            Setting::Full => ModelConfig::full(),
            Setting::Fast => ModelConfig::fast(),
        }
    }
}

/// One broken config rule. Violations are data, not errors: `validate_config`
/// reports all of them at once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

pub fn validate_config(cfg: &ModelConfig) -> Vec<Violation> {
    let mut v = Vec::new();
    let mut push = |field: &str, rule: String| {
        v.push(Violation {
            field: field.to_string(),
            rule,
        });
    };

    if cfg.mel.sample_rate != 16000 {
        push("mel.sample_rate", format!("{} ≠ 16000", cfg.mel.sample_rate));
    }
    if cfg.mel.hop == 0 {
        push("mel.hop", "must be > 0".into());
    }
    if cfg.mel.win < cfg.mel.hop {
        push("mel.win", format!("win {} < hop {}", cfg.mel.win, cfg.mel.hop));
    }
    if cfg.mel.n_mels == 0 {
        push("mel.n_mels", "must be > 0".into());
    }
    if !(cfg.mel.log_floor > 0.0) {
        push("mel.log_floor", "must be > 0".into());
    }
    if cfg.mel.f_min >= cfg.mel.f_max {
        push("mel.f_min", format!("{} ≥ f_max {}", cfg.mel.f_min, cfg.mel.f_max));
    }
    if cfg.mel.f_max > cfg.mel.sample_rate as f32 / 2.0 {
        push("mel.f_max", format!("{} above Nyquist", cfg.mel.f_max));
    }

    let e = &cfg.extractor;
    for (name, val) in [
        ("extractor.layers", e.layers),
        ("extractor.d_model", e.d_model),
        ("extractor.heads", e.heads),
        ("extractor.ffn_dim", e.ffn_dim),
        ("extractor.chunk_frames", e.chunk_frames),
        ("extractor.classes", e.classes),
    ] {
        if val == 0 {
            push(name, "must be ≥ 1".into());
        }
    }
    if e.heads != 0 && e.d_model % e.heads != 0 {
        push(
            "extractor.d_model",
            format!("{} not divisible by heads {}", e.d_model, e.heads),
        );
    }

    let s = &cfg.style;
    if s.codebook_size < 2 {
        push("style.codebook_size", "must be ≥ 2".into());
    }
    for (name, val) in [
        ("style.d_code", s.d_code),
        ("style.d_timbre", s.d_timbre),
        ("style.conv_channels", s.conv_channels),
        ("style.token_stride", s.token_stride),
    ] {
        if val == 0 {
            push(name, "must be ≥ 1".into());
        }
    }

    let d = &cfg.decoder;
    if d.kernel == 0 || d.kernel % 2 == 0 {
        push("decoder.kernel", format!("{} not odd", d.kernel));
    }
    for (name, val) in [
        ("decoder.pitch_hidden", d.pitch_hidden),
        ("decoder.pitch_emb_dim", d.pitch_emb_dim),
        ("decoder.mel_hidden", d.mel_hidden),
    ] {
        if val == 0 {
            push(name, "must be ≥ 1".into());
        }
    }
    if d.pitch_dilations.is_empty() || d.pitch_dilations.iter().any(|&x| x == 0) {
        push("decoder.pitch_dilations", "must be non-empty, all ≥ 1".into());
    }
    if d.mel_dilations.is_empty() || d.mel_dilations.iter().any(|&x| x == 0) {
        push("decoder.mel_dilations", "must be non-empty, all ≥ 1".into());
    }

    let vo = &cfg.vocoder;
    if vo.base_channels == 0 {
        push("vocoder.base_channels", "must be ≥ 1".into());
    }
    if vo.factors.is_empty() || vo.factors.iter().any(|&r| r == 0) {
        push("vocoder.factors", "must be non-empty, all ≥ 1".into());
    } else {
        let product: usize = vo.factors.iter().product();
        if product != cfg.mel.hop {
            push(
                "vocoder.factors",
                format!("product {} ≠ hop {}", product, cfg.mel.hop),
            );
        }
    }
    if vo.branch_kernels.is_empty() || vo.branch_dilations.is_empty() {
        push("vocoder.branch_kernels", "need ≥ 1 kernel and dilation".into());
    }
    for &k in vo
        .branch_kernels
        .iter()
        .chain([&vo.pre_kernel, &vo.post_kernel])
    {
        if k == 0 || k % 2 == 0 {
            push("vocoder.kernels", format!("{k} not odd"));
        }
    }
    if vo.branch_dilations.iter().any(|&x| x == 0) {
        push("vocoder.branch_dilations", "all must be ≥ 1".into());
    }

    let se = &cfg.session;
    if se.chunk_ms == 0 || se.chunk_ms % 20 != 0 {
        push("session.chunk_ms", "not multiple of 20".into());
    } else if se.chunk_ms as usize / 20 != e.chunk_frames {
        push(
            "session.chunk_ms",
            format!(
                "{} ms = {} frames ≠ extractor.chunk_frames {}",
                se.chunk_ms,
                se.chunk_ms as usize / 20,
                e.chunk_frames
            ),
        );
    }
    if se.right_context_chunks != e.right_context_chunks {
        push(
            "session.right_context_chunks",
            format!(
                "{} ≠ extractor.right_context_chunks {}",
                se.right_context_chunks, e.right_context_chunks
            ),
        );
    }
    if !(se.right_context_ms >= 0.0) {
        push("session.right_context_ms", "must be ≥ 0".into());
    }

    v
}

// ---------------------------------------------------------------------------
// Canonical config text

fn write_usize_list(out: &mut String, key: &str, values: &[usize]) {
    let joined = values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    out.push_str(&format!("{key} = [{joined}]\n"));
}

/// Serializes a config as flat `key = value` lines in a fixed order, with
/// shortest round-tripping float formatting, so equal configs always produce
/// identical bytes.
pub fn config_to_text(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    let m = &cfg.mel;
    s.push_str(&format!("session.setting = {}\n", cfg.session.setting));
    s.push_str(&format!("session.chunk_ms = {}\n", cfg.session.chunk_ms));
    s.push_str(&format!(
        "session.right_context_chunks = {}\n",
        cfg.session.right_context_chunks
    ));
    s.push_str(&format!(
        "session.right_context_ms = {}\n",
        cfg.session.right_context_ms
    ));
    s.push_str(&format!("mel.sample_rate = {}\n", m.sample_rate));
    s.push_str(&format!("mel.win = {}\n", m.win));
    s.push_str(&format!("mel.hop = {}\n", m.hop));
    s.push_str(&format!("mel.n_mels = {}\n", m.n_mels));
    s.push_str(&format!("mel.f_min = {}\n", m.f_min));
    s.push_str(&format!("mel.f_max = {}\n", m.f_max));
    s.push_str(&format!("mel.log_floor = {}\n", m.log_floor));
    let e = &cfg.extractor;
    s.push_str(&format!("extractor.layers = {}\n", e.layers));
    s.push_str(&format!("extractor.d_model = {}\n", e.d_model));
    s.push_str(&format!("extractor.heads = {}\n", e.heads));
    s.push_str(&format!("extractor.ffn_dim = {}\n", e.ffn_dim));
    s.push_str(&format!("extractor.chunk_frames = {}\n", e.chunk_frames));
    s.push_str(&format!(
        "extractor.right_context_chunks = {}\n",
        e.right_context_chunks
    ));
    s.push_str(&format!(
        "extractor.left_context_frames = {}\n",
        e.left_context_frames
    ));
    s.push_str(&format!("extractor.memory_slots = {}\n", e.memory_slots));
    s.push_str(&format!("extractor.classes = {}\n", e.classes));
    let st = &cfg.style;
    s.push_str(&format!("style.codebook_size = {}\n", st.codebook_size));
    s.push_str(&format!("style.d_code = {}\n", st.d_code));
    s.push_str(&format!("style.d_timbre = {}\n", st.d_timbre));
    s.push_str(&format!("style.conv_channels = {}\n", st.conv_channels));
    s.push_str(&format!("style.token_stride = {}\n", st.token_stride));
    let d = &cfg.decoder;
    s.push_str(&format!("decoder.kernel = {}\n", d.kernel));
    s.push_str(&format!("decoder.pitch_hidden = {}\n", d.pitch_hidden));
    write_usize_list(&mut s, "decoder.pitch_dilations", &d.pitch_dilations);
    s.push_str(&format!("decoder.pitch_emb_dim = {}\n", d.pitch_emb_dim));
    s.push_str(&format!("decoder.mel_hidden = {}\n", d.mel_hidden));
    write_usize_list(&mut s, "decoder.mel_dilations", &d.mel_dilations);
    let vo = &cfg.vocoder;
    s.push_str(&format!("vocoder.base_channels = {}\n", vo.base_channels));
    write_usize_list(&mut s, "vocoder.factors", &vo.factors);
    write_usize_list(&mut s, "vocoder.branch_kernels", &vo.branch_kernels);
    write_usize_list(&mut s, "vocoder.branch_dilations", &vo.branch_dilations);
    s.push_str(&format!("vocoder.pre_kernel = {}\n", vo.pre_kernel));
    s.push_str(&format!("vocoder.post_kernel = {}\n", vo.post_kernel));
    s
}

struct ConfigParser {
    map: IndexMap<String, String>,
    used: BTreeSet<String>,
}

impl ConfigParser {
    fn new(text: &str) -> Result<Self, ModelIoError> {
        let mut map = IndexMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ModelIoError::Config(format!("line {}: missing '='", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(ModelIoError::Config(format!("duplicate key {key:?}")));
            }
        }
        Ok(ConfigParser {
            map,
            used: BTreeSet::new(),
        })
    }

    fn raw(&mut self, key: &str) -> Result<&str, ModelIoError> {
        self.used.insert(key.to_string());
        self.map
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ModelIoError::Config(format!("missing key {key:?}")))
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, ModelIoError> {
        let raw = self.raw(key)?.to_string();
        raw.parse().map_err(|_| {
            ModelIoError::Config(format!("key {key:?}: cannot parse value {raw:?}"))
        })
    }

    fn parse_list(&mut self, key: &str) -> Result<Vec<usize>, ModelIoError> {
        let raw = self.raw(key)?.to_string();
        let inner = raw
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(|| {
                ModelIoError::Config(format!("key {key:?}: expected [..] list, got {raw:?}"))
            })?;
        inner
            .split(',')
            .map(|item| {
                item.trim().parse().map_err(|_| {
                    ModelIoError::Config(format!("key {key:?}: bad list item {item:?}"))
                })
            })
            .collect()
    }

    fn finish(self) -> Result<(), ModelIoError> {
        for key in self.map.keys() {
            if !self.used.contains(key) {
                return Err(ModelIoError::Config(format!("unknown key {key:?}")));
            }
        }
        Ok(())
    }
}

pub fn config_from_text(text: &str) -> Result<ModelConfig, ModelIoError> {
    let mut p = ConfigParser::new(text)?;
    let setting: String = p.parse("session.setting")?;
    let setting: Setting = setting
        .parse()
        .map_err(ModelIoError::Config)?;
    let cfg = ModelConfig {
        session: SessionConfig {
            setting,
            chunk_ms: p.parse("session.chunk_ms")?,
            right_context_chunks: p.parse("session.right_context_chunks")?,
            right_context_ms: p.parse("session.right_context_ms")?,
        },
        mel: MelConfig {
            sample_rate: p.parse("mel.sample_rate")?,
            win: p.parse("mel.win")?,
            hop: p.parse("mel.hop")?,
            n_mels: p.parse("mel.n_mels")?,
            f_min: p.parse("mel.f_min")?,
            f_max: p.parse("mel.f_max")?,
            log_floor: p.parse("mel.log_floor")?,
        },
        extractor: ExtractorConfig {
            layers: p.parse("extractor.layers")?,
            d_model: p.parse("extractor.d_model")?,
            heads: p.parse("extractor.heads")?,
            ffn_dim: p.parse("extractor.ffn_dim")?,
            chunk_frames: p.parse("extractor.chunk_frames")?,
            right_context_chunks: p.parse("extractor.right_context_chunks")?,
            left_context_frames: p.parse("extractor.left_context_frames")?,
            memory_slots: p.parse("extractor.memory_slots")?,
            classes: p.parse("extractor.classes")?,
        },
        style: StyleConfig {
            codebook_size: p.parse("style.codebook_size")?,
            d_code: p.parse("style.d_code")?,
            d_timbre: p.parse("style.d_timbre")?,
            conv_channels: p.parse("style.conv_channels")?,
            token_stride: p.parse("style.token_stride")?,
        },
        decoder: DecoderConfig {
            kernel: p.parse("decoder.kernel")?,
            pitch_hidden: p.parse("decoder.pitch_hidden")?,
            pitch_dilations: p.parse_list("decoder.pitch_dilations")?,
            pitch_emb_dim: p.parse("decoder.pitch_emb_dim")?,
            mel_hidden: p.parse("decoder.mel_hidden")?,
            mel_dilations: p.parse_list("decoder.mel_dilations")?,
        },
        vocoder: VocoderConfig {
            base_channels: p.parse("vocoder.base_channels")?,
            factors: p.parse_list("vocoder.factors")?,
            branch_kernels: p.parse_list("vocoder.branch_kernels")?,
            branch_dilations: p.parse_list("vocoder.branch_dilations")?,
            pre_kernel: p.parse("vocoder.pre_kernel")?,
            post_kernel: p.parse("vocoder.post_kernel")?,
        },
    };
    p.finish()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Weight manifest

/// Derived per-frame feature widths shared by decoder and pipeline.
pub fn pitch_input_dim(cfg: &ModelConfig) -> usize {
    cfg.extractor.d_model + cfg.style.d_timbre + cfg.style.d_code
}

pub fn fused_input_dim(cfg: &ModelConfig) -> usize {
    pitch_input_dim(cfg) + cfg.decoder.pitch_emb_dim
}

/// Every weight tensor the runtime consumes, as (name, dims), in container
/// order. Rank-2 tensors are row-major `[out, in]`; rank-3 are `[out, in,
/// kernel]` with the last kernel tap applying to the current frame.
pub fn weight_manifest(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut m: Vec<(String, Vec<usize>)> = Vec::new();
    let mut put = |name: String, dims: Vec<usize>| m.push((name, dims));

    let e = &cfg.extractor;
    let n_mels = cfg.mel.n_mels;
    put("extractor.input_proj.weight".into(), vec![e.d_model, n_mels]);
    put("extractor.input_proj.bias".into(), vec![e.d_model]);
    for n in 0..e.layers {
        for proj in ["wq", "wk", "wv"] {
            put(
                format!("extractor.layer{n}.{proj}.weight"),
                vec![e.d_model, e.d_model],
            );
        }
        put(
            format!("extractor.layer{n}.ffn.w1.weight"),
            vec![e.ffn_dim, e.d_model],
        );
        put(format!("extractor.layer{n}.ffn.w1.bias"), vec![e.ffn_dim]);
        put(
            format!("extractor.layer{n}.ffn.w2.weight"),
            vec![e.d_model, e.ffn_dim],
        );
        put(format!("extractor.layer{n}.ffn.w2.bias"), vec![e.d_model]);
    }
    put("extractor.classifier.weight".into(), vec![e.classes, e.d_model]);

    let s = &cfg.style;
    let cc = s.conv_channels;
    for (i, (cin, cout)) in [(n_mels, cc), (cc, cc), (cc, cc), (cc, cc)]
        .into_iter()
        .enumerate()
    {
        put(format!("style.timbre.conv{i}.weight"), vec![cout, cin, 3]);
        put(format!("style.timbre.conv{i}.bias"), vec![cout]);
    }
    put("style.timbre.proj.weight".into(), vec![s.d_timbre, cc]);
    put("style.timbre.proj.bias".into(), vec![s.d_timbre]);
    for (i, (cin, cout)) in [(n_mels, cc), (cc, cc)].into_iter().enumerate() {
        put(format!("style.tokens.conv{i}.weight"), vec![cout, cin, 3]);
        put(format!("style.tokens.conv{i}.bias"), vec![cout]);
    }
    put("style.tokens.proj.weight".into(), vec![s.d_code, cc]);
    put("style.tokens.proj.bias".into(), vec![s.d_code]);
    put(
        "style.codebook.entries".into(),
        vec![s.codebook_size, s.d_code],
    );
    put(
        "style.align.query.weight".into(),
        vec![s.d_code, e.d_model + s.d_timbre],
    );
    put("style.align.query.bias".into(), vec![s.d_code]);
    put("style.align.key.weight".into(), vec![s.d_code, s.d_code]);
    put("style.align.key.bias".into(), vec![s.d_code]);
    put("style.align.value.weight".into(), vec![s.d_code, s.d_code]);
    put("style.align.value.bias".into(), vec![s.d_code]);

    let d = &cfg.decoder;
    put("decoder.embed.table".into(), vec![e.classes, e.d_model]);
    let mut pin = pitch_input_dim(cfg);
    for i in 0..d.pitch_dilations.len() {
        put(
            format!("decoder.pitch.conv{i}.weight"),
            vec![d.pitch_hidden, pin, d.kernel],
        );
        put(format!("decoder.pitch.conv{i}.bias"), vec![d.pitch_hidden]);
        pin = d.pitch_hidden;
    }
    put("decoder.pitch.out.weight".into(), vec![1, d.pitch_hidden]);
    put("decoder.pitch.out.bias".into(), vec![1]);
    put("decoder.pitch_emb.weight".into(), vec![d.pitch_emb_dim, 1]);
    put("decoder.pitch_emb.bias".into(), vec![d.pitch_emb_dim]);
    let mut min = fused_input_dim(cfg);
    for i in 0..d.mel_dilations.len() {
        put(
            format!("decoder.mel.conv{i}.weight"),
            vec![2 * d.mel_hidden, min, d.kernel],
        );
        put(format!("decoder.mel.conv{i}.bias"), vec![2 * d.mel_hidden]);
        min = d.mel_hidden;
    }
    put("decoder.mel.out.weight".into(), vec![n_mels, d.mel_hidden]);
    put("decoder.mel.out.bias".into(), vec![n_mels]);

    let vo = &cfg.vocoder;
    let c = vo.base_channels;
    put("vocoder.pre.weight".into(), vec![c, n_mels, vo.pre_kernel]);
    put("vocoder.pre.bias".into(), vec![c]);
    for (n, &r) in vo.factors.iter().enumerate() {
        put(format!("vocoder.stage{n}.up.weight"), vec![r * c, c, 7]);
        put(format!("vocoder.stage{n}.up.bias"), vec![r * c]);
        for (b, &k) in vo.branch_kernels.iter().enumerate() {
            for (j, _) in vo.branch_dilations.iter().enumerate() {
                let base = format!("vocoder.stage{n}.res{b}_{j}");
                put(format!("{base}.conv1.weight"), vec![c, c, k]);
                put(format!("{base}.conv1.bias"), vec![c]);
                put(format!("{base}.conv2.weight"), vec![c, c, k]);
                put(format!("{base}.conv2.bias"), vec![c]);
            }
        }
    }
    put("vocoder.post.weight".into(), vec![1, c, vo.post_kernel]);
    put("vocoder.post.bias".into(), vec![1]);

    m
}

// ---------------------------------------------------------------------------
// Weights

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered name → tensor map. Order is preserved so a loaded container saves
/// back byte-identically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelWeights {
    map: IndexMap<String, WeightTensor>,
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: WeightTensor) -> Result<(), ModelIoError> {
        let expected: usize = tensor.dims.iter().product();
        if expected != tensor.data.len() {
            return Err(ModelIoError::PayloadMismatch {
                name: name.to_string(),
                expected,
                got: tensor.data.len(),
            });
        }
        if tensor.data.iter().any(|v| !v.is_finite()) {
            return Err(ModelIoError::NonFinite(name.to_string()));
        }
        if self.map.contains_key(name) {
            return Err(ModelIoError::DuplicateTensor(name.to_string()));
        }
        self.map.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WeightTensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Checked accessor over [`ModelWeights`] that remembers which tensors were
/// read, so construction can prove it consumed the whole container.
pub struct WeightReader<'a> {
    weights: &'a ModelWeights,
    consumed: BTreeSet<String>,
}

impl<'a> WeightReader<'a> {
    pub fn new(weights: &'a ModelWeights) -> Self {
        WeightReader {
            weights,
            consumed: BTreeSet::new(),
        }
    }

    /// Fetches a tensor, enforcing its shape.
    pub fn take(&mut self, name: &str, dims: &[usize]) -> Result<&'a [f32], ModelIoError> {
        let tensor = self
            .weights
            .get(name)
            .ok_or_else(|| ModelIoError::MissingTensor(name.to_string()))?;
        if tensor.dims != dims {
            return Err(ModelIoError::ShapeMismatch {
                name: name.to_string(),
                expected: dims.to_vec(),
                got: tensor.dims.clone(),
            });
        }
        self.consumed.insert(name.to_string());
        Ok(&tensor.data)
    }

    pub fn take_vec(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f32>, ModelIoError> {
        self.take(name, dims).map(<[f32]>::to_vec)
    }

    /// Passes iff every tensor in the container was consumed.
    pub fn finish(self) -> Result<(), ModelIoError> {
        let unused: Vec<String> = self
            .weights
            .names()
            .filter(|n| !self.consumed.contains(*n))
            .map(str::to_string)
            .collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(ModelIoError::UnusedTensors(unused))
        }
    }
}

// ---------------------------------------------------------------------------
// Initialization

fn stream_rng(name: &str, seed: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(name.as_bytes());
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn xavier_bound(dims: &[usize]) -> f64 {
    let (fan_in, fan_out) = match dims {
        [out, inp] => (*inp, *out),
        [out, inp, k] => (inp * k, out * k),
        _ => (1, 1),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fills every manifest tensor from a PRNG stream keyed by (tensor name,
/// seed): weights Xavier-uniform, biases zero, codebook entries uniform in
/// ±0.1. Same (cfg, seed) always produces bit-identical weights.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights, ModelIoError> {
    let violations = validate_config(cfg);
    if !violations.is_empty() {
        return Err(ModelIoError::Config(format!(
            "invalid config: {}",
            violations
                .iter()
                .map(Violation::to_string)
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    let mut weights = ModelWeights::new();
    for (name, dims) in weight_manifest(cfg) {
        let count: usize = dims.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0; count]
        } else {
            let bound = if name.contains("codebook") {
                0.1
            } else {
                xavier_bound(&dims)
            };
            let mut rng = stream_rng(&name, seed);
            (0..count)
                .map(|_| rng.gen_range(-bound..=bound) as f32)
                .collect()
        };
        weights.insert(&name, WeightTensor { dims, data })?;
    }
    Ok(weights)
}

// ---------------------------------------------------------------------------
// Container I/O

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn chunk(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        let out = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or(ModelIoError::Truncated)?;
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, ModelIoError> {
        Ok(self.chunk(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelIoError> {
        let b = self.chunk(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        let b = self.chunk(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn container_bytes(cfg: &ModelConfig, weights: &ModelWeights) -> Vec<u8> {
    let config_text = config_to_text(cfg);
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for (name, tensor) in weights.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.dims.len() as u8);
        for &d in &tensor.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_model(cfg: &ModelConfig, weights: &ModelWeights, path: &Path) -> Result<(), ModelIoError> {
    let bytes = container_bytes(cfg, weights);
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn parse_container(bytes: &[u8]) -> Result<(ModelConfig, ModelWeights), ModelIoError> {
    let mut r = ByteReader { bytes, at: 0 };
    if r.chunk(4)? != CONTAINER_MAGIC {
        return Err(ModelIoError::BadMagic);
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(ModelIoError::BadVersion(version));
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.chunk(config_len)?)
        .map_err(|_| ModelIoError::Config("config text is not UTF-8".into()))?;
    let cfg = config_from_text(config_text)?;
    let count = r.u32()? as usize;
    let mut weights = ModelWeights::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.chunk(name_len)?)
            .map_err(|_| ModelIoError::Config("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let count: usize = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(ModelIoError::Truncated)?;
        let payload = r.chunk(count * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        weights.insert(&name, WeightTensor { dims, data })?;
    }
    if r.at != bytes.len() {
        return Err(ModelIoError::TrailingBytes);
    }
    Ok((cfg, weights))
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelWeights), ModelIoError> {
    let bytes = fs::read(path)?;
    parse_container(&bytes)
}

/// Small dims so cross-module tests stay fast. Not a real operating point:
/// the mel geometry is shrunk along with everything else.
#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::fast();
    cfg.extractor.layers = 2;
    cfg.extractor.d_model = 8;
    cfg.extractor.heads = 2;
    cfg.extractor.ffn_dim = 16;
    cfg.extractor.left_context_frames = 3;
    cfg.extractor.memory_slots = 2;
    cfg.extractor.classes = 5;
    cfg.mel.n_mels = 6;
    cfg.mel.win = 64;
    cfg.mel.hop = 24;
    cfg.style.codebook_size = 4;
    cfg.style.d_code = 4;
    cfg.style.d_timbre = 6;
    cfg.style.conv_channels = 5;
    cfg.decoder.pitch_hidden = 7;
    cfg.decoder.pitch_emb_dim = 3;
    cfg.decoder.mel_hidden = 7;
    cfg.vocoder.base_channels = 4;
    cfg.vocoder.factors = vec![4, 3, 2];
    cfg.vocoder.branch_kernels = vec![3];
    cfg.vocoder.branch_dilations = vec![1, 2];
    cfg
}
