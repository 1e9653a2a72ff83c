//! Chunk scheduler: reference pre-pass, gated chunkwise streaming, stream-end
//! drain, and latency accounting.
//!
//! A [`StreamSession`] buffers raw samples until one chunk plus its
//! right-context audio is available, then runs the three stages — content
//! (mel + label extraction), main (style alignment + pitch + mel decoding),
//! vocoder — and emits exactly one chunk of waveform. State-carrying
//! incremental execution is the primary path; [`convert_sliding`] recomputes
//! every chunk from a bounded context window as an independent reference, and
//! [`convert_pipelined`] runs the three stages on separate threads over
//! bounded channels. All three produce the same samples.

use std::collections::VecDeque;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::decoder::{Decoder, DecoderError, DecoderState};
use crate::dsp::{MelStream, PcmAudio, SAMPLE_RATE};
use crate::extractor::{ContentLabels, Extractor, ExtractorError, ExtractorState};
use crate::model::{validate_config, ModelConfig, ModelIoError, ModelWeights, WeightReader};
use crate::style::{Codebook, StyleEncoder, StyleError, StyleTokens, TimbreEmbedding};
use crate::tensor::{ConvSpec, Tensor2D, TensorError};
use crate::vocoder::{Vocoder, VocoderError, VocoderState};

/// Shortest usable reference: two style-token windows.
pub const MIN_REFERENCE_MS: usize = 160;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("reference must be at least {MIN_REFERENCE_MS} ms, got {got_ms} ms")]
    ReferenceTooShort { got_ms: usize },
    #[error("push_chunk called before prepare_reference")]
    NoReference,
    #[error("input sample rate {got} Hz, expected {SAMPLE_RATE} Hz")]
    BadSampleRate { got: u32 },
    #[error("latency report requested before any chunk was processed")]
    NoChunksProcessed,
    #[error("latency terms must be non-negative")]
    NegativeLatency,
    #[error("receptive field of an empty conv stack is undefined")]
    EmptyStack,
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
    #[error(transparent)]
    Style(#[from] StyleError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Vocoder(#[from] VocoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// All submodules assembled from one weight set, with a completeness audit:
/// construction fails if any manifest tensor is missing, mis-shaped, or if
/// the weight map carries tensors no module consumes.
pub struct Model {
    cfg: ModelConfig,
    extractor: Extractor,
    style: StyleEncoder,
    codebook: Codebook,
    decoder: Decoder,
    vocoder: Vocoder,
}

impl Model {
    pub fn new(cfg: ModelConfig, weights: &ModelWeights) -> Result<Self, ModelIoError> {
        let violations = validate_config(&cfg);
        if !violations.is_empty() {
            let lines: Vec<String> = violations
                .iter()
                .map(|v| format!("{}: {}", v.field, v.rule))
                .collect();
            return Err(ModelIoError::Config(lines.join("; ")));
        }
        let mut r = WeightReader::new(weights);
        let extractor = Extractor::from_reader(&cfg.extractor, cfg.mel.n_mels, &mut r)?;
        let style = StyleEncoder::from_reader(
            &cfg.style,
            cfg.mel.n_mels,
            cfg.extractor.d_model,
            &mut r,
        )?;
        let codebook = Codebook::from_reader(&cfg.style, &mut r)?;
        let decoder = Decoder::from_reader(
            &cfg.decoder,
            cfg.extractor.d_model,
            cfg.style.d_timbre,
            cfg.style.d_code,
            cfg.mel.n_mels,
            cfg.extractor.classes,
            &mut r,
        )?;
        let vocoder = Vocoder::from_reader(&cfg.vocoder, cfg.mel.n_mels, &mut r)?;
        r.finish()?;
        Ok(Model {
            cfg,
            extractor,
            style,
            codebook,
            decoder,
            vocoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn style(&self) -> &StyleEncoder {
        &self.style
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn vocoder(&self) -> &Vocoder {
        &self.vocoder
    }

    /// Offline pre-pass over the whole reference: timbre vector plus the
    /// quantized style-token sequence.
    pub fn reference_context(&self, reference: &PcmAudio) -> Result<ReferenceContext, PipelineError> {
        if reference.sample_rate != SAMPLE_RATE {
            return Err(PipelineError::BadSampleRate {
                got: reference.sample_rate,
            });
        }
        let got_ms = reference.samples.len() * 1000 / SAMPLE_RATE as usize;
        if got_ms < MIN_REFERENCE_MS {
            return Err(PipelineError::ReferenceTooShort { got_ms });
        }
        let mel = crate::dsp::mel_spectrogram(reference, &self.cfg.mel);
        let timbre = self.style.encode_timbre(&mel)?;
        // usage counters are a training-side diagnostic; quantize against a
        // scratch copy so a shared model stays immutable during inference
        let mut codebook = self.codebook.clone();
        let tokens = self.style.encode_style_tokens(&mel, &mut codebook)?;
        Ok(ReferenceContext { timbre, tokens })
    }

    /// Decoder + vocoder lookback, in mel frames: past this many frames of
    /// context, a recomputed chunk is sample-exact. The mel decoder reads the
    /// pitch embedding, so the pitch stack's field composes with the mel
    /// stack's before the vocoder's.
    pub fn sliding_context_frames(&self) -> usize {
        (self.decoder.mel_receptive_field() + self.decoder.pitch_receptive_field() - 1)
            + self.vocoder.receptive_field_frames()
            - 1
    }
}

/// Timbre embedding and style tokens extracted from the reference utterance,
/// fixed for the life of a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceContext {
    pub timbre: TimbreEmbedding,
    pub tokens: StyleTokens,
}

#[derive(Debug, Clone, Copy, Default)]
struct StageClock {
    wall: Duration,
    audio_s: f64,
}

impl StageClock {
    fn rtf(&self) -> f64 {
        if self.audio_s == 0.0 {
            0.0
        } else {
            self.wall.as_secs_f64() / self.audio_s
        }
    }
}

/// Per-stream causal state: conv caches, extractor memories, sample and mel
/// buffers, and cumulative per-stage timers.
pub struct StreamSession<'m> {
    model: &'m Model,
    reference: Option<ReferenceContext>,
    mel_stream: MelStream,
    sample_buffer: Vec<f32>,
    mel_queue: VecDeque<Vec<f32>>,
    ex_state: ExtractorState,
    dec_state: DecoderState,
    voc_state: VocoderState,
    consumed_samples: usize,
    emitted_samples: usize,
    chunks_done: usize,
    content: StageClock,
    main: StageClock,
    vocoder: StageClock,
}

impl<'m> StreamSession<'m> {
    pub fn new(model: &'m Model) -> Self {
        StreamSession {
            model,
            reference: None,
            mel_stream: MelStream::new(model.cfg.mel.clone()),
            sample_buffer: Vec::new(),
            mel_queue: VecDeque::new(),
            ex_state: model.extractor.new_state(),
            dec_state: model.decoder.new_state(),
            voc_state: model.vocoder.new_state(),
            consumed_samples: 0,
            emitted_samples: 0,
            chunks_done: 0,
            content: StageClock::default(),
            main: StageClock::default(),
            vocoder: StageClock::default(),
        }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn chunks_done(&self) -> usize {
        self.chunks_done
    }

    /// Builds and stores the stream's reference context; calling again
    /// replaces it.
    pub fn prepare_reference(
        &mut self,
        reference: &PcmAudio,
    ) -> Result<ReferenceContext, PipelineError> {
        let ctx = self.model.reference_context(reference)?;
        self.reference = Some(ctx.clone());
        Ok(ctx)
    }

    /// Installs a prebuilt context (same effect as [`Self::prepare_reference`]).
    pub fn set_reference(&mut self, ctx: ReferenceContext) {
        self.reference = Some(ctx);
    }

    /// Buffers input and emits one chunk of converted audio for every chunk
    /// whose right-context audio has fully arrived. Output is empty until
    /// the gate opens; any partition of the input gives identical samples.
    pub fn push_chunk(&mut self, samples: &PcmAudio) -> Result<PcmAudio, PipelineError> {
        if self.reference.is_none() {
            return Err(PipelineError::NoReference);
        }
        if samples.sample_rate != SAMPLE_RATE {
            return Err(PipelineError::BadSampleRate {
                got: samples.sample_rate,
            });
        }
        self.consumed_samples += samples.samples.len();
        self.sample_buffer.extend_from_slice(&samples.samples);
        self.drain_samples_to_mel();

        let cf = self.model.cfg.extractor.chunk_frames;
        let rcf = self.model.cfg.extractor.right_context_chunks * cf;
        let mut out = Vec::new();
        while self.mel_queue.len() >= cf + rcf {
            let chunk = self.take_mel_frames(cf);
            let rc = self.peek_mel_frames(rcf);
            out.extend(self.process_one_chunk(&chunk, &rc)?);
        }
        self.emitted_samples += out.len();
        Ok(PcmAudio::new(out))
    }

    /// Drains everything still buffered: the sub-frame sample tail is padded
    /// with zero samples, remaining frames run as final (partial) chunks with
    /// zero-padded right context, and the output is cut so that total output
    /// length equals total input length exactly. Safe to call repeatedly.
    pub fn flush(&mut self) -> Result<PcmAudio, PipelineError> {
        let hop = self.model.cfg.mel.hop;
        if !self.sample_buffer.is_empty() {
            let t0 = Instant::now();
            self.sample_buffer.resize(self.sample_buffer.len().div_ceil(hop) * hop, 0.0);
            let frames = self.mel_stream.feed(&self.sample_buffer);
            self.sample_buffer.clear();
            for t in 0..frames.frames() {
                self.mel_queue.push_back(frames.frame(t));
            }
            self.content.wall += t0.elapsed();
        }

        let cf = self.model.cfg.extractor.chunk_frames;
        let rcf = self.model.cfg.extractor.right_context_chunks * cf;
        let mut produced = Vec::new();
        while !self.mel_queue.is_empty() {
            let take = cf.min(self.mel_queue.len());
            let chunk = self.take_mel_frames(take);
            let real = rcf.min(self.mel_queue.len());
            let rc = Tensor2D::concat_frames(&[
                &self.peek_mel_frames(real),
                &Tensor2D::zeros(self.model.cfg.mel.n_mels, rcf - real),
            ])?;
            produced.extend(self.process_one_chunk(&chunk, &rc)?);
        }

        let owed = self.consumed_samples - self.emitted_samples;
        produced.truncate(owed);
        self.emitted_samples += produced.len();
        Ok(PcmAudio::new(produced))
    }

    /// Cumulative per-stage RTFs and the latency identity.
    pub fn latency_report(&self) -> Result<LatencyReport, PipelineError> {
        if self.chunks_done == 0 {
            return Err(PipelineError::NoChunksProcessed);
        }
        let cfg = &self.model.cfg.session;
        let chunk_ms = cfg.chunk_ms as f64;
        let right_context_ms = cfg.right_context_ms as f64;
        let content_rtf = self.content.rtf();
        let main_rtf = self.main.rtf();
        let vocoder_rtf = self.vocoder.rtf();
        let content_ms = content_rtf * chunk_ms;
        let main_ms = main_rtf * chunk_ms;
        let vocoder_ms = vocoder_rtf * chunk_ms;
        let overall_ms = overall_latency(
            [content_ms, main_ms, vocoder_ms],
            chunk_ms,
            right_context_ms,
        )?;
        Ok(LatencyReport {
            content_rtf,
            main_rtf,
            vocoder_rtf,
            content_ms,
            main_ms,
            vocoder_ms,
            chunk_ms,
            right_context_ms,
            overall_ms,
            overall_rtf: content_rtf + main_rtf + vocoder_rtf,
        })
    }

    /// Feed every whole hop of buffered samples to the mel front-end.
    fn drain_samples_to_mel(&mut self) {
        let hop = self.model.cfg.mel.hop;
        let usable = self.sample_buffer.len() / hop * hop;
        if usable == 0 {
            return;
        }
        let t0 = Instant::now();
        let frames = self.mel_stream.feed(&self.sample_buffer[..usable]);
        self.sample_buffer.drain(..usable);
        for t in 0..frames.frames() {
            self.mel_queue.push_back(frames.frame(t));
        }
        self.content.wall += t0.elapsed();
    }

    fn take_mel_frames(&mut self, n: usize) -> Tensor2D {
        let n_mels = self.model.cfg.mel.n_mels;
        let mut out = Tensor2D::zeros(n_mels, n);
        for t in 0..n {
            let frame = self.mel_queue.pop_front().expect("frame count checked");
            for (c, &v) in frame.iter().enumerate() {
                out.set(c, t, v);
            }
        }
        out
    }

    fn peek_mel_frames(&self, n: usize) -> Tensor2D {
        let n_mels = self.model.cfg.mel.n_mels;
        let mut out = Tensor2D::zeros(n_mels, n);
        for t in 0..n {
            for (c, &v) in self.mel_queue[t].iter().enumerate() {
                out.set(c, t, v);
            }
        }
        out
    }

    fn process_one_chunk(
        &mut self,
        chunk: &Tensor2D,
        right_ctx: &Tensor2D,
    ) -> Result<Vec<f32>, PipelineError> {
        let reference = self.reference.as_ref().expect("checked by caller").clone();
        let hop = self.model.cfg.mel.hop;
        let audio_s = chunk.frames() as f64 * hop as f64 / SAMPLE_RATE as f64;

        let t0 = Instant::now();
        let labels = self
            .model
            .extractor
            .process_chunk(&mut self.ex_state, chunk, right_ctx)?;
        self.content.wall += t0.elapsed();
        self.content.audio_s += audio_s;

        let t1 = Instant::now();
        let mel_out = run_main_stage(
            self.model,
            &reference,
            &labels,
            &mut self.dec_state,
        )?;
        self.main.wall += t1.elapsed();
        self.main.audio_s += audio_s;

        let t2 = Instant::now();
        let samples = self.model.vocoder.vocode_chunk(&mel_out, &mut self.voc_state)?;
        self.vocoder.wall += t2.elapsed();
        self.vocoder.audio_s += audio_s;

        self.chunks_done += 1;
        Ok(samples)
    }
}

/// Content labels → embedded features → aligned style → pitch → mel frames.
fn run_main_stage(
    model: &Model,
    reference: &ReferenceContext,
    labels: &ContentLabels,
    state: &mut DecoderState,
) -> Result<Tensor2D, PipelineError> {
    let embedded = model.decoder.embed_labels(labels)?;
    let aligned = model
        .style
        .align_style(&embedded, &reference.timbre, &reference.tokens)?;
    let timbre = broadcast(&reference.timbre, embedded.frames());
    let features = Tensor2D::concat_channels(&[&embedded, &timbre, &aligned])?;
    let pitch = model.decoder.predict_pitch(&features, state)?;
    let pitch_emb = model.decoder.pitch_embedding(&pitch)?;
    let fused = Tensor2D::concat_channels(&[&features, &pitch_emb])?;
    Ok(model.decoder.decode_mel(&fused, state)?)
}

fn broadcast(values: &[f32], frames: usize) -> Tensor2D {
    let mut out = Tensor2D::zeros(values.len(), frames);
    for (c, &v) in values.iter().enumerate() {
        out.row_mut(c).fill(v);
    }
    out
}

/// Table-style latency identity: the three stage delays plus the chunk size
/// plus the right context. Compensated summation so the result is the
/// correctly rounded sum of the five terms.
pub fn overall_latency(
    stage_delays_ms: [f64; 3],
    chunk_ms: f64,
    right_context_ms: f64,
) -> Result<f64, PipelineError> {
    let terms = [
        stage_delays_ms[0],
        stage_delays_ms[1],
        stage_delays_ms[2],
        chunk_ms,
        right_context_ms,
    ];
    if terms.iter().any(|&t| !(t >= 0.0)) {
        return Err(PipelineError::NegativeLatency);
    }
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &x in &terms {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    Ok(sum + comp)
}

/// Frames of input influencing one output frame of a causal conv stack:
/// `1 + Σ (kernel − 1) × dilation`.
pub fn receptive_field(stack: &[ConvSpec]) -> Result<usize, PipelineError> {
    if stack.is_empty() {
        return Err(PipelineError::EmptyStack);
    }
    Ok(1 + stack.iter().map(|s| s.tail_len()).sum::<usize>())
}

/// Per-stage wall-clock accounting in the shape of the published table:
/// RTF = processing time / audio duration, delay = RTF × chunk size, and
/// overall latency = Σ delays + chunk + right context.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub content_rtf: f64,
    pub main_rtf: f64,
    pub vocoder_rtf: f64,
    pub content_ms: f64,
    pub main_ms: f64,
    pub vocoder_ms: f64,
    pub chunk_ms: f64,
    pub right_context_ms: f64,
    pub overall_ms: f64,
    pub overall_rtf: f64,
}

impl LatencyReport {
    /// Flat `key = value` document, keys in a fixed order.
    pub fn to_text(&self) -> String {
        format!(
            "content_rtf = {}\nmain_rtf = {}\nvocoder_rtf = {}\ncontent_ms = {}\nmain_ms = {}\nvocoder_ms = {}\nchunk_ms = {}\nright_context_ms = {}\noverall_ms = {}\noverall_rtf = {}\n",
            self.content_rtf,
            self.main_rtf,
            self.vocoder_rtf,
            self.content_ms,
            self.main_ms,
            self.vocoder_ms,
            self.chunk_ms,
            self.right_context_ms,
            self.overall_ms,
            self.overall_rtf,
        )
    }
}

/// The canonical offline schedule shared by the reference and pipelined
/// paths: mel over the whole input (tail hop zero-padded), split into
/// chunk/right-context pairs exactly as a streamed session would see them.
fn offline_schedule(
    model: &Model,
    input: &PcmAudio,
) -> Result<(Tensor2D, Vec<(Tensor2D, Tensor2D)>), PipelineError> {
    if input.sample_rate != SAMPLE_RATE {
        return Err(PipelineError::BadSampleRate {
            got: input.sample_rate,
        });
    }
    let melcfg = &model.cfg.mel;
    let mut padded = input.samples.clone();
    padded.resize(padded.len().div_ceil(melcfg.hop) * melcfg.hop, 0.0);
    let mel = MelStream::new(melcfg.clone()).feed(&padded);

    let cf = model.cfg.extractor.chunk_frames;
    let rcf = model.cfg.extractor.right_context_chunks * cf;
    let total = mel.frames();
    let mut pairs = Vec::new();
    let mut s = 0;
    while s < total {
        let e = (s + cf).min(total);
        let real = rcf.min(total - e);
        let rc = Tensor2D::concat_frames(&[
            &mel.slice_frames(e, real),
            &Tensor2D::zeros(melcfg.n_mels, rcf - real),
        ])?;
        pairs.push((mel.slice_frames(s, e - s), rc));
        s = e;
    }
    Ok((mel, pairs))
}

/// Reference path: recomputes every chunk from scratch using only the
/// preceding `sliding_context_frames` of features instead of carried conv
/// state. Because the context covers the combined receptive field, the
/// overlapping segments agree with the incremental path.
pub fn convert_sliding(
    model: &Model,
    reference: &ReferenceContext,
    input: &PcmAudio,
) -> Result<Vec<f32>, PipelineError> {
    let (_, pairs) = offline_schedule(model, input)?;
    let mut labels: ContentLabels = Vec::new();
    let mut ex_state = model.extractor.new_state();
    let mut chunk_bounds = Vec::new();
    for (chunk, rc) in &pairs {
        let start = labels.len();
        labels.extend(model.extractor.process_chunk(&mut ex_state, chunk, rc)?);
        chunk_bounds.push((start, labels.len()));
    }

    let hop = model.cfg.mel.hop;
    let context = model.sliding_context_frames();
    let mut out = Vec::new();
    for &(s, e) in &chunk_bounds {
        let w0 = s.saturating_sub(context);
        let window = labels[w0..e].to_vec();
        let mut dec_state = model.decoder.new_state();
        let mel_out = run_main_stage(model, reference, &window, &mut dec_state)?;
        let mut voc_state = model.vocoder.new_state();
        let samples = model.vocoder.vocode_chunk(&mel_out, &mut voc_state)?;
        out.extend_from_slice(&samples[(s - w0) * hop..]);
    }
    out.truncate(input.samples.len());
    Ok(out)
}

/// Runs the three stages on separate threads over bounded single-producer
/// single-consumer channels; output is bit-identical to the sequential path.
pub fn convert_pipelined(
    model: &Model,
    reference: &ReferenceContext,
    input: &PcmAudio,
) -> Result<Vec<f32>, PipelineError> {
    let (_, pairs) = offline_schedule(model, input)?;
    let mut out = Vec::new();
    std::thread::scope(|scope| -> Result<(), PipelineError> {
        let (label_tx, label_rx) = mpsc::sync_channel::<ContentLabels>(2);
        let (mel_tx, mel_rx) = mpsc::sync_channel::<Tensor2D>(2);

        let content = scope.spawn(move || -> Result<(), PipelineError> {
            let mut state = model.extractor.new_state();
            for (chunk, rc) in &pairs {
                let labels = model.extractor.process_chunk(&mut state, chunk, rc)?;
                if label_tx.send(labels).is_err() {
                    break; // downstream failed; its error wins
                }
            }
            Ok(())
        });
        let main = scope.spawn(move || -> Result<(), PipelineError> {
            let mut state = model.decoder.new_state();
            for labels in label_rx {
                let mel_out = run_main_stage(model, reference, &labels, &mut state)?;
                if mel_tx.send(mel_out).is_err() {
                    break;
                }
            }
            Ok(())
        });

        let mut voc_state = model.vocoder.new_state();
        let mut voc_result: Result<(), PipelineError> = Ok(());
        for mel_out in mel_rx {
            match model.vocoder.vocode_chunk(&mel_out, &mut voc_state) {
                Ok(samples) => out.extend(samples),
                Err(e) => {
                    voc_result = Err(e.into());
                    break; // dropping mel_rx unblocks upstream
                }
            }
        }
        content.join().expect("content stage panicked")?;
        main.join().expect("main stage panicked")?;
        voc_result
    })?;
    out.truncate(input.samples.len());
    Ok(out)
}
