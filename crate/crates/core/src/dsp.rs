//! PCM audio I/O and streaming-friendly mel-spectrogram extraction.
//!
//! Framing is causal: mel frame `t` covers the `win` samples ending at
//! `(t + 1) * hop`, with zero history before the stream start. Appending
//! samples never changes frames already emitted, which is what lets the
//! pipeline extract features chunk by chunk.

use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::tensor::Tensor2D;

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("not a RIFF file")]
    NotRiff,
    #[error("not a WAVE file")]
    NotWave,
    #[error("missing {0} chunk")]
    MissingChunk(&'static str),
    #[error("unsupported codec tag {0} (want PCM = 1)")]
    UnsupportedCodec(u16),
    #[error("unsupported sample rate {0} Hz (want 16000)")]
    UnsupportedRate(u32),
    #[error("unsupported channel count {0} (want mono)")]
    UnsupportedChannels(u16),
    #[error("unsupported bit depth {0} (want 16)")]
    UnsupportedBits(u16),
    #[error("file truncated")]
    Truncated,
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Mono 16 kHz audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcmAudio {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl PcmAudio {
    pub fn new(samples: Vec<f32>) -> Self {
        PcmAudio {
            sample_rate: SAMPLE_RATE,
            samples,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Mel analysis constants: 1024-sample window, 320-sample hop (20 ms), 80 bins.
#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f32,
    pub f_max: f32,
    pub log_floor: f32,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: SAMPLE_RATE,
            win: 1024,
            hop: 320,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-5,
        }
    }
}

fn read_u32(b: &[u8], at: usize) -> Result<u32, WavError> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or(WavError::Truncated)
}

fn read_u16(b: &[u8], at: usize) -> Result<u16, WavError> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or(WavError::Truncated)
}

/// Loads a RIFF/WAVE file. Only PCM 16-bit mono 16 kHz is accepted; samples
/// are scaled by 1/32768.
pub fn load_wav(path: &Path) -> Result<PcmAudio, WavError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(WavError::Truncated);
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(WavError::NotRiff);
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(WavError::NotWave);
    }
    let mut at = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = read_u32(&bytes, at + 4)? as usize;
        let body_start = at + 8;
        if body_start + size > bytes.len() {
            return Err(WavError::Truncated);
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(WavError::Truncated);
                }
                fmt = Some((
                    read_u16(body, 0)?,
                    read_u16(body, 2)?,
                    read_u32(body, 4)?,
                    read_u16(body, 14)?,
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        at = body_start + size + (size & 1);
    }
    let (codec, channels, rate, bits) = fmt.ok_or(WavError::MissingChunk("fmt "))?;
    if codec != 1 {
        return Err(WavError::UnsupportedCodec(codec));
    }
    if channels != 1 {
        return Err(WavError::UnsupportedChannels(channels));
    }
    if rate != SAMPLE_RATE {
        return Err(WavError::UnsupportedRate(rate));
    }
    if bits != 16 {
        return Err(WavError::UnsupportedBits(bits));
    }
    let data = data.ok_or(WavError::MissingChunk("data"))?;
    let samples = data
        .chunks_exact(2)
        .map(|s| f32::from(i16::from_le_bytes([s[0], s[1]])) / 32768.0)
        .collect();
    Ok(PcmAudio::new(samples))
}

/// Writes 16-bit PCM mono 16 kHz. Values are clamped to `[-1, 1]` before
/// quantization; +1.0 maps to 32767.
pub fn write_wav(pcm: &PcmAudio, path: &Path) -> Result<(), WavError> {
    let n = pcm.samples.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &pcm.samples {
        let clamped = s.clamp(-1.0, 1.0);
        let q = (f64::from(clamped) * 32768.0).round() as i32;
        let q = q.clamp(i32::from(i16::MIN), i32::from(i16::MAX)) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Triangular mel filterbank on the linear-below-1kHz, log-above mel scale,
/// each filter normalized to unit peak.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f32>> {
    let n_bins = cfg.win / 2 + 1;
    let points = mel_band_points(cfg);
    let mut filters = vec![vec![0.0f32; n_bins]; cfg.n_mels];
    let bin_hz = f64::from(cfg.sample_rate) / cfg.win as f64;
    for (m, filter) in filters.iter_mut().enumerate() {
        let lo = points[m];
        let center = points[m + 1];
        let hi = points[m + 2];
        for (bin, w) in filter.iter_mut().enumerate() {
            let f = bin as f64 * bin_hz;
            let rising = if center > lo { (f - lo) / (center - lo) } else { 0.0 };
            let falling = if hi > center { (hi - f) / (hi - center) } else { 0.0 };
            let v = rising.min(falling).max(0.0);
            *w = v as f32;
        }
    }
    filters
}

/// Band edge frequencies in Hz: `n_mels + 2` points evenly spaced on the mel
/// scale between `f_min` and `f_max`.
pub fn mel_band_points(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(f64::from(cfg.f_min));
    let hi = hz_to_mel(f64::from(cfg.f_max));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

fn hz_to_mel(hz: f64) -> f64 {
    // linear below 1 kHz, logarithmic above
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * ((mel - min_log_mel) * logstep).exp()
    } else {
        mel * f_sp
    }
}

/// Incremental mel extractor. Feeding the same samples in any hop-aligned
/// split yields bit-identical frames.
pub struct MelStream {
    cfg: MelConfig,
    window: Vec<f64>,
    filters: Vec<Vec<f32>>,
    fft: Arc<dyn Fft<f64>>,
    /// Last `win - hop` samples seen, zeros before stream start.
    history: Vec<f32>,
}

impl Clone for MelStream {
    fn clone(&self) -> Self {
        MelStream {
            cfg: self.cfg.clone(),
            window: self.window.clone(),
            filters: self.filters.clone(),
            fft: Arc::clone(&self.fft),
            history: self.history.clone(),
        }
    }
}

impl MelStream {
    pub fn new(cfg: MelConfig) -> Self {
        // periodic Hann
        let window: Vec<f64> = (0..cfg.win)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / cfg.win as f64).cos())
            .collect();
        let filters = mel_filterbank(&cfg);
        let fft = FftPlanner::new().plan_fft_forward(cfg.win);
        let history = vec![0.0; cfg.win - cfg.hop];
        MelStream {
            cfg,
            window,
            filters,
            fft,
            history,
        }
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Consumes `samples` (length must be a hop multiple) and emits one mel
    /// frame per hop.
    pub fn feed(&mut self, samples: &[f32]) -> Tensor2D {
        assert!(
            samples.len() % self.cfg.hop == 0,
            "feed length must be a multiple of hop"
        );
        let frames = samples.len() / self.cfg.hop;
        let mut out = Tensor2D::zeros(self.cfg.n_mels, frames);
        let mut buf = vec![Complex::new(0.0f64, 0.0f64); self.cfg.win];
        let tail = self.cfg.win - self.cfg.hop;
        for f in 0..frames {
            let block = &samples[f * self.cfg.hop..(f + 1) * self.cfg.hop];
            // window = history ++ block, then windowed FFT
            for (i, c) in buf.iter_mut().enumerate() {
                let s = if i < tail {
                    f64::from(self.history[i])
                } else {
                    f64::from(block[i - tail])
                };
                *c = Complex::new(s * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            let n_bins = self.cfg.win / 2 + 1;
            for m in 0..self.cfg.n_mels {
                let filter = &self.filters[m];
                let mut acc = 0.0f64;
                for (bin, &w) in filter.iter().enumerate().take(n_bins) {
                    if w != 0.0 {
                        acc += f64::from(w) * buf[bin].norm_sqr();
                    }
                }
                let floored = acc.max(f64::from(self.cfg.log_floor));
                out.set(m, f, floored.ln() as f32);
            }
            // advance history
            self.history.copy_within(self.cfg.hop.., 0);
            self.history[tail - self.cfg.hop..].copy_from_slice(block);
        }
        out
    }
}

/// One-shot mel extraction: `floor(len / hop)` frames, causal left-history
/// framing, Hann window, power spectrum, triangular filterbank, natural log
/// with floor.
pub fn mel_spectrogram(pcm: &PcmAudio, cfg: &MelConfig) -> Tensor2D {
    let mut stream = MelStream::new(cfg.clone());
    let usable = pcm.samples.len() / cfg.hop * cfg.hop;
    stream.feed(&pcm.samples[..usable])
}
