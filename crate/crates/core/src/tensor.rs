//! Dense numeric primitives shared by every stage of the pipeline: causal 1-D
//! convolution with carried state, scaled dot-product attention, softmax,
//! pixel shuffle, temporal pooling, and per-frame affine maps.
//!
//! All tensors are channel-major `(c, t)` with contiguous rows. Values are
//! `f32`; every per-output dot product accumulates in `f64` and rounds once,
//! so splitting a stream at any frame boundary and carrying [`ConvState`]
//! reproduces the single-shot result bit-exactly.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("frame mismatch: expected {expected}, got {got}")]
    FrameMismatch { expected: usize, got: usize },
    #[error("data length {len} does not match {channels}x{frames}")]
    BadDataLength {
        channels: usize,
        frames: usize,
        len: usize,
    },
    #[error("non-finite value at channel {channel}, frame {frame}")]
    NonFinite { channel: usize, frame: usize },
    #[error("kernel size must be >= 1")]
    KernelTooSmall,
    #[error("dilation must be >= 1")]
    DilationTooSmall,
    #[error("weight length {len} does not match out*in*kernel = {expected}")]
    BadWeightLength { len: usize, expected: usize },
    #[error("bias length {len} does not match out channels {expected}")]
    BadBiasLength { len: usize, expected: usize },
    #[error("attention requires at least one key")]
    EmptyKeySet,
    #[error("softmax input is empty")]
    EmptySoftmax,
    #[error("upsample factor must be >= 1")]
    ZeroFactor,
    #[error("channels {channels} not divisible by factor {factor}")]
    ChannelsNotDivisible { channels: usize, factor: usize },
    #[error("pooling stride must be >= 1")]
    ZeroStride,
    #[error("channels {channels} not divisible by head count {heads}")]
    BadHeadSplit { channels: usize, heads: usize },
}

/// Channel-major 2-D feature block: value at `(c, t)` lives at `c * frames + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    channels: usize,
    frames: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn zeros(channels: usize, frames: usize) -> Self {
        Tensor2D {
            channels,
            frames,
            data: vec![0.0; channels * frames],
        }
    }

    /// Builds a tensor from channel-major data, checking length and finiteness.
    pub fn from_data(channels: usize, frames: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != channels * frames {
            return Err(TensorError::BadDataLength {
                channels,
                frames,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                channel: if frames == 0 { 0 } else { pos / frames },
                frame: if frames == 0 { 0 } else { pos % frames },
            });
        }
        Ok(Tensor2D {
            channels,
            frames,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize) -> f32 {
        self.data[c * self.frames + t]
    }

    #[inline]
    pub fn set(&mut self, c: usize, t: usize, v: f32) {
        self.data[c * self.frames + t] = v;
    }

    #[inline]
    pub fn row(&self, c: usize) -> &[f32] {
        &self.data[c * self.frames..(c + 1) * self.frames]
    }

    #[inline]
    pub fn row_mut(&mut self, c: usize) -> &mut [f32] {
        let f = self.frames;
        &mut self.data[c * f..(c + 1) * f]
    }

    /// One frame as an owned column vector.
    pub fn frame(&self, t: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, t)).collect()
    }

    /// Copies frames `[start, start + len)` into a new tensor.
    pub fn slice_frames(&self, start: usize, len: usize) -> Tensor2D {
        assert!(start + len <= self.frames, "frame slice out of range");
        let mut out = Tensor2D::zeros(self.channels, len);
        for c in 0..self.channels {
            out.row_mut(c).copy_from_slice(&self.row(c)[start..start + len]);
        }
        out
    }

    /// Copies the trailing `n` frames, left-padding with zeros when shorter.
    pub fn last_frames(&self, n: usize) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.channels, n);
        let take = n.min(self.frames);
        let src_start = self.frames - take;
        let dst_start = n - take;
        for c in 0..self.channels {
            out.row_mut(c)[dst_start..].copy_from_slice(&self.row(c)[src_start..]);
        }
        out
    }

    /// Copies a contiguous channel range into a new tensor.
    pub fn channel_slice(&self, start: usize, len: usize) -> Tensor2D {
        assert!(start + len <= self.channels, "channel slice out of range");
        Tensor2D {
            channels: len,
            frames: self.frames,
            data: self.data[start * self.frames..(start + len) * self.frames].to_vec(),
        }
    }

    /// Concatenates along the frame axis. All parts must share channel count.
    pub fn concat_frames(parts: &[&Tensor2D]) -> Result<Tensor2D, TensorError> {
        let channels = parts.first().map(|p| p.channels).unwrap_or(0);
        for p in parts {
            if p.channels != channels {
                return Err(TensorError::ChannelMismatch {
                    expected: channels,
                    got: p.channels,
                });
            }
        }
        let frames: usize = parts.iter().map(|p| p.frames).sum();
        let mut out = Tensor2D::zeros(channels, frames);
        for c in 0..channels {
            let mut at = 0;
            for p in parts {
                out.row_mut(c)[at..at + p.frames].copy_from_slice(p.row(c));
                at += p.frames;
            }
        }
        Ok(out)
    }

    /// Concatenates along the channel axis. All parts must share frame count.
    pub fn concat_channels(parts: &[&Tensor2D]) -> Result<Tensor2D, TensorError> {
        let frames = parts.first().map(|p| p.frames).unwrap_or(0);
        for p in parts {
            if p.frames != frames {
                return Err(TensorError::FrameMismatch {
                    expected: frames,
                    got: p.frames,
                });
            }
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(channels * frames);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor2D {
            channels,
            frames,
            data,
        })
    }
}

/// Shape of one causal convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Frames of history one output frame can reach: `1 + (kernel - 1) * dilation`.
    pub fn receptive_extent(&self) -> usize {
        1 + (self.kernel - 1) * self.dilation
    }

    /// Input frames the layer must remember between calls.
    pub fn tail_len(&self) -> usize {
        (self.kernel - 1) * self.dilation
    }

    fn validate(&self, x: &Tensor2D, weight: &[f32], bias: Option<&[f32]>) -> Result<(), TensorError> {
        if self.kernel < 1 {
            return Err(TensorError::KernelTooSmall);
        }
        if self.dilation < 1 {
            return Err(TensorError::DilationTooSmall);
        }
        if x.channels != self.in_channels {
            return Err(TensorError::ChannelMismatch {
                expected: self.in_channels,
                got: x.channels,
            });
        }
        let expected = self.out_channels * self.in_channels * self.kernel;
        if weight.len() != expected {
            return Err(TensorError::BadWeightLength {
                len: weight.len(),
                expected,
            });
        }
        if let Some(b) = bias {
            if b.len() != self.out_channels {
                return Err(TensorError::BadBiasLength {
                    len: b.len(),
                    expected: self.out_channels,
                });
            }
        }
        Ok(())
    }
}

/// Carried input history for one causal convolution layer.
///
/// Starts as zeros, which is exactly left zero-padding; after the first
/// `tail_len` frames it always holds the most recent `(kernel - 1) * dilation`
/// input frames. Never share one state between two in-flight calls.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvState {
    tail: Tensor2D,
}

impl ConvState {
    pub fn new(spec: &ConvSpec) -> Self {
        ConvState {
            tail: Tensor2D::zeros(spec.in_channels, spec.tail_len()),
        }
    }

    pub fn tail(&self) -> &Tensor2D {
        &self.tail
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SimdLevel {
    Fallback,
    #[cfg(target_arch = "x86_64")]
    Avx2Fma,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

fn simd_level() -> SimdLevel {
    use std::sync::OnceLock;
    static LEVEL: OnceLock<SimdLevel> = OnceLock::new();
    *LEVEL.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx512f") && is_x86_feature_detected!("fma") {
                return SimdLevel::Avx512;
            }
            if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                return SimdLevel::Avx2Fma;
            }
        }
        SimdLevel::Fallback
    })
}

/// Hot inner kernel: `acc[t] += w * src[t]` over one weight tap.
///
/// `FMA` selects fused multiply-add; the dispatch below only enables it when
/// hardware FMA exists, so the fallback never hits the libm soft path.
#[inline(always)]
fn conv_accumulate<const FMA: bool>(
    out: &mut [f32],
    frames: usize,
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    dilation: usize,
    pad: &Tensor2D,
    weight: &[f32],
    bias: Option<&[f32]>,
    scratch: &mut [f64],
) {
    for o in 0..out_channels {
        let b = bias.map(|b| f64::from(b[o])).unwrap_or(0.0);
        scratch[..frames].fill(b);
        for i in 0..in_channels {
            let row = pad.row(i);
            let wbase = (o * in_channels + i) * kernel;
            for k in 0..kernel {
                let w = f64::from(weight[wbase + k]);
                let src = &row[k * dilation..k * dilation + frames];
                let acc = &mut scratch[..frames];
                if FMA {
                    for (a, &s) in acc.iter_mut().zip(src) {
                        *a = w.mul_add(f64::from(s), *a);
                    }
                } else {
                    for (a, &s) in acc.iter_mut().zip(src) {
                        *a += w * f64::from(s);
                    }
                }
            }
        }
        let dst = &mut out[o * frames..(o + 1) * frames];
        for (d, &a) in dst.iter_mut().zip(scratch[..frames].iter()) {
            *d = a as f32;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f", enable = "fma")]
unsafe fn conv_accumulate_avx512(
    out: &mut [f32],
    frames: usize,
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    dilation: usize,
    pad: &Tensor2D,
    weight: &[f32],
    bias: Option<&[f32]>,
    scratch: &mut [f64],
) {
    conv_accumulate::<true>(
        out, frames, out_channels, in_channels, kernel, dilation, pad, weight, bias, scratch,
    )
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn conv_accumulate_avx2(
    out: &mut [f32],
    frames: usize,
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    dilation: usize,
    pad: &Tensor2D,
    weight: &[f32],
    bias: Option<&[f32]>,
    scratch: &mut [f64],
) {
    conv_accumulate::<true>(
        out, frames, out_channels, in_channels, kernel, dilation, pad, weight, bias, scratch,
    )
}

/// Causal 1-D convolution with carried state.
///
/// Output frame `t` depends only on input frames `<= t`, counting the carried
/// tail as history; output frame count equals input frame count. The state is
/// advanced to hold the final `(kernel - 1) * dilation` input frames.
pub fn causal_conv1d(
    x: &Tensor2D,
    spec: &ConvSpec,
    weight: &[f32],
    bias: Option<&[f32]>,
    state: &mut ConvState,
) -> Result<Tensor2D, TensorError> {
    spec.validate(x, weight, bias)?;
    if state.tail.channels() != spec.in_channels || state.tail.frames() != spec.tail_len() {
        return Err(TensorError::FrameMismatch {
            expected: spec.tail_len(),
            got: state.tail.frames(),
        });
    }
    let frames = x.frames();
    let pad = Tensor2D::concat_frames(&[&state.tail, x])?;
    let mut out = Tensor2D::zeros(spec.out_channels, frames);
    if frames > 0 {
        let mut scratch = vec![0.0f64; frames];
        let effective_bias = if spec.has_bias { bias } else { None };
        match simd_level() {
            #[cfg(target_arch = "x86_64")]
            SimdLevel::Avx512 => unsafe {
                conv_accumulate_avx512(
                    out.data_mut(),
                    frames,
                    spec.out_channels,
                    spec.in_channels,
                    spec.kernel,
                    spec.dilation,
                    &pad,
                    weight,
                    effective_bias,
                    &mut scratch,
                )
            },
            #[cfg(target_arch = "x86_64")]
            SimdLevel::Avx2Fma => unsafe {
                conv_accumulate_avx2(
                    out.data_mut(),
                    frames,
                    spec.out_channels,
                    spec.in_channels,
                    spec.kernel,
                    spec.dilation,
                    &pad,
                    weight,
                    effective_bias,
                    &mut scratch,
                )
            },
            SimdLevel::Fallback => conv_accumulate::<false>(
                out.data_mut(),
                frames,
                spec.out_channels,
                spec.in_channels,
                spec.kernel,
                spec.dilation,
                &pad,
                weight,
                effective_bias,
                &mut scratch,
            ),
        }
    }
    state.tail = pad.last_frames(spec.tail_len());
    Ok(out)
}

/// Per-frame affine map `out(:, t) = W x(:, t) + b` with `W` shaped `(out, in)`.
pub fn linear(x: &Tensor2D, weight: &[f32], bias: Option<&[f32]>, out_dim: usize) -> Result<Tensor2D, TensorError> {
    let spec = ConvSpec {
        in_channels: x.channels(),
        out_channels: out_dim,
        kernel: 1,
        dilation: 1,
        has_bias: bias.is_some(),
    };
    let mut state = ConvState::new(&spec);
    causal_conv1d(x, &spec, weight, bias, &mut state)
}

/// Numerically stable softmax over a vector; outputs are positive and sum to 1.
pub fn softmax(v: &[f32]) -> Result<Vec<f32>, TensorError> {
    if v.is_empty() {
        return Err(TensorError::EmptySoftmax);
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, |m, x| m.max(f64::from(x)));
    let exps: Vec<f64> = v.iter().map(|&x| (f64::from(x) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / sum) as f32).collect())
}

/// Scaled dot-product attention over channel-major blocks.
///
/// `Q` is `(d, q_frames)`, `K` is `(d, k_frames)`, `V` is `(d_v, k_frames)`;
/// the result is `(d_v, q_frames)` with each attention row summing to 1.
pub fn scaled_dot_attention(q: &Tensor2D, k: &Tensor2D, v: &Tensor2D) -> Result<Tensor2D, TensorError> {
    if q.channels() != k.channels() {
        return Err(TensorError::ChannelMismatch {
            expected: q.channels(),
            got: k.channels(),
        });
    }
    if k.frames() != v.frames() {
        return Err(TensorError::FrameMismatch {
            expected: k.frames(),
            got: v.frames(),
        });
    }
    if k.frames() == 0 {
        return Err(TensorError::EmptyKeySet);
    }
    let d = q.channels();
    let scale = 1.0 / (d as f64).sqrt();
    let qf = q.frames();
    let kf = k.frames();
    let mut out = Tensor2D::zeros(v.channels(), qf);
    let mut scores = vec![0.0f64; kf];
    for qi in 0..qf {
        for (ki, score) in scores.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for c in 0..d {
                acc += f64::from(q.get(c, qi)) * f64::from(k.get(c, ki));
            }
            *score = acc * scale;
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0f64;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for c in 0..v.channels() {
            let row = v.row(c);
            let mut acc = 0.0f64;
            for (w, &val) in scores.iter().zip(row) {
                acc += w * f64::from(val);
            }
            out.set(c, qi, (acc / sum) as f32);
        }
    }
    Ok(out)
}

/// Multi-head attention: channels split into `heads` contiguous groups, each
/// attended independently with `1/sqrt(d_head)` scaling, outputs concatenated.
pub fn multi_head_attention(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    heads: usize,
) -> Result<Tensor2D, TensorError> {
    if heads == 0 || q.channels() % heads != 0 {
        return Err(TensorError::BadHeadSplit {
            channels: q.channels(),
            heads,
        });
    }
    if v.channels() % heads != 0 {
        return Err(TensorError::BadHeadSplit {
            channels: v.channels(),
            heads,
        });
    }
    let dh = q.channels() / heads;
    let dv = v.channels() / heads;
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.channel_slice(h * dh, dh);
        let kh = k.channel_slice(h * dh, dh);
        let vh = v.channel_slice(h * dv, dv);
        parts.push(scaled_dot_attention(&qh, &kh, &vh)?);
    }
    let refs: Vec<&Tensor2D> = parts.iter().collect();
    Tensor2D::concat_channels(&refs)
}

/// Channel-to-time reindexing: `out(c, t*r + j) = x(c*r + j, t)`.
///
/// A pure permutation of values; upsamples the frame axis by `r`.
pub fn pixel_shuffle(x: &Tensor2D, r: usize) -> Result<Tensor2D, TensorError> {
    if r == 0 {
        return Err(TensorError::ZeroFactor);
    }
    if x.channels() % r != 0 {
        return Err(TensorError::ChannelsNotDivisible {
            channels: x.channels(),
            factor: r,
        });
    }
    let out_ch = x.channels() / r;
    let in_frames = x.frames();
    let mut out = Tensor2D::zeros(out_ch, r * in_frames);
    for c in 0..out_ch {
        for j in 0..r {
            let src = x.row(c * r + j);
            let dst = out.row_mut(c);
            for t in 0..in_frames {
                dst[t * r + j] = src[t];
            }
        }
    }
    Ok(out)
}

/// Mean pooling along time with a trailing partial window averaged over its
/// actual length. Output frame count is `ceil(frames / stride)`.
pub fn mean_pool_time(x: &Tensor2D, stride: usize) -> Result<Tensor2D, TensorError> {
    if stride == 0 {
        return Err(TensorError::ZeroStride);
    }
    let out_frames = x.frames().div_ceil(stride);
    let mut out = Tensor2D::zeros(x.channels(), out_frames);
    for c in 0..x.channels() {
        let row = x.row(c);
        for (w, window) in row.chunks(stride).enumerate() {
            let sum: f64 = window.iter().map(|&v| f64::from(v)).sum();
            out.set(c, w, (sum / window.len() as f64) as f32);
        }
    }
    Ok(out)
}

/// Leaky ReLU applied element-wise.
pub fn leaky_relu(x: &Tensor2D, slope: f32) -> Tensor2D {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    out
}

/// Element-wise sum of two same-shape tensors.
pub fn add(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D, TensorError> {
    if a.channels() != b.channels() {
        return Err(TensorError::ChannelMismatch {
            expected: a.channels(),
            got: b.channels(),
        });
    }
    if a.frames() != b.frames() {
        return Err(TensorError::FrameMismatch {
            expected: a.frames(),
            got: b.frames(),
        });
    }
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

/// Element-wise mean of same-shape tensors, accumulated in f64 in slice
/// order and rounded once.
pub fn mean_of(parts: &[&Tensor2D]) -> Result<Tensor2D, TensorError> {
    let first = parts.first().ok_or(TensorError::EmptyKeySet)?;
    for p in parts {
        if p.channels() != first.channels() {
            return Err(TensorError::ChannelMismatch {
                expected: first.channels(),
                got: p.channels(),
            });
        }
        if p.frames() != first.frames() {
            return Err(TensorError::FrameMismatch {
                expected: first.frames(),
                got: p.frames(),
            });
        }
    }
    let mut out = Tensor2D::zeros(first.channels(), first.frames());
    let n = parts.len() as f64;
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for p in parts {
            acc += f64::from(p.data()[i]);
        }
        *o = (acc / n) as f32;
    }
    Ok(out)
}


#[cfg(test)]
mod perf {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::time::Instant;

    // Rough conv throughput probe; run with `cargo test --release -- --ignored perf`.
    #[test]
    #[ignore]
    fn perf_conv_throughput() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = ConvSpec {
            in_channels: 128,
            out_channels: 128,
            kernel: 11,
            dilation: 5,
            has_bias: true,
        };
        let frames = 6400;
        let weight: Vec<f32> = (0..128 * 128 * 11).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let bias: Vec<f32> = (0..128).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let data: Vec<f32> = (0..128 * frames).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor2D::from_data(128, frames, data).unwrap();
        let mut state = ConvState::new(&spec);
        // warm up
        let _ = causal_conv1d(&x, &spec, &weight, Some(&bias), &mut state).unwrap();
        let reps = 10;
        let start = Instant::now();
        for _ in 0..reps {
            let _ = causal_conv1d(&x, &spec, &weight, Some(&bias), &mut state).unwrap();
        }
        let secs = start.elapsed().as_secs_f64();
        let macs = (reps * 128 * 128 * 11 * frames) as f64;
        println!("conv throughput: {:.2} GMAC/s", macs / secs / 1e9);
    }
}
