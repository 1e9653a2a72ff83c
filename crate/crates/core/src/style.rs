//! Reference-side style encoding: a global timbre embedding, quantized
//! chunk-level style tokens, and attention-based alignment of style to
//! content frames.
//!
//! The reference utterance is processed offline before streaming starts, so
//! the conv stacks here are centered with edge-replicate padding rather than
//! causal. Quantization goes through a [`Codebook`] that tracks per-entry
//! usage so collapsed entries can be re-seeded from batch latents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{ModelIoError, StyleConfig, WeightReader};
use crate::tensor::{linear, mean_pool_time, scaled_dot_attention, Tensor2D, TensorError};

#[derive(Debug, Error)]
pub enum StyleError {
    #[error("reference has no frames")]
    EmptyReference,
    #[error("no style tokens")]
    EmptyTokens,
    #[error("vector has dim {got}, want {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("cosine similarity undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("codebook needs at least 2 entries, got {0}")]
    CodebookTooSmall(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Global speaker timbre vector, one per reference utterance.
pub type TimbreEmbedding = Vec<f32>;

/// Quantized style sequence: one entry per `token_stride` mel frames (80 ms
/// at the default stride), positions implied by order.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleTokens {
    pub indices: Vec<usize>,
    pub vectors: Vec<Vec<f32>>,
}

impl StyleTokens {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-frame style vectors aligned to one content chunk (d_code × frames).
pub type AlignedStyle = Tensor2D;

/// VQ codebook with usage counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Vec<Vec<f32>>,
    usage: Vec<u64>,
    d_code: usize,
}

impl Codebook {
    pub fn new(entries: Vec<Vec<f32>>) -> Result<Self, StyleError> {
        if entries.len() < 2 {
            return Err(StyleError::CodebookTooSmall(entries.len()));
        }
        let d_code = entries[0].len();
        for e in &entries {
            if e.len() != d_code {
                return Err(StyleError::DimMismatch {
                    expected: d_code,
                    got: e.len(),
                });
            }
        }
        let usage = vec![0; entries.len()];
        Ok(Codebook {
            entries,
            usage,
            d_code,
        })
    }

    pub fn from_reader(cfg: &StyleConfig, r: &mut WeightReader) -> Result<Self, ModelIoError> {
        let flat = r.take(
            "style.codebook.entries",
            &[cfg.codebook_size, cfg.d_code],
        )?;
        let entries = flat.chunks(cfg.d_code).map(<[f32]>::to_vec).collect();
        Codebook::new(entries).map_err(|e| ModelIoError::Config(e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.d_code
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        &self.entries[k]
    }

    pub fn usage(&self, k: usize) -> u64 {
        self.usage[k]
    }
}

/// Nearest codebook entry by squared L2 distance, ties toward the smallest
/// index. Bumps the winner's usage count and returns (index, entry).
pub fn quantize(z: &[f32], codebook: &mut Codebook) -> Result<(usize, Vec<f32>), StyleError> {
    if z.len() != codebook.d_code {
        return Err(StyleError::DimMismatch {
            expected: codebook.d_code,
            got: z.len(),
        });
    }
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (k, entry) in codebook.entries.iter().enumerate() {
        let mut dist = 0.0f64;
        for (a, b) in z.iter().zip(entry) {
            let d = f64::from(a - b);
            dist += d * d;
        }
        if dist < best_dist {
            best_dist = dist;
            best = k;
        }
    }
    codebook.usage[best] += 1;
    Ok((best, codebook.entries[best].clone()))
}

/// Quadratic part of the CVQ objective: ‖z − e‖² + β‖z − e‖². The
/// contrastive term is a separate call.
pub fn cvq_loss(z: &[f32], e: &[f32], beta: f64) -> Result<f64, StyleError> {
    if z.len() != e.len() {
        return Err(StyleError::DimMismatch {
            expected: z.len(),
            got: e.len(),
        });
    }
    let mut dist = 0.0f64;
    for (a, b) in z.iter().zip(e) {
        let d = f64::from(a - b);
        dist += d * d;
    }
    Ok(dist + beta * dist)
}

fn cosine(a: &[f32], b: &[f32]) -> Result<f64, StyleError> {
    if a.len() != b.len() {
        return Err(StyleError::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += f64::from(x) * f64::from(y);
        na += f64::from(x) * f64::from(x);
        nb += f64::from(y) * f64::from(y);
    }
    if na == 0.0 || nb == 0.0 {
        return Err(StyleError::ZeroNorm);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// InfoNCE-style term over cosine similarities:
/// −ln(exp(s⁺) / (exp(s⁺) + Σᵢ exp(s⁻ᵢ))).
pub fn contrastive_loss(
    e: &[f32],
    z_pos: &[f32],
    z_negs: &[&[f32]],
) -> Result<f64, StyleError> {
    if z_negs.is_empty() {
        return Err(StyleError::EmptyTokens);
    }
    let s_pos = cosine(e, z_pos)?;
    let mut denom = s_pos.exp();
    for z in z_negs {
        denom += cosine(e, z)?.exp();
    }
    Ok(-(s_pos.exp() / denom).ln())
}

/// Replaces every entry whose usage count is zero with a latent drawn
/// uniformly (seeded) from `batch_latents`, then clears all counts.
pub fn reinit_unused_codes(
    codebook: &mut Codebook,
    batch_latents: &[Vec<f32>],
    seed: u64,
) -> Result<usize, StyleError> {
    if batch_latents.is_empty() {
        return Err(StyleError::EmptyTokens);
    }
    for z in batch_latents {
        if z.len() != codebook.d_code {
            return Err(StyleError::DimMismatch {
                expected: codebook.d_code,
                got: z.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut replaced = 0;
    for k in 0..codebook.entries.len() {
        if codebook.usage[k] == 0 {
            let pick = rng.gen_range(0..batch_latents.len());
            codebook.entries[k] = batch_latents[pick].clone();
            replaced += 1;
        }
    }
    for u in &mut codebook.usage {
        *u = 0;
    }
    Ok(replaced)
}

/// Sinusoidal position encoding: even channels sine, odd channels cosine,
/// geometric frequency ladder over the channel index.
pub fn position_encoding(dim: usize, position: usize) -> Vec<f32> {
    let p = position as f64;
    (0..dim)
        .map(|c| {
            let pair = (c / 2 * 2) as f64;
            let omega = 1.0 / 10000f64.powf(pair / dim as f64);
            if c % 2 == 0 {
                (p * omega).sin() as f32
            } else {
                (p * omega).cos() as f32
            }
        })
        .collect()
}

struct ReplicateConv {
    weight: Vec<f32>,
    bias: Vec<f32>,
    cin: usize,
    cout: usize,
    kernel: usize,
}

impl ReplicateConv {
    /// Centered conv with edge-replicate padding, so a time-constant input
    /// stays constant and matches the single-frame case.
    fn apply(&self, x: &Tensor2D) -> Result<Tensor2D, TensorError> {
        if x.channels() != self.cin {
            return Err(TensorError::ChannelMismatch {
                expected: self.cin,
                got: x.channels(),
            });
        }
        let frames = x.frames();
        let half = (self.kernel - 1) / 2;
        let mut out = Tensor2D::zeros(self.cout, frames);
        for o in 0..self.cout {
            let w_base = o * self.cin * self.kernel;
            for t in 0..frames {
                let mut acc = f64::from(self.bias[o]);
                for i in 0..self.cin {
                    let row = x.row(i);
                    for k in 0..self.kernel {
                        let src = (t + k).saturating_sub(half).min(frames - 1);
                        let w = self.weight[w_base + i * self.kernel + k];
                        acc += f64::from(w) * f64::from(row[src]);
                    }
                }
                out.set(o, t, acc as f32);
            }
        }
        Ok(out)
    }
}

fn leaky(mut x: Tensor2D) -> Tensor2D {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v *= 0.1;
        }
    }
    x
}

pub struct StyleEncoder {
    cfg: StyleConfig,
    d_model: usize,
    timbre_convs: Vec<ReplicateConv>,
    timbre_proj_w: Vec<f32>,
    timbre_proj_b: Vec<f32>,
    token_convs: Vec<ReplicateConv>,
    token_proj_w: Vec<f32>,
    token_proj_b: Vec<f32>,
    align_q_w: Vec<f32>,
    align_q_b: Vec<f32>,
    align_k_w: Vec<f32>,
    align_k_b: Vec<f32>,
    align_v_w: Vec<f32>,
    align_v_b: Vec<f32>,
}

impl StyleEncoder {
    pub fn from_reader(
        cfg: &StyleConfig,
        n_mels: usize,
        d_model: usize,
        r: &mut WeightReader,
    ) -> Result<Self, ModelIoError> {
        let cc = cfg.conv_channels;
        let mut read_conv = |name: String, cin: usize, cout: usize| -> Result<ReplicateConv, ModelIoError> {
            Ok(ReplicateConv {
                weight: r.take_vec(&format!("{name}.weight"), &[cout, cin, 3])?,
                bias: r.take_vec(&format!("{name}.bias"), &[cout])?,
                cin,
                cout,
                kernel: 3,
            })
        };
        let mut timbre_convs = Vec::new();
        for (i, (cin, cout)) in [(n_mels, cc), (cc, cc), (cc, cc), (cc, cc)]
            .into_iter()
            .enumerate()
        {
            timbre_convs.push(read_conv(format!("style.timbre.conv{i}"), cin, cout)?);
        }
        let mut token_convs = Vec::new();
        for (i, (cin, cout)) in [(n_mels, cc), (cc, cc)].into_iter().enumerate() {
            token_convs.push(read_conv(format!("style.tokens.conv{i}"), cin, cout)?);
        }
        Ok(StyleEncoder {
            cfg: cfg.clone(),
            d_model,
            timbre_convs,
            timbre_proj_w: r.take_vec("style.timbre.proj.weight", &[cfg.d_timbre, cc])?,
            timbre_proj_b: r.take_vec("style.timbre.proj.bias", &[cfg.d_timbre])?,
            token_convs,
            token_proj_w: r.take_vec("style.tokens.proj.weight", &[cfg.d_code, cc])?,
            token_proj_b: r.take_vec("style.tokens.proj.bias", &[cfg.d_code])?,
            align_q_w: r.take_vec(
                "style.align.query.weight",
                &[cfg.d_code, d_model + cfg.d_timbre],
            )?,
            align_q_b: r.take_vec("style.align.query.bias", &[cfg.d_code])?,
            align_k_w: r.take_vec("style.align.key.weight", &[cfg.d_code, cfg.d_code])?,
            align_k_b: r.take_vec("style.align.key.bias", &[cfg.d_code])?,
            align_v_w: r.take_vec("style.align.value.weight", &[cfg.d_code, cfg.d_code])?,
            align_v_b: r.take_vec("style.align.value.bias", &[cfg.d_code])?,
        })
    }

    pub fn config(&self) -> &StyleConfig {
        &self.cfg
    }

    /// Conv stack → global temporal mean → linear to d_timbre.
    pub fn encode_timbre(&self, m_rf: &Tensor2D) -> Result<TimbreEmbedding, StyleError> {
        if m_rf.frames() == 0 {
            return Err(StyleError::EmptyReference);
        }
        let mut x = m_rf.clone();
        for conv in &self.timbre_convs {
            x = leaky(conv.apply(&x)?);
        }
        let pooled = mean_pool_time(&x, x.frames())?;
        let z_t = linear(
            &pooled,
            &self.timbre_proj_w,
            Some(&self.timbre_proj_b),
            self.cfg.d_timbre,
        )?;
        Ok(z_t.frame(0))
    }

    /// Conv stack → mean-pool by `token_stride` → linear to d_code →
    /// quantize every pooled latent. Emits `ceil(frames / token_stride)`
    /// tokens.
    pub fn encode_style_tokens(
        &self,
        m_rf: &Tensor2D,
        codebook: &mut Codebook,
    ) -> Result<StyleTokens, StyleError> {
        if m_rf.frames() == 0 {
            return Err(StyleError::EmptyReference);
        }
        let latents = self.token_latents(m_rf)?;
        let mut indices = Vec::with_capacity(latents.frames());
        let mut vectors = Vec::with_capacity(latents.frames());
        for t in 0..latents.frames() {
            let (idx, e) = quantize(&latents.frame(t), codebook)?;
            indices.push(idx);
            vectors.push(e);
        }
        Ok(StyleTokens { indices, vectors })
    }

    /// Pre-quantization latents, one column per token window.
    pub fn token_latents(&self, m_rf: &Tensor2D) -> Result<Tensor2D, StyleError> {
        if m_rf.frames() == 0 {
            return Err(StyleError::EmptyReference);
        }
        let mut x = m_rf.clone();
        for conv in &self.token_convs {
            x = leaky(conv.apply(&x)?);
        }
        let pooled = mean_pool_time(&x, self.cfg.token_stride)?;
        Ok(linear(
            &pooled,
            &self.token_proj_w,
            Some(&self.token_proj_b),
            self.cfg.d_code,
        )?)
    }

    /// Cross-attention from content frames to style tokens. The query is a
    /// projection of [content frame ∥ z_t]; keys and values project the
    /// token vectors with sinusoidal position encodings added.
    pub fn align_style(
        &self,
        content_emb: &Tensor2D,
        z_t: &TimbreEmbedding,
        tokens: &StyleTokens,
    ) -> Result<AlignedStyle, StyleError> {
        if tokens.is_empty() {
            return Err(StyleError::EmptyTokens);
        }
        if content_emb.channels() != self.d_model {
            return Err(StyleError::DimMismatch {
                expected: self.d_model,
                got: content_emb.channels(),
            });
        }
        if z_t.len() != self.cfg.d_timbre {
            return Err(StyleError::DimMismatch {
                expected: self.cfg.d_timbre,
                got: z_t.len(),
            });
        }
        let frames = content_emb.frames();
        let mut query_in = Tensor2D::zeros(self.d_model + self.cfg.d_timbre, frames);
        for c in 0..self.d_model {
            query_in.row_mut(c).copy_from_slice(content_emb.row(c));
        }
        for (c, &v) in z_t.iter().enumerate() {
            query_in.row_mut(self.d_model + c).fill(v);
        }
        let q = linear(&query_in, &self.align_q_w, Some(&self.align_q_b), self.cfg.d_code)?;

        let mut keyed = Tensor2D::zeros(self.cfg.d_code, tokens.len());
        for (pos, vector) in tokens.vectors.iter().enumerate() {
            if vector.len() != self.cfg.d_code {
                return Err(StyleError::DimMismatch {
                    expected: self.cfg.d_code,
                    got: vector.len(),
                });
            }
            let pe = position_encoding(self.cfg.d_code, pos);
            for c in 0..self.cfg.d_code {
                keyed.set(c, pos, vector[c] + pe[c]);
            }
        }
        let k = linear(&keyed, &self.align_k_w, Some(&self.align_k_b), self.cfg.d_code)?;
        let v = linear(&keyed, &self.align_v_w, Some(&self.align_v_b), self.cfg.d_code)?;
        Ok(scaled_dot_attention(&q, &k, &v)?)
    }
}
