//! Acoustic decoding: content labels are embedded, fused with timbre, style,
//! and predicted pitch, and decoded into mel frames.
//!
//! Both stacks are strictly frame-causal dilated convolutions with carried
//! [`ConvState`]s, so chunked execution is bit-identical to single-shot.
//! The pitch predictor reads `[content ∥ z_t ∥ z_s]` and emits one logF0
//! value per frame; the mel decoder reads the same features plus a linear
//! lift of that pitch and emits one 80-bin mel frame per content frame.

use thiserror::Error;

use crate::model::{DecoderConfig, ModelIoError, WeightReader};
use crate::tensor::{causal_conv1d, leaky_relu, linear, ConvSpec, ConvState, Tensor2D, TensorError};

/// Natural-log F0 per frame.
pub type PitchTrack = Vec<f32>;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("label {label} out of range (classes = {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("input has {got} channels, want {expected}")]
    BadChannels { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

struct ConvLayer {
    spec: ConvSpec,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

/// Carried conv histories for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pitch: Vec<ConvState>,
    mel: Vec<ConvState>,
}

pub struct Decoder {
    cfg: DecoderConfig,
    classes: usize,
    d_model: usize,
    n_mels: usize,
    pitch_in: usize,
    fused_in: usize,
    embed_table: Vec<f32>,
    pitch_convs: Vec<ConvLayer>,
    pitch_out_w: Vec<f32>,
    pitch_out_b: Vec<f32>,
    pitch_emb_w: Vec<f32>,
    pitch_emb_b: Vec<f32>,
    mel_convs: Vec<ConvLayer>,
    mel_out_w: Vec<f32>,
    mel_out_b: Vec<f32>,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn from_reader(
        cfg: &DecoderConfig,
        d_model: usize,
        d_timbre: usize,
        d_code: usize,
        n_mels: usize,
        classes: usize,
        r: &mut WeightReader,
    ) -> Result<Self, ModelIoError> {
        let pitch_in = d_model + d_timbre + d_code;
        let fused_in = pitch_in + cfg.pitch_emb_dim;
        let embed_table = r.take_vec("decoder.embed.table", &[classes, d_model])?;

        let mut pitch_convs = Vec::new();
        let mut cin = pitch_in;
        for (i, &dilation) in cfg.pitch_dilations.iter().enumerate() {
            let spec = ConvSpec {
                in_channels: cin,
                out_channels: cfg.pitch_hidden,
                kernel: cfg.kernel,
                dilation,
                has_bias: true,
            };
            pitch_convs.push(ConvLayer {
                spec,
                weight: r.take_vec(
                    &format!("decoder.pitch.conv{i}.weight"),
                    &[cfg.pitch_hidden, cin, cfg.kernel],
                )?,
                bias: r.take_vec(&format!("decoder.pitch.conv{i}.bias"), &[cfg.pitch_hidden])?,
            });
            cin = cfg.pitch_hidden;
        }

        let mut mel_convs = Vec::new();
        let mut cin = fused_in;
        for (i, &dilation) in cfg.mel_dilations.iter().enumerate() {
            let spec = ConvSpec {
                in_channels: cin,
                out_channels: 2 * cfg.mel_hidden,
                kernel: cfg.kernel,
                dilation,
                has_bias: true,
            };
            mel_convs.push(ConvLayer {
                spec,
                weight: r.take_vec(
                    &format!("decoder.mel.conv{i}.weight"),
                    &[2 * cfg.mel_hidden, cin, cfg.kernel],
                )?,
                bias: r.take_vec(&format!("decoder.mel.conv{i}.bias"), &[2 * cfg.mel_hidden])?,
            });
            cin = cfg.mel_hidden;
        }

        Ok(Decoder {
            cfg: cfg.clone(),
            classes,
            d_model,
            n_mels,
            pitch_in,
            fused_in,
            embed_table,
            pitch_convs,
            pitch_out_w: r.take_vec("decoder.pitch.out.weight", &[1, cfg.pitch_hidden])?,
            pitch_out_b: r.take_vec("decoder.pitch.out.bias", &[1])?,
            pitch_emb_w: r.take_vec("decoder.pitch_emb.weight", &[cfg.pitch_emb_dim, 1])?,
            pitch_emb_b: r.take_vec("decoder.pitch_emb.bias", &[cfg.pitch_emb_dim])?,
            mel_convs,
            mel_out_w: r.take_vec("decoder.mel.out.weight", &[n_mels, cfg.mel_hidden])?,
            mel_out_b: r.take_vec("decoder.mel.out.bias", &[n_mels])?,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn pitch_input_dim(&self) -> usize {
        self.pitch_in
    }

    pub fn fused_input_dim(&self) -> usize {
        self.fused_in
    }

    /// Past frames that can influence one pitch output frame.
    pub fn pitch_receptive_field(&self) -> usize {
        1 + self
            .pitch_convs
            .iter()
            .map(|l| l.spec.tail_len())
            .sum::<usize>()
    }

    /// Past frames that can influence one mel output frame.
    pub fn mel_receptive_field(&self) -> usize {
        1 + self
            .mel_convs
            .iter()
            .map(|l| l.spec.tail_len())
            .sum::<usize>()
    }

    pub fn new_state(&self) -> DecoderState {
        DecoderState {
            pitch: self.pitch_convs.iter().map(|l| ConvState::new(&l.spec)).collect(),
            mel: self.mel_convs.iter().map(|l| ConvState::new(&l.spec)).collect(),
        }
    }

    /// Table lookup: one d_model column per label.
    pub fn embed_labels(&self, labels: &[usize]) -> Result<Tensor2D, DecoderError> {
        let mut out = Tensor2D::zeros(self.d_model, labels.len());
        for (t, &label) in labels.iter().enumerate() {
            if label >= self.classes {
                return Err(DecoderError::LabelOutOfRange {
                    label,
                    classes: self.classes,
                });
            }
            for c in 0..self.d_model {
                out.set(c, t, self.embed_table[label * self.d_model + c]);
            }
        }
        Ok(out)
    }

    /// Dilated causal conv stack over `[content ∥ z_t ∥ z_s]`, one logF0
    /// value per frame.
    pub fn predict_pitch(
        &self,
        features: &Tensor2D,
        state: &mut DecoderState,
    ) -> Result<PitchTrack, DecoderError> {
        if features.channels() != self.pitch_in {
            return Err(DecoderError::BadChannels {
                expected: self.pitch_in,
                got: features.channels(),
            });
        }
        let mut x = features.clone();
        for (layer, conv_state) in self.pitch_convs.iter().zip(&mut state.pitch) {
            x = causal_conv1d(&x, &layer.spec, &layer.weight, Some(&layer.bias), conv_state)?;
            x = leaky_relu(&x, 0.1);
        }
        let out = linear(&x, &self.pitch_out_w, Some(&self.pitch_out_b), 1)?;
        Ok(out.row(0).to_vec())
    }

    /// Linear lift of the scalar pitch track to `pitch_emb_dim` channels.
    pub fn pitch_embedding(&self, pitch: &[f32]) -> Result<Tensor2D, DecoderError> {
        let track = Tensor2D::from_data(1, pitch.len(), pitch.to_vec())?;
        Ok(linear(
            &track,
            &self.pitch_emb_w,
            Some(&self.pitch_emb_b),
            self.cfg.pitch_emb_dim,
        )?)
    }

    /// Gated dilated causal conv stack over the fused features, one mel
    /// frame per input frame.
    pub fn decode_mel(
        &self,
        fused: &Tensor2D,
        state: &mut DecoderState,
    ) -> Result<Tensor2D, DecoderError> {
        if fused.channels() != self.fused_in {
            return Err(DecoderError::BadChannels {
                expected: self.fused_in,
                got: fused.channels(),
            });
        }
        let mut x = fused.clone();
        for (layer, conv_state) in self.mel_convs.iter().zip(&mut state.mel) {
            let pre = causal_conv1d(&x, &layer.spec, &layer.weight, Some(&layer.bias), conv_state)?;
            x = gate(&pre);
        }
        Ok(linear(&x, &self.mel_out_w, Some(&self.mel_out_b), self.n_mels)?)
    }
}

/// Gated activation: the top channel half passes through tanh, the bottom
/// half through a sigmoid gate, multiplied element-wise.
pub(crate) fn gate(pre: &Tensor2D) -> Tensor2D {
    let hidden = pre.channels() / 2;
    let mut out = Tensor2D::zeros(hidden, pre.frames());
    for c in 0..hidden {
        for t in 0..pre.frames() {
            let a = f64::from(pre.get(c, t));
            let b = f64::from(pre.get(hidden + c, t));
            let sig = 1.0 / (1.0 + (-b).exp());
            out.set(c, t, (a.tanh() * sig) as f32);
        }
    }
    out
}
