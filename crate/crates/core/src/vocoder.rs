//! Strictly causal mel-to-waveform synthesis.
//!
//! Upsampling never looks ahead: each stage widens channels with a causal
//! conv at the coarse rate, redistributes them onto finer time steps with a
//! pixel shuffle (a pure permutation), and refines with a bank of parallel
//! dilated causal residual branches whose outputs are averaged. Factors
//! multiply to the mel hop, so every mel frame becomes exactly `hop` samples;
//! perturbing frame `t` can never change a sample before `t * hop`.

use thiserror::Error;

use crate::model::{ModelIoError, VocoderConfig, WeightReader};
use crate::tensor::{
    add, causal_conv1d, leaky_relu, mean_of, pixel_shuffle, ConvSpec, ConvState, Tensor2D,
    TensorError,
};

const SLOPE: f32 = 0.1;

#[derive(Debug, Error)]
pub enum VocoderError {
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

impl ConvLayer {
    fn apply(&self, x: &Tensor2D, state: &mut ConvState) -> Result<Tensor2D, TensorError> {
        causal_conv1d(x, &self.spec, &self.weight, Some(&self.bias), state)
    }
}

struct Branch {
    conv1: ConvLayer,
    conv2: ConvLayer,
}

struct Stage {
    factor: usize,
    up: ConvLayer,
    branches: Vec<Branch>,
}

/// Carried conv histories, one per conv at its native temporal rate.
#[derive(Debug, Clone, PartialEq)]
pub struct VocoderState {
    pre: ConvState,
    stages: Vec<StageState>,
    post: ConvState,
}

#[derive(Debug, Clone, PartialEq)]
struct StageState {
    up: ConvState,
    branches: Vec<(ConvState, ConvState)>,
}

pub struct Vocoder {
    cfg: VocoderConfig,
    n_mels: usize,
    hop: usize,
    pre: ConvLayer,
    stages: Vec<Stage>,
    post: ConvLayer,
}

impl Vocoder {
    pub fn from_reader(
        cfg: &VocoderConfig,
        n_mels: usize,
        r: &mut WeightReader,
    ) -> Result<Self, ModelIoError> {
        let c = cfg.base_channels;
        let mut conv = |name: String, spec: ConvSpec| -> Result<ConvLayer, ModelIoError> {
            Ok(ConvLayer {
                weight: r.take_vec(
                    &format!("{name}.weight"),
                    &[spec.out_channels, spec.in_channels, spec.kernel],
                )?,
                bias: r.take_vec(&format!("{name}.bias"), &[spec.out_channels])?,
                spec,
            })
        };
        let pre = conv(
            "vocoder.pre".into(),
            ConvSpec {
                in_channels: n_mels,
                out_channels: c,
                kernel: cfg.pre_kernel,
                dilation: 1,
                has_bias: true,
            },
        )?;
        let mut stages = Vec::with_capacity(cfg.factors.len());
        for (n, &factor) in cfg.factors.iter().enumerate() {
            let up = conv(
                format!("vocoder.stage{n}.up"),
                ConvSpec {
                    in_channels: c,
                    out_channels: factor * c,
                    kernel: 7,
                    dilation: 1,
                    has_bias: true,
                },
            )?;
            let mut branches = Vec::new();
            for (b, &kernel) in cfg.branch_kernels.iter().enumerate() {
                for (j, &dilation) in cfg.branch_dilations.iter().enumerate() {
                    let base = format!("vocoder.stage{n}.res{b}_{j}");
                    branches.push(Branch {
                        conv1: conv(
                            format!("{base}.conv1"),
                            ConvSpec {
                                in_channels: c,
                                out_channels: c,
                                kernel,
                                dilation,
                                has_bias: true,
                            },
                        )?,
                        conv2: conv(
                            format!("{base}.conv2"),
                            ConvSpec {
                                in_channels: c,
                                out_channels: c,
                                kernel,
                                dilation: 1,
                                has_bias: true,
                            },
                        )?,
                    });
                }
            }
            stages.push(Stage {
                factor,
                up,
                branches,
            });
        }
        let post = conv(
            "vocoder.post".into(),
            ConvSpec {
                in_channels: c,
                out_channels: 1,
                kernel: cfg.post_kernel,
                dilation: 1,
                has_bias: true,
            },
        )?;
        Ok(Vocoder {
            cfg: cfg.clone(),
            n_mels,
            hop: cfg.factors.iter().product(),
            pre,
            stages,
            post,
        })
    }

    pub fn config(&self) -> &VocoderConfig {
        &self.cfg
    }

    /// Samples emitted per mel frame (the factor product).
    pub fn samples_per_frame(&self) -> usize {
        self.hop
    }

    pub fn new_state(&self) -> VocoderState {
        VocoderState {
            pre: ConvState::new(&self.pre.spec),
            stages: self
                .stages
                .iter()
                .map(|s| StageState {
                    up: ConvState::new(&s.up.spec),
                    branches: s
                        .branches
                        .iter()
                        .map(|b| (ConvState::new(&b.conv1.spec), ConvState::new(&b.conv2.spec)))
                        .collect(),
                })
                .collect(),
            post: ConvState::new(&self.post.spec),
        }
    }

    /// Mel frames in, `hop × frames` samples out. State carries across calls
    /// so any chunking of a stream yields identical audio.
    pub fn vocode_chunk(
        &self,
        mel: &Tensor2D,
        state: &mut VocoderState,
    ) -> Result<Vec<f32>, VocoderError> {
        if mel.channels() != self.n_mels {
            return Err(VocoderError::BadChannels {
                expected: self.n_mels,
                got: mel.channels(),
            });
        }
        let mut x = self.pre.apply(mel, &mut state.pre)?;
        for n in 0..self.stages.len() {
            let activated = leaky_relu(&x, SLOPE);
            let shuffled = self.upsample_stage(n, &activated, &mut state.stages[n])?;
            x = self.residual_block(n, &shuffled, &mut state.stages[n])?;
        }
        let activated = leaky_relu(&x, SLOPE);
        let out = self.post.apply(&activated, &mut state.post)?;
        Ok(out.row(0).iter().map(|&v| v.tanh()).collect())
    }

    /// Causal conv to `r·C` channels followed by the pixel shuffle: output
    /// shape `(C, r × frames)`, values a permutation of the conv's output.
    fn upsample_stage(
        &self,
        n: usize,
        x: &Tensor2D,
        state: &mut StageState,
    ) -> Result<Tensor2D, VocoderError> {
        let stage = &self.stages[n];
        let wide = stage.up.apply(x, &mut state.up)?;
        Ok(pixel_shuffle(&wide, stage.factor)?)
    }

    /// `x + mean(branch(x))` over all parallel branches; each branch is
    /// leaky-ReLU → dilated causal conv → leaky-ReLU → causal conv.
    fn residual_block(
        &self,
        n: usize,
        x: &Tensor2D,
        state: &mut StageState,
    ) -> Result<Tensor2D, VocoderError> {
        let stage = &self.stages[n];
        let mut outputs = Vec::with_capacity(stage.branches.len());
        for (branch, (s1, s2)) in stage.branches.iter().zip(&mut state.branches) {
            let h = branch.conv1.apply(&leaky_relu(x, SLOPE), s1)?;
            let out = branch.conv2.apply(&leaky_relu(&h, SLOPE), s2)?;
            outputs.push(out);
        }
        let refs: Vec<&Tensor2D> = outputs.iter().collect();
        Ok(add(x, &mean_of(&refs)?)?)
    }

    /// Upper bound on how many past mel frames can influence one output
    /// sample: every conv tail converted to samples, summed, divided by hop.
    pub fn receptive_field_frames(&self) -> usize {
        let mut tail_samples = 0usize;
        let mut rate = 1usize; // output samples per unit at the current layer
        let total: usize = self.cfg.factors.iter().product();
        // pre conv runs at frame rate: one unit spans all `total` samples
        tail_samples += self.pre.spec.tail_len() * total;
        for stage in &self.stages {
            tail_samples += stage.up.spec.tail_len() * (total / rate);
            rate *= stage.factor;
            let unit = total / rate;
            let worst = stage
                .branches
                .iter()
                .map(|b| b.conv1.spec.tail_len() + b.conv2.spec.tail_len())
                .max()
                .unwrap_or(0);
            tail_samples += worst * unit;
        }
        tail_samples += self.post.spec.tail_len();
        1 + tail_samples.div_ceil(self.hop)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        init_weights, tiny_config, weight_manifest, ModelConfig, ModelWeights, WeightReader,
        WeightTensor,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &ModelConfig, seed: u64) -> Vocoder {
        let weights = init_weights(cfg, seed).unwrap();
        let mut reader = WeightReader::new(&weights);
        Vocoder::from_reader(&cfg.vocoder, cfg.mel.n_mels, &mut reader).unwrap()
    }

    fn build_zero(cfg: &ModelConfig) -> Vocoder {
        let mut weights = ModelWeights::new();
        for (name, dims) in weight_manifest(cfg) {
            let count = dims.iter().product();
            weights
                .insert(&name, WeightTensor { dims, data: vec![0.0; count] })
                .unwrap();
        }
        let mut reader = WeightReader::new(&weights);
        Vocoder::from_reader(&cfg.vocoder, cfg.mel.n_mels, &mut reader).unwrap()
    }

    fn random_frames(channels: usize, frames: usize, rng: &mut ChaCha8Rng) -> Tensor2D {
        let data = (0..channels * frames)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor2D::from_data(channels, frames, data).unwrap()
    }

    #[test]
    fn output_length_is_hop_times_frames() {
        let cfg = tiny_config();
        let voc = build(&cfg, 0);
        assert_eq!(voc.samples_per_frame(), 24);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for frames in 1..=16 {
            let mut state = voc.new_state();
            let mel = random_frames(cfg.mel.n_mels, frames, &mut rng);
            let samples = voc.vocode_chunk(&mel, &mut state).unwrap();
            assert_eq!(samples.len(), 24 * frames);
            assert!(samples.iter().all(|s| s.abs() < 1.0));
        }
    }

    #[test]
    fn chunked_equals_single_shot_for_every_split() {
        let cfg = tiny_config();
        let voc = build(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = 8;
        let mel = random_frames(cfg.mel.n_mels, frames, &mut rng);

        let mut whole_state = voc.new_state();
        let whole = voc.vocode_chunk(&mel, &mut whole_state).unwrap();

        for split in 1..frames {
            let mut state = voc.new_state();
            let mut samples = voc
                .vocode_chunk(&mel.slice_frames(0, split), &mut state)
                .unwrap();
            samples.extend(
                voc.vocode_chunk(&mel.slice_frames(split, frames - split), &mut state)
                    .unwrap(),
            );
            assert_eq!(samples, whole, "split {split}");
        }
    }

    #[test]
    fn frame_at_a_time_equals_batch() {
        let cfg = tiny_config();
        let voc = build(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mel = random_frames(cfg.mel.n_mels, 6, &mut rng);

        let mut batch_state = voc.new_state();
        let batch = voc.vocode_chunk(&mel, &mut batch_state).unwrap();

        let mut state = voc.new_state();
        let mut streamed = Vec::new();
        for t in 0..6 {
            streamed.extend(voc.vocode_chunk(&mel.slice_frames(t, 1), &mut state).unwrap());
        }
        assert_eq!(streamed, batch);
    }

    #[test]
    fn perturbing_a_frame_only_affects_later_samples() {
        let cfg = tiny_config();
        let voc = build(&cfg, 3);
        let hop = voc.samples_per_frame();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mel = random_frames(cfg.mel.n_mels, 8, &mut rng);
        let mut base_state = voc.new_state();
        let base = voc.vocode_chunk(&mel, &mut base_state).unwrap();

        for t in 0..8 {
            let mut poked = mel.clone();
            poked.set(2, t, poked.get(2, t) + 1.0);
            let mut state = voc.new_state();
            let out = voc.vocode_chunk(&poked, &mut state).unwrap();
            assert_eq!(&out[..t * hop], &base[..t * hop], "frame {t}");
            assert_ne!(&out[t * hop..], &base[t * hop..], "frame {t} must react");
        }
    }

    #[test]
    fn zero_weights_make_residual_blocks_identity() {
        let cfg = tiny_config();
        let voc = build_zero(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_frames(cfg.vocoder.base_channels, 5, &mut rng);
        let mut state = voc.new_state();
        let out = voc.residual_block(0, &x, &mut state.stages[0]).unwrap();
        assert_eq!(out.data(), x.data());

        // and the whole zero vocoder emits exact silence
        let mel = random_frames(cfg.mel.n_mels, 3, &mut rng);
        let mut vs = voc.new_state();
        let samples = voc.vocode_chunk(&mel, &mut vs).unwrap();
        assert!(samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn upsample_stage_is_conv_then_permutation() {
        let cfg = tiny_config();
        let voc = build(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cfg.vocoder.base_channels;
        let x = random_frames(c, 4, &mut rng);

        let mut state = voc.new_state();
        let shuffled = voc.upsample_stage(0, &x, &mut state.stages[0]).unwrap();
        assert_eq!(shuffled.channels(), c);
        assert_eq!(shuffled.frames(), 4 * cfg.vocoder.factors[0]);

        // same conv by hand: multiset of values must be preserved
        let mut conv_state = ConvState::new(&voc.stages[0].up.spec);
        let wide = voc.stages[0].up.apply(&x, &mut conv_state).unwrap();
        let mut a: Vec<u32> = wide.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = shuffled.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn unit_factor_stage_degenerates_to_causal_conv() {
        let mut cfg = tiny_config();
        cfg.vocoder.factors = vec![1, 4, 3, 2];
        let voc = build(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_frames(cfg.vocoder.base_channels, 5, &mut rng);

        let mut state = voc.new_state();
        let out = voc.upsample_stage(0, &x, &mut state.stages[0]).unwrap();
        let mut conv_state = ConvState::new(&voc.stages[0].up.spec);
        let conv = voc.stages[0].up.apply(&x, &mut conv_state).unwrap();
        assert_eq!(out.data(), conv.data());
        assert_eq!(out.frames(), 5);
    }

    #[test]
    fn single_branch_average_is_the_branch_itself() {
        let mut cfg = tiny_config();
        cfg.vocoder.branch_kernels = vec![3];
        cfg.vocoder.branch_dilations = vec![2];
        let voc = build(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_frames(cfg.vocoder.base_channels, 6, &mut rng);

        let mut state = voc.new_state();
        let out = voc.residual_block(0, &x, &mut state.stages[0]).unwrap();

        let branch = &voc.stages[0].branches[0];
        let mut s1 = ConvState::new(&branch.conv1.spec);
        let mut s2 = ConvState::new(&branch.conv2.spec);
        let h = branch.conv1.apply(&leaky_relu(&x, SLOPE), &mut s1).unwrap();
        let only = branch.conv2.apply(&leaky_relu(&h, SLOPE), &mut s2).unwrap();
        let expected = add(&x, &only).unwrap();
        assert_eq!(out.data(), expected.data());
    }

    #[test]
    fn receptive_field_counts_every_tail() {
        // tiny schedule by hand: pre k7 at frame rate = 6·24 samples,
        // stage ups k7 at units 24/6/2 = 144+36+12, worst branch
        // (k3 d2 then k3 d1 = tail 6) at units 6/2/1 = 36+12+6, post = 6.
        let voc = build(&tiny_config(), 8);
        let tails = 144 + (144 + 36 + 12) + (36 + 12 + 6) + 6;
        assert_eq!(tails, 396);
        assert_eq!(voc.receptive_field_frames(), 1 + 396usize.div_ceil(24));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let cfg = tiny_config();
        let voc = build(&cfg, 9);
        let mut state = voc.new_state();
        let wrong = Tensor2D::zeros(cfg.mel.n_mels + 1, 2);
        assert!(matches!(
            voc.vocode_chunk(&wrong, &mut state),
            Err(VocoderError::BadChannels { .. })
        ));
    }
}
