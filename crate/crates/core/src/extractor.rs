//! Chunk-incremental content extractor.
//!
//! An Emformer-style encoder: each 20 ms mel frame is projected to d_model,
//! then per layer the chunk block attends over `[projected memory bank,
//! cached left-context keys, current chunk, right context]`. The chunk and
//! right-context blocks are updated as `FFN(Attn(W_q X, K, V) + X)`; a
//! mean-pooled chunk summary queries the same keys to produce one memory
//! vector, which the *next* chunk consumes one layer up. Top-layer chunk
//! frames are projected to class logits and argmaxed into content labels.
//!
//! All cross-chunk influence flows through [`ExtractorState`]; processing a
//! stream chunk by chunk is bit-identical to any other chunking of the same
//! frames with the same right-context windows.

use std::collections::VecDeque;

use thiserror::Error;

use crate::model::{ExtractorConfig, ModelIoError, WeightReader};
use crate::tensor::{
    add, linear, mean_pool_time, multi_head_attention, softmax, Tensor2D, TensorError,
};

/// One content label per 20 ms frame, each in `[0, classes)`.
pub type ContentLabels = Vec<usize>;

#[derive(Debug, Error)]
pub enum ExtractorError {
    #[error("chunk has {got} frames, want 1..={max}")]
    BadChunkFrames { got: usize, max: usize },
    #[error("right context has {got} frames, want {expected}")]
    BadRightContext { got: usize, expected: usize },
    #[error("input has {got} channels, want {expected}")]
    BadChannels { expected: usize, got: usize },
    #[error("state was created for a different configuration")]
    StateMismatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

struct LayerWeights {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    ffn_w1: Vec<f32>,
    ffn_b1: Vec<f32>,
    ffn_w2: Vec<f32>,
    ffn_b2: Vec<f32>,
}

/// Per-stream carried context: memory banks, projected left-context key and
/// value caches, and the chunk counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorState {
    layers: usize,
    d_model: usize,
    /// `mem[n]` holds raw summary vectors consumed by layer `n`; produced by
    /// layer `n - 1`, so `mem[0]` stays empty.
    mem: Vec<VecDeque<Vec<f32>>>,
    key_cache: Vec<Tensor2D>,
    val_cache: Vec<Tensor2D>,
    chunk_index: usize,
}

impl ExtractorState {
    pub fn chunk_index(&self) -> usize {
        self.chunk_index
    }

    pub fn memory_len(&self, layer: usize) -> usize {
        self.mem[layer].len()
    }

    pub fn cached_left_frames(&self, layer: usize) -> usize {
        self.key_cache[layer].frames()
    }
}

pub struct Extractor {
    cfg: ExtractorConfig,
    n_mels: usize,
    input_proj_w: Vec<f32>,
    input_proj_b: Vec<f32>,
    layers: Vec<LayerWeights>,
    classifier: Vec<f32>,
}

impl Extractor {
    pub fn from_reader(
        cfg: &ExtractorConfig,
        n_mels: usize,
        r: &mut WeightReader,
    ) -> Result<Self, ModelIoError> {
        let d = cfg.d_model;
        let input_proj_w = r.take_vec("extractor.input_proj.weight", &[d, n_mels])?;
        let input_proj_b = r.take_vec("extractor.input_proj.bias", &[d])?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for n in 0..cfg.layers {
            layers.push(LayerWeights {
                wq: r.take_vec(&format!("extractor.layer{n}.wq.weight"), &[d, d])?,
                wk: r.take_vec(&format!("extractor.layer{n}.wk.weight"), &[d, d])?,
                wv: r.take_vec(&format!("extractor.layer{n}.wv.weight"), &[d, d])?,
                ffn_w1: r.take_vec(&format!("extractor.layer{n}.ffn.w1.weight"), &[cfg.ffn_dim, d])?,
                ffn_b1: r.take_vec(&format!("extractor.layer{n}.ffn.w1.bias"), &[cfg.ffn_dim])?,
                ffn_w2: r.take_vec(&format!("extractor.layer{n}.ffn.w2.weight"), &[d, cfg.ffn_dim])?,
                ffn_b2: r.take_vec(&format!("extractor.layer{n}.ffn.w2.bias"), &[d])?,
            });
        }
        let classifier = r.take_vec("extractor.classifier.weight", &[cfg.classes, d])?;
        Ok(Extractor {
            cfg: cfg.clone(),
            n_mels,
            input_proj_w,
            input_proj_b,
            layers,
            classifier,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn new_state(&self) -> ExtractorState {
        ExtractorState {
            layers: self.cfg.layers,
            d_model: self.cfg.d_model,
            mem: vec![VecDeque::new(); self.cfg.layers],
            key_cache: vec![Tensor2D::zeros(self.cfg.d_model, 0); self.cfg.layers],
            val_cache: vec![Tensor2D::zeros(self.cfg.d_model, 0); self.cfg.layers],
            chunk_index: 0,
        }
    }

    fn ffn(&self, layer: &LayerWeights, x: &Tensor2D) -> Result<Tensor2D, TensorError> {
        let mut hidden = linear(x, &layer.ffn_w1, Some(&layer.ffn_b1), self.cfg.ffn_dim)?;
        for v in hidden.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        linear(&hidden, &layer.ffn_w2, Some(&layer.ffn_b2), self.cfg.d_model)
    }

    fn bank_tensor(&self, bank: &VecDeque<Vec<f32>>) -> Tensor2D {
        let mut t = Tensor2D::zeros(self.cfg.d_model, bank.len());
        for (i, m) in bank.iter().enumerate() {
            for (c, &v) in m.iter().enumerate() {
                t.set(c, i, v);
            }
        }
        t
    }

    /// Runs one chunk through every layer. `chunk` may be shorter than
    /// `chunk_frames` only at stream end; `right_ctx` must hold exactly
    /// `right_context_chunks * chunk_frames` frames (zero-pad at stream end).
    /// Returns one label per chunk frame.
    pub fn process_chunk(
        &self,
        state: &mut ExtractorState,
        chunk: &Tensor2D,
        right_ctx: &Tensor2D,
    ) -> Result<ContentLabels, ExtractorError> {
        Ok(self.process_chunk_features(state, chunk, right_ctx)?.0)
    }

    /// Like [`Self::process_chunk`], but also returns the top-layer content
    /// features the labels were projected from, for diagnostics and
    /// equivalence checks.
    pub fn process_chunk_features(
        &self,
        state: &mut ExtractorState,
        chunk: &Tensor2D,
        right_ctx: &Tensor2D,
    ) -> Result<(ContentLabels, Tensor2D), ExtractorError> {
        let cfg = &self.cfg;
        if state.layers != cfg.layers || state.d_model != cfg.d_model {
            return Err(ExtractorError::StateMismatch);
        }
        if chunk.channels() != self.n_mels {
            return Err(ExtractorError::BadChannels {
                expected: self.n_mels,
                got: chunk.channels(),
            });
        }
        if chunk.frames() == 0 || chunk.frames() > cfg.chunk_frames {
            return Err(ExtractorError::BadChunkFrames {
                got: chunk.frames(),
                max: cfg.chunk_frames,
            });
        }
        let rc_frames = cfg.right_context_chunks * cfg.chunk_frames;
        if right_ctx.frames() != rc_frames {
            return Err(ExtractorError::BadRightContext {
                got: right_ctx.frames(),
                expected: rc_frames,
            });
        }
        if rc_frames > 0 && right_ctx.channels() != self.n_mels {
            return Err(ExtractorError::BadChannels {
                expected: self.n_mels,
                got: right_ctx.channels(),
            });
        }

        let joined = Tensor2D::concat_frames(&[chunk, right_ctx])?;
        let x = linear(
            &joined,
            &self.input_proj_w,
            Some(&self.input_proj_b),
            cfg.d_model,
        )?;
        let mut c = x.slice_frames(0, chunk.frames());
        let mut rb = x.slice_frames(chunk.frames(), rc_frames);

        let mut new_memories: Vec<Vec<f32>> = Vec::with_capacity(cfg.layers);
        for (n, lw) in self.layers.iter().enumerate() {
            let summary = mean_pool_time(&c, c.frames())?;

            let bank = self.bank_tensor(&state.mem[n]);
            let k_mem = linear(&bank, &lw.wk, None, cfg.d_model)?;
            let v_mem = linear(&bank, &lw.wv, None, cfg.d_model)?;
            let k_cur = linear(&c, &lw.wk, None, cfg.d_model)?;
            let v_cur = linear(&c, &lw.wv, None, cfg.d_model)?;
            let k_rc = linear(&rb, &lw.wk, None, cfg.d_model)?;
            let v_rc = linear(&rb, &lw.wv, None, cfg.d_model)?;
            let k = Tensor2D::concat_frames(&[&k_mem, &state.key_cache[n], &k_cur, &k_rc])?;
            let v = Tensor2D::concat_frames(&[&v_mem, &state.val_cache[n], &v_cur, &v_rc])?;

            let q_c = linear(&c, &lw.wq, None, cfg.d_model)?;
            let attn_c = multi_head_attention(&q_c, &k, &v, cfg.heads)?;
            let q_s = linear(&summary, &lw.wq, None, cfg.d_model)?;
            let attn_s = multi_head_attention(&q_s, &k, &v, cfg.heads)?;
            new_memories.push(attn_s.frame(0));

            // cache this layer's input-chunk projections for the next chunk
            let joined_k = Tensor2D::concat_frames(&[&state.key_cache[n], &k_cur])?;
            let joined_v = Tensor2D::concat_frames(&[&state.val_cache[n], &v_cur])?;
            let keep = cfg.left_context_frames.min(joined_k.frames());
            state.key_cache[n] = joined_k.slice_frames(joined_k.frames() - keep, keep);
            state.val_cache[n] = joined_v.slice_frames(joined_v.frames() - keep, keep);

            c = self.ffn(lw, &add(&attn_c, &c)?)?;
            if rc_frames > 0 {
                let q_r = linear(&rb, &lw.wq, None, cfg.d_model)?;
                let attn_r = multi_head_attention(&q_r, &k, &v, cfg.heads)?;
                rb = self.ffn(lw, &add(&attn_r, &rb)?)?;
            }
        }

        // summaries land one layer up, visible from the next chunk onward;
        // the top layer's summary has no consumer
        for (n, m) in new_memories.into_iter().enumerate() {
            if n + 1 < cfg.layers {
                state.mem[n + 1].push_back(m);
                while state.mem[n + 1].len() > cfg.memory_slots {
                    state.mem[n + 1].pop_front();
                }
            }
        }
        state.chunk_index += 1;

        let labels = project_labels(&c, &self.classifier, cfg.classes)?;
        Ok((labels, c))
    }

    /// Drains any remaining frames at stream end: full chunks first, then one
    /// partial chunk, each seeing whatever real lookahead remains plus
    /// zero-valued padding. Empty tail is a no-op.
    pub fn flush(
        &self,
        state: &mut ExtractorState,
        tail: &Tensor2D,
    ) -> Result<ContentLabels, ExtractorError> {
        let cf = self.cfg.chunk_frames;
        let rcf = self.cfg.right_context_chunks * cf;
        let mut labels = Vec::new();
        let mut at = 0;
        while at < tail.frames() {
            let take = cf.min(tail.frames() - at);
            let chunk = tail.slice_frames(at, take);
            let avail = tail.frames() - (at + take);
            let rc_real = avail.min(rcf);
            let real = tail.slice_frames(at + take, rc_real);
            let pad = Tensor2D::zeros(self.n_mels, rcf - rc_real);
            let rc = Tensor2D::concat_frames(&[&real, &pad])?;
            labels.extend(self.process_chunk(state, &chunk, &rc)?);
            at += take;
        }
        Ok(labels)
    }
}

/// Per frame: softmax over `U · c_top`, argmax with ties toward the smallest
/// index.
pub fn project_labels(
    c_top: &Tensor2D,
    u_weight: &[f32],
    classes: usize,
) -> Result<ContentLabels, TensorError> {
    let logits = linear(c_top, u_weight, None, classes)?;
    let mut labels = Vec::with_capacity(logits.frames());
    for t in 0..logits.frames() {
        let probs = softmax(&logits.frame(t))?;
        let mut best = 0;
        for (j, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = j;
            }
        }
        labels.push(best);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, ModelConfig, WeightReader};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(chunk_frames: usize, rc_chunks: usize) -> ModelConfig {
        let mut cfg = crate::model::tiny_config();
        cfg.extractor.chunk_frames = chunk_frames;
        cfg.extractor.right_context_chunks = rc_chunks;
        cfg.session.chunk_ms = 20 * chunk_frames as u32;
        cfg.session.right_context_chunks = rc_chunks;
        cfg
    }

    fn build(cfg: &ModelConfig, seed: u64) -> Extractor {
        let weights = init_weights(cfg, seed).unwrap();
        let mut reader = WeightReader::new(&weights);
        Extractor::from_reader(&cfg.extractor, cfg.mel.n_mels, &mut reader).unwrap()
    }

    fn random_frames(channels: usize, frames: usize, rng: &mut ChaCha8Rng) -> Tensor2D {
        let data = (0..channels * frames)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor2D::from_data(channels, frames, data).unwrap()
    }

    /// Splits a stream of `total` frames into the (chunk, right-context)
    /// pairs the pipeline would feed: chunk i's lookahead is the next
    /// `rc_chunks * cf` real frames, zero-padded at stream end.
    fn chunk_calls(
        mel: &Tensor2D,
        cf: usize,
        rc_chunks: usize,
    ) -> Vec<(Tensor2D, Tensor2D)> {
        let rcf = rc_chunks * cf;
        let mut calls = Vec::new();
        let mut at = 0;
        while at < mel.frames() {
            let take = cf.min(mel.frames() - at);
            let chunk = mel.slice_frames(at, take);
            let avail = mel.frames() - (at + take);
            let rc_real = avail.min(rcf);
            let real = mel.slice_frames(at + take, rc_real);
            let pad = Tensor2D::zeros(mel.channels(), rcf - rc_real);
            let rc = Tensor2D::concat_frames(&[&real, &pad]).unwrap();
            calls.push((chunk, rc));
            at += take;
        }
        calls
    }

    #[test]
    fn fresh_state_is_empty_and_reproducible() {
        let cfg = small_cfg(2, 1);
        let ext = build(&cfg, 0);
        let a = ext.new_state();
        let b = ext.new_state();
        assert_eq!(a, b);
        assert_eq!(a.chunk_index(), 0);
        for n in 0..cfg.extractor.layers {
            assert_eq!(a.memory_len(n), 0);
            assert_eq!(a.cached_left_frames(n), 0);
        }
    }

    #[test]
    fn one_chunk_populates_upper_banks_only() {
        let cfg = small_cfg(2, 0);
        let ext = build(&cfg, 1);
        let mut state = ext.new_state();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let chunk = random_frames(cfg.mel.n_mels, 2, &mut rng);
        let rc = Tensor2D::zeros(cfg.mel.n_mels, 0);
        let labels = ext.process_chunk(&mut state, &chunk, &rc).unwrap();
        assert_eq!(labels.len(), 2);
        assert!(labels.iter().all(|&l| l < cfg.extractor.classes));
        assert_eq!(state.chunk_index(), 1);
        assert_eq!(state.memory_len(0), 0);
        for n in 1..cfg.extractor.layers {
            assert_eq!(state.memory_len(n), 1.min(cfg.extractor.memory_slots));
        }
        assert_eq!(state.cached_left_frames(0), 2);
    }

    #[test]
    fn memory_bank_respects_capacity_and_zero_slots_work() {
        for slots in [0, 2] {
            let mut cfg = small_cfg(1, 0);
            cfg.extractor.memory_slots = slots;
            let ext = build(&cfg, 2);
            let mut state = ext.new_state();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..6 {
                let chunk = random_frames(cfg.mel.n_mels, 1, &mut rng);
                let rc = Tensor2D::zeros(cfg.mel.n_mels, 0);
                ext.process_chunk(&mut state, &chunk, &rc).unwrap();
                for n in 0..cfg.extractor.layers {
                    assert!(state.memory_len(n) <= slots);
                }
            }
            assert_eq!(
                state.cached_left_frames(0),
                cfg.extractor.left_context_frames.min(6)
            );
        }
    }

    #[test]
    fn label_projection_examples() {
        // row layout: classes × d_model with d_model = 1 reads logits directly
        let c = Tensor2D::from_data(1, 1, vec![1.0]).unwrap();
        let u = vec![0.1, 2.0, -1.0];
        assert_eq!(project_labels(&c, &u, 3).unwrap(), vec![1]);

        let zero_u = vec![0.0; 3];
        assert_eq!(project_labels(&c, &zero_u, 3).unwrap(), vec![0]);

        // random logits against brute-force argmax
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c5 = random_frames(4, 5, &mut rng);
        let u5: Vec<f32> = (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = project_labels(&c5, &u5, 3).unwrap();
        let logits = linear(&c5, &u5, None, 3).unwrap();
        for t in 0..5 {
            let frame = logits.frame(t);
            let mut best = 0;
            for j in 1..3 {
                if frame[j] > frame[best] {
                    best = j;
                }
            }
            assert_eq!(got[t], best);
        }
    }

    #[test]
    fn degenerate_classifier_gives_label_zero_everywhere() {
        let cfg = small_cfg(2, 1);
        let ext = build(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c_top = random_frames(cfg.extractor.d_model, 7, &mut rng);
        let zero_u = vec![0.0; cfg.extractor.classes * cfg.extractor.d_model];
        let labels = project_labels(&c_top, &zero_u, cfg.extractor.classes).unwrap();
        assert_eq!(labels, vec![0; 7]);
        drop(ext);
    }

    /// From-scratch re-execution of the whole recurrence: no carried caches,
    /// every chunk rebuilds its memory bank and left context from recorded
    /// layer inputs.
    fn oracle_labels(
        ext: &Extractor,
        calls: &[(Tensor2D, Tensor2D)],
    ) -> Vec<ContentLabels> {
        let cfg = &ext.cfg;
        let n_layers = cfg.layers;
        // layer_inputs[n][i] = the chunk block entering layer n at chunk i
        let mut layer_inputs: Vec<Vec<Tensor2D>> = vec![Vec::new(); n_layers];
        // summaries[n][i] = memory vector produced for layer n at chunk i
        let mut summaries: Vec<Vec<Vec<f32>>> = vec![Vec::new(); n_layers];
        let mut all_labels = Vec::new();

        for (chunk, rc) in calls {
            let joined = Tensor2D::concat_frames(&[chunk, rc]).unwrap();
            let x = linear(&joined, &ext.input_proj_w, Some(&ext.input_proj_b), cfg.d_model)
                .unwrap();
            let mut c = x.slice_frames(0, chunk.frames());
            let mut rb = x.slice_frames(chunk.frames(), rc.frames());
            let mut produced: Vec<Vec<f32>> = Vec::new();

            for (n, lw) in ext.layers.iter().enumerate() {
                layer_inputs[n].push(c.clone());
                let summary = mean_pool_time(&c, c.frames()).unwrap();

                // memory bank: newest memory_slots summaries destined for
                // this layer, oldest first
                let bank_src = &summaries[n];
                let start = bank_src.len().saturating_sub(cfg.memory_slots);
                let mut bank = Tensor2D::zeros(cfg.d_model, bank_src.len() - start);
                for (i, m) in bank_src[start..].iter().enumerate() {
                    for (ch, &v) in m.iter().enumerate() {
                        bank.set(ch, i, v);
                    }
                }
                if cfg.memory_slots == 0 {
                    bank = Tensor2D::zeros(cfg.d_model, 0);
                }

                // left context: last L frames of all previous chunk inputs
                let history = &layer_inputs[n][..layer_inputs[n].len() - 1];
                let refs: Vec<&Tensor2D> = history.iter().collect();
                let hist = if refs.is_empty() {
                    Tensor2D::zeros(cfg.d_model, 0)
                } else {
                    Tensor2D::concat_frames(&refs).unwrap()
                };
                let keep = cfg.left_context_frames.min(hist.frames());
                let left = hist.slice_frames(hist.frames() - keep, keep);

                let k_mem = linear(&bank, &lw.wk, None, cfg.d_model).unwrap();
                let v_mem = linear(&bank, &lw.wv, None, cfg.d_model).unwrap();
                let k_left = linear(&left, &lw.wk, None, cfg.d_model).unwrap();
                let v_left = linear(&left, &lw.wv, None, cfg.d_model).unwrap();
                let k_cur = linear(&c, &lw.wk, None, cfg.d_model).unwrap();
                let v_cur = linear(&c, &lw.wv, None, cfg.d_model).unwrap();
                let k_rc = linear(&rb, &lw.wk, None, cfg.d_model).unwrap();
                let v_rc = linear(&rb, &lw.wv, None, cfg.d_model).unwrap();
                let k = Tensor2D::concat_frames(&[&k_mem, &k_left, &k_cur, &k_rc]).unwrap();
                let v = Tensor2D::concat_frames(&[&v_mem, &v_left, &v_cur, &v_rc]).unwrap();

                let q_c = linear(&c, &lw.wq, None, cfg.d_model).unwrap();
                let attn_c = multi_head_attention(&q_c, &k, &v, cfg.heads).unwrap();
                let q_s = linear(&summary, &lw.wq, None, cfg.d_model).unwrap();
                let attn_s = multi_head_attention(&q_s, &k, &v, cfg.heads).unwrap();
                produced.push(attn_s.frame(0));

                c = ext.ffn(lw, &add(&attn_c, &c).unwrap()).unwrap();
                if rb.frames() > 0 {
                    let q_r = linear(&rb, &lw.wq, None, cfg.d_model).unwrap();
                    let attn_r = multi_head_attention(&q_r, &k, &v, cfg.heads).unwrap();
                    rb = ext.ffn(lw, &add(&attn_r, &rb).unwrap()).unwrap();
                }
            }
            for (n, m) in produced.into_iter().enumerate() {
                if n + 1 < n_layers {
                    summaries[n + 1].push(m);
                }
            }
            all_labels.push(project_labels(&c, &ext.classifier, cfg.classes).unwrap());
        }
        all_labels
    }

    #[test]
    fn sequential_chunks_match_recurrence_oracle() {
        for seed in 0..12u64 {
            let (cf, rc_chunks, slots) = match seed % 4 {
                0 => (2, 1, 2),
                1 => (1, 0, 2),
                2 => (2, 2, 0),
                _ => (3, 1, 1),
            };
            let mut cfg = small_cfg(cf, rc_chunks);
            cfg.extractor.memory_slots = slots;
            let ext = build(&cfg, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let mel = random_frames(cfg.mel.n_mels, cf * 4, &mut rng);
            let calls = chunk_calls(&mel, cf, rc_chunks);
            assert_eq!(calls.len(), 4);

            let mut state = ext.new_state();
            let streamed: Vec<ContentLabels> = calls
                .iter()
                .map(|(chunk, rc)| ext.process_chunk(&mut state, chunk, rc).unwrap())
                .collect();
            let oracle = oracle_labels(&ext, &calls);
            assert_eq!(streamed, oracle, "seed {seed}");
        }
    }

    #[test]
    fn lookahead_bound_holds() {
        for (rc_chunks, seed) in [(0usize, 21u64), (1, 22), (2, 23)] {
            let cf = 2;
            let cfg = small_cfg(cf, rc_chunks);
            let ext = build(&cfg, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mel = random_frames(cfg.mel.n_mels, cf * 6, &mut rng);

            let run = |mel: &Tensor2D| -> Vec<ContentLabels> {
                let mut state = ext.new_state();
                chunk_calls(mel, cf, rc_chunks)
                    .iter()
                    .map(|(c, r)| ext.process_chunk(&mut state, c, r).unwrap())
                    .collect()
            };
            let base = run(&mel);

            // perturb a frame of chunk 4
            let mut poked = mel.clone();
            poked.set(0, 4 * cf, poked.get(0, 4 * cf) + 1.0);
            let changed = run(&poked);

            // chunks i with i + rc_chunks < 4 must be unaffected
            for i in 0..6 {
                if i + rc_chunks < 4 {
                    assert_eq!(base[i], changed[i], "chunk {i}, rc {rc_chunks}");
                }
            }
        }
    }

    #[test]
    fn prefix_of_longer_stream_is_reproduced() {
        let cf = 2;
        let cfg = small_cfg(cf, 1);
        let ext = build(&cfg, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mel = random_frames(cfg.mel.n_mels, cf * 5, &mut rng);
        let calls = chunk_calls(&mel, cf, 1);

        let mut full_state = ext.new_state();
        let full: Vec<ContentLabels> = calls
            .iter()
            .map(|(c, r)| ext.process_chunk(&mut full_state, c, r).unwrap())
            .collect();

        let mut prefix_state = ext.new_state();
        for (i, (c, r)) in calls.iter().take(3).enumerate() {
            let labels = ext.process_chunk(&mut prefix_state, c, r).unwrap();
            assert_eq!(labels, full[i]);
        }
    }

    #[test]
    fn flush_handles_partial_tails() {
        let cf = 4;
        let cfg = small_cfg(cf, 1);
        let ext = build(&cfg, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(41);

        // empty tail → empty labels, state untouched
        let mut state = ext.new_state();
        let empty = Tensor2D::zeros(cfg.mel.n_mels, 0);
        assert_eq!(ext.flush(&mut state, &empty).unwrap(), vec![]);
        assert_eq!(state.chunk_index(), 0);

        // 1-frame tail → exactly 1 label
        let one = random_frames(cfg.mel.n_mels, 1, &mut rng);
        assert_eq!(ext.flush(&mut state, &one).unwrap().len(), 1);

        // flushing again with nothing left returns empty
        assert_eq!(ext.flush(&mut state, &empty).unwrap(), vec![]);

        // a 6-frame tail = one full + one partial chunk
        let mut state2 = ext.new_state();
        let six = random_frames(cfg.mel.n_mels, 6, &mut rng);
        assert_eq!(ext.flush(&mut state2, &six).unwrap().len(), 6);
        assert_eq!(state2.chunk_index(), 2);
    }

    #[test]
    fn flush_equals_streamed_calls() {
        let cf = 2;
        let rc_chunks = 1;
        let cfg = small_cfg(cf, rc_chunks);
        let ext = build(&cfg, 51);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mel = random_frames(cfg.mel.n_mels, 7, &mut rng);

        let mut streamed_state = ext.new_state();
        let mut streamed = Vec::new();
        for (c, r) in chunk_calls(&mel, cf, rc_chunks) {
            streamed.extend(ext.process_chunk(&mut streamed_state, &c, &r).unwrap());
        }

        let mut flush_state = ext.new_state();
        let flushed = ext.flush(&mut flush_state, &mel).unwrap();
        assert_eq!(flushed, streamed);
    }

    #[test]
    fn input_validation_errors() {
        let cfg = small_cfg(2, 1);
        let ext = build(&cfg, 61);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut state = ext.new_state();
        let good_chunk = random_frames(cfg.mel.n_mels, 2, &mut rng);
        let good_rc = random_frames(cfg.mel.n_mels, 2, &mut rng);

        let long = random_frames(cfg.mel.n_mels, 3, &mut rng);
        assert!(matches!(
            ext.process_chunk(&mut state, &long, &good_rc),
            Err(ExtractorError::BadChunkFrames { got: 3, max: 2 })
        ));

        let short_rc = random_frames(cfg.mel.n_mels, 1, &mut rng);
        assert!(matches!(
            ext.process_chunk(&mut state, &good_chunk, &short_rc),
            Err(ExtractorError::BadRightContext { got: 1, expected: 2 })
        ));

        let bad_channels = random_frames(cfg.mel.n_mels + 1, 2, &mut rng);
        assert!(matches!(
            ext.process_chunk(&mut state, &bad_channels, &good_rc),
            Err(ExtractorError::BadChannels { .. })
        ));

        // state built for a different layer count
        let mut other_cfg = small_cfg(2, 1);
        other_cfg.extractor.layers = 1;
        let other = build(&other_cfg, 61);
        let mut foreign = other.new_state();
        assert!(matches!(
            ext.process_chunk(&mut foreign, &good_chunk, &good_rc),
            Err(ExtractorError::StateMismatch)
        ));
    }
}
