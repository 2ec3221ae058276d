//! Frozen understanding expert: a seeded transformer over history scene tokens and a text
//! segment, publishing its per-layer keys and values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv_cache::LayerKvCache;
use crate::masking::{build_mask, AttentionLayout, Segment, Task};
use crate::numeric::{LayerNorm, ParamId, ParamStore, Real, Tape, Tensor, TransformerLayer, Var, LAYERNORM_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct UeConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub tokens_per_frame: usize,
    pub max_frames: usize,
    pub max_prompt: usize,
    pub text_vocab: usize,
    pub reasoning_len: usize,
    pub seed: u64,
}

/// Scene tokens of `frames` consecutive frames plus prompt token ids.
#[derive(Clone, Debug)]
pub struct UnderstandingInput<T: Real = f64> {
    pub scene: Tensor<T>,
    pub frames: usize,
    pub prompt: Vec<usize>,
}

impl<T: Real> UnderstandingInput<T> {
    /// Stacks per-frame RGB grids.
    pub fn from_frames(frames: &[Tensor<f32>], prompt: &[usize]) -> Result<Self> {
        let parts: Vec<&Tensor<f32>> = frames.iter().collect();
        let scene = Tensor::concat_rows(&parts)?.cast();
        Ok(Self {
            scene,
            frames: frames.len(),
            prompt: prompt.to_vec(),
        })
    }
}

/// Cache plus the final hidden states of the reasoning tokens.
#[derive(Clone, Debug)]
pub struct Encoded<T: Real = f64> {
    pub cache: LayerKvCache<T>,
    pub reasoning: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct UnderstandingExpert<T: Real = f64> {
    pub cfg: UeConfig,
    store: ParamStore<T>,
    position: ParamId,
    text: ParamId,
    reasoning: Option<ParamId>,
    layers: Vec<TransformerLayer>,
    final_ln: LayerNorm,
}

/// Fixed prompt used by the data pipeline.
pub fn default_prompt(len: usize) -> Vec<usize> {
    (1..=len).collect()
}

impl UnderstandingExpert<f64> {
    /// Builds the expert from its seed. Every parameter is frozen.
    pub fn new(cfg: UeConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.width;
        let position = store.add_randn("ue.position", cfg.max_frames * cfg.tokens_per_frame, d, 0.1, false, &mut rng);
        let text = store.add_randn("ue.text", cfg.text_vocab, d, 1.0, false, &mut rng);
        let reasoning = (cfg.reasoning_len > 0)
            .then(|| store.add_randn("ue.reasoning", cfg.reasoning_len, d, 1.0, false, &mut rng));
        let layers = (0..cfg.layers)
            .map(|l| TransformerLayer::new(&mut store, &format!("ue.layer{l}"), d, cfg.ffn_width, false, &mut rng))
            .collect();
        let final_ln = LayerNorm::new(&mut store, "ue.final_ln", d, false);
        Self {
            cfg,
            store,
            position,
            text,
            reasoning,
            layers,
            final_ln,
        }
    }
}

impl<T: Real> UnderstandingExpert<T> {
    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn cast<U: Real>(&self) -> UnderstandingExpert<U> {
        UnderstandingExpert {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            position: self.position,
            text: self.text,
            reasoning: self.reasoning,
            layers: self.layers.clone(),
            final_ln: self.final_ln,
        }
    }

    /// Byte-level digest of all weights.
    pub fn digest(&self) -> String {
        self.store.digest()
    }

    pub fn layers(&self) -> &[TransformerLayer] {
        &self.layers
    }

    /// `[Scene | Text]`, with the prompt and reasoning tokens in one causal text segment.
    pub fn layout(&self, scene_len: usize, prompt_len: usize) -> AttentionLayout {
        AttentionLayout::new(vec![
            Segment::bidirectional(Task::Scene, scene_len),
            Segment::causal(Task::Text, prompt_len + self.cfg.reasoning_len),
        ])
        .expect("scene then text is rank-ordered")
    }

    /// Multiply-accumulates of one encode.
    pub fn macs(&self, scene_len: usize, prompt_len: usize) -> u64 {
        let n = scene_len + prompt_len + self.cfg.reasoning_len;
        self.cfg.layers as u64 * TransformerLayer::macs(self.cfg.width, self.cfg.ffn_width, n, n)
    }

    /// Embedded token rows and their layout, recorded on `tape`.
    pub(crate) fn embed(&self, tape: &mut Tape<T>, input: &UnderstandingInput<T>) -> Result<(Var, AttentionLayout)> {
        let d = self.cfg.width;
        let s = input.scene.rows();
        if input.scene.cols() != d {
            return Err(Error::Shape {
                op: "understanding input width",
                lhs: input.scene.shape(),
                rhs: (s, d),
            });
        }
        if s > self.cfg.max_frames * self.cfg.tokens_per_frame {
            return Err(Error::Config(format!(
                "{s} scene tokens exceed {} frames of {}",
                self.cfg.max_frames, self.cfg.tokens_per_frame
            )));
        }
        if input.prompt.len() > self.cfg.max_prompt {
            return Err(Error::Config(format!(
                "prompt of {} tokens exceeds the maximum {}",
                input.prompt.len(),
                self.cfg.max_prompt
            )));
        }
        let mut parts = Vec::with_capacity(3);
        let pos = self.store.value(self.position).slice_rows(0, s)?;
        parts.push(tape.constant(input.scene.add(&pos)?)?);
        if !input.prompt.is_empty() {
            let table = self.store.value(self.text);
            let mut rows = Vec::with_capacity(input.prompt.len() * d);
            for (position, &id) in input.prompt.iter().enumerate() {
                if id >= table.rows() {
                    return Err(Error::VocabularyRange { position, token: id });
                }
                rows.extend_from_slice(table.row(id));
            }
            parts.push(tape.constant(Tensor::from_vec(input.prompt.len(), d, rows)?)?);
        }
        if let Some(r) = self.reasoning {
            parts.push(tape.param(&self.store, r)?);
        }
        let x = tape.concat_rows(&parts)?;
        Ok((x, self.layout(s, input.prompt.len())))
    }

    pub(crate) fn final_norm(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.final_ln.forward(tape, &self.store, x, T::from_f64c(LAYERNORM_EPS))
    }

    /// Runs all layers, returning every layer's keys and values and the reasoning states.
    pub fn encode(&self, input: &UnderstandingInput<T>, epoch: u64) -> Result<Encoded<T>> {
        let mut tape = Tape::new();
        let (mut x, layout) = self.embed(&mut tape, input)?;
        let mask = build_mask(&layout);
        let eps = T::from_f64c(LAYERNORM_EPS);
        let scale = T::from_f64c(1.0 / (self.cfg.width as f64).sqrt());
        let mut kv = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (q, lkv) = layer.project(&mut tape, &self.store, x, eps)?;
            kv.push((tape.value(lkv.keys).clone(), tape.value(lkv.values).clone()));
            x = layer.finish(&mut tape, &self.store, x, q, lkv.keys, lkv.values, &mask, self.cfg.heads, scale, eps)?;
        }
        let h = self.final_norm(&mut tape, x)?;
        let n = layout.len();
        let r = self.cfg.reasoning_len;
        let reasoning = tape.value(h).slice_rows(n - r, r)?;
        Ok(Encoded {
            cache: LayerKvCache::new(epoch, self.cfg.width, layout, kv)?.with_reasoning(reasoning.clone())?,
            reasoning,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(reasoning_len: usize) -> UeConfig {
        UeConfig {
            width: 8,
            layers: 2,
            heads: 2,
            ffn_width: 16,
            tokens_per_frame: 3,
            max_frames: 4,
            max_prompt: 4,
            text_vocab: 8,
            reasoning_len,
            seed: 11,
        }
    }

    fn input(prompt: &[usize]) -> UnderstandingInput<f64> {
        UnderstandingInput {
            scene: Tensor::from_fn(6, 8, |i, j| ((i * 8 + j) as f64 * 0.37).sin()),
            frames: 2,
            prompt: prompt.to_vec(),
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let ue = UnderstandingExpert::new(cfg(2));
        let a = ue.encode(&input(&[1, 2]), 0).unwrap();
        let b = UnderstandingExpert::new(cfg(2)).encode(&input(&[1, 2]), 0).unwrap();
        assert_eq!(a.cache, b.cache);
        assert_eq!(a.reasoning, b.reasoning);
        assert_eq!(a.cache.layer_count(), 2);
        assert_eq!(a.cache.scene_len(), 6 + 2 + 2);
    }

    #[test]
    fn empty_prompt_leaves_scene_only() {
        let ue = UnderstandingExpert::new(cfg(0));
        let e = ue.encode(&input(&[]), 5).unwrap();
        assert_eq!(e.cache.scene_len(), 6);
        assert_eq!(e.cache.epoch(), 5);
        assert_eq!(e.reasoning.rows(), 0);
    }

    #[test]
    fn width_mismatch_rejected() {
        let ue = UnderstandingExpert::new(cfg(1));
        let bad = UnderstandingInput {
            scene: Tensor::zeros(3, 7),
            frames: 1,
            prompt: vec![],
        };
        assert!(matches!(ue.encode(&bad, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn all_parameters_frozen() {
        let ue = UnderstandingExpert::new(cfg(2));
        assert!(ue.store().iter().all(|p| !p.trainable));
    }

    #[test]
    fn reasoning_reads_prompt() {
        let ue = UnderstandingExpert::new(cfg(2));
        let a = ue.encode(&input(&[1]), 0).unwrap();
        let b = ue.encode(&input(&[2]), 0).unwrap();
        assert_ne!(a.reasoning, b.reasoning);
    }
}
