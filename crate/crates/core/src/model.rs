//! The whole model: single-modal embedders, joint encoder, pretraining heads and decoder.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{generate_answer, AnswerDecoder, AnswerSequence};
use crate::encoder::{joint_mask, JointEmbedding, JointEncoder};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::image::{raw_features, Backbone, BackboneConfig, BackboneKind, PatchEmbedder, Visual};
use crate::nn::{Ctx, Mlp};
use crate::params::{Builder, ParamSet};
use crate::text::{TextEmbedder, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub vocab_size: usize,
    pub word_dim: usize,
    pub model_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub ffn_dim: usize,
    pub text_len: usize,
    pub max_answer_len: usize,
}

impl ModelConfig {
    /// Sizes of record: 299² input, 8×8×2048 features, 40 tokens, 300-D words, 128-D model,
    /// 8 layers and 8 heads on both sides. Needs precomputed features.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            backbone: BackboneConfig { kind: BackboneKind::Precomputed, image_size: 299, grid: 8, feature_dim: 2048, hidden_channels: vec![], trainable: true },
            vocab_size,
            word_dim: 300,
            model_dim: 128,
            encoder_layers: 8,
            encoder_heads: 8,
            decoder_layers: 8,
            decoder_heads: 8,
            ffn_dim: 512,
            text_len: 40,
            max_answer_len: 20,
        }
    }

    /// CPU-sized profile: 32² images on a 4×4 grid, d = 64, two layers with two heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            backbone: BackboneConfig { kind: BackboneKind::TinyConv, image_size: 32, grid: 4, feature_dim: 32, hidden_channels: vec![16, 32], trainable: true },
            vocab_size,
            word_dim: 32,
            model_dim: 64,
            encoder_layers: 2,
            encoder_heads: 2,
            decoder_layers: 2,
            decoder_heads: 2,
            ffn_dim: 256,
            text_len: 16,
            max_answer_len: 8,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.backbone.num_patches()
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1 + self.text_len
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        for (what, heads) in [("encoder", self.encoder_heads), ("decoder", self.decoder_heads)] {
            if heads == 0 || self.model_dim % heads != 0 {
                return Err(Error::Invalid(format!("model_dim {} not divisible by {what} heads {heads}", self.model_dim)));
            }
        }
        if self.vocab_size < 7 || self.text_len == 0 || self.max_answer_len == 0 || self.word_dim == 0 {
            return Err(Error::Invalid("vocab_size, text_len, max_answer_len and word_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Which sub-networks a parameter set carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parts {
    /// Joint encoder transformer blocks. `false` is the bypass ablation arm.
    pub encoder_blocks: bool,
    pub pretrain_heads: bool,
    pub decoder: bool,
}

impl Parts {
    pub const PRETRAIN: Parts = Parts { encoder_blocks: true, pretrain_heads: true, decoder: false };
    pub const VQA: Parts = Parts { encoder_blocks: true, pretrain_heads: false, decoder: true };
    pub const VQA_BYPASS: Parts = Parts { encoder_blocks: false, pretrain_heads: false, decoder: true };
    pub const ALL: Parts = Parts { encoder_blocks: true, pretrain_heads: true, decoder: true };
}

/// Masked-word, masked-feature and image-text-matching heads.
#[derive(Debug, Clone)]
pub struct TaskHeads {
    pub mwp: Mlp,
    pub mfr: Mlp,
    pub itm: Mlp,
}

impl TaskHeads {
    pub fn new<F: Float>(b: &mut Builder<F>, dim: usize, vocab_size: usize, feature_dim: usize) -> Result<Self> {
        Ok(Self {
            mwp: Mlp::new(b, "heads.mwp", dim, dim, vocab_size)?,
            mfr: Mlp::new(b, "heads.mfr", dim, dim, feature_dim)?,
            itm: Mlp::new(b, "heads.itm", dim, dim, 1)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct VqaModel {
    pub config: ModelConfig,
    pub parts: Parts,
    pub backbone: Option<Backbone>,
    pub text: TextEmbedder,
    pub patches: PatchEmbedder,
    pub encoder: JointEncoder,
    pub heads: Option<TaskHeads>,
    pub decoder: Option<AnswerDecoder>,
}

/// Graph nodes of an encoded batch.
pub struct EncodedBatch {
    /// `B·L × d` joint embedding (or the bypassed assembly).
    pub out: Var,
    pub masks: Vec<Vec<bool>>,
    pub attention: Vec<Var>,
}

impl VqaModel {
    fn build<F: Float>(b: &mut Builder<F>, config: &ModelConfig, parts: Parts) -> Result<Self> {
        config.validate()?;
        let c = config;
        let backbone = match c.backbone.kind {
            BackboneKind::TinyConv => Some(Backbone::new(b, &c.backbone)?),
            BackboneKind::Precomputed => None,
        };
        let text = TextEmbedder::new(b, c.vocab_size, c.word_dim, c.model_dim)?;
        let patches = PatchEmbedder::new(b, c.backbone.feature_dim, c.model_dim)?;
        let encoder = JointEncoder::new(b, c.model_dim, c.encoder_layers, c.encoder_heads, c.ffn_dim, c.num_patches(), c.text_len, parts.encoder_blocks)?;
        let heads = if parts.pretrain_heads { Some(TaskHeads::new(b, c.model_dim, c.vocab_size, c.backbone.feature_dim)?) } else { None };
        let decoder = if parts.decoder {
            Some(AnswerDecoder::new(b, c.model_dim, c.decoder_layers, c.decoder_heads, c.ffn_dim, c.vocab_size, c.max_answer_len)?)
        } else {
            None
        };
        Ok(Self { config: config.clone(), parts, backbone, text, patches, encoder, heads, decoder })
    }

    /// Fresh parameters: truncated-normal weights, zero biases, unit norm scales.
    pub fn init<F: Float>(config: &ModelConfig, parts: Parts, seed: u64) -> Result<(Self, ParamSet<F>)> {
        let mut params = ParamSet::new();
        let model = Self::build(&mut Builder::init(&mut params, ChaCha8Rng::seed_from_u64(seed)), config, parts)?;
        Ok((model, params))
    }

    /// Resolve the model against existing parameters, checking every name and shape.
    pub fn bind<F: Float>(config: &ModelConfig, parts: Parts, params: &mut ParamSet<F>) -> Result<Self> {
        Self::build(&mut Builder::bind(params), config, parts)
    }

    pub fn heads(&self) -> Result<&TaskHeads> {
        self.heads.as_ref().ok_or_else(|| Error::Invalid("model has no pretraining heads".into()))
    }

    pub fn decoder(&self) -> Result<&AnswerDecoder> {
        self.decoder.as_ref().ok_or_else(|| Error::Invalid("model has no decoder".into()))
    }

    /// Raw `B·M × d_v` features for a batch of visuals.
    pub fn raw_features<F: Float>(&self, g: &mut Graph<F>, visuals: &[&Visual]) -> Result<Var> {
        raw_features(g, self.backbone.as_ref(), visuals, &self.config.backbone)
    }

    /// Embed both modalities, assemble, and run the encoder (or bypass it).
    pub fn encode_raw<F: Float>(&self, g: &mut Graph<F>, raw: Var, texts: &[&TokenSequence], ctx: &mut Ctx) -> Result<EncodedBatch> {
        let batch = texts.len();
        if let Some(t) = texts.iter().find(|t| t.len() != self.config.text_len) {
            return Err(Error::Shape(format!("text of length {} vs configured {}", t.len(), self.config.text_len)));
        }
        let patch_emb = self.patches.forward(g, raw);
        let ids: Vec<u32> = texts.iter().flat_map(|t| t.ids.iter().copied()).collect();
        let tok_emb = self.text.forward(g, &ids);
        let x = self.encoder.assemble(g, patch_emb, tok_emb, batch)?;
        let masks: Vec<Vec<bool>> = texts.iter().map(|t| joint_mask(self.config.num_patches(), &t.pad_mask)).collect();
        if self.encoder.has_blocks() {
            let trace = self.encoder.encode(g, x, &masks, ctx)?;
            Ok(EncodedBatch { out: trace.out, masks, attention: trace.attention })
        } else {
            Ok(EncodedBatch { out: x, masks, attention: Vec::new() })
        }
    }

    pub fn encode_batch<F: Float>(&self, g: &mut Graph<F>, visuals: &[&Visual], texts: &[&TokenSequence], ctx: &mut Ctx) -> Result<EncodedBatch> {
        if visuals.len() != texts.len() {
            return Err(Error::Shape(format!("{} visuals for {} texts", visuals.len(), texts.len())));
        }
        let raw = self.raw_features(g, visuals)?;
        self.encode_raw(g, raw, texts, ctx)
    }

    /// Joint embedding of one image-text pair in eval mode.
    pub fn embed<F: Float>(&self, params: &ParamSet<F>, visual: &Visual, text: &TokenSequence) -> Result<JointEmbedding<F>> {
        let mut g = Graph::new(params);
        let enc = self.encode_batch(&mut g, &[visual], &[text], &mut Ctx::eval())?;
        Ok(JointEmbedding {
            values: g.value(enc.out).clone(),
            attention_mask: enc.masks.into_iter().next().expect("one example"),
            num_patches: self.config.num_patches(),
        })
    }

    /// Teacher-forced VQA loss for a batch: returns the loss node.
    pub fn vqa_forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        visuals: &[&Visual],
        questions: &[&TokenSequence],
        answers: &[&AnswerSequence],
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let decoder = self.decoder()?;
        let enc = self.encode_batch(g, visuals, questions, ctx)?;
        let inputs: Vec<Vec<u32>> = answers.iter().map(|a| a.decoder_input()).collect();
        let logits = decoder.forward(g, &self.text, enc.out, &enc.masks, &inputs, ctx)?;
        crate::decoder::vqa_loss(g, logits, answers)
    }

    /// Greedy answer for one image-question pair.
    pub fn answer<F: Float>(&self, params: &ParamSet<F>, visual: &Visual, question: &TokenSequence, max_len: usize) -> Result<AnswerSequence> {
        let memory = self.embed(params, visual, question)?;
        generate_answer(self.decoder()?, &self.text, params, &memory, max_len)
    }
}

/// Convert an f32 matrix into the graph's float type.
pub fn to_float<F: Float>(m: &Array2<f32>) -> Array2<F> {
    m.mapv(|x| F::lit(x as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parts_control_parameter_names() {
        let cfg = ModelConfig::desk(20);
        let (_, pre) = VqaModel::init::<f32>(&cfg, Parts::PRETRAIN, 0).unwrap();
        assert!(pre.names().all(|n| !n.starts_with("decoder.")));
        assert!(pre.names().any(|n| n.starts_with("heads.")));
        let (_, by) = VqaModel::init::<f32>(&cfg, Parts::VQA_BYPASS, 0).unwrap();
        assert!(by.names().all(|n| !n.starts_with("encoder.layer")));
        assert!(by.names().any(|n| n == "encoder.pos"));
    }

    #[test]
    fn init_is_deterministic_and_bindable() {
        let cfg = ModelConfig::desk(20);
        let (_, a) = VqaModel::init::<f32>(&cfg, Parts::ALL, 42).unwrap();
        let (_, b) = VqaModel::init::<f32>(&cfg, Parts::ALL, 42).unwrap();
        for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
        }
        let mut a = a;
        assert!(VqaModel::bind(&cfg, Parts::ALL, &mut a).is_ok());
        let bigger = ModelConfig { model_dim: 32, ..cfg };
        assert!(VqaModel::bind(&bigger, Parts::ALL, &mut a).is_err());
    }

    #[test]
    fn norm_scales_start_at_one() {
        let (_, ps) = VqaModel::init::<f32>(&ModelConfig::desk(20), Parts::ALL, 1).unwrap();
        for (_, p) in ps.iter().filter(|(_, p)| p.name.ends_with(".scale")) {
            assert!(p.value.iter().all(|&x| x == 1.0), "{}", p.name);
        }
        for (_, p) in ps.iter().filter(|(_, p)| p.name.ends_with(".bias")) {
            assert!(p.value.iter().all(|&x| x == 0.0), "{}", p.name);
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = ModelConfig { encoder_heads: 3, ..ModelConfig::desk(20) };
        assert!(VqaModel::init::<f32>(&cfg, Parts::ALL, 0).is_err());
    }
}
