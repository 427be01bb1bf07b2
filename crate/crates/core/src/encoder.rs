//! Dual-modal sequence assembly and the self-attention joint encoder.
//!
//! Layout of one sequence: `M` patch rows, one `[CLS]` row at index `M`, then `N` token rows.
//! Learned position embeddings (one per flat index) and segment embeddings (image, cls, text)
//! are added row by row. Padded token rows are excluded from attention as keys.

use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{AttnBlock, AttnLayout, Graph, Var};
use crate::nn::{check_finite, Ctx, LayerNorm, Mlp, MultiHeadAttention};
use crate::params::{Builder, ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Image = 0,
    Cls = 1,
    Text = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSequence<F> {
    pub embedding: Array2<F>,
    pub segments: Vec<Segment>,
    pub attention_mask: Vec<bool>,
    pub num_patches: usize,
}

impl<F> JointSequence<F> {
    pub fn cls_index(&self) -> usize {
        self.num_patches
    }
}

/// Contextualized `L × d` output of the encoder (or the bypassed assembly).
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding<F> {
    pub values: Array2<F>,
    pub attention_mask: Vec<bool>,
    pub num_patches: usize,
}

/// Attention mask over one joint sequence: image and `[CLS]` always visible, text as padded.
pub fn joint_mask(num_patches: usize, token_pad_mask: &[bool]) -> Vec<bool> {
    let mut m = vec![true; num_patches + 1];
    m.extend_from_slice(token_pad_mask);
    m
}

pub fn segments(num_patches: usize, text_len: usize) -> Vec<Segment> {
    let mut s = vec![Segment::Image; num_patches];
    s.push(Segment::Cls);
    s.extend(std::iter::repeat_n(Segment::Text, text_len));
    s
}

/// One self-attention problem per sequence, each `seq_len` rows long.
pub fn self_attention_layout(heads: usize, seq_len: usize, masks: &[Vec<bool>]) -> Arc<AttnLayout> {
    Arc::new(AttnLayout {
        heads,
        causal: false,
        blocks: masks
            .iter()
            .enumerate()
            .map(|(b, m)| AttnBlock { q_off: b * seq_len, q_len: seq_len, k_off: b * seq_len, k_len: seq_len, key_mask: Some(m.clone()) })
            .collect(),
    })
}

/// Pre-LN Transformer block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl EncoderBlock {
    pub fn new<F: Float>(b: &mut Builder<F>, name: &str, dim: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(b, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), dim)?,
            ffn: Mlp::new(b, &format!("{name}.ffn"), dim, ffn_dim, dim)?,
        })
    }

    /// Returns the block output and its attention node.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var, layout: &Arc<AttnLayout>, ctx: &mut Ctx) -> (Var, Var) {
        let h = self.ln1.forward(g, x);
        let (a, probs) = self.attn.forward(g, h, h, layout);
        let a = ctx.dropout(g, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ffn.forward(g, h);
        let f = ctx.dropout(g, f);
        (g.add(x, f), probs)
    }
}

#[derive(Debug, Clone)]
pub struct JointEncoder {
    pub pos: ParamId,
    pub seg: ParamId,
    pub cls: ParamId,
    /// Empty when the model was built for the encoder-bypass ablation.
    pub blocks: Vec<EncoderBlock>,
    pub final_ln: Option<LayerNorm>,
    pub dim: usize,
    pub heads: usize,
    pub num_patches: usize,
    pub text_len: usize,
}

/// Graph-level encoder output.
pub struct EncodeTrace {
    pub out: Var,
    /// Attention node of each layer, for inspecting weights.
    pub attention: Vec<Var>,
}

impl JointEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        b: &mut Builder<F>,
        dim: usize,
        layers: usize,
        heads: usize,
        ffn_dim: usize,
        num_patches: usize,
        text_len: usize,
        with_blocks: bool,
    ) -> Result<Self> {
        let seq_len = num_patches + 1 + text_len;
        let pos = b.weight("encoder.pos", seq_len, dim)?;
        let seg = b.weight("encoder.seg", 3, dim)?;
        let cls = b.weight("encoder.cls", 1, dim)?;
        let (blocks, final_ln) = if with_blocks {
            let blocks = (0..layers).map(|i| EncoderBlock::new(b, &format!("encoder.layer{i}"), dim, heads, ffn_dim)).collect::<Result<Vec<_>>>()?;
            (blocks, Some(LayerNorm::new(b, "encoder.final_ln", dim)?))
        } else {
            (Vec::new(), None)
        };
        Ok(Self { pos, seg, cls, blocks, final_ln, dim, heads, num_patches, text_len })
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches + 1 + self.text_len
    }

    pub fn has_blocks(&self) -> bool {
        self.final_ln.is_some()
    }

    /// Stack `[patches | CLS | tokens]` per example and add position and segment embeddings.
    /// `patch_emb` is `B·M × d`, `token_emb` is `B·N × d`; returns `B·L × d`.
    pub fn assemble<F: Float>(&self, g: &mut Graph<F>, patch_emb: Var, token_emb: Var, batch: usize) -> Result<Var> {
        let (m, n, l) = (self.num_patches, self.text_len, self.seq_len());
        if g.shape(patch_emb) != (batch * m, self.dim) || g.shape(token_emb) != (batch * n, self.dim) {
            return Err(Error::Shape(format!(
                "assemble: patches {:?} and tokens {:?} for batch {batch}, M={m}, N={n}, d={}",
                g.shape(patch_emb),
                g.shape(token_emb),
                self.dim
            )));
        }
        let cls = g.param(self.cls);
        let mut picks = Vec::with_capacity(batch * l);
        for b in 0..batch {
            picks.extend((0..m).map(|i| (0, b * m + i)));
            picks.push((1, 0));
            picks.extend((0..n).map(|i| (2, b * n + i)));
        }
        let x = g.gather(&[patch_emb, cls, token_emb], picks);
        let pos = g.param(self.pos);
        let pos_rows: Vec<usize> = (0..batch).flat_map(|_| 0..l).collect();
        let pos = g.gather_rows(pos, &pos_rows);
        let seg = g.param(self.seg);
        let seg_one = segments(m, n);
        let seg_rows: Vec<usize> = (0..batch).flat_map(|_| seg_one.iter().map(|&s| s as usize)).collect();
        let seg = g.gather_rows(seg, &seg_rows);
        let x = g.add(x, pos);
        Ok(g.add(x, seg))
    }

    /// Run every block over the assembled `B·L × d` batch.
    pub fn encode<F: Float>(&self, g: &mut Graph<F>, x: Var, masks: &[Vec<bool>], ctx: &mut Ctx) -> Result<EncodeTrace> {
        let Some(final_ln) = &self.final_ln else {
            return Err(Error::Invalid("encoder was built without transformer blocks (bypass model)".into()));
        };
        let l = self.seq_len();
        if g.shape(x) != (masks.len() * l, self.dim) {
            return Err(Error::Shape(format!("encode: input {:?} for {} sequences of length {l}", g.shape(x), masks.len())));
        }
        let layout = self_attention_layout(self.heads, l, masks);
        let mut h = ctx.dropout(g, x);
        let mut attention = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, probs) = block.forward(g, h, &layout, ctx);
            check_finite(g, out, || format!("encoder layer {i}"))?;
            h = out;
            attention.push(probs);
        }
        Ok(EncodeTrace { out: final_ln.forward(g, h), attention })
    }

    fn check_inputs<F: Float>(&self, patch_emb: &Array2<F>, token_emb: &Array2<F>, pad_mask: &[bool]) -> Result<()> {
        if patch_emb.dim() != (self.num_patches, self.dim) || token_emb.dim() != (self.text_len, self.dim) || pad_mask.len() != self.text_len {
            return Err(Error::Shape(format!(
                "patches {:?}, tokens {:?}, mask {} for M={}, N={}, d={}",
                patch_emb.dim(),
                token_emb.dim(),
                pad_mask.len(),
                self.num_patches,
                self.text_len,
                self.dim
            )));
        }
        Ok(())
    }

    pub fn assemble_sequence<F: Float>(&self, params: &ParamSet<F>, patch_emb: &Array2<F>, token_emb: &Array2<F>, pad_mask: &[bool]) -> Result<JointSequence<F>> {
        self.check_inputs(patch_emb, token_emb, pad_mask)?;
        let mut g = Graph::new(params);
        let p = g.constant(patch_emb.clone());
        let t = g.constant(token_emb.clone());
        let x = self.assemble(&mut g, p, t, 1)?;
        Ok(JointSequence {
            embedding: g.value(x).clone(),
            segments: segments(self.num_patches, self.text_len),
            attention_mask: joint_mask(self.num_patches, pad_mask),
            num_patches: self.num_patches,
        })
    }

    pub fn encode_sequence<F: Float>(&self, params: &ParamSet<F>, seq: &JointSequence<F>) -> Result<JointEmbedding<F>> {
        let mut g = Graph::new(params);
        let x = g.constant(seq.embedding.clone());
        let trace = self.encode(&mut g, x, std::slice::from_ref(&seq.attention_mask), &mut Ctx::eval())?;
        Ok(JointEmbedding { values: g.value(trace.out).clone(), attention_mask: seq.attention_mask.clone(), num_patches: seq.num_patches })
    }

    /// Ablation arm: the assembled sequence itself, without self-attention.
    pub fn encode_bypass<F: Float>(&self, params: &ParamSet<F>, patch_emb: &Array2<F>, token_emb: &Array2<F>, pad_mask: &[bool]) -> Result<JointEmbedding<F>> {
        let seq = self.assemble_sequence(params, patch_emb, token_emb, pad_mask)?;
        Ok(JointEmbedding { values: seq.embedding, attention_mask: seq.attention_mask, num_patches: seq.num_patches })
    }
}
