//! Transformer answer decoder: teacher-forced logits, the sequence NLL and greedy generation.

use std::sync::Arc;

use ndarray::Array2;

use crate::encoder::JointEmbedding;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{AttnBlock, AttnLayout, Graph, Var};
use crate::nn::{check_finite, Ctx, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{Builder, ParamId, ParamSet};
use crate::text::{words, TextEmbedder, Vocabulary, BOS_ID, EOS_ID, UNK_ID};

/// Gold or generated answer: ids `y_1 … y_S`, the last one `[EOS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerSequence {
    pub ids: Vec<u32>,
    /// Generation hit its length cap and `[EOS]` was appended rather than predicted.
    pub truncated: bool,
}

impl AnswerSequence {
    /// Tokenize an answer, keeping at most `max_len − 1` words so `[EOS]` fits.
    pub fn from_text(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::Invalid("max answer length must be at least 1".into()));
        }
        let mut ids: Vec<u32> = words(text).iter().take(max_len - 1).map(|w| vocab.id(w).unwrap_or(UNK_ID)).collect();
        ids.push(EOS_ID);
        Ok(Self { ids, truncated: false })
    }

    pub fn from_ids(mut ids: Vec<u32>) -> Result<Self> {
        if ids.contains(&EOS_ID) {
            return Err(Error::Invalid("answer body must not contain [EOS]".into()));
        }
        ids.push(EOS_ID);
        Ok(Self { ids, truncated: false })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The answer without its trailing `[EOS]`.
    pub fn body(&self) -> &[u32] {
        &self.ids[..self.ids.len() - 1]
    }

    /// `[BOS], y_1 … y_{S−1}`.
    pub fn decoder_input(&self) -> Vec<u32> {
        let mut v = Vec::with_capacity(self.ids.len());
        v.push(BOS_ID);
        v.extend_from_slice(&self.ids[..self.ids.len() - 1]);
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.ids.iter().position(|&i| i == EOS_ID) {
            Some(p) if p + 1 == self.ids.len() => Ok(()),
            _ => Err(Error::Invalid("answer must contain exactly one [EOS], at the end".into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: Mlp,
}

impl DecoderBlock {
    pub fn new<F: Float>(b: &mut Builder<F>, name: &str, dim: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), dim)?,
            self_attn: MultiHeadAttention::new(b, &format!("{name}.self_attn"), dim, heads)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), dim)?,
            cross_attn: MultiHeadAttention::new(b, &format!("{name}.cross_attn"), dim, heads)?,
            ln3: LayerNorm::new(b, &format!("{name}.ln3"), dim)?,
            ffn: Mlp::new(b, &format!("{name}.ffn"), dim, ffn_dim, dim)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AnswerDecoder {
    pub pos: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub final_ln: LayerNorm,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
    /// Rows in the position table: the longest decoder input accepted.
    pub max_positions: usize,
}

impl AnswerDecoder {
    pub fn new<F: Float>(b: &mut Builder<F>, dim: usize, layers: usize, heads: usize, ffn_dim: usize, vocab_size: usize, max_answer_len: usize) -> Result<Self> {
        // one extra row so a capped generation can be replayed with its appended [EOS]
        let max_positions = max_answer_len + 1;
        Ok(Self {
            pos: b.weight("decoder.pos", max_positions, dim)?,
            blocks: (0..layers).map(|i| DecoderBlock::new(b, &format!("decoder.layer{i}"), dim, heads, ffn_dim)).collect::<Result<_>>()?,
            final_ln: LayerNorm::new(b, "decoder.final_ln", dim)?,
            out: Linear::new(b, "decoder.out", dim, vocab_size)?,
            heads,
            dim,
            max_positions,
        })
    }

    /// Logits for every decoder input position, stacked over the batch (`Σ S_b × |vocab|`).
    ///
    /// `memory` is `B·L × d` and `memory_masks[b]` marks the rows of example `b` that may be
    /// attended. `inputs[b]` is `[BOS], y_1 … y_{S−1}` for example `b`.
    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        text: &TextEmbedder,
        memory: Var,
        memory_masks: &[Vec<bool>],
        inputs: &[Vec<u32>],
        ctx: &mut Ctx,
    ) -> Result<Var> {
        if inputs.len() != memory_masks.len() {
            return Err(Error::Shape(format!("{} decoder inputs for {} memories", inputs.len(), memory_masks.len())));
        }
        let mem_len = memory_masks.first().map_or(0, Vec::len);
        if g.shape(memory) != (memory_masks.len() * mem_len, self.dim) {
            return Err(Error::Shape(format!("decoder memory {:?} for {} sequences of {mem_len}", g.shape(memory), memory_masks.len())));
        }
        if let Some(long) = inputs.iter().find(|s| s.len() > self.max_positions || s.is_empty()) {
            return Err(Error::Invalid(format!("decoder input of length {} outside 1..={}", long.len(), self.max_positions)));
        }
        let flat: Vec<u32> = inputs.iter().flatten().copied().collect();
        let x = text.forward(g, &flat);
        let pos = g.param(self.pos);
        let pos_rows: Vec<usize> = inputs.iter().flat_map(|s| 0..s.len()).collect();
        let pos = g.gather_rows(pos, &pos_rows);
        let mut h = g.add(x, pos);
        h = ctx.dropout(g, h);

        let mut self_blocks = Vec::with_capacity(inputs.len());
        let mut cross_blocks = Vec::with_capacity(inputs.len());
        let mut off = 0;
        for (b, s) in inputs.iter().enumerate() {
            self_blocks.push(AttnBlock { q_off: off, q_len: s.len(), k_off: off, k_len: s.len(), key_mask: None });
            cross_blocks.push(AttnBlock { q_off: off, q_len: s.len(), k_off: b * mem_len, k_len: mem_len, key_mask: Some(memory_masks[b].clone()) });
            off += s.len();
        }
        let self_layout = Arc::new(AttnLayout { heads: self.heads, causal: true, blocks: self_blocks });
        let cross_layout = Arc::new(AttnLayout { heads: self.heads, causal: false, blocks: cross_blocks });

        for (i, blk) in self.blocks.iter().enumerate() {
            let n = blk.ln1.forward(g, h);
            let (a, _) = blk.self_attn.forward(g, n, n, &self_layout);
            let a = ctx.dropout(g, a);
            h = g.add(h, a);
            let n = blk.ln2.forward(g, h);
            let (c, _) = blk.cross_attn.forward(g, n, memory, &cross_layout);
            let c = ctx.dropout(g, c);
            h = g.add(h, c);
            let n = blk.ln3.forward(g, h);
            let f = blk.ffn.forward(g, n);
            let f = ctx.dropout(g, f);
            h = g.add(h, f);
            check_finite(g, h, || format!("decoder layer {i}"))?;
        }
        let h = self.final_ln.forward(g, h);
        Ok(self.out.forward(g, h))
    }
}

/// Mean over the batch of each answer's mean per-step NLL (the `[EOS]` step included).
pub fn vqa_loss<F: Float>(g: &mut Graph<F>, logits: Var, answers: &[&AnswerSequence]) -> Result<Var> {
    let total: usize = answers.iter().map(|a| a.len()).sum();
    if g.shape(logits).0 != total {
        return Err(Error::Shape(format!("{} logit rows for {total} answer tokens", g.shape(logits).0)));
    }
    let batch = answers.len() as f64;
    let mut targets = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    for a in answers {
        targets.extend(a.ids.iter().map(|&i| i as usize));
        weights.extend(std::iter::repeat(F::lit(1.0 / (a.len() as f64 * batch))).take(a.len()));
    }
    Ok(g.cross_entropy(logits, targets, weights))
}

/// Teacher-forced logits (`S × |vocab|`) for one example.
pub fn decode_teacher_forced<F: Float>(
    decoder: &AnswerDecoder,
    text: &TextEmbedder,
    params: &ParamSet<F>,
    memory: &JointEmbedding<F>,
    answer: &AnswerSequence,
) -> Result<Array2<F>> {
    answer.validate()?;
    let mut g = Graph::new(params);
    let mem = g.constant(memory.values.clone());
    let logits = decoder.forward(&mut g, text, mem, std::slice::from_ref(&memory.attention_mask), &[answer.decoder_input()], &mut Ctx::eval())?;
    Ok(g.value(logits).clone())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<F: Float>(row: ndarray::ArrayView1<F>) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `[BOS]` until `[EOS]` or `max_len` tokens.
pub fn generate_answer<F: Float>(
    decoder: &AnswerDecoder,
    text: &TextEmbedder,
    params: &ParamSet<F>,
    memory: &JointEmbedding<F>,
    max_len: usize,
) -> Result<AnswerSequence> {
    if max_len == 0 {
        return Err(Error::Invalid("max_len must be at least 1".into()));
    }
    let max_len = max_len.min(decoder.max_positions - 1);
    let mut input = vec![BOS_ID];
    let mut out = Vec::new();
    while out.len() < max_len {
        let mut g = Graph::new(params);
        let mem = g.constant(memory.values.clone());
        let logits = decoder.forward(&mut g, text, mem, std::slice::from_ref(&memory.attention_mask), std::slice::from_ref(&input), &mut Ctx::eval())?;
        let lv = g.value(logits);
        let next = argmax(lv.row(lv.nrows() - 1)) as u32;
        out.push(next);
        if next == EOS_ID {
            return Ok(AnswerSequence { ids: out, truncated: false });
        }
        input.push(next);
    }
    out.push(EOS_ID);
    Ok(AnswerSequence { ids: out, truncated: true })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_from_text_appends_eos() {
        let v = Vocabulary::from_tokens(["yes", "no"].map(String::from)).unwrap();
        let a = AnswerSequence::from_text("Yes.", &v, 20).unwrap();
        assert_eq!(a.ids, vec![6, EOS_ID]);
        assert_eq!(a.decoder_input(), vec![BOS_ID, 6]);
        let long = AnswerSequence::from_text("yes no yes no", &v, 3).unwrap();
        assert_eq!(long.ids, vec![6, 7, EOS_ID]);
        assert!(long.validate().is_ok());
        assert!(AnswerSequence { ids: vec![EOS_ID, 6], truncated: false }.validate().is_err());
        assert!(AnswerSequence::from_ids(vec![6, EOS_ID]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(ndarray::array![1.0, 3.0, 3.0, 2.0].view()), 1);
        assert_eq!(argmax(ndarray::array![0.0f32, 0.0].view()), 0);
    }
}
