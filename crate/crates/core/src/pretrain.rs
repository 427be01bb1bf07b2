//! Self-supervised pretraining: masked word prediction, masked feature regression and
//! image-text matching, plus their summed objective.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::image::{FeaturePatchGrid, Visual};
use crate::model::{TaskHeads, VqaModel};
use crate::nn::Ctx;
use crate::text::{TokenSequence, MASK_ID};

/// Clamp applied to the matching probability before taking logs.
pub const ITM_EPS: f64 = 1e-7;
pub const DEFAULT_MASK_PROB: f64 = 0.15;
pub const DEFAULT_NEG_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum MaskOriginals {
    Tokens(Vec<u32>),
    /// Raw `K × d_v` features of the masked patches (filled once the features are known).
    Patches(Array2<f32>),
}

/// Masked positions of one modality and what they held before masking.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
    pub originals: MaskOriginals,
    pub prob: f64,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Include each candidate independently with probability `p`; if none is drawn, force one
/// uniformly chosen candidate.
pub fn sample_mask(real_positions: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if real_positions.is_empty() {
        return Err(Error::Invalid("no maskable positions".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Invalid(format!("mask probability {p} outside [0, 1]")));
    }
    let mut picked: Vec<usize> = real_positions.iter().copied().filter(|_| rng.gen::<f64>() < p).collect();
    if picked.is_empty() {
        picked.push(real_positions[rng.gen_range(0..real_positions.len())]);
    }
    Ok(picked)
}

pub fn word_mask_plan(seq: &TokenSequence, p: f64, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    let positions = sample_mask(&seq.maskable_positions(), p, rng)?;
    let originals = MaskOriginals::Tokens(positions.iter().map(|&i| seq.ids[i]).collect());
    Ok(MaskPlan { positions, originals, prob: p })
}

/// Plan over all `num_patches` rows; originals are filled later from the raw features.
pub fn patch_mask_plan(num_patches: usize, p: f64, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    let all: Vec<usize> = (0..num_patches).collect();
    let positions = sample_mask(&all, p, rng)?;
    Ok(MaskPlan { originals: MaskOriginals::Patches(Array2::zeros((0, 0))), positions, prob: p })
}

/// Replace planned positions with `[MASK]`.
pub fn apply_word_mask(seq: &TokenSequence, plan: &MaskPlan) -> Result<TokenSequence> {
    let mut out = seq.clone();
    for &i in &plan.positions {
        if i >= seq.len() || !seq.pad_mask[i] {
            return Err(Error::Invalid(format!("cannot mask position {i}: not a real token")));
        }
        out.ids[i] = MASK_ID;
    }
    Ok(out)
}

pub fn restore_word_mask(masked: &TokenSequence, plan: &MaskPlan) -> Result<TokenSequence> {
    let MaskOriginals::Tokens(orig) = &plan.originals else {
        return Err(Error::Invalid("plan does not hold token originals".into()));
    };
    let mut out = masked.clone();
    for (&i, &id) in plan.positions.iter().zip(orig) {
        out.ids[i] = id;
    }
    Ok(out)
}

/// Zero the planned rows of a raw feature grid and record them as regression targets.
pub fn apply_patch_mask(grid: &FeaturePatchGrid, plan: &mut MaskPlan) -> Result<FeaturePatchGrid> {
    let mut out = grid.clone();
    let mut originals = Array2::zeros((plan.positions.len(), grid.values.ncols()));
    for (k, &i) in plan.positions.iter().enumerate() {
        if i >= grid.num_patches() {
            return Err(Error::Invalid(format!("patch {i} outside grid of {}", grid.num_patches())));
        }
        originals.row_mut(k).assign(&grid.values.row(i));
        out.values.row_mut(i).fill(0.0);
    }
    plan.originals = MaskOriginals::Patches(originals);
    Ok(out)
}

/// Where an ITM pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItmSource {
    Original,
    ImageReplaced,
    TextReplaced,
}

/// Image-text pairs by index into the source list, with match labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ItmBatch {
    pub image: Vec<usize>,
    pub text: Vec<usize>,
    pub labels: Vec<u8>,
    pub source: Vec<ItmSource>,
}

/// Keep each of `n` pairs with probability `1 − neg_fraction`; otherwise swap its image or its
/// text (equally likely) for one drawn uniformly from another pair.
pub fn build_itm_batch(n: usize, neg_fraction: f64, rng: &mut ChaCha8Rng) -> Result<ItmBatch> {
    if n < 2 {
        return Err(Error::Invalid("image-text matching needs at least two pairs to draw negatives".into()));
    }
    if !(0.0..=1.0).contains(&neg_fraction) {
        return Err(Error::Invalid(format!("negative fraction {neg_fraction} outside [0, 1]")));
    }
    let mut batch = ItmBatch { image: Vec::with_capacity(n), text: Vec::with_capacity(n), labels: Vec::with_capacity(n), source: Vec::with_capacity(n) };
    for i in 0..n {
        let (img, txt, label, src) = if rng.gen::<f64>() < neg_fraction {
            let mut donor = rng.gen_range(0..n - 1);
            if donor >= i {
                donor += 1;
            }
            if rng.gen::<bool>() {
                (donor, i, 0, ItmSource::ImageReplaced)
            } else {
                (i, donor, 0, ItmSource::TextReplaced)
            }
        } else {
            (i, i, 1, ItmSource::Original)
        };
        batch.image.push(img);
        batch.text.push(txt);
        batch.labels.push(label);
        batch.source.push(src);
    }
    Ok(batch)
}

/// Mean over examples of the mean NLL of the original token at each masked text position.
///
/// `joint` is `B·L × d`; text position `i` of example `b` is row `b·L + M + 1 + i`.
pub fn mwp_loss<F: Float>(g: &mut Graph<F>, joint: Var, plans: &[MaskPlan], heads: &TaskHeads, num_patches: usize, seq_len: usize) -> Result<Var> {
    let batch = plans.len() as f64;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for (b, plan) in plans.iter().enumerate() {
        let MaskOriginals::Tokens(orig) = &plan.originals else {
            return Err(Error::Invalid("word loss needs a token plan".into()));
        };
        let k = plan.len() as f64;
        for (&pos, &id) in plan.positions.iter().zip(orig) {
            rows.push(b * seq_len + num_patches + 1 + pos);
            targets.push(id as usize);
            weights.push(F::lit(1.0 / (k * batch)));
        }
    }
    let h = g.gather_rows(joint, &rows);
    let logits = heads.mwp.forward(g, h);
    if targets.iter().any(|&t| t >= g.shape(logits).1) {
        return Err(Error::Invalid("masked token id outside the head's vocabulary".into()));
    }
    Ok(g.cross_entropy(logits, targets, weights))
}

/// Mean over examples of `Σ_k ‖h(E_k) − V_k‖²` against the stored raw features.
pub fn mfr_loss<F: Float>(g: &mut Graph<F>, joint: Var, plans: &[MaskPlan], heads: &TaskHeads, seq_len: usize) -> Result<Var> {
    let batch = plans.len() as f64;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, plan) in plans.iter().enumerate() {
        let MaskOriginals::Patches(orig) = &plan.originals else {
            return Err(Error::Invalid("feature loss needs a patch plan".into()));
        };
        if orig.nrows() != plan.len() {
            return Err(Error::Invalid("patch plan originals were never filled".into()));
        }
        rows.extend(plan.positions.iter().map(|&p| b * seq_len + p));
        targets.push(orig.view());
    }
    let target = ndarray::concatenate(ndarray::Axis(0), &targets).map_err(|e| Error::Shape(e.to_string()))?;
    let h = g.gather_rows(joint, &rows);
    let pred = heads.mfr.forward(g, h);
    if g.shape(pred).1 != target.ncols() {
        return Err(Error::Shape(format!("feature head emits {} dims, targets have {}", g.shape(pred).1, target.ncols())));
    }
    Ok(g.squared_error(pred, target.mapv(|x| F::lit(x as f64)), 1.0 / batch))
}

/// Mean binary cross-entropy of the matching head read at each example's `[CLS]` row.
pub fn itm_loss<F: Float>(g: &mut Graph<F>, joint: Var, labels: &[u8], heads: &TaskHeads, num_patches: usize, seq_len: usize) -> Result<Var> {
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Invalid(format!("matching label {bad} not in {{0, 1}}")));
    }
    let rows: Vec<usize> = (0..labels.len()).map(|b| b * seq_len + num_patches).collect();
    let h = g.gather_rows(joint, &rows);
    let logits = itm_logits(g, h, heads);
    let n = labels.len() as f64;
    Ok(g.bce(logits, labels.iter().map(|&y| F::lit(y as f64)).collect(), vec![F::lit(1.0 / n); labels.len()], ITM_EPS))
}

pub fn itm_logits<F: Float>(g: &mut Graph<F>, cls_rows: Var, heads: &TaskHeads) -> Var {
    heads.itm.forward(g, cls_rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub mwp: f64,
    pub mfr: f64,
    pub itm: f64,
    pub total: f64,
}

/// Random choices for one pretraining step, drawn up front so a step can be replayed.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainPlan {
    pub words: Vec<MaskPlan>,
    pub patches: Vec<MaskPlan>,
    pub itm: ItmBatch,
}

impl PretrainPlan {
    pub fn sample(texts: &[&TokenSequence], num_patches: usize, mask_prob: f64, neg_fraction: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let words = texts.iter().map(|t| word_mask_plan(t, mask_prob, rng)).collect::<Result<Vec<_>>>()?;
        let patches = texts.iter().map(|_| patch_mask_plan(num_patches, mask_prob, rng)).collect::<Result<Vec<_>>>()?;
        let itm = build_itm_batch(texts.len(), neg_fraction, rng)?;
        Ok(Self { words, patches, itm })
    }
}

/// Graph nodes of a pretraining forward.
pub struct PretrainNodes {
    pub mwp: Var,
    pub mfr: Var,
    pub itm: Var,
    pub total: Var,
    /// Unmasked raw features of the masked-input pass (the regression targets' source).
    pub raw: Var,
}

impl PretrainNodes {
    pub fn breakdown<F: Float>(&self, g: &Graph<F>) -> LossBreakdown {
        LossBreakdown { mwp: g.scalar(self.mwp).as_f64(), mfr: g.scalar(self.mfr).as_f64(), itm: g.scalar(self.itm).as_f64(), total: g.scalar(self.total).as_f64() }
    }
}

/// Forward pass A: matched pairs with word and patch masks → masked word and feature losses.
/// Forward pass B: the plan's matching batch, unmasked → matching loss. Returns the sum.
pub fn pretrain_forward<F: Float>(
    g: &mut Graph<F>,
    model: &VqaModel,
    visuals: &[&Visual],
    texts: &[&TokenSequence],
    plan: &mut PretrainPlan,
    ctx: &mut Ctx,
) -> Result<PretrainNodes> {
    let heads = model.heads()?;
    let (m, l) = (model.config.num_patches(), model.config.seq_len());
    let d_v = model.config.backbone.feature_dim;
    if visuals.len() != texts.len() || plan.words.len() != texts.len() || plan.patches.len() != texts.len() {
        return Err(Error::Shape("pretraining batch and plan sizes disagree".into()));
    }

    let raw = model.raw_features(g, visuals)?;
    let mut keep = Array2::from_elem((texts.len() * m, d_v), F::one());
    {
        let raw_v = g.value(raw);
        for (b, p) in plan.patches.iter_mut().enumerate() {
            let mut orig = Array2::zeros((p.len(), d_v));
            for (k, &i) in p.positions.iter().enumerate() {
                if i >= m {
                    return Err(Error::Invalid(format!("patch {i} outside grid of {m}")));
                }
                orig.row_mut(k).assign(&raw_v.row(b * m + i).mapv(|x| x.as_f64() as f32));
                keep.row_mut(b * m + i).fill(F::zero());
            }
            p.originals = MaskOriginals::Patches(orig);
        }
    }
    let masked_raw = g.mul_const(raw, keep);
    let masked_texts = texts.iter().zip(&plan.words).map(|(t, p)| apply_word_mask(t, p)).collect::<Result<Vec<_>>>()?;
    let masked_refs: Vec<&TokenSequence> = masked_texts.iter().collect();
    let enc = model.encode_raw(g, masked_raw, &masked_refs, ctx)?;
    let mwp = mwp_loss(g, enc.out, &plan.words, heads, m, l)?;
    let mfr = mfr_loss(g, enc.out, &plan.patches, heads, l)?;

    let itm_vis: Vec<&Visual> = plan.itm.image.iter().map(|&i| visuals[i]).collect();
    let itm_txt: Vec<&TokenSequence> = plan.itm.text.iter().map(|&i| texts[i]).collect();
    let enc_b = model.encode_batch(g, &itm_vis, &itm_txt, ctx)?;
    let itm = itm_loss(g, enc_b.out, &plan.itm.labels, heads, m, l)?;

    let sum = g.add(mwp, mfr);
    let total = g.add(sum, itm);
    Ok(PretrainNodes { mwp, mfr, itm, total, raw })
}
