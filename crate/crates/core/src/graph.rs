//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling [`Graph::backward`] on a
//! `1×1` loss node walks the record in reverse and returns gradients for every parameter
//! touched and for every leaf created with [`Graph::input`].
//!
//! Batches are stacked along rows. Operations that must not mix examples (attention) take an
//! explicit [`AttnLayout`] describing where each example's rows live.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::float::Float;
use crate::params::{ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// One attention problem inside a stacked batch: query rows `q_off..q_off+q_len` attend key
/// rows `k_off..k_off+k_len`, restricted by `key_mask` (true = may be attended).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnBlock {
    pub q_off: usize,
    pub q_len: usize,
    pub k_off: usize,
    pub k_len: usize,
    pub key_mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayout {
    pub heads: usize,
    /// Query `i` may only attend keys `j <= i` (within its block).
    pub causal: bool,
    pub blocks: Vec<AttnBlock>,
}

impl AttnLayout {
    #[inline]
    fn allowed(&self, block: &AttnBlock, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        block.key_mask.as_ref().map_or(true, |m| m[j])
    }
}

enum Op<F> {
    Leaf { tracked: bool },
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    MulConst(Var, Array2<F>),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<F>, inv_std: Vec<F> },
    Gather { sources: Vec<Var>, picks: Vec<(u32, u32)> },
    Permute { x: Var, map: Vec<u32> },
    Attention { q: Var, k: Var, v: Var, layout: Arc<AttnLayout>, probs: Vec<Array2<F>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<F>, probs: Array2<F> },
    SquaredError { pred: Var, target: Array2<F>, scale: F },
    Bce { logits: Var, labels: Vec<F>, weights: Vec<F>, prob: Vec<F>, eps: F },
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
}

pub struct Graph<'p, F: Float> {
    params: &'p ParamSet<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    params: Vec<Option<Array2<F>>>,
    inputs: BTreeMap<Var, Array2<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&Array2<F>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn input(&self, v: Var) -> Option<&Array2<F>> {
        self.inputs.get(&v)
    }

    /// Parameter gradients indexed by `ParamId`; untouched parameters are `None`.
    pub fn into_params(self) -> Vec<Option<Array2<F>>> {
        self.params
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<F: Float>(x: F) -> F {
    let half = F::lit(0.5);
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    half * x * (F::one() + u.tanh())
}

#[inline]
fn gelu_grad<F: Float>(x: F) -> F {
    let half = F::lit(0.5);
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = F::lit(GELU_C) * (F::one() + F::lit(3.0 * GELU_A) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

impl<'p, F: Float> Graph<'p, F> {
    pub fn new(params: &'p ParamSet<F>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamSet<F> {
        self.params
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.value(*id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        let x = self.value(v);
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Array2::zeros((0, 0)), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf { tracked: false })
    }

    /// Leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf { tracked: true })
    }

    /// Copy of `v`'s current value as an untracked constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// `a + bias` with a `1×c` bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let value = self.value(a) + self.value(bias);
        self.push(value, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k = F::lit(k);
        let value = self.value(a).mapv(|x| x * k);
        self.push(value, Op::Scale(a, k))
    }

    /// Elementwise product with a constant array (masks, dropout).
    pub fn mul_const(&mut self, a: Var, m: Array2<F>) -> Var {
        let value = self.value(a) * &m;
        self.push(value, Op::MulConst(a, m))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` (`1×c` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let n = F::lit(cols as f64);
        let eps = F::lit(eps);
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            inv_std.push(inv);
            xhat.row_mut(r).iter_mut().zip(row.iter()).for_each(|(o, &v)| *o = (v - mean) * inv);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Output row `i` is row `picks[i].1` of `sources[picks[i].0]`.
    pub fn gather(&mut self, sources: &[Var], picks: Vec<(usize, usize)>) -> Var {
        let cols = self.shape(sources[0]).1;
        assert!(sources.iter().all(|&s| self.shape(s).1 == cols), "gather: column mismatch");
        let mut value = Array2::zeros((picks.len(), cols));
        for (i, &(src, row)) in picks.iter().enumerate() {
            value.row_mut(i).assign(&self.value(sources[src]).row(row));
        }
        let picks = picks.into_iter().map(|(a, b)| (a as u32, b as u32)).collect();
        self.push(value, Op::Gather { sources: sources.to_vec(), picks })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        self.gather(&[x], rows.iter().map(|&r| (0, r)).collect())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mut picks = Vec::new();
        for (i, &p) in parts.iter().enumerate() {
            picks.extend((0..self.shape(p).0).map(|r| (i, r)));
        }
        self.gather(parts, picks)
    }

    /// Rearrange elements: flat output index `i` takes flat input index `map[i]`.
    pub fn permute(&mut self, x: Var, shape: (usize, usize), map: Vec<u32>) -> Var {
        assert_eq!(shape.0 * shape.1, map.len(), "permute: map length");
        let src = self.value(x);
        let src = src.as_slice().expect("graph values are standard layout");
        let data: Vec<F> = map.iter().map(|&j| src[j as usize]).collect();
        let value = Array2::from_shape_vec(shape, data).expect("shape checked");
        self.push(value, Op::Permute { x, map })
    }

    /// Scaled dot-product multi-head attention. `q`, `k`, `v` carry all heads side by side.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttnLayout>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(kv.ncols(), d);
        assert_eq!(vv.ncols(), d);
        assert_eq!(d % layout.heads, 0, "attention: dim not divisible by heads");
        let dh = d / layout.heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut out = Array2::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(layout.blocks.len() * layout.heads);
        for blk in &layout.blocks {
            for h in 0..layout.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![blk.q_off..blk.q_off + blk.q_len, cols.clone()]);
                let kh = kv.slice(s![blk.k_off..blk.k_off + blk.k_len, cols.clone()]);
                let vh = vv.slice(s![blk.k_off..blk.k_off + blk.k_len, cols.clone()]);
                let mut p = qh.dot(&kh.t());
                for (i, mut row) in p.outer_iter_mut().enumerate() {
                    let mut max = F::neg_infinity();
                    for (j, x) in row.iter_mut().enumerate() {
                        if layout.allowed(blk, i, j) {
                            *x = *x * scale;
                            if *x > max {
                                max = *x;
                            }
                        }
                    }
                    let mut sum = F::zero();
                    for (j, x) in row.iter_mut().enumerate() {
                        if layout.allowed(blk, i, j) {
                            *x = (*x - max).exp();
                            sum += *x;
                        } else {
                            *x = F::zero();
                        }
                    }
                    if sum > F::zero() {
                        row.mapv_inplace(|x| x / sum);
                    }
                }
                out.slice_mut(s![blk.q_off..blk.q_off + blk.q_len, cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q, k, v, layout, probs })
    }

    /// Attention weights recorded by an attention node, one matrix per (block, head).
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<F>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `Σ_r weights[r] · (−log softmax(logits_r)[targets[r]])` as a `1×1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<F>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert_eq!(lv.nrows(), weights.len());
        let mut probs = lv.clone();
        let mut total = F::zero();
        for (r, mut row) in probs.outer_iter_mut().enumerate() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
            let logit_t = lv[[r, targets[r]]];
            let log_p = logit_t - max - sum.ln();
            total -= weights[r] * log_p;
        }
        self.push(Array2::from_elem((1, 1), total), Op::CrossEntropy { logits, targets, weights, probs })
    }

    /// `scale · Σ (pred − target)²` as a `1×1` node; `target` is constant.
    pub fn squared_error(&mut self, pred: Var, target: Array2<F>, scale: f64) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim(), "squared_error: shape");
        let scale = F::lit(scale);
        let sum = Zip::from(pv).and(&target).fold(F::zero(), |acc, &p, &t| acc + (p - t) * (p - t));
        self.push(Array2::from_elem((1, 1), scale * sum), Op::SquaredError { pred, target, scale })
    }

    /// Weighted binary cross-entropy on sigmoid(logits) clamped to `[eps, 1 − eps]`.
    pub fn bce(&mut self, logits: Var, labels: Vec<F>, weights: Vec<F>, eps: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.ncols(), 1);
        assert_eq!(lv.nrows(), labels.len());
        let eps = F::lit(eps);
        let mut prob = Vec::with_capacity(labels.len());
        let mut total = F::zero();
        for (r, (&y, &w)) in labels.iter().zip(&weights).enumerate() {
            let z = lv[[r, 0]];
            let f = (F::one() / (F::one() + (-z).exp())).max(eps).min(F::one() - eps);
            total -= w * (y * f.ln() + (F::one() - y) * (F::one() - f).ln());
            prob.push(F::one() / (F::one() + (-z).exp()));
        }
        self.push(Array2::from_elem((1, 1), total), Op::Bce { logits, labels, weights, prob, eps })
    }

    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients { params: vec![None; self.params.len()], inputs: BTreeMap::new() };

        fn acc<F: Float>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { tracked } => {
                    if *tracked {
                        out.inputs.insert(Var(idx), dy);
                    }
                }
                Op::Param(id) => out.params[id.0] = Some(dy),
                Op::MatMul(a, b) => {
                    let ga = dy.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&dy);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
                Op::AddRow(a, bias) => {
                    let gb = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, dy);
                    acc(&mut grads, *bias, gb);
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    acc(&mut grads, *a, dy.mapv(|x| x * k));
                }
                Op::MulConst(a, m) => acc(&mut grads, *a, dy * m),
                Op::Gelu(a) => {
                    let mut g = dy;
                    Zip::from(&mut g).and(self.value(*a)).for_each(|g, &x| *g = *g * gelu_grad(x));
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = self.value(*gamma);
                    let gbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &dy * gv;
                    let n = F::lit(xhat.ncols() as f64);
                    let mut dx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let m1 = dh.sum() / n;
                        let m2 = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / n;
                        let inv = inv_std[r];
                        dx.row_mut(r)
                            .iter_mut()
                            .zip(dh.iter().zip(xh.iter()))
                            .for_each(|(o, (&a, &b))| *o = inv * (a - m1 - b * m2));
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *beta, gbeta);
                }
                Op::Gather { sources, picks } => {
                    let mut parts: Vec<Array2<F>> = sources.iter().map(|&s| Array2::zeros(self.shape(s))).collect();
                    for (i, &(src, row)) in picks.iter().enumerate() {
                        let mut target = parts[src as usize].row_mut(row as usize);
                        target += &dy.row(i);
                    }
                    for (&s, g) in sources.iter().zip(parts) {
                        acc(&mut grads, s, g);
                    }
                }
                Op::Permute { x, map } => {
                    let mut g = Array2::zeros(self.shape(*x));
                    let gs = g.as_slice_mut().expect("standard layout");
                    for (&j, &d) in map.iter().zip(dy.iter()) {
                        gs[j as usize] += d;
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Attention { q, k, v, layout, probs } => {
                    let (gq, gk, gv) = self.attention_backward(*q, *k, *v, layout, probs, &dy);
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::CrossEntropy { logits, targets, weights, probs } => {
                    let up = dy[[0, 0]];
                    let mut g = probs.clone();
                    for (r, mut row) in g.outer_iter_mut().enumerate() {
                        row[targets[r]] -= F::one();
                        let w = weights[r] * up;
                        row.mapv_inplace(|x| x * w);
                    }
                    acc(&mut grads, *logits, g);
                }
                Op::SquaredError { pred, target, scale } => {
                    let k = F::lit(2.0) * *scale * dy[[0, 0]];
                    let g = (self.value(*pred) - target).mapv(|x| x * k);
                    acc(&mut grads, *pred, g);
                }
                Op::Bce { logits, labels, weights, prob, eps } => {
                    let up = dy[[0, 0]];
                    let mut g = Array2::zeros((labels.len(), 1));
                    for r in 0..labels.len() {
                        let f = prob[r];
                        // The clamp is flat outside [eps, 1 - eps].
                        if f > *eps && f < F::one() - *eps {
                            g[[r, 0]] = weights[r] * (f - labels[r]) * up;
                        }
                    }
                    acc(&mut grads, *logits, g);
                }
            }
        }
        out
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[Array2<F>],
        dy: &Array2<F>,
    ) -> (Array2<F>, Array2<F>, Array2<F>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / layout.heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut gq = Array2::zeros(qv.dim());
        let mut gk = Array2::zeros(kv.dim());
        let mut gv = Array2::zeros(vv.dim());
        let mut p_iter = probs.iter();
        for blk in &layout.blocks {
            let qr = blk.q_off..blk.q_off + blk.q_len;
            let kr = blk.k_off..blk.k_off + blk.k_len;
            for h in 0..layout.heads {
                let p = p_iter.next().expect("one probability matrix per block and head");
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![qr.clone(), cols.clone()]);
                let kh = kv.slice(s![kr.clone(), cols.clone()]);
                let vh = vv.slice(s![kr.clone(), cols.clone()]);
                let dout: ArrayView2<F> = dy.slice(s![qr.clone(), cols.clone()]);
                let dp = dout.dot(&vh.t());
                let mut slice = gv.slice_mut(s![kr.clone(), cols.clone()]);
                slice += &p.t().dot(&dout);
                let mut ds = dp;
                for (mut drow, prow) in ds.outer_iter_mut().zip(p.outer_iter()) {
                    let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<F>();
                    drow.iter_mut().zip(prow.iter()).for_each(|(x, &pp)| *x = pp * (*x - dot) * scale);
                }
                let mut slice = gq.slice_mut(s![qr.clone(), cols.clone()]);
                slice += &ds.dot(&kh);
                let mut slice = gk.slice_mut(s![kr.clone(), cols]);
                slice += &ds.t().dot(&qh);
            }
        }
        (gq, gk, gv)
    }
}
