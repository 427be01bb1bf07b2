//! Layer building blocks over [`Graph`].

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{AttnLayout, Graph, Var};
use crate::params::{Builder, ParamId};

pub const LN_EPS: f64 = 1e-5;

/// Per-forward settings: dropout is active only when an rng is present.
pub struct Ctx<'r> {
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Ctx<'r> {
    pub fn eval() -> Self {
        Self { dropout: 0.0, rng: None }
    }

    pub fn train(dropout: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self { dropout, rng: Some(rng) }
    }

    pub fn dropout<F: Float>(&mut self, g: &mut Graph<F>, x: Var) -> Var {
        let p = self.dropout;
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let keep = F::lit(1.0 / (1.0 - p));
                let mask = Array2::from_shape_simple_fn(g.shape(x), || if rng.gen::<f64>() < p { F::zero() } else { keep });
                g.mul_const(x, mask)
            }
            _ => x,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Float>(b: &mut Builder<F>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: b.weight(&format!("{name}.weight"), d_in, d_out)?,
            bias: b.bias(&format!("{name}.bias"), d_out)?,
            d_in,
            d_out,
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<F: Float>(b: &mut Builder<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self { scale: b.norm_scale(&format!("{name}.scale"), dim)?, bias: b.norm_bias(&format!("{name}.bias"), dim)?, eps: LN_EPS })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let s = g.param(self.scale);
        let b = g.param(self.bias);
        g.layer_norm(x, s, b, self.eps)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Float>(b: &mut Builder<F>, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(b, &format!("{name}.fc1"), d_in, d_hidden)?, fc2: Linear::new(b, &format!("{name}.fc2"), d_hidden, d_out)? })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Float>(b: &mut Builder<F>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Invalid(format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(b, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(b, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(b, &format!("{name}.v"), dim, dim)?,
            out: Linear::new(b, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    /// Returns the projected output and the raw attention node (for inspecting weights).
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, xq: Var, xkv: Var, layout: &Arc<AttnLayout>) -> (Var, Var) {
        debug_assert_eq!(layout.heads, self.heads);
        let q = self.q.forward(g, xq);
        let k = self.k.forward(g, xkv);
        let v = self.v.forward(g, xkv);
        let a = g.attention(q, k, v, layout.clone());
        (self.out.forward(g, a), a)
    }
}

pub fn check_finite<F: Float>(g: &Graph<F>, v: Var, what: impl FnOnce() -> String) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}
