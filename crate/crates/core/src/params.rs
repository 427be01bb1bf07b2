//! Named parameter storage and initialization.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::float::Float;

/// Standard deviation of the truncated normal used for weight matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Role of a parameter. Only `Weight` receives weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Array2<F>,
}

/// Ordered collection of named 2-D parameter arrays. Registration order is the id order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<F> {
    entries: Vec<Param<F>>,
    index: BTreeMap<String, ParamId>,
}

impl<F: Float> ParamSet<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, value: Array2<F>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Param { name: name.to_string(), kind, value });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str, shape: (usize, usize)) -> Result<ParamId> {
        let id = self.id(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let got = self.entries[id.0].value.dim();
        if got != shape {
            return Err(Error::Shape(format!("parameter `{name}` has shape {got:?}, expected {shape:?}")));
        }
        Ok(id)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.id(name).map(|id| &self.entries[id.0].value)
    }

    pub fn value(&self, id: ParamId) -> &Array2<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Param<F> {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Same names and kinds, values converted to another float type.
    pub fn cast<G: Float>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.mapv(|x| G::lit(x.as_f64())),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copy every parameter whose name passes `filter` from `src`. Each selected name must
    /// exist in `src` with the same shape.
    pub fn overwrite_from(&mut self, src: &ParamSet<F>, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let mut copied = 0;
        for p in self.entries.iter_mut().filter(|p| filter(&p.name)) {
            let other = src.get(&p.name).ok_or_else(|| Error::MissingTensor(p.name.clone()))?;
            if other.dim() != p.value.dim() {
                return Err(Error::Shape(format!(
                    "parameter `{}`: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    other.dim(),
                    p.value.dim()
                )));
            }
            p.value.assign(other);
            copied += 1;
        }
        Ok(copied)
    }
}

/// Sample from N(0, std²) truncated to ±2 std by rejection.
pub fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Registers parameters into a set, either freshly initialized or bound to existing values.
///
/// With an rng the builder creates and initializes each parameter; without one it looks the
/// name up and checks the shape, so the same model-construction code serves both cases.
pub struct Builder<'a, F> {
    params: &'a mut ParamSet<F>,
    rng: Option<ChaCha8Rng>,
}

impl<'a, F: Float> Builder<'a, F> {
    pub fn init(params: &'a mut ParamSet<F>, rng: ChaCha8Rng) -> Self {
        Self { params, rng: Some(rng) }
    }

    pub fn bind(params: &'a mut ParamSet<F>) -> Self {
        Self { params, rng: None }
    }

    fn make(&mut self, name: &str, kind: ParamKind, shape: (usize, usize), fill: impl FnMut(&mut ChaCha8Rng) -> f64) -> Result<ParamId> {
        match self.rng.as_mut() {
            Some(rng) => {
                let mut fill = fill;
                let mut v = Array2::zeros(shape);
                v.iter_mut().for_each(|x| *x = F::lit(fill(rng)));
                self.params.insert(name, kind, v)
            }
            None => self.params.require(name, shape),
        }
    }

    pub fn weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.make(name, ParamKind::Weight, (rows, cols), |r| truncated_normal(r, INIT_STD))
    }

    pub fn bias(&mut self, name: &str, cols: usize) -> Result<ParamId> {
        self.make(name, ParamKind::Bias, (1, cols), |_| 0.0)
    }

    pub fn norm_scale(&mut self, name: &str, cols: usize) -> Result<ParamId> {
        self.make(name, ParamKind::Norm, (1, cols), |_| 1.0)
    }

    pub fn norm_bias(&mut self, name: &str, cols: usize) -> Result<ParamId> {
        self.make(name, ParamKind::Norm, (1, cols), |_| 0.0)
    }
}
