//! Named parameters and the small layers everything else is built from.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether weight decay applies. Off for biases, norms and bias tables.
    pub decay: bool,
}

/// Ordered, uniquely named collection of model parameters. Names are dotted
/// paths mirroring the module tree, e.g. `encoder.stage0.pair.block1.attn.qkv.weight`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let (idx, _) = self.params.insert_full(name.clone(), Param { name, tensor, decay });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.values_mut()
    }

    /// Total number of scalar learnables.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    /// Parameter counts grouped by the first `depth` name components, in
    /// first-appearance order.
    pub fn breakdown(&self, depth: usize) -> Vec<(String, usize)> {
        let mut groups: IndexMap<String, usize> = IndexMap::new();
        for p in self.params.values() {
            let key = p.name.split('.').take(depth).collect::<Vec<_>>().join(".");
            *groups.entry(key).or_default() += p.tensor.len();
        }
        groups.into_iter().collect()
    }

    /// Records every parameter as a trainable leaf; the returned vars are
    /// indexed by [`ParamId`].
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.values().map(|p| g.leaf(p.tensor.clone())).collect()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            name: p.name.clone(),
                            tensor: p.tensor.cast(),
                            decay: p.decay,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Forward-pass context: the tape plus the bound parameter vars.
pub struct Ctx<'a, T> {
    pub g: &'a mut Graph<T>,
    params: &'a [Var],
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a [Var]) -> Self {
        Self { g, params }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }
}

/// Scoped parameter registration with seeded initialization.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Element> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child scope `prefix.name`.
    pub fn sub(&mut self, name: impl std::fmt::Display) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, tensor: Tensor<T>, decay: bool) -> Result<ParamId> {
        let path = self.path(name);
        self.store.insert(path, tensor, decay)
    }

    /// Uniform in `[-bound, bound]`, sampled in f64 so both precisions see
    /// the same values up to rounding.
    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(self.rng.random_range(-bound..=bound)))
            .collect();
        let t = Tensor::new(shape, data)?;
        self.tensor(name, t, true)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape), false)
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize, bias: bool) -> Result<Linear> {
        let mut b = self.sub(name);
        let weight = b.uniform("weight", vec![input, output], 1.0 / (input as f64).sqrt())?;
        let bias = if bias {
            Some(b.zeros("bias", vec![output])?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn layernorm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        let mut b = self.sub(name);
        let gamma = b.tensor("weight", Tensor::ones(vec![dim]), false)?;
        let beta = b.zeros("bias", vec![dim])?;
        Ok(LayerNorm { gamma, beta, dim })
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.weight), self.bias.map(|b| cx.p(b)));
        cx.g.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.input * self.output + if self.bias.is_some() { self.output } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        cx.g.layernorm(x, g, b, LN_EPS)
    }
}
