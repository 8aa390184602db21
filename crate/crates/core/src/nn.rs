//! Named parameters and the small set of layers the model is built from.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// Buffers such as running statistics are stored but never optimized.
    pub trainable: bool,
}

/// Flat registry of every tensor a model owns, in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, grad: None, trainable });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Registers the parameter on `g` as a gradient-tracked leaf.
    pub fn var<'g>(&self, g: &'g Graph, id: ParamId) -> Var<'g> {
        let p = &self.params[id.0];
        if p.trainable {
            g.tagged_leaf(id.0, || p.value.clone())
        } else {
            g.constant(p.value.clone())
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Moves gradients of this graph's parameter leaves into the store.
    ///
    /// Leaves that received no gradient flow get zeros. Existing gradients
    /// are never summed into: call [`zero_grad`](Self::zero_grad) first.
    pub fn accumulate(&mut self, g: &Graph, grads: &Gradients) -> Result<()> {
        let leaves = g.tagged_leaves();
        if let Some((tag, _)) = leaves.iter().find(|(tag, _)| self.params[*tag].grad.is_some()) {
            return Err(Error::State(format!(
                "gradient for {} already present; call zero_grad before the next backward",
                self.params[*tag].name
            )));
        }
        for (tag, node) in leaves {
            let p = &mut self.params[tag];
            p.grad = Some(match grads.get_id(node) {
                Some(t) => t.clone(),
                None => Tensor::zeros(p.value.shape()),
            });
        }
        Ok(())
    }

    /// Applies buffer updates queued during a training-mode forward.
    pub fn apply_pending(&mut self, g: &Graph) {
        for (tag, value) in g.take_pending() {
            self.params[tag].value = value;
        }
    }
}

/// Draws parameters in a fixed order from a seeded stream.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

pub const INIT_STD: f64 = 0.02;

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: ChaCha8Rng) -> Self {
        Init { store, rng }
    }

    /// Normal(0, std²) truncated to ±2·std by resampling.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                data.push(z * std);
            }
        }
        Tensor::new(shape, data).expect("positive extents")
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }

    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = self.trunc_normal(shape, INIT_STD);
        self.store.add(name, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, value), trainable)
    }
}

/// `y = x·W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = init.weight(&format!("{name}.weight"), &[in_dim, out_dim])?;
        let bias = if bias {
            Some(init.constant(&format!("{name}.bias"), &[out_dim], 0.0, true)?)
        } else {
            None
        };
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward<'g>(&self, store: &ParamStore, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::dim(format!("linear expects last extent {}, got {shape:?}", self.in_dim)));
        }
        let y = x.matmul(store.var(g, self.weight))?;
        match self.bias {
            Some(b) => y.add(store.var(g, b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0, true)?,
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0, true)?,
            eps: 1e-5,
        })
    }

    pub fn forward<'g>(&self, store: &ParamStore, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(store.var(g, self.gamma), store.var(g, self.beta), self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: init.constant(&format!("{name}.gamma"), &[channels], 1.0, true)?,
            beta: init.constant(&format!("{name}.beta"), &[channels], 0.0, true)?,
            running_mean: init.constant(&format!("{name}.running_mean"), &[channels], 0.0, false)?,
            running_var: init.constant(&format!("{name}.running_var"), &[channels], 1.0, false)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// In training mode the updated running statistics are queued on `g`.
    pub fn forward<'g>(&self, store: &ParamStore, g: &'g Graph, x: Var<'g>, mode: Mode) -> Result<Var<'g>> {
        let (rm, rv) = (store.value(self.running_mean), store.value(self.running_var));
        let train = mode == Mode::Train;
        let (y, stats) = x.batch_norm(store.var(g, self.gamma), store.var(g, self.beta), (rm, rv), train, self.eps)?;
        if let Some((mean, var)) = stats {
            let m = self.momentum;
            let blend = |old: &Tensor, new: &Tensor| {
                let data = old.data().iter().zip(new.data()).map(|(o, n)| (1.0 - m) * o + m * n).collect();
                Tensor::new(old.shape(), data).expect("same shape")
            };
            g.push_pending(self.running_mean.0, blend(rm, &mean));
            g.push_pending(self.running_var.0, blend(rv, &var));
        }
        Ok(y)
    }
}

/// Bias-free 2-D convolution over `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Conv2d { kernel: init.weight(&format!("{name}.kernel"), &[c_out, c_in, k, k])?, stride: 1, padding })
    }

    pub fn forward<'g>(&self, store: &ParamStore, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        x.conv2d(store.var(g, self.kernel), self.stride, self.padding)
    }
}
