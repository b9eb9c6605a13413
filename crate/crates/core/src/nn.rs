//! Parameter storage and the dense layers every module is built from.

use std::collections::HashMap;
use std::rc::Rc;

use pcflow_autograd::{Gradients, Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Slope of the leaky rectifier used after every hidden layer.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
    Zeros,
}

/// Named learnable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.lookup.contains_key(name), "duplicate parameter `{name}`");
        self.lookup.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn init(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let value = match init {
            Init::Zeros => Tensor::zeros(rows, cols),
            Init::FanIn => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::from_vec(rows, cols, data)
            }
        };
        self.insert(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor with the same-named entry of `other`.
    pub fn load_from(&mut self, other: &HashMap<String, Tensor>) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter `{name}`")))?;
            if src.shape() != value.shape() {
                return Err(Error::shape("parameter", format!("{name} {:?}", value.shape()), format!("{:?}", src.shape())));
            }
            *value = src.clone();
        }
        Ok(())
    }
}

/// A graph under construction plus lazily bound parameter leaves.
pub struct Ctx<'p> {
    pub graph: Graph,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    track_params: bool,
}

impl<'p> Ctx<'p> {
    /// `track_params` controls whether parameters become tracked leaves.
    pub fn new(params: &'p ParamStore, track_params: bool) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
            track_params,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.params.get(id).clone();
        let v = if self.track_params {
            self.graph.input(t)
        } else {
            self.graph.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Gradients of `loss` for every parameter that took part in the graph;
    /// untouched parameters get zeros.
    pub fn param_gradients(&self, loss: Var) -> Vec<Tensor> {
        let grads: Gradients = self.graph.backward(loss);
        self.params
            .ids()
            .map(|id| match self.bound[id.0] {
                Some(v) => grads.get_or_zeros(v, self.params.get(id)),
                None => {
                    let t = self.params.get(id);
                    Tensor::zeros(t.rows(), t.cols())
                }
            })
            .collect()
    }
}

/// One column block of a layer input: the rows of `value`, optionally
/// gathered through `index`.
#[derive(Clone, Debug)]
pub struct InputPart {
    pub value: Var,
    pub index: Option<Rc<[usize]>>,
}

impl InputPart {
    pub fn rows(value: Var) -> Self {
        Self { value, index: None }
    }

    pub fn gathered(value: Var, index: Rc<[usize]>) -> Self {
        Self {
            value,
            index: Some(index),
        }
    }
}

/// `x · W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.init(&format!("{name}.weight"), in_dim, out_dim, in_dim, init, rng);
        let bias = store.init(&format!("{name}.bias"), 1, out_dim, in_dim, Init::Zeros, rng);
        Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.init(&format!("{name}.weight"), in_dim, out_dim, in_dim, init, rng);
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        debug_assert_eq!(ctx.value(x).cols(), self.in_dim, "linear input width");
        let w = ctx.param(self.weight);
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.graph.affine(x, w, b)
            }
            None => ctx.graph.matmul(x, w),
        }
    }

    /// Equivalent to [`Linear::forward`] on the column concatenation of the
    /// gathered parts. A part is projected before gathering whenever it has
    /// fewer rows than the gathered result.
    pub fn forward_parts(&self, ctx: &mut Ctx, parts: &[InputPart]) -> Var {
        let w = ctx.param(self.weight);
        let mut offset = 0;
        let mut acc: Option<Var> = None;
        for part in parts {
            let (rows, cols) = ctx.value(part.value).shape();
            let g = &mut ctx.graph;
            let wk = g.slice_rows(w, offset, offset + cols);
            offset += cols;
            let y = match &part.index {
                Some(idx) if idx.len() > rows => {
                    let y = g.matmul(part.value, wk);
                    g.gather_rows(y, idx.clone())
                }
                Some(idx) => {
                    let x = g.gather_rows(part.value, idx.clone());
                    g.matmul(x, wk)
                }
                None => g.matmul(part.value, wk),
            };
            acc = Some(match acc {
                Some(a) => g.add(a, y),
                None => y,
            });
        }
        assert_eq!(offset, self.in_dim, "linear input width");
        let y = acc.expect("at least one input part");
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.graph.add_row(y, b)
            }
            None => y,
        }
    }

    /// Plain evaluation of one input row, for reference computations.
    pub fn eval_row(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.weight);
        let mut out = match self.bias {
            Some(b) => store.get(b).data().to_vec(),
            None => vec![0.0; self.out_dim],
        };
        for (i, xi) in x.iter().enumerate() {
            for (o, wij) in out.iter_mut().zip(w.row(i)) {
                *o += xi * wij;
            }
        }
        out
    }
}

/// Stack of linear layers with a leaky rectifier after each hidden layer and,
/// optionally, after the last one.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activate_last: bool,
}

impl Mlp {
    /// `dims` lists the input width followed by every layer's output width.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], activate_last: bool, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], Init::FanIn, rng))
            .collect();
        Self { layers, activate_last }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ctx, h);
            if i < last || self.activate_last {
                h = ctx.graph.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        h
    }

    /// [`Mlp::forward`] with the first layer fed by [`Linear::forward_parts`].
    pub fn forward_parts(&self, ctx: &mut Ctx, parts: &[InputPart]) -> Var {
        let mut h = self.layers[0].forward_parts(ctx, parts);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = layer.forward(ctx, h);
            }
            if i < last || self.activate_last {
                h = ctx.graph.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        h
    }

    pub fn eval_row(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.eval_row(store, &h);
            if i < last || self.activate_last {
                h.iter_mut().for_each(|v| {
                    if *v <= 0.0 {
                        *v *= LEAKY_SLOPE
                    }
                });
            }
        }
        h
    }
}
