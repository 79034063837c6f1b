//! Named parameters and the small layers the model is assembled from.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Float, Gradients, Graph, Tensor, Var};

/// Weight initialisation scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated to ±2·std.
    TruncNormal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether weight decay applies (off for biases and norm parameters).
    pub decay: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Collects parameter declarations while a model is being assembled.
#[derive(Default, Debug)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, decay: bool) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
            decay,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Parameter tensors in declaration order, addressed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn init(specs: Vec<ParamSpec>, rng: &mut impl Rng) -> Self {
        let tensors = specs
            .iter()
            .map(|s| {
                let t = match s.init {
                    Init::Zeros => Tensor::zeros(&s.shape),
                    Init::Ones => Tensor::full(&s.shape, T::one()),
                    Init::TruncNormal(std) => {
                        let normal = Normal::new(0.0, std).expect("finite std");
                        Tensor::from_fn(&s.shape, |_| loop {
                            let v: f64 = normal.sample(rng);
                            if v.abs() <= 2.0 * std {
                                break T::of(v);
                            }
                        })
                    }
                };
                t.with_requires_grad(true)
            })
            .collect();
        ParamStore { specs, tensors }
    }

    /// Store from explicit tensors; shapes must match the specs.
    pub fn from_tensors(specs: Vec<ParamSpec>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if specs.len() != tensors.len() {
            return Err(Error::Validation(format!(
                "{} parameter specs but {} tensors",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::Shape {
                    op: "parameter",
                    lhs: s.shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let tensors = tensors.into_iter().map(|t| t.with_requires_grad(true)).collect();
        Ok(ParamStore { specs, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Records every parameter as a differentiable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            graph,
            vars: self.tensors.iter().map(|t| graph.param(t)).collect(),
        }
    }

    /// Adds `scale · ∂loss/∂θ` into each parameter's gradient slot.
    pub fn accumulate(&mut self, bound: &Bound<'_, T>, grads: &Gradients<T>, scale: T) -> Result<()> {
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.wrt(*v) {
                if scale == T::one() {
                    t.accumulate_grad(g)?;
                } else {
                    let scaled: Vec<T> = g.iter().map(|&x| x * scale).collect();
                    t.accumulate_grad(&scaled)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.zero_grad());
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Parameters recorded on one graph.
pub struct Bound<'g, T: Float> {
    graph: &'g Graph<T>,
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Float> Bound<'g, T> {
    /// Wraps already-recorded variables (one per parameter, in order).
    pub fn from_vars(graph: &'g Graph<T>, vars: Vec<Var<'g, T>>) -> Self {
        Bound { graph, vars }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn get(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}

pub const WEIGHT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        let weight = b.add(format!("{name}.weight"), &[cin, cout], Init::TruncNormal(WEIGHT_STD), true);
        let bias = bias.then(|| b.add(format!("{name}.bias"), &[cout], Init::Zeros, false));
        Linear {
            weight,
            bias,
            cin,
            cout,
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.linear(p.get(self.weight), self.bias.map(|b| p.get(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize) -> Self {
        LayerNorm {
            gamma: b.add(format!("{name}.gamma"), &[c], Init::Ones, false),
            beta: b.add(format!("{name}.beta"), &[c], Init::Zeros, false),
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), T::of(LN_EPS))
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut ParamBuilder, name: &str, cin: usize, hidden: usize, cout: usize) -> Self {
        Mlp {
            fc1: Linear::new(b, &format!("{name}.fc1"), cin, hidden, true),
            fc2: Linear::new(b, &format!("{name}.fc2"), hidden, cout, true),
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.fc1.forward(p, x)?.gelu()?;
        self.fc2.forward(p, h)
    }
}
