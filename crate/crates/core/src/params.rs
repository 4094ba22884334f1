//! Named parameter storage and the per-pass binding of parameters into a tape.

use rand::Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named weight tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor from `(name, tensor)` pairs, checking that the
    /// names and shapes match this set exactly.
    pub fn load_named<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut staged: Vec<Option<Tensor>> = vec![None; self.len()];
        for (name, t) in entries {
            let Some(id) = self.find(name) else {
                return Err(Error::MissingTensor(format!("{name} (not part of the configured model)")));
            };
            let expected = self.tensors[id.0].shape();
            if expected != t.shape() {
                return Err(Error::TensorShape {
                    name: name.to_string(),
                    expected: expected.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            staged[id.0] = Some(t.clone());
        }
        if let Some(i) = staged.iter().position(Option::is_none) {
            return Err(Error::MissingTensor(self.names[i].clone()));
        }
        self.tensors = staged.into_iter().map(|t| t.expect("checked above")).collect();
        Ok(())
    }
}

/// He-uniform initialization: `U(−√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// A tape plus lazily created leaf variables for parameters.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
    bound: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(params: &'p ParamSet, tape: Tape) -> Self {
        Self {
            tape,
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    /// Uses `var` for parameter `id` in this pass instead of a fresh leaf.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Gradient of every parameter (zeros for parameters not used in this pass).
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.params
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(self.params.get(id).shape()))
            })
            .collect()
    }
}

/// 2-D convolution layer (`k×k`, square) with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            he_uniform(&[out_channels, in_channels, kernel, kernel], in_channels * kernel * kernel, rng),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            kernel,
            stride,
            padding,
        }
    }

    /// `3×3`, stride 1, same padding.
    pub fn same3<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new(params, name, cin, cout, 3, 1, 1, rng)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.tape.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn forward_relu(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.forward(g, x)?;
        Ok(g.tape.relu(y))
    }
}
