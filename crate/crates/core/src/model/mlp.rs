use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

/// A trainable matrix plus its optimizer moments.
///
/// Cloning copies the values into a fresh leaf, so a clone never shares
/// gradient with the original.
#[derive(Debug)]
pub struct Param {
    tensor: Tensor,
    pub(crate) first_moment: Vec<f64>,
    pub(crate) second_moment: Vec<f64>,
    pub(crate) steps: u64,
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Param {
            tensor: Tensor::parameter(self.tensor.matrix().clone()),
            first_moment: self.first_moment.clone(),
            second_moment: self.second_moment.clone(),
            steps: self.steps,
        }
    }
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let n = value.data().len();
        Param {
            tensor: Tensor::parameter(value),
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn matrix(&self) -> &Matrix {
        self.tensor.matrix()
    }

    pub fn values(&self) -> &[f64] {
        self.tensor.values()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tensor.grad()
    }

    /// Swaps in new values; the old graph leaf and its gradient are dropped.
    pub(crate) fn replace(&mut self, values: Vec<f64>) {
        let [r, c] = self.tensor.shape();
        self.tensor = Tensor::parameter(Matrix::new(r, c, values).expect("same shape"));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    None,
}

/// Fully connected layer `y = x·Wᵀ + b` with `W: out×in`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    pub activation: Activation,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bound");
        let data = (0..input * output).map(|_| dist.sample(rng)).collect();
        Dense {
            weight: Param::new(Matrix::new(output, input, data).expect("sized")),
            bias: Param::new(Matrix::zeros(1, output)),
            activation,
        }
    }

    pub fn from_values(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Shape {
                op: "dense",
                left: weight.shape(),
                right: [1, bias.len()],
            });
        }
        Ok(Dense {
            weight: Param::new(weight),
            bias: Param::new(Matrix::row_vector(bias)),
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.matrix().cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.matrix().rows()
    }

    pub fn forward(&self, x: &Tensor, frozen: bool) -> Result<Tensor> {
        let (w, b) = if frozen {
            (self.weight.tensor.detach(), self.bias.tensor.detach())
        } else {
            (self.weight.tensor.clone(), self.bias.tensor.clone())
        };
        let y = x.matmul_nt(&w)?.add_row(&b)?;
        Ok(match self.activation {
            Activation::Relu => y.relu(),
            Activation::None => y,
        })
    }

    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul_nt(self.weight.matrix())?;
        let bias = self.bias.values();
        let n = bias.len();
        let relu = self.activation == Activation::Relu;
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += bias[i % n];
            if relu {
                *v = v.max(0.0);
            }
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        self.weight.values().len() + self.bias.values().len()
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub(crate) fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

/// Stack of dense layers with ReLU between them and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
    frozen: bool,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("bad layer dims {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::None } else { Activation::Relu };
                Dense::init(w[0], w[1], act, rng)
            })
            .collect();
        Ok(Mlp { layers, frozen: false })
    }

    pub fn from_layers(layers: Vec<Dense>, frozen: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("mlp needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape {
                    op: "mlp chain",
                    left: pair[0].weight.matrix().shape(),
                    right: pair[1].weight.matrix().shape(),
                });
            }
        }
        Ok(Mlp { layers, frozen })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Differentiable forward pass. Frozen networks run on detached weights.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, self.frozen)
    }

    /// Forward pass that lets gradient reach `x` but never the weights.
    pub fn forward_detached(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, true)
    }

    fn forward_with(&self, x: &Tensor, frozen: bool) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp forward",
                left: x.shape(),
                right: self.layers[0].weight.matrix().shape(),
            });
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, frozen)?;
        }
        Ok(h)
    }

    /// Tape-free forward pass.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = self.layers[0].infer(x)?;
        for layer in &self.layers[1..] {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(Dense::params)
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(Dense::params_mut)
    }

    /// All parameter values, flattened in layer order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params().flat_map(|p| p.values().iter().copied()).collect()
    }

    /// Largest absolute accumulated gradient over all parameters.
    pub fn max_abs_grad(&self) -> f64 {
        self.params()
            .filter_map(Param::grad)
            .flatten()
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}
