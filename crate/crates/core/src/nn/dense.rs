use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gemm, Matrix};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer `y = act(W x + b)` with `W` stored out×in.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    /// He-normal for relu layers, scaled-uniform (±1/√in) otherwise.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let weight = match activation {
            Activation::Relu => {
                let std = (2.0 / inputs as f64).sqrt();
                let normal = rand_distr::Normal::new(0.0, std).expect("positive std");
                Matrix::from_fn(outputs, inputs, |_, _| rng.sample(normal))
            }
            Activation::Identity => {
                let bound = 1.0 / (inputs as f64).sqrt();
                Matrix::from_fn(outputs, inputs, |_, _| rng.gen_range(-bound..bound))
            }
        };
        DenseLayer {
            weight,
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        DenseLayer {
            weight: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape("DenseLayer", format!("bias of length {}", weight.rows()), bias.len()));
        }
        Ok(DenseLayer { weight, bias, activation })
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.inputs() {
            return Err(Error::shape(
                "dense_forward",
                format!("batch x {}", self.inputs()),
                format!("{}x{}", input.rows(), input.cols()),
            ));
        }
        Ok(())
    }

    /// Forward pass over a batch (one sample per row).
    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut out = Matrix::zeros(input.rows(), self.outputs());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(&self.bias);
        }
        gemm(1.0, input, false, &self.weight, true, 1.0, &mut out);
        if self.activation == Activation::Relu {
            for v in out.as_mut_slice() {
                *v = v.max(0.0);
            }
        }
        Ok(out)
    }

    /// Backward pass given the forward `input`, its `output`, and dL/d`output`.
    /// Returns dL/d`input` and the parameter gradients.
    pub fn backward(&self, input: &Matrix, output: &Matrix, grad_out: &Matrix) -> Result<(Matrix, DenseGrads)> {
        let (grad_in, grads) = self.backward_inner(input, output, grad_out, true)?;
        Ok((grad_in.expect("requested"), grads))
    }

    /// Like [`DenseLayer::backward`] but skips the input gradient, for first layers.
    pub fn backward_params(&self, input: &Matrix, output: &Matrix, grad_out: &Matrix) -> Result<DenseGrads> {
        Ok(self.backward_inner(input, output, grad_out, false)?.1)
    }

    fn backward_inner(
        &self,
        input: &Matrix,
        output: &Matrix,
        grad_out: &Matrix,
        want_input: bool,
    ) -> Result<(Option<Matrix>, DenseGrads)> {
        self.check_input(input)?;
        let expect = (input.rows(), self.outputs());
        if output.shape() != expect || grad_out.shape() != expect {
            return Err(Error::shape(
                "dense_backward",
                format!("{}x{}", expect.0, expect.1),
                format!("{:?} / {:?}", output.shape(), grad_out.shape()),
            ));
        }
        let delta = match self.activation {
            Activation::Identity => grad_out.clone(),
            Activation::Relu => {
                let mut d = grad_out.clone();
                for (g, y) in d.as_mut_slice().iter_mut().zip(output.as_slice()) {
                    if *y <= 0.0 {
                        *g = 0.0;
                    }
                }
                d
            }
        };
        let mut weight = Matrix::zeros(self.outputs(), self.inputs());
        gemm(1.0, &delta, true, input, false, 0.0, &mut weight);
        let mut bias = vec![0.0; self.outputs()];
        for r in 0..delta.rows() {
            for (b, d) in bias.iter_mut().zip(delta.row(r)) {
                *b += d;
            }
        }
        let grad_in = if want_input {
            let mut gi = Matrix::zeros(input.rows(), self.inputs());
            gemm(1.0, &delta, false, &self.weight, false, 0.0, &mut gi);
            Some(gi)
        } else {
            None
        };
        Ok((grad_in, DenseGrads { weight, bias }))
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weight.as_mut_slice(), &mut self.bias]
    }
}

impl DenseGrads {
    pub fn slices(&self) -> [&[f64]; 2] {
        [self.weight.as_slice(), &self.bias]
    }

    pub fn add_assign(&mut self, other: &DenseGrads) {
        self.weight.add_assign(&other.weight);
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}
