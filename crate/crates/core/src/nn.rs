//! Two-layer perceptrons (`Linear -> ReLU -> Linear`, hidden width 32).

use rand::Rng;

use crate::autodiff::{matmul_bias, AutodiffError, Tape, Tensor, Var};

pub const HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Tape handles for one MLP's parameters.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    pub fn as_array(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl Mlp {
    /// Uniform fan-in initialization, the usual `Linear` default.
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let layer = |fan_in: usize, fan_out: usize, rng: &mut dyn rand::RngCore| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            (
                Tensor::matrix(fan_in, fan_out, w).expect("sized"),
                Tensor::vector(b),
            )
        };
        let (w1, b1) = layer(input, hidden, rng);
        let (w2, b2) = layer(hidden, output, rng);
        Self { w1, b1, w2, b2 }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Tensor::zeros(vec![input, hidden]),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::zeros(vec![hidden, output]),
            b2: Tensor::zeros(vec![output]),
        }
    }

    /// Zeroes the output layer so the head starts at its bias.
    pub fn with_zero_output(mut self) -> Self {
        self.w2 = Tensor::zeros(self.w2.shape().to_vec());
        self.b2 = Tensor::zeros(self.b2.shape().to_vec());
        self
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn record(&self, tape: &mut Tape, requires_grad: bool) -> MlpVars {
        MlpVars {
            w1: tape.leaf(self.w1.clone(), requires_grad),
            b1: tape.leaf(self.b1.clone(), requires_grad),
            w2: tape.leaf(self.w2.clone(), requires_grad),
            b2: tape.leaf(self.b2.clone(), requires_grad),
        }
    }

    pub fn apply(tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var, AutodiffError> {
        let h = tape.linear(x, vars.w1, vars.b1)?;
        let h = tape.relu(h);
        tape.linear(h, vars.w2, vars.b2)
    }

    /// Tape-free evaluation on `x[n, input]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, AutodiffError> {
        let (n, din) = x.dims2().ok_or(AutodiffError::Shape {
            op: "mlp",
            detail: format!("input must be 2-D, got {:?}", x.shape()),
        })?;
        if din != self.input_dim() {
            return Err(AutodiffError::Shape {
                op: "mlp",
                detail: format!("input width {din}, expected {}", self.input_dim()),
            });
        }
        let (h, o) = (self.hidden_dim(), self.output_dim());
        let mut hid = matmul_bias(x.data(), self.w1.data(), Some(self.b1.data()), n, din, h);
        hid.iter_mut().for_each(|v| *v = v.max(0.0));
        let out = matmul_bias(&hid, self.w2.data(), Some(self.b2.data()), n, h, o);
        Tensor::matrix(n, o, out)
    }
}
