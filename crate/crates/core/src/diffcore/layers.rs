use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{gemm_nn, gemm_nt, gemm_tn_acc, Matrix};
use super::params::{GradientTape, ParamId, ParameterSet};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Elu,
    Logistic,
    Tanh,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Logistic => logistic(x),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative at pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Logistic => {
                let s = logistic(x);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => logistic(x),
        }
    }

    pub fn forward(self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.apply(v)).collect()
    }

    pub fn forward_matrix(self, x: &Matrix) -> Matrix {
        x.map(|v| self.apply(v))
    }

    /// Chain rule through the activation: `dy ⊙ f'(pre)`.
    pub fn backward_matrix(self, pre: &Matrix, dy: &Matrix) -> Matrix {
        pre.zip_map(dy, |x, g| g * self.derivative(x))
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + eˣ) without overflow for large x.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Fully connected layer `y = x·Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    /// Registers `{name}.weight` and `{name}.bias` with the standard initialization.
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Dense> {
        let weight = params.insert_uniform(format!("{name}.weight"), out_dim, in_dim, rng)?;
        let bias = params.insert_zeros(format!("{name}.bias"), vec![out_dim])?;
        Ok(Dense {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, params: &ParameterSet, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim {
            return Err(Error::config(format!(
                "dense layer expects {} inputs, got {}",
                self.in_dim,
                x.cols()
            )));
        }
        let b = params.values(self.bias);
        let mut y = Matrix::from_fn(x.rows(), self.out_dim, |_, c| b[c]);
        gemm_nt(
            x.as_slice(),
            params.values(self.weight),
            y.as_mut_slice(),
            x.rows(),
            self.in_dim,
            self.out_dim,
            1.0,
        );
        Ok(y)
    }

    /// Single-vector forward pass.
    pub fn forward_vec(&self, params: &ParameterSet, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(params, &Matrix::row_vector(x))?.into_vec())
    }

    /// Accumulates weight/bias gradients and, when `need_input_grad`, returns `dx`.
    pub fn backward(
        &self,
        params: &ParameterSet,
        x: &Matrix,
        dy: &Matrix,
        grads: &mut GradientTape,
        need_input_grad: bool,
    ) -> Option<Matrix> {
        debug_assert_eq!(dy.cols(), self.out_dim);
        debug_assert_eq!(dy.rows(), x.rows());
        let rows = x.rows();
        gemm_tn_acc(
            dy.as_slice(),
            x.as_slice(),
            grads.grad_mut(self.weight),
            rows,
            self.out_dim,
            self.in_dim,
        );
        let db = grads.grad_mut(self.bias);
        for r in 0..rows {
            for (g, d) in db.iter_mut().zip(dy.row(r)) {
                *g += *d;
            }
        }
        need_input_grad.then(|| {
            let mut dx = Matrix::zeros(rows, self.in_dim);
            gemm_nn(
                dy.as_slice(),
                params.values(self.weight),
                dx.as_mut_slice(),
                rows,
                self.out_dim,
                self.in_dim,
                0.0,
            );
            dx
        })
    }
}

/// Dense layer followed by an activation, caching the pre-activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseAct {
    pub dense: Dense,
    pub act: Activation,
}

pub struct DenseActCache {
    pub input: Matrix,
    pub pre: Matrix,
}

impl DenseAct {
    pub fn forward(&self, params: &ParameterSet, x: Matrix) -> Result<(Matrix, DenseActCache)> {
        let pre = self.dense.forward(params, &x)?;
        let out = self.act.forward_matrix(&pre);
        Ok((out, DenseActCache { input: x, pre }))
    }

    pub fn backward(
        &self,
        params: &ParameterSet,
        cache: &DenseActCache,
        dy: &Matrix,
        grads: &mut GradientTape,
        need_input_grad: bool,
    ) -> Option<Matrix> {
        let dpre = self.act.backward_matrix(&cache.pre, dy);
        self.dense
            .backward(params, &cache.input, &dpre, grads, need_input_grad)
    }
}
