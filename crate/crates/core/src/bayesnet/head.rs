//! Conditional-parameter heads: one hidden layer fed by the sum of per-parent
//! projections, `out = W_out^T relu(sum_p x_p W_p + b) + b_out`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpHead {
    /// One `(input_dim x hidden)` matrix per input, in parent order.
    pub input_proj: Vec<DMatrix<f64>>,
    pub hidden_bias: DVector<f64>,
    /// `(hidden x output_dim)`.
    pub output_proj: DMatrix<f64>,
    pub output_bias: DVector<f64>,
}

/// Batched activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct HeadTrace {
    pre: DMatrix<f64>,
    hidden: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub input_proj: Vec<DMatrix<f64>>,
    pub hidden_bias: DVector<f64>,
    pub output_proj: DMatrix<f64>,
    pub output_bias: DVector<f64>,
}

impl MlpHead {
    /// He-initialized input projections; output projection zeroed and the
    /// output bias set to `output_bias`.
    pub fn new<R: Rng + ?Sized>(input_dims: &[usize], hidden: usize, output_bias: Vec<f64>, rng: &mut R) -> Self {
        let fan_in: usize = input_dims.iter().sum::<usize>().max(1);
        let std = (2.0 / fan_in as f64).sqrt();
        let input_proj = input_dims
            .iter()
            .map(|&d| DMatrix::from_fn(d, hidden, |_, _| std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let out = output_bias.len();
        MlpHead {
            input_proj,
            hidden_bias: DVector::zeros(hidden),
            output_proj: DMatrix::zeros(hidden, out),
            output_bias: DVector::from_vec(output_bias),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_bias.len()
    }

    pub fn output_dim(&self) -> usize {
        self.output_bias.len()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.input_proj.iter().map(|m| m.nrows()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.input_proj.iter().map(|m| m.len()).sum::<usize>()
            + self.hidden_bias.len()
            + self.output_proj.len()
            + self.output_bias.len()
    }

    fn check_inputs(&self, inputs: &[&DMatrix<f64>]) -> Result<usize> {
        if inputs.len() != self.input_proj.len() {
            return Err(Error::DimensionMismatch { expected: self.input_proj.len(), got: inputs.len() });
        }
        let n = inputs.first().map(|x| x.nrows()).unwrap_or(1);
        for (x, w) in inputs.iter().zip(&self.input_proj) {
            if x.ncols() != w.nrows() {
                return Err(Error::DimensionMismatch { expected: w.nrows(), got: x.ncols() });
            }
            if x.nrows() != n {
                return Err(Error::DimensionMismatch { expected: n, got: x.nrows() });
            }
        }
        Ok(n)
    }

    /// Rows of every input matrix are samples; returns `(n x output_dim)`.
    pub fn forward(&self, inputs: &[&DMatrix<f64>]) -> Result<(DMatrix<f64>, HeadTrace)> {
        let n = self.check_inputs(inputs)?;
        let mut pre = DMatrix::zeros(n, self.hidden_dim());
        for (x, w) in inputs.iter().zip(&self.input_proj) {
            pre.gemm(1.0, x, w, 1.0);
        }
        for mut row in pre.row_iter_mut() {
            row += self.hidden_bias.transpose();
        }
        let hidden = pre.map(|v| v.max(0.0));
        let mut out = &hidden * &self.output_proj;
        for mut row in out.row_iter_mut() {
            row += self.output_bias.transpose();
        }
        Ok((out, HeadTrace { pre, hidden }))
    }

    pub fn forward_one(&self, inputs: &[&[f64]]) -> Result<Vec<f64>> {
        let mats: Vec<DMatrix<f64>> = inputs.iter().map(|x| DMatrix::from_row_slice(1, x.len(), x)).collect();
        let refs: Vec<&DMatrix<f64>> = mats.iter().collect();
        let (out, _) = self.forward(&refs)?;
        Ok(out.row(0).iter().cloned().collect())
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to each input for which `want_input[i]` is set.
    pub fn backward(
        &self,
        inputs: &[&DMatrix<f64>],
        trace: &HeadTrace,
        grad_out: &DMatrix<f64>,
        grad: &mut HeadGrad,
        want_input: &[bool],
    ) -> Vec<Option<DMatrix<f64>>> {
        grad.output_proj.gemm_tr(1.0, &trace.hidden, grad_out, 1.0);
        for row in grad_out.row_iter() {
            grad.output_bias += row.transpose();
        }
        let mut g_pre = grad_out * self.output_proj.transpose();
        g_pre.zip_apply(&trace.pre, |g, p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        for row in g_pre.row_iter() {
            grad.hidden_bias += row.transpose();
        }
        let mut out = Vec::with_capacity(inputs.len());
        for (i, (x, w)) in inputs.iter().zip(&self.input_proj).enumerate() {
            grad.input_proj[i].gemm_tr(1.0, x, &g_pre, 1.0);
            out.push(want_input.get(i).copied().unwrap_or(false).then(|| &g_pre * w.transpose()));
        }
        out
    }

    pub fn zero_grad(&self) -> HeadGrad {
        HeadGrad {
            input_proj: self.input_proj.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect(),
            hidden_bias: DVector::zeros(self.hidden_bias.len()),
            output_proj: DMatrix::zeros(self.output_proj.nrows(), self.output_proj.ncols()),
            output_bias: DVector::zeros(self.output_bias.len()),
        }
    }

    /// Parameter blocks in a fixed order, for optimizers.
    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.input_proj.iter_mut().map(|m| m.as_mut_slice()).collect();
        v.push(self.hidden_bias.as_mut_slice());
        v.push(self.output_proj.as_mut_slice());
        v.push(self.output_bias.as_mut_slice());
        v
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.input_proj.iter().map(|m| m.as_slice()).collect();
        v.push(self.hidden_bias.as_slice());
        v.push(self.output_proj.as_slice());
        v.push(self.output_bias.as_slice());
        v
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl HeadGrad {
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.input_proj.iter().map(|m| m.as_slice()).collect();
        v.push(self.hidden_bias.as_slice());
        v.push(self.output_proj.as_slice());
        v.push(self.output_bias.as_slice());
        v
    }

    pub fn scale(&mut self, s: f64) {
        for m in &mut self.input_proj {
            *m *= s;
        }
        self.hidden_bias *= s;
        self.output_proj *= s;
        self.output_bias *= s;
    }
}
