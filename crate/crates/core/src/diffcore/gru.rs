//! Gated recurrent unit with a hand-derived backward pass.
//!
//! Gate layout in the stacked weights is `[reset, update, candidate]`:
//!
//! ```text
//! r  = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z  = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```

use rand::Rng;

use super::layers::logistic;
use super::matrix::{gemm_nn, gemm_nt, gemm_tn_acc, Matrix};
use super::params::{GradientTape, ParamId, ParameterSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub in_dim: usize,
    pub hidden_dim: usize,
}

/// Intermediates of one step, kept for the backward pass.
pub struct GruCache {
    input: Matrix,
    hidden: Matrix,
    reset: Matrix,
    update: Matrix,
    candidate: Matrix,
    /// `W_hn h + b_hn`, needed for the reset-gate gradient.
    hidden_candidate: Matrix,
}

impl GruCell {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<GruCell> {
        let g = 3 * hidden_dim;
        // Both weight blocks use the hidden width as fan-in for the bound, the
        // usual recurrent-cell convention.
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let w_ih = params.insert(format!("{name}.w_ih"), vec![g, in_dim], uniform(g * in_dim))?;
        let w_hh = params.insert(
            format!("{name}.w_hh"),
            vec![g, hidden_dim],
            uniform(g * hidden_dim),
        )?;
        let b_ih = params.insert_zeros(format!("{name}.b_ih"), vec![g])?;
        let b_hh = params.insert_zeros(format!("{name}.b_hh"), vec![g])?;
        Ok(GruCell {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            in_dim,
            hidden_dim,
        })
    }

    /// Batched step. `x` is `[B, in]`, `h` is `[B, hidden]`.
    pub fn forward(&self, params: &ParameterSet, x: Matrix, h: Matrix) -> Result<(Matrix, GruCache)> {
        if x.cols() != self.in_dim || h.cols() != self.hidden_dim || x.rows() != h.rows() {
            return Err(Error::config(format!(
                "gru expects [B,{}] input and [B,{}] hidden, got [{},{}] and [{},{}]",
                self.in_dim,
                self.hidden_dim,
                x.rows(),
                x.cols(),
                h.rows(),
                h.cols()
            )));
        }
        let rows = x.rows();
        let hd = self.hidden_dim;
        let g = 3 * hd;

        let b_ih = params.values(self.b_ih);
        let b_hh = params.values(self.b_hh);
        let mut gi = Matrix::from_fn(rows, g, |_, c| b_ih[c]);
        gemm_nt(x.as_slice(), params.values(self.w_ih), gi.as_mut_slice(), rows, self.in_dim, g, 1.0);
        let mut gh = Matrix::from_fn(rows, g, |_, c| b_hh[c]);
        gemm_nt(h.as_slice(), params.values(self.w_hh), gh.as_mut_slice(), rows, hd, g, 1.0);

        let mut reset = Matrix::zeros(rows, hd);
        let mut update = Matrix::zeros(rows, hd);
        let mut candidate = Matrix::zeros(rows, hd);
        let mut hidden_candidate = Matrix::zeros(rows, hd);
        let mut out = Matrix::zeros(rows, hd);
        for b in 0..rows {
            let gi_r = gi.row(b);
            let gh_r = gh.row(b);
            let h_r = h.row(b);
            for k in 0..hd {
                let r = logistic(gi_r[k] + gh_r[k]);
                let z = logistic(gi_r[hd + k] + gh_r[hd + k]);
                let hn = gh_r[2 * hd + k];
                let n = (gi_r[2 * hd + k] + r * hn).tanh();
                reset.set(b, k, r);
                update.set(b, k, z);
                candidate.set(b, k, n);
                hidden_candidate.set(b, k, hn);
                out.set(b, k, (1.0 - z) * n + z * h_r[k]);
            }
        }
        Ok((
            out,
            GruCache {
                input: x,
                hidden: h,
                reset,
                update,
                candidate,
                hidden_candidate,
            },
        ))
    }

    /// Single-vector step.
    pub fn step(&self, params: &ParameterSet, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        let (out, _) = self.forward(params, Matrix::row_vector(x), Matrix::row_vector(h))?;
        Ok(out.into_vec())
    }

    /// Given `dh'`, accumulates parameter gradients and returns `(dx, dh)`.
    /// `dx` is only computed when `need_input_grad` is set.
    pub fn backward(
        &self,
        params: &ParameterSet,
        cache: &GruCache,
        dout: &Matrix,
        grads: &mut GradientTape,
        need_input_grad: bool,
    ) -> (Option<Matrix>, Matrix) {
        let rows = dout.rows();
        let hd = self.hidden_dim;
        let g = 3 * hd;
        let mut dgi = Matrix::zeros(rows, g);
        let mut dgh = Matrix::zeros(rows, g);
        let mut dh = Matrix::zeros(rows, hd);
        for b in 0..rows {
            let h_r = cache.hidden.row(b);
            for k in 0..hd {
                let d = dout.get(b, k);
                let r = cache.reset.get(b, k);
                let z = cache.update.get(b, k);
                let n = cache.candidate.get(b, k);
                let hn = cache.hidden_candidate.get(b, k);

                let dz = d * (h_r[k] - n);
                let dn = d * (1.0 - z);
                dh.set(b, k, d * z);

                let dn_pre = dn * (1.0 - n * n);
                let dr = dn_pre * hn;
                let dr_pre = dr * r * (1.0 - r);
                let dz_pre = dz * z * (1.0 - z);

                dgi.set(b, k, dr_pre);
                dgi.set(b, hd + k, dz_pre);
                dgi.set(b, 2 * hd + k, dn_pre);
                dgh.set(b, k, dr_pre);
                dgh.set(b, hd + k, dz_pre);
                dgh.set(b, 2 * hd + k, dn_pre * r);
            }
        }

        gemm_tn_acc(dgi.as_slice(), cache.input.as_slice(), grads.grad_mut(self.w_ih), rows, g, self.in_dim);
        gemm_tn_acc(dgh.as_slice(), cache.hidden.as_slice(), grads.grad_mut(self.w_hh), rows, g, hd);
        for b in 0..rows {
            for (acc, v) in grads.grad_mut(self.b_ih).iter_mut().zip(dgi.row(b)) {
                *acc += *v;
            }
            for (acc, v) in grads.grad_mut(self.b_hh).iter_mut().zip(dgh.row(b)) {
                *acc += *v;
            }
        }

        gemm_nn(dgh.as_slice(), params.values(self.w_hh), dh.as_mut_slice(), rows, g, hd, 1.0);
        let dx = need_input_grad.then(|| {
            let mut dx = Matrix::zeros(rows, self.in_dim);
            gemm_nn(dgi.as_slice(), params.values(self.w_ih), dx.as_mut_slice(), rows, g, self.in_dim, 0.0);
            dx
        });
        (dx, dh)
    }
}
