//! Basic differentiable layers: linear, layer norm, relu.

use ndarray::{Array1, Array2, ArrayView2, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::store::{ParamId, TensorSet};
use crate::Real;

/// Uniform Xavier/Glorot initialization.
pub fn xavier<F: Real>(rng: &mut ChaCha8Rng, din: usize, dout: usize, gain: f64) -> Array2<F> {
    let bound = gain * (6.0 / (din + dout) as f64).sqrt();
    Array2::from_shape_fn((din, dout), |_| {
        F::from_f64(rng.random_range(-bound..bound))
    })
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<F: Real>(
        ps: &mut TensorSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        gain: f64,
    ) -> Self {
        let w = ps.alloc(
            &format!("{name}.w"),
            xavier::<F>(rng, din, dout, gain).into_dyn(),
        );
        let b = ps.alloc(
            &format!("{name}.b"),
            ndarray::ArrayD::zeros(IxDyn(&[dout])),
        );
        Self { w, b, din, dout }
    }

    /// `y = x·W + b` for `x: [n, din]`.
    pub fn fwd<F: Real>(&self, ps: &TensorSet<F>, x: ArrayView2<F>) -> Array2<F> {
        debug_assert_eq!(x.ncols(), self.din);
        let mut y = x.dot(&ps.view2(self.w));
        y += &ps.view1(self.b);
        y
    }

    /// Accumulates `dW`, `db` into `g` and returns `dx`.
    pub fn bwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        x: ArrayView2<F>,
        dy: ArrayView2<F>,
        g: &mut TensorSet<F>,
    ) -> Array2<F> {
        let dw = x.t().dot(&dy);
        let db = dy.sum_axis(Axis(0));
        *g.get_mut(self.w) += &dw.into_dyn();
        *g.get_mut(self.b) += &db.into_dyn();
        dy.dot(&ps.view2(self.w).t())
    }

    /// `dx` only; parameter gradients are deliberately not accumulated.
    /// Used where a loss must treat this layer's weights as constants.
    pub fn bwd_input_only<F: Real>(&self, ps: &TensorSet<F>, dy: ArrayView2<F>) -> Array2<F> {
        dy.dot(&ps.view2(self.w).t())
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache<F: Real> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<F: Real>(ps: &mut TensorSet<F>, name: &str, dim: usize) -> Self {
        let gamma = ps.alloc(
            &format!("{name}.gamma"),
            ndarray::ArrayD::from_elem(IxDyn(&[dim]), F::one()),
        );
        let beta = ps.alloc(&format!("{name}.beta"), ndarray::ArrayD::zeros(IxDyn(&[dim])));
        Self { gamma, beta, dim }
    }

    pub fn fwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        x: ArrayView2<F>,
    ) -> (Array2<F>, LayerNormCache<F>) {
        let n = x.nrows();
        let d = F::from_f64(self.dim as f64);
        let eps = F::from_f64(LN_EPS);
        let mut xhat = Array2::zeros((n, self.dim));
        let mut inv_std = Array1::zeros(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.sum() / d;
            let mut var = F::zero();
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var /= d;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..self.dim {
                xhat[[i, j]] = (row[j] - mean) * istd;
            }
        }
        let gamma = ps.view1(self.gamma);
        let beta = ps.view1(self.beta);
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            for j in 0..self.dim {
                row[j] = row[j] * gamma[j] + beta[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn bwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        cache: &LayerNormCache<F>,
        dy: ArrayView2<F>,
        g: &mut TensorSet<F>,
    ) -> Array2<F> {
        let n = dy.nrows();
        let d = F::from_f64(self.dim as f64);
        let gamma = ps.view1(self.gamma);

        {
            let dgamma = g.get_mut(self.gamma).as_slice_mut().unwrap();
            for i in 0..n {
                for j in 0..self.dim {
                    dgamma[j] += dy[[i, j]] * cache.xhat[[i, j]];
                }
            }
        }
        {
            let dbeta = g.get_mut(self.beta).as_slice_mut().unwrap();
            for i in 0..n {
                for j in 0..self.dim {
                    dbeta[j] += dy[[i, j]];
                }
            }
        }

        let mut dx = Array2::zeros((n, self.dim));
        for i in 0..n {
            let mut mean_dxhat = F::zero();
            let mut mean_dxhat_xhat = F::zero();
            for j in 0..self.dim {
                let dxhat = dy[[i, j]] * gamma[j];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * cache.xhat[[i, j]];
            }
            mean_dxhat /= d;
            mean_dxhat_xhat /= d;
            for j in 0..self.dim {
                let dxhat = dy[[i, j]] * gamma[j];
                dx[[i, j]] =
                    cache.inv_std[i] * (dxhat - mean_dxhat - cache.xhat[[i, j]] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

pub fn relu<F: Real>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// `dx = dy ⊙ 1[y > 0]`, with `y` the relu output.
pub fn relu_bwd<F: Real>(y: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &yv| {
        if yv <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}
