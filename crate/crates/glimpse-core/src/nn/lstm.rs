//! Stacked LSTM sequence encoder, interface-compatible with the temporal
//! transformer (tokens in, one embedding per step out).

use ndarray::{Array2, ArrayView2, ArrayView1};
use rand_chacha::ChaCha8Rng;

use super::layers::xavier;
use super::store::{ParamId, TensorSet};
use crate::Real;

/// One LSTM layer. Weights are stored as `[din, 4h]` / `[h, 4h]` with gate
/// order (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub hidden: usize,
}

struct StepCache<F: Real> {
    gates: Array2<F>,
    c: Array2<F>,
    tanh_c: Array2<F>,
}

pub struct LstmLayerCache<F: Real> {
    steps: Vec<StepCache<F>>,
    h_states: Vec<Array2<F>>,
    inputs: Array2<F>,
}

impl LstmLayer {
    pub fn new<F: Real>(
        ps: &mut TensorSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        hidden: usize,
    ) -> Self {
        let w_ih = ps.alloc(
            &format!("{name}.w_ih"),
            xavier::<F>(rng, din, 4 * hidden, 1.0).into_dyn(),
        );
        let w_hh = ps.alloc(
            &format!("{name}.w_hh"),
            xavier::<F>(rng, hidden, 4 * hidden, 1.0).into_dyn(),
        );
        let bias = ps.alloc(
            &format!("{name}.bias"),
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[4 * hidden])),
        );
        Self {
            w_ih,
            w_hh,
            bias,
            din,
            hidden,
        }
    }

    fn sigmoid<F: Real>(x: F) -> F {
        F::one() / (F::one() + (-x).exp())
    }

    /// `x: [b*t, din]` → `[b*t, hidden]`, zero initial state.
    pub fn fwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        x: ArrayView2<F>,
        b: usize,
        t: usize,
    ) -> (Array2<F>, LstmLayerCache<F>) {
        let h = self.hidden;
        let w_ih = ps.view2(self.w_ih);
        let w_hh = ps.view2(self.w_hh);
        let bias: ArrayView1<F> = ps.view1(self.bias);
        let mut out = Array2::zeros((b * t, h));
        let mut steps = Vec::with_capacity(t);
        let mut h_states = Vec::with_capacity(t + 1);
        let mut h_prev = Array2::<F>::zeros((b, h));
        let mut c_prev = Array2::<F>::zeros((b, h));
        h_states.push(h_prev.clone());

        for s in 0..t {
            // Rows of step s across the batch.
            let mut xs = Array2::<F>::zeros((b, self.din));
            for bi in 0..b {
                xs.row_mut(bi).assign(&x.row(bi * t + s));
            }
            let mut gates = xs.dot(&w_ih) + h_prev.dot(&w_hh);
            for mut row in gates.rows_mut() {
                for k in 0..4 * h {
                    row[k] += bias[k];
                }
            }
            let mut c = Array2::<F>::zeros((b, h));
            let mut tanh_c = Array2::<F>::zeros((b, h));
            let mut h_new = Array2::<F>::zeros((b, h));
            for bi in 0..b {
                for k in 0..h {
                    let i = Self::sigmoid(gates[[bi, k]]);
                    let f = Self::sigmoid(gates[[bi, h + k]]);
                    let gc = gates[[bi, 2 * h + k]].tanh();
                    let o = Self::sigmoid(gates[[bi, 3 * h + k]]);
                    // Store activated gates for the backward pass.
                    gates[[bi, k]] = i;
                    gates[[bi, h + k]] = f;
                    gates[[bi, 2 * h + k]] = gc;
                    gates[[bi, 3 * h + k]] = o;
                    let cv = f * c_prev[[bi, k]] + i * gc;
                    c[[bi, k]] = cv;
                    let tc = cv.tanh();
                    tanh_c[[bi, k]] = tc;
                    h_new[[bi, k]] = o * tc;
                }
            }
            for bi in 0..b {
                out.row_mut(bi * t + s).assign(&h_new.row(bi));
            }
            steps.push(StepCache {
                gates,
                c: c_prev.clone(),
                tanh_c,
            });
            c_prev = c;
            h_prev = h_new;
            h_states.push(h_prev.clone());
        }

        (
            out,
            LstmLayerCache {
                steps,
                h_states,
                inputs: x.to_owned(),
            },
        )
    }

    pub fn bwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        cache: &LstmLayerCache<F>,
        dy: ArrayView2<F>,
        b: usize,
        t: usize,
        g: &mut TensorSet<F>,
    ) -> Array2<F> {
        let h = self.hidden;
        let w_ih = ps.view2(self.w_ih);
        let w_hh = ps.view2(self.w_hh);
        let one = F::one();
        let mut dx = Array2::<F>::zeros((b * t, self.din));
        let mut dh_next = Array2::<F>::zeros((b, h));
        let mut dc_next = Array2::<F>::zeros((b, h));
        let mut dw_ih = Array2::<F>::zeros((self.din, 4 * h));
        let mut dw_hh = Array2::<F>::zeros((h, 4 * h));
        let mut dbias = ndarray::Array1::<F>::zeros(4 * h);

        for s in (0..t).rev() {
            let step = &cache.steps[s];
            let mut dgates = Array2::<F>::zeros((b, 4 * h));
            for bi in 0..b {
                for k in 0..h {
                    let i = step.gates[[bi, k]];
                    let f = step.gates[[bi, h + k]];
                    let gc = step.gates[[bi, 2 * h + k]];
                    let o = step.gates[[bi, 3 * h + k]];
                    let tc = step.tanh_c[[bi, k]];
                    let dh = dy[[bi * t + s, k]] + dh_next[[bi, k]];
                    let dc = dh * o * (one - tc * tc) + dc_next[[bi, k]];
                    let do_ = dh * tc;
                    let di = dc * gc;
                    let dgc = dc * i;
                    let df = dc * step.c[[bi, k]];
                    dgates[[bi, k]] = di * i * (one - i);
                    dgates[[bi, h + k]] = df * f * (one - f);
                    dgates[[bi, 2 * h + k]] = dgc * (one - gc * gc);
                    dgates[[bi, 3 * h + k]] = do_ * o * (one - o);
                    dc_next[[bi, k]] = dc * f;
                }
            }
            // Parameter and input gradients for this step.
            let mut xs = Array2::<F>::zeros((b, self.din));
            for bi in 0..b {
                xs.row_mut(bi).assign(&cache.inputs.row(bi * t + s));
            }
            dw_ih += &xs.t().dot(&dgates);
            dw_hh += &cache.h_states[s].t().dot(&dgates);
            for bi in 0..b {
                for k in 0..4 * h {
                    dbias[k] += dgates[[bi, k]];
                }
            }
            let dxs = dgates.dot(&w_ih.t());
            for bi in 0..b {
                dx.row_mut(bi * t + s).assign(&dxs.row(bi));
            }
            dh_next = dgates.dot(&w_hh.t());
        }

        *g.get_mut(self.w_ih) += &dw_ih.into_dyn();
        *g.get_mut(self.w_hh) += &dw_hh.into_dyn();
        *g.get_mut(self.bias) += &dbias.into_dyn();
        dx
    }
}

/// Stack of LSTM layers used as a drop-in replacement for the temporal
/// transformer.
#[derive(Debug, Clone)]
pub struct LstmEncoder {
    pub layers: Vec<LstmLayer>,
}

pub struct LstmCache<F: Real> {
    layer_caches: Vec<LstmLayerCache<F>>,
}

impl LstmEncoder {
    pub fn new<F: Real>(
        ps: &mut TensorSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        hidden: usize,
        layers: usize,
    ) -> Self {
        let layers = (0..layers)
            .map(|i| {
                let d = if i == 0 { din } else { hidden };
                LstmLayer::new(ps, rng, &format!("{name}.layer{i}"), d, hidden)
            })
            .collect();
        Self { layers }
    }

    pub fn fwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        tokens: ArrayView2<F>,
        b: usize,
        t: usize,
    ) -> (Array2<F>, LstmCache<F>) {
        let mut h = tokens.to_owned();
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.fwd(ps, h.view(), b, t);
            layer_caches.push(cache);
            h = next;
        }
        (h, LstmCache { layer_caches })
    }

    pub fn bwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        cache: &LstmCache<F>,
        dm: ArrayView2<F>,
        b: usize,
        t: usize,
        g: &mut TensorSet<F>,
    ) -> Array2<F> {
        let mut dh = dm.to_owned();
        for (layer, lc) in self.layers.iter().zip(cache.layer_caches.iter()).rev() {
            dh = layer.bwd(ps, lc, dh.view(), b, t, g);
        }
        dh
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = TensorSet::<f64>::new();
        let enc = LstmEncoder::new(&mut ps, &mut rng, "lstm", 4, 6, 2);
        ps.zero_all();
        let tokens = Array2::from_shape_fn((8, 4), |_| rng.random_range(-1.0..1.0));
        let (m, _) = enc.fwd(&ps, tokens.view(), 2, 4);
        assert!(m.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn causality_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = TensorSet::<f64>::new();
        let enc = LstmEncoder::new(&mut ps, &mut rng, "lstm", 4, 6, 2);
        let b = 2;
        let t = 5;
        let tokens = Array2::from_shape_fn((b * t, 4), |_| rng.random_range(-1.0..1.0));
        let (m, _) = enc.fwd(&ps, tokens.view(), b, t);
        let mut tokens2 = tokens.clone();
        for bi in 0..b {
            for c in 0..4 {
                tokens2[[bi * t + t - 1, c]] = 99.0;
            }
        }
        let (m2, _) = enc.fwd(&ps, tokens2.view(), b, t);
        for bi in 0..b {
            for s in 0..t - 1 {
                for c in 0..6 {
                    assert_eq!(m[[bi * t + s, c]], m2[[bi * t + s, c]]);
                }
            }
        }
    }

    #[test]
    fn single_step_equals_one_step_unroll() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = TensorSet::<f64>::new();
        let enc = LstmEncoder::new(&mut ps, &mut rng, "lstm", 4, 6, 1);
        let tokens = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        // Three independent length-1 sequences vs the same rows as a batch.
        let (m_batch, _) = enc.fwd(&ps, tokens.view(), 3, 1);
        for i in 0..3 {
            let row = tokens.row(i).insert_axis(ndarray::Axis(0)).to_owned();
            let (m_one, _) = enc.fwd(&ps, row.view(), 1, 1);
            for c in 0..6 {
                assert_eq!(m_one[[0, c]], m_batch[[i, c]]);
            }
        }
    }

    #[test]
    fn lstm_backward_matches_numeric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = TensorSet::<f64>::new();
        let enc = LstmEncoder::new(&mut ps, &mut rng, "lstm", 3, 5, 2);
        let b = 2;
        let t = 4;
        let tokens = Array2::from_shape_fn((b * t, 3), |_| rng.random_range(-1.0..1.0));
        let loss = |p: &TensorSet<f64>| {
            let (m, _) = enc.fwd(p, tokens.view(), b, t);
            m.iter()
                .enumerate()
                .map(|(i, v)| ((i % 7) as f64 * 0.11 + 0.4) * v * v)
                .sum::<f64>()
        };
        let (m, cache) = enc.fwd(&ps, tokens.view(), b, t);
        let mut dm = m.clone();
        for (i, v) in dm.iter_mut().enumerate() {
            *v = 2.0 * ((i % 7) as f64 * 0.11 + 0.4) * m.as_slice().unwrap()[i];
        }
        let mut g = ps.zeros_like();
        enc.bwd(&ps, &cache, dm.view(), b, t, &mut g);

        let mut checked = 0;
        for flat in (0..ps.flat_len()).step_by(11) {
            let h = 1e-5;
            let mut plus = ps.clone();
            plus.add_flat(flat, h);
            let mut minus = ps.clone();
            minus.add_flat(flat, -h);
            let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let ana = g.get_flat(flat);
            let denom = num.abs().max(ana.abs()).max(1e-6);
            assert!(
                (num - ana).abs() / denom < 1e-5,
                "flat {flat}: analytic {ana} vs numeric {num}"
            );
            checked += 1;
        }
        assert!(checked > 20);
    }
}
