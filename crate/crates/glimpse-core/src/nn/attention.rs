//! Multi-head self-attention, pre-norm transformer blocks, and the temporal
//! encoder producing one embedding per timestep.

use ndarray::{Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use super::layers::{relu, relu_bwd, LayerNorm, LayerNormCache, Linear};
use super::store::{ParamId, TensorSet};
use crate::Real;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
    pub causal: bool,
}

pub struct MhaCache<F: Real> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Attention probabilities, one `[t, t]` matrix per `(batch, head)`.
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
    b: usize,
    t: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real>(
        ps: &mut TensorSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
        causal: bool,
    ) -> Self {
        assert_eq!(d % heads, 0, "model dim must divide evenly into heads");
        Self {
            wq: Linear::new(ps, rng, &format!("{name}.wq"), d, d, 1.0),
            wk: Linear::new(ps, rng, &format!("{name}.wk"), d, d, 1.0),
            wv: Linear::new(ps, rng, &format!("{name}.wv"), d, d, 1.0),
            wo: Linear::new(ps, rng, &format!("{name}.wo"), d, d, 1.0),
            heads,
            d,
            causal,
        }
    }

    /// `x: [b*t, d]` flattened sequences. Returns `[b*t, d]`.
    pub fn fwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        x: ArrayView2<F>,
        b: usize,
        t: usize,
    ) -> (Array2<F>, MhaCache<F>) {
        debug_assert_eq!(x.nrows(), b * t);
        let dh = self.d / self.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let q = self.wq.fwd(ps, x);
        let k = self.wk.fwd(ps, x);
        let v = self.wv.fwd(ps, x);
        let mut ctx = Array2::<F>::zeros((b * t, self.d));
        let mut probs = Vec::with_capacity(b * self.heads);

        for bi in 0..b {
            for h in 0..self.heads {
                let off = h * dh;
                let mut p = Array2::<F>::zeros((t, t));
                for i in 0..t {
                    let qi = q.row(bi * t + i);
                    let limit = if self.causal { i + 1 } else { t };
                    // Scores with running max for a stable softmax.
                    let mut row_max = F::neg_infinity();
                    for j in 0..limit {
                        let kj = k.row(bi * t + j);
                        let mut s = F::zero();
                        for c in 0..dh {
                            s += qi[off + c] * kj[off + c];
                        }
                        s *= scale;
                        p[[i, j]] = s;
                        if s > row_max {
                            row_max = s;
                        }
                    }
                    let mut denom = F::zero();
                    for j in 0..limit {
                        let e = (p[[i, j]] - row_max).exp();
                        p[[i, j]] = e;
                        denom += e;
                    }
                    for j in 0..limit {
                        p[[i, j]] /= denom;
                    }
                    // Context row.
                    let mut acc = vec![F::zero(); dh];
                    for j in 0..limit {
                        let w = p[[i, j]];
                        let vj = v.row(bi * t + j);
                        for c in 0..dh {
                            acc[c] += w * vj[off + c];
                        }
                    }
                    let mut ci = ctx.row_mut(bi * t + i);
                    for c in 0..dh {
                        ci[off + c] = acc[c];
                    }
                }
                probs.push(p);
            }
        }

        let out = self.wo.fwd(ps, ctx.view());
        (
            out,
            MhaCache {
                x: x.to_owned(),
                q,
                k,
                v,
                probs,
                ctx,
                b,
                t,
            },
        )
    }

    pub fn bwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        cache: &MhaCache<F>,
        dout: ArrayView2<F>,
        g: &mut TensorSet<F>,
    ) -> Array2<F> {
        let (b, t) = (cache.b, cache.t);
        let dh = self.d / self.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());

        let dctx = self.wo.bwd(ps, cache.ctx.view(), dout, g);
        let mut dq = Array2::<F>::zeros((b * t, self.d));
        let mut dk = Array2::<F>::zeros((b * t, self.d));
        let mut dv = Array2::<F>::zeros((b * t, self.d));

        for bi in 0..b {
            for h in 0..self.heads {
                let off = h * dh;
                let p = &cache.probs[bi * self.heads + h];
                for i in 0..t {
                    let limit = if self.causal { i + 1 } else { t };
                    let dci = dctx.row(bi * t + i);
                    // dprobs and dv.
                    let mut dprow = vec![F::zero(); limit];
                    for j in 0..limit {
                        let vj = cache.v.row(bi * t + j);
                        let mut s = F::zero();
                        for c in 0..dh {
                            s += dci[off + c] * vj[off + c];
                        }
                        dprow[j] = s;
                        let w = p[[i, j]];
                        let mut dvj = dv.row_mut(bi * t + j);
                        for c in 0..dh {
                            dvj[off + c] += w * dci[off + c];
                        }
                    }
                    // Softmax backward.
                    let mut dot = F::zero();
                    for j in 0..limit {
                        dot += dprow[j] * p[[i, j]];
                    }
                    // Score gradients feed dq/dk.
                    let qi = cache.q.row(bi * t + i);
                    let mut dqi = vec![F::zero(); dh];
                    for j in 0..limit {
                        let ds = p[[i, j]] * (dprow[j] - dot) * scale;
                        let kj = cache.k.row(bi * t + j);
                        let mut dkj = dk.row_mut(bi * t + j);
                        for c in 0..dh {
                            dqi[c] += ds * kj[off + c];
                            dkj[off + c] += ds * qi[off + c];
                        }
                    }
                    let mut dqrow = dq.row_mut(bi * t + i);
                    for c in 0..dh {
                        dqrow[off + c] += dqi[c];
                    }
                }
            }
        }

        let mut dx = self.wq.bwd(ps, cache.x.view(), dq.view(), g);
        dx += &self.wk.bwd(ps, cache.x.view(), dk.view(), g);
        dx += &self.wv.bwd(ps, cache.x.view(), dv.view(), g);
        dx
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))` then `a + ffn(ln2(a))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

pub struct BlockCache<F: Real> {
    ln1c: LayerNormCache<F>,
    h1: Array2<F>,
    mhac: MhaCache<F>,
    a: Array2<F>,
    ln2c: LayerNormCache<F>,
    h2: Array2<F>,
    r: Array2<F>,
}

impl TransformerBlock {
    pub fn new<F: Real>(
        ps: &mut TensorSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
        ffn: usize,
        causal: bool,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), d, heads, causal),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
            ff1: Linear::new(ps, rng, &format!("{name}.ff1"), d, ffn, 1.0),
            ff2: Linear::new(ps, rng, &format!("{name}.ff2"), ffn, d, 1.0),
        }
    }

    pub fn fwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        x: ArrayView2<F>,
        b: usize,
        t: usize,
    ) -> (Array2<F>, BlockCache<F>) {
        let (h1, ln1c) = self.ln1.fwd(ps, x);
        let (attn_out, mhac) = self.attn.fwd(ps, h1.view(), b, t);
        let a = &x + &attn_out;
        let (h2, ln2c) = self.ln2.fwd(ps, a.view());
        let f1 = self.ff1.fwd(ps, h2.view());
        let r = relu(&f1);
        let f2 = self.ff2.fwd(ps, r.view());
        let y = &a + &f2;
        (
            y,
            BlockCache {
                ln1c,
                h1,
                mhac,
                a,
                ln2c,
                h2,
                r,
            },
        )
    }

    pub fn bwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        cache: &BlockCache<F>,
        dy: ArrayView2<F>,
        g: &mut TensorSet<F>,
    ) -> Array2<F> {
        let dr = self.ff2.bwd(ps, cache.r.view(), dy, g);
        let df1 = relu_bwd(&cache.r, &dr);
        let dh2 = self.ff1.bwd(ps, cache.h2.view(), df1.view(), g);
        let mut da = self.ln2.bwd(ps, &cache.ln2c, dh2.view(), g);
        da += &dy;
        let dh1 = self.attn.bwd(ps, &cache.mhac, da.view(), g);
        let mut dx = self.ln1.bwd(ps, &cache.ln1c, dh1.view(), g);
        dx += &da;
        dx
    }
}

/// Causal sequence encoder: input projection, learned positional embeddings,
/// transformer blocks, final layer norm.
#[derive(Debug, Clone)]
pub struct TemporalTransformer {
    pub input: Linear,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: LayerNorm,
    pub d: usize,
    pub t_max: usize,
}

pub struct TemporalCache<F: Real> {
    tokens: Array2<F>,
    block_caches: Vec<BlockCache<F>>,
    lnc: LayerNormCache<F>,
    b: usize,
    t: usize,
}

impl TemporalTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        ps: &mut TensorSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        d: usize,
        layers: usize,
        heads: usize,
        ffn: usize,
        t_max: usize,
    ) -> Self {
        let input = Linear::new(ps, rng, &format!("{name}.input"), din, d, 1.0);
        let pos_init = Array2::from_shape_fn((t_max, d), |_| {
            F::from_f64(rand::Rng::random_range(rng, -0.02..0.02))
        });
        let pos = ps.alloc(&format!("{name}.pos"), pos_init.into_dyn());
        let blocks = (0..layers)
            .map(|i| {
                TransformerBlock::new(ps, rng, &format!("{name}.block{i}"), d, heads, ffn, true)
            })
            .collect();
        let final_ln = LayerNorm::new(ps, &format!("{name}.final_ln"), d);
        Self {
            input,
            pos,
            blocks,
            final_ln,
            d,
            t_max,
        }
    }

    /// `tokens: [b*t, din]` → per-step embeddings `[b*t, d]`.
    pub fn fwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        tokens: ArrayView2<F>,
        b: usize,
        t: usize,
    ) -> (Array2<F>, TemporalCache<F>) {
        assert!(t <= self.t_max, "sequence length {t} exceeds t_max {}", self.t_max);
        let mut h = self.input.fwd(ps, tokens);
        let pos = ps.view2(self.pos);
        for bi in 0..b {
            for s in 0..t {
                let mut row = h.row_mut(bi * t + s);
                row += &pos.row(s);
            }
        }
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (next, cache) = blk.fwd(ps, h.view(), b, t);
            block_caches.push(cache);
            h = next;
        }
        let (m, lnc) = self.final_ln.fwd(ps, h.view());
        (
            m,
            TemporalCache {
                tokens: tokens.to_owned(),
                block_caches,
                lnc,
                b,
                t,
            },
        )
    }

    /// Backward from `dm` to token gradients (also accumulated into `g`).
    pub fn bwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        cache: &TemporalCache<F>,
        dm: ArrayView2<F>,
        g: &mut TensorSet<F>,
    ) -> Array2<F> {
        let (b, t) = (cache.b, cache.t);
        let mut dh = self.final_ln.bwd(ps, &cache.lnc, dm, g);
        for (blk, bc) in self.blocks.iter().zip(cache.block_caches.iter()).rev() {
            dh = blk.bwd(ps, bc, dh.view(), g);
        }
        // Positional embedding gradients (summed over the batch).
        {
            let dpos = g.get_mut(self.pos);
            let mut dpos2 = dpos.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            for bi in 0..b {
                for s in 0..t {
                    let src = dh.row(bi * t + s);
                    let mut dst = dpos2.row_mut(s);
                    dst += &src;
                }
            }
        }
        self.input.bwd(ps, cache.tokens.view(), dh.view(), g)
    }
}

/// Mean over the token axis: `[n*tokens, d] → [n, d]`.
pub fn mean_pool<F: Real>(x: ArrayView2<F>, n: usize, tokens: usize) -> Array2<F> {
    let d = x.ncols();
    let inv = F::from_f64(1.0 / tokens as f64);
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        for tk in 0..tokens {
            let row = x.row(i * tokens + tk);
            let mut o = out.row_mut(i);
            for c in 0..d {
                o[c] += row[c] * inv;
            }
        }
    }
    out
}

pub fn mean_pool_bwd<F: Real>(dy: ArrayView2<F>, n: usize, tokens: usize) -> Array2<F> {
    let d = dy.ncols();
    let inv = F::from_f64(1.0 / tokens as f64);
    let mut dx = Array2::zeros((n * tokens, d));
    for i in 0..n {
        for tk in 0..tokens {
            let src = dy.row(i);
            let mut dst = dx.row_mut(i * tokens + tk);
            for c in 0..d {
                dst[c] = src[c] * inv;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Axis};
    use rand::{Rng, SeedableRng};

    fn setup(
        causal: bool,
    ) -> (
        TensorSet<f64>,
        TemporalTransformer,
        Array2<f64>,
        usize,
        usize,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = TensorSet::<f64>::new();
        let enc = TemporalTransformer::new(&mut ps, &mut rng, "enc", 7, 16, 2, 4, 32, 20);
        assert!(causal);
        let b = 3;
        let t = 9;
        let tokens = Array2::from_shape_fn((b * t, 7), |_| rng.random_range(-1.0..1.0));
        (ps, enc, tokens, b, t)
    }

    #[test]
    fn causal_future_perturbation_leaves_past_unchanged() {
        let (ps, enc, tokens, b, t) = setup(true);
        let (m, _) = enc.fwd(&ps, tokens.view(), b, t);
        let mut tokens2 = tokens.clone();
        // Change the last two steps of every sequence.
        for bi in 0..b {
            for s in (t - 2)..t {
                for c in 0..7 {
                    tokens2[[bi * t + s, c]] += 3.0 + s as f64;
                }
            }
        }
        let (m2, _) = enc.fwd(&ps, tokens2.view(), b, t);
        for bi in 0..b {
            for s in 0..(t - 2) {
                for c in 0..16 {
                    let diff = (m[[bi * t + s, c]] - m2[[bi * t + s, c]]).abs();
                    assert!(diff <= 1e-6, "b {bi} s {s} c {c}: {diff}");
                }
            }
            // Perturbed positions do change.
            let diff: f64 = (0..16)
                .map(|c| (m[[bi * t + t - 1, c]] - m2[[bi * t + t - 1, c]]).abs())
                .sum();
            assert!(diff > 1e-6);
        }
    }

    #[test]
    fn length_one_sequence_matches_prefix() {
        let (ps, enc, tokens, _b, t) = setup(true);
        let first = tokens.row(0).insert_axis(Axis(0)).to_owned();
        let (m1, _) = enc.fwd(&ps, first.view(), 1, 1);
        let seq0 = tokens.slice(ndarray::s![0..t, ..]);
        let (m, _) = enc.fwd(&ps, seq0, 1, t);
        for c in 0..16 {
            assert!((m1[[0, c]] - m[[0, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn transformer_backward_matches_numeric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = TensorSet::<f64>::new();
        let enc = TemporalTransformer::new(&mut ps, &mut rng, "enc", 5, 8, 1, 2, 12, 8);
        let b = 2;
        let t = 4;
        let tokens = Array2::from_shape_fn((b * t, 5), |_| rng.random_range(-1.0..1.0));
        // Weighted sum-of-squares loss over all outputs.
        let loss = |p: &TensorSet<f64>| {
            let (m, _) = enc.fwd(p, tokens.view(), b, t);
            m.iter()
                .enumerate()
                .map(|(i, v)| ((i % 5) as f64 * 0.2 + 0.5) * v * v)
                .sum::<f64>()
        };
        let (m, cache) = enc.fwd(&ps, tokens.view(), b, t);
        let mut dm = m.clone();
        for (i, v) in dm.iter_mut().enumerate() {
            *v = 2.0 * ((i % 5) as f64 * 0.2 + 0.5) * m.as_slice().unwrap()[i];
        }
        let mut g = ps.zeros_like();
        enc.bwd(&ps, &cache, dm.view(), &mut g);

        // Spot-check a spread of parameters.
        let total = ps.flat_len();
        let mut checked = 0;
        for flat in (0..total).step_by(13) {
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
                "flat {flat} ({}): analytic {ana} vs numeric {num}",
                ps.describe_flat(flat).0
            );
            checked += 1;
        }
        assert!(checked > 30);
    }

    #[test]
    fn mean_pool_roundtrip() {
        let x = Array2::from_shape_fn((6, 3), |(i, j)| (i * 3 + j) as f64);
        let y = mean_pool(x.view(), 2, 3);
        assert!((y[[0, 0]] - 3.0f64).abs() < 1e-12); // mean of 0,3,6
        let dy = Array2::from_elem((2, 3), 1.0);
        let dx = mean_pool_bwd(dy.view(), 2, 3);
        assert!((dx[[0, 0]] - 1.0f64 / 3.0).abs() < 1e-12);
    }

}
