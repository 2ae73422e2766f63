//! Heads reading the per-step embeddings: a tanh-squashed Gaussian policy,
//! a deterministic prediction head, and twin Q heads (optionally with
//! BatchRenorm layers for target-free critics).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use super::layers::{relu, relu_bwd, Linear};
use super::store::{ParamId, TensorSet};
use crate::Real;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

fn softplus<F: Real>(x: F) -> F {
    // ln(1 + e^x), overflow-safe.
    if x > F::from_f64(30.0) {
        x
    } else {
        (F::one() + x.exp()).ln()
    }
}

/// `ln(1 - tanh(u)²)` in the numerically stable form `2(ln 2 - u - softplus(-2u))`.
fn log_one_minus_tanh_sq<F: Real>(u: F) -> F {
    let two = F::from_f64(2.0);
    two * (F::from_f64(std::f64::consts::LN_2) - u - softplus(-two * u))
}

// ---------------------------------------------------------------------------
// Policy head
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PolicyHead {
    pub l1: Linear,
    pub mean: Linear,
    pub logstd: Linear,
    pub adim: usize,
}

pub struct PolicyCache<F: Real> {
    m: Array2<F>,
    r: Array2<F>,
    pub mean: Array2<F>,
    /// Pre-clamp values, needed to mask clamp gradients.
    logstd_raw: Array2<F>,
    pub logstd: Array2<F>,
}

pub struct SampleCache<F: Real> {
    pub noise: Array2<F>,
    pub actions: Array2<F>,
    pub log_probs: Array1<F>,
}

impl PolicyHead {
    pub fn new<F: Real>(
        ps: &mut TensorSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        hidden: usize,
        adim: usize,
    ) -> Self {
        let l1 = Linear::new(ps, rng, &format!("{name}.l1"), d, hidden, 1.0);
        // Small output layers keep the initial policy near zero-mean with a
        // moderate std.
        let mean = Linear::new(ps, rng, &format!("{name}.mean"), hidden, adim, 0.01);
        let logstd = Linear::new(ps, rng, &format!("{name}.logstd"), hidden, adim, 0.01);
        Self {
            l1,
            mean,
            logstd,
            adim,
        }
    }

    pub fn fwd<F: Real>(&self, ps: &TensorSet<F>, m: ArrayView2<F>) -> PolicyCache<F> {
        let r = relu(&self.l1.fwd(ps, m));
        let mean = self.mean.fwd(ps, r.view());
        let logstd_raw = self.logstd.fwd(ps, r.view());
        let lo = F::from_f64(LOG_STD_MIN);
        let hi = F::from_f64(LOG_STD_MAX);
        let logstd = logstd_raw.mapv(|v| if v < lo { lo } else if v > hi { hi } else { v });
        PolicyCache {
            m: m.to_owned(),
            r,
            mean,
            logstd_raw,
            logstd,
        }
    }

    /// Squash the mean: the deterministic evaluation action.
    pub fn deterministic<F: Real>(cache: &PolicyCache<F>) -> Array2<F> {
        cache.mean.mapv(|v| v.tanh())
    }

    /// Reparameterized sample `a = tanh(mean + exp(logstd)·ε)` with its
    /// squashed-Gaussian log density.
    pub fn sample<F: Real>(cache: &PolicyCache<F>, noise: Array2<F>) -> SampleCache<F> {
        let n = cache.mean.nrows();
        let d = cache.mean.ncols();
        let half_ln_2pi = F::from_f64(0.5 * (std::f64::consts::TAU).ln());
        let mut actions = Array2::zeros((n, d));
        let mut log_probs = Array1::zeros(n);
        for i in 0..n {
            let mut lp = F::zero();
            for j in 0..d {
                let eps = noise[[i, j]];
                let sigma = cache.logstd[[i, j]].exp();
                let u = cache.mean[[i, j]] + sigma * eps;
                let a = u.tanh();
                actions[[i, j]] = a;
                lp += -F::from_f64(0.5) * eps * eps
                    - cache.logstd[[i, j]]
                    - half_ln_2pi
                    - log_one_minus_tanh_sq(u);
            }
            log_probs[i] = lp;
        }
        SampleCache {
            noise,
            actions,
            log_probs,
        }
    }

    /// Backward through sampling and the head MLP. `d_actions` is the
    /// gradient on the squashed actions, `d_log_probs` on the log densities.
    /// Returns the gradient on the embeddings.
    pub fn bwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        cache: &PolicyCache<F>,
        sample: &SampleCache<F>,
        d_actions: Option<&Array2<F>>,
        d_log_probs: Option<&Array1<F>>,
        g: &mut TensorSet<F>,
    ) -> Array2<F> {
        let n = cache.mean.nrows();
        let d = cache.mean.ncols();
        let one = F::one();
        let two = F::from_f64(2.0);
        let lo = F::from_f64(LOG_STD_MIN);
        let hi = F::from_f64(LOG_STD_MAX);

        let mut dmean = Array2::<F>::zeros((n, d));
        let mut dlogstd = Array2::<F>::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                let a = sample.actions[[i, j]];
                let eps = sample.noise[[i, j]];
                let sigma = cache.logstd[[i, j]].exp();
                let mut du = F::zero();
                if let Some(da) = d_actions {
                    du += da[[i, j]] * (one - a * a);
                }
                let mut dls = F::zero();
                if let Some(dlp) = d_log_probs {
                    // d logp / du = 2a; d logp / dlogstd (direct term) = -1.
                    du += dlp[i] * two * a;
                    dls += -dlp[i];
                }
                dmean[[i, j]] = du;
                dls += du * sigma * eps;
                // Clamp kills the gradient outside the range.
                let raw = cache.logstd_raw[[i, j]];
                if raw < lo || raw > hi {
                    dls = F::zero();
                }
                dlogstd[[i, j]] = dls;
            }
        }

        let dr1 = self.mean.bwd(ps, cache.r.view(), dmean.view(), g);
        let dr2 = self.logstd.bwd(ps, cache.r.view(), dlogstd.view(), g);
        let dr = dr1 + dr2;
        let df = relu_bwd(&cache.r, &dr);
        self.l1.bwd(ps, cache.m.view(), df.view(), g)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.l1.w,
            self.l1.b,
            self.mean.w,
            self.mean.b,
            self.logstd.w,
            self.logstd.b,
        ]
    }
}

/// Log density of the squashed Gaussian at an arbitrary action strictly
/// inside `(-1, 1)^d` (used by tests and diagnostics).
pub fn squashed_gaussian_log_prob(mean: &[f64], logstd: &[f64], action: &[f64]) -> f64 {
    let mut lp = 0.0;
    for ((&m, &ls), &a) in mean.iter().zip(logstd.iter()).zip(action.iter()) {
        let u = a.atanh();
        let sigma = ls.exp();
        let z = (u - m) / sigma;
        lp += -0.5 * z * z - ls - 0.5 * std::f64::consts::TAU.ln() - (1.0 - a * a).ln();
    }
    lp
}

// ---------------------------------------------------------------------------
// Prediction head
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PredictionHead {
    pub l1: Linear,
    pub out: Linear,
}

pub struct PredictionCache<F: Real> {
    m: Array2<F>,
    r: Array2<F>,
    pub outputs: Array2<F>,
}

impl PredictionHead {
    pub fn new<F: Real>(
        ps: &mut TensorSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            l1: Linear::new(ps, rng, &format!("{name}.l1"), d, hidden, 1.0),
            out: Linear::new(ps, rng, &format!("{name}.out"), hidden, out_dim, 1.0),
        }
    }

    pub fn fwd<F: Real>(&self, ps: &TensorSet<F>, m: ArrayView2<F>) -> PredictionCache<F> {
        let r = relu(&self.l1.fwd(ps, m));
        let outputs = self.out.fwd(ps, r.view());
        PredictionCache {
            m: m.to_owned(),
            r,
            outputs,
        }
    }

    pub fn bwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        cache: &PredictionCache<F>,
        dout: ArrayView2<F>,
        g: &mut TensorSet<F>,
    ) -> Array2<F> {
        let dr = self.out.bwd(ps, cache.r.view(), dout, g);
        let df = relu_bwd(&cache.r, &dr);
        self.l1.bwd(ps, cache.m.view(), df.view(), g)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.l1.w, self.l1.b, self.out.w, self.out.b]
    }
}

/// Recover an angle from the pose head's `(sin, cos)` components.
pub fn angle_from_components(sin_c: f64, cos_c: f64) -> f64 {
    sin_c.atan2(cos_c)
}

// ---------------------------------------------------------------------------
// Batch renormalization
// ---------------------------------------------------------------------------

const BRN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BatchRenorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

/// Running statistics, kept outside the parameter set: they are updated by
/// forward passes, not by the optimizer.
#[derive(Debug, Clone)]
pub struct BatchRenormState<F: Real> {
    pub mean: Array1<F>,
    pub var: Array1<F>,
    pub updates: u64,
}

impl<F: Real> BatchRenormState<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            var: Array1::from_elem(dim, F::one()),
            updates: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BrnMode<F: Real> {
    Train {
        update_stats: bool,
        r_max: F,
        d_max: F,
        momentum: F,
    },
    Eval,
}

pub struct BrnCache<F: Real> {
    mode_train: bool,
    /// `(x - μ_B)/σ_B` in train mode, `(x - μ_run)/σ_run` in eval mode.
    xhat: Array2<F>,
    /// Effective normalized input `r·x̂ + d` (train) or `x̂` (eval); the
    /// gamma gradient is `Σ dy ⊙` this.
    xhat_eff: Array2<F>,
    inv_sigma: Array1<F>,
    r: Array1<F>,
}

impl BatchRenorm {
    pub fn new<F: Real>(ps: &mut TensorSet<F>, name: &str, dim: usize) -> Self {
        let gamma = ps.alloc(
            &format!("{name}.gamma"),
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[dim]), F::one()),
        );
        let beta = ps.alloc(
            &format!("{name}.beta"),
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[dim])),
        );
        Self { gamma, beta, dim }
    }

    pub fn fwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        state: &mut BatchRenormState<F>,
        x: ArrayView2<F>,
        mode: BrnMode<F>,
    ) -> (Array2<F>, BrnCache<F>) {
        let n = x.nrows();
        let c = self.dim;
        debug_assert_eq!(x.ncols(), c);
        let eps = F::from_f64(BRN_EPS);
        let gamma = ps.view1(self.gamma);
        let beta = ps.view1(self.beta);

        match mode {
            BrnMode::Train {
                update_stats,
                r_max,
                d_max,
                momentum,
            } => {
                assert!(n >= 2, "batch renorm needs batch size >= 2 in train mode");
                let nf = F::from_f64(n as f64);
                let mut mu_b = Array1::<F>::zeros(c);
                for row in x.rows() {
                    for j in 0..c {
                        mu_b[j] += row[j];
                    }
                }
                mu_b.mapv_inplace(|v| v / nf);
                let mut var_b = Array1::<F>::zeros(c);
                for row in x.rows() {
                    for j in 0..c {
                        let d = row[j] - mu_b[j];
                        var_b[j] += d * d;
                    }
                }
                var_b.mapv_inplace(|v| v / nf);

                let mut r = Array1::<F>::zeros(c);
                let mut dcorr = Array1::<F>::zeros(c);
                let mut inv_sigma_b = Array1::<F>::zeros(c);
                for j in 0..c {
                    let sigma_b = (var_b[j] + eps).sqrt();
                    let sigma_run = (state.var[j] + eps).sqrt();
                    inv_sigma_b[j] = F::one() / sigma_b;
                    let rj = (sigma_b / sigma_run)
                        .max(F::one() / r_max)
                        .min(r_max);
                    let dj = ((mu_b[j] - state.mean[j]) / sigma_run)
                        .max(-d_max)
                        .min(d_max);
                    r[j] = rj;
                    dcorr[j] = dj;
                }

                let mut xhat = Array2::<F>::zeros((n, c));
                let mut xhat_eff = Array2::<F>::zeros((n, c));
                let mut y = Array2::<F>::zeros((n, c));
                for i in 0..n {
                    for j in 0..c {
                        let xh = (x[[i, j]] - mu_b[j]) * inv_sigma_b[j];
                        let xe = xh * r[j] + dcorr[j];
                        xhat[[i, j]] = xh;
                        xhat_eff[[i, j]] = xe;
                        y[[i, j]] = xe * gamma[j] + beta[j];
                    }
                }

                if update_stats {
                    for j in 0..c {
                        state.mean[j] += momentum * (mu_b[j] - state.mean[j]);
                        state.var[j] += momentum * (var_b[j] - state.var[j]);
                    }
                    state.updates += 1;
                }

                (
                    y,
                    BrnCache {
                        mode_train: true,
                        xhat,
                        xhat_eff,
                        inv_sigma: inv_sigma_b,
                        r,
                    },
                )
            }
            BrnMode::Eval => {
                let mut inv_sigma = Array1::<F>::zeros(c);
                for j in 0..c {
                    inv_sigma[j] = F::one() / (state.var[j] + eps).sqrt();
                }
                let mut xhat = Array2::<F>::zeros((n, c));
                let mut y = Array2::<F>::zeros((n, c));
                for i in 0..n {
                    for j in 0..c {
                        let xh = (x[[i, j]] - state.mean[j]) * inv_sigma[j];
                        xhat[[i, j]] = xh;
                        y[[i, j]] = xh * gamma[j] + beta[j];
                    }
                }
                let xhat_eff = xhat.clone();
                (
                    y,
                    BrnCache {
                        mode_train: false,
                        xhat,
                        xhat_eff,
                        inv_sigma,
                        r: Array1::from_elem(c, F::one()),
                    },
                )
            }
        }
    }

    /// Backward. `r` and `d` are treated as constants; in train mode the
    /// gradient still flows through the batch mean and variance.
    pub fn bwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        cache: &BrnCache<F>,
        dy: ArrayView2<F>,
        g: &mut TensorSet<F>,
        accumulate_params: bool,
    ) -> Array2<F> {
        let n = dy.nrows();
        let c = self.dim;
        let gamma = ps.view1(self.gamma);

        if accumulate_params {
            let dgamma = g.get_mut(self.gamma).as_slice_mut().unwrap();
            for i in 0..n {
                for j in 0..c {
                    dgamma[j] += dy[[i, j]] * cache.xhat_eff[[i, j]];
                }
            }
            let dbeta = g.get_mut(self.beta).as_slice_mut().unwrap();
            for i in 0..n {
                for j in 0..c {
                    dbeta[j] += dy[[i, j]];
                }
            }
        }

        if cache.mode_train {
            let nf = F::from_f64(n as f64);
            // dxhat = dy ⊙ γ ⊙ r; then the usual batch-norm backward.
            let mut mean_dxhat = Array1::<F>::zeros(c);
            let mut mean_dxhat_xhat = Array1::<F>::zeros(c);
            for i in 0..n {
                for j in 0..c {
                    let dxh = dy[[i, j]] * gamma[j] * cache.r[j];
                    mean_dxhat[j] += dxh;
                    mean_dxhat_xhat[j] += dxh * cache.xhat[[i, j]];
                }
            }
            mean_dxhat.mapv_inplace(|v| v / nf);
            mean_dxhat_xhat.mapv_inplace(|v| v / nf);
            let mut dx = Array2::<F>::zeros((n, c));
            for i in 0..n {
                for j in 0..c {
                    let dxh = dy[[i, j]] * gamma[j] * cache.r[j];
                    dx[[i, j]] = cache.inv_sigma[j]
                        * (dxh - mean_dxhat[j] - cache.xhat[[i, j]] * mean_dxhat_xhat[j]);
                }
            }
            dx
        } else {
            let mut dx = Array2::<F>::zeros((n, c));
            for i in 0..n {
                for j in 0..c {
                    dx[[i, j]] = dy[[i, j]] * gamma[j] * cache.inv_sigma[j];
                }
            }
            dx
        }
    }
}

// ---------------------------------------------------------------------------
// Q head
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct QHead {
    pub l1: Linear,
    pub rn1: Option<BatchRenorm>,
    pub l2: Linear,
    pub rn2: Option<BatchRenorm>,
    pub out: Linear,
}

/// Mutable running statistics for one Q head (empty for plain MLP heads).
#[derive(Debug, Clone)]
pub struct QHeadState<F: Real> {
    pub rn1: Option<BatchRenormState<F>>,
    pub rn2: Option<BatchRenormState<F>>,
}

pub struct QCache<F: Real> {
    x: Array2<F>,
    a1: Array2<F>,
    brn1: Option<BrnCache<F>>,
    r1: Array2<F>,
    a2: Array2<F>,
    brn2: Option<BrnCache<F>>,
    r2: Array2<F>,
}

impl QHead {
    pub fn new<F: Real>(
        ps: &mut TensorSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        hidden: usize,
        batch_renorm: bool,
    ) -> Self {
        let l1 = Linear::new(ps, rng, &format!("{name}.l1"), din, hidden, 1.0);
        let rn1 = batch_renorm.then(|| BatchRenorm::new(ps, &format!("{name}.rn1"), hidden));
        let l2 = Linear::new(ps, rng, &format!("{name}.l2"), hidden, hidden, 1.0);
        let rn2 = batch_renorm.then(|| BatchRenorm::new(ps, &format!("{name}.rn2"), hidden));
        let out = Linear::new(ps, rng, &format!("{name}.out"), hidden, 1, 1.0);
        Self {
            l1,
            rn1,
            l2,
            rn2,
            out,
        }
    }

    pub fn make_state<F: Real>(&self) -> QHeadState<F> {
        QHeadState {
            rn1: self.rn1.as_ref().map(|b| BatchRenormState::new(b.dim)),
            rn2: self.rn2.as_ref().map(|b| BatchRenormState::new(b.dim)),
        }
    }

    /// `x = [embedding ; action]` rows → scalar Q values.
    pub fn fwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        state: &mut QHeadState<F>,
        x: ArrayView2<F>,
        mode: BrnMode<F>,
    ) -> (Array1<F>, QCache<F>) {
        let a1 = self.l1.fwd(ps, x);
        let (n1, brn1) = match (&self.rn1, &mut state.rn1) {
            (Some(rn), Some(st)) => {
                let (y, c) = rn.fwd(ps, st, a1.view(), mode);
                (y, Some(c))
            }
            _ => (a1.clone(), None),
        };
        let r1 = relu(&n1);
        let a2 = self.l2.fwd(ps, r1.view());
        let (n2, brn2) = match (&self.rn2, &mut state.rn2) {
            (Some(rn), Some(st)) => {
                let (y, c) = rn.fwd(ps, st, a2.view(), mode);
                (y, Some(c))
            }
            _ => (a2.clone(), None),
        };
        let r2 = relu(&n2);
        let q = self.out.fwd(ps, r2.view());
        (
            q.index_axis(Axis(1), 0).to_owned(),
            QCache {
                x: x.to_owned(),
                a1,
                brn1,
                r1,
                a2,
                brn2,
                r2,
            },
        )
    }

    /// Backward from scalar gradients to input gradients. When
    /// `accumulate_params` is false the head's weights are treated as
    /// constants (actor update path).
    pub fn bwd<F: Real>(
        &self,
        ps: &TensorSet<F>,
        cache: &QCache<F>,
        dq: ArrayView1<F>,
        g: &mut TensorSet<F>,
        accumulate_params: bool,
    ) -> Array2<F> {
        let n = dq.len();
        let dqm = {
            let mut m = Array2::<F>::zeros((n, 1));
            for i in 0..n {
                m[[i, 0]] = dq[i];
            }
            m
        };
        let dr2 = if accumulate_params {
            self.out.bwd(ps, cache.r2.view(), dqm.view(), g)
        } else {
            self.out.bwd_input_only(ps, dqm.view())
        };
        let dn2 = relu_bwd(&cache.r2, &dr2);
        let da2 = match (&self.rn2, &cache.brn2) {
            (Some(rn), Some(bc)) => rn.bwd(ps, bc, dn2.view(), g, accumulate_params),
            _ => dn2,
        };
        let dr1 = if accumulate_params {
            self.l2.bwd(ps, cache.r1.view(), da2.view(), g)
        } else {
            self.l2.bwd_input_only(ps, da2.view())
        };
        let dn1 = relu_bwd(&cache.r1, &dr1);
        let da1 = match (&self.rn1, &cache.brn1) {
            (Some(rn), Some(bc)) => rn.bwd(ps, bc, dn1.view(), g, accumulate_params),
            _ => dn1,
        };
        if accumulate_params {
            self.l1.bwd(ps, cache.x.view(), da1.view(), g)
        } else {
            self.l1.bwd_input_only(ps, da1.view())
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.l1.w, self.l1.b, self.l2.w, self.l2.b, self.out.w, self.out.b];
        if let Some(rn) = &self.rn1 {
            ids.push(rn.gamma);
            ids.push(rn.beta);
        }
        if let Some(rn) = &self.rn2 {
            ids.push(rn.gamma);
            ids.push(rn.beta);
        }
        ids
    }
}
