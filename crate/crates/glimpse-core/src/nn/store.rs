//! Flat-indexable named tensor storage shared by parameters, gradients, and
//! optimizer state.

use ndarray::{ArrayD, ArrayViewD, IxDyn};

use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A set of named tensors with a stable order. Parameter stores, gradient
/// accumulators, and Adam moments all share this layout, so a layer defined
/// by `ParamId`s can run against any set with the same allocation history
/// (online parameters, target copies, perturbed copies for gradient checks).
#[derive(Debug, Clone)]
pub struct TensorSet<F: Real> {
    names: Vec<String>,
    tensors: Vec<ArrayD<F>>,
}

impl<F: Real> TensorSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn alloc(&mut self, name: &str, tensor: ArrayD<F>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate tensor name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.tensors[id.0]
    }

    pub fn view2(&self, id: ParamId) -> ndarray::ArrayView2<'_, F> {
        self.tensors[id.0]
            .view()
            .into_dimensionality()
            .expect("tensor is not 2-d")
    }

    pub fn view1(&self, id: ParamId) -> ndarray::ArrayView1<'_, F> {
        self.tensors[id.0]
            .view()
            .into_dimensionality()
            .expect("tensor is not 1-d")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ArrayViewD<'_, F>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter().map(|t| t.view()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Same layout, all zeros. Used for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.fill(F::zero());
        }
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        let mut offset = flat;
        for (i, t) in self.tensors.iter().enumerate() {
            if offset < t.len() {
                return (i, offset);
            }
            offset -= t.len();
        }
        panic!("flat index {flat} out of range {}", self.flat_len());
    }

    pub fn get_flat(&self, flat: usize) -> F {
        let (i, off) = self.locate(flat);
        self.tensors[i].as_slice().expect("standard layout")[off]
    }

    pub fn set_flat(&mut self, flat: usize, value: F) {
        let (i, off) = self.locate(flat);
        self.tensors[i].as_slice_mut().expect("standard layout")[off] = value;
    }

    pub fn add_flat(&mut self, flat: usize, delta: F) {
        let (i, off) = self.locate(flat);
        self.tensors[i].as_slice_mut().expect("standard layout")[off] += delta;
    }

    /// Name and within-tensor offset of a flat index, for diagnostics.
    pub fn describe_flat(&self, flat: usize) -> (String, usize) {
        let (i, off) = self.locate(flat);
        (self.names[i].clone(), off)
    }

    /// Squared L2 norm over the given tensors.
    pub fn sq_norm(&self, ids: &[ParamId]) -> F {
        let mut acc = F::zero();
        for id in ids {
            for v in self.tensors[id.0].iter() {
                acc += *v * *v;
            }
        }
        acc
    }

    pub fn scale(&mut self, ids: &[ParamId], factor: F) {
        for id in ids {
            self.tensors[id.0].mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// θ ← (1 - τ)·θ + τ·θ_src, elementwise over everything.
    pub fn soft_update_from(&mut self, src: &Self, tau: F) {
        assert_eq!(self.tensors.len(), src.tensors.len());
        let keep = F::one() - tau;
        for (dst, s) in self.tensors.iter_mut().zip(src.tensors.iter()) {
            dst.zip_mut_with(s, |d, &sv| *d = keep * *d + tau * sv);
        }
    }

    /// Convert every tensor to `f64` (for checkpoints).
    pub fn to_f64(&self) -> TensorSet<f64> {
        TensorSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| v.to_f64()))
                .collect(),
        }
    }

    /// Rebuild from an `f64` set (for checkpoint loading).
    pub fn from_f64(src: &TensorSet<f64>) -> Self {
        Self {
            names: src.names.clone(),
            tensors: src
                .tensors
                .iter()
                .map(|t| t.mapv(F::from_f64))
                .collect(),
        }
    }
}

impl<F: Real> Default for TensorSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-tensor Adam with bias correction counted per tensor.
#[derive(Debug, Clone)]
pub struct AdamState<F: Real> {
    pub m: TensorSet<F>,
    pub v: TensorSet<F>,
    pub t: Vec<u64>,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &TensorSet<F>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: vec![0; params.len()],
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
        }
    }

    /// Apply one Adam step to the listed tensors using the accumulated
    /// gradients in `grads`.
    pub fn step(&mut self, params: &mut TensorSet<F>, grads: &TensorSet<F>, ids: &[ParamId], lr: F) {
        let one = F::one();
        for id in ids {
            let i = id.0;
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = one - self.beta1.powi(t);
            let bc2 = one - self.beta2.powi(t);
            let m = self.m.tensors[i].as_slice_mut().unwrap();
            let v = self.v.tensors[i].as_slice_mut().unwrap();
            let g = grads.tensors[i].as_slice().unwrap();
            let p = params.tensors[i].as_slice_mut().unwrap();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (one - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (one - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
