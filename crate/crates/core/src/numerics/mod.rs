//! Dense tensors, parameters, reverse-mode differentiation and the scalar
//! primitives (softmax, entropy, cosine similarity) the rest of the crate
//! builds on.
//!
//! Everything the model stores is `f32`. The tape is generic over [`Real`] so
//! the same forward code can be replayed in `f64` when a tighter numerical
//! reference is needed (finite-difference gradient checks).

mod kernels;
mod tape;

use std::collections::HashMap;
use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

pub use kernels::{dot, matmul, matmul_nt, matmul_tn};
pub use tape::{Gradients, Tape, Var};

/// Floating-point scalar the tape can run on.
pub trait Real: Float + Default + Debug + Sum + Send + Sync + 'static {
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn as_f32(self) -> f32;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major `f32` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!("tensor shape {shape:?} has a zero or missing extent")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite tensor entry at flat index {i}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns when the tensor is viewed as a matrix (leading
    /// extents folded into rows).
    pub fn dims2(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols.max(1), cols)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let (_, cols) = self.dims2();
        &self.data[i * cols..(i + 1) * cols]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Globally addressable parameter: which store, which slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub store: u32,
    pub index: u32,
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named, ordered collection of parameters.
#[derive(Clone, Debug)]
pub struct ParamStore {
    tag: u32,
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(tag: u32) -> Self {
        ParamStore {
            tag,
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn tag(&self) -> u32 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let grad = Tensor::zeros(value.shape().to_vec());
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            store: self.tag,
            index: id.0 as u32,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds every gradient addressed to this store into `Parameter::grad`.
    pub fn accumulate<F: Real>(&mut self, grads: &Gradients<F>) {
        self.accumulate_scaled(grads, 1.0);
    }

    pub fn accumulate_scaled<F: Real>(&mut self, grads: &Gradients<F>, scale: f32) {
        for (key, g) in grads.iter() {
            if key.store != self.tag {
                continue;
            }
            let p = &mut self.params[key.index as usize];
            for (dst, &src) in p.grad.data_mut().iter_mut().zip(g) {
                *dst += scale * src.as_f32();
            }
        }
    }
}

/// Numerically stable softmax (max subtraction, `f64` normalizer).
pub fn softmax<F: Real>(v: &[F]) -> Result<Vec<F>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax input has non-finite entries"));
    }
    let m = v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
    let exps: Vec<f64> = v.iter().map(|x| (x.as_f64() - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| F::from_f64(e / z)).collect())
}

/// Shannon entropy in nats. `0 ln 0` counts as zero.
pub fn entropy<F: Real>(p: &[F]) -> Result<F> {
    if p.is_empty() {
        return Err(Error::invalid("entropy of an empty distribution"));
    }
    let mut total = 0.0f64;
    let mut h = 0.0f64;
    for (i, &x) in p.iter().enumerate() {
        let x = x.as_f64();
        if !x.is_finite() || x < 0.0 {
            return Err(Error::invalid(format!("probability entry {i} is {x}")));
        }
        total += x;
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    if (total - 1.0).abs() > 1e-4 {
        return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
    }
    let upper = (p.len() as f64).ln();
    Ok(F::from_f64(h.clamp(0.0, upper)))
}

/// Cosine similarity. All-zero inputs are a domain error rather than 0.
pub fn cosine_sim<F: Real>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Domain("cosine similarity of an all-zero vector".into()));
    }
    Ok(F::from_f64((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        assert_eq!(softmax(&[0.0f64, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let direct: Vec<f64> = {
            let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        };
        let got = softmax(&[1.0f64, 2.0, 3.0]).unwrap();
        for (g, d) in got.iter().zip(&direct) {
            assert!((g - d).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax::<f32>(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn entropy_edge_cases() {
        assert_eq!(entropy(&[1.0f64, 0.0, 0.0]).unwrap(), 0.0);
        let u = [0.25f64; 4];
        assert!((entropy(&u).unwrap() - 4f64.ln()).abs() < 1e-12);
        let p = [0.5f64, 0.25, 0.25];
        let direct = -(0.5f64 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((entropy(&p).unwrap() - direct).abs() < 1e-12);
        assert!(entropy(&[1.5f64, -0.5]).is_err());
    }

    #[test]
    fn cosine_known_values() {
        assert!((cosine_sim(&[1.0f64, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[3.0f32, -1.0, 2.0], &[3.0, -1.0, 2.0]).unwrap() - 1.0).abs() < 1e-6);
        assert!(matches!(cosine_sim(&[0.0f32, 0.0], &[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(
            cosine_sim(&[1.0f32], &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f32::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution_at_extreme_scales(v in prop::collection::vec(-1e4f32..1e4, 1..64)) {
            let p = softmax(&v).unwrap();
            let s: f64 = p.iter().map(|&x| x as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| x >= 0.0 && x.is_finite()));
        }

        #[test]
        fn entropy_of_softmax_is_shift_invariant(
            v in prop::collection::vec(-20.0f64..20.0, 1..32),
            c in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let h0 = entropy(&softmax(&v).unwrap()).unwrap();
            let h1 = entropy(&softmax(&shifted).unwrap()).unwrap();
            prop_assert!((h0 - h1).abs() < 1e-6);
        }

        #[test]
        fn cosine_is_symmetric_bounded_and_scale_free(
            a in prop::collection::vec(-10.0f32..10.0, 8),
            b in prop::collection::vec(-10.0f32..10.0, 8),
            c in 0.01f32..100.0,
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let ab = cosine_sim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert!((ab - cosine_sim(&b, &a).unwrap()).abs() < 1e-6);
            let ca: Vec<f32> = a.iter().map(|x| x * c).collect();
            prop_assert!((ab - cosine_sim(&ca, &b).unwrap()).abs() < 1e-6);
        }
    }
}
