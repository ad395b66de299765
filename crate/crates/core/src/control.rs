//! Retrieval-sufficiency head: a one-hidden-layer MLP over the latent query
//! that predicts whether the evidence gathered so far is complete.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Store tag for head weights.
pub const HEAD_STORE: u32 = 1;

/// Probability clamp used by the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Stop threshold; a prediction exactly at the threshold stops.
pub const STOP_THRESHOLD: f64 = 0.5;

pub fn is_stop(y_hat: f64) -> bool {
    y_hat >= STOP_THRESHOLD
}

#[derive(Debug)]
pub struct ControlHead {
    params: ParamStore,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    calls: AtomicUsize,
}

impl Clone for ControlHead {
    fn clone(&self) -> Self {
        Self::from_params(self.params.clone()).expect("cloned head is well formed")
    }
}

impl ControlHead {
    /// `d → hidden → 1` MLP with seeded small weights.
    pub fn new(d: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_c0de);
        let mut normal = |n: usize, std: f32| -> Vec<f32> {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let w1 = normal(d * hidden, 1.0 / (d as f32).sqrt());
        let w2 = normal(hidden, 1.0 / (hidden as f32).sqrt());
        Self::with_weights(d, hidden, w1, vec![0.0; hidden], w2, 0.0)
    }

    /// All-zero weights: every input maps to exactly 0.5.
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self::with_weights(d, hidden, vec![0.0; d * hidden], vec![0.0; hidden], vec![0.0; hidden], 0.0)
    }

    fn with_weights(d: usize, hidden: usize, w1: Vec<f32>, b1: Vec<f32>, w2: Vec<f32>, b2: f32) -> Self {
        let mut s = ParamStore::new(HEAD_STORE);
        s.add("head.w1", Tensor::new(vec![d, hidden], w1).expect("shape"));
        s.add("head.b1", Tensor::new(vec![1, hidden], b1).expect("shape"));
        s.add("head.w2", Tensor::new(vec![hidden, 1], w2).expect("shape"));
        s.add("head.b2", Tensor::new(vec![1, 1], vec![b2]).expect("shape"));
        Self::from_params(s).expect("fresh head is well formed")
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        if params.tag() != HEAD_STORE {
            return Err(Error::invalid("control head parameters must use the head store tag"));
        }
        let id = |n: &str| params.id_of(n).ok_or_else(|| Error::invalid(format!("missing parameter {n}")));
        let (w1, b1, w2, b2) = (id("head.w1")?, id("head.b1")?, id("head.w2")?, id("head.b2")?);
        let (d, h) = params.get(w1).value.dims2();
        let shapes_ok = params.get(b1).value.shape() == [1, h]
            && params.get(w2).value.shape() == [h, 1]
            && params.get(b2).value.shape() == [1, 1]
            && params.len() == 4
            && d > 0;
        if !shapes_ok {
            return Err(Error::invalid("control head parameter shapes are inconsistent"));
        }
        Ok(ControlHead {
            params,
            w1,
            b1,
            w2,
            b2,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.params.get(self.w1).value.dims2().0
    }

    pub fn hidden_dim(&self) -> usize {
        self.params.get(self.w1).value.dims2().1
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// MLP evaluations so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Records `sigmoid(MLP(q))` for a `1 × d` query node.
    pub fn forward_on<F: Real>(&self, tape: &mut Tape<F>, q: Var) -> Result<Var> {
        let (r, c) = tape.shape(q);
        if r != 1 || c != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: r * c,
            });
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let w1 = tape.param(&self.params, self.w1);
        let b1 = tape.param(&self.params, self.b1);
        let w2 = tape.param(&self.params, self.w2);
        let b2 = tape.param(&self.params, self.b2);
        let h = tape.matmul(q, w1);
        let h = tape.add_row(h, b1);
        let h = tape.tanh(h);
        let z = tape.matmul(h, w2);
        let z = tape.add_row(z, b2);
        Ok(tape.sigmoid(z))
    }

    /// Stop probability for a query vector.
    pub fn decide(&self, q: &[f32]) -> Result<f64> {
        if q.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: q.len(),
            });
        }
        let mut tape = Tape::<f64>::new();
        let qv = tape.constant_f32(1, q.len(), q);
        let y = self.forward_on(&mut tape, qv)?;
        Ok(tape.scalar(y))
    }
}

/// Stop label: 1 iff every positive has been retrieved.
pub fn control_label<T: Ord>(positives: &BTreeSet<T>, retrieved: &BTreeSet<T>) -> u8 {
    u8::from(positives.is_subset(retrieved))
}

/// Summed binary cross-entropy over turns.
pub fn control_loss(y_hat: &[f64], y: &[u8]) -> Result<f64> {
    if y_hat.len() != y.len() {
        return Err(Error::invalid(format!(
            "{} predictions but {} labels",
            y_hat.len(),
            y.len()
        )));
    }
    Ok(y_hat
        .iter()
        .zip(y)
        .map(|(&p, &l)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            let l = l as f64;
            -(l * p.ln() + (1.0 - l) * (1.0 - p).ln())
        })
        .sum())
}

/// Tape version of [`control_loss`].
pub fn control_loss_on<F: Real>(tape: &mut Tape<F>, y_hat: &[Var], y: &[u8]) -> Result<Var> {
    if y_hat.len() != y.len() || y.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions but {} labels",
            y_hat.len(),
            y.len()
        )));
    }
    let terms: Vec<Var> = y_hat
        .iter()
        .zip(y)
        .map(|(&p, &l)| tape.bce(p, F::from_f64(l as f64), F::from_f64(BCE_EPS)))
        .collect();
    Ok(tape.sum(&terms))
}
