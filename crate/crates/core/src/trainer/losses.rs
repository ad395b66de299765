//! Contrastive, masked next-token, and combined objectives, each as a plain
//! value function and as a tape recording.

use std::collections::BTreeSet;

use rand::Rng;

use super::rollout::TurnState;
use crate::error::{Error, Result};
use crate::index::VectorIndex;
use crate::model::MicroTransformer;
use crate::numerics::{cosine_sim, Real, Tape, Var};

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// InfoNCE over one positive and `negs`, with log-sum-exp stabilisation.
pub fn contrastive_loss(q: &[f32], pos: &[f32], negs: &[&[f32]], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if negs.is_empty() {
        return Err(Error::invalid("contrastive loss needs at least one negative"));
    }
    let mut logits = vec![cosine_sim(q, pos)? as f64 / tau];
    for n in negs {
        if n.len() != q.len() {
            return Err(Error::DimensionMismatch {
                expected: q.len(),
                found: n.len(),
            });
        }
        logits.push(cosine_sim(q, n)? as f64 / tau);
    }
    Ok(contrastive_from_logits(&logits))
}

/// `−ln softmax(logits)[0]`.
pub fn contrastive_from_logits(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
    (lse - logits[0]).max(0.0)
}

pub fn contrastive_loss_on<F: Real>(tape: &mut Tape<F>, q: Var, pos: Var, negs: &[Var], tau: f64) -> Result<Var> {
    check_tau(tau)?;
    if negs.is_empty() {
        return Err(Error::invalid("contrastive loss needs at least one negative"));
    }
    let mut sims = Vec::with_capacity(negs.len() + 1);
    sims.push(tape.cosine(q, pos)?);
    for &n in negs {
        sims.push(tape.cosine(q, n)?);
    }
    let row = tape.concat(&sims);
    let logits = tape.scale(row, F::from_f64(1.0 / tau));
    Ok(tape.cross_entropy(logits, &[0]))
}

/// `P \ R_prev`.
pub fn leftover_positives<T: Ord + Clone>(positives: &BTreeSet<T>, retrieved_prev: &BTreeSet<T>) -> BTreeSet<T> {
    positives.difference(retrieved_prev).cloned().collect()
}

/// Uniform draw from a leftover set, in its sorted order.
pub fn sample_positive<'a, T, R: Rng>(leftover: &'a BTreeSet<T>, rng: &mut R) -> Option<&'a T> {
    if leftover.is_empty() {
        return None;
    }
    leftover.iter().nth(rng.gen_range(0..leftover.len()))
}

/// Per-turn adaptive contrastive loss using the stored index vectors for
/// both sides. Turns with no leftover positives yield `None`.
pub fn adaptive_contrastive_loss<R: Rng>(
    turns: &[TurnState],
    queries: &[Vec<f32>],
    positives: &BTreeSet<String>,
    index: &VectorIndex,
    n_neg: usize,
    tau: f64,
    rng: &mut R,
) -> Result<Vec<Option<f64>>> {
    if turns.len() != queries.len() {
        return Err(Error::invalid("one query per turn is required"));
    }
    let mut out = Vec::with_capacity(turns.len());
    for (state, q) in turns.iter().zip(queries) {
        let Some(pos_id) = sample_positive(&state.leftover, rng) else {
            out.push(None);
            continue;
        };
        let pos = index.position(pos_id).ok_or_else(|| Error::UnknownId(pos_id.clone()))?;
        let negs = index.mine_hard_negatives(q, positives, n_neg)?;
        if negs.hits.is_empty() {
            return Err(Error::Insufficient("no documents outside the positive set".into()));
        }
        let neg_vecs: Vec<&[f32]> = negs.hits.iter().map(|h| index.vector(h.position)).collect();
        out.push(Some(contrastive_loss(q, index.vector(pos), &neg_vecs, tau)?));
    }
    Ok(out)
}

fn ntp_rows(tokens: &[u32], mask: &[bool]) -> Result<(Vec<usize>, Vec<usize>)> {
    if tokens.len() != mask.len() {
        return Err(Error::invalid("mask length differs from token count"));
    }
    if mask.first() == Some(&true) {
        return Err(Error::invalid("the first token has no prefix to be predicted from"));
    }
    let (rows, targets): (Vec<usize>, Vec<usize>) = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(t, _)| (t - 1, tokens[t] as usize))
        .unzip();
    if rows.is_empty() {
        return Err(Error::invalid("every position is masked out"));
    }
    Ok((rows, targets))
}

/// Mean cross-entropy of the tokens where `mask` is set, each predicted from
/// its prefix.
pub fn ntp_loss_on<F: Real>(tape: &mut Tape<F>, model: &MicroTransformer, tokens: &[u32], mask: &[bool]) -> Result<Var> {
    let (rows, targets) = ntp_rows(tokens, mask)?;
    let last = *rows.last().expect("non-empty");
    let h = model.hidden_on(tape, &tokens[..=last])?;
    let logits = model.logits_on(tape, h, &rows);
    Ok(tape.cross_entropy(logits, &targets))
}

pub fn ntp_loss(model: &MicroTransformer, tokens: &[u32], mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let v = ntp_loss_on(&mut tape, model, tokens, mask)?;
    Ok(tape.scalar(v))
}

fn check_weights(lambda: f64, mu: f64) -> Result<()> {
    if !(lambda >= 0.0 && mu >= 0.0) {
        return Err(Error::invalid(format!("loss weights must be non-negative, got λ={lambda}, μ={mu}")));
    }
    Ok(())
}

/// `ntp + λ Σ cl + μ ctrl`.
pub fn total_loss(ntp: f64, cl_per_turn: &[f64], ctrl: f64, lambda: f64, mu: f64) -> Result<f64> {
    check_weights(lambda, mu)?;
    Ok(ntp + lambda * cl_per_turn.iter().sum::<f64>() + mu * ctrl)
}

/// Tape version of [`total_loss`]. Zero-weighted terms are left out of the
/// graph entirely.
pub fn total_loss_on<F: Real>(tape: &mut Tape<F>, ntp: Var, cl_per_turn: &[Var], ctrl: Option<Var>, lambda: f64, mu: f64) -> Result<Var> {
    check_weights(lambda, mu)?;
    let mut terms = vec![ntp];
    if lambda > 0.0 && !cl_per_turn.is_empty() {
        let cl = tape.sum(cl_per_turn);
        terms.push(tape.scale(cl, F::from_f64(lambda)));
    }
    if let (true, Some(c)) = (mu > 0.0, ctrl) {
        terms.push(tape.scale(c, F::from_f64(mu)));
    }
    if terms.len() == 1 {
        return Ok(ntp);
    }
    Ok(tape.sum(&terms))
}
