//! Multi-turn training rollouts: the discrete part (which documents were
//! retrieved, labels, sampled positives and mined negatives) is planned
//! first, then replayed on a tape to record the differentiable objective.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;

use super::losses::{contrastive_loss_on, leftover_positives, ntp_loss_on, sample_positive, total_loss_on};
use super::{PositiveChoice, TrainConfig};
use crate::control::{control_label, control_loss_on, ControlHead};
use crate::datakit::{Document, QAExample};
use crate::error::{Error, Result};
use crate::index::{document_tokens, VectorIndex};
use crate::model::MicroTransformer;
use crate::numerics::{Real, Tape, Var};
use crate::orchestrator::{assemble_prompt, assemble_query, dedup_context};

/// Retrieval state at turn `r` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct TurnState {
    pub turn: usize,
    /// Documents in the context the turn's query is read from.
    pub context: Vec<String>,
    /// Retrieved sets of turns `1..=r`.
    pub d_sets: Vec<Vec<String>>,
    /// Union of `d_sets`.
    pub retrieved: BTreeSet<String>,
    /// Positives not retrieved before this turn.
    pub leftover: BTreeSet<String>,
    pub label: u8,
}

/// Checks the per-episode invariants; the first violation is reported.
pub fn check_turn_states(states: &[TurnState], positives: &BTreeSet<String>, k: usize) -> Result<()> {
    let fail = |r: usize, what: &str| Err(Error::Domain(format!("rollout invariant violated at turn {r}: {what}")));
    let mut prev_retrieved = BTreeSet::new();
    let mut prev_leftover: Option<&BTreeSet<String>> = None;
    let mut prev_label = 0u8;
    for (i, s) in states.iter().enumerate() {
        let r = i + 1;
        if s.turn != r || s.d_sets.len() != r {
            return fail(r, "turn numbering");
        }
        let union: BTreeSet<String> = s.d_sets.iter().flatten().cloned().collect();
        if union != s.retrieved {
            return fail(r, "retrieved set is not the union of per-turn sets");
        }
        if s.retrieved.len() > r * k {
            return fail(r, "more than r·K documents retrieved");
        }
        if !prev_retrieved.is_subset(&s.retrieved) {
            return fail(r, "retrieved set shrank");
        }
        if s.leftover != leftover_positives(positives, &prev_retrieved) {
            return fail(r, "leftover positives differ from P minus earlier retrievals");
        }
        if let Some(p) = prev_leftover {
            if !s.leftover.is_subset(p) {
                return fail(r, "leftover positives grew");
            }
        }
        if s.label != control_label(positives, &s.retrieved) {
            return fail(r, "label disagrees with the subset rule");
        }
        if s.label < prev_label {
            return fail(r, "label went from 1 back to 0");
        }
        prev_retrieved = s.retrieved.clone();
        prev_leftover = Some(&s.leftover);
        prev_label = s.label;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PlannedTurn {
    pub state: TurnState,
    pub query_tokens: Vec<u32>,
    pub query: Vec<f32>,
    /// Sampled positive (index row) when the contrastive term is active.
    pub positive: Option<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RolloutPlan {
    pub positives: BTreeSet<String>,
    pub turns: Vec<PlannedTurn>,
    pub ntp_tokens: Vec<u32>,
    pub ntp_mask: Vec<bool>,
    /// Hop-1 gold document retrieved at turn 1.
    pub hop1_hit: bool,
}

/// Shared read-only inputs of a rollout.
pub struct RolloutEnv<'a> {
    pub model: &'a MicroTransformer,
    pub index: &'a VectorIndex,
    pub corpus: &'a [Document],
    pub doc_tokens: &'a [Vec<u32>],
}

impl<'a> RolloutEnv<'a> {
    pub fn tokenize_corpus(model: &MicroTransformer, corpus: &[Document]) -> Vec<Vec<u32>> {
        corpus.iter().map(|d| document_tokens(model, d)).collect()
    }

    fn texts(&self, ids: &[String]) -> Result<Vec<&'a str>> {
        let corpus = self.corpus;
        ids.iter()
            .map(|id| {
                self.index
                    .position(id)
                    .map(|p| corpus[p].text.as_str())
                    .ok_or_else(|| Error::UnknownId(id.clone()))
            })
            .collect()
    }
}

/// Runs the retrieval loop for `ex` under the current weights and fixes
/// every discrete choice the objective depends on.
pub fn plan_rollout<R: Rng>(env: &RolloutEnv, ex: &QAExample, cfg: &TrainConfig, rng: &mut R) -> Result<RolloutPlan> {
    let positives: BTreeSet<String> = ex.gold_doc_ids.iter().cloned().collect();
    let pos_rows: Vec<usize> = ex
        .gold_doc_ids
        .iter()
        .map(|g| env.index.position(g).ok_or_else(|| Error::UnknownId(g.clone())))
        .collect::<Result<_>>()?;
    let mut turns: Vec<PlannedTurn> = Vec::new();
    let mut d_sets: Vec<Vec<String>> = Vec::new();
    let mut retrieved = BTreeSet::new();
    for r in 1..=cfg.max_turns {
        let context = dedup_context(&d_sets);
        let query_tokens = match assemble_query(env.model, &ex.question, &env.texts(&context)?) {
            Ok(t) => t,
            Err(Error::ContextOverflow { .. }) if r > 1 => break,
            Err(e) => return Err(e),
        };
        let query = env.model.latent_query(&query_tokens, 1)?.vector;
        let hits = env.index.top_k(&query, cfg.k)?;
        let leftover = leftover_positives(&positives, &retrieved);
        let d: Vec<String> = hits.hits.iter().map(|h| h.doc_id.clone()).collect();
        retrieved.extend(d.iter().cloned());
        d_sets.push(d);
        let label = control_label(&positives, &retrieved);
        let chosen = match cfg.positive {
            PositiveChoice::Uniform => sample_positive(&leftover, rng),
            PositiveChoice::HopOrder => ex.gold_doc_ids.iter().find(|g| leftover.contains(*g)),
        };
        let (positive, negatives) = match (cfg.lambda > 0.0, chosen) {
            (true, Some(p)) => {
                let pool = env.index.mine_excluding(&query, &pos_rows, cfg.n_neg.max(cfg.neg_pool))?;
                if pool.hits.is_empty() {
                    return Err(Error::Insufficient("no documents outside the positive set".into()));
                }
                let mut negs: Vec<usize> = pool.hits.iter().map(|h| h.position).collect();
                if negs.len() > cfg.n_neg {
                    negs = rand::seq::index::sample(rng, negs.len(), cfg.n_neg).into_iter().map(|i| negs[i]).collect();
                }
                (env.index.position(p), negs)
            }
            _ => (None, Vec::new()),
        };
        turns.push(PlannedTurn {
            state: TurnState {
                turn: r,
                context,
                d_sets: d_sets.clone(),
                retrieved: retrieved.clone(),
                leftover,
                label,
            },
            query_tokens,
            query,
            positive,
            negatives,
        });
    }
    let states: Vec<TurnState> = turns.iter().map(|t| t.state.clone()).collect();
    check_turn_states(&states, &positives, cfg.k)?;

    // Answer context: documents up to the first turn whose label is 1.
    let stop = turns.iter().position(|t| t.state.label == 1).map_or(turns.len(), |i| i + 1);
    let mut ctx = dedup_context(&d_sets[..stop]);
    let mut answer: Vec<u32> = env.model.vocab().encode(&ex.answer);
    answer.push(env.model.config().eoa_token_id);
    let max = env.model.config().max_context;
    let prompt = loop {
        match assemble_prompt(env.model, &ex.question, &env.texts(&ctx)?, true) {
            Ok(p) if p.len() + answer.len() - 1 <= max => break p,
            Ok(_) | Err(Error::ContextOverflow { .. }) if !ctx.is_empty() => {
                ctx.pop();
            }
            Ok(p) => return Err(Error::ContextOverflow { required: p.len() + answer.len() - 1, available: max }),
            Err(e) => return Err(e),
        }
    };
    let mut ntp_mask = vec![false; prompt.len()];
    ntp_mask.extend(std::iter::repeat(true).take(answer.len()));
    let mut ntp_tokens = prompt;
    ntp_tokens.extend(answer);
    let hop1_hit = turns[0].state.retrieved.contains(&ex.gold_doc_ids[0]);
    Ok(RolloutPlan {
        positives,
        turns,
        ntp_tokens,
        ntp_mask,
        hop1_hit,
    })
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Var,
    pub ntp: f64,
    /// Contrastive loss of each turn that had leftover positives.
    pub cl: Vec<f64>,
    /// Summed control BCE (0 when μ = 0).
    pub ctrl: f64,
    pub y_hat: Vec<f64>,
}

/// Records the combined objective for a planned rollout.
pub fn rollout_loss_on<F: Real>(
    tape: &mut Tape<F>,
    env: &RolloutEnv,
    head: &ControlHead,
    plan: &RolloutPlan,
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let model = env.model;
    let mut docs: HashMap<usize, Var> = HashMap::new();
    let mut encode = |tape: &mut Tape<F>, row: usize| -> Result<Var> {
        if let Some(&v) = docs.get(&row) {
            return Ok(v);
        }
        let (v, _) = model.encode_document_on(tape, &env.doc_tokens[row])?;
        docs.insert(row, v);
        Ok(v)
    };
    let mut cl_vars = Vec::new();
    let mut y_vars = Vec::new();
    for turn in &plan.turns {
        let q = model.latent_query_on(tape, &turn.query_tokens, 1)?;
        if let (true, Some(p)) = (cfg.lambda > 0.0, turn.positive) {
            let pos = encode(tape, p)?;
            let negs = turn.negatives.iter().map(|&n| encode(tape, n)).collect::<Result<Vec<_>>>()?;
            cl_vars.push(contrastive_loss_on(tape, q, pos, &negs, cfg.tau)?);
        }
        y_vars.push(head.forward_on(tape, q)?);
    }
    let labels: Vec<u8> = plan.turns.iter().map(|t| t.state.label).collect();
    let ctrl = if cfg.mu > 0.0 {
        Some(control_loss_on(tape, &y_vars, &labels)?)
    } else {
        None
    };
    let ntp = ntp_loss_on(tape, model, &plan.ntp_tokens, &plan.ntp_mask)?;
    let total = total_loss_on(tape, ntp, &cl_vars, ctrl, cfg.lambda, cfg.mu)?;
    Ok(LossParts {
        total,
        ntp: tape.scalar(ntp).as_f64(),
        cl: cl_vars.iter().map(|&v| tape.scalar(v).as_f64()).collect(),
        ctrl: ctrl.map_or(0.0, |c| tape.scalar(c).as_f64()),
        y_hat: y_vars.iter().map(|&v| tape.scalar(v).as_f64()).collect(),
    })
}
