use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{exact_match, Document, QAExample};
use crate::control::{control_label, is_stop, ControlHead};
use crate::error::{Error, Result};
use crate::index::VectorIndex;
use crate::model::MicroTransformer;
use crate::orchestrator::{EpisodeTrace, Orchestrator, StopPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Adaptive,
    SingleShot,
    AlwaysMax,
    NoRetrieval,
}

impl EvalMode {
    pub const ALL: [EvalMode; 4] = [EvalMode::Adaptive, EvalMode::SingleShot, EvalMode::AlwaysMax, EvalMode::NoRetrieval];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Adaptive => "adaptive",
            EvalMode::SingleShot => "single-shot",
            EvalMode::AlwaysMax => "always-max",
            EvalMode::NoRetrieval => "no-retrieval",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown evaluation mode `{s}`")))
    }
}

/// Aggregate metrics for one evaluation mode. Fractions over empty groups
/// are reported as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub n: usize,
    pub n_one_hop: usize,
    pub n_two_hop: usize,
    pub em: f64,
    pub em_one_hop: f64,
    pub em_two_hop: f64,
    /// Hop-1 gold document among the turn-1 retrievals.
    pub recall_hop1: f64,
    /// Hop-2 gold document retrieved by turn 2 (2-hop items).
    pub recall_hop2: f64,
    /// Both gold documents retrieved by turn 2 (2-hop items).
    pub both_gold_two_hop: f64,
    pub mean_turns: f64,
    /// Agreement of `ŷ ≥ 0.5` with the subset label, over executed turns.
    pub control_accuracy: f64,
    pub control_turns: usize,
    pub overflow_episodes: usize,
}

fn frac(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    /// Recomputes every metric from episode traces.
    pub fn from_traces(mode: EvalMode, examples: &[QAExample], traces: &[EpisodeTrace]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("empty evaluation set"));
        }
        if examples.len() != traces.len() {
            return Err(Error::invalid(format!(
                "{} examples but {} traces",
                examples.len(),
                traces.len()
            )));
        }
        let (mut em, mut em1, mut em2, mut n1, mut n2) = (0, 0, 0, 0, 0);
        let (mut hop1, mut hop2, mut both) = (0, 0, 0);
        let (mut turns, mut ctrl_ok, mut ctrl_n, mut overflow) = (0, 0, 0, 0);
        for (ex, tr) in examples.iter().zip(traces) {
            if ex.question != tr.question {
                return Err(Error::invalid(format!("trace for `{}` is out of order", tr.question)));
            }
            let hit = exact_match(&tr.answer, &ex.answer) as usize;
            em += hit;
            if ex.hops == 1 {
                n1 += 1;
                em1 += hit;
            } else {
                n2 += 1;
                em2 += hit;
            }
            let by1 = tr.retrieved_by(1);
            let by2 = tr.retrieved_by(2);
            hop1 += usize::from(by1.contains(ex.gold_doc_ids[0].as_str()));
            if ex.hops == 2 {
                let h2 = by2.contains(ex.gold_doc_ids[1].as_str());
                hop2 += usize::from(h2);
                both += usize::from(h2 && by2.contains(ex.gold_doc_ids[0].as_str()));
            }
            turns += tr.turns.len();
            overflow += usize::from(tr.overflow);
            let gold: BTreeSet<&str> = ex.gold_doc_ids.iter().map(String::as_str).collect();
            for (i, t) in tr.turns.iter().enumerate() {
                let y = control_label(&gold, &tr.retrieved_by(i + 1));
                ctrl_ok += usize::from(is_stop(t.y_hat) == (y == 1));
                ctrl_n += 1;
            }
        }
        let n = examples.len();
        Ok(EvalReport {
            mode,
            n,
            n_one_hop: n1,
            n_two_hop: n2,
            em: frac(em, n),
            em_one_hop: frac(em1, n1),
            em_two_hop: frac(em2, n2),
            recall_hop1: frac(hop1, n),
            recall_hop2: frac(hop2, n2),
            both_gold_two_hop: frac(both, n2),
            mean_turns: frac(turns, n),
            control_accuracy: frac(ctrl_ok, ctrl_n),
            control_turns: ctrl_n,
            overflow_episodes: overflow,
        })
    }
}

/// Runs every example through the orchestrator in `mode` and returns the
/// report together with the traces it was computed from.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &MicroTransformer,
    head: &ControlHead,
    index: &VectorIndex,
    corpus: &[Document],
    examples: &[QAExample],
    k: usize,
    max_turns: usize,
    mode: EvalMode,
) -> Result<(EvalReport, Vec<EpisodeTrace>)> {
    if examples.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let policy = match mode {
        EvalMode::Adaptive | EvalMode::NoRetrieval => StopPolicy::Adaptive,
        EvalMode::SingleShot => StopPolicy::SingleShot,
        EvalMode::AlwaysMax => StopPolicy::AlwaysMax,
    };
    let orch = Orchestrator::new(model, head, index, corpus, k, max_turns)?.with_policy(policy);
    let traces: Vec<EpisodeTrace> = examples
        .par_iter()
        .map(|ex| {
            let (_, trace) = if mode == EvalMode::NoRetrieval {
                orch.run_without_retrieval(&ex.question)?
            } else {
                orch.run(&ex.question)?
            };
            Ok(trace)
        })
        .collect::<Result<_>>()?;
    let report = EvalReport::from_traces(mode, examples, &traces)?;
    Ok((report, traces))
}
