//! First-answer-token entropy as a function of how many gold documents the
//! context holds.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::{Document, QAExample};
use crate::error::{Error, Result};
use crate::model::MicroTransformer;
use crate::numerics::entropy;
use crate::orchestrator::assemble_prompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Order statistic at `floor(p · (n − 1))` of sorted data; for even counts
/// the median is the lower of the two middle values.
pub fn lower_quantile(sorted: &[f64], p: f64) -> f64 {
    sorted[(p * (sorted.len() - 1) as f64).floor() as usize]
}

pub fn five_numbers(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Some(Summary {
        count: s.len(),
        min: s[0],
        q1: lower_quantile(&s, 0.25),
        median: lower_quantile(&s, 0.5),
        q3: lower_quantile(&s, 0.75),
        max: s[s.len() - 1],
    })
}

/// Five-number summaries per list; empty lists give `None`.
pub fn summarize(per_k: &[Vec<f64>]) -> Vec<Option<Summary>> {
    per_k.iter().map(|v| five_numbers(v)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyCell {
    pub k: usize,
    pub entropies: Vec<f64>,
    /// Absent when the cell is empty.
    pub summary: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub k_max: usize,
    pub docs_per_context: usize,
    pub seed: u64,
    /// Upper bound `ln |V|` of every measurement.
    pub max_entropy: f64,
    /// Examples with fewer than `k_max` gold documents.
    pub skipped: usize,
    pub cells: Vec<EntropyCell>,
}

impl EntropyReport {
    pub fn median(&self, k: usize) -> Option<f64> {
        self.cells.get(k)?.summary.as_ref().map(|s| s.median)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,count,min,q1,median,q3,max\n");
        for c in &self.cells {
            match &c.summary {
                Some(m) => writeln!(s, "{},{},{},{},{},{},{}", c.k, m.count, m.min, m.q1, m.median, m.q3, m.max),
                None => writeln!(s, "{},0,,,,,", c.k),
            }
            .expect("writing to a String");
        }
        s
    }

    pub fn save(&self, json_path: impl AsRef<Path>, csv_path: Option<&Path>) -> Result<()> {
        let p = json_path.as_ref();
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::io(p, e.into()))?;
        std::fs::write(p, json).map_err(|e| Error::io(p, e))?;
        if let Some(c) = csv_path {
            std::fs::write(c, self.to_csv()).map_err(|e| Error::io(c, e))?;
        }
        Ok(())
    }
}

/// Document rows of the context for each `k = 0..=k_max`: `k` gold rows
/// chosen at random plus the first `docs_per_context - k` of one shared
/// distractor draw, shuffled.
pub fn plan_contexts<R: Rng>(
    gold: &[usize],
    corpus_len: usize,
    k_max: usize,
    docs_per_context: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if gold.len() < k_max || docs_per_context < k_max {
        return Err(Error::invalid("not enough gold documents or context slots for k_max"));
    }
    let gold_set: HashSet<usize> = gold.iter().copied().collect();
    if corpus_len < gold_set.len() + docs_per_context {
        return Err(Error::Insufficient("corpus too small for the requested distractors".into()));
    }
    let mut distractors = Vec::with_capacity(docs_per_context);
    while distractors.len() < docs_per_context {
        let d = rng.gen_range(0..corpus_len);
        if !gold_set.contains(&d) && !distractors.contains(&d) {
            distractors.push(d);
        }
    }
    Ok((0..=k_max)
        .map(|k| {
            let mut docs: Vec<usize> = gold.choose_multiple(rng, k).copied().collect();
            docs.extend_from_slice(&distractors[..docs_per_context - k]);
            docs.shuffle(rng);
            docs
        })
        .collect())
}

/// For every example with at least `k_max` gold documents and each
/// `k = 0..=k_max`, builds a context of `k` seeded gold documents plus
/// distractors up to `docs_per_context`, and measures the entropy of the
/// first answer token. Distractors are drawn once per example and shared by
/// all `k`, so the number of gold documents is the only thing that varies.
pub fn entropy_experiment(
    dataset: &[QAExample],
    model: &MicroTransformer,
    corpus: &[Document],
    k_max: usize,
    docs_per_context: usize,
    seed: u64,
) -> Result<EntropyReport> {
    if docs_per_context < k_max {
        return Err(Error::invalid(format!(
            "{docs_per_context} documents per context cannot hold {k_max} gold documents"
        )));
    }
    let by_id: std::collections::HashMap<&str, usize> =
        corpus.iter().enumerate().map(|(i, d)| (d.id.as_str(), i)).collect();
    let usable: Vec<(usize, &QAExample)> = dataset
        .iter()
        .enumerate()
        .filter(|(_, ex)| ex.gold_doc_ids.len() >= k_max)
        .collect();
    let skipped = dataset.len() - usable.len();
    let rows: Vec<Vec<f64>> = usable
        .par_iter()
        .map(|&(i, ex)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let gold: Vec<usize> = ex
                .gold_doc_ids
                .iter()
                .map(|g| by_id.get(g.as_str()).copied().ok_or_else(|| Error::UnknownId(g.clone())))
                .collect::<Result<_>>()?;
            let contexts = plan_contexts(&gold, corpus.len(), k_max, docs_per_context, &mut rng)?;
            contexts
                .iter()
                .map(|docs| {
                    let texts: Vec<&str> = docs.iter().map(|&d| corpus[d].text.as_str()).collect();
                    let prompt = assemble_prompt(model, &ex.question, &texts, true)?;
                    let p = model.answer_token_distribution(&prompt)?;
                    Ok(entropy(&p)? as f64)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let per_k: Vec<Vec<f64>> = (0..=k_max).map(|k| rows.iter().map(|r| r[k]).collect()).collect();
    let summaries = summarize(&per_k);
    Ok(EntropyReport {
        k_max,
        docs_per_context,
        seed,
        max_entropy: (model.config().vocab_size as f64).ln(),
        skipped,
        cells: per_k
            .into_iter()
            .zip(summaries)
            .enumerate()
            .map(|(k, (entropies, summary))| EntropyCell { k, entropies, summary })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_examples() {
        let s = five_numbers(&[7.0]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (7.0, 7.0, 7.0, 7.0, 7.0));
        assert_eq!(five_numbers(&[4.0, 1.0, 3.0, 2.0]).unwrap().median, 2.0);
        assert!(five_numbers(&[]).is_none());
        assert_eq!(summarize(&[vec![], vec![1.0]])[0], None);
    }

    #[test]
    fn matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>()).collect();
        let s = five_numbers(&v).unwrap();
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // lower rule over n = 1000: indices 249, 499, 749
        assert_eq!(s.q1, sorted[249]);
        assert_eq!(s.median, sorted[499]);
        assert_eq!(s.q3, sorted[749]);
        assert_eq!((s.min, s.max), (sorted[0], sorted[999]));
    }
}
