//! Multi-turn inference: latent retrieval, control-head stopping, prompt
//! assembly and greedy answer generation.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{is_stop, ControlHead};
use crate::datakit::Document;
use crate::error::{Error, Result};
use crate::index::VectorIndex;
use crate::model::MicroTransformer;
use crate::tokenizer::{Vocab, PRED};

pub const DOC_SEPARATOR: &str = " | ";
pub const EMPTY_CONTEXT: &str = "(none)";
pub const DEFAULT_MAX_ANSWER_TOKENS: usize = 8;

pub fn render_context(doc_texts: &[&str]) -> String {
    if doc_texts.is_empty() {
        EMPTY_CONTEXT.to_string()
    } else {
        doc_texts.join(DOC_SEPARATOR)
    }
}

/// The generation prompt. Without the answer prefix the text ends after the
/// context line.
pub fn render_prompt(question: &str, doc_texts: &[&str], include_answer_prefix: bool) -> String {
    let mut s = format!(
        "Answer the given question: {question}. {PRED}\nBy using reference context: {}.\n",
        render_context(doc_texts)
    );
    if include_answer_prefix {
        s.push_str("Answer: ");
    }
    s
}

/// Context a latent query is read from; the model appends `[PRED]` after it
/// so the query position can attend to every retrieved document.
pub fn render_query_context(question: &str, doc_texts: &[&str]) -> String {
    format!(
        "Answer the given question: {question}.\nBy using reference context: {}.",
        render_context(doc_texts)
    )
}

fn encode_checked(vocab: &Vocab, text: &str, limit: usize) -> Result<Vec<u32>> {
    let tokens = vocab.encode(text);
    if tokens.len() > limit {
        return Err(Error::ContextOverflow {
            required: tokens.len(),
            available: limit,
        });
    }
    Ok(tokens)
}

pub fn assemble_prompt(
    model: &MicroTransformer,
    question: &str,
    doc_texts: &[&str],
    include_answer_prefix: bool,
) -> Result<Vec<u32>> {
    if question.trim().is_empty() {
        return Err(Error::invalid("question is empty"));
    }
    encode_checked(
        model.vocab(),
        &render_prompt(question, doc_texts, include_answer_prefix),
        model.config().max_context,
    )
}

/// Query context tokens, leaving room for the appended `[PRED]`.
pub fn assemble_query(model: &MicroTransformer, question: &str, doc_texts: &[&str]) -> Result<Vec<u32>> {
    if question.trim().is_empty() {
        return Err(Error::invalid("question is empty"));
    }
    encode_checked(
        model.vocab(),
        &render_query_context(question, doc_texts),
        model.config().max_context - 1,
    )
}

/// Unique ids in order of first retrieval.
pub fn dedup_context<S: AsRef<str>>(d_sets: &[Vec<S>]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for set in d_sets {
        for id in set {
            if seen.insert(id.as_ref()) {
                out.push(id.as_ref().to_string());
            }
        }
    }
    out
}

pub fn vector_hash(v: &[f32]) -> String {
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_le_bytes());
    }
    let d = h.finalize();
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Stop,
    Continue,
}

/// How the loop decides to stop; the head is evaluated every turn in all
/// modes so traces stay comparable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopPolicy {
    /// Stop when the head says so, or at the turn limit.
    Adaptive,
    /// Always stop after the first retrieval.
    SingleShot,
    /// Always run to the turn limit.
    AlwaysMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: usize,
    pub query_hash: String,
    pub retrieved: Vec<ScoredDoc>,
    pub y_hat: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub question: String,
    pub turns: Vec<TurnRecord>,
    pub retrieval_calls: usize,
    /// Documents placed in the generation prompt, deduplicated.
    pub context_doc_ids: Vec<String>,
    pub context_tokens: usize,
    pub answer: String,
    /// Retrieval ended early because the context would not fit.
    pub overflow: bool,
}

impl EpisodeTrace {
    /// Union of retrieved ids over the first `turns` turns.
    pub fn retrieved_by(&self, turns: usize) -> BTreeSet<&str> {
        self.turns
            .iter()
            .take(turns)
            .flat_map(|t| t.retrieved.iter().map(|d| d.doc_id.as_str()))
            .collect()
    }
}

pub fn write_traces(path: impl AsRef<Path>, traces: &[EpisodeTrace]) -> Result<()> {
    let path = path.as_ref();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for t in traces {
        serde_json::to_writer(&mut w, t).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_traces(path: impl AsRef<Path>) -> Result<Vec<EpisodeTrace>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub struct Orchestrator<'a> {
    model: &'a MicroTransformer,
    head: &'a ControlHead,
    index: &'a VectorIndex,
    corpus: &'a [Document],
    k: usize,
    max_turns: usize,
    policy: StopPolicy,
    max_answer_tokens: usize,
}

impl<'a> Orchestrator<'a> {
    /// Refuses an index built under different weights or over a different
    /// corpus.
    pub fn new(
        model: &'a MicroTransformer,
        head: &'a ControlHead,
        index: &'a VectorIndex,
        corpus: &'a [Document],
        k: usize,
        max_turns: usize,
    ) -> Result<Self> {
        index.check_model(model)?;
        if head.input_dim() != model.dim() {
            return Err(Error::DimensionMismatch {
                expected: model.dim(),
                found: head.input_dim(),
            });
        }
        if corpus.len() != index.len() || corpus.iter().zip(index.doc_ids()).any(|(d, id)| &d.id != id) {
            return Err(Error::invalid("corpus does not match the index document list"));
        }
        if k == 0 || max_turns == 0 {
            return Err(Error::invalid("K and R must both be at least 1"));
        }
        Ok(Orchestrator {
            model,
            head,
            index,
            corpus,
            k,
            max_turns,
            policy: StopPolicy::Adaptive,
            max_answer_tokens: DEFAULT_MAX_ANSWER_TOKENS,
        })
    }

    pub fn with_policy(mut self, policy: StopPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_max_answer_tokens(mut self, n: usize) -> Self {
        self.max_answer_tokens = n.max(1);
        self
    }

    fn texts(&self, ids: &[String]) -> Vec<&'a str> {
        let corpus = self.corpus;
        ids.iter()
            .map(|id| corpus[self.index.position(id).expect("ids come from the index")].text.as_str())
            .collect()
    }

    pub fn run(&self, question: &str) -> Result<(String, EpisodeTrace)> {
        let mut turns: Vec<TurnRecord> = Vec::new();
        let mut d_sets: Vec<Vec<String>> = Vec::new();
        let mut overflow = false;
        for r in 1..=self.max_turns {
            let ctx_ids = dedup_context(&d_sets);
            let ctx = self.texts(&ctx_ids);
            let tokens = match assemble_query(self.model, question, &ctx) {
                Ok(t) => t,
                Err(Error::ContextOverflow { .. }) if r > 1 => {
                    overflow = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            let q = self.model.latent_query(&tokens, 1)?;
            let hits = self.index.top_k(&q.vector, self.k)?;
            let y_hat = self.head.decide(&q.vector)?;
            let stop = match self.policy {
                StopPolicy::Adaptive => is_stop(y_hat),
                StopPolicy::SingleShot => true,
                StopPolicy::AlwaysMax => false,
            };
            d_sets.push(hits.hits.iter().map(|h| h.doc_id.clone()).collect());
            turns.push(TurnRecord {
                turn: r,
                query_hash: vector_hash(&q.vector),
                retrieved: hits
                    .hits
                    .into_iter()
                    .map(|h| ScoredDoc {
                        doc_id: h.doc_id,
                        score: h.score,
                    })
                    .collect(),
                y_hat,
                decision: if stop { Decision::Stop } else { Decision::Continue },
            });
            if stop {
                break;
            }
        }

        // Drop the newest documents until the prompt and answer fit.
        let mut ctx_ids = dedup_context(&d_sets);
        let budget = self.model.config().max_context.saturating_sub(self.max_answer_tokens);
        let prompt = loop {
            let ctx = self.texts(&ctx_ids);
            match assemble_prompt(self.model, question, &ctx, true) {
                Ok(p) if p.len() <= budget => break p,
                Ok(_) | Err(Error::ContextOverflow { .. }) if !ctx_ids.is_empty() => {
                    overflow = true;
                    ctx_ids.pop();
                }
                Ok(p) => break p,
                Err(e) => return Err(e),
            }
        };
        let gen = self.model.generate(&prompt, self.max_answer_tokens)?;
        let answer = self.model.vocab().decode(&gen.tokens);
        let trace = EpisodeTrace {
            question: question.to_string(),
            retrieval_calls: turns.len(),
            turns,
            context_doc_ids: ctx_ids,
            context_tokens: prompt.len(),
            answer: answer.clone(),
            overflow,
        };
        Ok((answer, trace))
    }

    /// Direct generation from the empty-context prompt.
    pub fn run_without_retrieval(&self, question: &str) -> Result<(String, EpisodeTrace)> {
        let prompt = assemble_prompt(self.model, question, &[], true)?;
        let gen = self.model.generate(&prompt, self.max_answer_tokens)?;
        let answer = self.model.vocab().decode(&gen.tokens);
        Ok((
            answer.clone(),
            EpisodeTrace {
                question: question.to_string(),
                turns: Vec::new(),
                retrieval_calls: 0,
                context_doc_ids: Vec::new(),
                context_tokens: prompt.len(),
                answer,
                overflow: false,
            },
        ))
    }
}
