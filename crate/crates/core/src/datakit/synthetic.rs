//! Entity-relation world with bridge-entity questions.
//!
//! Every entity owns one document stating two of its relations, e.g.
//! `lirat is the mentor of kavo; semu is the rival of kavo`, so each
//! document ends with the entity it describes. A 1-hop question asks for one
//! relation of a named entity. A 2-hop question chains two relations
//! (`what is the rival of the mentor of kavo`): the hop-1 document names the
//! bridge entity, whose own document holds the answer.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Document, QAExample};
use crate::error::{Error, Result};
use crate::tokenizer;

const RELATIONS: &[&str] = &[
    "mentor", "rival", "partner", "founder", "neighbor", "sponsor", "captain", "author", "pupil", "ally",
    "heir", "editor", "patron", "deputy", "coach", "critic",
];

const FACTS_PER_DOC: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Fractions of 1-hop and 2-hop questions.
    pub hop_mix: [f64; 2],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_entities: 5000,
            n_relations: 8,
            n_train: 4000,
            n_eval: 500,
            hop_mix: [0.5, 0.5],
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub corpus: Vec<Document>,
    pub train: Vec<QAExample>,
    pub eval: Vec<QAExample>,
}

struct World {
    names: Vec<String>,
    /// `(relation, target entity)` pairs per entity.
    facts: Vec<Vec<(usize, usize)>>,
}

impl World {
    fn doc_id(&self, e: usize) -> String {
        let width = self.names.len().saturating_sub(1).to_string().len().max(5);
        format!("doc-{e:0width$}")
    }

    fn doc_mentions(&self, e: usize, other: usize) -> bool {
        e == other || self.facts[e].iter().any(|&(_, t)| t == other)
    }
}

fn entity_names(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let reserved: HashSet<&str> = RELATIONS
        .iter()
        .copied()
        .chain(["the", "what", "is", "of", "none", "a", "an", "by", "using", "given", "answer"])
        .collect();
    let mut seen = HashSet::with_capacity(n);
    let mut names = Vec::with_capacity(n);
    while names.len() < n {
        let syllables = rng.gen_range(2..=3);
        let mut s = String::with_capacity(6);
        for _ in 0..syllables {
            s.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            s.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if !reserved.contains(s.as_str()) && seen.insert(s.clone()) {
            names.push(s);
        }
    }
    names
}

fn build_world(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> World {
    let names = entity_names(cfg.n_entities, rng);
    let rel_ids: Vec<usize> = (0..cfg.n_relations).collect();
    let facts = (0..cfg.n_entities)
        .map(|e| {
            let rels: Vec<usize> = rel_ids.choose_multiple(rng, FACTS_PER_DOC).copied().collect();
            let mut used = vec![e];
            rels.into_iter()
                .map(|r| {
                    let t = loop {
                        let t = rng.gen_range(0..cfg.n_entities);
                        if !used.contains(&t) {
                            break t;
                        }
                    };
                    used.push(t);
                    (r, t)
                })
                .collect()
        })
        .collect();
    World { names, facts }
}

fn one_hop(w: &World, rng: &mut ChaCha8Rng) -> QAExample {
    let e = rng.gen_range(0..w.names.len());
    let (r, x) = *w.facts[e].choose(rng).expect("facts per doc > 0");
    QAExample {
        question: format!("what is the {} of {}", RELATIONS[r], w.names[e]),
        answer: w.names[x].clone(),
        gold_doc_ids: vec![w.doc_id(e)],
        hops: 1,
    }
}

fn two_hop(w: &World, rng: &mut ChaCha8Rng) -> Option<QAExample> {
    let e = rng.gen_range(0..w.names.len());
    let (r1, b) = *w.facts[e].choose(rng).expect("facts per doc > 0");
    let (r2, a) = *w.facts[b].choose(rng).expect("facts per doc > 0");
    // Reject chains answerable from a single document.
    if w.doc_mentions(e, a) || w.doc_mentions(b, e) {
        return None;
    }
    Some(QAExample {
        question: format!("what is the {} of the {} of {}", RELATIONS[r2], RELATIONS[r1], w.names[e]),
        answer: w.names[a].clone(),
        gold_doc_ids: vec![w.doc_id(e), w.doc_id(b)],
        hops: 2,
    })
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.n_entities < 4 || cfg.n_relations < FACTS_PER_DOC || cfg.n_train + cfg.n_eval == 0 {
        return Err(Error::invalid(
            "need at least 4 entities, 2 relations and one question",
        ));
    }
    if cfg.n_relations > RELATIONS.len() {
        return Err(Error::invalid(format!("at most {} relations are available", RELATIONS.len())));
    }
    if cfg.hop_mix.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (cfg.hop_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("hop_mix fractions must lie in [0, 1] and sum to 1"));
    }
    let total = cfg.n_train + cfg.n_eval;
    let n_one = (total as f64 * cfg.hop_mix[0]).round() as usize;
    let n_two = total - n_one;
    if n_one > cfg.n_entities * FACTS_PER_DOC {
        return Err(Error::Insufficient(format!(
            "{n_one} distinct 1-hop questions requested but {} entities only support {}",
            cfg.n_entities,
            cfg.n_entities * FACTS_PER_DOC
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = build_world(cfg, &mut rng);
    let corpus = (0..cfg.n_entities)
        .map(|e| {
            let facts: Vec<String> = world.facts[e]
                .iter()
                .map(|&(r, t)| format!("{} is the {} of {}", world.names[t], RELATIONS[r], world.names[e]))
                .collect();
            Document {
                id: world.doc_id(e),
                title: world.names[e].clone(),
                text: facts.join("; "),
            }
        })
        .collect();

    let mut seen = HashSet::new();
    let mut questions = Vec::with_capacity(total);
    let mut draw = |want: usize, hops: u8, rng: &mut ChaCha8Rng| -> Result<()> {
        let mut got = 0;
        let mut attempts = 0usize;
        while got < want {
            attempts += 1;
            if attempts > 50 * want + 1000 {
                return Err(Error::Insufficient(format!(
                    "could only generate {got} of {want} distinct {hops}-hop questions from {} entities",
                    cfg.n_entities
                )));
            }
            let ex = if hops == 1 { Some(one_hop(&world, rng)) } else { two_hop(&world, rng) };
            if let Some(ex) = ex {
                if seen.insert(ex.question.clone()) {
                    questions.push(ex);
                    got += 1;
                }
            }
        }
        Ok(())
    };
    draw(n_one, 1, &mut rng)?;
    draw(n_two, 2, &mut rng)?;
    questions.shuffle(&mut rng);
    let eval = questions.split_off(cfg.n_train);
    let data = SyntheticData {
        corpus,
        train: questions,
        eval,
    };
    audit(&data)?;
    Ok(data)
}

/// Structural checks over generated data: referential integrity, and for
/// each 2-hop item that the bridge entity links the two documents while
/// neither document alone answers the question.
pub fn audit(data: &SyntheticData) -> Result<()> {
    let by_id: std::collections::HashMap<&str, &Document> = data.corpus.iter().map(|d| (d.id.as_str(), d)).collect();
    let words = |s: &str| -> HashSet<String> { tokenizer::split(s).into_iter().map(str::to_string).collect() };
    let fail = |ex: &QAExample, why: &str| Error::Domain(format!("audit failed for `{}`: {why}", ex.question));
    for ex in data.train.iter().chain(&data.eval) {
        ex.validate()?;
        let docs: Vec<&Document> = ex
            .gold_doc_ids
            .iter()
            .map(|g| by_id.get(g.as_str()).copied().ok_or_else(|| Error::UnknownId(g.clone())))
            .collect::<Result<_>>()?;
        let last = docs.last().expect("validated non-empty");
        if !words(&last.text).contains(&ex.answer) {
            return Err(fail(ex, "answer missing from the final gold document"));
        }
        if ex.hops == 2 {
            let (d1, d2) = (docs[0], docs[1]);
            let bridge = &d2.title;
            let q = words(&ex.question);
            if !words(&d1.text).contains(bridge) {
                return Err(fail(ex, "bridge entity absent from the hop-1 document"));
            }
            if q.contains(bridge) {
                return Err(fail(ex, "bridge entity named in the question"));
            }
            if words(&d1.text).contains(&ex.answer) {
                return Err(fail(ex, "hop-1 document contains the answer"));
            }
            if words(&d2.text).contains(&d1.title) {
                return Err(fail(ex, "hop-2 document names the question entity"));
            }
        }
    }
    let train_q: HashSet<&str> = data.train.iter().map(|e| e.question.as_str()).collect();
    if data.eval.iter().any(|e| train_q.contains(e.question.as_str())) {
        return Err(Error::Domain("train and eval share a question".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, mix: [f64; 2]) -> SyntheticConfig {
        SyntheticConfig {
            n_entities: 300,
            n_relations: 6,
            n_train: 200,
            n_eval: 50,
            hop_mix: mix,
            seed,
        }
    }

    #[test]
    fn deterministic_and_audited() {
        let a = generate_synthetic(&small(3, [0.5, 0.5])).unwrap();
        let b = generate_synthetic(&small(3, [0.5, 0.5])).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
        assert_eq!(a.train.len(), 200);
        assert_eq!(a.eval.len(), 50);
        assert!(a.train.iter().any(|e| e.hops == 2));
        audit(&a).unwrap();
    }

    #[test]
    fn hop_mix_semantics() {
        let d = generate_synthetic(&small(1, [1.0, 0.0])).unwrap();
        assert!(d.train.iter().chain(&d.eval).all(|e| e.gold_doc_ids.len() == 1));
        let d = generate_synthetic(&small(1, [0.0, 1.0])).unwrap();
        assert!(d.train.iter().chain(&d.eval).all(|e| e.hops == 2));
    }

    #[test]
    fn too_few_entities_is_an_error() {
        let cfg = SyntheticConfig {
            n_entities: 10,
            n_train: 100,
            n_eval: 10,
            ..small(0, [1.0, 0.0])
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Insufficient(_))));
        assert!(generate_synthetic(&SyntheticConfig { hop_mix: [0.7, 0.7], ..small(0, [0.5, 0.5]) }).is_err());
    }

    #[test]
    fn audit_catches_a_planted_shortcut() {
        let mut d = generate_synthetic(&small(5, [0.0, 1.0])).unwrap();
        let ex = d.eval[0].clone();
        let hop1 = d.corpus.iter_mut().find(|x| x.id == ex.gold_doc_ids[0]).unwrap();
        hop1.text.push_str(&format!("; {} is the critic of {}", ex.answer, hop1.title));
        assert!(audit(&d).is_err());
    }
}
