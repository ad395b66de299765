//! Exact cosine-similarity index over document embeddings.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;

use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::datakit::Document;
use crate::error::{Error, Result};
use crate::model::MicroTransformer;

pub const INDEX_MAGIC: &[u8; 4] = b"LIDX";
pub const INDEX_VERSION: u32 = 1;
pub const DEFAULT_REFRESH_PERIOD: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    /// Row of the document in the index.
    pub position: usize,
    pub doc_id: String,
    pub score: f32,
}

/// Ranked hits, best first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.doc_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardNegatives {
    pub hits: Vec<Hit>,
    /// Fewer than the requested number of non-positive documents existed.
    pub exhausted: bool,
}

#[derive(Debug, Clone)]
pub struct VectorIndex {
    dim: usize,
    doc_ids: Vec<String>,
    vectors: Vec<f32>,
    norms: Vec<f64>,
    fingerprint: u64,
    positions: HashMap<String, usize>,
}

impl PartialEq for VectorIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.doc_ids == other.doc_ids
            && self.fingerprint == other.fingerprint
            && self.vectors.len() == other.vectors.len()
            && self.vectors.iter().zip(&other.vectors).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] as f64 * y[k] as f64;
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(&x, &y)| x as f64 * y as f64).sum();
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Tokens a document is encoded from.
pub fn document_tokens(model: &MicroTransformer, doc: &Document) -> Vec<u32> {
    model.vocab().encode(&doc.text)
}

fn encode_all(model: &MicroTransformer, corpus: &[Document]) -> Result<Vec<f32>> {
    let fp = model.fingerprint();
    let rows: Vec<Vec<f32>> = corpus
        .par_iter()
        .map(|doc| {
            let emb = model.encode_document_with(&doc.id, &document_tokens(model, doc), fp)?;
            if emb.vector.iter().all(|&x| x == 0.0) {
                return Err(Error::Numerical(format!("document {} encodes to the zero vector", doc.id)));
            }
            Ok(emb.vector)
        })
        .collect::<Result<_>>()?;
    Ok(rows.concat())
}

impl VectorIndex {
    pub fn build(corpus: &[Document], model: &MicroTransformer) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot index an empty corpus"));
        }
        let vectors = encode_all(model, corpus)?;
        Self::from_parts(
            model.dim(),
            corpus.iter().map(|d| d.id.clone()).collect(),
            vectors,
            model.fingerprint(),
        )
    }

    /// Assembles an index from precomputed vectors (`n × dim`, row-major).
    pub fn from_parts(dim: usize, doc_ids: Vec<String>, vectors: Vec<f32>, fingerprint: u64) -> Result<Self> {
        if dim == 0 || vectors.len() != doc_ids.len() * dim {
            return Err(Error::invalid(format!(
                "{} values do not form {} vectors of dimension {dim}",
                vectors.len(),
                doc_ids.len()
            )));
        }
        let mut positions = HashMap::with_capacity(doc_ids.len());
        for (i, id) in doc_ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let mut norms = Vec::with_capacity(doc_ids.len());
        for (i, row) in vectors.chunks_exact(dim).enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("vector for {} is not finite", doc_ids[i])));
            }
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::Domain(format!("vector for {} is all zero", doc_ids[i])));
            }
            norms.push(n);
        }
        Ok(VectorIndex {
            dim,
            doc_ids,
            vectors,
            norms,
            fingerprint,
            positions,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn vector(&self, position: usize) -> &[f32] {
        &self.vectors[position * self.dim..(position + 1) * self.dim]
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.positions.get(doc_id).copied()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn check_model(&self, model: &MicroTransformer) -> Result<()> {
        if self.dim != model.dim() {
            return Err(Error::DimensionMismatch {
                expected: model.dim(),
                found: self.dim,
            });
        }
        let fp = model.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                index: self.fingerprint,
                model: fp,
            });
        }
        Ok(())
    }

    /// Re-encodes every document under the current weights. The new matrix
    /// replaces the old one only once it is complete.
    pub fn refresh(&mut self, corpus: &[Document], model: &MicroTransformer) -> Result<()> {
        if corpus.len() != self.len() || corpus.iter().zip(&self.doc_ids).any(|(d, id)| &d.id != id) {
            return Err(Error::invalid("refresh corpus does not match the indexed documents"));
        }
        let fresh = Self::build(corpus, model)?;
        *self = fresh;
        Ok(())
    }

    /// Cosine score of every document against `q`.
    pub fn scores(&self, q: &[f32]) -> Result<Vec<f64>> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: q.len(),
            });
        }
        let qn = norm(q);
        if qn == 0.0 || !qn.is_finite() {
            return Err(Error::Domain("query vector is zero or not finite".into()));
        }
        Ok(self
            .vectors
            .chunks_exact(self.dim)
            .zip(&self.norms)
            .map(|(v, &n)| dot64(q, v) / (qn * n))
            .collect())
    }

    fn rank(&self, scores: &[f64], k: usize, keep: impl Fn(usize) -> bool) -> Vec<Hit> {
        let cmp = |&a: &usize, &b: &usize| -> Ordering {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.doc_ids[a].cmp(&self.doc_ids[b]))
        };
        let mut cand: Vec<usize> = (0..scores.len()).filter(|&i| keep(i)).collect();
        if cand.len() > k {
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
        }
        cand.sort_unstable_by(cmp);
        cand.into_iter()
            .map(|i| Hit {
                position: i,
                doc_id: self.doc_ids[i].clone(),
                score: scores[i].clamp(-1.0, 1.0) as f32,
            })
            .collect()
    }

    /// The `k` highest-cosine documents; equal scores rank by ascending id.
    pub fn top_k(&self, q: &[f32], k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        let scores = self.scores(q)?;
        Ok(RetrievalResult {
            hits: self.rank(&scores, k, |_| true),
        })
    }

    /// The `m` highest-cosine documents outside `positive_ids`.
    pub fn mine_hard_negatives(&self, q: &[f32], positive_ids: &BTreeSet<String>, m: usize) -> Result<HardNegatives> {
        let excluded: Vec<usize> = positive_ids.iter().filter_map(|id| self.position(id)).collect();
        self.mine_excluding(q, &excluded, m)
    }

    /// [`Self::mine_hard_negatives`] with positives given as index rows.
    pub fn mine_excluding(&self, q: &[f32], excluded: &[usize], m: usize) -> Result<HardNegatives> {
        if m == 0 {
            return Err(Error::invalid("number of negatives must be at least 1"));
        }
        let scores = self.scores(q)?;
        let hits = self.rank(&scores, m, |i| !excluded.contains(&i));
        Ok(HardNegatives {
            exhausted: hits.len() < m,
            hits,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(INDEX_MAGIC);
        w.u32(INDEX_VERSION);
        w.u32(self.dim as u32);
        w.u32(self.len() as u32);
        w.u64(self.fingerprint);
        for (id, v) in self.doc_ids.iter().zip(self.vectors.chunks_exact(self.dim)) {
            w.len_prefixed(id.as_bytes());
            w.f32s(v);
        }
        w.finish()
    }

    pub fn from_bytes(path: &Path, data: &[u8]) -> Result<Self> {
        let mut r = Reader::checked(path, data)?;
        if r.bytes(4)? != INDEX_MAGIC {
            return Err(r.corrupt("bad magic; not an index file"));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(r.corrupt(format!("unsupported index version {version}")));
        }
        let dim = r.u32()? as usize;
        let n = r.u32()? as usize;
        let fingerprint = r.u64()?;
        if dim == 0 {
            return Err(r.corrupt("dimension is zero"));
        }
        let mut ids = Vec::new();
        let mut vectors = Vec::new();
        for _ in 0..n {
            ids.push(r.string()?);
            vectors.extend(r.f32s(dim)?);
        }
        r.expect_end()?;
        Self::from_parts(dim, ids, vectors, fingerprint).map_err(|e| r.corrupt(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(path, &read_file(path)?)
    }

    /// Loads and checks the dimension against `model`. Fingerprints are
    /// compared separately by [`Self::check_model`].
    pub fn load_for_model(path: impl AsRef<Path>, model: &MicroTransformer) -> Result<Self> {
        let idx = Self::load(path)?;
        if idx.dim != model.dim() {
            return Err(Error::DimensionMismatch {
                expected: model.dim(),
                found: idx.dim,
            });
        }
        Ok(idx)
    }
}
