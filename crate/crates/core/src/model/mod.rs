//! Decoder-only causal transformer with a separate output projection.
//!
//! Pre-norm blocks (layer norm → rotary causal attention → residual, layer
//! norm → GELU MLP → residual) followed by a final layer norm. The final
//! normalised hidden states are what the LM head sees, and they are also the
//! vectors used for latent queries and document representations.


use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{self, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::tokenizer::{self, Vocab};


/// Store tag for transformer weights.
pub const MODEL_STORE: u32 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_context: usize,
    pub pred_token_id: u32,
    pub eoa_token_id: u32,
    pub answer_prefix_ids: Vec<u32>,
}

impl ModelConfig {
    /// Default desk-scale configuration for a vocabulary.
    pub fn micro(vocab: &Vocab) -> Self {
        ModelConfig {
            vocab_size: vocab.len(),
            d: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 256,
            max_context: 256,
            pred_token_id: tokenizer::PRED_ID,
            eoa_token_id: tokenizer::EOA_ID,
            answer_prefix_ids: answer_prefix_ids(vocab),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.d % self.n_heads != 0 || (self.d / self.n_heads) % 2 != 0 {
            return Err(Error::invalid(format!(
                "d = {} must split into {} heads of even width",
                self.d, self.n_heads
            )));
        }
        if self.pred_token_id as usize >= self.vocab_size || self.eoa_token_id as usize >= self.vocab_size {
            return Err(Error::invalid("special token id outside the vocabulary"));
        }
        if self.answer_prefix_ids.is_empty() || self.answer_prefix_ids.iter().any(|&t| t as usize >= self.vocab_size) {
            return Err(Error::invalid("answer prefix must be nonempty and inside the vocabulary"));
        }
        if self.max_context < 2 {
            return Err(Error::invalid("max_context must be at least 2"));
        }
        Ok(())
    }
}

/// Token ids of the `Answer:` prefix.
pub fn answer_prefix_ids(vocab: &Vocab) -> Vec<u32> {
    vocab.encode("Answer:")
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    w_qkv: ParamId,
    w_out: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w_up: ParamId,
    b_up: ParamId,
    w_down: ParamId,
    b_down: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: ParamId,
    layers: Vec<LayerIds>,
    lnf_gain: ParamId,
    lnf_bias: ParamId,
    lm_head: ParamId,
}

/// Parameter names and shapes, in storage order.
fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut specs = vec![("tok_emb".to_string(), vec![c.vocab_size, c.d])];
    for i in 0..c.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        specs.push((p("ln1.gain"), vec![1, c.d]));
        specs.push((p("ln1.bias"), vec![1, c.d]));
        specs.push((p("attn.qkv"), vec![c.d, 3 * c.d]));
        specs.push((p("attn.out"), vec![c.d, c.d]));
        specs.push((p("ln2.gain"), vec![1, c.d]));
        specs.push((p("ln2.bias"), vec![1, c.d]));
        specs.push((p("mlp.up"), vec![c.d, c.ffn_dim]));
        specs.push((p("mlp.up_bias"), vec![1, c.ffn_dim]));
        specs.push((p("mlp.down"), vec![c.ffn_dim, c.d]));
        specs.push((p("mlp.down_bias"), vec![1, c.d]));
    }
    specs.push(("ln_f.gain".to_string(), vec![1, c.d]));
    specs.push(("ln_f.bias".to_string(), vec![1, c.d]));
    specs.push(("lm_head".to_string(), vec![c.vocab_size, c.d]));
    specs
}

fn layout_of(c: &ModelConfig, store: &ParamStore) -> Result<Layout> {
    let id = |name: String| {
        store
            .id_of(&name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    };
    let mut layers = Vec::with_capacity(c.n_layers);
    for i in 0..c.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        layers.push(LayerIds {
            ln1_gain: id(p("ln1.gain"))?,
            ln1_bias: id(p("ln1.bias"))?,
            w_qkv: id(p("attn.qkv"))?,
            w_out: id(p("attn.out"))?,
            ln2_gain: id(p("ln2.gain"))?,
            ln2_bias: id(p("ln2.bias"))?,
            w_up: id(p("mlp.up"))?,
            b_up: id(p("mlp.up_bias"))?,
            w_down: id(p("mlp.down"))?,
            b_down: id(p("mlp.down_bias"))?,
        });
    }
    Ok(Layout {
        tok_emb: id("tok_emb".into())?,
        layers,
        lnf_gain: id("ln_f.gain".into())?,
        lnf_bias: id("ln_f.bias".into())?,
        lm_head: id("lm_head".into())?,
    })
}

/// Latent retrieval query read from a `[PRED]` position.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentQuery {
    pub vector: Vec<f32>,
    pub turn: usize,
    pub n_pred: usize,
}

/// Document representation: final-token hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct DocEmbedding {
    pub doc_id: String,
    pub vector: Vec<f32>,
    pub model_fingerprint: u64,
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `T × d` final hidden states.
    pub hidden: Tensor,
    /// `T × vocab` next-token logits.
    pub logits: Tensor,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Generated ids, end-of-answer excluded.
    pub tokens: Vec<u32>,
    pub hit_end: bool,
    /// Generation stopped because the context window filled up.
    pub truncated: bool,
}

#[derive(Debug)]
pub struct MicroTransformer {
    config: ModelConfig,
    vocab: Vocab,
    params: ParamStore,
    layout: Layout,
    forward_calls: AtomicUsize,
}

impl Clone for MicroTransformer {
    fn clone(&self) -> Self {
        MicroTransformer {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            forward_calls: AtomicUsize::new(0),
        }
    }
}

impl MicroTransformer {
    /// Fresh seeded weights.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::DimensionMismatch {
                expected: vocab.len(),
                found: config.vocab_size,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02f32;
        let resid_std = std / (2.0 * config.n_layers as f32).sqrt();
        let mut store = ParamStore::new(MODEL_STORE);
        for (name, shape) in param_specs(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with("gain") {
                vec![1.0; n]
            } else if name.ends_with("bias") {
                vec![0.0; n]
            } else {
                let s = if name.ends_with("attn.out") || name.ends_with("mlp.down") {
                    resid_std
                } else {
                    std
                };
                let dist = Normal::new(0.0, s).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            store.add(name, Tensor::new(shape, data)?);
        }
        let layout = layout_of(&config, &store)?;
        init_pred_row(&mut store, layout.tok_emb, &config, &mut rng, std * 0.1);
        Ok(MicroTransformer {
            config,
            vocab,
            params: store,
            layout,
            forward_calls: AtomicUsize::new(0),
        })
    }

    /// Wraps existing parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, vocab: Vocab, params: ParamStore) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::DimensionMismatch {
                expected: vocab.len(),
                found: config.vocab_size,
            });
        }
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter blocks, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (name, shape) in &specs {
            let id = params
                .id_of(name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
            if params.get(id).value.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.get(id).value.shape()
                )));
            }
        }
        let layout = layout_of(&config, &params)?;
        Ok(MicroTransformer {
            config,
            vocab,
            params,
            layout,
            forward_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.config.d
    }

    pub fn embedding_id(&self) -> ParamId {
        self.layout.tok_emb
    }

    /// Number of full transformer passes run so far.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// 64-bit digest of every weight (names and raw bytes).
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for p in self.params.iter() {
            h.update((p.name.len() as u32).to_le_bytes());
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_context {
            return Err(Error::ContextOverflow {
                required: tokens.len(),
                available: self.config.max_context,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Records a full pass and returns the `T × d` final hidden states.
    pub fn hidden_on<F: Real>(&self, tape: &mut Tape<F>, tokens: &[u32]) -> Result<Var> {
        self.check_tokens(tokens)?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let p = &self.params;
        let mut x = tape.gather(p, self.layout.tok_emb, tokens);
        for l in &self.layout.layers {
            let g = tape.param(p, l.ln1_gain);
            let b = tape.param(p, l.ln1_bias);
            let h = tape.layer_norm(x, g, b);
            let w = tape.param(p, l.w_qkv);
            let qkv = tape.matmul(h, w);
            let att = tape.causal_attention(qkv, self.config.n_heads);
            let wo = tape.param(p, l.w_out);
            let o = tape.matmul(att, wo);
            x = tape.add(x, o);

            let g = tape.param(p, l.ln2_gain);
            let b = tape.param(p, l.ln2_bias);
            let h = tape.layer_norm(x, g, b);
            let w1 = tape.param(p, l.w_up);
            let b1 = tape.param(p, l.b_up);
            let u = tape.matmul(h, w1);
            let u = tape.add_row(u, b1);
            let u = tape.gelu(u);
            let w2 = tape.param(p, l.w_down);
            let b2 = tape.param(p, l.b_down);
            let dn = tape.matmul(u, w2);
            let dn = tape.add_row(dn, b2);
            x = tape.add(x, dn);
        }
        let g = tape.param(p, self.layout.lnf_gain);
        let b = tape.param(p, self.layout.lnf_bias);
        Ok(tape.layer_norm(x, g, b))
    }

    /// Next-token logits for selected hidden rows.
    pub fn logits_on<F: Real>(&self, tape: &mut Tape<F>, hidden: Var, rows: &[usize]) -> Var {
        let h = tape.select_rows(hidden, rows);
        let w = tape.param(&self.params, self.layout.lm_head);
        tape.matmul_nt(h, w)
    }

    /// Appends `n_pred` `[PRED]` tokens and returns the `1 × d` hidden state
    /// at the last one (or at the final context token when `n_pred == 0`).
    pub fn latent_query_on<F: Real>(&self, tape: &mut Tape<F>, context: &[u32], n_pred: usize) -> Result<Var> {
        if context.is_empty() {
            return Err(Error::invalid("latent query over an empty context"));
        }
        let mut tokens = Vec::with_capacity(context.len() + n_pred);
        tokens.extend_from_slice(context);
        tokens.extend(std::iter::repeat(self.config.pred_token_id).take(n_pred));
        let h = self.hidden_on(tape, &tokens)?;
        Ok(tape.select_rows(h, &[tokens.len() - 1]))
    }

    /// Document representation on a tape; overlong documents keep their
    /// first `max_context` tokens. Returns the `1 × d` node and whether the
    /// document was cut.
    pub fn encode_document_on<F: Real>(&self, tape: &mut Tape<F>, doc_tokens: &[u32]) -> Result<(Var, bool)> {
        if doc_tokens.is_empty() {
            return Err(Error::invalid("cannot encode an empty document"));
        }
        let truncated = doc_tokens.len() > self.config.max_context;
        let tokens = &doc_tokens[..doc_tokens.len().min(self.config.max_context)];
        let h = self.hidden_on(tape, tokens)?;
        Ok((tape.select_rows(h, &[tokens.len() - 1]), truncated))
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardOutput> {
        let mut tape = Tape::<f32>::new();
        let h = self.hidden_on(&mut tape, tokens)?;
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let logits = self.logits_on(&mut tape, h, &rows);
        let (t, d) = tape.shape(h);
        Ok(ForwardOutput {
            hidden: Tensor::new(vec![t, d], tape.value(h).to_vec())?,
            logits: Tensor::new(vec![t, self.config.vocab_size], tape.value(logits).to_vec())?,
        })
    }

    pub fn latent_query(&self, context: &[u32], n_pred: usize) -> Result<LatentQuery> {
        let mut tape = Tape::<f32>::new();
        let q = self.latent_query_on(&mut tape, context, n_pred)?;
        Ok(LatentQuery {
            vector: tape.value(q).to_vec(),
            turn: 1,
            n_pred,
        })
    }

    pub fn encode_document(&self, doc_id: &str, doc_tokens: &[u32]) -> Result<DocEmbedding> {
        self.encode_document_with(doc_id, doc_tokens, self.fingerprint())
    }

    /// [`Self::encode_document`] with a precomputed fingerprint.
    pub fn encode_document_with(&self, doc_id: &str, doc_tokens: &[u32], fingerprint: u64) -> Result<DocEmbedding> {
        let mut tape = Tape::<f32>::new();
        let (v, truncated) = self.encode_document_on(&mut tape, doc_tokens)?;
        if truncated {
            log::warn!(
                "document {doc_id} has {} tokens; encoding its first {}",
                doc_tokens.len(),
                self.config.max_context
            );
        }
        Ok(DocEmbedding {
            doc_id: doc_id.to_string(),
            vector: tape.value(v).to_vec(),
            model_fingerprint: fingerprint,
            truncated,
        })
    }

    fn last_logits(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let h = self.hidden_on(&mut tape, tokens)?;
        let l = self.logits_on(&mut tape, h, &[tokens.len() - 1]);
        Ok(tape.value(l).to_vec())
    }

    /// Distribution of the first answer token; the context must end with the
    /// answer prefix.
    pub fn answer_token_distribution(&self, context: &[u32]) -> Result<Vec<f32>> {
        if !context.ends_with(&self.config.answer_prefix_ids) {
            return Err(Error::invalid("context does not end with the answer prefix"));
        }
        numerics::softmax(&self.last_logits(context)?)
    }

    /// Greedy decoding until end-of-answer or `max_new_tokens`.
    pub fn generate(&self, context: &[u32], max_new_tokens: usize) -> Result<Generation> {
        if max_new_tokens == 0 {
            return Err(Error::invalid("max_new_tokens must be at least 1"));
        }
        self.check_tokens(context)?;
        let mut seq = context.to_vec();
        let mut out = Generation {
            tokens: Vec::new(),
            hit_end: false,
            truncated: false,
        };
        for _ in 0..max_new_tokens {
            let logits = self.last_logits(&seq)?;
            let next = argmax(&logits) as u32;
            if next == self.config.eoa_token_id {
                out.hit_end = true;
                break;
            }
            out.tokens.push(next);
            if seq.len() == self.config.max_context {
                out.truncated = true;
                break;
            }
            seq.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn init_pred_row(store: &mut ParamStore, emb: ParamId, c: &ModelConfig, rng: &mut ChaCha8Rng, noise: f32) {
    let d = c.d;
    let pred = c.pred_token_id as usize;
    let table = store.get(emb).value.data().to_vec();
    let mut mean = vec![0.0f64; d];
    let mut n = 0usize;
    for (r, row) in table.chunks_exact(d).enumerate() {
        if r != pred {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
            n += 1;
        }
    }
    let dist = Normal::new(0.0, noise).expect("positive std");
    let p = store.get_mut(emb);
    let row = &mut p.value.data_mut()[pred * d..(pred + 1) * d];
    for (dst, m) in row.iter_mut().zip(mean) {
        *dst = (m / n as f64) as f32 + dist.sample(rng);
    }
}
