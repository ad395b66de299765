#![allow(dead_code)]

use latent_rag::control::ControlHead;
use latent_rag::datakit::{generate_synthetic, SyntheticConfig, SyntheticData};
use latent_rag::model::{MicroTransformer, ModelConfig};
use latent_rag::tokenizer::Vocab;

pub fn world(n_entities: usize, n_train: usize, n_eval: usize, seed: u64) -> SyntheticData {
    generate_synthetic(&SyntheticConfig {
        n_entities,
        n_relations: 4,
        n_train,
        n_eval,
        hop_mix: [0.5, 0.5],
        seed,
    })
    .expect("fixture world")
}

pub fn vocab_for(data: &SyntheticData) -> Vocab {
    Vocab::build(
        data.corpus
            .iter()
            .map(|d| d.text.as_str())
            .chain(data.train.iter().chain(&data.eval).flat_map(|e| [e.question.as_str(), e.answer.as_str()])),
    )
}

pub fn small_config(vocab: &Vocab, d: usize, layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        d,
        n_layers: layers,
        n_heads: heads,
        ffn_dim: 4 * d,
        max_context: 192,
        ..ModelConfig::micro(vocab)
    }
}

pub fn small_model(data: &SyntheticData, d: usize, layers: usize, seed: u64) -> (MicroTransformer, ControlHead) {
    let vocab = vocab_for(data);
    let cfg = small_config(&vocab, d, layers, 2);
    let model = MicroTransformer::new(cfg, vocab, seed).expect("model");
    let head = ControlHead::new(d, d, seed + 1);
    (model, head)
}
