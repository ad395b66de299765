//! Model + control-head checkpoint file.
//!
//! Layout (all integers little-endian `u32` unless noted):
//!
//! ```text
//! "LANR" | version
//! vocab_size d n_layers n_heads ffn_dim max_context pred_id eoa_id
//! n_prefix prefix_ids...
//! n_tokens (len bytes)...            vocabulary
//! n_blocks { name_len name ndim dims... f32 values... }
//! crc32 of everything above
//! ```

use std::path::Path;

use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::control::{ControlHead, HEAD_STORE};
use crate::error::Result;
use crate::model::{ModelConfig, MicroTransformer, MODEL_STORE};
use crate::numerics::{ParamStore, Tensor};
use crate::tokenizer::Vocab;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LANR";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &MicroTransformer, head: &ControlHead) -> Vec<u8> {
    let c = model.config();
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    for v in [c.vocab_size, c.d, c.n_layers, c.n_heads, c.ffn_dim, c.max_context] {
        w.u32(v as u32);
    }
    w.u32(c.pred_token_id);
    w.u32(c.eoa_token_id);
    w.u32(c.answer_prefix_ids.len() as u32);
    for &t in &c.answer_prefix_ids {
        w.u32(t);
    }
    let tokens = model.vocab().tokens();
    w.u32(tokens.len() as u32);
    for t in tokens {
        w.len_prefixed(t.as_bytes());
    }
    let blocks: Vec<_> = model.params().iter().chain(head.params().iter()).collect();
    w.u32(blocks.len() as u32);
    for p in blocks {
        w.len_prefixed(p.name.as_bytes());
        w.u32(p.value.shape().len() as u32);
        for &s in p.value.shape() {
            w.u32(s as u32);
        }
        w.f32s(p.value.data());
    }
    w.finish()
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &MicroTransformer, head: &ControlHead) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(model, head))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MicroTransformer, ControlHead)> {
    let path = path.as_ref();
    let data = read_file(path)?;
    decode_checkpoint(path, &data)
}

pub fn decode_checkpoint(path: &Path, data: &[u8]) -> Result<(MicroTransformer, ControlHead)> {
    let mut r = Reader::checked(path, data)?;
    if r.bytes(4)? != CHECKPOINT_MAGIC {
        return Err(r.corrupt("bad magic; not a checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.corrupt(format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let pred_token_id = r.u32()?;
    let eoa_token_id = r.u32()?;
    let n_prefix = r.u32()? as usize;
    let answer_prefix_ids = (0..n_prefix).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        vocab_size: dims[0],
        d: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        ffn_dim: dims[4],
        max_context: dims[5],
        pred_token_id,
        eoa_token_id,
        answer_prefix_ids,
    };
    let n_tokens = r.u32()? as usize;
    let tokens = (0..n_tokens).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocab::from_tokens(tokens).map_err(|e| r.corrupt(e.to_string()))?;

    let mut model_params = ParamStore::new(MODEL_STORE);
    let mut head_params = ParamStore::new(HEAD_STORE);
    let n_blocks = r.u32()? as usize;
    for _ in 0..n_blocks {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        if ndim == 0 || ndim > 4 {
            return Err(r.corrupt(format!("block {name} has {ndim} dimensions")));
        }
        let shape = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
        let n = n.ok_or_else(|| r.corrupt(format!("block {name} is too large")))?;
        let values = r.f32s(n)?;
        let tensor = Tensor::new(shape, values).map_err(|e| r.corrupt(format!("block {name}: {e}")))?;
        let store = if name.starts_with("head.") {
            &mut head_params
        } else {
            &mut model_params
        };
        if store.id_of(&name).is_some() {
            return Err(r.corrupt(format!("duplicate block {name}")));
        }
        store.add(name, tensor);
    }
    r.expect_end()?;
    let model = MicroTransformer::from_params(config, vocab, model_params).map_err(|e| r.corrupt(e.to_string()))?;
    let head = ControlHead::from_params(head_params).map_err(|e| r.corrupt(e.to_string()))?;
    if head.input_dim() != model.dim() {
        return Err(r.corrupt(format!(
            "control head expects {}-dim queries but the model has d = {}",
            head.input_dim(),
            model.dim()
        )));
    }
    Ok((model, head))
}
