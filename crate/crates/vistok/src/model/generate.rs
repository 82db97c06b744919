use std::sync::Arc;

use super::forward::{embed_sequence_into, forward_batch};
use super::{ModelConfig, ModelParams, Scalar};
use crate::assemble::TokenStream;
use crate::error::{Error, Result};
use crate::render::PageImage;
use crate::textok::{Vocab, EOS};

/// Greedy decoding from a prompt stream; deterministic, stops at eos or
/// `max_new` tokens. Ties resolve to the lowest token id.
pub fn generate<T: Scalar>(
    prompt: &TokenStream,
    images: &[Arc<PageImage>],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    vocab: &Vocab,
    max_new: usize,
) -> Result<String> {
    if prompt.len() + max_new > cfg.context_len {
        return Err(Error::ContextOverflow { got: prompt.len() + max_new, limit: cfg.context_len });
    }
    let mut stream = prompt.clone();
    let mut generated = Vec::new();
    for _ in 0..max_new {
        let seq = stream.len();
        let mut emb = ndarray::Array2::<T>::zeros((seq, cfg.d_model));
        let cache = embed_sequence_into(&stream, images, cfg, params, &mut emb, 0)?;
        let (logits, _) = forward_batch(emb, vec![cache], 1, seq, cfg, params)?;
        let last = logits.row(seq - 1);
        // the model vocab may be padded past the tokenizer's; never emit an
        // id the tokenizer cannot decode
        let limit = vocab.size().min(last.len());
        let mut best = 0usize;
        let mut best_v = T::neg_infinity();
        for (j, &v) in last.iter().enumerate().take(limit) {
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        if best as u32 == EOS {
            break;
        }
        generated.push(best as u32);
        stream.ids.push(best as u32);
        stream.supervision_mask.push(false);
    }
    vocab.decode(&generated)
}
