//! Greedy report generation.

use crate::autograd::Graph;
use crate::error::Result;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::{Vocabulary, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    pub text: String,
    /// Generated ids, excluding BOS and the terminating EOS.
    pub ids: Vec<usize>,
    /// True when decoding stopped at `max_len` instead of EOS.
    pub truncated: bool,
}

/// Top-1 decoding from BOS until EOS or `max_len` tokens. Argmax ties go
/// to the lowest id; the CLS id is never emitted.
pub fn generate_report(
    model: &Model,
    store: &ParamStore<f32>,
    vocab: &Vocabulary,
    tiles: &Tensor<f32>,
    max_len: usize,
) -> Result<Generation> {
    let g = Graph::inference();
    let t = g.constant(tiles.clone());
    let enc = model.encode(&g, store, &t)?;
    let cls = model.decoder.cls_id();
    // Input plus CLS must fit the position table.
    let limit = max_len.min(model.decoder.cfg.max_len.saturating_sub(2));
    let mut input = vec![BOS];
    let mut out = Vec::new();
    let mut finished = false;
    while out.len() < limit {
        let g = Graph::inference();
        let (hidden, _) = model.decoder.unimodal_forward(&g, store, &input)?;
        let ctx = g.constant(enc.context_latents.to_tensor());
        let logits = model.decoder.multimodal_forward(&g, store, &hidden, &ctx)?;
        let last = logits.value().row(logits.rows() - 1);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if i != cls && (best == cls || v > last[best]) {
                best = i;
            }
        }
        if best == EOS {
            finished = true;
            break;
        }
        out.push(best);
        input.push(best);
    }
    Ok(Generation {
        text: vocab.detokenize(&out),
        ids: out,
        truncated: !finished,
    })
}
