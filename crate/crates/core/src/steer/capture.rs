use super::{InterventionPlan, ToyTransformer};
use crate::actio::{ActivationRecord, ActivationSet};
use crate::corpus::{render_prompt, ContrastivePair, Polarity, PromptTemplate, TraitId};
use crate::Result;

/// UTF-8 bytes folded into the vocabulary, keeping the last `max_seq`.
/// Not a tokenizer; just a deterministic way to feed text to the toy model.
pub fn byte_tokens(text: &str, vocab: usize, max_seq: usize) -> Vec<u32> {
    let mut toks: Vec<u32> = text.bytes().map(|b| b as u32 % vocab as u32).collect();
    if toks.is_empty() {
        toks.push(0);
    }
    let start = toks.len().saturating_sub(max_seq);
    toks.split_off(start)
}

/// Last-token residual snapshot at every layer for both sides of each pair.
pub fn capture_activations(
    model: &ToyTransformer,
    trait_id: &TraitId,
    pairs: &[ContrastivePair],
    template: &PromptTemplate,
    source: &str,
) -> Result<ActivationSet> {
    let c = model.config();
    let plan = InterventionPlan::empty();
    let mut records = Vec::with_capacity(pairs.len() * 2 * c.n_layers);
    for pair in pairs {
        for pol in [Polarity::Positive, Polarity::Negative] {
            let tokens = byte_tokens(&render_prompt(pair, pol, template), c.vocab, c.max_seq);
            let out = model.forward(&tokens, &plan, tokens.len())?;
            for layer in 0..c.n_layers {
                records.push(ActivationRecord {
                    pair_id: pair.pair_id,
                    polarity: pol,
                    layer: layer as u16,
                    vector: out.last_snapshot(layer).to_vec(),
                });
            }
        }
    }
    ActivationSet::new(
        trait_id.clone(),
        c.d,
        c.n_layers,
        records,
        format!("{source}; policy=last_token"),
    )
}
