//! Conditioning bundle, decoder loss and greedy recipe decoding.
//!
//! The decoder reads the conditioning features through cross-attention.
//! The memory is `[tree tokens.., image, ingredients]`, where the tree
//! contributes either its pooled vector or one token per node.

use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, PAD, SEP};
use crate::error::{Result, SgnError};
use crate::nn::transformer::TransformerDecoder;
use crate::nn::{ParamStore, Tape, Tensor, Var};

pub const MAX_RECIPE_TOKENS: usize = 150;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeMemory {
    #[default]
    Pooled,
    Nodes,
}

/// Memory rows fed to the decoder's cross-attention.
#[derive(Clone, Copy, Debug)]
pub struct ConditioningBundle {
    pub memory: Var,
    pub tree_tokens: usize,
}

impl ConditioningBundle {
    /// Stacks tree tokens, the image row and the ingredient row.
    pub fn assemble(tape: &mut Tape, tree: Var, image: Var, ingredients: Var) -> Result<Self> {
        let (tree_rows, w) = tape.shape(tree);
        let (ir, iw) = tape.shape(image);
        let (gr, gw) = tape.shape(ingredients);
        if tree_rows == 0 || ir != 1 || gr != 1 {
            return Err(SgnError::Shape(format!("bundle needs tree tokens and one image and ingredient row, got {tree_rows}, {ir}, {gr}")));
        }
        if iw != w || gw != w {
            return Err(SgnError::Shape(format!("bundle widths differ: tree {w}, image {iw}, ingredients {gw}")));
        }
        let memory = tape.concat_rows(&[tree, image, ingredients]);
        Ok(Self { memory, tree_tokens: tree_rows })
    }
}

/// Instruction sentences joined by the separator, closed by EOS.
pub fn target_sequence(sentences: &[Vec<usize>]) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        out.extend_from_slice(s);
    }
    out.push(EOS);
    out
}

/// Teacher-forcing input: BOS followed by the target minus its last token.
pub fn shifted_input(target: &[usize]) -> Vec<usize> {
    let mut input = Vec::with_capacity(target.len());
    input.push(BOS);
    input.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    input
}

/// Splits a token stream on separators, dropping PAD/BOS/EOS.
pub fn split_sentences(tokens: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &t in tokens {
        match t {
            SEP => out.push(Vec::new()),
            t if t == EOS || t == BOS || t == PAD => {}
            t => out.last_mut().unwrap().push(t),
        }
    }
    out.retain(|s| !s.is_empty());
    out
}

/// Word tokens of a stream, without separators or control tokens.
pub fn content_tokens(tokens: &[usize]) -> Vec<usize> {
    split_sentences(tokens).concat()
}

/// Per-position log-probabilities of `target` under teacher forcing
/// (`len x 1`).
pub fn token_log_probs(decoder: &TransformerDecoder, tape: &mut Tape, memory: Var, target: &[usize]) -> Result<Var> {
    if target.is_empty() {
        return Err(SgnError::Input("empty target sequence".into()));
    }
    if target.len() > decoder.config.max_len {
        return Err(SgnError::Shape(format!("target of {} tokens exceeds maximum {}", target.len(), decoder.config.max_len)));
    }
    let logits = decoder.forward(tape, &shifted_input(target), memory)?;
    let lp = tape.log_softmax_rows(logits);
    Ok(tape.pick(lp, target))
}

/// Summed negative log-likelihood of `target` and its token count.
pub fn generation_loss(decoder: &TransformerDecoder, tape: &mut Tape, memory: Var, target: &[usize]) -> Result<(Var, usize)> {
    let picked = token_log_probs(decoder, tape, memory, target)?;
    let s = tape.sum_all(picked);
    Ok((tape.scale(s, -1.0), target.len()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    /// Emitted tokens, excluding the closing EOS.
    pub tokens: Vec<usize>,
    pub sentences: Vec<Vec<usize>>,
    /// Log-probability of every emitted token, including EOS when reached.
    pub log_probs: Vec<f64>,
    pub finished: bool,
}

impl GenerationResult {
    /// Tokens scored by `log_probs`.
    pub fn scored_tokens(&self) -> Vec<usize> {
        let mut t = self.tokens.clone();
        if self.finished {
            t.push(EOS);
        }
        t
    }
}

fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[idx] - lse
}

/// Greedy decoding from a fixed memory; stops at EOS or `max_len` tokens.
pub fn generate_recipe(decoder: &TransformerDecoder, store: &ParamStore, memory: &Tensor, max_len: usize) -> Result<GenerationResult> {
    let max_len = max_len.min(decoder.config.max_len);
    let mut cache = decoder.start_cache(store, memory)?;
    let mut result = GenerationResult { tokens: Vec::new(), sentences: Vec::new(), log_probs: Vec::new(), finished: false };
    let mut prev = BOS;
    for _ in 0..max_len {
        let logits = decoder.step_cached(store, &mut cache, prev)?;
        let best = argmax(&logits);
        result.log_probs.push(log_softmax_at(&logits, best));
        if best == EOS {
            result.finished = true;
            break;
        }
        result.tokens.push(best);
        prev = best;
    }
    result.sentences = split_sentences(&result.tokens);
    Ok(result)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `lambda_gen * l_gen + lambda_tree * l_tree`.
pub fn joint_loss(l_gen: f64, l_tree: f64, lambda_gen: f64, lambda_tree: f64) -> Result<f64> {
    if !l_gen.is_finite() || !l_tree.is_finite() {
        return Err(SgnError::Training(format!("non-finite loss (generation {l_gen}, tree {l_tree})")));
    }
    Ok(lambda_gen * l_gen + lambda_tree * l_tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::transformer::DecoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn decoder(vocab: usize) -> (ParamStore, TransformerDecoder) {
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { vocab, width: 8, layers: 1, heads: 2, ffn: 16, max_len: 20 };
        let dec = TransformerDecoder::new(&mut store, "dec", cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        (store, dec)
    }

    #[test]
    fn sequences_and_sentences() {
        let t = target_sequence(&[vec![7, 8], vec![9]]);
        assert_eq!(t, [7, 8, SEP, 9, EOS]);
        assert_eq!(shifted_input(&t), [BOS, 7, 8, SEP, 9]);
        assert_eq!(split_sentences(&t), [vec![7, 8], vec![9]]);
        assert_eq!(content_tokens(&t), [7, 8, 9]);
    }

    #[test]
    fn joint_loss_arithmetic() {
        assert_eq!(joint_loss(2.0, 4.0, 1.0, 0.5).unwrap(), 4.0);
        assert_eq!(joint_loss(2.5, 9.0, 1.0, 0.0).unwrap(), 2.5);
        assert!(matches!(joint_loss(f64::NAN, 1.0, 1.0, 0.5), Err(SgnError::Training(_))));
    }

    #[test]
    fn eos_biased_decoder_emits_nothing() {
        let (mut store, dec) = decoder(12);
        store.value_mut(dec.head.bias.unwrap()).data[EOS] = 1e3;
        let r = generate_recipe(&dec, &store, &Tensor::filled(3, 8, 0.1), 150).unwrap();
        assert!(r.tokens.is_empty() && r.finished);
        assert_eq!(r.log_probs.len(), 1);
    }

    #[test]
    fn decoded_log_probs_match_teacher_forcing() {
        let (store, dec) = decoder(12);
        let mem = Tensor::from_vec(3, 8, (0..24).map(|i| (i as f64 * 0.37).sin()).collect());
        let r = generate_recipe(&dec, &store, &mem, 150).unwrap();
        assert!(r.tokens.len() <= 20);
        let scored = r.scored_tokens();
        let mut tape = Tape::new(&store);
        let m = tape.constant(mem);
        let (loss, count) = generation_loss(&dec, &mut tape, m, &scored).unwrap();
        assert_eq!(count, r.log_probs.len());
        assert!((tape.scalar(loss) + r.log_probs.iter().sum::<f64>()).abs() < 1e-6);
    }

    #[test]
    fn bundle_checks_widths() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let tree = tape.constant(Tensor::zeros(4, 6));
        let img = tape.constant(Tensor::zeros(1, 6));
        let bad = tape.constant(Tensor::zeros(1, 5));
        let b = ConditioningBundle::assemble(&mut tape, tree, img, img).unwrap();
        assert_eq!((b.tree_tokens, tape.shape(b.memory)), (4, (6, 6)));
        assert!(matches!(ConditioningBundle::assemble(&mut tape, tree, img, bad), Err(SgnError::Shape(_))));
    }
}
