//! Pre-norm transformer decoder with causal self-attention and
//! cross-attention over a memory of conditioning vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Embedding, LayerNorm, Linear};
use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Result, SgnError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(SgnError::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            heads,
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            output: Linear::new(store, &format!("{name}.output"), width, width, rng),
        }
    }

    /// Attends from `x` (`t x d`) over `context` (`s x d`). With `causal`,
    /// position `i` only sees context positions `<= i`. Returns the output
    /// and the per-head attention weights.
    pub fn forward(&self, tape: &mut Tape, x: Var, context: Var, causal: bool) -> (Var, Vec<Var>) {
        let (t, d) = tape.shape(x);
        let s = tape.shape(context).0;
        let dh = d / self.heads;
        let q = self.query.forward(tape, x);
        let k = self.key.forward(tape, context);
        let v = self.value.forward(tape, context);
        let mask: Option<Vec<bool>> = causal.then(|| (0..t * s).map(|idx| idx % s <= idx / s).collect());
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let raw = tape.matmul_nt(qh, kh);
            let scores = tape.scale(raw, 1.0 / (dh as f64).sqrt());
            let w = tape.softmax_rows(scores, mask.as_deref());
            weights.push(w);
            heads.push(tape.matmul(w, vh));
        }
        let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        (self.output.forward(tape, joined), weights)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &DecoderConfig, rng: &mut impl Rng) -> Self {
        Self {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), cfg.width),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), cfg.width, cfg.heads, rng),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), cfg.width),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), cfg.width, cfg.heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), cfg.width),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), cfg.width, cfg.ffn, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), cfg.ffn, cfg.width, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, memory: Var) -> Var {
        let n = self.norm_self.forward(tape, x);
        let (a, _) = self.self_attn.forward(tape, n, n, true);
        let x = tape.add(x, a);
        let n = self.norm_cross.forward(tape, x);
        let (c, _) = self.cross_attn.forward(tape, n, memory, false);
        let x = tape.add(x, c);
        let n = self.norm_ff.forward(tape, x);
        let h = self.ff_in.forward(tape, n);
        let h = tape.relu(h);
        let f = self.ff_out.forward(tape, h);
        tape.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    pub config: DecoderConfig,
    pub tokens: Embedding,
    pub positions: Embedding,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

impl TransformerDecoder {
    pub fn new(store: &mut ParamStore, name: &str, config: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let tokens = Embedding::new(store, &format!("{name}.tokens"), config.vocab, config.width, rng);
        let positions = Embedding::new(store, &format!("{name}.positions"), config.max_len, config.width, rng);
        let layers = (0..config.layers)
            .map(|l| DecoderLayer::new(store, &format!("{name}.layer{l}"), &config, rng))
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{name}.final_norm"), config.width);
        let head = Linear::new(store, &format!("{name}.head"), config.width, config.vocab, rng);
        Ok(Self { config, tokens, positions, layers, final_norm, head })
    }

    /// Vocabulary logits (`len x vocab`) for every input position.
    pub fn forward(&self, tape: &mut Tape, input: &[usize], memory: Var) -> Result<Var> {
        if input.is_empty() || input.len() > self.config.max_len {
            return Err(SgnError::Shape(format!(
                "decoder input length {} outside 1..={}",
                input.len(),
                self.config.max_len
            )));
        }
        let (mem_rows, mem_width) = tape.shape(memory);
        if mem_rows == 0 || mem_width != self.config.width {
            return Err(SgnError::Shape(format!(
                "memory must be non-empty with width {}, got {mem_rows}x{mem_width}",
                self.config.width
            )));
        }
        if let Some(&bad) = input.iter().find(|&&t| t >= self.config.vocab) {
            return Err(SgnError::Shape(format!("token id {bad} outside vocabulary of {}", self.config.vocab)));
        }
        let tok = self.tokens.forward(tape, input);
        let positions: Vec<usize> = (0..input.len()).collect();
        let pos = self.positions.forward(tape, &positions);
        let mut x = tape.add(tok, pos);
        for layer in &self.layers {
            x = layer.forward(tape, x, memory);
        }
        let x = self.final_norm.forward(tape, x);
        Ok(self.head.forward(tape, x))
    }
}

/// Key-value cache for one-token-at-a-time decoding outside the tape.
///
/// Produces the same logits as [`TransformerDecoder::forward`] on the full
/// prefix, up to float rounding.
pub struct DecoderCache {
    position: usize,
    layers: Vec<LayerCache>,
}

struct LayerCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    memory_keys: Vec<Vec<f64>>,
    memory_values: Vec<Vec<f64>>,
}

fn linear_row(store: &ParamStore, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.value(lin.weight);
    let mut out = match lin.bias {
        Some(b) => store.value(b).data.clone(),
        None => vec![0.0; lin.output],
    };
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            for (o, wv) in out.iter_mut().zip(w.row(i)) {
                *o += xi * wv;
            }
        }
    }
    out
}

fn layer_norm_row(store: &ParamStore, norm: &LayerNorm, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    let (g, b) = (store.value(norm.gain), store.value(norm.bias));
    x.iter().enumerate().map(|(j, v)| (v - mean) * inv * g.data[j] + b.data[j]).collect()
}

fn attend_row(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], heads: usize) -> Vec<f64> {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let scores: Vec<f64> = keys.iter().map(|k| q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (e, v) in exps.iter().zip(values) {
            let w = e / total;
            for (o, vv) in out[r.clone()].iter_mut().zip(&v[r.clone()]) {
                *o += w * vv;
            }
        }
    }
    out
}

impl TransformerDecoder {
    pub fn start_cache(&self, store: &ParamStore, memory: &Tensor) -> Result<DecoderCache> {
        if memory.rows == 0 || memory.cols != self.config.width {
            return Err(SgnError::Shape(format!(
                "memory must be non-empty with width {}, got {}x{}",
                self.config.width, memory.rows, memory.cols
            )));
        }
        let layers = self
            .layers
            .iter()
            .map(|l| LayerCache {
                keys: Vec::new(),
                values: Vec::new(),
                memory_keys: (0..memory.rows).map(|i| linear_row(store, &l.cross_attn.key, memory.row(i))).collect(),
                memory_values: (0..memory.rows).map(|i| linear_row(store, &l.cross_attn.value, memory.row(i))).collect(),
            })
            .collect();
        Ok(DecoderCache { position: 0, layers })
    }

    /// Feeds one token and returns the logits for the next position.
    pub fn step_cached(&self, store: &ParamStore, cache: &mut DecoderCache, token: usize) -> Result<Vec<f64>> {
        if cache.position >= self.config.max_len {
            return Err(SgnError::Shape(format!("decoder input length exceeds {}", self.config.max_len)));
        }
        if token >= self.config.vocab {
            return Err(SgnError::Shape(format!("token id {token} outside vocabulary of {}", self.config.vocab)));
        }
        let tok = store.value(self.tokens.table).row(token);
        let pos = store.value(self.positions.table).row(cache.position);
        let mut x: Vec<f64> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();
        for (layer, lc) in self.layers.iter().zip(&mut cache.layers) {
            let n = layer_norm_row(store, &layer.norm_self, &x);
            let q = linear_row(store, &layer.self_attn.query, &n);
            lc.keys.push(linear_row(store, &layer.self_attn.key, &n));
            lc.values.push(linear_row(store, &layer.self_attn.value, &n));
            let a = attend_row(&q, &lc.keys, &lc.values, layer.self_attn.heads);
            let a = linear_row(store, &layer.self_attn.output, &a);
            x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);
            let n = layer_norm_row(store, &layer.norm_cross, &x);
            let q = linear_row(store, &layer.cross_attn.query, &n);
            let c = attend_row(&q, &lc.memory_keys, &lc.memory_values, layer.cross_attn.heads);
            let c = linear_row(store, &layer.cross_attn.output, &c);
            x.iter_mut().zip(&c).for_each(|(x, c)| *x += c);
            let n = layer_norm_row(store, &layer.norm_ff, &x);
            let h: Vec<f64> = linear_row(store, &layer.ff_in, &n).into_iter().map(|v| v.max(0.0)).collect();
            let f = linear_row(store, &layer.ff_out, &h);
            x.iter_mut().zip(&f).for_each(|(x, f)| *x += f);
        }
        cache.position += 1;
        let n = layer_norm_row(store, &self.final_norm, &x);
        Ok(linear_row(store, &self.head, &n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(width: usize, layers: usize) -> (ParamStore, TransformerDecoder, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { vocab: 12, width, layers, heads: 2, ffn: 2 * width, max_len: 10 };
        let dec = TransformerDecoder::new(&mut store, "dec", cfg, &mut rng).unwrap();
        let mem = Tensor::from_vec(3, width, (0..3 * width).map(|_| rng.gen_range(-1.0..1.0)).collect());
        (store, dec, mem)
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let (store, dec, mem) = small(8, 2);
        let run = |tokens: &[usize]| {
            let mut tape = Tape::new(&store);
            let m = tape.constant(mem.clone());
            let l = dec.forward(&mut tape, tokens, m).unwrap();
            tape.value(l).clone()
        };
        let a = run(&[1, 2, 3, 4, 5]);
        let b = run(&[1, 2, 3, 9, 0]);
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, dec, mem) = small(8, 1);
        let mut tape = Tape::new(&store);
        let m = tape.constant(mem);
        let x = dec.tokens.forward(&mut tape, &[1, 2, 3, 4]);
        let (_, self_w) = dec.layers[0].self_attn.forward(&mut tape, x, x, true);
        let (_, cross_w) = dec.layers[0].cross_attn.forward(&mut tape, x, m, false);
        for w in self_w.into_iter().chain(cross_w) {
            let t = tape.value(w);
            for r in 0..t.rows {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_sublayers_reduce_to_projected_embeddings() {
        let (mut store, dec, mem) = small(8, 1);
        let layer = &dec.layers[0];
        for lin in [layer.self_attn.output, layer.cross_attn.output, layer.ff_out] {
            store.value_mut(lin.weight).data.iter_mut().for_each(|v| *v = 0.0);
            store.value_mut(lin.bias.unwrap()).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let tokens = [3, 1, 4];
        let mut tape = Tape::new(&store);
        let m = tape.constant(mem);
        let logits = dec.forward(&mut tape, &tokens, m).unwrap();
        let got = tape.value(logits).clone();

        let mut tape = Tape::new(&store);
        let tok = dec.tokens.forward(&mut tape, &tokens);
        let pos = dec.positions.forward(&mut tape, &[0, 1, 2]);
        let x = tape.add(tok, pos);
        let n = dec.final_norm.forward(&mut tape, x);
        let expected = dec.head.forward(&mut tape, n);
        assert_eq!(&got, tape.value(expected));
    }

    #[test]
    fn overlong_input_is_a_shape_error() {
        let (store, dec, mem) = small(8, 1);
        let mut tape = Tape::new(&store);
        let m = tape.constant(mem);
        assert!(matches!(dec.forward(&mut tape, &[1; 11], m), Err(SgnError::Shape(_))));
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let (mut store, dec, mem) = small(16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = check_gradients(
            &mut store,
            |tape| {
                let m = tape.constant(mem.clone());
                let logits = dec.forward(tape, &[1, 5, 7, 2], m).unwrap();
                let lp = tape.log_softmax_rows(logits);
                let picked = tape.pick(lp, &[5, 7, 2, 0]);
                let s = tape.sum_all(picked);
                tape.scale(s, -1.0)
            },
            1e-5,
            12,
            &mut rng,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn cached_steps_match_full_forward() {
        let (store, dec, mem) = small(8, 2);
        let tokens = [1, 5, 7, 2, 9, 3];
        let mut tape = Tape::new(&store);
        let m = tape.constant(mem.clone());
        let logits = dec.forward(&mut tape, &tokens, m).unwrap();
        let full = tape.value(logits).clone();
        let mut cache = dec.start_cache(&store, &mem).unwrap();
        for (t, &tok) in tokens.iter().enumerate() {
            let row = dec.step_cached(&store, &mut cache, tok).unwrap();
            for (a, b) in row.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
