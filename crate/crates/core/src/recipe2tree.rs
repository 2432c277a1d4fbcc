//! Sentence-level tree induction.
//!
//! A word-level ordered-neurons stack turns every sentence into a vector; a
//! sentence-level stack reads those vectors in order. Training is
//! discriminative: given consecutive context sentences, pick the true next
//! sentence among `K + 1` candidates by inner product between the context
//! state and each candidate's vector. Parsing reads the sentence-level
//! master forget gates as boundary distances and splits greedily top-down.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgnError};
use crate::nn::layers::Embedding;
use crate::nn::onlstm::{syntactic_distance, OnLstmStack, StackRun};
use crate::nn::{Adam, ParamStore, Tape, Var};
use crate::train::{decayed_lr, epoch_order, stream_rng};
use crate::treekit::{Bracket, SentenceTree};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParserConfig {
    pub embed: usize,
    /// Hidden width of both stacks; candidates and contexts meet in this
    /// space.
    pub hidden: usize,
    pub word_layers: usize,
    pub sentence_layers: usize,
    pub chunk: usize,
    /// Distractors per example (`K`).
    pub distractors: usize,
    /// Always start the context at the first sentence instead of a random
    /// one.
    pub fixed_context: bool,
    /// Sentence-level layer whose gates give distances; `None` = top.
    pub distance_layer: Option<usize>,
}

impl Default for ParserConfig {
    fn default() -> Self {
        Self {
            embed: 64,
            hidden: 64,
            word_layers: 3,
            sentence_layers: 1,
            chunk: 4,
            distractors: 3,
            fixed_context: false,
            distance_layer: None,
        }
    }
}

impl ParserConfig {
    pub fn full() -> Self {
        Self { embed: 400, hidden: 400, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct HierarchicalEncoder {
    pub config: ParserConfig,
    pub embedding: Embedding,
    pub word: OnLstmStack,
    pub sentence: OnLstmStack,
}

/// Master-forget activations of the distance layer, one vector per
/// sentence step.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTrace {
    pub master_forget: Vec<Vec<f64>>,
}

impl GateTrace {
    /// Distance of the boundary before each sentence after the first.
    pub fn boundary_distances(&self) -> Vec<f64> {
        syntactic_distance(&self.master_forget[1.min(self.master_forget.len())..])
    }
}

/// One next-sentence decision over explicit token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct QtBatch {
    pub context: Vec<Vec<usize>>,
    pub candidates: Vec<Vec<usize>>,
    pub target: usize,
}

impl HierarchicalEncoder {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, config: ParserConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.word_layers == 0 || config.sentence_layers == 0 {
            return Err(SgnError::Config("both stacks need at least one layer".into()));
        }
        if let Some(l) = config.distance_layer {
            if l >= config.sentence_layers {
                return Err(SgnError::Config(format!("distance layer {l} out of {} layers", config.sentence_layers)));
            }
        }
        let embedding = Embedding::new(store, &format!("{name}.embedding"), vocab, config.embed, rng);
        let word = OnLstmStack::new(store, &format!("{name}.word"), config.embed, config.hidden, config.word_layers, config.chunk, rng)?;
        let sentence =
            OnLstmStack::new(store, &format!("{name}.sentence"), config.hidden, config.hidden, config.sentence_layers, config.chunk, rng)?;
        Ok(Self { config, embedding, word, sentence })
    }

    fn distance_layer(&self) -> usize {
        self.config.distance_layer.unwrap_or(self.config.sentence_layers - 1)
    }

    /// Sentence vectors (`sentences x hidden`): the top word-level state at
    /// each sentence's last token.
    pub fn embed_sentences(&self, tape: &mut Tape, sentences: &[&[usize]]) -> Result<Var> {
        if sentences.is_empty() || sentences.iter().any(|s| s.is_empty()) {
            return Err(SgnError::Input("sentences must be non-empty".into()));
        }
        if let Some(&bad) = sentences.iter().flat_map(|s| s.iter()).find(|&&t| t >= self.embedding.count) {
            return Err(SgnError::Input(format!("token id {bad} outside vocabulary")));
        }
        let lengths: Vec<usize> = sentences.iter().map(|s| s.len()).collect();
        let longest = *lengths.iter().max().unwrap();
        let steps: Vec<Var> = (0..longest)
            .map(|t| {
                let ids: Vec<usize> = sentences.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
                self.embedding.forward(tape, &ids)
            })
            .collect();
        Ok(self.word.run(tape, &steps, &lengths)?.final_h)
    }

    /// Runs the sentence-level stack over rows of `sentence_vectors`; each
    /// sequence lists row indices in reading order.
    pub fn run_sentences(&self, tape: &mut Tape, sentence_vectors: Var, sequences: &[Vec<usize>]) -> Result<StackRun> {
        if sequences.is_empty() || sequences.iter().any(|s| s.is_empty()) {
            return Err(SgnError::Input("empty sentence sequence".into()));
        }
        let lengths: Vec<usize> = sequences.iter().map(Vec::len).collect();
        let longest = *lengths.iter().max().unwrap();
        let steps: Vec<Var> = (0..longest)
            .map(|t| {
                let rows: Vec<usize> = sequences.iter().map(|s| s.get(t).copied().unwrap_or(s[0])).collect();
                tape.gather_rows(sentence_vectors, &rows)
            })
            .collect();
        self.sentence.run(tape, &steps, &lengths)
    }

    /// Candidate scores (`1 x candidates`) for one explicit batch.
    pub fn qt_scores(&self, tape: &mut Tape, batch: &QtBatch) -> Result<Var> {
        if batch.context.is_empty() || batch.candidates.is_empty() {
            return Err(SgnError::Input("empty context or candidate set".into()));
        }
        if batch.target >= batch.candidates.len() {
            return Err(SgnError::Input("target index outside candidate set".into()));
        }
        let all: Vec<&[usize]> = batch.context.iter().chain(&batch.candidates).map(Vec::as_slice).collect();
        let vectors = self.embed_sentences(tape, &all)?;
        let run = self.run_sentences(tape, vectors, &[(0..batch.context.len()).collect()])?;
        let cands = tape.slice_rows(vectors, batch.context.len(), batch.candidates.len());
        Ok(tape.matmul_nt(run.final_h, cands))
    }

    /// Gate traces for several recipes at once (each a list of token
    /// sequences).
    pub fn gate_traces(&self, tape: &mut Tape, recipes: &[&[Vec<usize>]]) -> Result<Vec<GateTrace>> {
        let flat: Vec<&[usize]> = recipes.iter().flat_map(|r| r.iter().map(Vec::as_slice)).collect();
        let vectors = self.embed_sentences(tape, &flat)?;
        let mut sequences = Vec::with_capacity(recipes.len());
        let mut offset = 0;
        for r in recipes {
            sequences.push((offset..offset + r.len()).collect());
            offset += r.len();
        }
        let run = self.run_sentences(tape, vectors, &sequences)?;
        let layer = &run.master_forget[self.distance_layer()];
        Ok(recipes
            .iter()
            .enumerate()
            .map(|(i, r)| GateTrace { master_forget: (0..r.len()).map(|t| tape.value(layer[t]).row(i).to_vec()).collect() })
            .collect())
    }
}

/// Softmax over inner-product candidate scores.
pub fn qt_probability(encoder: &HierarchicalEncoder, store: &ParamStore, batch: &QtBatch) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let scores = encoder.qt_scores(&mut tape, batch)?;
    let p = tape.softmax_rows(scores, None);
    Ok(tape.value(p).data.clone())
}

/// Negative mean log-probability of the true candidates.
pub fn qt_loss(encoder: &HierarchicalEncoder, tape: &mut Tape, batches: &[QtBatch]) -> Result<Var> {
    if batches.is_empty() {
        return Err(SgnError::Input("no batches".into()));
    }
    let mut terms = Vec::with_capacity(batches.len());
    for b in batches {
        let scores = encoder.qt_scores(tape, b)?;
        let lp = tape.log_softmax_rows(scores);
        terms.push(tape.pick(lp, &[b.target]));
    }
    let all = tape.concat_rows(&terms);
    let total = tape.sum_all(all);
    Ok(tape.scale(total, -1.0 / batches.len() as f64))
}

/// Splits the sentence range at its largest boundary distance (leftmost
/// on ties) and recurses. `distances[i]` separates sentences `i` and
/// `i + 1`.
pub fn greedy_split(distances: &[f64]) -> SentenceTree {
    fn build(d: &[f64], lo: usize, hi: usize) -> Bracket {
        if lo == hi {
            return Bracket::Leaf(lo);
        }
        let mut best = lo;
        for i in lo + 1..hi {
            if d[i] > d[best] {
                best = i;
            }
        }
        Bracket::Node(vec![build(d, lo, best), build(d, best + 1, hi)])
    }
    let b = build(distances, 0, distances.len());
    SentenceTree::from_bracket(&b).expect("greedy splits form a tree")
}

/// Uniformly random split points, applied recursively.
pub fn random_binary_tree(leaves: usize, rng: &mut impl Rng) -> SentenceTree {
    fn build(lo: usize, hi: usize, rng: &mut impl Rng) -> Bracket {
        if lo == hi {
            return Bracket::Leaf(lo);
        }
        let cut = rng.gen_range(lo..hi);
        Bracket::Node(vec![build(lo, cut, rng), build(cut + 1, hi, rng)])
    }
    SentenceTree::from_bracket(&build(0, leaves.max(1) - 1, rng)).expect("random splits form a tree")
}

/// Mean unlabeled F1 of `trials` random binary trees against `reference`.
pub fn random_baseline_f1(reference: &SentenceTree, trials: usize, rng: &mut impl Rng) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..trials {
        total += crate::treekit::unlabeled_f1(&random_binary_tree(reference.leaf_count(), rng), reference)?;
    }
    Ok(total / trials.max(1) as f64)
}

/// Optimizer settings for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParserTraining {
    pub epochs: usize,
    /// Recipes per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
}

impl Default for ParserTraining {
    fn default() -> Self {
        Self { epochs: 3, batch: 16, lr: 0.001, lr_decay: 0.99 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QtStats {
    pub loss: f64,
    pub accuracy: f64,
    pub examples: usize,
}

/// Encoder plus parameters and optimizer state.
#[derive(Clone, Debug)]
pub struct ParserModel {
    pub store: ParamStore,
    pub encoder: HierarchicalEncoder,
    pub adam: Adam,
    pub epochs_done: usize,
}

struct Example {
    /// Row of the flattened sentence-level outputs holding the context
    /// state.
    state_row: usize,
    /// Global sentence rows; candidates[target] is the true next sentence.
    candidates: Vec<usize>,
    target: usize,
}

impl ParserModel {
    pub fn new(vocab: usize, config: ParserConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, 1);
        let encoder = HierarchicalEncoder::new(&mut store, "parser", vocab, config, &mut rng)?;
        Ok(Self { store, encoder, adam: Adam::new(0.0), epochs_done: 0 })
    }

    /// Loss and accuracy over recipes (each a list of token sequences),
    /// building every `(context, next)` example from a random or fixed
    /// context start. Returns the summed loss variable and the stats.
    fn batch_objective(&self, tape: &mut Tape, recipes: &[&[Vec<usize>]], rng: &mut impl Rng) -> Result<(Var, QtStats)> {
        let k = self.encoder.config.distractors;
        let flat: Vec<&[usize]> = recipes.iter().flat_map(|r| r.iter().map(Vec::as_slice)).collect();
        let total_sentences = flat.len();
        let mut offsets = Vec::with_capacity(recipes.len());
        let mut sequences = Vec::new();
        let mut owners = Vec::new();
        let mut offset = 0;
        for (r, rec) in recipes.iter().enumerate() {
            offsets.push(offset);
            if rec.len() >= 2 {
                let start = if self.encoder.config.fixed_context { 0 } else { rng.gen_range(0..rec.len() - 1) };
                sequences.push((offset + start..offset + rec.len() - 1).collect::<Vec<_>>());
                owners.push((r, start));
            }
            offset += rec.len();
        }
        if sequences.is_empty() {
            return Err(SgnError::Input("no recipe has two or more sentences".into()));
        }
        if total_sentences < k + 1 {
            return Err(SgnError::Input(format!("{total_sentences} sentences cannot supply {k} distractors")));
        }
        let vectors = self.encoder.embed_sentences(tape, &flat)?;
        let run = self.encoder.run_sentences(tape, vectors, &sequences)?;
        let rows = sequences.len();

        let mut examples = Vec::new();
        for (row, &(r, start)) in owners.iter().enumerate() {
            let n = recipes[r].len();
            let base = offsets[r];
            for t in start..n - 1 {
                let truth = base + t + 1;
                let local: Vec<usize> = (0..n).map(|i| base + i).filter(|&g| g != truth).collect();
                let mut distract: Vec<usize> = if local.len() >= k {
                    sample(rng, local.len(), k).into_iter().map(|i| local[i]).collect()
                } else {
                    let mut d = local.clone();
                    let others: Vec<usize> = (0..total_sentences).filter(|g| *g != truth && !local.contains(g)).collect();
                    d.extend(sample(rng, others.len(), k - local.len()).into_iter().map(|i| others[i]));
                    d
                };
                let target = rng.gen_range(0..=k);
                distract.insert(target, truth);
                examples.push(Example { state_row: (t - start) * rows + row, candidates: distract, target });
            }
        }

        let states = tape.concat_rows(&run.outputs);
        let state_rows: Vec<usize> = examples.iter().map(|e| e.state_row).collect();
        let f = tape.gather_rows(states, &state_rows);
        let all_scores = tape.matmul_nt(f, vectors);
        let columns: Vec<Var> = (0..=k)
            .map(|c| {
                let cols: Vec<usize> = examples.iter().map(|e| e.candidates[c]).collect();
                tape.pick(all_scores, &cols)
            })
            .collect();
        let scores = tape.concat_cols(&columns);
        let lp = tape.log_softmax_rows(scores);
        let targets: Vec<usize> = examples.iter().map(|e| e.target).collect();
        let picked = tape.pick(lp, &targets);
        let sum = tape.sum_all(picked);
        let loss = tape.scale(sum, -1.0);

        let sv = tape.value(scores);
        let correct = examples
            .iter()
            .enumerate()
            .filter(|(i, e)| {
                let row = sv.row(*i);
                row.iter().enumerate().all(|(c, &v)| c == e.target || v < row[e.target])
            })
            .count();
        let stats = QtStats { loss: tape.scalar(loss), accuracy: correct as f64, examples: examples.len() };
        Ok((loss, stats))
    }

    /// One pass over `data` in the epoch's deterministic order.
    pub fn train_epoch(&mut self, data: &[Vec<Vec<usize>>], opts: &ParserTraining, seed: u64) -> Result<QtStats> {
        let epoch = self.epochs_done;
        self.adam.lr = decayed_lr(opts.lr, opts.lr_decay, epoch);
        let order = epoch_order(data.len(), seed, epoch);
        let mut rng = stream_rng(seed, 2_000_000 + epoch as u64);
        let mut acc = QtStats { loss: 0.0, accuracy: 0.0, examples: 0 };
        for chunk in order.chunks(opts.batch.max(1)) {
            let recipes: Vec<&[Vec<usize>]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
            let (grads, stats) = {
                let mut tape = Tape::new(&self.store);
                let (loss, stats) = self.batch_objective(&mut tape, &recipes, &mut rng)?;
                let mean = tape.scale(loss, 1.0 / stats.examples as f64);
                (tape.backward(mean), stats)
            };
            if !stats.loss.is_finite() || !grads.is_finite() {
                return Err(SgnError::Training(format!("parser loss became non-finite in epoch {epoch}")));
            }
            self.adam.step(&mut self.store, &grads);
            acc.loss += stats.loss;
            acc.accuracy += stats.accuracy;
            acc.examples += stats.examples;
        }
        self.epochs_done += 1;
        Ok(finish(acc))
    }

    /// Mean loss and accuracy without updating parameters.
    pub fn evaluate(&self, data: &[Vec<Vec<usize>>], batch: usize, seed: u64) -> Result<QtStats> {
        let mut rng = stream_rng(seed, 3);
        let mut acc = QtStats { loss: 0.0, accuracy: 0.0, examples: 0 };
        for chunk in data.chunks(batch.max(1)) {
            let recipes: Vec<&[Vec<usize>]> = chunk.iter().map(Vec::as_slice).collect();
            let mut tape = Tape::new(&self.store);
            let (_, stats) = self.batch_objective(&mut tape, &recipes, &mut rng)?;
            acc.loss += stats.loss;
            acc.accuracy += stats.accuracy;
            acc.examples += stats.examples;
        }
        Ok(finish(acc))
    }

    pub fn gate_trace(&self, sentences: &[Vec<usize>]) -> Result<GateTrace> {
        let mut tape = Tape::new(&self.store);
        Ok(self.encoder.gate_traces(&mut tape, &[sentences])?.remove(0))
    }

    pub fn parse_recipe(&self, sentences: &[Vec<usize>]) -> Result<SentenceTree> {
        if sentences.is_empty() {
            return Err(SgnError::Input("cannot parse an empty recipe".into()));
        }
        Ok(greedy_split(&self.gate_trace(sentences)?.boundary_distances()))
    }

    /// Parses every recipe, `batch` recipes per forward pass.
    pub fn annotate(&self, data: &[Vec<Vec<usize>>], batch: usize) -> Result<Vec<SentenceTree>> {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(batch.max(1)) {
            let recipes: Vec<&[Vec<usize>]> = chunk.iter().map(Vec::as_slice).collect();
            let mut tape = Tape::new(&self.store);
            for trace in self.encoder.gate_traces(&mut tape, &recipes)? {
                out.push(greedy_split(&trace.boundary_distances()));
            }
        }
        Ok(out)
    }
}

fn finish(acc: QtStats) -> QtStats {
    let n = acc.examples.max(1) as f64;
    QtStats { loss: acc.loss / n, accuracy: acc.accuracy / n, examples: acc.examples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ParserModel {
        let cfg = ParserConfig { embed: 8, hidden: 8, word_layers: 2, chunk: 2, ..Default::default() };
        ParserModel::new(20, cfg, 5).unwrap()
    }

    #[test]
    fn greedy_split_examples() {
        assert_eq!(greedy_split(&[0.9, 0.2, 0.5]).to_string(), "(s0 ((s1 s2) s3))");
        assert_eq!(greedy_split(&[1.0, 1.0, 1.0]).to_string(), "(s0 (s1 (s2 s3)))");
        assert_eq!(greedy_split(&[0.1, 0.2, 0.3]).to_string(), "(((s0 s1) s2) s3)");
        assert_eq!(greedy_split(&[]).node_count(), 1);
    }

    #[test]
    fn probabilities_form_a_distribution() {
        let m = small();
        let b = QtBatch { context: vec![vec![1, 2], vec![3]], candidates: vec![vec![4], vec![5, 6], vec![7], vec![8, 9, 10]], target: 2 };
        let p = qt_probability(&m.encoder, &m.store, &b).unwrap();
        assert_eq!(p.len(), 4);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let empty = QtBatch { context: vec![], ..b };
        assert!(matches!(qt_probability(&m.encoder, &m.store, &empty), Err(SgnError::Input(_))));
    }

    #[test]
    fn parse_has_one_leaf_per_sentence() {
        let m = small();
        let recipe = vec![vec![1, 2, 3], vec![4], vec![5, 6], vec![7, 8, 9, 10], vec![11]];
        let t = m.parse_recipe(&recipe).unwrap();
        assert_eq!(t.leaf_count(), 5);
        assert_eq!(m.parse_recipe(&recipe[..1]).unwrap().node_count(), 1);
        let batched = m.annotate(&[recipe.clone(), recipe[..3].to_vec()], 8).unwrap();
        assert_eq!(batched[0], t);
        assert_eq!(batched[1], m.parse_recipe(&recipe[..3]).unwrap());
    }

    #[test]
    fn random_trees_are_binary_over_all_leaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 1..12 {
            let t = random_binary_tree(n, &mut rng);
            assert_eq!(t.leaf_count(), n);
            assert_eq!(t.node_count(), 2 * n - 1);
        }
    }
}
