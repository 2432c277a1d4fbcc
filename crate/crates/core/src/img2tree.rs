//! Conditional tree generation from image features.
//!
//! A tree with `n` nodes is produced as a sequence of adjacency rows: step
//! `i` first decides whether node `i` exists (stop unit), then emits the
//! row `V_i` linking node `i` to one of the nodes `0..i`. A stacked GRU
//! starts from the image feature vector and reads the previous row,
//! zero-padded to `max_nodes`.
//!
//! Training scores every position of a row as an independent Bernoulli;
//! decoding picks exactly one parent per row so that the result is always
//! a tree.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgnError};
use crate::nn::gru::GruCell;
use crate::nn::layers::Linear;
use crate::nn::tape::{bce_term, sigmoid};
use crate::nn::{ParamStore, Tape, Tensor, Var};
use crate::train::stream_rng;
use crate::treekit::{encode_tree, AdjacencyVector, SentenceTree, DEFAULT_MAX_NODES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeGenConfig {
    /// Recurrent width; equals the image feature width.
    pub width: usize,
    pub layers: usize,
    pub max_nodes: usize,
}

impl Default for TreeGenConfig {
    fn default() -> Self {
        Self { width: 64, layers: 2, max_nodes: DEFAULT_MAX_NODES }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Clone, Debug)]
pub struct TreeGenerator {
    pub config: TreeGenConfig,
    pub cells: Vec<GruCell>,
    /// `max_nodes` link logits followed by one stop logit.
    pub head: Linear,
}

/// Per-step output of the decoding path.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDistribution {
    /// Link probabilities for positions `0..i`.
    pub links: Vec<f64>,
    pub stop: f64,
}

/// Incremental decoding state on a tape.
pub struct TreeDecoderState {
    hidden: Vec<Var>,
    input: Tensor,
    /// Index of the node the next step decides on.
    pub step: usize,
}

impl TreeGenerator {
    pub fn new(store: &mut ParamStore, name: &str, config: TreeGenConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.layers == 0 || config.max_nodes < 2 {
            return Err(SgnError::Config("tree generator needs a layer and max_nodes >= 2".into()));
        }
        let cells = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.max_nodes } else { config.width };
                GruCell::new(store, &format!("{name}.gru{l}"), input, config.width, rng)
            })
            .collect();
        let head = Linear::new(store, &format!("{name}.head"), config.width, config.max_nodes + 1, rng);
        Ok(Self { config, cells, head })
    }

    fn advance(&self, tape: &mut Tape, hidden: &mut [Var], input: Var) -> Result<Var> {
        let mut x = input;
        for (l, cell) in self.cells.iter().enumerate() {
            hidden[l] = cell.step(tape, x, hidden[l])?;
            x = hidden[l];
        }
        Ok(self.head.forward(tape, x))
    }

    fn check_features(&self, tape: &Tape, f_img: Var) -> Result<usize> {
        let (rows, width) = tape.shape(f_img);
        if width != self.config.width {
            return Err(SgnError::Shape(format!("image features have width {width}, generator expects {}", self.config.width)));
        }
        Ok(rows)
    }

    /// Summed log-likelihood of each target tree (`batch x 1`) under teacher
    /// forcing. `f_img` has one row per tree.
    pub fn log_likelihood(&self, tape: &mut Tape, f_img: Var, targets: &[&AdjacencyVector]) -> Result<Var> {
        let batch = self.check_features(tape, f_img)?;
        if batch != targets.len() || batch == 0 {
            return Err(SgnError::Shape(format!("{batch} feature rows for {} trees", targets.len())));
        }
        let cap = self.config.max_nodes;
        if let Some(t) = targets.iter().find(|t| t.node_count() > cap) {
            return Err(SgnError::Capacity { nodes: t.node_count(), max: cap });
        }
        let steps = targets.iter().map(|t| decision_steps(t.node_count(), cap)).max().unwrap();
        let mut hidden = vec![f_img; self.cells.len()];
        let mut terms = Vec::with_capacity(steps);
        for i in 1..=steps {
            let mut input = Tensor::zeros(batch, cap);
            let mut target = Tensor::zeros(batch, cap + 1);
            let mut mask = Tensor::zeros(batch, cap + 1);
            for (b, v) in targets.iter().enumerate() {
                let n = v.node_count();
                if i >= 2 && i - 1 < n {
                    for (j, &bit) in v.row(i - 1).iter().enumerate() {
                        input.set(b, j, bit as f64);
                    }
                }
                if i < n {
                    for (j, &bit) in v.row(i).iter().enumerate() {
                        target.set(b, j, bit as f64);
                        mask.set(b, j, 1.0);
                    }
                    mask.set(b, cap, 1.0);
                } else if i == n && n < cap {
                    target.set(b, cap, 1.0);
                    mask.set(b, cap, 1.0);
                }
            }
            let x = tape.constant(input);
            let logits = self.advance(tape, &mut hidden, x)?;
            terms.push(tape.bce_logits_rows(logits, target, mask));
        }
        let per_step = tape.concat_cols(&terms);
        let nll = tape.sum_cols(per_step);
        Ok(tape.scale(nll, -1.0))
    }

    /// Log-likelihood of one tree.
    pub fn tree_log_likelihood(&self, store: &ParamStore, f_img: &[f64], v: &AdjacencyVector) -> Result<f64> {
        let mut tape = Tape::new(store);
        let f = tape.constant(Tensor::row_vector(f_img.to_vec()));
        let ll = self.log_likelihood(&mut tape, f, &[v])?;
        Ok(tape.scalar(ll))
    }

    pub fn start(&self, tape: &mut Tape, f_img: Var) -> Result<TreeDecoderState> {
        if self.check_features(tape, f_img)? != 1 {
            return Err(SgnError::Shape("decoding takes a single feature row".into()));
        }
        Ok(TreeDecoderState { hidden: vec![f_img; self.cells.len()], input: Tensor::zeros(1, self.config.max_nodes), step: 1 })
    }

    /// Distribution for the pending step; `parent` of the previous step must
    /// already be fed through [`TreeGenerator::feed`].
    pub fn step_distribution(&self, tape: &mut Tape, state: &mut TreeDecoderState) -> Result<StepDistribution> {
        let x = tape.constant(state.input.clone());
        let logits = self.advance(tape, &mut state.hidden, x)?;
        let row = tape.value(logits).row(0);
        Ok(StepDistribution { links: row[..state.step].iter().map(|&l| sigmoid(l)).collect(), stop: sigmoid(row[self.config.max_nodes]) })
    }

    /// Records node `state.step` with the given parent and moves on.
    pub fn feed(&self, state: &mut TreeDecoderState, parent: usize) {
        state.input = Tensor::zeros(1, self.config.max_nodes);
        state.input.set(0, parent, 1.0);
        state.step += 1;
    }

    /// Generates a tree; sample mode draws from `seed`.
    pub fn generate(&self, store: &ParamStore, f_img: &[f64], mode: DecodeMode, seed: u64) -> Result<SentenceTree> {
        let mut rng = stream_rng(seed, 7);
        let mut tape = Tape::new(store);
        let f = tape.constant(Tensor::row_vector(f_img.to_vec()));
        let mut state = self.start(&mut tape, f)?;
        let mut parents = Vec::new();
        while state.step < self.config.max_nodes {
            let d = self.step_distribution(&mut tape, &mut state)?;
            let stop = match mode {
                DecodeMode::Greedy => d.stop > 0.5,
                DecodeMode::Sample => rng.gen::<f64>() < d.stop,
            };
            if stop {
                break;
            }
            let parent = match mode {
                DecodeMode::Greedy => argmax(&d.links),
                DecodeMode::Sample => match WeightedIndex::new(&d.links) {
                    Ok(w) => w.sample(&mut rng),
                    Err(_) => argmax(&d.links),
                },
            };
            parents.push(parent);
            self.feed(&mut state, parent);
        }
        Ok(SentenceTree::from_parents(parents)?.canonicalize())
    }
}

/// Steps needed to score an `n`-node tree: one per added node plus the
/// stop decision, which is implied once `max_nodes` is reached.
pub fn decision_steps(n: usize, max_nodes: usize) -> usize {
    if n < max_nodes {
        n
    } else {
        n - 1
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Log-probability of `v` from per-step distributions (the Bernoulli
/// product the training path scores).
pub fn replay_log_likelihood(steps: &[StepDistribution], v: &AdjacencyVector, max_nodes: usize) -> f64 {
    let n = v.node_count();
    let mut total = 0.0;
    for i in 1..n {
        let d = &steps[i - 1];
        total += (1.0 - d.stop).ln();
        for (j, &bit) in v.row(i).iter().enumerate() {
            total += if bit == 1 { d.links[j].ln() } else { (1.0 - d.links[j]).ln() };
        }
    }
    if n < max_nodes {
        total += steps[n - 1].stop.ln();
    }
    total
}

/// Per-step distributions along a given tree, computed with the decoding
/// path.
pub fn teacher_forced_steps(gen: &TreeGenerator, store: &ParamStore, f_img: &[f64], v: &AdjacencyVector) -> Result<Vec<StepDistribution>> {
    let mut tape = Tape::new(store);
    let f = tape.constant(Tensor::row_vector(f_img.to_vec()));
    let mut state = gen.start(&mut tape, f)?;
    let mut out = Vec::new();
    for i in 1..=decision_steps(v.node_count(), gen.config.max_nodes) {
        out.push(gen.step_distribution(&mut tape, &mut state)?);
        if i < v.node_count() {
            let parent = v.row(i).iter().position(|&b| b == 1).expect("valid row");
            gen.feed(&mut state, parent);
        }
    }
    Ok(out)
}

/// Number of scored decisions (rows plus stop units) for a tree, used to
/// normalize the tree loss.
pub fn decision_count(v: &AdjacencyVector, max_nodes: usize) -> usize {
    let n = v.node_count();
    (1..n).map(|i| i + 1).sum::<usize>() + usize::from(n < max_nodes)
}

/// Bernoulli log-likelihood of a bit under a logit, exposed for oracles.
pub fn bit_log_likelihood(logit: f64, bit: u8) -> f64 {
    -bce_term(logit, bit as f64)
}

/// Encodes a tree, checking it fits the generator.
pub fn target_vector(tree: &SentenceTree, max_nodes: usize) -> Result<AdjacencyVector> {
    if tree.node_count() > max_nodes {
        return Err(SgnError::Capacity { nodes: tree.node_count(), max: max_nodes });
    }
    Ok(encode_tree(tree))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(max_nodes: usize) -> (ParamStore, TreeGenerator) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = TreeGenerator::new(&mut store, "g", TreeGenConfig { width: 6, layers: 2, max_nodes }, &mut rng).unwrap();
        (store, g)
    }

    #[test]
    fn batched_likelihood_matches_step_replay() {
        let (store, g) = small(8);
        let f = [0.3, -0.2, 0.5, 0.1, -0.4, 0.2];
        for bits in ["", "1", "101", "110001", "1100010010", "1100100010100000000100000001"] {
            let v = AdjacencyVector::parse_bit_string(bits).unwrap();
            let ll = g.tree_log_likelihood(&store, &f, &v).unwrap();
            let steps = teacher_forced_steps(&g, &store, &f, &v).unwrap();
            let replay = replay_log_likelihood(&steps, &v, 8);
            assert!((ll - replay).abs() < 1e-9, "{bits}: {ll} vs {replay}");
        }
    }

    #[test]
    fn capacity_is_enforced() {
        let (store, g) = small(3);
        let v = AdjacencyVector::parse_bit_string("101001").unwrap();
        assert!(matches!(g.tree_log_likelihood(&store, &[0.0; 6], &v), Err(SgnError::Capacity { nodes: 4, max: 3 })));
    }

    #[test]
    fn generated_trees_are_valid_and_bounded() {
        let (store, g) = small(8);
        for seed in 0..20 {
            let f: Vec<f64> = (0..6).map(|k| ((seed * 7 + k) as f64).sin()).collect();
            for mode in [DecodeMode::Greedy, DecodeMode::Sample] {
                let t = g.generate(&store, &f, mode, seed).unwrap();
                assert!(t.node_count() <= 8);
                assert_eq!(crate::treekit::decode_vector(&encode_tree(&t)), t);
            }
        }
    }

    #[test]
    fn decision_count_counts_rows_and_stop() {
        assert_eq!(decision_count(&AdjacencyVector::parse_bit_string("").unwrap(), 39), 1);
        assert_eq!(decision_count(&AdjacencyVector::parse_bit_string("101").unwrap(), 39), 2 + 3 + 1);
        assert_eq!(decision_count(&AdjacencyVector::parse_bit_string("101").unwrap(), 3), 2 + 3);
    }
}
