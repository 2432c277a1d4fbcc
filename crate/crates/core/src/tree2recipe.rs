//! Graph-attention encoding of sentence trees.
//!
//! Node inputs are the rows of the symmetric adjacency matrix with
//! self-loops, zero-padded to `max_nodes`. Each layer attends only over a
//! node's neighbours and itself; heads are averaged before the
//! nonlinearity. The tree vector is a readout (mean or root) of the last
//! layer's node outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgnError};
use crate::nn::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::treekit::{SentenceTree, DEFAULT_MAX_NODES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Mean,
    Root,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatConfig {
    pub max_nodes: usize,
    /// Output width; equals the image feature width.
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub readout: Readout,
    /// Slope of the leaky rectifier in the attention scorer.
    pub negative_slope: f64,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self { max_nodes: DEFAULT_MAX_NODES, width: 64, heads: 2, layers: 2, readout: Readout::Mean, negative_slope: 0.2 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionHead {
    pub weight: ParamId,
    /// Scorer halves: `e_ij = leaky(a_src . W z_i + a_dst . W z_j)`.
    pub score_src: ParamId,
    pub score_dst: ParamId,
}

#[derive(Clone, Debug)]
pub struct GraphAttentionLayer {
    pub input: usize,
    pub output: usize,
    pub heads: Vec<AttentionHead>,
    pub negative_slope: f64,
}

/// Node outputs of the last layer and the pooled tree vector.
#[derive(Clone, Copy, Debug)]
pub struct TreeEmbedding {
    pub nodes: Var,
    pub pooled: Var,
}

/// Symmetric adjacency with self-loops, one row per node, padded to
/// `max_nodes` columns.
pub fn node_features_from_tree(tree: &SentenceTree, max_nodes: usize) -> Result<Tensor> {
    let n = tree.node_count();
    if n > max_nodes {
        return Err(SgnError::Capacity { nodes: n, max: max_nodes });
    }
    let mut z = Tensor::zeros(n, max_nodes);
    for i in 0..n {
        z.set(i, i, 1.0);
    }
    for (p, c) in tree.edges() {
        z.set(p, c, 1.0);
        z.set(c, p, 1.0);
    }
    Ok(z)
}

/// `mask[i * n + j]` holds when `j` is `i` or adjacent to `i`.
pub fn neighbour_mask(tree: &SentenceTree) -> Vec<bool> {
    let n = tree.node_count();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        mask[i * n + i] = true;
    }
    for (p, c) in tree.edges() {
        mask[p * n + c] = true;
        mask[c * n + p] = true;
    }
    mask
}

impl GraphAttentionLayer {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, heads: usize, negative_slope: f64, rng: &mut impl Rng) -> Self {
        let heads = (0..heads)
            .map(|h| AttentionHead {
                weight: store.add_glorot(format!("{name}.head{h}.weight"), input, output, rng),
                score_src: store.add_glorot(format!("{name}.head{h}.score_src"), output, 1, rng),
                score_dst: store.add_glorot(format!("{name}.head{h}.score_dst"), output, 1, rng),
            })
            .collect();
        Self { input, output, heads, negative_slope }
    }

    /// Returns ELU of the head-averaged attention output and the per-head
    /// attention matrices (`n x n`, zero off the neighbourhood).
    pub fn forward(&self, tape: &mut Tape, z: Var, mask: &[bool]) -> Result<(Var, Vec<Var>)> {
        let (n, width) = tape.shape(z);
        if width != self.input || mask.len() != n * n {
            return Err(SgnError::Shape(format!(
                "attention layer expects {} input columns and an {n}x{n} mask, got {width} and {}",
                self.input,
                mask.len()
            )));
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut alphas = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let w = tape.param(head.weight);
            let wz = tape.matmul(z, w);
            let a_src = tape.param(head.score_src);
            let a_dst = tape.param(head.score_dst);
            let src = tape.matmul(wz, a_src);
            let dst = tape.matmul(wz, a_dst);
            let dst_row = tape.transpose(dst);
            let raw = tape.outer_add(src, dst_row);
            let e = tape.leaky_relu(raw, self.negative_slope);
            let alpha = tape.softmax_rows(e, Some(mask));
            outs.push(tape.matmul(alpha, wz));
            alphas.push(alpha);
        }
        let mut sum = outs[0];
        for &o in &outs[1..] {
            sum = tape.add(sum, o);
        }
        let mean = tape.scale(sum, 1.0 / outs.len() as f64);
        Ok((tape.elu(mean), alphas))
    }
}

#[derive(Clone, Debug)]
pub struct TreeEncoder {
    pub config: GatConfig,
    pub layers: Vec<GraphAttentionLayer>,
}

impl TreeEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: GatConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.layers == 0 || config.heads == 0 {
            return Err(SgnError::Config("graph encoder needs at least one layer and one head".into()));
        }
        let layers = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.max_nodes } else { config.width };
                GraphAttentionLayer::new(store, &format!("{name}.layer{l}"), input, config.width, config.heads, config.negative_slope, rng)
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn embed_tree(&self, tape: &mut Tape, tree: &SentenceTree) -> Result<TreeEmbedding> {
        let z = tape.constant(node_features_from_tree(tree, self.config.max_nodes)?);
        let mask = neighbour_mask(tree);
        let mut x = z;
        for layer in &self.layers {
            x = layer.forward(tape, x, &mask)?.0;
        }
        let pooled = match self.config.readout {
            Readout::Mean => tape.mean_rows(x),
            Readout::Root => tape.slice_rows(x, 0, 1),
        };
        Ok(TreeEmbedding { nodes: x, pooled })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn features_of_small_trees() {
        let single = node_features_from_tree(&SentenceTree::singleton(), 4).unwrap();
        assert_eq!(single.data, [1.0, 0.0, 0.0, 0.0]);
        let path = SentenceTree::from_parents(vec![0, 1]).unwrap();
        let z = node_features_from_tree(&path, 4).unwrap();
        assert_eq!(z.data, [1., 1., 0., 0., 1., 1., 1., 0., 0., 1., 1., 0.]);
        assert!(matches!(node_features_from_tree(&path, 2), Err(SgnError::Capacity { nodes: 3, max: 2 })));
    }

    #[test]
    fn attention_stays_on_neighbours() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = GraphAttentionLayer::new(&mut store, "g", 6, 4, 3, 0.2, &mut rng);
        let tree = SentenceTree::from_parents(vec![0, 0, 1, 1, 2]).unwrap();
        let mask = neighbour_mask(&tree);
        let mut tape = Tape::new(&store);
        let z = tape.constant(node_features_from_tree(&tree, 6).unwrap());
        let (_, alphas) = layer.forward(&mut tape, z, &mask).unwrap();
        for a in alphas {
            let a = tape.value(a);
            for i in 0..6 {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in 0..6 {
                    if !mask[i * 6 + j] {
                        assert_eq!(a.get(i, j), 0.0);
                    }
                }
            }
        }
    }
}
