//! Sentence trees and the lower-triangular adjacency-vector codec.
//!
//! A [`SentenceTree`] is stored as a parent array in which every parent id
//! is smaller than its child id, so node ids always follow a hierarchical
//! ordering. Leaves carry sentence indices; internal nodes carry nothing.
//!
//! The codec flattens the strictly lower-triangular part of the adjacency
//! matrix row by row: row `i` (for `i = 1..n`) has `i` entries and a single
//! set bit at the parent's column. A tree with `n` nodes therefore encodes
//! to `n(n-1)/2` bits.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use crate::error::{Result, SgnError};

/// Default maximum node count: a binary tree over 19 sentences has 37
/// nodes; 39 leaves a little headroom.
pub const DEFAULT_MAX_NODES: usize = 39;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SentenceTree {
    /// `parents[i]` is the parent of node `i + 1`.
    parents: Vec<usize>,
    /// Sentence index per node; `Some` exactly on leaves.
    labels: Vec<Option<usize>>,
}

impl SentenceTree {
    /// Single-node tree holding sentence 0.
    pub fn singleton() -> Self {
        Self { parents: Vec::new(), labels: vec![Some(0)] }
    }

    /// Builds a tree from a parent array (`parents[k]` is the parent of node
    /// `k + 1`). Leaves are labelled with sentence indices in depth-first
    /// order, visiting children by ascending id.
    pub fn from_parents(parents: Vec<usize>) -> Result<Self> {
        validate_parents(&parents)?;
        let n = parents.len() + 1;
        let children = children_lists(&parents);
        let mut labels = vec![None; n];
        let mut next = 0;
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            if children[node].is_empty() {
                labels[node] = Some(next);
                next += 1;
            } else {
                stack.extend(children[node].iter().rev());
            }
        }
        Ok(Self { parents, labels })
    }

    /// Builds a tree from a parent array plus explicit leaf labels
    /// (node id -> sentence index). Labels must cover exactly the leaves and
    /// form a permutation of `0..leaf_count`.
    pub fn with_labels(parents: Vec<usize>, leaf_labels: &BTreeMap<usize, usize>) -> Result<Self> {
        validate_parents(&parents)?;
        let n = parents.len() + 1;
        let children = children_lists(&parents);
        let mut labels = vec![None; n];
        let mut seen = BTreeSet::new();
        for (&node, &sentence) in leaf_labels {
            if node >= n {
                return Err(SgnError::InvalidTree(format!("label on missing node {node}")));
            }
            if !children[node].is_empty() {
                return Err(SgnError::InvalidTree(format!("internal node {node} carries a sentence label")));
            }
            if !seen.insert(sentence) {
                return Err(SgnError::InvalidTree(format!("sentence {sentence} labelled twice")));
            }
            labels[node] = Some(sentence);
        }
        let leaf_count = children.iter().filter(|c| c.is_empty()).count();
        if seen.len() != leaf_count || labels.iter().zip(&children).any(|(l, c)| c.is_empty() && l.is_none()) {
            return Err(SgnError::InvalidTree("every leaf needs exactly one sentence label".into()));
        }
        if seen.iter().copied().ne(0..leaf_count) {
            return Err(SgnError::InvalidTree("sentence labels must be 0..leaf_count".into()));
        }
        Ok(Self { parents, labels })
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        if node == 0 {
            None
        } else {
            self.parents.get(node - 1).copied()
        }
    }

    /// Parent array without the root entry.
    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn children(&self, node: usize) -> Vec<usize> {
        self.parents
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == node)
            .map(|(k, _)| k + 1)
            .collect()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.labels[node].is_some()
    }

    pub fn sentence_of(&self, node: usize) -> Option<usize> {
        self.labels[node]
    }

    pub fn leaf_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Leaf labels as a node -> sentence map.
    pub fn leaf_labels(&self) -> BTreeMap<usize, usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(node, l)| l.map(|s| (node, s)))
            .collect()
    }

    /// Undirected edge list `(parent, child)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parents.iter().enumerate().map(|(k, &p)| (p, k + 1)).collect()
    }

    /// Sorted sentence indices below `node`.
    pub fn leaf_span(&self, node: usize) -> Vec<usize> {
        let children = children_lists(&self.parents);
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(v) = stack.pop() {
            if let Some(s) = self.labels[v] {
                out.push(s);
            }
            stack.extend(&children[v]);
        }
        out.sort_unstable();
        out
    }

    /// Sentence spans induced by internal nodes, ignoring single-sentence
    /// spans.
    pub fn constituent_spans(&self) -> BTreeSet<Vec<usize>> {
        (0..self.node_count())
            .filter(|&v| !self.is_leaf(v))
            .map(|v| self.leaf_span(v))
            .filter(|span| span.len() >= 2)
            .collect()
    }

    /// Re-numbers the tree in canonical breadth-first order.
    pub fn canonicalize(&self) -> Self {
        canonical_order(&self.edges(), 0, &self.leaf_labels()).expect("a valid tree is always canonicalizable")
    }

    pub fn to_bracket(&self) -> Bracket {
        let children = children_lists(&self.parents);
        fn build(tree: &SentenceTree, children: &[Vec<usize>], node: usize) -> Bracket {
            match tree.labels[node] {
                Some(s) => Bracket::Leaf(s),
                None => Bracket::Node(children[node].iter().map(|&c| build(tree, children, c)).collect()),
            }
        }
        build(self, &children, 0)
    }

    pub fn from_bracket(bracket: &Bracket) -> Result<Self> {
        let mut edges = Vec::new();
        let mut labels = BTreeMap::new();
        let mut next_id = 0usize;
        fn walk(
            b: &Bracket,
            edges: &mut Vec<(usize, usize)>,
            labels: &mut BTreeMap<usize, usize>,
            next_id: &mut usize,
        ) -> Result<usize> {
            let id = *next_id;
            *next_id += 1;
            match b {
                Bracket::Leaf(s) => {
                    labels.insert(id, *s);
                }
                Bracket::Node(kids) => {
                    if kids.is_empty() {
                        return Err(SgnError::InvalidTree("empty bracket".into()));
                    }
                    for k in kids {
                        let child = walk(k, edges, labels, next_id)?;
                        edges.push((id, child));
                    }
                }
            }
            Ok(id)
        }
        let root = walk(bracket, &mut edges, &mut labels, &mut next_id)?;
        canonical_order(&edges, root, &labels)
    }
}

impl fmt::Display for SentenceTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_bracket())
    }
}

fn validate_parents(parents: &[usize]) -> Result<()> {
    for (k, &p) in parents.iter().enumerate() {
        if p > k {
            return Err(SgnError::InvalidTree(format!(
                "node {} has parent {} which does not precede it",
                k + 1,
                p
            )));
        }
    }
    Ok(())
}

fn children_lists(parents: &[usize]) -> Vec<Vec<usize>> {
    let mut children = vec![Vec::new(); parents.len() + 1];
    for (k, &p) in parents.iter().enumerate() {
        children[p].push(k + 1);
    }
    children
}

/// Nested bracket view of a tree, e.g. `(s0 ((s1 s2) s3))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Bracket {
    Leaf(usize),
    Node(Vec<Bracket>),
}

impl fmt::Display for Bracket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bracket::Leaf(s) => write!(f, "s{s}"),
            Bracket::Node(kids) => {
                write!(f, "(")?;
                for (i, k) in kids.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    write!(f, "{k}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl std::str::FromStr for Bracket {
    type Err = SgnError;

    fn from_str(s: &str) -> Result<Self> {
        let tokens: Vec<String> = s
            .replace('(', " ( ")
            .replace(')', " ) ")
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let mut pos = 0;
        fn parse(tokens: &[String], pos: &mut usize) -> Result<Bracket> {
            let tok = tokens
                .get(*pos)
                .ok_or_else(|| SgnError::Input("unexpected end of bracket string".into()))?;
            *pos += 1;
            if tok == "(" {
                let mut kids = Vec::new();
                loop {
                    match tokens.get(*pos).map(String::as_str) {
                        Some(")") => {
                            *pos += 1;
                            return Ok(Bracket::Node(kids));
                        }
                        Some(_) => kids.push(parse(tokens, pos)?),
                        None => return Err(SgnError::Input("unbalanced bracket string".into())),
                    }
                }
            }
            tok.strip_prefix('s')
                .and_then(|d| d.parse().ok())
                .map(Bracket::Leaf)
                .ok_or_else(|| SgnError::Input(format!("bad leaf token {tok:?}")))
        }
        let b = parse(&tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(SgnError::Input("trailing tokens after bracket".into()));
        }
        Ok(b)
    }
}

/// Flattened lower-triangular adjacency rows; exactly one set bit per row.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AdjacencyVector {
    nodes: usize,
    bits: Vec<u8>,
}

/// Offset of row `i` inside the flat vector.
pub fn row_offset(i: usize) -> usize {
    i * (i - 1) / 2
}

fn triangular_root(len: usize) -> Option<usize> {
    // smallest n with n(n-1)/2 == len
    let mut n = 1usize;
    while n * (n - 1) / 2 < len {
        n += 1;
    }
    (n * (n - 1) / 2 == len).then_some(n)
}

impl AdjacencyVector {
    /// Validates shape (triangular length) and tree-validity (one set bit
    /// per row).
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        let nodes = triangular_root(bits.len())
            .ok_or_else(|| SgnError::Shape(format!("length {} is not a triangular number", bits.len())))?;
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(SgnError::Shape(format!("bit value {b} is not 0 or 1")));
        }
        for i in 1..nodes {
            let row = &bits[row_offset(i)..row_offset(i) + i];
            let ones = row.iter().filter(|&&b| b == 1).count();
            if ones != 1 {
                return Err(SgnError::InvalidTree(format!("row {i} has {ones} set bits")));
            }
        }
        Ok(Self { nodes, bits })
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Row `i` (length `i`), for `1 <= i < node_count`.
    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[row_offset(i)..row_offset(i) + i]
    }

    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }

    pub fn parse_bit_string(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(SgnError::Shape(format!("unexpected character {other:?} in bit string"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::from_bits(bits)
    }
}

impl fmt::Display for AdjacencyVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bit_string())
    }
}

pub fn encode_tree(tree: &SentenceTree) -> AdjacencyVector {
    let n = tree.node_count();
    let mut bits = vec![0u8; n * (n - 1) / 2];
    for (k, &p) in tree.parents.iter().enumerate() {
        bits[row_offset(k + 1) + p] = 1;
    }
    AdjacencyVector { nodes: n, bits }
}

pub fn decode_vector(v: &AdjacencyVector) -> SentenceTree {
    let parents = (1..v.nodes)
        .map(|i| v.row(i).iter().position(|&b| b == 1).expect("validated row"))
        .collect();
    SentenceTree::from_parents(parents).expect("rows point backwards by construction")
}

/// Numbers an undirected tree breadth-first from `root`.
///
/// Children are visited by the smallest sentence index below them, leaves
/// before internal nodes on equal keys. `leaf_labels` maps original node
/// ids to sentence indices and must cover every leaf.
pub fn canonical_order(
    edges: &[(usize, usize)],
    root: usize,
    leaf_labels: &BTreeMap<usize, usize>,
) -> Result<SentenceTree> {
    let mut nodes: BTreeSet<usize> = edges.iter().flat_map(|&(a, b)| [a, b]).collect();
    nodes.insert(root);
    if edges.len() + 1 != nodes.len() {
        return Err(SgnError::InvalidTree(format!(
            "{} edges over {} nodes cannot form a tree",
            edges.len(),
            nodes.len()
        )));
    }
    let mut adj: BTreeMap<usize, Vec<usize>> = nodes.iter().map(|&v| (v, Vec::new())).collect();
    for &(a, b) in edges {
        if a == b {
            return Err(SgnError::InvalidTree(format!("self-loop on node {a}")));
        }
        adj.get_mut(&a).unwrap().push(b);
        adj.get_mut(&b).unwrap().push(a);
    }

    // orient from root, rejecting cycles and unreachable nodes
    let mut parent: BTreeMap<usize, usize> = BTreeMap::new();
    let mut order = vec![root];
    let mut visited: BTreeSet<usize> = [root].into();
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        for &w in &adj[&v] {
            if parent.get(&v) == Some(&w) {
                continue;
            }
            if !visited.insert(w) {
                return Err(SgnError::InvalidTree("edge set contains a cycle".into()));
            }
            parent.insert(w, v);
            order.push(w);
            queue.push_back(w);
        }
    }
    if visited.len() != nodes.len() {
        return Err(SgnError::InvalidTree("edge set is disconnected".into()));
    }

    let children: BTreeMap<usize, Vec<usize>> = nodes
        .iter()
        .map(|&v| (v, adj[&v].iter().copied().filter(|w| parent.get(&v) != Some(w)).collect()))
        .collect();

    // smallest sentence below each node, bottom-up
    let mut min_leaf: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in order.iter().rev() {
        let key = if children[&v].is_empty() {
            *leaf_labels
                .get(&v)
                .ok_or_else(|| SgnError::InvalidTree(format!("leaf {v} has no sentence label")))?
        } else {
            children[&v].iter().map(|c| min_leaf[c]).min().unwrap()
        };
        min_leaf.insert(v, key);
    }

    let mut new_id: BTreeMap<usize, usize> = BTreeMap::new();
    let mut parents = Vec::with_capacity(nodes.len() - 1);
    let mut new_labels = BTreeMap::new();
    let mut queue = VecDeque::from([root]);
    new_id.insert(root, 0);
    while let Some(v) = queue.pop_front() {
        let id = new_id[&v];
        if children[&v].is_empty() {
            new_labels.insert(id, leaf_labels[&v]);
        }
        let mut kids = children[&v].clone();
        kids.sort_by_key(|c| (min_leaf[c], !children[c].is_empty(), *c));
        for c in kids {
            new_id.insert(c, parents.len() + 1);
            parents.push(id);
            queue.push_back(c);
        }
    }
    SentenceTree::with_labels(parents, &new_labels)
}

/// Unlabeled constituency F1 over the spans induced by internal nodes.
///
/// Spans covering a single sentence are ignored; when neither tree has a
/// span of two or more sentences the score is 1.
pub fn unlabeled_f1(predicted: &SentenceTree, reference: &SentenceTree) -> Result<f64> {
    if predicted.leaf_count() != reference.leaf_count() {
        return Err(SgnError::Comparability(format!(
            "leaf counts differ: {} vs {}",
            predicted.leaf_count(),
            reference.leaf_count()
        )));
    }
    let p = predicted.constituent_spans();
    let r = reference.constituent_spans();
    if p.is_empty() && r.is_empty() {
        return Ok(1.0);
    }
    let hits = p.intersection(&r).count() as f64;
    if hits == 0.0 {
        return Ok(0.0);
    }
    let precision = hits / p.len() as f64;
    let recall = hits / r.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(parents: &[usize]) -> SentenceTree {
        SentenceTree::from_parents(parents.to_vec()).unwrap()
    }

    #[test]
    fn encodes_path_and_star() {
        assert_eq!(encode_tree(&tree(&[0, 1])).bits(), &[1, 0, 1]);
        assert_eq!(encode_tree(&tree(&[0, 0])).bits(), &[1, 1, 0]);
    }

    #[test]
    fn decodes_path() {
        let v = AdjacencyVector::from_bits(vec![1, 0, 1]).unwrap();
        let t = decode_vector(&v);
        assert_eq!(t.parents(), &[0, 1]);
        assert_eq!(t.leaf_count(), 1);
    }

    #[test]
    fn rejects_non_triangular_length() {
        assert!(matches!(AdjacencyVector::from_bits(vec![1, 1]), Err(SgnError::Shape(_))));
    }

    #[test]
    fn rejects_rows_without_single_parent() {
        assert!(matches!(AdjacencyVector::from_bits(vec![1, 1, 1]), Err(SgnError::InvalidTree(_))));
        assert!(matches!(AdjacencyVector::from_bits(vec![0]), Err(SgnError::InvalidTree(_))));
    }

    #[test]
    fn empty_vector_is_single_node() {
        let v = AdjacencyVector::from_bits(vec![]).unwrap();
        assert_eq!(decode_vector(&v), SentenceTree::singleton());
    }

    #[test]
    fn bit_string_round_trip() {
        let v = AdjacencyVector::parse_bit_string("110001").unwrap();
        assert_eq!(v.to_bit_string(), "110001");
        assert!(AdjacencyVector::parse_bit_string("1x0").is_err());
    }

    #[test]
    fn canonical_single_node() {
        let t = canonical_order(&[], 7, &[(7, 0)].into()).unwrap();
        assert_eq!(t, SentenceTree::singleton());
    }

    #[test]
    fn canonical_star_orders_leaves_by_sentence() {
        // center 10; leaves 11, 12, 13 hold sentences 2, 0, 1
        let edges = [(10, 11), (10, 12), (10, 13)];
        let labels = [(11, 2), (12, 0), (13, 1)].into();
        let t = canonical_order(&edges, 10, &labels).unwrap();
        assert_eq!(t.parents(), &[0, 0, 0]);
        assert_eq!(t.sentence_of(1), Some(0));
        assert_eq!(t.sentence_of(2), Some(1));
        assert_eq!(t.sentence_of(3), Some(2));
    }

    #[test]
    fn canonical_rejects_cycles_and_disconnection() {
        let labels = BTreeMap::new();
        assert!(matches!(
            canonical_order(&[(0, 1), (1, 2), (2, 0)], 0, &labels),
            Err(SgnError::InvalidTree(_))
        ));
        assert!(matches!(
            canonical_order(&[(0, 1), (2, 3), (3, 4)], 0, &labels),
            Err(SgnError::InvalidTree(_))
        ));
    }

    #[test]
    fn bracket_round_trip() {
        let b: Bracket = "(s0 ((s1 s2) s3))".parse().unwrap();
        let t = SentenceTree::from_bracket(&b).unwrap();
        assert_eq!(t.to_string(), "(s0 ((s1 s2) s3))");
        assert_eq!(t.leaf_count(), 4);
        // BFS: root, s0, (..), (s1 s2), s3, s1, s2
        assert_eq!(t.parents(), &[0, 0, 2, 2, 3, 3]);
    }

    #[test]
    fn with_labels_rejects_bad_maps() {
        assert!(SentenceTree::with_labels(vec![0, 0], &[(1, 0)].into()).is_err());
        assert!(SentenceTree::with_labels(vec![0, 0], &[(1, 0), (2, 2)].into()).is_err());
        assert!(SentenceTree::with_labels(vec![0, 0], &[(0, 0), (1, 1), (2, 2)].into()).is_err());
        assert!(SentenceTree::with_labels(vec![0, 0], &[(1, 1), (2, 0)].into()).is_ok());
    }

    #[test]
    fn f1_identical_and_mismatched() {
        let a = SentenceTree::from_bracket(&"((s0 s1) (s2 s3))".parse().unwrap()).unwrap();
        assert_eq!(unlabeled_f1(&a, &a).unwrap(), 1.0);
        let b = SentenceTree::from_bracket(&"(s0 s1 s2)".parse().unwrap()).unwrap();
        assert!(matches!(unlabeled_f1(&a, &b), Err(SgnError::Comparability(_))));
    }
}
