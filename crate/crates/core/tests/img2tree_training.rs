use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgn::corpus::{make_synthetic_corpus, split, Partition, SyntheticConfig};
use sgn::encoders::{FeatureProvider, ProviderKind};
use sgn::img2tree::{decision_count, DecodeMode, TreeGenConfig, TreeGenerator};
use sgn::nn::{Adam, ParamStore, Tape, Tensor};
use sgn::treekit::{encode_tree, AdjacencyVector};

const CFG: TreeGenConfig = TreeGenConfig { width: 32, layers: 1, max_nodes: 24 };

struct Data {
    features: Vec<Vec<f64>>,
    targets: Vec<AdjacencyVector>,
}

fn data(seed: u64, part: Partition) -> Data {
    let syn = SyntheticConfig { train: 240, val: 0, test: 60, ..SyntheticConfig::default() };
    let corpus = make_synthetic_corpus(&syn, seed).unwrap();
    let provider = FeatureProvider::new(ProviderKind::SyntheticEmbedding, CFG.width, seed, None).unwrap();
    let samples = split(&corpus, part);
    Data {
        features: samples.iter().map(|s| provider.image_features(&s.image_key).unwrap()).collect(),
        targets: samples.iter().map(|s| encode_tree(s.planted_tree.as_ref().unwrap())).collect(),
    }
}

/// Mean log-likelihood per decision over a held-out set.
fn per_decision_ll(gen: &TreeGenerator, store: &ParamStore, d: &Data) -> f64 {
    let (mut ll, mut n) = (0.0, 0);
    for (f, v) in d.features.iter().zip(&d.targets) {
        ll += gen.tree_log_likelihood(store, f, v).unwrap();
        n += decision_count(v, CFG.max_nodes);
    }
    ll / n as f64
}

fn train(gen: &TreeGenerator, store: &mut ParamStore, d: &Data, epochs: usize) {
    let mut adam = Adam::new(0.01);
    for _ in 0..epochs {
        for idx in (0..d.targets.len()).collect::<Vec<_>>().chunks(16) {
            let grads = {
                let mut tape = Tape::new(store);
                let rows: Vec<f64> = idx.iter().flat_map(|&i| d.features[i].clone()).collect();
                let f = tape.constant(Tensor::from_vec(idx.len(), CFG.width, rows));
                let targets: Vec<&AdjacencyVector> = idx.iter().map(|&i| &d.targets[i]).collect();
                let decisions: usize = targets.iter().map(|v| decision_count(v, CFG.max_nodes)).sum();
                let ll = gen.log_likelihood(&mut tape, f, &targets).unwrap();
                let total = tape.sum_all(ll);
                let loss = tape.scale(total, -1.0 / decisions as f64);
                tape.backward(loss)
            };
            adam.step(store, &grads);
        }
    }
}

fn histogram(counts: impl Iterator<Item = usize>) -> BTreeMap<usize, f64> {
    let mut h = BTreeMap::new();
    let mut total = 0.0;
    for c in counts {
        *h.entry(c).or_insert(0.0) += 1.0;
        total += 1.0;
    }
    h.values_mut().for_each(|v| *v /= total);
    h
}

fn total_variation(a: &BTreeMap<usize, f64>, b: &BTreeMap<usize, f64>) -> f64 {
    let keys: std::collections::BTreeSet<_> = a.keys().chain(b.keys()).collect();
    0.5 * keys.into_iter().map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs()).sum::<f64>()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

#[test]
fn training_raises_held_out_likelihood_and_matches_node_counts() {
    let (mut gains, mut distances) = (Vec::new(), Vec::new());
    for seed in [1, 2, 3] {
        let (tr, te) = (data(seed, Partition::Train), data(seed, Partition::Test));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gen = TreeGenerator::new(&mut store, "gen", CFG, &mut rng).unwrap();
        let before = per_decision_ll(&gen, &store, &te);
        train(&gen, &mut store, &tr, 40);
        let after = per_decision_ll(&gen, &store, &te);
        gains.push(after - before);

        let annotated = histogram(tr.targets.iter().map(|v| v.node_count()));
        let generated = histogram((0..1000).map(|i| {
            let f = &te.features[i % te.features.len()];
            gen.generate(&store, f, DecodeMode::Sample, seed * 10_000 + i as u64).unwrap().node_count()
        }));
        distances.push(total_variation(&annotated, &generated));
    }
    eprintln!("held-out ll gains {gains:?}, node-count TV {distances:?}");
    assert!(median(gains) > 0.0);
    assert!(median(distances) < 0.2);
}
