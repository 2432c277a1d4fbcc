use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgn::encoders::IngredientEncoder;
use sgn::img2tree::{TreeGenConfig, TreeGenerator};
use sgn::nn::gradcheck::{check_gradients, GradCheckReport};
use sgn::nn::layers::Linear;
use sgn::nn::onlstm::OrderedNeuronsCell;
use sgn::nn::transformer::{DecoderConfig, TransformerDecoder};
use sgn::nn::{ParamStore, Tensor};
use sgn::sgn::{EncodedSample, SgnConfig, SgnModel};
use sgn::tree2recipe::{GatConfig, Readout, TreeEncoder};
use sgn::treekit::{encode_tree, SentenceTree};

const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn assert_close(report: GradCheckReport) {
    assert!(report.entries_checked > 0);
    assert!(report.max_rel_error < TOLERANCE, "{report:?}");
}

#[test]
fn ordered_neurons_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let cell = OrderedNeuronsCell::new(&mut store, "cell", 5, 12, 3, &mut rng).unwrap();
    let (x, h, c) = (random(2, 5, &mut rng), random(2, 12, &mut rng), random(2, 12, &mut rng));
    let report = check_gradients(
        &mut store,
        |tape| {
            let (xv, hv, cv) = (tape.constant(x.clone()), tape.constant(h.clone()), tape.constant(c.clone()));
            let s1 = cell.step(tape, xv, hv, cv).unwrap();
            let s2 = cell.step(tape, xv, s1.h, s1.c).unwrap();
            let sq = tape.mul(s2.h, s2.h);
            let a = tape.sum_all(sq);
            let mf = tape.sum_all(s2.master_forget);
            let cs = tape.sum_all(s2.c);
            let ab = tape.add(a, mf);
            tape.add(ab, cs)
        },
        STEP,
        60,
        &mut rng,
    );
    assert_close(report);
}

#[test]
fn graph_encoder_pooled_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for readout in [Readout::Mean, Readout::Root] {
        let mut store = ParamStore::new();
        let cfg = GatConfig { max_nodes: 9, width: 6, heads: 2, layers: 2, readout, negative_slope: 0.2 };
        let enc = TreeEncoder::new(&mut store, "gat", cfg, &mut rng).unwrap();
        let tree = SentenceTree::from_parents(vec![0, 0, 1, 1, 2, 2, 5]).unwrap();
        let target = random(1, 6, &mut rng);
        let report = check_gradients(
            &mut store,
            |tape| {
                let e = enc.embed_tree(tape, &tree).unwrap();
                let t = tape.constant(target.clone());
                let d = tape.sub(e.pooled, t);
                let sq = tape.mul(d, d);
                tape.sum_all(sq)
            },
            STEP,
            40,
            &mut rng,
        );
        assert_close(report);
    }
}

#[test]
fn two_layer_decoder_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let cfg = DecoderConfig { vocab: 11, width: 16, layers: 2, heads: 4, ffn: 24, max_len: 8 };
    let dec = TransformerDecoder::new(&mut store, "dec", cfg, &mut rng).unwrap();
    let memory = random(3, 16, &mut rng);
    let report = check_gradients(
        &mut store,
        |tape| {
            let m = tape.constant(memory.clone());
            let logits = dec.forward(tape, &[1, 6, 9, 4, 2], m).unwrap();
            let lp = tape.log_softmax_rows(logits);
            let picked = tape.pick(lp, &[6, 9, 4, 2, 7]);
            let s = tape.sum_all(picked);
            tape.scale(s, -1.0)
        },
        STEP,
        10,
        &mut rng,
    );
    assert_close(report);
}

#[test]
fn ingredient_pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let enc = IngredientEncoder::new(&mut store, "ing", 20, 5, &mut rng);
    let head = Linear::new(&mut store, "head", 5, 3, &mut rng);
    let ingredients = vec![vec![5, 6], vec![7], vec![5]];
    let report = check_gradients(
        &mut store,
        |tape| {
            let f = enc.features(tape, &ingredients).unwrap();
            let o = head.forward(tape, f);
            let t = tape.tanh(o);
            let sq = tape.mul(t, t);
            tape.sum_all(sq)
        },
        STEP,
        50,
        &mut rng,
    );
    assert_close(report);
}

#[test]
fn tree_generator_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let gen = TreeGenerator::new(&mut store, "gen", TreeGenConfig { width: 6, layers: 2, max_nodes: 7 }, &mut rng).unwrap();
    let trees = [vec![0, 0, 1, 1], vec![0, 1, 1, 0, 4, 4]];
    let vectors: Vec<_> = trees.iter().map(|p| encode_tree(&SentenceTree::from_parents(p.clone()).unwrap())).collect();
    let f = random(2, 6, &mut rng);
    let report = check_gradients(
        &mut store,
        |tape| {
            let fv = tape.constant(f.clone());
            let ll = gen.log_likelihood(tape, fv, &[&vectors[0], &vectors[1]]).unwrap();
            tape.sum_all(ll)
        },
        STEP,
        30,
        &mut rng,
    );
    assert_close(report);
}

#[test]
fn joint_objective_end_to_end() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = SgnConfig { width: 8, decoder_layers: 1, decoder_heads: 2, ffn: 12, max_len: 12, max_nodes: 8, gat_heads: 2, ..SgnConfig::default() };
    let model = SgnModel::new(cfg, 14, 5, 3).unwrap();
    let sample = EncodedSample {
        id: "a".into(),
        image_key: "a".into(),
        image: (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ingredients: vec![vec![5, 6], vec![9]],
        target: vec![7, 8, 4, 10, 11, 2],
        tree: Some(SentenceTree::from_parents(vec![0, 0]).unwrap()),
    };
    let mut store = model.store.clone();
    let report = check_gradients(
        &mut store,
        |tape| model.batch_loss(tape, &[&sample]).unwrap().0,
        STEP,
        8,
        &mut rng,
    );
    assert_close(report);
}
