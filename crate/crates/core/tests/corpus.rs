use proptest::prelude::*;
use serde_json::json;
use sgn::corpus::*;
use sgn::recipe2tree::greedy_split;
use sgn::treekit::SentenceTree;

fn record(id: usize, sentences: usize) -> serde_json::Value {
    let partition = ["train", "val", "test"][id % 3];
    json!({
        "id": format!("r{id}"),
        "title": "soup",
        "partition": partition,
        "ingredients": [{"text": "2 onions"}, {"text": "salt"}],
        "instructions": (0..sentences).map(|s| json!({"text": format!("Stir pot {s}.")})).collect::<Vec<_>>(),
    })
}

#[test]
fn loader_keeps_recipes_with_enough_sentences() {
    let counts = [3, 4, 7, 1, 4, 5, 2, 9, 0, 6];
    let doc = serde_json::Value::Array(counts.iter().enumerate().map(|(i, &c)| record(i, c)).collect());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("layer1.json");
    std::fs::write(&path, doc.to_string()).unwrap();

    let kept = load_recipe1m(&path, 4).unwrap();
    let expected: Vec<String> = counts.iter().enumerate().filter(|(_, &c)| c >= 4).map(|(i, _)| format!("r{i}")).collect();
    assert_eq!(kept.iter().map(|s| s.id.clone()).collect::<Vec<_>>(), expected);
    assert_eq!(kept.len(), 6);
    assert_eq!(kept[0].instructions[0], ["stir", "pot", "0", "."]);
    assert!(parse_recipe1m(b"[]", 4, TokenizerConfig::default()).unwrap().is_empty());
}

#[test]
fn tokenizer_examples() {
    let vocab = Vocabulary::from_tokens(["mix", "the", "beans"].map(String::from), TokenizerConfig::default());
    assert!(tokenize("", &vocab).is_empty());
    let ids = tokenize("Mix the beans", &vocab);
    assert_eq!(ids.len(), 3);
    assert!(ids.iter().all(|&i| i != UNK));
    assert_eq!(vocab.detokenize(&ids), "mix the beans");
    let oov = tokenize("mix the kidney beans with rice", &vocab);
    let unknown_words = ["kidney", "with", "rice"];
    assert_eq!(oov.iter().filter(|&&i| i == UNK).count(), unknown_words.len());
}

#[test]
fn synthetic_corpus_is_deterministic_and_phase_bounded() {
    let cfg = SyntheticConfig::default();
    let a = make_synthetic_corpus(&cfg, 11).unwrap();
    assert_eq!(a, make_synthetic_corpus(&cfg, 11).unwrap());
    assert_eq!(a.len(), cfg.train + cfg.val + cfg.test);
    for s in &a {
        let t = s.planted_tree.as_ref().expect("synthetic samples carry a planted tree");
        let phase_nodes = t.children(0);
        assert!(phase_nodes.len() <= cfg.phases, "{}", s.id);
        assert_eq!(t.leaf_count(), s.sentence_count());
        assert!((cfg.min_sentences..=cfg.max_sentences).contains(&s.sentence_count()));
        let key: sgn::corpus::StructureKey = s.image_key.parse().unwrap();
        assert_eq!(key.counts.iter().sum::<usize>(), s.sentence_count());
    }
    let empty = SyntheticConfig { train: 0, val: 0, test: 0, ..cfg };
    assert!(make_synthetic_corpus(&empty, 1).unwrap().is_empty());
}

#[test]
fn corpus_json_round_trips() {
    let cfg = SyntheticConfig { train: 30, val: 5, test: 5, ..SyntheticConfig::default() };
    let mut corpus = make_synthetic_corpus(&cfg, 3).unwrap();
    for s in corpus.iter_mut() {
        let d: Vec<f64> = (1..s.sentence_count()).map(|i| ((i * 7) % 5) as f64).collect();
        s.parsed_tree = Some(greedy_split(&d));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.json");
    write_corpus(&corpus, &path).unwrap();
    assert_eq!(read_corpus(&path).unwrap(), corpus);
}

proptest! {
    #[test]
    fn encode_detokenize_round_trip(words in prop::collection::vec("[a-z]{1,8}", 0..20)) {
        let vocab = Vocabulary::from_tokens(words.iter().cloned(), TokenizerConfig::default());
        let text = words.join(" ");
        let ids = tokenize(&text, &vocab);
        prop_assert_eq!(ids.len(), words.len());
        prop_assert_eq!(vocab.detokenize(&ids), text);
    }

    #[test]
    fn greedy_trees_survive_serialization(d in prop::collection::vec(0.0f64..3.0, 0..14)) {
        let t = greedy_split(&d);
        let bits = sgn::treekit::encode_tree(&t);
        let back: SentenceTree = sgn::treekit::decode_vector(&bits);
        prop_assert_eq!(back.constituent_spans(), t.constituent_spans());
        prop_assert_eq!(back, t);
    }
}
