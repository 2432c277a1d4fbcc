//! Recipe records, tokenization, vocabularies, the Recipe1M-style JSON
//! format and the synthetic corpus with planted trees.

mod json;
mod synthetic;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::treekit::SentenceTree;

pub use json::{load_recipe1m, parse_recipe1m, read_corpus, recipes_to_json, write_corpus};
pub use synthetic::{make_synthetic_corpus, planted_tree, StructureKey, SyntheticConfig, MAX_SENTENCES, PHASES};
pub use vocab::{split_words, tokenize, TokenizerConfig, Vocabulary, BOS, EOS, PAD, RESERVED, SEP, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

impl std::str::FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(format!("unknown partition {other:?}")),
        }
    }
}

/// One recipe: ingredients and instruction sentences as word sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct RecipeSample {
    pub id: String,
    pub title: String,
    pub ingredients: Vec<Vec<String>>,
    pub instructions: Vec<Vec<String>>,
    pub partition: Partition,
    /// Handle passed to image feature providers.
    pub image_key: String,
    /// Known structure (synthetic corpus only).
    pub planted_tree: Option<SentenceTree>,
    /// Structure induced by the sentence-level parser.
    pub parsed_tree: Option<SentenceTree>,
}

impl RecipeSample {
    pub fn sentence_count(&self) -> usize {
        self.instructions.len()
    }

    /// All instruction words with sentences joined by spaces.
    pub fn instruction_words(&self) -> Vec<String> {
        self.instructions.iter().flatten().cloned().collect()
    }
}

/// Samples of one partition.
pub fn split<'a>(samples: &'a [RecipeSample], part: Partition) -> Vec<&'a RecipeSample> {
    samples.iter().filter(|s| s.partition == part).collect()
}

/// Vocabulary over the ingredients and instructions of the training split.
pub fn build_vocabulary(samples: &[RecipeSample], min_count: usize, tokenizer: TokenizerConfig) -> Vocabulary {
    let train = split(samples, Partition::Train);
    let seqs = train.iter().flat_map(|s| s.ingredients.iter().chain(&s.instructions)).map(|v| v.as_slice());
    Vocabulary::build(seqs, min_count, tokenizer)
}
