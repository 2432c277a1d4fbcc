use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticConfig;
use crate::encoders::{stable_hash, ProviderKind};
use crate::error::{Result, SgnError};
use crate::generator::TreeMemory;
use crate::metrics::BleuMean;
use crate::recipe2tree::{ParserConfig, ParserTraining};
use crate::sgn::{DecoderTree, SgnConfig, SgnTraining, TreeSource};
use crate::tree2recipe::Readout;
use crate::treekit::DEFAULT_MAX_NODES;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    /// Full-size settings; recorded for reference, too slow for a laptop.
    Full,
}

/// Every knob of a run, as one flat table. Unset keys take the desk
/// preset's values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,

    /// Recipe1M-style JSON; the synthetic corpus is generated when unset.
    pub corpus_path: Option<PathBuf>,
    pub min_sentences: usize,
    pub synthetic_train: usize,
    pub synthetic_val: usize,
    pub synthetic_test: usize,
    pub synthetic_dishes: usize,
    pub synthetic_max_sentences: usize,
    pub min_count: usize,

    pub provider: ProviderKind,
    pub feature_file: Option<PathBuf>,
    pub train_image: bool,

    pub parser_embed: usize,
    pub parser_hidden: usize,
    pub parser_layers: usize,
    pub parser_chunk: usize,
    pub distractors: usize,
    pub parser_epochs: usize,
    pub parser_batch: usize,
    pub parser_lr: f64,

    pub width: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub tree_layers: usize,
    pub max_nodes: usize,
    pub gat_layers: usize,
    pub gat_heads: usize,
    pub readout: Readout,
    pub tree_memory: TreeMemory,
    pub decoder_tree: DecoderTree,
    pub tree_source: TreeSource,

    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lambda_gen: f64,
    pub lambda_tree: f64,
    /// Off: zero tree token and no structure loss (the baseline).
    pub use_tree: bool,

    pub train_recipe2tree: bool,
    pub train_img2tree: bool,
    pub train_tree2recipe: bool,
    pub train_decoder: bool,

    pub bleu_mean: BleuMean,
    /// Evaluate on at most this many samples of the split.
    pub eval_limit: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let parser = ParserConfig::default();
        let ptrain = ParserTraining::default();
        let sgn = SgnConfig::default();
        let strain = SgnTraining::default();
        let syn = SyntheticConfig::default();
        Self {
            preset: Preset::Desk,
            seed: 1,
            corpus_path: None,
            min_sentences: syn.min_sentences,
            synthetic_train: syn.train,
            synthetic_val: syn.val,
            synthetic_test: syn.test,
            synthetic_dishes: syn.dishes,
            synthetic_max_sentences: syn.max_sentences,
            min_count: 5,
            provider: ProviderKind::SyntheticEmbedding,
            feature_file: None,
            train_image: false,
            parser_embed: parser.embed,
            parser_hidden: parser.hidden,
            parser_layers: parser.word_layers,
            parser_chunk: parser.chunk,
            distractors: parser.distractors,
            parser_epochs: ptrain.epochs,
            parser_batch: ptrain.batch,
            parser_lr: ptrain.lr,
            width: sgn.width,
            decoder_layers: sgn.decoder_layers,
            decoder_heads: sgn.decoder_heads,
            ffn: sgn.ffn,
            max_len: sgn.max_len,
            tree_layers: sgn.tree_layers,
            max_nodes: DEFAULT_MAX_NODES,
            gat_layers: sgn.gat_layers,
            gat_heads: sgn.gat_heads,
            readout: sgn.readout,
            tree_memory: sgn.tree_memory,
            decoder_tree: sgn.decoder_tree,
            tree_source: TreeSource::Parsed,
            epochs: strain.epochs,
            batch: strain.batch,
            lr: strain.lr,
            lr_decay: strain.lr_decay,
            lambda_gen: sgn.lambda_gen,
            lambda_tree: sgn.lambda_tree,
            use_tree: true,
            train_recipe2tree: true,
            train_img2tree: true,
            train_tree2recipe: true,
            train_decoder: true,
            bleu_mean: BleuMean::Geometric,
            eval_limit: None,
        }
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self::default()
    }

    /// Published full-scale settings.
    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            parser_embed: 400,
            parser_hidden: 400,
            parser_epochs: 50,
            parser_batch: 60,
            parser_lr: 1.0,
            width: 512,
            decoder_layers: 16,
            decoder_heads: 8,
            ffn: 2048,
            gat_heads: 6,
            ..Self::default()
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Full => Self::full(),
        }
    }

    /// Same run with the structure path removed.
    pub fn baseline(&self) -> Self {
        Self { use_tree: false, lambda_tree: 0.0, ..self.clone() }
    }

    /// Parses a flat TOML table. Keys absent from the file come from the
    /// preset named by its `preset` key (desk by default).
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| SgnError::Config(e.to_string()))?;
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(SgnError::Config(format!("config must be flat; `{k}` is a table")));
        }
        let preset = match table.get("preset") {
            Some(v) => v.clone().try_into::<Preset>().map_err(|e| SgnError::Config(e.to_string()))?,
            None => Preset::Desk,
        };
        let base = toml::Table::try_from(Self::for_preset(preset)).map_err(|e| SgnError::Config(e.to_string()))?;
        let mut merged = base;
        for (k, v) in table {
            merged.insert(k, v);
        }
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| SgnError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gen >= 0.0 && self.lambda_tree >= 0.0) {
            return Err(SgnError::Config("lambda_gen and lambda_tree must be >= 0".into()));
        }
        if self.batch == 0 || self.parser_batch == 0 {
            return Err(SgnError::Config("batch sizes must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.parser_lr > 0.0 && self.lr_decay > 0.0) {
            return Err(SgnError::Config("learning rates and decay must be positive".into()));
        }
        if self.provider == ProviderKind::PrecomputedFile && self.feature_file.is_none() {
            return Err(SgnError::Config("provider precomputed-file needs feature_file".into()));
        }
        if self.corpus_path.is_none() {
            self.synthetic().validate()?;
        }
        self.sgn().validate()
    }

    /// Stable hex digest of the full configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", stable_hash(&[json.as_bytes()]))
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            train: self.synthetic_train,
            val: self.synthetic_val,
            test: self.synthetic_test,
            dishes: self.synthetic_dishes,
            min_sentences: self.min_sentences,
            max_sentences: self.synthetic_max_sentences,
            ..SyntheticConfig::default()
        }
    }

    pub fn parser(&self) -> ParserConfig {
        ParserConfig {
            embed: self.parser_embed,
            hidden: self.parser_hidden,
            word_layers: self.parser_layers,
            chunk: self.parser_chunk,
            distractors: self.distractors,
            ..ParserConfig::default()
        }
    }

    pub fn parser_training(&self) -> ParserTraining {
        ParserTraining { epochs: self.parser_epochs, batch: self.parser_batch, lr: self.parser_lr, lr_decay: self.lr_decay }
    }

    pub fn sgn(&self) -> SgnConfig {
        SgnConfig {
            width: self.width,
            decoder_layers: self.decoder_layers,
            decoder_heads: self.decoder_heads,
            ffn: self.ffn,
            max_len: self.max_len,
            tree_layers: self.tree_layers,
            max_nodes: self.max_nodes,
            gat_layers: self.gat_layers,
            gat_heads: self.gat_heads,
            readout: self.readout,
            tree_memory: self.tree_memory,
            use_tree: self.use_tree,
            lambda_gen: self.lambda_gen,
            lambda_tree: if self.use_tree { self.lambda_tree } else { 0.0 },
            train_image: self.train_image,
            decoder_tree: self.decoder_tree,
        }
    }

    pub fn sgn_training(&self) -> SgnTraining {
        SgnTraining {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            lr_decay: self.lr_decay,
            train_img2tree: self.train_img2tree,
            train_tree2recipe: self.train_tree2recipe,
            train_decoder: self.train_decoder,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_file_overrides_preset() {
        let cfg = ExperimentConfig::from_toml("seed = 7\nepochs = 2\nbleu_mean = \"arithmetic\"\n").unwrap();
        assert_eq!((cfg.seed, cfg.epochs, cfg.bleu_mean, cfg.width), (7, 2, BleuMean::Arithmetic, 64));
        let full = ExperimentConfig::from_toml("preset = \"full\"\n").unwrap();
        assert_eq!((full.decoder_layers, full.width, full.parser_batch), (16, 512, 60));
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in ["lambda_tree = -1.0", "batch = 0", "bogus = 1", "[section]\nx = 1", "seed = "] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(SgnError::Config(_))), "{text}");
        }
    }

    #[test]
    fn round_trip_and_fingerprint() {
        let cfg = ExperimentConfig::desk();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
        assert_ne!(cfg.baseline().fingerprint(), cfg.fingerprint());
    }
}
