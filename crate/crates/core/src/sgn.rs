//! Joint model: image features drive the tree generator, the tree encoder
//! embeds a structure, and the decoder writes the recipe from
//! `[tree, image, ingredients]`.
//!
//! Training feeds the decoder the annotated tree and scores the generator
//! on it; inference feeds the decoder the tree generated from the image.
//! With `use_tree` off the tree slot holds a zero token and no structure
//! loss is computed.

use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, EOS};
use crate::corpus::RecipeSample;
use crate::encoders::{render_image, FeatureProvider, IngredientEncoder, TinyConvNet};
use crate::error::{Result, SgnError};
use crate::generator::{content_tokens, generate_recipe, generation_loss, target_sequence, token_log_probs, ConditioningBundle, GenerationResult, TreeMemory, MAX_RECIPE_TOKENS};
use crate::img2tree::{decision_count, target_vector, DecodeMode, TreeGenConfig, TreeGenerator};
use crate::metrics::{avg_length, bleu, perplexity, rouge_l, sentence_bleu, BleuMean, EvalReport};
use crate::nn::layers::Linear;
use crate::nn::transformer::{DecoderConfig, TransformerDecoder};
use crate::nn::{Adam, ParamStore, Tape, Tensor, Var};
use crate::train::{decayed_lr, epoch_order, stream_rng};
use crate::tree2recipe::{GatConfig, Readout, TreeEncoder};
use crate::treekit::{AdjacencyVector, SentenceTree, DEFAULT_MAX_NODES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgnConfig {
    /// Shared width of image, ingredient, tree and decoder vectors.
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
    /// Off: zero tree token, no generator, no structure loss.
    pub use_tree: bool,
    pub lambda_gen: f64,
    pub lambda_tree: f64,
    /// Tree the decoder reads during training.
    pub decoder_tree: DecoderTree,
    /// Learn the image encoder (tiny convnet over rendered images) instead
    /// of reading fixed provider features.
    pub train_image: bool,
}

impl Default for SgnConfig {
    fn default() -> Self {
        Self {
            width: 64,
            decoder_layers: 2,
            decoder_heads: 4,
            ffn: 128,
            max_len: MAX_RECIPE_TOKENS,
            tree_layers: 2,
            max_nodes: DEFAULT_MAX_NODES,
            gat_layers: 2,
            gat_heads: 2,
            readout: Readout::Mean,
            tree_memory: TreeMemory::Pooled,
            use_tree: true,
            lambda_gen: 1.0,
            lambda_tree: 0.5,
            train_image: false,
            decoder_tree: DecoderTree::Generated,
        }
    }
}

impl SgnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gen >= 0.0 && self.lambda_tree >= 0.0) {
            return Err(SgnError::Config("loss weights must be non-negative".into()));
        }
        if self.max_len == 0 || self.max_len > MAX_RECIPE_TOKENS {
            return Err(SgnError::Config(format!("max_len must lie in 1..={MAX_RECIPE_TOKENS}")));
        }
        if self.width == 0 || self.decoder_heads == 0 || self.width % self.decoder_heads != 0 {
            return Err(SgnError::Config("width must be a positive multiple of decoder_heads".into()));
        }
        Ok(())
    }

    /// Configuration with the structure path removed.
    pub fn baseline(&self) -> Self {
        Self { use_tree: false, lambda_tree: 0.0, ..self.clone() }
    }
}

/// Parameter groups that may be frozen during joint training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgnTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub train_img2tree: bool,
    pub train_tree2recipe: bool,
    pub train_decoder: bool,
}

impl Default for SgnTraining {
    fn default() -> Self {
        Self { epochs: 8, batch: 16, lr: 0.001, lr_decay: 0.99, train_img2tree: true, train_tree2recipe: true, train_decoder: true }
    }
}

impl SgnTraining {
    fn trainable(&self, name: &str) -> bool {
        if name.starts_with("img2tree.") {
            self.train_img2tree
        } else if name.starts_with("tree2recipe.") {
            self.train_tree2recipe
        } else {
            self.train_decoder
        }
    }
}

/// Structure fed to the decoder at training time. Scoring the generator
/// always uses the annotation; inference always uses the generated tree.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderTree {
    Annotated,
    /// Greedy output of the generator under the current parameters.
    #[default]
    Generated,
}

/// A recipe prepared for the joint model.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub id: String,
    pub image_key: String,
    /// Provider features; empty when the image encoder is trained.
    pub image: Vec<f64>,
    pub ingredients: Vec<Vec<usize>>,
    /// Sentences joined by separators, ending in EOS.
    pub target: Vec<usize>,
    /// Structure the decoder reads during training.
    pub tree: Option<SentenceTree>,
}

/// Which stored tree trains the structure path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeSource {
    #[default]
    Parsed,
    Planted,
}

/// Encodes samples; targets longer than `max_len` are cut and re-closed
/// with EOS. `provider` is `None` when images go through a trained convnet.
pub fn encode_samples(samples: &[&RecipeSample], vocab: &Vocabulary, provider: Option<&FeatureProvider>, source: TreeSource, max_len: usize) -> Result<Vec<EncodedSample>> {
    samples
        .iter()
        .map(|s| {
            let sentences: Vec<Vec<usize>> = s.instructions.iter().map(|w| vocab.encode(w)).collect();
            let mut target = target_sequence(&sentences);
            if target.len() > max_len {
                target.truncate(max_len - 1);
                target.push(EOS);
            }
            let image = match provider {
                Some(p) => p.image_features(&s.image_key)?,
                None => Vec::new(),
            };
            let tree = match source {
                TreeSource::Parsed => s.parsed_tree.clone(),
                TreeSource::Planted => s.planted_tree.clone(),
            };
            Ok(EncodedSample {
                id: s.id.clone(),
                image_key: s.image_key.clone(),
                image,
                ingredients: s.ingredients.iter().map(|w| vocab.encode(w)).collect(),
                target,
                tree,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SgnStats {
    /// Mean token NLL.
    pub gen_loss: f64,
    /// Mean NLL per structure decision.
    pub tree_loss: f64,
    pub loss: f64,
    pub tokens: usize,
    pub decisions: usize,
    pub samples: usize,
}

impl SgnStats {
    fn absorb(&mut self, other: &SgnStats) {
        let n = self.samples as f64;
        let m = other.samples as f64;
        let w = |a: f64, b: f64| if n + m > 0.0 { (a * n + b * m) / (n + m) } else { 0.0 };
        self.loss = w(self.loss, other.loss);
        self.gen_loss = w(self.gen_loss, other.gen_loss);
        self.tree_loss = w(self.tree_loss, other.tree_loss);
        self.tokens += other.tokens;
        self.decisions += other.decisions;
        self.samples += other.samples;
    }
}

/// Generated output for one evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub id: String,
    pub tree: Option<SentenceTree>,
    pub generation: GenerationResult,
}

#[derive(Clone, Debug)]
pub struct SgnModel {
    pub config: SgnConfig,
    pub store: ParamStore,
    pub adam: Adam,
    pub image_width: usize,
    pub image_net: Option<TinyConvNet>,
    pub image_adapter: Linear,
    pub ingredients: IngredientEncoder,
    pub tree_gen: Option<TreeGenerator>,
    pub tree_enc: Option<TreeEncoder>,
    pub decoder: TransformerDecoder,
    pub epochs_done: usize,
    /// Seed of rendered images for the trained image encoder.
    pub image_seed: u64,
}

impl SgnModel {
    /// `image_width` is the provider's feature width (ignored when the
    /// image encoder is trained).
    pub fn new(config: SgnConfig, vocab: usize, image_width: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, 11);
        let w = config.width;
        let (image_net, image_width) = if config.train_image {
            (Some(TinyConvNet::new(&mut store, "image.convnet", w, &mut rng)), w)
        } else {
            (None, image_width)
        };
        let image_adapter = Linear::new(&mut store, "image.adapter", image_width, w, &mut rng);
        let ingredients = IngredientEncoder::new(&mut store, "ingredients", vocab, w, &mut rng);
        let (tree_gen, tree_enc) = if config.use_tree {
            let g = TreeGenerator::new(&mut store, "img2tree", TreeGenConfig { width: w, layers: config.tree_layers, max_nodes: config.max_nodes }, &mut rng)?;
            let gat = GatConfig { max_nodes: config.max_nodes, width: w, heads: config.gat_heads, layers: config.gat_layers, readout: config.readout, ..Default::default() };
            (Some(g), Some(TreeEncoder::new(&mut store, "tree2recipe", gat, &mut rng)?))
        } else {
            (None, None)
        };
        let dcfg = DecoderConfig { vocab, width: w, layers: config.decoder_layers, heads: config.decoder_heads, ffn: config.ffn, max_len: config.max_len };
        let decoder = TransformerDecoder::new(&mut store, "decoder", dcfg, &mut rng)?;
        Ok(Self {
            config,
            store,
            adam: Adam::new(0.0),
            image_width,
            image_net,
            image_adapter,
            ingredients,
            tree_gen,
            tree_enc,
            decoder,
            epochs_done: 0,
            image_seed: seed,
        })
    }

    fn image_row(&self, tape: &mut Tape, sample: &EncodedSample) -> Result<Var> {
        let raw = match &self.image_net {
            Some(net) => {
                let img = tape.constant(render_image(&sample.image_key, self.image_seed)?);
                net.forward(tape, img)?
            }
            None => {
                if sample.image.len() != self.image_width {
                    return Err(SgnError::Shape(format!("image features of width {} for a model expecting {}", sample.image.len(), self.image_width)));
                }
                tape.constant(Tensor::row_vector(sample.image.clone()))
            }
        };
        let h = self.image_adapter.forward(tape, raw);
        Ok(tape.tanh(h))
    }

    fn tree_tokens(&self, tape: &mut Tape, tree: Option<&SentenceTree>) -> Result<Var> {
        match (&self.tree_enc, tree) {
            (Some(enc), Some(t)) => {
                let e = enc.embed_tree(tape, t)?;
                Ok(match self.config.tree_memory {
                    TreeMemory::Pooled => e.pooled,
                    TreeMemory::Nodes => e.nodes,
                })
            }
            (Some(_), None) => Err(SgnError::Input("structure path enabled but the sample has no tree".into())),
            (None, _) => Ok(tape.constant(Tensor::zeros(1, self.config.width))),
        }
    }

    fn memory(&self, tape: &mut Tape, image: Var, sample: &EncodedSample, tree: Option<&SentenceTree>) -> Result<Var> {
        let ing = self.ingredients.features(tape, &sample.ingredients)?;
        let t = self.tree_tokens(tape, tree)?;
        Ok(ConditioningBundle::assemble(tape, t, image, ing)?.memory)
    }

    /// Joint loss of a batch under teacher forcing: per-token mean decoder
    /// NLL plus the weighted per-decision structure NLL.
    pub fn batch_loss(&self, tape: &mut Tape, batch: &[&EncodedSample]) -> Result<(Var, SgnStats)> {
        if batch.is_empty() {
            return Err(SgnError::Input("empty batch".into()));
        }
        let mut images = Vec::with_capacity(batch.len());
        let mut gen_terms = Vec::with_capacity(batch.len());
        let mut tokens = 0;
        for s in batch {
            let img = self.image_row(tape, s)?;
            images.push(img);
            let generated = match (&self.tree_gen, self.config.decoder_tree) {
                (Some(g), DecoderTree::Generated) => Some(g.generate(&self.store, &tape.value(img).data, DecodeMode::Greedy, 0)?),
                _ => None,
            };
            let memory = self.memory(tape, img, s, generated.as_ref().or(s.tree.as_ref()))?;
            let (nll, n) = generation_loss(&self.decoder, tape, memory, &s.target)?;
            gen_terms.push(nll);
            tokens += n;
        }
        let gen_sum = sum_vars(tape, &gen_terms);
        let gen = tape.scale(gen_sum, 1.0 / tokens as f64);
        let mut stats = SgnStats { tokens, samples: batch.len(), ..Default::default() };
        let mut loss = tape.scale(gen, self.config.lambda_gen);
        if let (Some(g), true) = (&self.tree_gen, self.config.lambda_tree > 0.0) {
            let vectors: Vec<AdjacencyVector> = batch
                .iter()
                .map(|s| match &s.tree {
                    Some(t) => target_vector(t, self.config.max_nodes),
                    None => Err(SgnError::Input(format!("sample {} has no tree to score", s.id))),
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&AdjacencyVector> = vectors.iter().collect();
            let decisions: usize = vectors.iter().map(|v| decision_count(v, self.config.max_nodes)).sum();
            let f = tape.concat_rows(&images);
            let ll = g.log_likelihood(tape, f, &refs)?;
            let total = tape.sum_all(ll);
            let tree = tape.scale(total, -1.0 / decisions as f64);
            stats.tree_loss = tape.scalar(tree);
            stats.decisions = decisions;
            let weighted = tape.scale(tree, self.config.lambda_tree);
            loss = tape.add(loss, weighted);
        }
        stats.gen_loss = tape.scalar(gen);
        stats.loss = tape.scalar(loss);
        Ok((loss, stats))
    }

    /// One optimizer step on `batch`.
    pub fn train_batch(&mut self, batch: &[&EncodedSample], opts: &SgnTraining) -> Result<SgnStats> {
        let (grads, stats) = {
            let mut tape = Tape::new(&self.store);
            let (loss, stats) = self.batch_loss(&mut tape, batch)?;
            (tape.backward(loss), stats)
        };
        if !stats.loss.is_finite() || !grads.is_finite() {
            return Err(SgnError::Training(format!("joint loss became non-finite ({})", stats.loss)));
        }
        self.adam.step_filtered(&mut self.store, &grads, |n| opts.trainable(n));
        Ok(stats)
    }

    /// One epoch in the seeded order; `on_batch` sees every step's stats.
    pub fn train_epoch(&mut self, data: &[EncodedSample], opts: &SgnTraining, seed: u64, mut on_batch: impl FnMut(&SgnStats)) -> Result<SgnStats> {
        let epoch = self.epochs_done;
        self.adam.lr = decayed_lr(opts.lr, opts.lr_decay, epoch);
        let order = epoch_order(data.len(), seed, epoch);
        let mut acc = SgnStats::default();
        for chunk in order.chunks(opts.batch.max(1)) {
            let batch: Vec<&EncodedSample> = chunk.iter().map(|&i| &data[i]).collect();
            let stats = self.train_batch(&batch, opts)?;
            on_batch(&stats);
            acc.absorb(&stats);
        }
        self.epochs_done += 1;
        Ok(acc)
    }

    /// Mean losses without updating parameters.
    pub fn evaluate_loss(&self, data: &[EncodedSample], batch: usize) -> Result<SgnStats> {
        let mut acc = SgnStats::default();
        for chunk in data.chunks(batch.max(1)) {
            let refs: Vec<&EncodedSample> = chunk.iter().collect();
            let mut tape = Tape::new(&self.store);
            acc.absorb(&self.batch_loss(&mut tape, &refs)?.1);
        }
        Ok(acc)
    }

    pub fn image_features(&self, sample: &EncodedSample) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store);
        let v = self.image_row(&mut tape, sample)?;
        Ok(tape.value(v).data.clone())
    }

    /// Greedy structure from the image, or `None` without a structure path.
    pub fn generate_tree(&self, sample: &EncodedSample) -> Result<Option<SentenceTree>> {
        match &self.tree_gen {
            Some(g) => Ok(Some(g.generate(&self.store, &self.image_features(sample)?, DecodeMode::Greedy, 0)?)),
            None => Ok(None),
        }
    }

    /// Memory tensor for decoding with the given tree.
    pub fn memory_tensor(&self, sample: &EncodedSample, tree: Option<&SentenceTree>) -> Result<Tensor> {
        let mut tape = Tape::new(&self.store);
        let img = self.image_row(&mut tape, sample)?;
        let m = self.memory(&mut tape, img, sample, tree)?;
        Ok(tape.value(m).clone())
    }

    /// Generates a tree from the image, then the recipe.
    pub fn generate(&self, sample: &EncodedSample, max_len: usize) -> Result<SampleOutput> {
        let tree = self.generate_tree(sample)?;
        let memory = self.memory_tensor(sample, tree.as_ref())?;
        let generation = generate_recipe(&self.decoder, &self.store, &memory, max_len)?;
        Ok(SampleOutput { id: sample.id.clone(), tree, generation })
    }

    /// Teacher-forced log-probabilities of the reference given the
    /// generated (or zero) tree.
    pub fn reference_log_probs(&self, sample: &EncodedSample, tree: Option<&SentenceTree>) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store);
        let img = self.image_row(&mut tape, sample)?;
        let m = self.memory(&mut tape, img, sample, tree)?;
        let lp = token_log_probs(&self.decoder, &mut tape, m, &sample.target)?;
        Ok(tape.value(lp).data.clone())
    }

    /// Scores the model on `data` with generated structures. Metrics use
    /// content tokens only (no separators or EOS).
    pub fn evaluate(&self, data: &[EncodedSample], split: &str, mean: BleuMean) -> Result<(EvalReport, Vec<SampleOutput>)> {
        let mut log_probs = Vec::new();
        let mut outputs = Vec::with_capacity(data.len());
        let mut cands = Vec::with_capacity(data.len());
        let mut refs = Vec::with_capacity(data.len());
        for s in data {
            let out = self.generate(s, self.config.max_len)?;
            log_probs.extend(self.reference_log_probs(s, out.tree.as_ref())?);
            cands.push(content_tokens(&out.generation.tokens));
            refs.push(content_tokens(&s.target));
            outputs.push(out);
        }
        let report = EvalReport {
            split: split.to_string(),
            samples: data.len(),
            perplexity: perplexity(&log_probs)?,
            bleu: bleu(&cands, &refs, mean)?,
            sentence_bleu: sentence_bleu(&cands, &refs, mean)?,
            rouge_l: rouge_l(&cands, &refs)?,
            avg_length: avg_length(&cands)?,
            reference_length: avg_length(&refs)?,
            bleu_mean: mean,
        };
        Ok((report, outputs))
    }
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Var {
    let mut s = vars[0];
    for &v in &vars[1..] {
        s = tape.add(s, v);
    }
    s
}
