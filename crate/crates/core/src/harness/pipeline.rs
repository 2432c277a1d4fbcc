//! Three-stage run: parser training and annotation, joint training, and
//! evaluation with generated structures.
//!
//! Every artifact lives in `<root>/<fingerprint>/` and carries the
//! fingerprint in its file name. Checkpoints are written after every
//! epoch; a rerun with the same configuration resumes from them. All
//! randomness is derived from the seed and the epoch index, so a resumed
//! run follows the same trajectory as an uninterrupted one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::corpus::{build_vocabulary, load_recipe1m, make_synthetic_corpus, split, write_corpus, Partition, RecipeSample, TokenizerConfig, Vocabulary};
use crate::encoders::FeatureProvider;
use crate::error::{Result, SgnError};
use crate::metrics::EvalReport;
use crate::nn::checkpoint::Checkpoint;
use crate::recipe2tree::ParserModel;
use crate::sgn::{encode_samples, EncodedSample, SampleOutput, SgnModel};
use crate::train::decayed_lr;

pub const ARTIFACTS_ENV: &str = "SGN_ARTIFACTS";

/// `explicit`, else `$SGN_ARTIFACTS`, else `./artifacts`.
pub fn artifact_root(explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(ARTIFACTS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("artifacts")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Parser,
    Joint,
    Evaluate,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub fingerprint: String,
    pub stage: Stage,
    pub parser_epochs: usize,
    pub joint_epochs: usize,
    /// `running`, `interrupted`, `failed` or `done`.
    pub status: String,
    pub error: Option<String>,
}

/// One row of the loss curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub gen_loss: f64,
    pub tree_loss: f64,
    pub qt_accuracy: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop after this many joint epochs in total, leaving a resumable
    /// state (for interruption tests).
    pub stop_after_joint_epochs: Option<usize>,
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub report: Option<EvalReport>,
    pub history: Vec<CurveRow>,
    pub state: RunState,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub fingerprint: String,
    pub dir: PathBuf,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, root: &Path) -> Result<Self> {
        config.validate()?;
        let fingerprint = config.fingerprint();
        let dir = root.join(&fingerprint);
        fs::create_dir_all(&dir)?;
        let exp = Self { config, fingerprint, dir };
        fs::write(exp.path("config", "toml"), exp.config.to_toml())?;
        Ok(exp)
    }

    /// `<dir>/<stem>-<fingerprint>.<ext>`.
    pub fn path(&self, stem: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{stem}-{}.{ext}", self.fingerprint))
    }

    fn log(&self, opts: &RunOptions, msg: impl AsRef<str>) {
        if opts.verbose {
            eprintln!("[{}] {}", &self.fingerprint[..8], msg.as_ref());
        }
    }

    pub fn load_corpus(&self) -> Result<Vec<RecipeSample>> {
        match &self.config.corpus_path {
            Some(p) => load_recipe1m(p, self.config.min_sentences),
            None => make_synthetic_corpus(&self.config.synthetic(), self.config.seed),
        }
    }

    /// Builds the training-split vocabulary and stores it next to the
    /// checkpoints.
    pub fn vocabulary(&self, corpus: &[RecipeSample]) -> Result<Vocabulary> {
        let v = build_vocabulary(corpus, self.config.min_count, TokenizerConfig::default());
        fs::write(self.path("vocab", "json"), serde_json::to_string(&v).expect("vocabulary serializes"))?;
        Ok(v)
    }

    pub fn load_vocabulary(&self) -> Result<Vocabulary> {
        let text = fs::read_to_string(self.path("vocab", "json"))?;
        let mut v: Vocabulary = serde_json::from_str(&text).map_err(|e| SgnError::Checkpoint(format!("bad vocabulary file: {e}")))?;
        v.reindex();
        Ok(v)
    }

    /// Fixed image features, or `None` when the image encoder is trained.
    pub fn provider(&self) -> Result<Option<FeatureProvider>> {
        if self.config.train_image {
            return Ok(None);
        }
        Ok(Some(FeatureProvider::new(self.config.provider, self.config.width, self.config.seed, self.config.feature_file.as_deref())?))
    }

    fn write_state(&self, state: &RunState) -> Result<()> {
        fs::write(self.path("state", "json"), serde_json::to_string_pretty(state).expect("state serializes"))?;
        Ok(())
    }

    pub fn read_state(&self) -> Result<Option<RunState>> {
        let p = self.path("state", "json");
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(p)?;
        Ok(Some(serde_json::from_str(&text).map_err(|e| SgnError::Checkpoint(format!("bad state file: {e}")))?))
    }

    fn write_curves(&self, rows: &[CurveRow]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path("loss", "csv")).map_err(|e| SgnError::Io(e.into()))?;
        for r in rows {
            w.serialize(r).map_err(|e| SgnError::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_curves(&self) -> Result<Vec<CurveRow>> {
        let mut r = csv::Reader::from_path(self.path("loss", "csv")).map_err(|e| SgnError::Io(e.into()))?;
        r.deserialize().map(|row| row.map_err(|e| SgnError::Io(e.into()))).collect()
    }

    fn metadata(&self, stage: &str, epochs: usize, history: &[CurveRow], extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "stage": stage,
            "epochs_done": epochs,
            "config": self.config,
            "history": history,
            "rng": "all streams derived from (seed, epoch)",
            "extra": extra,
        })
    }

    fn read_checkpoint(&self, stem: &str) -> Result<Option<(Checkpoint, usize, Vec<CurveRow>)>> {
        let p = self.path(stem, "ckpt");
        if !p.exists() {
            return Ok(None);
        }
        let ck = Checkpoint::load(&p)?;
        if ck.fingerprint != self.fingerprint {
            return Err(SgnError::Checkpoint(format!("{} belongs to run {}", p.display(), ck.fingerprint)));
        }
        let epochs = ck.metadata["epochs_done"].as_u64().ok_or_else(|| SgnError::Checkpoint("epochs_done missing".into()))? as usize;
        let history: Vec<CurveRow> = serde_json::from_value(ck.metadata["history"].clone()).map_err(|e| SgnError::Checkpoint(e.to_string()))?;
        Ok(Some((ck, epochs, history)))
    }

    fn parser_data(corpus: &[&RecipeSample], vocab: &Vocabulary) -> Vec<Vec<Vec<usize>>> {
        corpus.iter().map(|s| s.instructions.iter().map(|w| vocab.encode(w)).collect()).collect()
    }

    /// Parser from its checkpoint, or freshly initialized when none exists.
    pub fn load_parser(&self, vocab: &Vocabulary) -> Result<(ParserModel, Vec<CurveRow>)> {
        let mut model = ParserModel::new(vocab.len(), self.config.parser(), self.config.seed)?;
        let mut history = Vec::new();
        if let Some((ck, epochs, h)) = self.read_checkpoint("parser")? {
            ck.restore(&mut model.store, &mut model.adam)?;
            model.epochs_done = epochs;
            history = h;
        }
        Ok((model, history))
    }

    /// Stage 1: trains (or resumes) the parser, checkpointing every epoch.
    pub fn train_parser(&self, corpus: &[RecipeSample], vocab: &Vocabulary, opts: &RunOptions) -> Result<(ParserModel, Vec<CurveRow>)> {
        let (mut model, mut history) = self.load_parser(vocab)?;
        if !self.config.train_recipe2tree {
            return Ok((model, history));
        }
        let train = Self::parser_data(&split(corpus, Partition::Train), vocab);
        let popts = self.config.parser_training();
        while model.epochs_done < popts.epochs {
            let epoch = model.epochs_done;
            let stats = model.train_epoch(&train, &popts, self.config.seed)?;
            history.push(CurveRow {
                stage: "parser".into(),
                epoch,
                lr: decayed_lr(popts.lr, popts.lr_decay, epoch),
                loss: stats.loss,
                gen_loss: 0.0,
                tree_loss: 0.0,
                qt_accuracy: stats.accuracy,
            });
            self.log(opts, format!("parser epoch {epoch}: loss {:.4} accuracy {:.3}", stats.loss, stats.accuracy));
            let meta = self.metadata("parser", model.epochs_done, &history, serde_json::json!({"vocab": vocab.len()}));
            Checkpoint::capture(&self.fingerprint, meta, &model.store, &model.adam).save(&self.path("parser", "ckpt"))?;
            self.write_curves(&history)?;
        }
        Ok((model, history))
    }

    /// Fills `parsed_tree` for every sample and writes the annotated corpus.
    pub fn annotate(&self, parser: &ParserModel, corpus: &mut [RecipeSample], vocab: &Vocabulary) -> Result<()> {
        let all: Vec<&RecipeSample> = corpus.iter().collect();
        let data = Self::parser_data(&all, vocab);
        let trees = parser.annotate(&data, 32)?;
        for (s, t) in corpus.iter_mut().zip(trees) {
            s.parsed_tree = Some(t);
        }
        write_corpus(corpus, &self.path("annotated", "json"))
    }

    pub fn encode(&self, samples: &[&RecipeSample], vocab: &Vocabulary, provider: Option<&FeatureProvider>) -> Result<Vec<EncodedSample>> {
        encode_samples(samples, vocab, provider, self.config.tree_source, self.config.max_len)
    }

    fn image_width(&self, provider: Option<&FeatureProvider>) -> usize {
        provider.map_or(self.config.width, FeatureProvider::width)
    }

    /// Joint model from its checkpoint, or freshly initialized.
    pub fn load_sgn(&self, vocab: &Vocabulary, provider: Option<&FeatureProvider>) -> Result<(SgnModel, Vec<CurveRow>)> {
        let mut model = SgnModel::new(self.config.sgn(), vocab.len(), self.image_width(provider), self.config.seed)?;
        let mut history = Vec::new();
        if let Some((ck, epochs, h)) = self.read_checkpoint("sgn")? {
            ck.restore(&mut model.store, &mut model.adam)?;
            model.epochs_done = epochs;
            history = h;
        }
        Ok((model, history))
    }

    /// Stage 2: joint training with per-epoch checkpoints. Returns `None`
    /// when stopped early by `opts`.
    pub fn train_sgn(&self, corpus: &[RecipeSample], vocab: &Vocabulary, provider: Option<&FeatureProvider>, prior: &[CurveRow], opts: &RunOptions) -> Result<(SgnModel, Vec<CurveRow>, bool)> {
        let (mut model, saved) = self.load_sgn(vocab, provider)?;
        let mut history: Vec<CurveRow> = if saved.is_empty() { prior.to_vec() } else { saved };
        let train = self.encode(&split(corpus, Partition::Train), vocab, provider)?;
        let topts = self.config.sgn_training();
        while model.epochs_done < topts.epochs {
            if opts.stop_after_joint_epochs.is_some_and(|n| model.epochs_done >= n) {
                return Ok((model, history, true));
            }
            let epoch = model.epochs_done;
            let stats = model.train_epoch(&train, &topts, self.config.seed, |_| {})?;
            history.push(CurveRow {
                stage: "joint".into(),
                epoch,
                lr: decayed_lr(topts.lr, topts.lr_decay, epoch),
                loss: stats.loss,
                gen_loss: stats.gen_loss,
                tree_loss: stats.tree_loss,
                qt_accuracy: 0.0,
            });
            self.log(opts, format!("joint epoch {epoch}: loss {:.4} gen {:.4} tree {:.4}", stats.loss, stats.gen_loss, stats.tree_loss));
            let meta = self.metadata("joint", model.epochs_done, &history, serde_json::json!({"vocab": vocab.len()}));
            Checkpoint::capture(&self.fingerprint, meta, &model.store, &model.adam).save(&self.path("sgn", "ckpt"))?;
            self.write_curves(&history)?;
        }
        Ok((model, history, false))
    }

    /// Stage 3: scores the test split with generated structures, writing
    /// the report and the generated recipes.
    pub fn evaluate(&self, model: &SgnModel, corpus: &[RecipeSample], vocab: &Vocabulary, provider: Option<&FeatureProvider>) -> Result<(EvalReport, Vec<SampleOutput>)> {
        let mut test = split(corpus, Partition::Test);
        if let Some(n) = self.config.eval_limit {
            test.truncate(n);
        }
        if test.is_empty() {
            return Err(SgnError::Input("evaluation split is empty".into()));
        }
        let data = self.encode(&test, vocab, provider)?;
        let (report, outputs) = model.evaluate(&data, Partition::Test.as_str(), self.config.bleu_mean)?;
        fs::write(self.path("report", "json"), report.to_json())?;
        let mut f = std::io::BufWriter::new(fs::File::create(self.path("samples", "txt"))?);
        for o in &outputs {
            let tree = o.tree.as_ref().map_or("-".to_string(), |t| t.to_string());
            writeln!(f, "{}\t{}\t{}", o.id, tree, vocab.detokenize(&o.generation.tokens))?;
        }
        f.flush()?;
        Ok((report, outputs))
    }

    /// Runs every stage, resuming from existing checkpoints.
    pub fn run(&self, opts: &RunOptions) -> Result<PipelineOutcome> {
        let mut state = RunState {
            fingerprint: self.fingerprint.clone(),
            stage: Stage::Parser,
            parser_epochs: 0,
            joint_epochs: 0,
            status: "running".into(),
            error: None,
        };
        let result = self.run_stages(opts, &mut state);
        match &result {
            Ok(o) if o.report.is_none() => state.status = "interrupted".into(),
            Ok(_) => {
                state.stage = Stage::Done;
                state.status = "done".into();
            }
            Err(e) => {
                state.status = "failed".into();
                state.error = Some(e.to_string());
            }
        }
        self.write_state(&state)?;
        result.map(|mut o| {
            o.state = state;
            o
        })
    }

    fn run_stages(&self, opts: &RunOptions, state: &mut RunState) -> Result<PipelineOutcome> {
        let mut corpus = self.load_corpus()?;
        let vocab = self.vocabulary(&corpus)?;
        self.write_state(state)?;
        let (parser, parser_history) = self.train_parser(&corpus, &vocab, opts)?;
        state.parser_epochs = parser.epochs_done;
        self.annotate(&parser, &mut corpus, &vocab)?;

        state.stage = Stage::Joint;
        self.write_state(state)?;
        let provider = self.provider()?;
        let (model, history, stopped) = self.train_sgn(&corpus, &vocab, provider.as_ref(), &parser_history, opts)?;
        state.joint_epochs = model.epochs_done;
        if stopped {
            return Ok(PipelineOutcome { report: None, history, state: state.clone() });
        }
        if history.is_empty() {
            self.write_curves(&history)?;
        }

        state.stage = Stage::Evaluate;
        self.write_state(state)?;
        let (report, _) = self.evaluate(&model, &corpus, &vocab, provider.as_ref())?;
        self.log(opts, format!("perplexity {:.3} bleu {:.4} rouge-l {:.4} length {:.1}", report.perplexity, report.bleu, report.rouge_l, report.avg_length));
        Ok(PipelineOutcome { report: Some(report), history, state: state.clone() })
    }
}
