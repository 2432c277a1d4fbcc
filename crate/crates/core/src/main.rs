use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sgn::corpus::{recipes_to_json, split_words, TokenizerConfig};
use sgn::encoders::write_feature_file;
use sgn::harness::{artifact_root, Experiment, ExperimentConfig, RunOptions};
use sgn::metrics::{compare_reports, table_header, EvalReport};
use sgn::sgn::EncodedSample;
use sgn::treekit::encode_tree;
use sgn::{Result, SgnError};

/// Structure-aware recipe generation.
///
/// Artifacts go to `$SGN_ARTIFACTS/<fingerprint>/` (default `./artifacts`).
#[derive(Parser)]
#[command(name = "sgn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat TOML config file; desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides in TOML syntax, e.g. `--set epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop the structure path (zero tree token, no structure loss).
    #[arg(long)]
    baseline: bool,
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus as Recipe1M-style JSON.
    MakeCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the sentence-level parser (stage 1).
    TrainParser {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Parse recipes into sentence trees with the trained parser.
    Parse {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write the annotated corpus here instead of printing trees.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        limit: usize,
    },
    /// Train the joint model (stage 2).
    TrainSgn {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a sentence tree from an image key.
    GenTree {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        key: String,
    },
    /// Generate a recipe for an image key.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        key: String,
        /// Comma-separated ingredients; taken from the corpus when omitted.
        #[arg(long)]
        ingredients: Option<String>,
    },
    /// Score the trained model on the test split (stage 3).
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print per-metric deltas `b - a` between two reports.
    Compare { a: PathBuf, b: PathBuf },
    /// Run all stages, resuming from checkpoints.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write provider features for every image key of the corpus.
    ExportFeatures {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut text = match &args.config {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| SgnError::Config(format!("override `{o}` is not key=value")))?;
        text.push_str(&format!("\n{} = {}\n", k.trim(), v.trim()));
    }
    if let Some(seed) = args.seed {
        text.push_str(&format!("\nseed = {seed}\n"));
    }
    let cfg = ExperimentConfig::from_toml(&text)?;
    Ok(if args.baseline { cfg.baseline() } else { cfg })
}

fn experiment(args: &ConfigArgs) -> Result<(Experiment, RunOptions)> {
    let exp = Experiment::new(load_config(args)?, &artifact_root(None))?;
    if args.verbose {
        eprintln!("artifacts: {}", exp.dir.display());
    }
    Ok((exp, RunOptions { verbose: args.verbose, ..Default::default() }))
}

fn find_sample(data: &[EncodedSample], key: &str) -> Option<EncodedSample> {
    data.iter().find(|s| s.image_key == key).cloned()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeCorpus { cfg, out } => {
            let exp = Experiment::new(load_config(&cfg)?, &artifact_root(None))?;
            let corpus = exp.load_corpus()?;
            std::fs::write(&out, recipes_to_json(&corpus))?;
            println!("wrote {} recipes to {}", corpus.len(), out.display());
        }
        Command::TrainParser { cfg } => {
            let (exp, opts) = experiment(&cfg)?;
            let corpus = exp.load_corpus()?;
            let vocab = exp.vocabulary(&corpus)?;
            let (_, history) = exp.train_parser(&corpus, &vocab, &opts)?;
            for r in history {
                println!("epoch {}: loss {:.4} accuracy {:.3}", r.epoch, r.loss, r.qt_accuracy);
            }
        }
        Command::Parse { cfg, out, limit } => {
            let (exp, _) = experiment(&cfg)?;
            let mut corpus = exp.load_corpus()?;
            let vocab = exp.vocabulary(&corpus)?;
            let (parser, _) = exp.load_parser(&vocab)?;
            exp.annotate(&parser, &mut corpus, &vocab)?;
            match out {
                Some(p) => {
                    std::fs::write(&p, recipes_to_json(&corpus))?;
                    println!("wrote {} annotated recipes to {}", corpus.len(), p.display());
                }
                None => {
                    for s in corpus.iter().take(limit) {
                        println!("{}\t{}", s.id, s.parsed_tree.as_ref().expect("annotated"));
                    }
                }
            }
        }
        Command::TrainSgn { cfg } => {
            let (exp, opts) = experiment(&cfg)?;
            let mut corpus = exp.load_corpus()?;
            let vocab = exp.vocabulary(&corpus)?;
            let (parser, prior) = exp.load_parser(&vocab)?;
            exp.annotate(&parser, &mut corpus, &vocab)?;
            let provider = exp.provider()?;
            let (_, history, _) = exp.train_sgn(&corpus, &vocab, provider.as_ref(), &prior, &opts)?;
            for r in history.iter().filter(|r| r.stage == "joint") {
                println!("epoch {}: loss {:.4} gen {:.4} tree {:.4}", r.epoch, r.loss, r.gen_loss, r.tree_loss);
            }
        }
        Command::GenTree { cfg, key } => {
            let (exp, _) = experiment(&cfg)?;
            let vocab = exp.load_vocabulary()?;
            let provider = exp.provider()?;
            let (model, _) = exp.load_sgn(&vocab, provider.as_ref())?;
            let sample = EncodedSample {
                id: key.clone(),
                image: match &provider {
                    Some(p) => p.image_features(&key)?,
                    None => Vec::new(),
                },
                image_key: key,
                ingredients: Vec::new(),
                target: Vec::new(),
                tree: None,
            };
            match model.generate_tree(&sample)? {
                Some(t) => println!("{t}\n{}", encode_tree(&t)),
                None => println!("this configuration has no structure path"),
            }
        }
        Command::Generate { cfg, key, ingredients } => {
            let (exp, _) = experiment(&cfg)?;
            let vocab = exp.load_vocabulary()?;
            let provider = exp.provider()?;
            let (model, _) = exp.load_sgn(&vocab, provider.as_ref())?;
            let corpus = exp.load_corpus()?;
            let all: Vec<_> = corpus.iter().collect();
            let known = find_sample(&exp.encode(&all, &vocab, provider.as_ref())?, &key);
            let mut sample = match known {
                Some(s) => s,
                None => EncodedSample {
                    id: key.clone(),
                    image: match &provider {
                        Some(p) => p.image_features(&key)?,
                        None => Vec::new(),
                    },
                    image_key: key.clone(),
                    ingredients: Vec::new(),
                    target: Vec::new(),
                    tree: None,
                },
            };
            if let Some(list) = ingredients {
                sample.ingredients = list.split(',').map(|i| vocab.encode(&split_words(i, TokenizerConfig::default()))).collect();
            }
            let out = model.generate(&sample, model.config.max_len)?;
            if let Some(t) = &out.tree {
                println!("tree: {t}");
            }
            for (i, s) in out.generation.sentences.iter().enumerate() {
                println!("{}. {}", i + 1, vocab.detokenize(s));
            }
        }
        Command::Evaluate { cfg } => {
            let (exp, _) = experiment(&cfg)?;
            let corpus = exp.load_corpus()?;
            let vocab = exp.load_vocabulary()?;
            let provider = exp.provider()?;
            let (model, _) = exp.load_sgn(&vocab, provider.as_ref())?;
            let (report, _) = exp.evaluate(&model, &corpus, &vocab, provider.as_ref())?;
            println!("{}\n{}", table_header(), report.table_row(if exp.config.use_tree { "+SGN" } else { "baseline" }));
            println!("report: {}", exp.path("report", "json").display());
        }
        Command::Compare { a, b } => {
            let ra = EvalReport::from_json(&std::fs::read_to_string(a)?)?;
            let rb = EvalReport::from_json(&std::fs::read_to_string(b)?)?;
            let d = compare_reports(&ra, &rb)?;
            println!("{}\n{}\n{}", table_header(), ra.table_row("a"), rb.table_row("b"));
            println!("delta perplexity {:+.2}  BLEU {:+.2}  ROUGE-L {:+.2}  length {:+.1}", d.perplexity, 100.0 * d.bleu, 100.0 * d.rouge_l, d.avg_length);
            println!(
                "reference length {:.1}: a off by {:.1}, b off by {:.1}, b closer by {:.1}",
                d.reference_length, d.length_gap_a, d.length_gap_b, d.closer_by
            );
        }
        Command::Pipeline { cfg } => {
            let (exp, opts) = experiment(&cfg)?;
            let outcome = exp.run(&opts)?;
            if let Some(r) = outcome.report {
                println!("{}\n{}", table_header(), r.table_row(if exp.config.use_tree { "+SGN" } else { "baseline" }));
            }
            println!("artifacts: {}", exp.dir.display());
        }
        Command::ExportFeatures { cfg, out } => {
            let (exp, _) = experiment(&cfg)?;
            let provider = exp.provider()?.ok_or_else(|| SgnError::Config("a trained image encoder has no fixed features to export".into()))?;
            let corpus = exp.load_corpus()?;
            let mut keys: Vec<&str> = corpus.iter().map(|s| s.image_key.as_str()).collect();
            keys.sort_unstable();
            keys.dedup();
            let rows = keys.iter().map(|k| Ok((k.to_string(), provider.image_features(k)?))).collect::<Result<Vec<_>>>()?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(&out)?);
            write_feature_file(&mut f, provider.width(), &rows)?;
            println!("wrote {} feature rows of width {} to {}", rows.len(), provider.width(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

