//! Command-line front end over the library: train, evaluate, decode,
//! compare, and synth. Every numeric behavior lives in the library; this
//! file only parses arguments and moves bytes.

use adapbridge::corpus::{save_corpus, synth_corpus, TextDialogue, Vocabulary};
use adapbridge::model::Model;
use adapbridge::sampler::Strategy;
use adapbridge::trainer::{
    best_checkpoint_path, compare, decode_lines, evaluate, train, ConfigMap, DataSource,
    TrainConfig,
};
use adapbridge::Result;
use clap::{Args, Parser, Subcommand};
use std::io::Read as _;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "adapbridge",
    about = "Seq2seq training lab for decoder-input sampling strategies",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand that builds a run config. Trailing
/// `section.key=value` arguments override both defaults and the file.
#[derive(Args)]
struct ConfigArgs {
    /// Flat key-value config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Dotted-name overrides, e.g. `model.model_dim=64`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn build(&self, extra: &[String]) -> Result<TrainConfig> {
        let mut map = match &self.config {
            Some(path) => ConfigMap::from_file(path)?,
            None => ConfigMap::default(),
        };
        for o in &self.overrides {
            map.set(o)?;
        }
        for o in extra {
            map.set(o)?;
        }
        map.into_config()
    }
}

#[derive(Args)]
struct DecodeTuning {
    /// Beam width for search decoding.
    #[arg(long, value_name = "N")]
    beam: Option<usize>,

    /// Greedy decoding (equivalent to a width-1 beam).
    #[arg(long)]
    greedy: bool,
}

impl DecodeTuning {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Some(b) = self.beam {
            o.push(format!("eval.beam_width={}", b));
        }
        if self.greedy {
            o.push("eval.greedy=true".to_string());
        }
        o
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and epoch log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,

        /// Decoder-input strategy: teacher, scheduled, or adapbridge.
        #[arg(long)]
        strategy: Option<Strategy>,

        /// Run seed; fixes shuffling, gates, dropout, and initialization.
        #[arg(long)]
        seed: Option<u64>,

        /// Number of training epochs.
        #[arg(long)]
        epochs: Option<usize>,

        /// Checkpoint output path.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },

    /// Score a checkpoint against a reference corpus.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,

        /// Trained checkpoint to score.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,

        /// Reference corpus (context TAB response lines).
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,

        #[command(flatten)]
        tuning: DecodeTuning,

        /// Write the metric block here instead of stdout.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },

    /// Generate one response per context line.
    Decode {
        #[command(flatten)]
        config: ConfigArgs,

        /// Trained checkpoint to decode with.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,

        /// Context lines, one per line; stdin when omitted.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,

        #[command(flatten)]
        tuning: DecodeTuning,

        /// Write responses here instead of stdout.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },

    /// Train several strategies on shared data and tabulate metrics.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,

        /// Comma-separated strategies; defaults to all three.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<Strategy>,

        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,

        /// Write the table here instead of stdout.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },

    /// Write a synthetic dialogue corpus.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,

        /// Corpus seed (shorthand for synth.seed).
        #[arg(long)]
        seed: Option<u64>,

        /// Corpus output path.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| adapbridge::Error::io(path.display().to_string(), e)),
        None => {
            print!("{}", text);
            Ok(())
        }
    }
}

fn load_checkpoint(path: &PathBuf) -> Result<(Model<f32>, Vocabulary)> {
    Model::load(path)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, strategy, seed, epochs, out } => {
            let mut extra = Vec::new();
            if let Some(s) = strategy {
                extra.push(format!("train.strategy={}", s));
            }
            if let Some(s) = seed {
                extra.push(format!("train.seed={}", s));
            }
            if let Some(e) = epochs {
                extra.push(format!("train.epochs={}", e));
            }
            if let Some(p) = &out {
                extra.push(format!("train.checkpoint={}", p.display()));
            }
            let cfg = config.build(&extra)?;
            let outcome = train(&cfg)?;
            let last = outcome.logs.last().expect("at least one epoch");
            println!(
                "trained {} for {} epochs: final mean nll {:.4}, replaced fraction {:.4}",
                cfg.strategy, cfg.epochs, last.mean_train_nll, last.replaced_fraction
            );
            if let Some(ppl) = outcome.best_val_ppl {
                println!(
                    "best validation ppl {:.3}; best checkpoint {}",
                    ppl,
                    best_checkpoint_path(&cfg.checkpoint).display()
                );
            }
            println!("checkpoint {}", cfg.checkpoint.display());
            println!("log {}", cfg.log_path().display());
            Ok(())
        }
        Command::Evaluate { config, checkpoint, corpus, tuning, out } => {
            let cfg = config.build(&tuning.overrides())?;
            let (model, vocab) = load_checkpoint(&checkpoint)?;
            let text: Vec<TextDialogue> = adapbridge::corpus::load_corpus(&corpus)?;
            let mut groups = adapbridge::corpus::encode_corpus(&text, &vocab);
            let max_ctx = model.config.max_sequence_length;
            for g in groups.iter_mut() {
                g.context.truncate(max_ctx);
                for r in g.responses.iter_mut() {
                    r.truncate(max_ctx - 1);
                }
                g.responses.retain(|r| !r.is_empty());
            }
            let mut opts = cfg.eval.clone();
            opts.batch_tokens = cfg.batch_tokens;
            let report = evaluate(&model, &groups, &opts)?;
            write_or_print(&out, &report.to_key_value())
        }
        Command::Decode { config, checkpoint, input, tuning, out } => {
            let cfg = config.build(&tuning.overrides())?;
            let (model, vocab) = load_checkpoint(&checkpoint)?;
            let text = match &input {
                Some(path) => std::fs::read_to_string(path)
                    .map_err(|e| adapbridge::Error::io(path.display().to_string(), e))?,
                None => {
                    let mut buf = String::new();
                    std::io::stdin()
                        .read_to_string(&mut buf)
                        .map_err(|e| adapbridge::Error::io("<stdin>", e))?;
                    buf
                }
            };
            let lines: Vec<String> = text.lines().map(str::to_string).collect();
            let mut opts = cfg.eval.clone();
            opts.batch_tokens = cfg.batch_tokens;
            let responses = decode_lines(&model, &vocab, &lines, &opts)?;
            let mut block = responses.join("\n");
            if !responses.is_empty() {
                block.push('\n');
            }
            write_or_print(&out, &block)
        }
        Command::Compare { config, strategies, seeds, out } => {
            let cfg = config.build(&[])?;
            let strategies = if strategies.is_empty() {
                Strategy::ALL.to_vec()
            } else {
                strategies
            };
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let outcome = compare(&cfg, &strategies, &seeds)?;
            write_or_print(&out, &outcome.table)
        }
        Command::Synth { config, seed, out } => {
            let mut extra = Vec::new();
            if let Some(s) = seed {
                extra.push(format!("synth.seed={}", s));
            }
            let cfg = config.build(&extra)?;
            let params = match &cfg.data {
                DataSource::Synth(p) => p.clone(),
                DataSource::File(_) => {
                    return Err(adapbridge::Error::Config(
                        "synth generates data; drop the data.corpus key".into(),
                    ))
                }
            };
            let corpus = synth_corpus(&params)?;
            save_corpus(&out, &corpus)?;
            let pairs: usize = corpus.iter().map(|d| d.responses.len()).sum();
            println!("wrote {} contexts ({} pairs) to {}", corpus.len(), pairs, out.display());
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {}", e);
        std::process::exit(1);
    }
}
