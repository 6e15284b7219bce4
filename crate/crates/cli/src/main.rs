use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use syntx::experiment::{
    cmd_decode_tree, cmd_gen_corpus, cmd_report, cmd_run_intervention, cmd_train_probe, cmd_train_toy,
    format_summary, ConfigBuilder, ExperimentConfig, ItemsConfig, Progress,
};
use syntx::toy::{SyntheticGrammar, ToyTrainConfig};
use syntx::{Error, Result};

/// Syntactic probes, counterfactual embeddings and intervention reports.
///
/// Exit status: 0 on success, 2 on invalid input, 1 on runtime failure.
#[derive(Parser, Debug)]
#[command(name = "syntx", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write an evaluation corpus as CoNLL plus a JSON sidecar.
    GenCorpus {
        /// coordination, npz, rc, npvp or toy.
        #[arg(long)]
        corpus: String,
        #[arg(long)]
        out: PathBuf,
        /// Curated NP/Z items to append.
        #[arg(long)]
        npz_extra: Option<PathBuf>,
        /// Grammar JSON for the toy corpus.
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long, default_value_t = ItemsConfig::default().toy_count)]
        toy_count: usize,
        #[arg(long, default_value_t = ItemsConfig::default().toy_seed)]
        toy_seed: u64,
    },
    /// Train the toy masked-word model on a synthetic grammar.
    TrainToy {
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Grammar JSON; the built-in coordination grammar when absent.
        #[arg(long)]
        grammar: Option<PathBuf>,
        /// Write the built-in grammar here and exit.
        #[arg(long)]
        dump_grammar: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        sentences: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one probe per layer and write probes/ with metric summaries.
    TrainProbe(ExperimentArgs),
    /// Run counterfactual interventions and write reports/.
    Intervene(ExperimentArgs),
    /// Print the minimum-spanning-tree edges a distance probe reads from an
    /// embedding or counterfactual file.
    DecodeTree {
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long)]
        probe: PathBuf,
    },
    /// Recompute and print the summary of an intervention report.
    Report {
        #[arg(long)]
        output_dir: PathBuf,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

/// Experiment settings. A TOML file is read first, then `SYNTX_*`
/// environment variables, then these flags.
#[derive(Args, Debug, Default)]
struct ExperimentArgs {
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// depth, dist, dist2 or dist3.
    #[arg(long)]
    probe: Option<String>,
    /// Comma-separated layer indices.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    /// coordination, npz, rc, npvp or toy.
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long, conflicts_with = "bridge_dir")]
    toy_checkpoint: Option<PathBuf>,
    #[arg(long, requires = "toy_checkpoint")]
    grammar: Option<PathBuf>,
    #[arg(long)]
    bridge_dir: Option<PathBuf>,
    /// mask-large or qa-squad.
    #[arg(long, requires = "bridge_dir")]
    bridge_model: Option<String>,
    #[arg(long)]
    train_treebank: Option<PathBuf>,
    #[arg(long)]
    dev_treebank: Option<PathBuf>,
    #[arg(long)]
    test_treebank: Option<PathBuf>,
    #[arg(long)]
    npz_extra: Option<PathBuf>,
    #[arg(long)]
    cf_learning_rate: Option<f64>,
    #[arg(long)]
    cf_patience: Option<usize>,
    #[arg(long)]
    cf_max_steps: Option<usize>,
    /// Any config key, e.g. `probe_training.rank=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn path_str(p: &std::path::Path) -> Result<&str> {
    p.to_str()
        .ok_or_else(|| Error::invalid(format!("path {} is not UTF-8", p.display())))
}

impl ExperimentArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut b = ConfigBuilder::new();
        if let Some(path) = &self.config {
            b = b.file(path)?;
        }
        let mut b = b.env(std::env::vars())?;
        let paths = [
            ("output_dir", &self.output_dir),
            ("probe_data.train", &self.train_treebank),
            ("probe_data.dev", &self.dev_treebank),
            ("probe_data.test", &self.test_treebank),
            ("npz_extra", &self.npz_extra),
        ];
        for (key, value) in paths {
            if let Some(p) = value {
                b.set_str(key, path_str(p)?)?;
            }
        }
        if let Some(p) = &self.toy_checkpoint {
            b.set_str("model.source", "toy")?;
            b.set_str("model.checkpoint", path_str(p)?)?;
        }
        if let Some(p) = &self.grammar {
            b.set_str("model.grammar", path_str(p)?)?;
        }
        if let Some(p) = &self.bridge_dir {
            b.set_str("model.source", "bridge")?;
            b.set_str("model.dir", path_str(p)?)?;
        }
        if let Some(m) = &self.bridge_model {
            b.set_str("model.model", m)?;
        }
        if let Some(v) = &self.probe {
            b.set_str("probe", v)?;
        }
        if let Some(v) = &self.corpus {
            b.set_str("corpus", v)?;
        }
        if let Some(v) = self.seed {
            b.set_raw("seed", &v.to_string())?;
        }
        if !self.layers.is_empty() {
            let list: Vec<String> = self.layers.iter().map(usize::to_string).collect();
            b.set_raw("layers", &format!("[{}]", list.join(", ")))?;
        }
        if let Some(v) = self.cf_learning_rate {
            b.set_raw("counterfactual.learning_rate", &format!("{v:e}"))?;
        }
        if let Some(v) = self.cf_patience {
            b.set_raw("counterfactual.patience", &v.to_string())?;
        }
        if let Some(v) = self.cf_max_steps {
            b.set_raw("counterfactual.max_steps", &v.to_string())?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            b.set_raw(k.trim(), v.trim())?;
        }
        b.build()
    }
}

fn pending(written: usize, waiting: usize) {
    println!("pending: wrote {written} bridge requests, {waiting} still unanswered; rerun once the bridge has answered");
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::GenCorpus {
            corpus,
            out,
            npz_extra,
            grammar,
            toy_count,
            toy_seed,
        } => {
            let grammar = grammar.as_deref().map(SyntheticGrammar::read).transpose()?;
            let items = ItemsConfig {
                toy_count,
                toy_seed,
                ..ItemsConfig::default()
            };
            let (conll, sidecar) = cmd_gen_corpus(&corpus, &out, npz_extra.as_deref(), grammar.as_ref(), &items)?;
            println!("{}\n{}", conll.display(), sidecar.display());
        }
        Cmd::TrainToy {
            out,
            grammar,
            dump_grammar,
            model_seed,
            epochs,
            sentences,
            learning_rate,
            weight_decay,
            seed,
        } => {
            if let Some(path) = dump_grammar {
                syntx::tensor_file::write_atomic(&path, SyntheticGrammar::coordination().to_json()?.as_bytes())?;
                println!("{}", path.display());
                return Ok(());
            }
            let grammar = match grammar {
                Some(p) => SyntheticGrammar::read(&p)?,
                None => SyntheticGrammar::coordination(),
            };
            let d = ToyTrainConfig::default();
            let train = ToyTrainConfig {
                epochs: epochs.unwrap_or(d.epochs),
                sentences: sentences.unwrap_or(d.sentences),
                learning_rate: learning_rate.unwrap_or(d.learning_rate),
                weight_decay: weight_decay.unwrap_or(d.weight_decay),
                seed: seed.unwrap_or(d.seed),
                ..d
            };
            let run = cmd_train_toy(&grammar, model_seed, &train, &out)?;
            println!("{}", serde_json::to_string_pretty(&run)?);
        }
        Cmd::TrainProbe(args) => match cmd_train_probe(&args.config()?)? {
            Progress::Pending { written, waiting } => pending(written, waiting),
            Progress::Done(runs) => {
                for r in runs {
                    let f = |x: Option<f64>| x.map_or("-".into(), |v| format!("{v:.4}"));
                    println!(
                        "{} layer {:>2}: dev loss {:.4} uuas {} spearman {} root_acc {} ({} epochs) -> {}",
                        r.probe,
                        r.layer,
                        r.dev.loss,
                        f(r.dev.uuas),
                        f(r.dev.spearman),
                        f(r.dev.root_accuracy),
                        r.epochs_run,
                        r.path.display()
                    );
                }
            }
        },
        Cmd::Intervene(args) => match cmd_run_intervention(&args.config()?)? {
            Progress::Pending { written, waiting } => pending(written, waiting),
            Progress::Done(run) => {
                print!("{}", format_summary(&run.summary));
                println!("{}\n{}", run.csv_path.display(), run.summary_path.display());
            }
        },
        Cmd::DecodeTree { embedding, probe } => {
            print!("{}", cmd_decode_tree(&embedding, &probe)?.to_listing());
        }
        Cmd::Report { output_dir, json } => {
            let summary = cmd_report(&output_dir)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                print!("{}", format_summary(&summary));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
