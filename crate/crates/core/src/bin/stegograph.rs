use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stegograph::dataset::{make_dataset, write_synthetic_covers, DatasetConfig, Split};
use stegograph::experiment::{compare, dump_graph, evaluate, train, ExperimentConfig};
use stegograph::pgm::read_pgm;
use stegograph::stego::Algorithm;
use stegograph::{Error, Result};

#[derive(Parser)]
#[command(name = "stegograph", version, about = "Graph attention steganalysis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build cover/stego corpora.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detection accuracy of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: Split,
    },
    /// Tabulate test accuracy of finished runs.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Inspect the graph built from one image.
    #[command(subcommand)]
    Graph(GraphCommand),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Embed every cover of a directory and split the pairs.
    Make {
        #[arg(long)]
        covers: PathBuf,
        #[arg(long)]
        payload: f64,
        #[arg(long)]
        algo: Algorithm,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Train, validation and test proportions.
        #[arg(long, value_delimiter = ',', default_values_t = [40, 10, 50])]
        ratios: Vec<u32>,
    },
    /// Write smooth synthetic covers.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Write the patch graph (text) and node features (checkpoint format).
    Dump {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Take the CNN from a trained checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "graph.txt")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(DatasetCommand::Make {
            covers,
            payload,
            algo,
            seed,
            out,
            ratios,
        }) => {
            let ratios: [u32; 3] = ratios
                .try_into()
                .map_err(|_| Error::Config("--ratios takes three values".into()))?;
            let config = DatasetConfig {
                ratios,
                ..DatasetConfig::new(payload, algo, seed)
            };
            let m = make_dataset(&covers, &config, &out)?;
            println!(
                "{} pairs: {} train, {} val, {} test",
                m.entries.len() / 2,
                m.count(Split::Train) / 2,
                m.count(Split::Val) / 2,
                m.count(Split::Test) / 2
            );
        }
        Command::Dataset(DatasetCommand::Synth { count, size, seed, out }) => {
            let files = write_synthetic_covers(&out, count, size, size, seed)?;
            println!("wrote {} covers to {}", files.len(), out.display());
        }
        Command::Train { config, out } => {
            let config = ExperimentConfig::load(&config)?;
            let r = train(&config, &out)?;
            println!(
                "{}: {} iterations, best epoch {}, test accuracy {:.4} ({:.1}s)",
                r.model_name, r.iterations_run, r.best_epoch, r.test_accuracy, r.wall_clock_secs
            );
        }
        Command::Eval { ckpt, manifest, split } => {
            println!("{:.6}", evaluate(&ckpt, &manifest, split)?);
        }
        Command::Compare { runs, csv } => {
            let table = compare(&runs)?;
            print!("{}", table.to_text());
            match csv {
                Some(path) => std::fs::write(path, table.to_csv())?,
                None => print!("\n{}", table.to_csv()),
            }
        }
        Command::Graph(GraphCommand::Dump {
            image,
            config,
            ckpt,
            out,
        }) => {
            let config = ExperimentConfig::load(&config)?;
            let image = read_pgm(&image)?;
            let text = dump_graph(&image, &config, ckpt.as_deref(), &out)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Io(_) | Error::Image { .. } | Error::Manifest(_) = e {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
