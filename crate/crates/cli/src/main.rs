use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use domaingen::commands::{cmd_bench_speed, cmd_evaluate, cmd_train, cmd_translate, BenchRow, EvalReport};
use domaingen::config::RunConfig;
use domaingen::decoding::{DecodeMode, DecodeOptions};

#[derive(Parser)]
#[command(name = "domaingen", version, about = "Train, decode and score diverse-generation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Greedy,
    Beam,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured method; writes the run log and checkpoint into
    /// the output directory (or $DOMAINGEN_OUT_DIR).
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Decode a corpus: one hypothesis per domain, or the whole beam for a
    /// vanilla checkpoint in beam mode.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: Mode,
        #[arg(long, default_value_t = 4)]
        beam_size: usize,
        /// Maximum output length; 0 uses the model's limit.
        #[arg(long, default_value_t = 0)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a hypothesis file against a reference corpus; writes a JSON
    /// report and a CSV next to it.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        refs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Training throughput of the target-encoder and mixture-of-experts
    /// methods for each domain count.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "3,10,50")]
        domains: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> domaingen::Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = cmd_train(&cfg)?;
            if let Some(last) = out.reports.last() {
                println!("step {} nll {:.6} l_xe {:.6}", last.step, last.nll, last.l_xe);
            }
            println!("checkpoint {}", out.checkpoint_path.display());
            println!("log {}", out.log_path.display());
        }
        Command::Translate {
            checkpoint,
            corpus,
            mode,
            beam_size,
            max_len,
            out,
        } => {
            let opts = DecodeOptions {
                mode: match mode {
                    Mode::Greedy => DecodeMode::Greedy,
                    Mode::Beam => DecodeMode::Beam,
                },
                beam_size,
                max_len,
            };
            if beam_size == 0 {
                return Err(domaingen::Error::Config("--beam-size must be at least 1".into()));
            }
            let records = cmd_translate(&checkpoint, &corpus, opts, &out)?;
            println!("{} hypotheses written to {}", records.len(), out.display());
        }
        Command::Evaluate { hyp, refs, out } => {
            let report = cmd_evaluate(&hyp, &refs, &out)?;
            println!("{}", EvalReport::CSV_HEADER);
            println!("{}", report.csv_row());
        }
        Command::Bench { config, domains, out } => {
            let cfg = RunConfig::load(&config)?;
            let rows = cmd_bench_speed(&cfg, &domains, out.as_deref())?;
            println!("{}", BenchRow::CSV_HEADER);
            for r in rows {
                println!("{}", r.csv_row());
            }
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
