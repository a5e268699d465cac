use std::io::{stdin, stdout};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use mmgpt_cli::commands::{chat_repl, decoding, eval_cmd, load_engine, prepare, train_cmd, TrainFile};
use mmgpt_cli::{server, UsageError};
use mmgpt_core::trainer::TrainMode;

#[derive(Parser)]
#[command(name = "mmgpt", version, about = "Train and chat with a small multimodal instruction-following model")]
struct Cli {
    /// Overrides the seed of the configuration in use.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration (mixture spec for prepare, run config for train).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model checkpoint to load.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Pretrain,
    Lora,
}

#[derive(Subcommand)]
enum Command {
    /// Build the training mixture and write data shards plus a report.
    Prepare {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// Directory holding (or receiving synthesized) source files.
        #[arg(long)]
        sources: Option<PathBuf>,
    },
    /// Pretrain a base model or fine-tune adapters on a prepared mixture.
    Train {
        #[arg(long, value_enum, default_value = "pretrain")]
        mode: Mode,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Held-out perplexity and generation metrics.
    Eval {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 48)]
        max_new: usize,
    },
    /// Multi-round chat on stdin, one instruction per line.
    Chat {
        /// Image file, or an image inline in the text format.
        #[arg(long)]
        image: Option<String>,
        #[arg(long)]
        temperature: Option<f64>,
        /// Print each reply as a JSON object.
        #[arg(long)]
        json: bool,
        /// Cap on generated tokens per reply.
        #[arg(long)]
        max_new: Option<usize>,
    },
    /// Local HTTP chat service.
    Serve {
        /// Cap on generated tokens per reply.
        #[arg(long)]
        max_new: Option<usize>,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { out, sources } => {
            let report = prepare(cli.config.as_deref(), sources.as_deref(), &out, cli.seed)?;
            print!("{report}");
        }
        Command::Train { mode, data, out } => {
            let file = match &cli.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p)?;
                    serde_json::from_str(&text)
                        .map_err(|e| UsageError(format!("run config {}: {e}", p.display())))?
                }
                None => TrainFile::default(),
            };
            let mode = match mode {
                Mode::Pretrain => TrainMode::Pretrain,
                Mode::Lora => TrainMode::LoraFinetune,
            };
            let run = train_cmd(&file, mode, &data, &out, cli.checkpoint.as_deref(), cli.seed)?;
            let last = run.report.metrics.last();
            println!(
                "{} updates, {} micro-steps; final loss vl {:.4} lm {:.4}",
                run.report.updates,
                run.report.micro_steps,
                last.map_or(f64::NAN, |m| m.loss_vl),
                last.map_or(f64::NAN, |m| m.loss_lm)
            );
            println!("checkpoint: {}", run.checkpoint.display());
            if let Some(a) = &run.adapters {
                println!("adapters:   {}", a.display());
            }
            println!("metrics:    {}", run.metrics.display());
        }
        Command::Eval { data, limit, max_new } => {
            let engine = load_engine(cli.checkpoint.as_deref())?;
            let report = eval_cmd(&engine, &data, limit, max_new)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Chat {
            image,
            temperature,
            json,
            max_new,
        } => {
            let mut engine = load_engine(cli.checkpoint.as_deref())?;
            if let Some(n) = max_new {
                engine.max_new = n;
            }
            chat_repl(
                &engine,
                image.as_deref(),
                decoding(temperature, cli.seed),
                json,
                stdin().lock(),
                stdout().lock(),
            )?;
        }
        Command::Serve { max_new, host, port } => {
            let mut engine = load_engine(cli.checkpoint.as_deref())?;
            if let Some(n) = max_new {
                engine.max_new = n;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(engine, (host, port).into()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
