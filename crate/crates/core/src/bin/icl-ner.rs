use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icl_ner::cli::{self, CliError, ExperimentConfig, SweepAxis};

#[derive(Parser)]
#[command(
    name = "icl-ner",
    version,
    about = "Few-shot nested NER by in-context learning"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set training.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(&self.config, &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset file.
    Validate { data: PathBuf },
    /// Print label and nesting statistics of a dataset as JSON.
    Stats { data: PathBuf },
    /// Train the demonstration retriever.
    Train(ConfigArgs),
    /// Run the full pipeline for every configured seed.
    Run(ConfigArgs),
    /// Repeat `run` over values of one setting.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// One of k, m, backend.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Score a predictions file against a gold dataset.
    Score {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Also write report.json and report.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(args: Args) -> Result<(), CliError> {
    match args.command {
        Command::Validate { data } => println!("{}", cli::cmd_validate(&data)?),
        Command::Stats { data } => println!("{}", cli::cmd_stats(&data)?),
        Command::Train(c) => {
            let t = cli::cmd_train(&c.load()?)?;
            println!("checkpoint: {}", t.checkpoint.display());
            println!("loss trace: {}", t.loss_trace.display());
        }
        Command::Run(c) => {
            let r = cli::cmd_run(&c.load()?)?;
            print!(
                "{}",
                std::fs::read_to_string(r.out.join(cli::REPORT_TXT)).unwrap_or_default()
            );
        }
        Command::Sweep {
            config,
            axis,
            values,
        } => {
            let rows = cli::cmd_sweep(&config.load()?, axis, &values)?;
            print!("{}", cli::sweep_table(axis, &rows));
        }
        Command::Score { gold, pred, out } => {
            let (summary, text) = cli::cmd_score(&gold, &pred)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| CliError::Domain(e.to_string()))?;
                let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
                std::fs::write(dir.join(cli::REPORT_JSON), json + "\n")
                    .map_err(|e| CliError::Domain(e.to_string()))?;
                std::fs::write(dir.join(cli::REPORT_TXT), &text)
                    .map_err(|e| CliError::Domain(e.to_string()))?;
            }
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
