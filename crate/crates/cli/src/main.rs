use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cosped_core::harness::{self, ExperimentConfig, RunManifest};

/// Soft-prompt extraction attack and rank-one editing defense lab.
#[derive(Parser, Debug)]
#[command(name = "cosped", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the corpus and pretrain the victim.
    Pretrain(Opts),
    /// Tune a soft prompt on the attack split.
    Tune(Opts),
    /// Extract suffixes on the evaluation split, once per decoding strategy.
    Extract(Opts),
    /// Fit and evaluate the rank-one editing defense.
    Defend(Opts),
    /// Move the tuned prompt to a wider victim.
    Transfer(Opts),
    /// Tune and extract once per loss stack.
    Grid(Opts),
    /// Render tables from completed stages.
    Report(Opts),
    /// pretrain, tune, extract, defend and report in sequence.
    Run(Opts),
}

#[derive(clap::Args, Debug)]
struct Opts {
    /// Experiment config: TOML, or JSON when the extension is .json.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    ExitCode::from(execute(cli.command))
}

fn load(opts: &Opts) -> cosped_core::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&opts.config)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(o) = &opts.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cmd: Command) -> u8 {
    type Step = fn(&ExperimentConfig) -> cosped_core::Result<RunManifest>;
    let (opts, steps): (&Opts, Vec<Step>) = match &cmd {
        Command::Pretrain(o) => (o, vec![harness::cmd_pretrain]),
        Command::Tune(o) => (o, vec![harness::cmd_tune]),
        Command::Extract(o) => (o, vec![harness::cmd_extract]),
        Command::Defend(o) => (o, vec![harness::cmd_defend]),
        Command::Transfer(o) => (o, vec![harness::cmd_transfer]),
        Command::Grid(o) => (o, vec![harness::cmd_grid]),
        Command::Report(o) => (o, vec![harness::cmd_report]),
        Command::Run(o) => (
            o,
            vec![
                harness::cmd_pretrain,
                harness::cmd_tune,
                harness::cmd_extract,
                harness::cmd_defend,
                harness::cmd_report,
            ],
        ),
    };
    let cfg = match load(opts) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    for step in steps {
        match step(&cfg) {
            Ok(m) => println!(
                "{} {} {}",
                m.stage,
                cfg.out_dir.join(dir_of(&m)).display(),
                m.summary
            ),
            Err(e) => {
                eprintln!("error: {e}");
                return if harness::is_config_error(&e) {
                    EXIT_CONFIG
                } else {
                    EXIT_RUNTIME
                };
            }
        }
    }
    0
}

fn dir_of(m: &RunManifest) -> String {
    format!("{}-{}", m.stage, &m.fingerprint[..16])
}
