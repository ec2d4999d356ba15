use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qlab_cli::commands::{self, reference_rows};
use qlab_cli::{CliError, RunConfig, EXIT_USAGE};
use qlab_core::GameKind;

/// Deep Q-learning agents on synthetic trading games.
///
/// Settings come from the optional `--config` file; any flag given on the
/// command line overrides the corresponding file value, and unset values
/// fall back to built-in defaults.
#[derive(Parser)]
#[command(name = "qlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write generated episodes with their generation parameters.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        /// Number of episodes.
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Train every configured network and save weights and logs.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Override `hyper.train_episodes`.
        #[arg(long)]
        episodes: Option<usize>,
        /// Networks trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate saved networks and write reports and the comparison table.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Must match the value used for training, since it decides which
        /// seeds are out of sample.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Also write a trace of the first out-of-sample episode per network.
        #[arg(long)]
        trace: bool,
    },
    /// Print parameter counts of the reference architectures and check them.
    Params {
        /// JSON array of {name, univariate, bivariate} rows to check against
        /// instead of the built-in table.
        #[arg(long)]
        fixture: Option<PathBuf>,
        /// Print the check as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Write the greedy trace of the first configured network on one episode.
    Trace {
        #[command(flatten)]
        run: RunArgs,
        /// Episode seed.
        #[arg(long)]
        episode: u64,
        /// Output CSV (default: reports/traces/ under the output directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GameArg {
    Univariate,
    Bivariate,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override `game.kind`.
    #[arg(long, value_enum)]
    game: Option<GameArg>,
    /// Override `nets` (repeatable).
    #[arg(long = "net")]
    nets: Vec<String>,
    /// Override `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `data.base_seed`.
    #[arg(long)]
    base_seed: Option<u64>,
    /// Override `output_dir`.
    #[arg(long, short)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(g) = self.game {
            config.game.kind = match g {
                GameArg::Univariate => GameKind::Univariate,
                GameArg::Bivariate => GameKind::Bivariate,
            };
        }
        if !self.nets.is_empty() {
            config.nets = self.nets.clone();
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(s) = self.base_seed {
            config.data.base_seed = s;
        }
        if let Some(d) = &self.out_dir {
            config.output_dir = d.clone();
        }
        Ok(config)
    }
}

fn with_episodes(mut config: RunConfig, episodes: Option<usize>) -> RunConfig {
    if let Some(n) = episodes {
        config.hyper.train_episodes = n;
    }
    config
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { run, count } => {
            let path = commands::cmd_generate(&run.resolve()?, count)?;
            println!("wrote {count} episodes to {}", path.display());
        }
        Command::Train {
            run,
            episodes,
            jobs,
        } => {
            let config = with_episodes(run.resolve()?, episodes);
            for s in commands::cmd_train(&config, jobs)? {
                println!(
                    "{}: {} episodes, weights {}, log {}",
                    s.spec,
                    s.episodes,
                    s.weights.display(),
                    s.log.display()
                );
            }
        }
        Command::Eval {
            run,
            episodes,
            jobs,
            trace,
        } => {
            let config = with_episodes(run.resolve()?, episodes);
            let outcome = commands::cmd_eval(&config, jobs, trace)?;
            print!("{}", outcome.table.render());
            for m in &outcome.missing {
                eprintln!("warning: no weights for {m}; row flagged as missing");
            }
        }
        Command::Params { fixture, json } => {
            let expected = match fixture {
                Some(p) => commands::load_fixture(&p)?,
                None => reference_rows(),
            };
            let check = commands::check_params(&expected);
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&check).expect("param check serializes")
                );
            } else {
                print!("{}", check.render());
            }
            if !check.passed() {
                return Err(CliError::Mismatch(format!(
                    "{}/{} match; mismatched rows: {}",
                    check.matched,
                    check.total,
                    check.offending_rows().join(", ")
                )));
            }
        }
        Command::Trace { run, episode, out } => {
            let path = commands::cmd_trace(&run.resolve()?, episode, out.as_deref())?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap reports usage errors as 2, which is reserved for numeric failures
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
