mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgAction, Args, Parser, Subcommand};

/// Interactive intent refinement: simulate, evaluate, train and serve.
#[derive(Debug, Parser)]
#[command(name = "intentloop", version, about, max_term_width = 100)]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Seed for every random choice.
    #[arg(long, global = true, env = "INTENTLOOP_SEED")]
    pub seed: Option<u64>,
    /// JSON settings file; flags and environment variables take precedence.
    #[arg(long, global = true, env = "INTENTLOOP_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Drive synthetic users through the refinement loop and log every round.
    Simulate(SimulateArgs),
    /// Train the slot predictor from interaction logs.
    TrainPredictor(TrainArgs),
    /// Query a search provider for every (location, intent, slot) and save the results.
    BuildCorpus(CorpusArgs),
    /// Score requests with query performance predictors.
    Qpp(QppArgs),
    /// Estimate a policy's reward offline from interaction logs.
    Ope(OpeArgs),
    /// Rebuild bandit models by replaying interaction logs.
    ReplayLog(ReplayArgs),
}

/// Shape of the synthetic world used when no ontology file is given.
#[derive(Debug, Clone, Default, Args)]
pub struct WorldArgs {
    /// Simulator setting, e.g. `coupling=0` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// File of `key = value` simulator settings.
    #[arg(long, value_name = "FILE")]
    pub sim_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "INTENTLOOP_PORT")]
    pub port: Option<u16>,
    /// Directory for sessions, profile, models and logs.
    #[arg(long, env = "INTENTLOOP_DATA_DIR", value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Allowed browser origin, `*` for any (repeatable).
    #[arg(long = "cors-origin", env = "INTENTLOOP_CORS_ORIGINS", value_delimiter = ',', value_name = "ORIGIN")]
    pub cors_origins: Vec<String>,
    /// Ontology JSON; without it a synthetic world is served.
    #[arg(long, value_name = "FILE")]
    pub ontology: Option<PathBuf>,
    /// Few-shot examples JSON for the language model parser.
    #[arg(long, value_name = "FILE")]
    pub examples: Option<PathBuf>,
    #[arg(long, env = "INTENTLOOP_SEARCH_ENDPOINT", value_name = "URL")]
    pub search_endpoint: Option<String>,
    #[arg(long, env = "INTENTLOOP_SEARCH_KEY", hide_env_values = true)]
    pub search_key: Option<String>,
    /// Canned search results JSON.
    #[arg(long, value_name = "FILE")]
    pub search_fixture: Option<PathBuf>,
    /// Base URL of the completion service.
    #[arg(long, env = "INTENTLOOP_LM_ENDPOINT", value_name = "URL")]
    pub lm_endpoint: Option<String>,
    /// Base URL of the embedding service.
    #[arg(long, env = "INTENTLOOP_EMBEDDING_ENDPOINT", value_name = "URL")]
    pub embedding_endpoint: Option<String>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Trained slot predictor, needed for context method3.
    #[arg(long, value_name = "FILE")]
    pub predictor: Option<PathBuf>,
    /// Bandit policy, e.g. adaptive_active_greedy.
    #[arg(long)]
    pub policy: Option<String>,
    /// Context scheme: method1, method2 or method3.
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub max_steps: Option<u32>,
    #[arg(long)]
    pub slate_size: Option<usize>,
    /// Print the resolved settings and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of simulated requests.
    #[arg(long)]
    pub requests: Option<usize>,
    /// Stop after this many feedback rounds.
    #[arg(long)]
    pub interactions: Option<usize>,
    /// Bandit policy, e.g. adaptive_active_greedy.
    #[arg(long)]
    pub policy: Option<String>,
    /// Context scheme: method1, method2 or method3.
    #[arg(long)]
    pub scheme: Option<String>,
    /// Preference coupling strength.
    #[arg(long)]
    pub coupling: Option<f64>,
    /// Let the oracle pick slates instead of the policy.
    #[arg(long)]
    pub oracle: bool,
    /// Interaction log output (JSONL).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Final bandit models, one checkpoint per line.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Writes `<PREFIX>.original.jsonl` and `<PREFIX>.refined.jsonl` request files.
    #[arg(long, value_name = "PREFIX")]
    pub requests_out: Option<PathBuf>,
    /// Writes the synthetic ontology.
    #[arg(long, value_name = "FILE")]
    pub ontology_out: Option<PathBuf>,
    #[command(flatten)]
    pub world: WorldArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Interaction logs (file or directory of .jsonl files).
    #[arg(long, value_name = "PATH", required_unless_present = "examples")]
    pub logs: Option<PathBuf>,
    /// Training rows as JSONL instead of logs.
    #[arg(long, value_name = "FILE")]
    pub examples: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Fraction of rows held out for recall.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    /// Comma-separated locations; defaults to the simulator's.
    #[arg(long, value_delimiter = ',')]
    pub locations: Vec<String>,
    #[arg(long, default_value_t = intentloop_core::retrieval::CORPUS_TOP_N)]
    pub top_n: usize,
    #[arg(long, default_value_t = intentloop_core::retrieval::DEFAULT_CORPUS_CONCURRENCY)]
    pub concurrency: usize,
    #[arg(long, env = "INTENTLOOP_SEARCH_ENDPOINT", value_name = "URL")]
    pub search_endpoint: Option<String>,
    #[arg(long, env = "INTENTLOOP_SEARCH_KEY", hide_env_values = true)]
    pub search_key: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub search_fixture: Option<PathBuf>,
    #[command(flatten)]
    pub world: WorldArgs,
}

#[derive(Debug, Args)]
pub struct QppArgs {
    /// Corpus JSONL.
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// Requests: JSONL objects with a `text` field, or one request per line.
    #[arg(long, value_name = "FILE")]
    pub requests: PathBuf,
    /// Refined versions of the requests, in the same order.
    #[arg(long, value_name = "FILE")]
    pub refined: Option<PathBuf>,
    /// Term vectors JSONL; built from corpus co-occurrence when absent.
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Saves the term vectors used.
    #[arg(long, value_name = "FILE")]
    pub save_vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub vocab_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub vocab_nonzeros: usize,
    #[arg(long, default_value_t = intentloop_core::qpp::DEFAULT_NEIGHBORS)]
    pub neighbors: usize,
    #[arg(long, default_value_t = intentloop_core::qpp::DEFAULT_SIM_THRESHOLD)]
    pub sim_threshold: f64,
    #[arg(long)]
    pub drop_stopwords: bool,
}

#[derive(Debug, Args)]
pub struct OpeArgs {
    /// Interaction logs (file or directory of .jsonl files).
    #[arg(long, value_name = "PATH")]
    pub logs: PathBuf,
    /// Target policy, e.g. epsilon_greedy.
    #[arg(long)]
    pub policy: Option<String>,
    /// Target models, one checkpoint per line; without it the target is
    /// trained on the first part of the logs and evaluated on the rest.
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Share of sessions used to train the target.
    #[arg(long, default_value_t = 0.5)]
    pub train_fraction: f64,
    /// Importance weight cap.
    #[arg(long)]
    pub cap: Option<f64>,
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    #[command(flatten)]
    pub world: WorldArgs,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Interaction logs (file or directory of .jsonl files).
    #[arg(long, value_name = "PATH")]
    pub logs: PathBuf,
    /// Bandit policy, e.g. adaptive_active_greedy.
    #[arg(long)]
    pub policy: Option<String>,
    /// Model checkpoints output, one per line.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    #[command(flatten)]
    pub world: WorldArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
