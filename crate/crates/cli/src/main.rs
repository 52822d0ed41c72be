use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mergeforge::eval::GridSpec;
use mergeforge_cli::commands::{
    cmd_align, cmd_eval, cmd_finetune, cmd_merge, cmd_pretrain, cmd_search, cmd_tact,
};
use mergeforge_cli::pipeline::FoundationChoice;
use mergeforge_cli::{exit_code, init_threads, Options, Outcome, RunConfig};

#[derive(Parser)]
#[command(name = "mergeforge", version, about = "Train, align, merge and correct desk-scale experts")]
struct Cli {
    /// Run config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print machine-readable JSON instead of a summary line.
    #[arg(long, global = true)]
    json: bool,
    /// Training samples per task used for TACT statistics.
    #[arg(long, global = true)]
    stats_samples: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the two foundation models.
    Pretrain,
    /// Fine-tune one expert per task.
    Finetune {
        /// `alternate` (task i uses foundation i mod 2), `0` or `1`.
        #[arg(long, default_value = "alternate")]
        foundation: FoundationChoice,
    },
    /// Weight-match the second foundation (or B) onto the first (or A).
    Align {
        a: Option<PathBuf>,
        b: Option<PathBuf>,
    },
    /// Merge the experts.
    Merge {
        /// Merge section to use instead of the config's (e.g. best_merge.json).
        #[arg(long)]
        merge_config: Option<PathBuf>,
    },
    /// Compute per-task activation corrections for the merged model.
    Tact,
    /// Evaluate the merged model on the held-out test data.
    Eval {
        /// Also write a landscape grid over the first two task vectors.
        #[arg(long)]
        landscape: bool,
        /// Landscape grid as "A0:A1:NA,B0:B1:NB".
        #[arg(long)]
        grid: Option<GridSpec>,
    },
    /// Grid-search the merge hyperparameters on validation data.
    Search,
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    init_threads()?;
    let path = cli
        .config
        .ok_or_else(|| anyhow::anyhow!("--config is required"))?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    if let Some(n) = cli.stats_samples {
        cfg.repair.stats_samples = Some(n);
    }
    cfg.validate()?;
    let mut opts = Options::default();
    match cli.command {
        Command::Pretrain => cmd_pretrain(&cfg, &opts),
        Command::Finetune { foundation } => {
            opts.foundation = Some(foundation);
            cmd_finetune(&cfg, &opts)
        }
        Command::Align { a, b } => {
            opts.align_inputs = match (a, b) {
                (Some(a), Some(b)) => Some((a, b)),
                (None, None) => None,
                _ => anyhow::bail!("align takes either two checkpoints or none"),
            };
            cmd_align(&cfg, &opts)
        }
        Command::Merge { merge_config } => {
            opts.merge_config = merge_config;
            cmd_merge(&cfg, &opts)
        }
        Command::Tact => cmd_tact(&cfg, &opts),
        Command::Eval { landscape, grid } => {
            opts.landscape = landscape;
            opts.grid = grid;
            cmd_eval(&cfg, &opts)
        }
        Command::Search => cmd_search(&cfg, &opts),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(out) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&out.json).expect("json value"));
            } else {
                println!("{}", out.summary);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
