//! Argument surface and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::{commands, config, serve, CliError};

#[derive(Parser)]
#[command(name = "jam", version, about = "Translation-based multimodal recommender")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a planted-structure synthetic world
    Synth(SynthArgs),
    /// Chronological day split of a triplet file
    Split(SplitArgs),
    /// Train a model (optionally over several seeds)
    Train(TrainArgs),
    /// Evaluate checkpoints and baselines on the test split
    Evaluate(EvaluateArgs),
    /// Rank the catalog for one user and query
    Recommend(RecommendArgs),
    /// Export item/user/user+query latents as CSV
    ExportLatents(ExportArgs),
    /// Serve POST /recommend and GET /healthz over HTTP
    Serve(ServeArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory for the generated world
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n_users: usize,
    #[arg(long, default_value_t = 40)]
    pub n_queries: usize,
    #[arg(long, default_value_t = 800)]
    pub n_items: usize,
    #[arg(long, default_value_t = 16)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 3)]
    pub n_mod: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub distractor_overlap: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Args)]
pub struct CommonArgs {
    /// Flat key=value config file; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub users_matrix: Option<PathBuf>,
    #[arg(long)]
    pub users_ids: Option<PathBuf>,
    #[arg(long)]
    pub queries_matrix: Option<PathBuf>,
    #[arg(long)]
    pub queries_ids: Option<PathBuf>,
    #[arg(long)]
    pub triplets: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl CommonArgs {
    fn merged(&self) -> Result<config::AppConfig, CliError> {
        let mut cfg = config::AppConfig::load(self.config.as_deref())?;
        let over = |dst: &mut Option<PathBuf>, src: &Option<PathBuf>| {
            if src.is_some() {
                dst.clone_from(src);
            }
        };
        over(&mut cfg.catalog, &self.catalog);
        over(&mut cfg.users_matrix, &self.users_matrix);
        over(&mut cfg.users_ids, &self.users_ids);
        over(&mut cfg.queries_matrix, &self.queries_matrix);
        over(&mut cfg.queries_ids, &self.queries_ids);
        over(&mut cfg.triplets, &self.triplets);
        over(&mut cfg.checkpoint, &self.checkpoint);
        over(&mut cfg.out_dir, &self.out_dir);
        Ok(cfg)
    }
}

#[derive(Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// jam | twotower | talkrec
    #[arg(long)]
    pub model: Option<String>,
    /// avg | cross | moe
    #[arg(long)]
    pub mixer: Option<String>,
    /// Comma-separated seed list, e.g. 1,2,3
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub n_negatives: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub moe_k: Option<usize>,
    #[arg(long)]
    pub moe_noise: Option<bool>,
    /// Tune d and lr_max on the validation split (grids 64/128/256 and
    /// 1e-4/3e-4/1e-3) before the seed runs
    #[arg(long, default_value_t = false)]
    pub grid_search: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated checkpoint paths treated as seeds of one method
    #[arg(long)]
    pub checkpoints: Option<String>,
    /// Comma-separated subset of {pop, random}
    #[arg(long)]
    pub baselines: Option<String>,
    /// Report output path (default: <out_dir>/metrics_report.json)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct RecommendArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub user_id: Option<String>,
    #[arg(long)]
    pub query_id: Option<String>,
    #[arg(long)]
    pub query_text: Option<String>,
    #[arg(short, long)]
    pub k: Option<usize>,
    /// Use the zero user vector: ranking is a pure query translation
    #[arg(long, default_value_t = false)]
    pub anonymous: bool,
}

#[derive(Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// CSV output path
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated user ids to export
    #[arg(long)]
    pub users: Option<String>,
    /// Comma-separated user:query pairs to export as translations
    #[arg(long)]
    pub pairs: Option<String>,
}

#[derive(Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub port: Option<u16>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Synth(a) => commands::cmd_synth(&a),
        Cmd::Split(a) => commands::cmd_split(&a.common.merged()?),
        Cmd::Train(a) => {
            let cfg = a.common.merged()?;
            commands::cmd_train(cfg, &a)
        }
        Cmd::Evaluate(a) => {
            let cfg = a.common.merged()?;
            commands::cmd_evaluate(&cfg, &a)
        }
        Cmd::Recommend(a) => {
            let cfg = a.common.merged()?;
            commands::cmd_recommend(&cfg, &a)
        }
        Cmd::ExportLatents(a) => {
            let cfg = a.common.merged()?;
            commands::cmd_export_latents(&cfg, &a)
        }
        Cmd::Serve(a) => {
            let cfg = a.common.merged()?;
            serve::cmd_serve(&cfg, a.port)
        }
    }
}

/// Binary entry point: parse, dispatch, map errors to exit codes.
pub fn main_entry() -> ! {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => std::process::exit(0),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
