//! `ramk`: batch pipelines over precomputed local features.
//!
//! Exit codes: 0 success, 2 configuration error (bad flag or config value,
//! codebook/index mismatch), 3 data error (missing or malformed input),
//! 4 internal error.

mod commands;
mod settings;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ramk_core::{Error, ErrorClass};

#[derive(Parser, Debug)]
#[command(name = "ramk", version, about = "Regional aggregated match kernels for image retrieval")]
struct Cli {
    /// Seed for every random choice of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores. Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// `key:value` file of defaults; flags take precedence.
    #[arg(long, global = true)]
    config: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a cluttered synthetic corpus with planted landmark regions.
    GenSynthetic(GenSyntheticArgs),
    /// Train a k-means codebook on the images of a manifest.
    TrainCodebook(TrainCodebookArgs),
    /// Aggregate a manifest's images into an inverted-file index.
    BuildIndex(BuildIndexArgs),
    /// Rank the index for every query of a manifest.
    Search(SearchArgs),
    /// Compute mAP and mP@10 of a results file.
    Evaluate(EvaluateArgs),
    /// Tabulate feature relevance inside and outside detected boxes.
    AnalyzeRelevance(AnalyzeRelevanceArgs),
}

#[derive(Args, Debug)]
pub struct GenSyntheticArgs {
    /// Output directory.
    #[arg(long)]
    pub out: String,
    /// Generator parameter as key=value, e.g. `landmarks=20`; repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    pub params: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainCodebookArgs {
    #[arg(long)]
    pub manifest: Option<String>,
    /// Number of visual words.
    #[arg(long)]
    pub c: Option<usize>,
    /// Maximum k-means iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Maximum number of training descriptors, subsampled uniformly.
    #[arg(long)]
    pub sample_cap: Option<usize>,
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Args, Debug)]
pub struct IndexSettingsArgs {
    /// vlad, asmk, asmk-star, r-vlad, naive-r-asmk, r-asmk or r-asmk-star.
    #[arg(long)]
    pub mode: Option<String>,
    /// whole, detector:<threshold>, rmac:<levels> or topk:<k>.
    #[arg(long)]
    pub regions: Option<String>,
    /// Selectivity exponent.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Selectivity threshold.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Skip the global normalization of regional aggregates.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Args, Debug)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub manifest: Option<String>,
    #[arg(long)]
    pub codebook: Option<String>,
    #[command(flatten)]
    pub index: IndexSettingsArgs,
    /// Drop descriptors with attention below this value.
    #[arg(long)]
    pub min_attention: Option<f32>,
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: Option<String>,
    #[arg(long)]
    pub codebook: Option<String>,
    /// Manifest providing the queries and, for --sp, the database features.
    #[arg(long)]
    pub manifest: Option<String>,
    /// max or avg; applies to per-region indexes.
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub min_attention: Option<f32>,
    /// Re-rank the head of each list by spatial verification.
    #[arg(long)]
    pub sp: bool,
    #[arg(long)]
    pub sp_depth: Option<usize>,
    #[arg(long)]
    pub sp_iters: Option<usize>,
    /// Inlier tolerance in pixels; default 5% of the candidate's larger side.
    #[arg(long)]
    pub sp_tol: Option<f64>,
    /// Seed for spatial verification; defaults to --seed.
    #[arg(long)]
    pub sp_seed: Option<u64>,
    /// Descriptor distance bound for tentative matches.
    #[arg(long)]
    pub max_distance: Option<f32>,
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub results: Option<String>,
    /// Ground-truth file; taken from --manifest when omitted.
    #[arg(long)]
    pub ground_truth: Option<String>,
    #[arg(long)]
    pub manifest: Option<String>,
    /// medium or hard; both when omitted.
    #[arg(long)]
    pub protocol: Option<String>,
    /// Machine-readable key:value metrics.
    #[arg(long)]
    pub out: Option<String>,
    /// Human-readable report.
    #[arg(long)]
    pub report: Option<String>,
}

#[derive(Args, Debug)]
pub struct AnalyzeRelevanceArgs {
    #[arg(long)]
    pub manifest: Option<String>,
    /// Lines of `<query-side id>\t<database-side id>`.
    #[arg(long)]
    pub pairs: Option<String>,
    /// Comma-separated attention bin edges.
    #[arg(long)]
    pub bins: Option<String>,
    /// Boxes scoring below this are ignored.
    #[arg(long)]
    pub box_threshold: Option<f32>,
    #[arg(long)]
    pub max_distance: Option<f32>,
    #[arg(long)]
    pub sp_iters: Option<usize>,
    #[arg(long)]
    pub sp_tol: Option<f64>,
    #[arg(long)]
    pub out: Option<String>,
}

pub struct Global {
    pub seed: Option<u64>,
    pub config: Option<String>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Internal => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    4
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let global = Global {
        seed: cli.seed,
        config: cli.config,
    };
    match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(&global, a),
        Command::TrainCodebook(a) => commands::train_codebook(&global, a),
        Command::BuildIndex(a) => commands::build_index(&global, a),
        Command::Search(a) => commands::search(&global, a),
        Command::Evaluate(a) => commands::evaluate(&global, a),
        Command::AnalyzeRelevance(a) => commands::analyze_relevance(&global, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            log::error!("--threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::error!("cannot start thread pool: {e}");
            return ExitCode::from(4);
        }
    }
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(4),
    }
}
