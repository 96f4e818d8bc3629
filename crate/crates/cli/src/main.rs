use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mbhgcn::config::RunConfig;
use mbhgcn::model::DeltaQuery;
use mbhgcn::training::{RegScope, TaskSchedule};
use mbhgcn::{Delimiter, ItemWeighting, UserAggregation};

mod commands;
mod table;

#[derive(Parser)]
#[command(
    name = "mbhgcn",
    version,
    about = "Hierarchical graph-convolutional multi-behavior recommender"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw interaction log into a dataset bundle and print statistics.
    Prepare(PrepareArgs),
    /// Train a model (optionally over a hyperparameter grid).
    Train(TrainArgs),
    /// Evaluate a saved model on a bundle.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the ablation variants side by side.
    Ablate(AblateArgs),
    /// Train and evaluate for several propagation depths.
    LayerSweep(LayerSweepArgs),
    /// Mask target history of random test users, retrain, and evaluate them.
    ColdStart(ColdStartArgs),
    /// Write global, per-behavior and final embeddings of selected entities.
    ExportEmbeddings(ExportArgs),
    /// Write a seeded synthetic interaction log.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Raw log with `user item behavior timestamp` lines.
    #[arg(long)]
    input: PathBuf,
    /// Behavior labels in order, target last.
    #[arg(long, value_delimiter = ',', default_value = "view,cart,buy")]
    behaviors: Vec<String>,
    /// `tab`, `whitespace`, or a single character.
    #[arg(long, default_value = "tab")]
    delimiter: Delimiter,
    /// Output bundle path; the ID map and statistics are written next to it.
    #[arg(long)]
    out: PathBuf,
}

/// Hyperparameter and variant overrides. Each flag beats the config file,
/// which beats the built-in default.
#[derive(Args, Clone, Default)]
struct HyperArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Embedding size [default: 64].
    #[arg(long)]
    dim: Option<usize>,
    /// Propagation layers [default: 2].
    #[arg(long)]
    layers: Option<usize>,
    /// Learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// L2 coefficient [default: 0.0001].
    #[arg(long)]
    beta: Option<f64>,
    /// Triples per task per step [default: 1024].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Maximum epochs [default: 100].
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience in epochs [default: 10].
    #[arg(long)]
    patience: Option<usize>,
    /// Node dropout rate [default: 0.1].
    #[arg(long)]
    node_dropout: Option<f64>,
    /// Message dropout rate [default: 0.1].
    #[arg(long)]
    message_dropout: Option<f64>,
    /// Random seed [default: 2023].
    #[arg(long)]
    seed: Option<u64>,
    /// Negatives per positive [default: 1].
    #[arg(long)]
    negatives: Option<usize>,
    /// `equal` or `proportional` [default: equal].
    #[arg(long)]
    task_schedule: Option<TaskSchedule>,
    /// `full` or `batch` [default: full].
    #[arg(long)]
    reg_scope: Option<RegScope>,
    /// Learn global embeddings on the unified graph [default: true].
    #[arg(long)]
    use_unified: Option<bool>,
    /// `sum`, `linear` or `adaptive` [default: adaptive].
    #[arg(long)]
    user_agg: Option<UserAggregation>,
    /// `fixed1`, `counts_only` or `learnable` [default: learnable].
    #[arg(long)]
    item_weighting: Option<ItemWeighting>,
    /// Add global embeddings to the aggregated ones [default: true].
    #[arg(long)]
    fuse_global: Option<bool>,
    /// Train every behavior as a task [default: true].
    #[arg(long)]
    multi_task: Option<bool>,
    /// Softmax query for user aggregation: `task` or `target` [default: task].
    #[arg(long)]
    delta_query: Option<DeltaQuery>,
}

impl HyperArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => {
                RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        let t = &mut config.train;
        let v = &mut config.variant;
        macro_rules! set {
            ($($flag:ident => $target:expr),* $(,)?) => {
                $(if let Some(value) = self.$flag { $target = value; })*
            };
        }
        set!(
            dim => t.dim,
            layers => t.layers,
            lr => t.learning_rate,
            beta => t.beta,
            batch_size => t.batch_size,
            epochs => t.epochs,
            patience => t.patience,
            node_dropout => t.node_dropout,
            message_dropout => t.message_dropout,
            seed => t.seed,
            negatives => t.negatives_per_positive,
            task_schedule => t.task_schedule,
            reg_scope => t.reg_scope,
            use_unified => v.use_unified,
            user_agg => v.user_agg,
            item_weighting => v.item_weighting,
            fuse_global => v.fuse_global,
            multi_task => v.multi_task,
            delta_query => v.delta_query,
        );
        config.train.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset bundle.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Grid axes such as `lr=1e-2,1e-3 beta=1e-3,1e-4`; every combination is
    /// trained and the best validation HR@10 is kept.
    #[arg(long, num_args = 1..)]
    grid: Vec<String>,
    /// Model output path.
    #[arg(long)]
    out: PathBuf,
    /// Training log path [default: <out>.log.csv].
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Cut-offs.
    #[arg(long, value_delimiter = ',', default_value = "10,20,50")]
    ks: Vec<usize>,
    /// Expected embedding size; a different model size is a mismatch.
    #[arg(long)]
    dim: Option<usize>,
    /// Rank the validation item instead of the test item.
    #[arg(long)]
    valid: bool,
    /// Also remove auxiliary-behavior training items from the candidates.
    #[arg(long)]
    exclude_auxiliary: bool,
    /// Write `metric,K,value` lines here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Run only the named row, e.g. `w/o. G`.
    #[arg(long)]
    only: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "10,20,50")]
    ks: Vec<usize>,
    /// Write the comparison as comma-separated text.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LayerSweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Depths to try.
    #[arg(long = "depths", value_delimiter = ',', default_value = "1,2,3,4")]
    depths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10,20,50")]
    ks: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ColdStartArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Number of cold-start users.
    #[arg(long, default_value_t = 1000)]
    n_cold: usize,
    /// Seed of the user selection.
    #[arg(long, default_value_t = 0)]
    mask_seed: u64,
    /// Cap `--n-cold` at half the test users on small datasets.
    #[arg(long)]
    scale_down: bool,
    #[arg(long, value_delimiter = ',', default_value = "10,20,50")]
    ks: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Raw user IDs.
    #[arg(long, value_delimiter = ',')]
    users: Vec<String>,
    /// Raw item IDs.
    #[arg(long, value_delimiter = ',')]
    items: Vec<String>,
    /// Keep only the first N coordinates.
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 100)]
    items: usize,
    #[arg(long, default_value_t = 5)]
    clusters: usize,
    #[arg(long, default_value_t = 4)]
    target_per_user: usize,
    #[arg(long, default_value_t = 3)]
    extras: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    target_in_aux: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tab-separated log output.
    #[arg(long)]
    out: PathBuf,
}

/// Exit status for an error: 2 for bad input, 3 for model/bundle mismatch,
/// 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    use mbhgcn::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Mismatch(_) => 3,
                E::MalformedLine { .. }
                | E::UnknownBehavior { .. }
                | E::EmptyTargetBehavior(_)
                | E::NotEnoughTestUsers { .. }
                | E::InvalidRate(_)
                | E::Config { .. }
                | E::Format { .. }
                | E::Io(_) => 2,
                E::NoNegativesAvailable { .. } | E::SizeLimitExceeded { .. } => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() {
            return 2;
        }
    }
    1
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".log.csv");
    PathBuf::from(name)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => commands::prepare(&a.input, &a.behaviors, a.delimiter, &a.out),
        Command::Train(a) => {
            let config = a.hyper.resolve()?;
            let log = a.log.unwrap_or_else(|| default_log_path(&a.out));
            commands::train(&a.data, config, &a.grid, &a.out, &log)
        }
        Command::Evaluate(a) => commands::evaluate(&commands::EvaluateRequest {
            data: &a.data,
            model: &a.model,
            ks: &a.ks,
            dim: a.dim,
            valid: a.valid,
            exclude_auxiliary: a.exclude_auxiliary,
            out: a.out.as_deref(),
        }),
        Command::Ablate(a) => {
            let config = a.hyper.resolve()?;
            commands::ablate(&a.data, &config, a.only.as_deref(), &a.ks, a.out.as_deref())
        }
        Command::LayerSweep(a) => {
            let config = a.hyper.resolve()?;
            if a.depths.is_empty() || a.depths.contains(&0) {
                bail!(commands::UsageError(
                    "--depths needs positive values".into()
                ));
            }
            commands::layer_sweep(&a.data, &config, &a.depths, &a.ks, a.out.as_deref())
        }
        Command::ColdStart(a) => {
            let config = a.hyper.resolve()?;
            commands::cold_start(&commands::ColdStartRequest {
                data: &a.data,
                config: &config,
                n_cold: a.n_cold,
                mask_seed: a.mask_seed,
                scale_down: a.scale_down,
                ks: &a.ks,
                out: a.out.as_deref(),
            })
        }
        Command::ExportEmbeddings(a) => {
            commands::export(&a.data, &a.model, &a.users, &a.items, a.dims, &a.out_dir)
        }
        Command::Synth(a) => commands::synth(
            &mbhgcn::synthetic::SyntheticConfig {
                users: a.users,
                items: a.items,
                clusters: a.clusters,
                target_per_user: a.target_per_user,
                extras_per_behavior: a.extras,
                noise: a.noise,
                target_in_aux: a.target_in_aux,
                seed: a.seed,
                ..Default::default()
            },
            &a.out,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
