mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ragscope::analysis::AnswerSource;
use ragscope::autograd::Activation;
use ragscope::corpus::Tier;
use ragscope::flow::{Convention, Normalization, StageMethod};
use ragscope::intervene::ProbMode;
use ragscope::kape::PositionMode;

use commands::Ctx;
use config::{ConfigFile, UsageError};

/// Default output root when `--out` is not given.
const OUT_ENV: &str = "RAGSCOPE_OUT";

#[derive(Parser)]
#[command(
    name = "ragscope",
    version,
    about = "Knowledge-flow analyses of a toy RAG transformer"
)]
struct Cli {
    /// TOML file with a table per subcommand and an optional top-level seed.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice; default 1.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; default $RAGSCOPE_OUT/<subcommand>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a fact world, its tokenizer and the QA splits.
    GenWorld(WorldFlags),
    /// Train the toy model.
    Train(TrainFlags),
    /// Score greedy answers under document settings.
    Eval(EvalFlags),
    /// Per-layer attention and saliency flow.
    Flow(FlowFlags),
    /// Segment layers into four stages from a flow profile.
    Stages(StagesFlags),
    /// Stage-wise key-to-query attention cuts; the stage x tier heatmap.
    Intervene(IntervenFlags),
    /// Activation-probability entropy and knowledge-neuron selection.
    Kape(KapeFlags),
    /// Answer with neuron sets deactivated.
    Deactivate(DeactivateFlags),
    /// Layerwise logits of the internal and external answers.
    Logitlens(LensFlags),
    /// Every analysis on a trained model directory.
    Report(ReportFlags),
}

impl Command {
    const NAMES: [&'static str; 10] = [
        "gen-world",
        "train",
        "eval",
        "flow",
        "stages",
        "intervene",
        "kape",
        "deactivate",
        "logitlens",
        "report",
    ];

    fn name(&self) -> &'static str {
        let i = match self {
            Command::GenWorld(_) => 0,
            Command::Train(_) => 1,
            Command::Eval(_) => 2,
            Command::Flow(_) => 3,
            Command::Stages(_) => 4,
            Command::Intervene(_) => 5,
            Command::Kape(_) => 6,
            Command::Deactivate(_) => 7,
            Command::Logitlens(_) => 8,
            Command::Report(_) => 9,
        };
        Self::NAMES[i]
    }
}

#[derive(Args, Serialize)]
struct ModelFlags {
    /// Weight file written by `train`.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Default: tokenizer.json next to the weights.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// JSON prompt templates.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct WorldFlags {
    #[arg(long)]
    entities: Option<usize>,
    #[arg(long)]
    relations: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    context: Option<f64>,
}

#[derive(Args, Serialize)]
struct TrainFlags {
    /// World file from `gen-world`.
    #[arg(long)]
    world: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    shape: WorldFlags,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    copy_drills: Option<usize>,
}

#[derive(Args, Serialize)]
struct EvalFlags {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelFlags,
    /// QA JSONL.
    #[arg(long)]
    data: Option<PathBuf>,
    /// `closed_book` or tier names, comma separated.
    #[arg(long, value_delimiter = ',')]
    documents: Option<Vec<String>>,
    /// JSON neuron set to deactivate.
    #[arg(long)]
    deactivate: Option<PathBuf>,
    #[arg(long)]
    max_new: Option<usize>,
}

#[derive(Args, Serialize)]
struct FlowFlags {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelFlags,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    tier: Option<Tier>,
    #[arg(long)]
    convention: Option<Convention>,
    #[arg(long)]
    normalization: Option<Normalization>,
    /// Multiplier on the loss whose gradient drives saliency.
    #[arg(long)]
    loss_scale: Option<f64>,
}

#[derive(Args, Serialize)]
struct StagesFlags {
    /// flow_profile.json from `flow`.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    method: Option<StageMethod>,
    #[arg(long)]
    curve: Option<String>,
}

#[derive(Args, Serialize)]
struct IntervenFlags {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelFlags,
    #[arg(long)]
    data: Option<PathBuf>,
    /// stages.json from `stages`.
    #[arg(long)]
    stages: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    tiers: Option<Vec<Tier>>,
    #[arg(long)]
    prob_mode: Option<ProbMode>,
}

#[derive(Args, Serialize)]
struct KapeFlags {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelFlags,
    /// Examples answered closed-book.
    #[arg(long)]
    ik_data: Option<PathBuf>,
    /// Examples answered with their positive passage.
    #[arg(long)]
    ek_data: Option<PathBuf>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    min_raw: Option<f64>,
    #[arg(long)]
    positions: Option<PositionMode>,
    /// `reference` or `generated` answers at the counted positions.
    #[arg(long)]
    answers: Option<AnswerSource>,
}

#[derive(Args, Serialize)]
struct DeactivateFlags {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelFlags,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    document: Option<String>,
    /// ik_neurons.json from `kape`.
    #[arg(long)]
    ik: Option<PathBuf>,
    /// ek_neurons.json from `kape`.
    #[arg(long)]
    ek: Option<PathBuf>,
    #[arg(long)]
    random_baseline: Option<bool>,
}

#[derive(Args, Serialize)]
struct LensFlags {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelFlags,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    tier: Option<Tier>,
}

#[derive(Args, Serialize)]
struct ReportFlags {
    /// Output directory of `train`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    convention: Option<Convention>,
    #[arg(long)]
    normalization: Option<Normalization>,
    #[arg(long)]
    stage_method: Option<StageMethod>,
    #[arg(long, value_delimiter = ',')]
    tiers: Option<Vec<Tier>>,
    #[arg(long)]
    prob_mode: Option<ProbMode>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    min_raw: Option<f64>,
    #[arg(long)]
    positions: Option<PositionMode>,
    /// `reference` or `generated` answers at the counted positions.
    #[arg(long)]
    answers: Option<AnswerSource>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let name = cli.command.name();
    let file = ConfigFile::load(cli.config.as_deref(), &Command::NAMES)?;
    check_sections(&file)?;
    let out = match cli.out {
        Some(p) => p,
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("ragscope-out"))
            .join(name),
    };
    let ctx = Ctx {
        seed: cli.seed.or(file.seed).unwrap_or(1),
        out,
        config_file: file.path.clone(),
    };
    match &cli.command {
        Command::GenWorld(f) => commands::gen_world(&ctx, &file.resolve(name, f)?),
        Command::Train(f) => commands::train(&ctx, &file.resolve(name, f)?),
        Command::Eval(f) => commands::eval(&ctx, &file.resolve(name, f)?),
        Command::Flow(f) => commands::flow(&ctx, &file.resolve(name, f)?),
        Command::Stages(f) => commands::stages(&ctx, &file.resolve(name, f)?),
        Command::Intervene(f) => commands::intervene(&ctx, &file.resolve(name, f)?),
        Command::Kape(f) => commands::kape(&ctx, &file.resolve(name, f)?),
        Command::Deactivate(f) => commands::deactivate(&ctx, &file.resolve(name, f)?),
        Command::Logitlens(f) => commands::logitlens(&ctx, &file.resolve(name, f)?),
        Command::Report(f) => commands::full_report(&ctx, &file.resolve(name, f)?),
    }
}

/// Validates every table of the config file, not only the one in use.
fn check_sections(file: &ConfigFile) -> anyhow::Result<()> {
    use commands::*;
    file.check::<WorldCfg>("gen-world")?;
    file.check::<TrainCfg>("train")?;
    file.check::<EvalCfg>("eval")?;
    file.check::<FlowCfg>("flow")?;
    file.check::<StagesCfg>("stages")?;
    file.check::<IntervenCfg>("intervene")?;
    file.check::<KapeCfg>("kape")?;
    file.check::<DeactivateCfg>("deactivate")?;
    file.check::<LensCfg>("logitlens")?;
    file.check::<ReportCfg>("report")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("run with --help for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = if msg.is_empty() {
                        cause
                    } else {
                        format!("{msg}: {cause}")
                    };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
