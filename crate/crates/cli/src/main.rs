mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Depth supervision from optical flow: synthetic scenes, loss evaluation,
/// direct depth optimisation and evaluation.
///
/// Every command prints a JSON document with its result and a provenance
/// record (configuration hash, seed, tool version) to stdout. Exit status is
/// 0 on success, 1 on a runtime failure and 2 on a usage error.
#[derive(Parser, Debug)]
#[command(name = "flowdepth", version)]
pub struct Cli {
    /// Worker threads for data-parallel loops (defaults to all cores).
    #[arg(long, global = true, env = "FLOWDEPTH_THREADS")]
    pub threads: Option<usize>,

    /// Seed override for commands that draw random numbers.
    #[arg(long, global = true, env = "FLOWDEPTH_SEED")]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a planar scene and write its image, depth, flow and mask bundle.
    Synth(SynthArgs),
    /// Print the loss breakdown of a depth map on a scene, or of a flow field
    /// between two images.
    LossEval(LossEvalArgs),
    /// Recover depth on a scene by direct descent on the depth objective.
    Optimize(OptimizeArgs),
    /// Median-scaled depth metrics of a prediction against ground truth.
    EvalDepth(EvalDepthArgs),
    /// Compare rigid flow from depth and pose with the scene's analytic flow,
    /// or a flow file with that analytic flow.
    FlowCheck(FlowCheckArgs),
    /// Finite-difference check of the analytic loss gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    TexturedTwoPlane,
    LowTexture,
}

#[derive(Args, Debug)]
#[group(id = "scene_source", required = true, multiple = false)]
pub struct SceneSource {
    /// Scene description (JSON).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Built-in scene.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub source: SceneSource,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LossEvalArgs {
    /// Scene description; the depth objective is evaluated on it.
    #[arg(long, conflicts_with_all = ["target", "source", "flow"])]
    pub scene: Option<PathBuf>,
    /// Depth map (PFM) to evaluate; the scene's true depth when omitted.
    #[arg(long, requires = "scene")]
    pub depth: Option<PathBuf>,
    /// Drop the analytic flow supervision from the scene objective.
    #[arg(long, requires = "scene")]
    pub unsupervised: bool,
    /// Target image (PGM, PPM or PFM) for the flow objective.
    #[arg(long, requires_all = ["source", "flow"])]
    pub target: Option<PathBuf>,
    /// Source image for the flow objective.
    #[arg(long, requires = "target")]
    pub source: Option<PathBuf>,
    /// Target-to-source flow (.flo) for the flow objective.
    #[arg(long, requires = "target")]
    pub flow: Option<PathBuf>,
    /// Loss configuration (JSON).
    #[arg(long)]
    pub loss_config: Option<PathBuf>,
    /// Keypoint and feature-pyramid configuration (JSON).
    #[arg(long)]
    pub front_end: Option<PathBuf>,
    /// Also write the breakdown to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OptimizeArgs {
    /// Experiment manifest (JSON); replaces the other input options.
    #[arg(long, conflicts_with_all = ["scene", "loss_config", "optim_config", "front_end"])]
    pub manifest: Option<PathBuf>,
    /// Scene description (JSON).
    #[arg(long, required_unless_present = "manifest")]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub loss_config: Option<PathBuf>,
    /// Optimizer configuration (JSON).
    #[arg(long)]
    pub optim_config: Option<PathBuf>,
    #[arg(long)]
    pub front_end: Option<PathBuf>,
    /// Override the iteration budget.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Drop the analytic flow supervision.
    #[arg(long)]
    pub unsupervised: bool,
    /// Final depth map (PFM).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-iteration loss trace (JSON).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Metrics and stop reason (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalDepthArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Evaluation mask (PGM, non-zero = evaluated).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub min_depth: Option<f64>,
    #[arg(long)]
    pub max_depth: Option<f64>,
    /// Compare raw depths instead of median-scaled ones.
    #[arg(long)]
    pub no_scaling: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FlowCheckArgs {
    /// Scene description (JSON).
    #[arg(long)]
    pub scene: PathBuf,
    /// Flow to compare with the analytic flow; rigid flow from the true depth
    /// and pose when omitted.
    #[arg(long)]
    pub flow: Option<PathBuf>,
    /// Largest accepted endpoint error in pixels.
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Term to check, or `all`.
    #[arg(long, default_value = "all", value_parser = term_name)]
    pub term: String,
    /// Random states per term.
    #[arg(long)]
    pub states: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn term_name(s: &str) -> Result<String, String> {
    if s == "all" || flowdepth::gradcheck::GradTerm::parse(s).is_some() {
        return Ok(s.to_string());
    }
    let names: Vec<&str> = flowdepth::gradcheck::GradTerm::ALL.iter().map(|t| t.name()).collect();
    Err(format!("expected all or one of {}", names.join(", ")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
