//! `unfold` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use unfold_core::fitting::{ablation_preset, derive_seed, FitConfig, FitReport, Fitter, ABLATION_PRESETS};
use unfold_core::objectives::ImageLossMode;
use unfold_core::phantom::{drop_segment, generate, PhantomKind, PhantomSpec};
use unfold_core::render::{compute_metrics, render, write_outputs, MetricsRecord, RenderConfig, RELEVANT_RADIUS_MM};
use unfold_core::{NeuralField, TargetSet, UnfoldError, Volume, VolumeKind};

const PHANTOM_STREAM: u64 = 16;
const DROP_STREAM: u64 = 17;

#[derive(Parser, Debug)]
#[command(name = "unfold", version, about = "Unfold sparse 3D target structures into 2D images")]
struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Master seed; split deterministically into all module seeds.
    #[arg(long, global = true, value_name = "SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom (volume, targets, optional mask).
    Phantom(PhantomArgs),
    /// Fit a deformation field to a target set.
    Fit(FitArgs),
    /// Render an unfolded image from a checkpoint.
    Render(RenderArgs),
    /// Compute distortion and distance metrics for a checkpoint.
    Metrics(MetricsArgs),
    /// Run a named comparison grid and write a comparison JSON.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// planar_sine, helix, bifurcation_y, ring or organ_ellipsoid.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Remove a contiguous run of this fraction of the targets; the removed
    /// points go to `removed_targets.csv`.
    #[arg(long)]
    drop_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct FitInputs {
    /// Volume JSON sidecar.
    #[arg(long)]
    volume: PathBuf,
    /// Targets CSV (x_mm,y_mm,z_mm).
    #[arg(long)]
    targets: PathBuf,
    /// Binary mask volume sidecar, needed for the mask-coverage loss.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// none, sink or mask_coverage.
    #[arg(long, value_name = "MODE")]
    image_loss: Option<String>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    inputs: FitInputs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderOptions {
    #[arg(long, default_value_t = 0.5)]
    pixel_spacing: f64,
    /// Intensity window for the 16-bit image.
    #[arg(long, num_args = 2, value_names = ["LOW", "HIGH"], allow_negative_numbers = true)]
    window: Option<Vec<f64>>,
}

impl RenderOptions {
    fn config(&self) -> RenderConfig {
        let mut cfg = RenderConfig { pixel_spacing_mm: self.pixel_spacing, ..RenderConfig::default() };
        if let Some(w) = &self.window {
            cfg.window = [w[0], w[1]];
        }
        cfg
    }
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    render: RenderOptions,
    #[arg(long)]
    no_coordinate_map: bool,
    #[arg(long)]
    no_distortion_map: bool,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    targets: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = RELEVANT_RADIUS_MM)]
    radius: f64,
    #[command(flatten)]
    render: RenderOptions,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// regularizer, importance_map or sampler.
    #[arg(long)]
    preset: String,
    #[command(flatten)]
    inputs: FitInputs,
    /// Extra targets to score against each arm's rendering (not fitted).
    #[arg(long)]
    eval_targets: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(UnfoldError),
}

impl From<UnfoldError> for CliError {
    fn from(e: UnfoldError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Phantom(a) => cmd_phantom(a, cli.seed),
        Command::Fit(a) => cmd_fit(a, cli.seed),
        Command::Render(a) => cmd_render(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Ablate(a) => cmd_ablate(a, cli.seed),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Core(UnfoldError::Io { path: dir.to_path_buf(), source: e }))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text + "\n").map_err(|e| CliError::Core(UnfoldError::Io { path: path.to_path_buf(), source: e }))
}

fn cmd_phantom(a: PhantomArgs, seed: Option<u64>) -> CliResult<()> {
    let kind: PhantomKind = a.kind.parse().map_err(|_| {
        CliError::Usage(format!(
            "unknown phantom kind `{}` (planar_sine, helix, bifurcation_y, ring, organ_ellipsoid)",
            a.kind
        ))
    })?;
    let mut spec = PhantomSpec::new(kind);
    if let Some(s) = a.noise_sigma {
        spec.noise_sigma = s;
    }
    let master = seed.unwrap_or(0);
    spec.seed = derive_seed(master, PHANTOM_STREAM);
    let phantom = generate(&spec)?;
    phantom.save(&a.out)?;
    let mut resolved = json!({ "command": "phantom", "master_seed": master, "phantom": spec });
    if let Some(fraction) = a.drop_fraction {
        let (kept, removed) = drop_segment(&phantom.targets, fraction, derive_seed(master, DROP_STREAM))?;
        kept.save_csv(&a.out.join("targets.csv"))?;
        removed.save_csv(&a.out.join("removed_targets.csv"))?;
        resolved["drop_fraction"] = json!(fraction);
    }
    write_json(&a.out.join("resolved_config.json"), &resolved)
}

fn build_config(inputs: &FitInputs, seed: Option<u64>) -> CliResult<FitConfig> {
    let mut cfg = match &inputs.config {
        Some(path) => FitConfig::load(path)?,
        None => FitConfig::default(),
    };
    if let Some(mode) = &inputs.image_loss {
        let m: ImageLossMode = serde_json::from_value(json!(mode))
            .map_err(|_| CliError::Usage(format!("unknown image loss `{mode}` (none, sink, mask_coverage)")))?;
        cfg.image_loss = m;
    }
    for kv in &inputs.overrides {
        cfg.apply_override(kv).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

struct LoadedInputs {
    volume: Volume,
    targets: TargetSet,
    mask: Option<Volume>,
}

fn load_inputs(inputs: &FitInputs) -> CliResult<LoadedInputs> {
    Ok(LoadedInputs {
        volume: Volume::load(&inputs.volume, VolumeKind::Intensity)?,
        targets: TargetSet::load_csv(&inputs.targets)?,
        mask: inputs.mask.as_ref().map(|m| Volume::load(m, VolumeKind::Mask)).transpose()?,
    })
}

fn fit_to_dir(cfg: &FitConfig, data: &LoadedInputs, out: &Path) -> CliResult<(NeuralField, FitReport)> {
    create_dir(out)?;
    let mut fitter = Fitter::new(cfg.clone(), &data.volume, &data.targets, data.mask.as_ref())?
        .with_checkpoints(out.join("checkpoints"));
    log::info!("fitting {} targets for {} epochs", data.targets.len(), cfg.epochs);
    fitter.run()?;
    let (field, report) = fitter.finish();
    field.save_checkpoint(&out.join("checkpoint.json"))?;
    report.save(&out.join("fit_report.json"))?;
    Ok((field, report))
}

fn cmd_fit(a: FitArgs, seed: Option<u64>) -> CliResult<()> {
    let cfg = build_config(&a.inputs, seed)?;
    let data = load_inputs(&a.inputs)?;
    create_dir(&a.out)?;
    write_json(
        &a.out.join("resolved_config.json"),
        &json!({
            "command": "fit",
            "volume": a.inputs.volume,
            "targets": a.inputs.targets,
            "mask": a.inputs.mask,
            "fit": cfg.resolved(),
        }),
    )?;
    fit_to_dir(&cfg, &data, &a.out)?;
    Ok(())
}

fn cmd_render(a: RenderArgs) -> CliResult<()> {
    let mut cfg = a.render.config();
    cfg.emit_coordinate_map = !a.no_coordinate_map;
    cfg.emit_distortion_map = !a.no_distortion_map;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let field = NeuralField::load_checkpoint(&a.checkpoint)?;
    let volume = Volume::load(&a.volume, VolumeKind::Intensity)?;
    let result = render(&field, &volume, &cfg)?;
    write_outputs(&result, &a.out, &cfg)?;
    write_json(
        &a.out.join("resolved_config.json"),
        &json!({
            "command": "render",
            "checkpoint": a.checkpoint,
            "volume": a.volume,
            "render": cfg,
            "width": result.width,
            "height": result.height,
        }),
    )
}

fn cmd_metrics(a: MetricsArgs) -> CliResult<()> {
    let cfg = a.render.config();
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if !(a.radius > 0.0) {
        return Err(CliError::Usage("--radius must be positive".into()));
    }
    let field = NeuralField::load_checkpoint(&a.checkpoint)?;
    let volume = Volume::load(&a.volume, VolumeKind::Intensity)?;
    let targets = TargetSet::load_csv(&a.targets)?;
    let mask = a.mask.as_ref().map(|m| Volume::load(m, VolumeKind::Mask)).transpose()?;
    let result = render(&field, &volume, &cfg)?;
    let metrics = compute_metrics(&result, targets.points(), a.radius, mask.as_ref())?;
    create_dir(&a.out)?;
    metrics.save(&a.out.join("metrics.json"))?;
    write_json(
        &a.out.join("resolved_config.json"),
        &json!({
            "command": "metrics",
            "checkpoint": a.checkpoint,
            "volume": a.volume,
            "targets": a.targets,
            "mask": a.mask,
            "radius_mm": a.radius,
            "render": cfg,
        }),
    )
}

#[derive(Serialize)]
struct ArmSummary {
    name: &'static str,
    overrides: &'static [&'static str],
    metrics: MetricsRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_metrics: Option<MetricsRecord>,
    epochs_run: usize,
    stop_epoch: Option<usize>,
    wall_time_s: f64,
}

fn cmd_ablate(a: AblateArgs, seed: Option<u64>) -> CliResult<()> {
    let arms = ablation_preset(&a.preset).ok_or_else(|| {
        CliError::Usage(format!("unknown preset `{}` ({})", a.preset, ABLATION_PRESETS.join(", ")))
    })?;
    let base = build_config(&a.inputs, seed)?;
    let data = load_inputs(&a.inputs)?;
    let eval = a.eval_targets.as_ref().map(|p| TargetSet::load_csv(p)).transpose()?;
    let render_cfg = RenderConfig::default();
    create_dir(&a.out)?;

    let mut summaries = Vec::new();
    let mut resolved = Vec::new();
    for arm in arms {
        let mut cfg = base.clone();
        for kv in arm.overrides {
            cfg.apply_override(kv).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let dir = a.out.join(arm.name);
        create_dir(&dir)?;
        write_json(&dir.join("resolved_config.json"), &json!({ "command": "fit", "fit": cfg.resolved() }))?;
        eprintln!("[{}] {} ...", a.preset, arm.name);
        let (field, report) = fit_to_dir(&cfg, &data, &dir)?;
        let result = render(&field, &data.volume, &render_cfg)?;
        let metrics = compute_metrics(&result, data.targets.points(), RELEVANT_RADIUS_MM, data.mask.as_ref())?;
        metrics.save(&dir.join("metrics.json"))?;
        let eval_metrics = eval
            .as_ref()
            .map(|t| compute_metrics(&result, t.points(), RELEVANT_RADIUS_MM, None))
            .transpose()?;
        resolved.push(json!({ "name": arm.name, "fit": cfg.resolved() }));
        summaries.push(ArmSummary {
            name: arm.name,
            overrides: arm.overrides,
            metrics,
            eval_metrics,
            epochs_run: report.epochs_run,
            stop_epoch: report.stop_epoch,
            wall_time_s: report.wall_time_s,
        });
    }
    write_json(
        &a.out.join("resolved_config.json"),
        &json!({
            "command": "ablate",
            "preset": a.preset,
            "volume": a.inputs.volume,
            "targets": a.inputs.targets,
            "mask": a.inputs.mask,
            "arms": resolved,
        }),
    )?;
    write_json(&a.out.join("comparison.json"), &json!({ "preset": a.preset, "arms": summaries }))
}
