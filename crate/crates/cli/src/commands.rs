use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use aifopt_core::deconv::deconvolve_volume_with;
use aifopt_core::grad::{default_healthy_mask, max_relative_error};
use aifopt_core::metrics::{evaluate, EvaluationReport};
use aifopt_core::optim::{dice_at, init_aif, init_gamma_default, optimize_aif, AifStart, InitStrategy, OptimizerConfig, Parameterization};
use aifopt_core::phantom::{generate, PhantomSpec};
use aifopt_core::smoothing::{smooth, SmoothingRadii};
use aifopt_core::{backward, finite_difference_gradient, forward_with_tape, normalize_rcbf, BinaryMask3D, FilterMode, GammaVariateParams, PipelineConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::CliError;
use crate::format::{encode_map, read_mask, read_volume, write_bytes, write_mask, write_volume};
use crate::tables::{encode_jsonl, read_curve, read_json, to_json_pretty, write_curve};

#[derive(Debug, Parser)]
#[command(name = "aifopt", version, about = "Perfusion deconvolution and AIF optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom with known AIF and lesion mask.
    Phantom(PhantomArgs),
    /// Deconvolve a volume with an AIF and write the rCBF map.
    Deconvolve(DeconvolveArgs),
    /// Optimize the AIF against a ground-truth lesion mask.
    OptimizeAif(OptimizeArgs),
    /// Compare the analytic AIF gradient with central differences.
    Gradcheck(GradcheckArgs),
    /// Score an rCBF map against a ground-truth mask.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FilterArg {
    RelativeToLargest,
    PerIndex,
}

impl From<FilterArg> for FilterMode {
    fn from(f: FilterArg) -> Self {
        match f {
            FilterArg::RelativeToLargest => FilterMode::RelativeToLargest,
            FilterArg::PerIndex => FilterMode::PerIndex,
        }
    }
}

fn parse_radii(s: &str) -> Result<SmoothingRadii, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [t, z, y, x] => Ok(SmoothingRadii { t, z, y, x }),
        _ => Err(format!("expected four radii t,z,y,x, got {}", parts.len())),
    }
}

#[derive(Debug, Args)]
pub struct VolumeArgs {
    #[arg(long)]
    pub vol: PathBuf,
    /// Restrict processing to this mask (default: all voxels).
    #[arg(long)]
    pub brain_mask: Option<PathBuf>,
    /// Boxcar radii `t,z,y,x` applied before deconvolution.
    #[arg(long, value_parser = parse_radii)]
    pub smooth: Option<SmoothingRadii>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DeconvolveArgs {
    #[command(flatten)]
    pub input: VolumeArgs,
    #[arg(long)]
    pub aif: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    pub lambda_rel: f64,
    #[arg(long, value_enum, default_value = "relative-to-largest")]
    pub filter_mode: FilterArg,
    /// Reference tissue for rCBF (default: the brain mask).
    #[arg(long)]
    pub healthy_mask: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub input: VolumeArgs,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from this curve instead of the configured init strategy.
    #[arg(long)]
    pub init_aif: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub input: VolumeArgs,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub aif: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Pipeline settings as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub rcbf: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub brain_mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0.38)]
    pub cutoff: f64,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Contents of the `optimize-aif --config` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeFile {
    pub optimizer: OptimizerConfig,
    pub pipeline: PipelineConfig,
    pub init: Option<InitStrategy>,
    /// Explicit gamma-variate start for the gamma parameterization.
    pub gamma_start: Option<GammaVariateParams>,
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Deconvolve(a) => deconvolve(a),
        Command::OptimizeAif(a) => optimize(a, stdout),
        Command::Gradcheck(a) => gradcheck(a, stdout),
        Command::Evaluate(a) => evaluate_cmd(a, stdout),
    }
}

fn emit(bytes: &[u8], path: Option<&Path>, stdout: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => write_bytes(p, bytes),
        None => stdout.write_all(bytes).map_err(|source| CliError::Io {
            path: PathBuf::from("<stdout>"),
            source,
        }),
    }
}

fn load_volume(a: &VolumeArgs) -> Result<aifopt_core::Volume4D, CliError> {
    let brain = a.brain_mask.as_deref().map(read_mask).transpose()?;
    read_volume(&a.vol, brain)
}

fn phantom(a: PhantomArgs) -> Result<(), CliError> {
    let mut spec: PhantomSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => PhantomSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let case = generate(&spec)?;
    fs::create_dir_all(&a.out_dir).map_err(|source| CliError::Io {
        path: a.out_dir.clone(),
        source,
    })?;
    write_volume(&case.volume, &a.out_dir.join("volume.p4d"))?;
    write_mask(&case.gt_mask, spec.spacing, &a.out_dir.join("gt.mask"))?;
    write_mask(&case.healthy_mask, spec.spacing, &a.out_dir.join("healthy.mask"))?;
    write_curve(&case.true_aif, &a.out_dir.join("true_aif.csv"))
}

fn deconvolve(a: DeconvolveArgs) -> Result<(), CliError> {
    let mut vol = load_volume(&a.input)?;
    let aif = read_curve(&a.aif)?;
    if let Some(r) = a.input.smooth {
        vol = smooth(&vol, r)?;
    }
    let healthy = match &a.healthy_mask {
        Some(p) => read_mask(p)?,
        None => vol.brain_mask().clone(),
    };
    let cbf = deconvolve_volume_with(&vol, &aif, a.lambda_rel, a.filter_mode.into())?;
    let rcbf = normalize_rcbf(&cbf, &healthy)?;
    write_bytes(&a.out, &encode_map(&rcbf, vol.spacing()))
}

fn pipeline_with_smoothing(mut p: PipelineConfig, smooth: Option<SmoothingRadii>) -> PipelineConfig {
    if smooth.is_some() {
        p.smoothing = smooth;
    }
    p
}

fn optimize(a: OptimizeArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let file: OptimizeFile = match &a.config {
        Some(p) => read_json(p)?,
        None => OptimizeFile::default(),
    };
    let vol = load_volume(&a.input)?;
    let gt = read_mask(&a.gt)?;
    let pipeline = pipeline_with_smoothing(file.pipeline, a.input.smooth);
    let mut config = file.optimizer.clone();
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let start = match (&a.init_aif, config.parameterization) {
        (Some(p), _) => AifStart::Samples(read_curve(p)?),
        (None, Parameterization::GammaVariate) => match file.gamma_start {
            Some(p) => AifStart::Gamma(p),
            None => AifStart::Gamma(init_gamma_default(&vol)?),
        },
        (None, Parameterization::FreeVector) => {
            AifStart::Samples(init_aif(&vol, file.init.unwrap_or(InitStrategy::GammaDefault))?)
        }
    };
    let initial = match &start {
        AifStart::Samples(c) => c.clone(),
        AifStart::Gamma(p) => aifopt_core::gamma_variate(*p, vol.axis())?,
    };
    let trace = optimize_aif(&vol, &gt, &start, &config, &pipeline)?;
    write_curve(&trace.final_aif, &a.out)?;
    if let Some(p) = &a.trace {
        write_bytes(p, &encode_jsonl(&trace.records))?;
    }
    let summary = json!({
        "iterations": trace.records.len(),
        "initial_loss": trace.records.first().map(|r| r.loss),
        "final_loss": trace.records.last().map(|r| r.loss),
        "initial_dice": dice_at(&initial, &vol, &gt, &pipeline)?,
        "final_dice": dice_at(&trace.final_aif, &vol, &gt, &pipeline)?,
        "converged": trace.converged,
        "stop": trace.stop,
        "final_params": trace.final_params,
    });
    emit(&to_json_pretty(&summary), None, stdout)
}

fn gradcheck(a: GradcheckArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let vol = load_volume(&a.input)?;
    let gt = read_mask(&a.gt)?;
    let aif = read_curve(&a.aif)?;
    let base: PipelineConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    let cfg = pipeline_with_smoothing(base, a.input.smooth);
    let (loss, tape) = forward_with_tape(&vol, &aif, &cfg, &gt)?;
    let g = backward(&tape)?;
    let fd = finite_difference_gradient(&vol, &aif, &cfg, &gt, a.h)?;
    let err = max_relative_error(&g.values, &fd.values);
    let passed = err <= a.tolerance;
    let report = json!({
        "max_relative_error": err,
        "tolerance": a.tolerance,
        "h": a.h,
        "passed": passed,
        "loss": loss,
        "healthy_voxels": default_healthy_mask(&vol, &gt)?.count(),
        "repeated_singular_values": g.warnings.repeated_singular_values,
        "tied_argmax_voxels": g.warnings.tied_argmax_voxels,
        "gradient": g.values,
        "finite_difference": fd.values,
    });
    emit(&to_json_pretty(&report), a.report.as_deref(), stdout)?;
    if passed {
        Ok(())
    } else {
        Err(CliError::GradCheck {
            error: err,
            tolerance: a.tolerance,
        })
    }
}

/// Flat JSON object; undefined metrics are `null` with a `<name>_reason`.
pub fn report_json(r: &EvaluationReport) -> Value {
    let mut m = Map::new();
    m.insert("auc".into(), json!(r.auc));
    m.insert("dice".into(), json!(r.dice));
    m.insert("jaccard".into(), json!(r.jaccard));
    m.insert("hd95_mm".into(), json!(r.hd95_mm));
    m.insert("volume_pred_ml".into(), json!(r.volume_pred_ml));
    m.insert("volume_gt_ml".into(), json!(r.volume_gt_ml));
    m.insert("both_empty".into(), json!(r.both_empty));
    for (name, why) in &r.undefined {
        m.insert(format!("{name}_reason"), json!(why));
    }
    Value::Object(m)
}

fn evaluate_cmd(a: EvaluateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let valid: Option<BinaryMask3D> = a.brain_mask.as_deref().map(read_mask).transpose()?;
    let bytes = crate::format::read_bytes(&a.rcbf)?;
    let (rcbf, spacing) = crate::format::decode_map(&bytes, valid).map_err(|e| e.at(&a.rcbf))?;
    let gt = read_mask(&a.gt)?;
    let report = evaluate(&rcbf, &gt, a.cutoff, spacing)?;
    emit(&to_json_pretty(&report_json(&report)), a.report.as_deref(), stdout)
}
