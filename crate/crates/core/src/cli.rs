//! `cal` command line.
//!
//! Single-result commands (`encode`, `decode`, `fit-gmm`) print JSON to
//! standard output or to the file given by `--out`. Experiment commands
//! (`train-toy`, `sweep`, `ablate`, `eval`) write their CSV/JSON files into the
//! directory given by `--out`, falling back to `$CAL_OUT_DIR` and then
//! `./cal-out`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data
//! error. Failures print one JSON line `{"error": {"kind", "message"}}` to
//! standard error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::codec::{
    decode_argmax, decode_with_offset, encode_joint, DEFAULT_RADIUS, DEFAULT_SIGMA,
};
use crate::error::{file_err, Error, Result};
use crate::geometry::{
    to_input_coords, Batch, Cell, GridSpec, Heatmap, JointTarget, OffsetField, Vec2,
};
use crate::gmm::{em_fit, sample_stencil, EmConfig, GaussianMixture, MaskStencil};
use crate::harness::{
    evaluate_documents, run_ablation, step_rows, sweep_resolution, synthetic_batch, train_toy,
    write_csv, write_json, AblationAxis, HeatmapType, Mode, OffsetLossKind, OffsetMask,
    PipelineConfig, SynthData, SCHEMA_VERSION,
};
use crate::ingest::{load_coco_keypoints, read_coco_document};

/// Default output directory for experiment commands.
pub const OUT_DIR_ENV: &str = "CAL_OUT_DIR";
const FALLBACK_OUT_DIR: &str = "cal-out";

#[derive(Debug, Parser)]
#[command(
    name = "cal",
    version,
    about = "Confidence-aware keypoint encoding, masks and experiments"
)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file (encode, decode, fit-gmm) or directory (other commands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Pipeline configuration file (.toml, otherwise JSON); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode joints (heatmap-cell units) into heatmaps and offset fields.
    Encode(EncodeArgs),
    /// Decode a serialized heatmap (and optional offset field).
    Decode(DecodeArgs),
    /// Fit a displacement mixture and sample its mask stencil.
    FitGmm(FitGmmArgs),
    /// Two-stage toy training on free prediction tensors.
    TrainToy(TrainArgs),
    /// Decode error across input resolutions.
    Sweep(SweepArgs),
    /// Compare pipeline variants along one axis.
    Ablate(AblateArgs),
    /// OKS/AP of predicted COCO keypoints against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Clone)]
struct GridArgs {
    /// Heatmap width in cells.
    #[arg(long)]
    width: Option<usize>,
    /// Heatmap height in cells.
    #[arg(long)]
    height: Option<usize>,
    /// Input pixels per heatmap cell.
    #[arg(long)]
    stride: Option<f64>,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    /// Joint position `X,Y` in heatmap cells; repeatable.
    #[arg(long = "joint", required = true, value_parser = parse_point)]
    joints: Vec<(f64, f64)>,
    #[command(flatten)]
    grid: GridArgs,
    /// Gaussian sigma in cells.
    #[arg(long)]
    sigma: Option<f64>,
    /// Disc radius in cells.
    #[arg(long)]
    radius: Option<f64>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// JSON object (or array of objects) with `heatmap` (or `weighted`) and
    /// optional `offsets`; `encode` output is accepted as is.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Debug, Args)]
struct FitGmmArgs {
    /// JSON array of displacements, each `[dx, dy]` or `{"x": .., "y": ..}`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Stencil radius; defaults to `ceil(radius)` of the configuration.
    #[arg(long)]
    stencil_radius: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Debug, Args, Clone)]
struct PipelineArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Gaussian sigma in cells.
    #[arg(long)]
    sigma: Option<f64>,
    /// Disc radius in cells.
    #[arg(long)]
    radius: Option<f64>,
    /// Weight of the offset term.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    heatmap_type: Option<HeatmapTypeArg>,
    #[arg(long, value_enum)]
    offset_loss: Option<OffsetLossArg>,
    #[arg(long, value_enum)]
    offset_mask: Option<OffsetMaskArg>,
    /// Mixture components for the stage-2 masks.
    #[arg(long)]
    components: Option<usize>,
    /// Steps with target-Gaussian offset masks.
    #[arg(long)]
    stage1_steps: Option<usize>,
    /// Steps with the configured offset mask.
    #[arg(long)]
    stage2_steps: Option<usize>,
    /// Step size.
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Args, Clone)]
struct DataArgs {
    /// Synthetic samples per batch.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Joints per synthetic sample.
    #[arg(long, default_value_t = 17)]
    joints: usize,
    /// Train on the keypoints of this COCO file instead of synthetic data.
    #[arg(long)]
    coco: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Input sizes `WxH`, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_size, default_value = "64x48,128x96,256x192")]
    resolutions: Vec<(usize, usize)>,
    #[arg(
        long,
        value_delimiter = ',',
        value_enum,
        default_value = "heatmap-only,offset"
    )]
    modes: Vec<ModeArg>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 17)]
    joints: usize,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    axis: AxisArg,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Ground-truth COCO keypoint file.
    #[arg(long)]
    gt: PathBuf,
    /// Predicted keypoints in the same format.
    #[arg(long)]
    pred: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum HeatmapTypeArg {
    Binary,
    GaussianWeighted,
    PlainGaussian,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OffsetLossArg {
    L1,
    SmoothL1,
    L2,
    None,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OffsetMaskArg {
    Binary,
    TargetG,
    Mgm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    HeatmapOnly,
    Offset,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    MaskType,
    HeatmapType,
    LossType,
    Strategy,
    Components,
}

fn parse_point(s: &str) -> std::result::Result<(f64, f64), String> {
    let (x, y) = s.split_once(',').ok_or("expected X,Y")?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(x)?, parse(y)?))
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(w)?, parse(h)?))
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            report_error("usage", &e.kind().to_string(), &first_line(&e.to_string()));
            return 1;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            report_error(e.kind(), "", &e.to_string());
            match e {
                Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn first_line(s: &str) -> String {
    s.lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or_default()
        .trim_start_matches("error: ")
        .to_string()
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    #[serde(skip_serializing_if = "str::is_empty")]
    detail: &'a str,
    message: &'a str,
}

fn report_error(kind: &str, detail: &str, message: &str) {
    let line = ErrorLine {
        error: ErrorBody {
            kind,
            detail,
            message,
        },
    };
    eprintln!(
        "{}",
        serde_json::to_string(&line).unwrap_or_else(|_| message.to_string())
    );
}

fn run(cli: Cli) -> Result<()> {
    let base = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Encode(a) => encode(&a, &base, cli.out.as_deref()),
        Command::Decode(a) => decode(&a, cli.out.as_deref()),
        Command::FitGmm(a) => fit_gmm(&a, &base, cli.seed, cli.out.as_deref()),
        Command::TrainToy(a) => {
            let cfg = pipeline(&base, &a.pipeline, cli.seed)?;
            let dir = out_dir(cli.out)?;
            let batch = load_batch(&a.data, &cfg)?;
            let report = train_toy(&batch, &cfg)?;
            write_json(&dir.join("report.json"), &report)?;
            write_csv(&dir.join("steps.csv"), &step_rows(&report))
        }
        Command::Sweep(a) => {
            let cfg = pipeline(&base, &a.pipeline, cli.seed)?;
            let dir = out_dir(cli.out)?;
            let modes: Vec<Mode> = a
                .modes
                .iter()
                .map(|m| match m {
                    ModeArg::HeatmapOnly => Mode::HeatmapOnly,
                    ModeArg::Offset => Mode::Offset,
                })
                .collect();
            let data = SynthData {
                samples: a.samples,
                num_joints: a.joints,
                ..SynthData::default()
            };
            let rows = sweep_resolution(&cfg, &a.resolutions, &modes, &data)?;
            write_csv(&dir.join("sweep.csv"), &rows)
        }
        Command::Ablate(a) => {
            let cfg = pipeline(&base, &a.pipeline, cli.seed)?;
            let dir = out_dir(cli.out)?;
            let axis = match a.axis {
                AxisArg::MaskType => AblationAxis::MaskType,
                AxisArg::HeatmapType => AblationAxis::HeatmapType,
                AxisArg::LossType => AblationAxis::LossType,
                AxisArg::Strategy => AblationAxis::Strategy,
                AxisArg::Components => AblationAxis::Components,
            };
            let batch = load_batch(&a.data, &cfg)?;
            let rows = run_ablation(axis, &cfg, &batch)?;
            let name = serde_json::to_value(axis)?
                .as_str()
                .unwrap_or("axis")
                .to_string();
            write_csv(&dir.join(format!("ablation-{name}.csv")), &rows)
        }
        Command::Eval(a) => {
            let dir = out_dir(cli.out)?;
            let gt = read_coco_document(&a.gt)?;
            let pred = read_coco_document(&a.pred)?;
            let (rows, summary) = evaluate_documents(&gt, &pred)?;
            write_csv(&dir.join("eval.csv"), &rows)?;
            write_json(&dir.join("eval.json"), &summary)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig<f64>> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(file_err(path))?;
    let is_toml = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let parsed = if is_toml {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn grid_from(base: &GridSpec<f64>, g: &GridArgs) -> Result<GridSpec<f64>> {
    GridSpec::new(
        g.width.unwrap_or(base.width),
        g.height.unwrap_or(base.height),
        g.stride.unwrap_or(base.stride),
    )
    .map_err(|e| Error::Config(e.to_string()))
}

fn pipeline(
    base: &PipelineConfig<f64>,
    a: &PipelineArgs,
    seed: u64,
) -> Result<PipelineConfig<f64>> {
    let mut c = base.clone();
    c.grid = grid_from(&base.grid, &a.grid)?;
    c.seed = seed;
    if let Some(v) = a.sigma {
        c.sigma = v;
    }
    if let Some(v) = a.radius {
        c.radius = v;
    }
    if let Some(v) = a.alpha {
        c.alpha = v;
    }
    if let Some(v) = a.heatmap_type {
        c.heatmap_type = match v {
            HeatmapTypeArg::Binary => HeatmapType::Binary,
            HeatmapTypeArg::GaussianWeighted => HeatmapType::GaussianWeighted,
            HeatmapTypeArg::PlainGaussian => HeatmapType::PlainGaussian,
        };
    }
    if let Some(v) = a.offset_loss {
        c.offset_loss = match v {
            OffsetLossArg::L1 => OffsetLossKind::L1,
            OffsetLossArg::SmoothL1 => OffsetLossKind::SmoothL1,
            OffsetLossArg::L2 => OffsetLossKind::L2,
            OffsetLossArg::None => OffsetLossKind::None,
        };
    }
    if let Some(v) = a.offset_mask {
        c.offset_mask = match v {
            OffsetMaskArg::Binary => OffsetMask::Binary,
            OffsetMaskArg::TargetG => OffsetMask::TargetG,
            OffsetMaskArg::Mgm => OffsetMask::Mgm,
        };
    }
    if let Some(v) = a.components {
        c.gmm_components = v;
    }
    if let Some(v) = a.stage1_steps {
        c.stage1_steps = v;
    }
    if let Some(v) = a.stage2_steps {
        c.stage2_steps = v;
    }
    if let Some(v) = a.learning_rate {
        c.learning_rate = v;
    }
    c.validate()?;
    Ok(c)
}

fn load_batch(data: &DataArgs, cfg: &PipelineConfig<f64>) -> Result<Batch<f64>> {
    match &data.coco {
        Some(path) => {
            let samples = load_coco_keypoints(path, &cfg.grid, Some(data.samples))?;
            if samples.is_empty() {
                return Err(Error::Empty(format!(
                    "{} has no labeled annotations",
                    path.display()
                )));
            }
            Batch::new(samples, cfg.grid)
        }
        None => {
            if data.samples == 0 || data.joints == 0 {
                return Err(Error::Config("--samples and --joints must be >= 1".into()));
            }
            let data_cfg = SynthData {
                samples: data.samples,
                num_joints: data.joints,
                ..SynthData::default()
            };
            synthetic_batch(&data_cfg, &cfg.grid, cfg.seed)
        }
    }
}

fn out_dir(flag: Option<PathBuf>) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| {
            std::env::var_os(OUT_DIR_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        })
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR));
    std::fs::create_dir_all(&dir).map_err(file_err(&dir))?;
    Ok(dir)
}

fn emit<V: Serialize>(value: &V, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            write_json(path, value)
        }
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct EncodedJoint {
    schema_version: u32,
    joint: Vec2<f64>,
    gaussian: Heatmap<f64>,
    binary: Heatmap<f64>,
    weighted: Heatmap<f64>,
    offsets: OffsetField<f64>,
}

fn encode(a: &EncodeArgs, base: &PipelineConfig<f64>, out: Option<&Path>) -> Result<()> {
    let grid = grid_from(&base.grid, &a.grid)?;
    let sigma = a.sigma.unwrap_or(if base.sigma > 0.0 {
        base.sigma
    } else {
        DEFAULT_SIGMA
    });
    let radius = a.radius.unwrap_or(if base.radius > 0.0 {
        base.radius
    } else {
        DEFAULT_RADIUS
    });
    if !(sigma > 0.0 && radius > 0.0) {
        return Err(Error::Config("sigma and radius must be positive".into()));
    }
    let encoded: Vec<EncodedJoint> = a
        .joints
        .iter()
        .enumerate()
        .map(|(k, &(x, y))| {
            let p = Vec2::new(x, y);
            if !p.is_finite() {
                return Err(Error::InvalidArgument(format!("joint {k} is not finite")));
            }
            let e = encode_joint(&JointTarget::labeled(k, p), &grid, sigma, radius);
            Ok(EncodedJoint {
                schema_version: SCHEMA_VERSION,
                joint: p,
                gaussian: e.gaussian,
                binary: e.binary,
                weighted: e.weighted,
                offsets: e.offsets,
            })
        })
        .collect::<Result<_>>()?;
    emit(&encoded, out)
}

#[derive(Deserialize)]
struct DecodeInput {
    #[serde(alias = "weighted")]
    heatmap: Heatmap<f64>,
    #[serde(default)]
    offsets: Option<OffsetField<f64>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DecodeInputs {
    One(DecodeInput),
    Many(Vec<DecodeInput>),
}

#[derive(Serialize)]
struct Decoded {
    schema_version: u32,
    cell: Cell,
    score: f64,
    /// Heatmap-cell units.
    position: Vec2<f64>,
    position_px: Vec2<f64>,
    used_offsets: bool,
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = std::fs::read_to_string(path).map_err(file_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        record: path.display().to_string(),
        message: e.to_string(),
    })
}

fn decode(a: &DecodeArgs, out: Option<&Path>) -> Result<()> {
    let inputs = match read_json::<DecodeInputs>(&a.input)? {
        DecodeInputs::One(one) => vec![one],
        DecodeInputs::Many(many) => many,
    };
    let decoded = inputs
        .iter()
        .map(|inp| {
            Heatmap::from_values(inp.heatmap.grid, inp.heatmap.values.clone())?;
            let (cell, score) = decode_argmax(&inp.heatmap)?;
            let position = match &inp.offsets {
                Some(of) => {
                    OffsetField::from_channels(of.grid, of.dx.clone(), of.dy.clone())?;
                    decode_with_offset(&inp.heatmap, of)?.0
                }
                None => cell.to_point(),
            };
            Ok(Decoded {
                schema_version: SCHEMA_VERSION,
                cell,
                score,
                position,
                position_px: to_input_coords(position, &inp.heatmap.grid),
                used_offsets: inp.offsets.is_some(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    match decoded.as_slice() {
        [single] => emit(single, out),
        many => emit(&many, out),
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Displacement {
    Pair([f64; 2]),
    Point(Vec2<f64>),
}

#[derive(Serialize)]
struct FitOutput {
    schema_version: u32,
    samples: usize,
    mixture: GaussianMixture<f64>,
    log_likelihood: Vec<f64>,
    iterations: usize,
    converged: bool,
    stencil: MaskStencil<f64>,
}

fn fit_gmm(
    a: &FitGmmArgs,
    base: &PipelineConfig<f64>,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let samples: Vec<Vec2<f64>> = read_json::<Vec<Displacement>>(&a.input)?
        .into_iter()
        .map(|d| match d {
            Displacement::Pair([x, y]) => Vec2::new(x, y),
            Displacement::Point(p) => p,
        })
        .collect();
    if a.k == 0 {
        return Err(Error::Config("--k must be >= 1".into()));
    }
    let mut em = EmConfig {
        seed,
        ..EmConfig::default()
    };
    if let Some(v) = a.max_iterations {
        em.max_iterations = v;
    }
    if let Some(v) = a.tolerance {
        em.tolerance = v;
    }
    let fit = em_fit(&samples, a.k, &em)?;
    let radius = a
        .stencil_radius
        .unwrap_or_else(|| base.radius.ceil().max(1.0) as usize);
    let stencil = sample_stencil(&fit.mixture, radius)?;
    emit(
        &FitOutput {
            schema_version: SCHEMA_VERSION,
            samples: samples.len(),
            mixture: fit.mixture,
            log_likelihood: fit.log_likelihood,
            iterations: fit.iterations,
            converged: fit.converged,
            stencil,
        },
        out,
    )
}
