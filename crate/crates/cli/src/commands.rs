use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use tagflow_core::grid::{jacobian_determinant, ScalarVolume, VectorField};
use tagflow_core::harp::{
    combine_magnitude, floor_phase, harp_filter, harp_trio, resample_isotropic, sincos_transform, HarpImage, HarpTrio,
    SinCosTrio, TagOrientation, DEFAULT_PHASE_FLOOR,
};
use tagflow_core::metrics::{evaluate, Histogram, MetricsReport, Truth, DEFAULT_BINS};
use tagflow_core::objective::{LossBreakdown, WARP_POLICY};
use tagflow_core::optim::{register_pair, RegistrationConfig, RegistrationResult};
use tagflow_core::phantom::{make_phantom_pair, PhantomConfig, PhantomPair};
use tagflow_core::vvol::{self, Dtype};

use crate::config::{load_json, PipelineConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::ManifestBuilder;
use crate::slices::{export_slices, Axis};

#[derive(Debug, Parser)]
#[command(name = "tagflow", version, about = "Incompressible motion estimation from tagged volumes")]
pub struct Cli {
    /// Worker threads for the parallel kernels.
    #[arg(long, global = true, env = "TAGFLOW_THREADS")]
    pub threads: Option<usize>,
    /// Overrides the phantom seed; recorded in every manifest.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write f64 volume payloads instead of f32.
    #[arg(long = "f64", global = true)]
    pub f64: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tagged phantom pair with ground truth.
    Phantom(PhantomArgs),
    /// Extract HARP magnitude, phase and (sin, cos) from one tagged volume.
    Harp(HarpArgs),
    /// Estimate the velocity mapping a moving frame onto a fixed frame.
    Register(RegisterArgs),
    /// Score a registration result.
    Evaluate(EvaluateArgs),
    /// Phantom, HARP, registration and evaluation in one run.
    Pipeline(PipelineArgs),
    /// Export volume slices as grayscale PGM images.
    ExportSlices(ExportArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Phantom config JSON; defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HarpArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Tag-normal axis.
    #[arg(long, value_enum)]
    pub dir: Axis,
    /// Tag period in voxels of the (resampled) grid.
    #[arg(long, allow_negative_numbers = true)]
    pub wavelength: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Output name prefix; derived from the axis when absent (x: av, y: sv, z: sh).
    #[arg(long, value_parser = parse_orientation)]
    pub orientation: Option<TagOrientation>,
    #[arg(long, default_value_t = DEFAULT_PHASE_FLOOR, allow_negative_numbers = true)]
    pub phase_floor: f64,
    /// Resample to this isotropic spacing (mm) first.
    #[arg(long)]
    pub target_spacing: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub fixed_dir: PathBuf,
    #[arg(long)]
    pub moving_dir: PathBuf,
    /// Registration config JSON; defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub result_dir: PathBuf,
    /// Directory with truth_displacement.json and tissue_mask.json.
    #[arg(long)]
    pub truth_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub n_bins: usize,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated slice indices.
    #[arg(long, value_delimiter = ',', required = true)]
    pub indices: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    /// Gray window as lo,hi; the channel's [min, max] when absent.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub window: Option<Vec<f64>>,
}

fn parse_orientation(s: &str) -> Result<TagOrientation, String> {
    TagOrientation::ALL
        .into_iter()
        .find(|o| o.name() == s.to_ascii_lowercase())
        .ok_or_else(|| format!("unknown orientation {s:?}, expected av, sh or sv"))
}

/// Orientation whose default tag normal is `axis`.
pub fn orientation_for_axis(axis: Axis) -> TagOrientation {
    match axis {
        Axis::X => TagOrientation::Av,
        Axis::Y => TagOrientation::Sv,
        Axis::Z => TagOrientation::Sh,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Globals {
    pub seed: Option<u64>,
    pub dtype: Dtype,
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        // fails only if a pool already exists, in which case it is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let g = Globals { seed: cli.seed, dtype: if cli.f64 { Dtype::F64 } else { Dtype::F32 } };
    match cli.command {
        Command::Phantom(a) => cmd_phantom(&a, g),
        Command::Harp(a) => cmd_harp(&a, g),
        Command::Register(a) => cmd_register(&a, g),
        Command::Evaluate(a) => cmd_evaluate(&a, g),
        Command::Pipeline(a) => cmd_pipeline(&a.config, g),
        Command::ExportSlices(a) => cmd_export_slices(&a, g),
    }
}

fn snapshot<T: Serialize>(v: &T) -> CliResult<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn vol_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.json"))
}

fn write_scalar(dir: &Path, name: &str, v: &ScalarVolume, dtype: Dtype) -> CliResult<()> {
    vvol::write_scalar(&vol_path(dir, name), v, dtype)?;
    Ok(())
}

fn write_vector(dir: &Path, name: &str, v: &VectorField, dtype: Dtype) -> CliResult<()> {
    vvol::write_vector(&vol_path(dir, name), v, dtype)?;
    Ok(())
}

fn read_scalar(dir: &Path, name: &str) -> CliResult<ScalarVolume> {
    let p = vol_path(dir, name);
    vvol::read_scalar(&p).map_err(|e| with_path(e.into(), &p))
}

fn read_vector(dir: &Path, name: &str) -> CliResult<VectorField> {
    let p = vol_path(dir, name);
    vvol::read_vector(&p).map_err(|e| with_path(e.into(), &p))
}

fn with_path(mut e: CliError, p: &Path) -> CliError {
    e.message = format!("{}: {}", p.display(), e.message);
    e
}

pub fn write_phantom(dir: &Path, pair: &PhantomPair, dtype: Dtype) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    for (k, o) in TagOrientation::ALL.iter().enumerate() {
        write_scalar(dir, &format!("fixed_{}", o.name()), &pair.fixed[k], dtype)?;
        write_scalar(dir, &format!("moving_{}", o.name()), &pair.moving[k], dtype)?;
    }
    write_vector(dir, "truth_velocity", &pair.truth_velocity, dtype)?;
    write_vector(dir, "truth_displacement", &pair.truth_displacement, dtype)?;
    write_scalar(dir, "tissue_mask", &pair.tissue_mask, dtype)
}

pub fn cmd_phantom(a: &PhantomArgs, g: Globals) -> CliResult<()> {
    let mut cfg: PhantomConfig = match &a.config {
        Some(p) => load_json(p)?,
        None => PhantomConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let mut m = ManifestBuilder::new("phantom", Some(cfg.seed), snapshot(&cfg)?);
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    let pair = m.stage("phantom", || Ok(make_phantom_pair(&cfg)?))?;
    m.stage("write", || write_phantom(&a.out, &pair, g.dtype))?;
    m.finish(&a.out)?;
    Ok(())
}

/// Writes `{o}_magnitude`, `{o}_phase`, `{o}_sin`, `{o}_cos`. The (sin, cos)
/// pair is taken from the floored phase.
pub fn write_harp_image(dir: &Path, o: TagOrientation, h: &HarpImage, floor: f64, dtype: Dtype) -> CliResult<()> {
    let (s, c) = sincos_transform(&floor_phase(h, floor));
    write_harp_parts(dir, o, h, &s, &c, dtype)
}

fn write_harp_parts(
    dir: &Path,
    o: TagOrientation,
    h: &HarpImage,
    s: &ScalarVolume,
    c: &ScalarVolume,
    dtype: Dtype,
) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let n = o.name();
    write_scalar(dir, &format!("{n}_magnitude"), &h.magnitude, dtype)?;
    write_scalar(dir, &format!("{n}_phase"), &h.phase, dtype)?;
    write_scalar(dir, &format!("{n}_sin"), s, dtype)?;
    write_scalar(dir, &format!("{n}_cos"), c, dtype)
}

pub fn write_harp_trio(dir: &Path, trio: &HarpTrio, dtype: Dtype) -> CliResult<()> {
    for (k, o) in TagOrientation::ALL.into_iter().enumerate() {
        write_harp_parts(dir, o, &trio.images[k], trio.sincos.sin(k), trio.sincos.cos(k), dtype)?;
    }
    Ok(())
}

pub fn cmd_harp(a: &HarpArgs, g: Globals) -> CliResult<()> {
    if !(0.0..1.0).contains(&a.phase_floor) {
        return Err(CliError::config("phase_floor", "must lie in [0, 1)"));
    }
    let o = a.orientation.unwrap_or(orientation_for_axis(a.dir));
    let cfg = serde_json::json!({
        "input": a.input.display().to_string(),
        "dir": a.dir,
        "orientation": o,
        "wavelength": a.wavelength,
        "phase_floor": a.phase_floor,
        "target_spacing": a.target_spacing,
    });
    let mut m = ManifestBuilder::new("harp", g.seed, cfg);
    m.input(&a.input)?;
    let mut vol = vvol::read_scalar(&a.input).map_err(|e| with_path(e.into(), &a.input))?;
    if let Some(t) = a.target_spacing {
        vol = m.stage("resample", || Ok(resample_isotropic(&vol, t)?))?;
    }
    let mut dir = [0.0; 3];
    dir[a.dir.index()] = 1.0;
    let h = m.stage("harp", || Ok(harp_filter(&vol, dir, a.wavelength)?))?;
    m.stage("write", || write_harp_image(&a.out, o, &h, a.phase_floor, g.dtype))?;
    m.finish(&a.out)?;
    Ok(())
}

/// (sin, cos) trio and fused magnitude read from a `harp` output directory.
pub fn read_harp_dir(dir: &Path) -> CliResult<(SinCosTrio, ScalarVolume)> {
    let read = |part: &str| -> CliResult<[ScalarVolume; 3]> {
        let [a, b, c] = TagOrientation::ALL.map(|o| read_scalar(dir, &format!("{}_{part}", o.name())));
        Ok([a?, b?, c?])
    };
    let sin = read("sin")?;
    let cos = read("cos")?;
    let mag = read("magnitude")?;
    let trio = SinCosTrio::new(sin, cos)?;
    let fused = combine_magnitude(&mag[0], &mag[1], &mag[2])?;
    Ok((trio, fused))
}

/// Contents of a registration's `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationSummary {
    /// Relative paths are taken from the result directory.
    pub fixed_dir: PathBuf,
    pub moving_dir: PathBuf,
    pub config: RegistrationConfig,
    pub best_iteration: usize,
    pub iterations_run: usize,
    pub best_loss: LossBreakdown,
    pub wall_time_seconds: f64,
}

pub fn loss_csv(history: &[LossBreakdown]) -> String {
    let mut s = String::from("iter,sim,smooth,incompress,total\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{}", l.sim, l.smooth, l.incompress, l.total);
    }
    s
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut s = String::from("bin_lo,bin_hi,weight,cdf\n");
    for (i, (w, c)) in h.counts.iter().zip(h.cdf()).enumerate() {
        let _ = writeln!(s, "{},{},{w},{c}", h.edges[i], h.edges[i + 1]);
    }
    s
}

pub fn write_registration(dir: &Path, r: &RegistrationResult, dtype: Dtype) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    write_vector(dir, "velocity", &r.velocity, dtype)?;
    write_vector(dir, "displacement", &r.displacement, dtype)?;
    write_scalar(dir, "determinant", &jacobian_determinant(&r.displacement)?, dtype)?;
    fs::write(dir.join("loss_history.csv"), loss_csv(&r.loss_history))?;
    if !r.coarse_history.is_empty() {
        fs::write(dir.join("coarse_loss_history.csv"), loss_csv(&r.coarse_history))?;
    }
    Ok(())
}

fn summary(
    fixed_dir: PathBuf,
    moving_dir: PathBuf,
    cfg: &RegistrationConfig,
    r: &RegistrationResult,
) -> RegistrationSummary {
    RegistrationSummary {
        fixed_dir,
        moving_dir,
        config: cfg.clone(),
        best_iteration: r.best_iteration,
        iterations_run: r.iterations_run,
        best_loss: r.loss_history[r.best_iteration],
        wall_time_seconds: r.wall_time_seconds,
    }
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    Ok(std::path::absolute(p)?)
}

pub fn cmd_register(a: &RegisterArgs, g: Globals) -> CliResult<()> {
    let cfg: RegistrationConfig = match &a.config {
        Some(p) => load_json(p)?,
        None => RegistrationConfig::default(),
    };
    cfg.validate()?;
    let mut m = ManifestBuilder::new("register", g.seed, snapshot(&cfg)?);
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    let (fixed, i_mag) = read_harp_dir(&a.fixed_dir)?;
    let (moving, _) = read_harp_dir(&a.moving_dir)?;
    for dir in [&a.fixed_dir, &a.moving_dir] {
        for o in TagOrientation::ALL {
            for part in ["sin", "cos", "magnitude"] {
                m.input(&vol_path(dir, &format!("{}_{part}", o.name())))?;
            }
        }
    }
    let r = m.stage("register", || Ok(register_pair(&fixed, &moving, &i_mag, &cfg)?))?;
    m.stage("write", || {
        write_registration(&a.out, &r, g.dtype)?;
        let s = summary(absolute(&a.fixed_dir)?, absolute(&a.moving_dir)?, &cfg, &r);
        fs::write(a.out.join("result.json"), serde_json::to_string_pretty(&s)?)?;
        Ok(())
    })?;
    m.finish(&a.out)?;
    Ok(())
}

/// Path of the histogram CSV written next to a report.
pub fn histogram_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    report.with_file_name(format!("{stem}_histogram.csv"))
}

pub fn cmd_evaluate(a: &EvaluateArgs, g: Globals) -> CliResult<()> {
    if a.n_bins < 2 {
        return Err(CliError::config("n_bins", "at least 2 bins are required"));
    }
    let mut m = ManifestBuilder::new("evaluate", g.seed, serde_json::json!({ "n_bins": a.n_bins }));
    let result_json = a.result_dir.join("result.json");
    m.input(&result_json)?;
    let s: RegistrationSummary = load_json(&result_json)?;
    let (fixed, i_mag) = read_harp_dir(&a.result_dir.join(&s.fixed_dir))?;
    let (moving, _) = read_harp_dir(&a.result_dir.join(&s.moving_dir))?;
    let disp = read_vector(&a.result_dir, "displacement")?;
    m.input(&vol_path(&a.result_dir, "displacement"))?;
    let truth = match &a.truth_dir {
        Some(d) => {
            m.input(&vol_path(d, "truth_displacement"))?;
            m.input(&vol_path(d, "tissue_mask"))?;
            Some((read_vector(d, "truth_displacement")?, read_scalar(d, "tissue_mask")?))
        }
        None => None,
    };
    let report = m.stage("evaluate", || {
        let warped = moving.warp(&disp, WARP_POLICY)?;
        let t = truth.as_ref().map(|(d, mask)| Truth { displacement: d, mask });
        Ok(evaluate(&fixed, &warped, &disp, &i_mag, t, a.n_bins)?)
    })?;
    let out_dir = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&out_dir)?;
    fs::write(&a.out, serde_json::to_string_pretty(&report)?)?;
    fs::write(histogram_path(&a.out), histogram_csv(&report.histogram))?;
    let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let manifest_path = out_dir.join(format!("{stem}_manifest.json"));
    let manifest = m.finish_files(&[a.out.clone(), histogram_path(&a.out)])?;
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Deterministic summary of a pipeline run; timings live in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    /// Effective config without `output_dir`.
    pub config: serde_json::Value,
    pub grid: tagflow_core::Geometry,
    pub harp_wavelength: f64,
    pub best_iteration: usize,
    pub iterations_run: usize,
    pub best_loss: LossBreakdown,
    pub metrics: MetricsReport,
}

/// Isotropic target spacing and tag wavelength for the HARP stage.
fn harp_grid(cfg: &PipelineConfig) -> CliResult<(Option<f64>, f64)> {
    let sp = cfg.phantom.geometry.spacing();
    let isotropic = sp.iter().all(|s| *s == sp[0]);
    let target = match cfg.harp.target_spacing {
        Some(t) => Some(t),
        None if isotropic => None,
        None => Some(sp.iter().cloned().fold(f64::INFINITY, f64::min)),
    };
    let wavelength = match (cfg.harp.wavelength, target) {
        (Some(w), _) => w,
        (None, None) => cfg.phantom.tag_wavelength,
        (None, Some(t)) if isotropic => cfg.phantom.tag_wavelength * sp[0] / t,
        (None, Some(_)) => {
            return Err(CliError::config("harp.wavelength", "required when an anisotropic phantom is resampled"))
        }
    };
    Ok((target, wavelength))
}

/// Resamples a voxel-unit displacement, rescaling each component to the
/// new voxel size.
fn resample_displacement(u: &VectorField, target: f64) -> CliResult<VectorField> {
    let sp = u.geometry().spacing();
    let [x, y, z] =
        [0, 1, 2].map(|a| resample_isotropic(&u.component(a), target).map(|c| c.map(|v| v * sp[a] / target)));
    Ok(VectorField::from_components(&x?, &y?, &z?)?)
}

/// HARP output for a phantom pair together with ground truth on the same
/// grid.
#[derive(Debug, Clone)]
pub struct HarpStage {
    pub fixed: HarpTrio,
    pub moving: HarpTrio,
    pub truth_displacement: VectorField,
    pub tissue_mask: ScalarVolume,
    pub wavelength: f64,
}

pub fn harp_stage(cfg: &PipelineConfig, pair: &PhantomPair) -> CliResult<HarpStage> {
    let (target, wavelength) = harp_grid(cfg)?;
    let directions = cfg.harp.directions.unwrap_or(cfg.phantom.directions());
    let prep = |v: &ScalarVolume| -> CliResult<ScalarVolume> {
        Ok(match target {
            Some(t) => resample_isotropic(v, t)?,
            None => v.clone(),
        })
    };
    let [f0, f1, f2] = pair.fixed.each_ref().map(prep);
    let [m0, m1, m2] = pair.moving.each_ref().map(prep);
    let fixed = harp_trio([&f0?, &f1?, &f2?], directions, wavelength, cfg.harp.phase_floor)?;
    let moving = harp_trio([&m0?, &m1?, &m2?], directions, wavelength, cfg.harp.phase_floor)?;
    let (truth_displacement, tissue_mask) = match target {
        Some(t) => (resample_displacement(&pair.truth_displacement, t)?, resample_isotropic(&pair.tissue_mask, t)?),
        None => (pair.truth_displacement.clone(), pair.tissue_mask.clone()),
    };
    Ok(HarpStage { fixed, moving, truth_displacement, tissue_mask, wavelength })
}

pub fn register_stage(cfg: &PipelineConfig, h: &HarpStage) -> CliResult<RegistrationResult> {
    Ok(register_pair(&h.fixed.sincos, &h.moving.sincos, &h.fixed.magnitude, &cfg.registration)?)
}

pub fn evaluate_stage(cfg: &PipelineConfig, h: &HarpStage, r: &RegistrationResult) -> CliResult<MetricsReport> {
    let warped = h.moving.sincos.warp(&r.displacement, WARP_POLICY)?;
    let truth = Truth { displacement: &h.truth_displacement, mask: &h.tissue_mask };
    Ok(evaluate(&h.fixed.sincos, &warped, &r.displacement, &h.fixed.magnitude, Some(truth), cfg.evaluation.n_bins)?)
}

/// Every pipeline stage without touching the file system.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub pair: PhantomPair,
    pub harp: HarpStage,
    pub registration: RegistrationResult,
    pub metrics: MetricsReport,
}

pub fn run_in_memory(cfg: &PipelineConfig) -> CliResult<PipelineRun> {
    cfg.validate()?;
    let pair = make_phantom_pair(&cfg.phantom)?;
    let harp = harp_stage(cfg, &pair)?;
    let registration = register_stage(cfg, &harp)?;
    let metrics = evaluate_stage(cfg, &harp, &registration)?;
    Ok(PipelineRun { pair, harp, registration, metrics })
}

pub fn cmd_pipeline(config_path: &Path, g: Globals) -> CliResult<()> {
    let mut cfg = PipelineConfig::load(config_path)?;
    if let Some(s) = g.seed {
        cfg.phantom.seed = s;
    }
    let out = cfg.output_dir.clone();
    let mut config_snapshot = snapshot(&cfg)?;
    if let Some(obj) = config_snapshot.as_object_mut() {
        obj.remove("output_dir");
    }
    let mut m = ManifestBuilder::new("pipeline", Some(cfg.phantom.seed), config_snapshot.clone());
    m.input(config_path)?;
    fs::create_dir_all(&out)?;

    let pair = m.stage("phantom", || {
        let pair = make_phantom_pair(&cfg.phantom)?;
        write_phantom(&out.join("phantom"), &pair, g.dtype)?;
        Ok(pair)
    })?;
    let h = m.stage("harp", || {
        let h = harp_stage(&cfg, &pair)?;
        write_harp_trio(&out.join("harp/fixed"), &h.fixed, g.dtype)?;
        write_harp_trio(&out.join("harp/moving"), &h.moving, g.dtype)?;
        Ok(h)
    })?;
    let reg_dir = out.join("registration");
    let r = m.stage("register", || {
        let r = register_stage(&cfg, &h)?;
        write_registration(&reg_dir, &r, g.dtype)?;
        let s = summary("../harp/fixed".into(), "../harp/moving".into(), &cfg.registration, &r);
        fs::write(reg_dir.join("result.json"), serde_json::to_string_pretty(&s)?)?;
        Ok(r)
    })?;
    let metrics = m.stage("evaluate", || evaluate_stage(&cfg, &h, &r))?;
    let report = PipelineReport {
        seed: cfg.phantom.seed,
        config: config_snapshot,
        grid: *h.fixed.magnitude.geometry(),
        harp_wavelength: h.wavelength,
        best_iteration: r.best_iteration,
        iterations_run: r.iterations_run,
        best_loss: r.loss_history[r.best_iteration],
        metrics,
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out.join("histogram.csv"), histogram_csv(&report.metrics.histogram))?;
    m.finish(&out)?;
    Ok(())
}

pub fn cmd_export_slices(a: &ExportArgs, g: Globals) -> CliResult<()> {
    let window = a.window.as_ref().map(|w| [w[0], w[1]]);
    let cfg = serde_json::json!({
        "input": a.input.display().to_string(),
        "axis": a.axis,
        "indices": a.indices,
        "channel": a.channel,
        "window": window,
    });
    let mut m = ManifestBuilder::new("export-slices", g.seed, cfg);
    m.input(&a.input)?;
    let vol = vvol::read(&a.input).map_err(|e| with_path(e.into(), &a.input))?;
    let (_, files) = export_slices(&vol, &a.input, a.axis, &a.indices, a.channel, window, &a.out)?;
    let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    let manifest = m.finish_files(&files)?;
    fs::write(
        a.out.join(format!("{stem}_slices_{}_manifest.json", a.axis.name())),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}
