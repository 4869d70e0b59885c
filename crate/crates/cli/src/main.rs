use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use horizon_calib::batch::{
    self, batch_focal, batch_principal, scaling_fit, summarize, BatchInput, ScalingFit,
    SummaryStats, SweepConfig,
};
use horizon_calib::calibrate::{calibrate_single, CalibrationResult};
use horizon_calib::conics::{fit_conic, read_points_csv, write_points_csv, Conic, FitMethod};
use horizon_calib::synth::{
    generate_observation, random_scene, scene_rng, Scene, SceneConfig, Sidecar,
};
use horizon_calib::{Error, ErrorKind, ImageTerms};
use nalgebra::Point2;
use rayon::prelude::*;
use serde::Serialize;

const THREADS_ENV: &str = "HORIZON_CALIB_THREADS";

#[derive(Parser)]
#[command(
    name = "horizon-calib",
    version,
    about = "Camera calibration from imaged ellipsoid horizons"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes, horizon points and sidecars.
    Simulate(SimulateArgs),
    /// Fit the imaged horizon and recover the camera matrix.
    Calibrate(CalibrateArgs),
    /// Combine calibration results into multi-image estimates.
    Batch(BatchArgs),
    /// Sweep subset sizes over a pool of results and report scaling fits.
    Montecarlo(MontecarloArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Preset {
    CassiniNac,
    Generic,
}

impl Preset {
    fn config(self) -> SceneConfig {
        match self {
            Preset::CassiniNac => SceneConfig::cassini_nac(),
            Preset::Generic => SceneConfig::generic(),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Fit {
    Taubin,
    SemiHyper,
}

impl From<Fit> for FitMethod {
    fn from(f: Fit) -> Self {
        match f {
            Fit::Taubin => FitMethod::Taubin,
            Fit::SemiHyper => FitMethod::SemiHyper,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SamplingArg {
    WithoutReplacement,
    WithReplacement,
}

impl From<SamplingArg> for batch::Sampling {
    fn from(s: SamplingArg) -> Self {
        match s {
            SamplingArg::WithoutReplacement => batch::Sampling::WithoutReplacement,
            SamplingArg::WithReplacement => batch::Sampling::WithReplacement,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct SceneArgs {
    #[arg(long, value_enum, default_value = "cassini-nac")]
    preset: Preset,
    /// Override the preset's per-coordinate noise, pixels.
    #[arg(long)]
    noise_px: Option<f64>,
    /// Override the preset's number of horizon points.
    #[arg(long)]
    n_points: Option<usize>,
    /// Override the preset's limb arc, degrees.
    #[arg(long)]
    arc_deg: Option<f64>,
}

impl SceneArgs {
    fn config(&self) -> SceneConfig {
        let mut cfg = self.preset.config();
        if let Some(v) = self.noise_px {
            cfg.noise_px = v;
        }
        if let Some(v) = self.n_points {
            cfg.n_points = v;
        }
        if let Some(v) = self.arc_deg {
            cfg.arc_deg = v;
        }
        cfg
    }
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    #[command(flatten)]
    #[serde(flatten)]
    scene: SceneArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct CalibrateArgs {
    /// Points CSV with header `u,v`.
    #[arg(long, conflicts_with = "dir", requires = "reference")]
    points: Option<PathBuf>,
    /// Sidecar JSON holding the reference cone.
    #[arg(long, group = "reference", conflicts_with = "dir")]
    sidecar: Option<PathBuf>,
    /// Scene JSON from which the reference cone is computed.
    #[arg(long, group = "reference", conflicts_with = "dir")]
    scene: Option<PathBuf>,
    /// Directory of `points_*.csv` / `sidecar_*.json` pairs.
    #[arg(long, required_unless_present = "points")]
    dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "taubin")]
    fit: Fit,
    /// Pixel pitch along x, mm; with --mu-y-mm adds f_mm to the result.
    #[arg(long, requires = "mu_y_mm")]
    mu_x_mm: Option<f64>,
    #[arg(long, requires = "mu_x_mm")]
    mu_y_mm: Option<f64>,
    /// Result file (single mode, stdout if absent) or output directory (--dir).
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BatchArgs {
    /// Directory of `result_*.json` files.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    mu_x_mm: f64,
    #[arg(long)]
    mu_y_mm: f64,
    #[arg(long)]
    reference_f_mm: Option<f64>,
    #[arg(long)]
    reference_u0_px: Option<f64>,
    #[arg(long)]
    reference_v0_px: Option<f64>,
    /// Batch JSON path; stdout if absent.
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct MontecarloArgs {
    /// Directory of `result_*.json` files; generated from the preset if absent.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pool_size: u64,
    #[command(flatten)]
    #[serde(flatten)]
    scene: SceneArgs,
    #[arg(long, value_enum, default_value = "taubin")]
    fit: Fit,
    /// Pixel pitch, mm; defaults to the preset camera when generating.
    #[arg(long)]
    mu_x_mm: Option<f64>,
    #[arg(long)]
    mu_y_mm: Option<f64>,
    #[arg(long, default_value_t = 1)]
    q_start: usize,
    #[arg(long, default_value_t = 45)]
    q_end: usize,
    #[arg(long, default_value_t = 4)]
    q_step: usize,
    #[arg(long, default_value_t = 2000)]
    draws: usize,
    #[arg(long, value_enum, default_value = "without-replacement")]
    sampling: SamplingArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Debug)]
struct CliError {
    context: String,
    source: Error,
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self.source.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Domain => 3,
            ErrorKind::Io => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(source: Error) -> Self {
        Self {
            context: String::new(),
            source,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T, E: Into<Error>> Context<T> for Result<T, E> {
    fn context(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError {
            context: what(),
            source: e.into(),
        })
    }
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a C,
    #[serde(skip_serializing_if = "Option::is_none")]
    scene_config: Option<&'a SceneConfig>,
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).context(|| path.display().to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let file = fs::File::open(path).context(|| path.display().to_string())?;
    serde_json::from_reader(BufReader::new(file)).context(|| path.display().to_string())
}

fn read_points(path: &Path) -> CliResult<Vec<Point2<f64>>> {
    let file = fs::File::open(path).context(|| path.display().to_string())?;
    read_points_csv(BufReader::new(file)).context(|| path.display().to_string())
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).context(|| path.display().to_string())
}

fn write_manifest<C: Serialize>(
    path: &Path,
    command: &'static str,
    config: &C,
    scene_config: Option<&SceneConfig>,
) -> CliResult<()> {
    let manifest = Manifest {
        tool: "horizon-calib",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        scene_config,
    };
    write_file(path, &to_json(&manifest)?)
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => write_file(path, text),
        None => io::stdout()
            .write_all(text.as_bytes())
            .context(|| "stdout".to_string()),
    }
}

/// Files `<prefix>_<id>.<ext>` in `dir`, sorted by id.
fn indexed_files(dir: &Path, prefix: &str, ext: &str) -> CliResult<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).context(|| dir.display().to_string())?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.context(|| dir.display().to_string())?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(id) = name
            .strip_prefix(prefix)
            .and_then(|r| r.strip_prefix('_'))
            .and_then(|r| r.strip_suffix(ext))
            .and_then(|r| r.strip_suffix('.'))
        {
            found.push((id.to_string(), path.clone()));
        }
    }
    found.sort();
    Ok(found)
}

fn index_width(count: u64) -> usize {
    count.saturating_sub(1).to_string().len().max(4)
}

fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let cfg = args.scene.config();
    let scenes: Vec<(Scene, horizon_calib::synth::Observation)> = (0..args.count)
        .into_par_iter()
        .map(|i| -> CliResult<_> {
            let scene = random_scene(&mut scene_rng(args.seed, i), &cfg)
                .context(|| format!("scene {i}"))?;
            let obs = generate_observation(&scene).context(|| format!("scene {i}"))?;
            Ok((scene, obs))
        })
        .collect::<CliResult<_>>()?;

    create_dir(&args.out)?;
    let width = index_width(args.count);
    for (i, (scene, obs)) in scenes.iter().enumerate() {
        let id = format!("{i:0width$}");
        write_file(&args.out.join(format!("scene_{id}.json")), &to_json(scene)?)?;
        let points_path = args.out.join(format!("points_{id}.csv"));
        let mut buf = Vec::new();
        write_points_csv(&mut buf, &obs.points)?;
        fs::write(&points_path, buf).context(|| points_path.display().to_string())?;
        write_file(
            &args.out.join(format!("sidecar_{id}.json")),
            &to_json(&obs.sidecar())?,
        )?;
    }
    write_manifest(
        &args.out.join("manifest.json"),
        "simulate",
        args,
        Some(&cfg),
    )
}

fn calibrate_points(
    reference: &Conic,
    points: &[Point2<f64>],
    fit: Fit,
    pitch: Option<(f64, f64)>,
) -> horizon_calib::Result<CalibrationResult> {
    let imaged = fit_conic(points, fit.into())?;
    let est = calibrate_single(reference, &imaged)?;
    CalibrationResult::from_estimate(&est, pitch)
}

fn calibrate(args: &CalibrateArgs) -> CliResult<()> {
    let pitch = args.mu_x_mm.zip(args.mu_y_mm);
    if let Some(dir) = &args.dir {
        let out = args.out.clone().unwrap_or_else(|| dir.clone());
        let pairs = indexed_files(dir, "points", "csv")?;
        let results: Vec<(String, CalibrationResult)> = pairs
            .par_iter()
            .map(|(id, points_path)| -> CliResult<_> {
                let sidecar: Sidecar = read_json(&dir.join(format!("sidecar_{id}.json")))?;
                let points = read_points(points_path)?;
                let result = calibrate_points(&sidecar.reference_conic(), &points, args.fit, pitch)
                    .context(|| points_path.display().to_string())?;
                Ok((id.clone(), result))
            })
            .collect::<CliResult<_>>()?;
        create_dir(&out)?;
        for (id, result) in &results {
            write_file(&out.join(format!("result_{id}.json")), &to_json(result)?)?;
        }
        return write_manifest(
            &out.join("calibrate.manifest.json"),
            "calibrate",
            args,
            None,
        );
    }

    let points_path = args
        .points
        .as_ref()
        .expect("clap requires --points or --dir");
    let reference = match (&args.sidecar, &args.scene) {
        (Some(path), _) => read_json::<Sidecar>(path)?.reference_conic(),
        (None, Some(path)) => read_json::<Scene>(path)?
            .reference_conic()
            .context(|| path.display().to_string())?,
        (None, None) => unreachable!("clap requires a reference"),
    };
    let points = read_points(points_path)?;
    let result = calibrate_points(&reference, &points, args.fit, pitch)
        .context(|| points_path.display().to_string())?;
    emit(args.out.as_deref(), &to_json(&result)?)?;
    if let Some(out) = &args.out {
        write_manifest(&sibling_manifest(out), "calibrate", args, None)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TargetReport {
    batch: f64,
    single_image: SummaryStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    single_image_mean_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    single_image_median_abs_error: Option<f64>,
}

impl TargetReport {
    fn new(batch: f64, samples: &[f64], reference: Option<f64>) -> horizon_calib::Result<Self> {
        let single_image = SummaryStats::of(samples)?;
        let (mean_error, median_abs) = match reference {
            Some(r) => {
                let abs: Vec<f64> = samples.iter().map(|x| (x - r).abs()).collect();
                (
                    Some(summarize(samples, r)?.mean_error),
                    Some(SummaryStats::of(&abs)?.median),
                )
            }
            None => (None, None),
        };
        Ok(Self {
            batch,
            single_image,
            reference,
            batch_error: reference.map(|r| batch - r),
            single_image_mean_error: mean_error,
            single_image_median_abs_error: median_abs,
        })
    }
}

#[derive(Serialize)]
struct BatchReport {
    n_images: usize,
    f_mm: TargetReport,
    u0_px: TargetReport,
    v0_px: TargetReport,
}

fn load_results(dir: &Path) -> CliResult<Vec<ImageTerms>> {
    indexed_files(dir, "result", "json")?
        .iter()
        .map(|(_, path)| Ok(read_json::<CalibrationResult>(path)?.terms()))
        .collect()
}

fn batch_report(terms: Vec<ImageTerms>, args: &BatchArgs) -> horizon_calib::Result<BatchReport> {
    let input = BatchInput::new(terms, args.mu_x_mm, args.mu_y_mm)?;
    let f = batch_focal(&input)?;
    let pp = batch_principal(&input)?;
    let single_f: Vec<f64> = input
        .images
        .iter()
        .map(|t| 0.5 * (args.mu_x_mm * t.d_x + args.mu_y_mm * t.d_y))
        .collect();
    let single_u: Vec<f64> = input.images.iter().map(|t| t.j.x).collect();
    let single_v: Vec<f64> = input.images.iter().map(|t| t.j.y).collect();
    Ok(BatchReport {
        n_images: input.images.len(),
        f_mm: TargetReport::new(f, &single_f, args.reference_f_mm)?,
        u0_px: TargetReport::new(pp.x, &single_u, args.reference_u0_px)?,
        v0_px: TargetReport::new(pp.y, &single_v, args.reference_v0_px)?,
    })
}

fn run_batch(args: &BatchArgs) -> CliResult<()> {
    let terms = load_results(&args.dir)?;
    let report = batch_report(terms, args).context(|| args.dir.display().to_string())?;
    emit(args.out.as_deref(), &to_json(&report)?)?;
    if let Some(out) = &args.out {
        write_manifest(&sibling_manifest(out), "batch", args, None)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SlopeReport {
    q: Vec<usize>,
    f_mm: ScalingFit,
    u0_px: ScalingFit,
    v0_px: ScalingFit,
}

fn generated_pool(args: &MontecarloArgs, cfg: &SceneConfig) -> CliResult<Vec<ImageTerms>> {
    (0..args.pool_size)
        .into_par_iter()
        .map(|i| {
            let scene = random_scene(&mut scene_rng(args.seed, i), cfg)
                .context(|| format!("pool scene {i}"))?;
            let obs = generate_observation(&scene).context(|| format!("pool scene {i}"))?;
            let result = calibrate_points(&obs.c_reference, &obs.points, args.fit, None)
                .context(|| format!("pool scene {i}"))?;
            Ok(result.terms())
        })
        .collect()
}

fn montecarlo(args: &MontecarloArgs) -> CliResult<()> {
    if args.q_step == 0 || args.q_start == 0 || args.q_start > args.q_end {
        return Err(Error::InvalidSweep(format!(
            "need 1 <= q-start <= q-end and q-step >= 1, got {}..{} step {}",
            args.q_start, args.q_end, args.q_step
        ))
        .into());
    }
    let cfg = args.scene.config();
    let (pool, default_pitch) = match &args.pool {
        Some(dir) => (load_results(dir)?, None),
        None => {
            let k = cfg
                .camera_exact
                .unwrap_or_else(horizon_calib::synth::cassini_nac);
            (generated_pool(args, &cfg)?, Some((k.mu_x_mm, k.mu_y_mm)))
        }
    };
    let (mu_x, mu_y) = match (args.mu_x_mm.zip(args.mu_y_mm), default_pitch) {
        (Some(p), _) | (None, Some(p)) => p,
        (None, None) => {
            return Err(
                Error::InvalidConfig("--pool requires --mu-x-mm and --mu-y-mm".into()).into(),
            )
        }
    };
    let config = SweepConfig {
        q_values: (args.q_start..=args.q_end).step_by(args.q_step).collect(),
        draws: args.draws,
        seed: args.seed,
        sampling: args.sampling.into(),
    };
    let levels = batch::sweep(&pool, mu_x, mu_y, &config)?;
    let q: Vec<usize> = levels.iter().map(|l| l.q).collect();
    let fit = |sel: fn(&batch::SweepLevel) -> f64| {
        scaling_fit(&q, &levels.iter().map(sel).collect::<Vec<_>>())
    };
    let report = SlopeReport {
        f_mm: fit(|l| l.f_mm.sigma)?,
        u0_px: fit(|l| l.u0_px.sigma)?,
        v0_px: fit(|l| l.v0_px.sigma)?,
        q,
    };

    create_dir(&args.out)?;
    let sweep_path = args.out.join("sweep.csv");
    let file = fs::File::create(&sweep_path).context(|| sweep_path.display().to_string())?;
    batch::write_sweep_csv(BufWriter::new(file), &levels)
        .context(|| sweep_path.display().to_string())?;
    write_file(&args.out.join("slopes.json"), &to_json(&report)?)?;
    let scene_cfg = args.pool.is_none().then_some(&cfg);
    write_manifest(
        &args.out.join("manifest.json"),
        "montecarlo",
        args,
        scene_cfg,
    )
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::InvalidConfig(format!("{THREADS_ENV}={value} is not a positive integer"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")).into())
}

fn run(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Calibrate(args) => calibrate(args),
        Command::Batch(args) => run_batch(args),
        Command::Montecarlo(args) => montecarlo(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.context.is_empty() {
                eprintln!("error: {}", e.source);
            } else {
                eprintln!("error: {}: {}", e.context, e.source);
            }
            ExitCode::from(e.exit_code())
        }
    }
}
