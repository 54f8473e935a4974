//! Command-line front end.
//!
//! Every subcommand reads an optional `key = value` config file
//! (`--config`); each key can also be given as a flag of the same name
//! (`r_max` ↔ `--r-max`), and flags win. Unknown keys are configuration
//! errors.
//!
//! Exit codes: 0 success, 1 partial (skipped frames) or failed run,
//! 2 configuration error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::batch::{self, FrameDetections};
use crate::calib::{self, CalibrationCurve, CalibrationSample, DEFAULT_REFRACTIVE_RATIO};
use crate::error::Error;
use crate::imaging::{self, GrayImage};
use crate::pipeline::DetectorConfig;
use crate::refine::AnnulusWidth;
use crate::spline::{self, Lambda, SmoothingSummary};
use crate::synth::{self, flow, CorpusSpec, MatchReport, TruthRing};
use crate::track::{self, LinkConfig, DEFAULT_FRAME_RATE_HZ};

/// Environment variable giving the default worker count.
pub const WORKERS_ENV: &str = "RING_HOUGH_WORKERS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: Error,
    },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_)
            | CliError::Core(Error::Config(_))
            | CliError::File { source: Error::Config(_), .. } => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn file_err(path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |source| CliError::File { path: path.to_path_buf(), source }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::File { path: path.to_path_buf(), source: Error::Io(e) }
}

/// How a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    Partial,
}

impl Status {
    pub fn exit_code(self) -> u8 {
        match self {
            Status::Success => 0,
            Status::Partial => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ring-hough", version, about = "Detect defocus rings and localize particles in 3D")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with ground truth.
    Synth(SynthArgs),
    /// Detect rings in an image sequence.
    Detect(DetectArgs),
    /// Score detections against ground truth.
    Score(ScoreArgs),
    /// Fit a radius-to-depth calibration curve.
    Calibrate(CalibrateArgs),
    /// Link per-frame positions into trajectories.
    Link(LinkArgs),
    /// Smooth trajectories with GCV-tuned smoothing splines.
    Smooth(SmoothArgs),
    /// Measure throughput and parallel scaling.
    Bench(BenchArgs),
}

/// Declares a flag struct whose fields double as config keys.
macro_rules! keys {
    ($(#[$m:meta])* $name:ident { $($field:ident : $help:literal),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Default, Args)]
        pub struct $name {
            $(
                #[arg(long, value_name = "VALUE", help = $help)]
                pub $field: Option<String>,
            )*
        }

        impl $name {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            fn overrides(&self) -> Vec<(&'static str, Option<&String>)> {
                vec![$((stringify!($field), self.$field.as_ref())),*]
            }
        }
    };
}

keys!(
    /// Detector keys shared by `detect` and `bench`.
    DetectorKeys {
        smoothing_sigma: "Gaussian smoothing scale, px",
        curvature_threshold: "ridge curvature threshold (<= 0)",
        r_min: "smallest radius searched, px",
        r_max: "largest radius searched, px",
        vote_threshold_raw: "raw vote count a hotspot must exceed",
        vote_threshold_norm: "normalized score threshold, fraction of 2π",
        sigma_slope: "slope of the parameter-space smoothing width",
        sigma_offset: "offset of the parameter-space smoothing width",
        annulus_halfwidth: "inlier annulus half-width, px, or 'auto'",
        workers: "worker threads (default: $RING_HOUGH_WORKERS or CPU count)",
    }
);

keys!(
    SynthKeys {
        kind: "'rings' (cluttered frames) or 'flow' (moving particles)",
        out_dir: "output directory",
        frames: "number of frames",
        seed: "random seed",
        width: "frame width, px",
        height: "frame height, px",
        mean_rings: "mean rings per frame (rings)",
        cluster_fraction: "fraction of rings in clusters (rings)",
        r_lo: "smallest ring radius, px (rings)",
        r_hi: "largest ring radius, px (rings)",
        amp_lo: "smallest ring amplitude (rings)",
        amp_hi: "largest ring amplitude (rings)",
        ring_width: "outer ring profile width, px",
        inner_rings: "inner rings per particle",
        noise_sd: "Gaussian noise standard deviation",
        background: "background intensity",
        particles: "number of particles (flow)",
        pixel_size_um: "pixel size, µm (flow)",
        tracers: "calibration tracers (flow)",
        sweep_noise_px: "radius noise of calibration sweeps, px (flow)",
    }
);

keys!(
    DetectKeys {
        input: "directory of .pgm/.png frames or a glob pattern",
        output: "detections CSV",
        report: "run report JSON",
        calibration: "calibration curve JSON, for positions",
        pixel_size_um: "pixel size, µm, for positions",
        positions: "positions CSV (frame,x_um,y_um,z_um)",
    }
);

keys!(
    ScoreKeys {
        truth: "truth CSV (frame,cx,cy,r)",
        detections: "detections CSV",
        tol_center: "center tolerance, px",
        tol_radius: "radius tolerance, px",
        output: "score report JSON",
    }
);

keys!(
    CalibrateKeys {
        samples: "samples CSV (tracer_id,dz_um,r_px)",
        output: "calibration curve JSON",
        refractive_ratio: "refractive index ratio applied to stage distances",
    }
);

keys!(
    LinkKeys {
        positions: "positions CSV (frame,x_um,y_um,z_um)",
        output: "trajectories CSV",
        max_displacement: "gate between prediction and detection, µm (required)",
        memory: "frames a trajectory may coast unmatched",
        min_length: "shortest kept trajectory, samples (default: one second)",
        frame_rate: "acquisition rate, Hz",
    }
);

keys!(
    SmoothKeys {
        trajectories: "trajectories CSV",
        output: "smoothed CSV",
        summary: "per-trajectory summary JSON",
        lambda: "smoothing weight or 'auto' (GCV)",
        frame_rate: "acquisition rate, Hz",
    }
);

keys!(
    BenchKeys {
        frames: "number of synthetic frames",
        width: "frame width, px",
        height: "frame height, px",
        mean_rings: "mean rings per frame",
        seed: "random seed",
        worker_counts: "comma-separated worker counts, e.g. 1,4",
        oracle_frames: "frames also run through the full-array oracle",
        output: "benchmark report JSON",
    }
);

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub keys: SynthKeys,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub keys: DetectKeys,
    #[command(flatten)]
    pub detector: DetectorKeys,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub keys: ScoreKeys,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub keys: CalibrateKeys,
}

#[derive(Debug, Args)]
pub struct LinkArgs {
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub keys: LinkKeys,
}

#[derive(Debug, Args)]
pub struct SmoothArgs {
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub keys: SmoothKeys,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub keys: BenchKeys,
    #[command(flatten)]
    pub detector: DetectorKeys,
}

#[derive(Debug, Clone)]
enum Origin {
    File(PathBuf, usize),
    Flag,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Origin::File(p, line) => write!(f, "{}:{line}", p.display()),
            Origin::Flag => write!(f, "command line"),
        }
    }
}

/// Merged key/value settings.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, (String, Origin)>,
}

/// Parse a `key = value` config text. Blank lines and `#` comments are
/// ignored.
pub fn parse_config(text: &str, path: &Path, allowed: &[&str]) -> CliResult<Settings> {
    let mut s = Settings::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = Origin::File(path.to_path_buf(), i + 1);
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{at}: expected key = value, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if !allowed.contains(&k) {
            return Err(CliError::Config(format!("{at}: unknown key {k:?}")));
        }
        if let Some((_, first)) = s.values.get(k) {
            return Err(CliError::Config(format!("{at}: key {k:?} already set at {first}")));
        }
        s.values.insert(k.to_string(), (v.to_string(), at));
    }
    Ok(s)
}

impl Settings {
    fn load(path: Option<&Path>, allowed: &[&str]) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                parse_config(&text, p, allowed)
            }
        }
    }

    fn apply(&mut self, overrides: Vec<(&'static str, Option<&String>)>) {
        for (k, v) in overrides {
            if let Some(v) = v {
                self.values.insert(k.to_string(), (v.clone(), Origin::Flag));
            }
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some((v, at)) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::Config(format!("{at}: {key} = {v:?}: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.ok_or_else(|| CliError::Config(format!("missing required key {key}")))
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }
}

fn settings(config: Option<&Path>, groups: &[&[&str]], overrides: Vec<(&'static str, Option<&String>)>) -> CliResult<Settings> {
    let allowed: Vec<&str> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    let mut s = Settings::load(config, &allowed)?;
    s.apply(overrides);
    Ok(s)
}

/// Worker count from settings, then the environment, then the CPU count.
pub fn default_workers() -> CliResult<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|e| CliError::Config(format!("{WORKERS_ENV}={v:?}: {e}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn workers(s: &Settings) -> CliResult<usize> {
    let n = match s.get("workers")? {
        Some(n) => n,
        None => default_workers()?,
    };
    if n == 0 {
        return Err(CliError::Config("worker count must be at least 1".into()));
    }
    Ok(n)
}

/// Detector configuration from settings over `base`.
pub fn detector_config(s: &Settings, base: DetectorConfig) -> CliResult<DetectorConfig> {
    let mut cfg = base;
    cfg.smoothing_sigma = s.get_or("smoothing_sigma", cfg.smoothing_sigma)?;
    cfg.curvature_threshold = s.get_or("curvature_threshold", cfg.curvature_threshold)?;
    cfg.hough.r_min = s.get_or("r_min", cfg.hough.r_min)?;
    cfg.hough.r_max = s.get_or("r_max", cfg.hough.r_max)?;
    cfg.hough.vote_threshold_raw = s.get_or("vote_threshold_raw", cfg.hough.vote_threshold_raw)?;
    cfg.hough.vote_threshold_norm = s.get_or("vote_threshold_norm", cfg.hough.vote_threshold_norm)?;
    cfg.hough.sigma_slope = s.get_or("sigma_slope", cfg.hough.sigma_slope)?;
    cfg.hough.sigma_offset = s.get_or("sigma_offset", cfg.hough.sigma_offset)?;
    match s.raw("annulus_halfwidth") {
        None => {}
        Some(v) if v.eq_ignore_ascii_case("auto") => cfg.annulus_halfwidth = AnnulusWidth::Auto,
        Some(_) => cfg.annulus_halfwidth = AnnulusWidth::Fixed(s.require("annulus_halfwidth")?),
    }
    Ok(cfg)
}

/// Run a parsed command line.
pub fn run(cli: Cli) -> CliResult<Status> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Detect(a) => cmd_detect(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Calibrate(a) => cmd_calibrate(&a),
        Command::Link(a) => cmd_link(&a),
        Command::Smooth(a) => cmd_smooth(&a),
        Command::Bench(a) => cmd_bench(&a),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn open(path: &Path) -> CliResult<File> {
    File::open(path).map_err(io_err(path))
}

fn cmd_synth(a: &SynthArgs) -> CliResult<Status> {
    let s = settings(a.config.as_deref(), &[SynthKeys::KEYS], a.keys.overrides())?;
    let out_dir: PathBuf = s.get_or("out_dir", PathBuf::from("corpus"))?;
    let kind: String = s.get_or("kind", "rings".to_string())?;
    match kind.as_str() {
        "rings" => synth_rings(&s, &out_dir),
        "flow" => synth_flow(&s, &out_dir),
        other => Err(CliError::Config(format!("kind must be 'rings' or 'flow', got {other:?}"))),
    }
}

/// Detector settings as a config file for `detect`.
pub fn detector_config_text(cfg: &DetectorConfig) -> String {
    let mut out = String::from("# detector settings matched to the rendered rings\n");
    let h = &cfg.hough;
    for (k, v) in [
        ("smoothing_sigma", cfg.smoothing_sigma.to_string()),
        ("curvature_threshold", cfg.curvature_threshold.to_string()),
        ("r_min", h.r_min.to_string()),
        ("r_max", h.r_max.to_string()),
        ("vote_threshold_raw", h.vote_threshold_raw.to_string()),
        ("vote_threshold_norm", h.vote_threshold_norm.to_string()),
    ] {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

fn frame_path(dir: &Path, f: usize) -> PathBuf {
    dir.join(format!("frame_{f:05}.pgm"))
}

fn write_frame(dir: &Path, f: usize, img: &GrayImage) -> CliResult<()> {
    let path = frame_path(dir, f);
    imaging::write_pgm(&path, img).map_err(file_err(&path))
}

fn synth_rings(s: &Settings, dir: &Path) -> CliResult<Status> {
    let d = CorpusSpec::robustness(s.get_or("frames", 600)?, s.get_or("seed", 2024)?);
    let spec = CorpusSpec {
        frames: d.frames,
        width: s.get_or("width", d.width)?,
        height: s.get_or("height", d.height)?,
        mean_rings: s.get_or("mean_rings", d.mean_rings)?,
        cluster_fraction: s.get_or("cluster_fraction", d.cluster_fraction)?,
        r_range: (s.get_or("r_lo", d.r_range.0)?, s.get_or("r_hi", d.r_range.1)?),
        amplitude_range: (s.get_or("amp_lo", d.amplitude_range.0)?, s.get_or("amp_hi", d.amplitude_range.1)?),
        ring_width: s.get_or("ring_width", d.ring_width)?,
        inner_rings: s.get_or("inner_rings", d.inner_rings)?,
        noise_sd: s.get_or("noise_sd", d.noise_sd)?,
        background: s.get_or("background", d.background)?,
        seed: d.seed,
    };
    let scenes = synth::generate_corpus(&spec).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut truth = Vec::new();
    for (f, scene) in scenes.iter().enumerate() {
        let (img, t) = synth::render_scene(scene)?;
        write_frame(dir, f, &img)?;
        truth.extend(t.into_iter().map(|r| (f, r)));
    }
    let truth_path = dir.join("truth.csv");
    let mut w = create(&truth_path)?;
    synth::write_truth_csv(&truth, &mut w).map_err(io_err(&truth_path))?;
    w.flush().map_err(io_err(&truth_path))?;

    let shape = synth::corpus_shape(&scenes);
    let manifest = serde_json::json!({
        "kind": "rings",
        "spec": spec,
        "shape": shape,
        "detector": spec.detector_config(),
    });
    write_text(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest).expect("json"))?;
    write_text(&dir.join("detect.cfg"), &detector_config_text(&spec.detector_config()))?;
    println!(
        "{} frames, {:.2} rings per frame, {:.1}% in clusters -> {}",
        shape.frames,
        shape.mean_rings,
        100.0 * shape.cluster_fraction,
        dir.display()
    );
    Ok(Status::Success)
}

fn synth_flow(s: &Settings, dir: &Path) -> CliResult<Status> {
    let d = flow::FlowSpec::new(s.get_or("frames", 300)?, s.get_or("particles", 6)?, s.get_or("seed", 11)?);
    let spec = flow::FlowSpec {
        width: s.get_or("width", d.width)?,
        height: s.get_or("height", d.height)?,
        pixel_size_um: s.get_or("pixel_size_um", d.pixel_size_um)?,
        ring_width: s.get_or("ring_width", d.ring_width)?,
        inner_rings: s.get_or("inner_rings", d.inner_rings)?,
        noise_sd: s.get_or("noise_sd", d.noise_sd)?,
        background: s.get_or("background", d.background)?,
        ..d
    };
    let curve = flow::flow_curve();
    let corpus = flow::generate_flow(&spec, &curve).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (f, scene) in corpus.scenes.iter().enumerate() {
        let (img, _) = synth::render_scene(scene)?;
        write_frame(dir, f, &img)?;
    }
    let truth_path = dir.join("positions_truth.csv");
    let mut w = create(&truth_path)?;
    track::write_positions_csv(&corpus.positions, &mut w).map_err(io_err(&truth_path))?;
    w.flush().map_err(io_err(&truth_path))?;
    write_text(&dir.join("curve.json"), &curve.to_json())?;

    let sweeps = flow::calibration_sweeps(
        &curve,
        s.get_or("tracers", 5)?,
        0.25,
        s.get_or("sweep_noise_px", 0.05)?,
        spec.seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let cal_path = dir.join("calibration.csv");
    calib::write_samples_csv(&sweeps, create(&cal_path)?).map_err(file_err(&cal_path))?;

    let manifest = serde_json::json!({
        "kind": "flow",
        "spec": spec,
        "curve": curve,
        "detector": spec.detector_config(&curve),
    });
    write_text(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest).expect("json"))?;
    let mut cfg_text = detector_config_text(&spec.detector_config(&curve));
    cfg_text.push_str(&format!("calibration = {}\npixel_size_um = {}\n", dir.join("curve.json").display(), spec.pixel_size_um));
    write_text(&dir.join("detect.cfg"), &cfg_text)?;
    println!("{} frames, {} particles -> {}", spec.frames, spec.particles, dir.display());
    Ok(Status::Success)
}

/// Frames named by `input`: every `.pgm`/`.png` in a directory, or the
/// matches of a glob pattern, sorted by path.
pub fn resolve_inputs(input: &str) -> CliResult<Vec<PathBuf>> {
    let p = Path::new(input);
    let mut paths: Vec<PathBuf> = if p.is_dir() {
        std::fs::read_dir(p)
            .map_err(io_err(p))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|q| {
                q.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("png"))
            })
            .collect()
    } else {
        glob::glob(input)
            .map_err(|e| CliError::Config(format!("bad input pattern {input:?}: {e}")))?
            .filter_map(|e| e.ok())
            .filter(|q| q.is_file())
            .collect()
    };
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!("input {input:?} matches no frames")));
    }
    Ok(paths)
}

fn cmd_detect(a: &DetectArgs) -> CliResult<Status> {
    let mut overrides = a.keys.overrides();
    overrides.extend(a.detector.overrides());
    let s = settings(a.config.as_deref(), &[DetectKeys::KEYS, DetectorKeys::KEYS], overrides)?;
    let input: String = s.require("input")?;
    let output: PathBuf = s.get_or("output", PathBuf::from("detections.csv"))?;
    // The scale and radius range depend on the optics; there is no default.
    let base = DetectorConfig::new(s.require("smoothing_sigma")?, s.require("r_min")?, s.require("r_max")?);
    let cfg = detector_config(&s, base)?;
    let workers = workers(&s)?;

    let positions = match s.get::<PathBuf>("positions")? {
        None => None,
        Some(path) => {
            let cal: PathBuf = s.require("calibration")?;
            let pixel: f64 = s.require("pixel_size_um")?;
            if !(pixel > 0.0) {
                return Err(CliError::Config("pixel_size_um must be positive".into()));
            }
            let curve = CalibrationCurve::load(&cal).map_err(|e| CliError::Config(format!("{}: {e}", cal.display())))?;
            Some((path, curve, pixel))
        }
    };

    let paths = resolve_inputs(&input)?;
    // Validate against the first decodable frame before dispatching work.
    if let Some(first) = paths.iter().find_map(|p| imaging::load_image(p).ok()) {
        cfg.validate(first.width(), first.height())?;
    } else {
        cfg.validate(usize::MAX / 4, usize::MAX / 4)?;
    }

    let out = batch::detect_files(&paths, &cfg, workers)?;
    batch::save_detections_csv(&out.frames, &output).map_err(file_err(&output))?;
    for sk in &out.report.skipped {
        eprintln!("skipped frame {} ({}): {}", sk.frame, paths[sk.frame].display(), sk.reason);
    }
    if let Some((path, curve, pixel)) = positions {
        let (frames, dropped) = frame_positions(&out.frames, paths.len(), &curve, pixel);
        let mut w = create(&path)?;
        track::write_positions_csv(&frames, &mut w).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
        if dropped > 0 {
            eprintln!("{dropped} detections outside the calibrated radius range were not localized");
        }
    }
    let rep = &out.report;
    if let Some(path) = s.get::<PathBuf>("report")? {
        write_text(&path, &rep.to_json())?;
    }
    println!(
        "{} of {} frames, {} detections, {:.2} frames/s with {} workers, peak slab {} bytes",
        rep.frames_processed, rep.frames_total, rep.detections, rep.fps, rep.workers, rep.peak_slab_bytes
    );
    Ok(if rep.is_partial() { Status::Partial } else { Status::Success })
}

fn frame_positions(
    frames: &[FrameDetections],
    count: usize,
    curve: &CalibrationCurve,
    pixel: f64,
) -> (Vec<Vec<[f64; 3]>>, usize) {
    let mut out = vec![Vec::new(); count];
    let mut dropped = 0;
    for f in frames {
        let (p, d) = calib::localize(&f.detections, curve, pixel);
        out[f.frame] = p;
        dropped += d;
    }
    (out, dropped)
}

fn cmd_score(a: &ScoreArgs) -> CliResult<Status> {
    let s = settings(a.config.as_deref(), &[ScoreKeys::KEYS], a.keys.overrides())?;
    let truth_path: PathBuf = s.require("truth")?;
    let det_path: PathBuf = s.require("detections")?;
    let tol_c = s.get_or("tol_center", synth::DEFAULT_TOL_CENTER)?;
    let tol_r = s.get_or("tol_radius", synth::DEFAULT_TOL_RADIUS)?;

    let truth = synth::read_truth_csv(open(&truth_path)?).map_err(file_err(&truth_path))?;
    let dets = batch::read_detections_csv(&det_path).map_err(file_err(&det_path))?;
    let mut by_frame: BTreeMap<usize, (Vec<TruthRing>, Vec<_>)> = BTreeMap::new();
    for (f, t) in truth {
        by_frame.entry(f).or_default().0.push(t);
    }
    for f in dets {
        by_frame.entry(f.frame).or_default().1.extend(f.detections);
    }
    let reports: Vec<MatchReport> =
        by_frame.values().map(|(t, d)| synth::score_detections(t, d, tol_c, tol_r)).collect();
    let total = MatchReport::aggregate(&reports);
    if let Some(path) = s.get::<PathBuf>("output")? {
        write_text(&path, &serde_json::to_string_pretty(&total).expect("json"))?;
    }
    println!(
        "detection rate {:.4}, false detection rate {:.4}, cluster detection rate {:.4} ({} true, {} missed, {} false)",
        total.detection_rate,
        total.false_rate,
        total.cluster_detection_rate,
        total.true_positives,
        total.false_negatives,
        total.false_positives
    );
    Ok(Status::Success)
}

fn cmd_calibrate(a: &CalibrateArgs) -> CliResult<Status> {
    let s = settings(a.config.as_deref(), &[CalibrateKeys::KEYS], a.keys.overrides())?;
    let samples_path: PathBuf = s.require("samples")?;
    let output: PathBuf = s.get_or("output", PathBuf::from("curve.json"))?;
    let ratio = s.get_or("refractive_ratio", DEFAULT_REFRACTIVE_RATIO)?;
    let samples: Vec<CalibrationSample> =
        calib::read_samples_csv(open(&samples_path)?).map_err(file_err(&samples_path))?;
    let rep = calib::calibrate(&samples, ratio).map_err(file_err(&samples_path))?;
    for (id, why) in &rep.excluded {
        eprintln!("tracer {id} excluded: {why}");
    }
    rep.curve.save(&output).map_err(file_err(&output))?;
    let c = &rep.curve;
    println!(
        "r = {:.6}·dz² + {:.6}·dz + {:.6}; rmse {:.4} µm; valid r [{:.2}, {:.2}] px; {} tracers",
        c.a,
        c.b,
        c.c,
        c.rmse_z,
        c.valid_r[0],
        c.valid_r[1],
        rep.shifts.len()
    );
    Ok(Status::Success)
}

fn cmd_link(a: &LinkArgs) -> CliResult<Status> {
    let s = settings(a.config.as_deref(), &[LinkKeys::KEYS], a.keys.overrides())?;
    let pos_path: PathBuf = s.require("positions")?;
    let output: PathBuf = s.get_or("output", PathBuf::from("trajectories.csv"))?;
    let rate = s.get_or("frame_rate", DEFAULT_FRAME_RATE_HZ)?;
    let mut cfg = LinkConfig::with_frame_rate(s.require("max_displacement")?, rate);
    cfg.memory = s.get_or("memory", cfg.memory)?;
    cfg.min_length = s.get_or("min_length", cfg.min_length)?;
    cfg.validate()?;

    let frames = track::read_positions_csv(open(&pos_path)?).map_err(file_err(&pos_path))?;
    let res = track::link_frames(&frames, &cfg)?;
    let mut w = create(&output)?;
    track::write_trajectories_csv(&res.trajectories, &mut w).map_err(io_err(&output))?;
    w.flush().map_err(io_err(&output))?;
    println!(
        "{} trajectories, {} unlinked samples, {} frames",
        res.trajectories.len(),
        res.unlinked.len(),
        frames.len()
    );
    Ok(Status::Success)
}

fn cmd_smooth(a: &SmoothArgs) -> CliResult<Status> {
    let s = settings(a.config.as_deref(), &[SmoothKeys::KEYS], a.keys.overrides())?;
    let traj_path: PathBuf = s.require("trajectories")?;
    let output: PathBuf = s.get_or("output", PathBuf::from("smoothed.csv"))?;
    let rate: f64 = s.get_or("frame_rate", DEFAULT_FRAME_RATE_HZ)?;
    if !(rate > 0.0) {
        return Err(CliError::Config("frame_rate must be positive".into()));
    }
    let lambda = match s.raw("lambda") {
        None => Lambda::Auto,
        Some(v) if v.eq_ignore_ascii_case("auto") => Lambda::Auto,
        Some(_) => Lambda::Fixed(s.require("lambda")?),
    };
    let trajs = track::read_trajectories_csv(open(&traj_path)?).map_err(file_err(&traj_path))?;
    let smoothed = trajs
        .iter()
        .map(|t| spline::smooth(t, lambda, 1.0 / rate))
        .collect::<crate::Result<Vec<_>>>()
        .map_err(file_err(&traj_path))?;
    let mut w = create(&output)?;
    spline::write_smoothed_csv(&smoothed, &mut w).map_err(io_err(&output))?;
    w.flush().map_err(io_err(&output))?;

    let summary: Vec<SmoothingSummary> = smoothed.iter().map(SmoothingSummary::from).collect();
    if let Some(path) = s.get::<PathBuf>("summary")? {
        write_text(&path, &serde_json::to_string_pretty(&summary).expect("json"))?;
    }
    let sigma = pooled_sigma(&summary);
    println!(
        "{} trajectories; noise estimate x {:.4} y {:.4} z {:.4}",
        smoothed.len(),
        sigma[0],
        sigma[1],
        sigma[2]
    );
    Ok(Status::Success)
}

/// Root mean square of the per-trajectory noise estimates, per axis.
pub fn pooled_sigma(summary: &[SmoothingSummary]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for s in summary {
        for (a, v) in acc.iter_mut().zip(&s.sigma_est) {
            *a += v * v;
        }
    }
    acc.map(|a| (a / summary.len().max(1) as f64).sqrt())
}

fn cmd_bench(a: &BenchArgs) -> CliResult<Status> {
    let mut overrides = a.keys.overrides();
    overrides.extend(a.detector.overrides());
    let s = settings(a.config.as_deref(), &[BenchKeys::KEYS, DetectorKeys::KEYS], overrides)?;
    let mut spec = CorpusSpec::robustness(s.get_or("frames", 20)?, s.get_or("seed", 7)?);
    spec.width = s.get_or("width", 968)?;
    spec.height = s.get_or("height", 728)?;
    spec.mean_rings = s.get_or("mean_rings", 50.0)?;
    let counts: Vec<usize> = match s.raw("worker_counts") {
        None => vec![1, workers(&s)?],
        Some(list) => list
            .split(',')
            .map(|w| w.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Config(format!("worker_counts = {list:?}: {e}")))?,
    };
    if counts.contains(&0) {
        return Err(CliError::Config("worker counts must be at least 1".into()));
    }
    let cfg = detector_config(&s, spec.detector_config())?;
    cfg.validate(spec.width, spec.height)?;
    let images = synth::generate_corpus(&spec)
        .map_err(|e| CliError::Config(e.to_string()))?
        .iter()
        .map(|sc| synth::render_scene(sc).map(|(img, _)| img))
        .collect::<crate::Result<Vec<_>>>()?;
    let rep = batch::benchmark(&images, &cfg, &counts, s.get_or("oracle_frames", 0)?)?;
    if let Some(path) = s.get::<PathBuf>("output")? {
        write_text(&path, &rep.to_json())?;
    }
    println!("{} frames {}x{}, {} detections", rep.frames, rep.width, rep.height, rep.detections);
    for r in &rep.runs {
        println!("{:3} workers: {:8.2} frames/s, speedup {:.2}", r.workers, r.fps, r.speedup);
    }
    println!("outputs identical across worker counts: {}", rep.identical);
    if let Some(o) = &rep.oracle {
        println!(
            "oracle: {} frames, streamed {:.3} s, oracle {:.3} s, speedup {:.1}, identical {}",
            o.frames, o.streamed_seconds, o.oracle_seconds, o.speedup, o.identical
        );
    }
    Ok(Status::Success)
}
