//! `orsense`: composite → extract → train → detect → classify-impact → export → review.
//!
//! Failures print one `error kind=<kind>: <message>` line on stderr and exit
//! with 2 (usage), 3 (data or format) or 4 (numeric).

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use orsense_core::compositing::{composite_stack, parse_date, SceneStack};
use orsense_core::dataset::{build_patchset, load_points, write_points_csv, NormStats, PatchSet};
use orsense_core::models::{build_discovery_fcn, build_impact_cnn, DISCOVERY_PATCH, IMPACT_PATCH};
use orsense_core::nn::{load_weights, save_weights, NetworkSpec, WeightSet};
use orsense_core::raster::{read_geotiff, write_geotiff, Raster};
use orsense_core::synthetic::{
    generate_cloudy_stack, generate_dataset, generate_scene, mosaic_scene_spec, write_stack, DatasetSpec, MosaicSpec,
    StackSpec,
};
use orsense_core::training::{cross_validate, train_all, Task, TrainConfig};
use orsense_core::widearea::{cluster, detect, impact_filter, stride_meters, DetectOptions, DetectionSet, Format};
use orsense_core::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "orsense", version, about = "Mine and tailings-dam discovery in 12-band mosaics")]
struct Cli {
    /// Worker threads for compositing, extraction, training folds and detection.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cloud-masked median composite of a scene directory.
    Composite(CompositeArgs),
    /// Cut labeled patches around points.
    Extract(ExtractArgs),
    /// Train a network with k-fold cross-validation.
    Train(TrainArgs),
    /// Run the discovery network over a mosaic.
    Detect(DetectArgs),
    /// Drop detections the impact model calls no-ore and record the class of the rest.
    ClassifyImpact(ClassifyArgs),
    /// Convert a detection file to csv, kml or geojson.
    Export(ExportArgs),
    /// Generate synthetic scenes, stacks or datasets.
    Synth(SynthArgs),
    /// Serve the analyst review API.
    Review(ReviewArgs),
}

#[derive(Args)]
struct CompositeArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip scenes with this much cloud cover or more, in percent [default: 20].
    #[arg(long)]
    max_cloud: Option<f64>,
    /// First sensing date kept [default: 2018-01-01].
    #[arg(long)]
    from: Option<String>,
    /// End of the date window, exclusive [default: 2020-01-01].
    #[arg(long)]
    to: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct CompositeConfig {
    max_cloud: f64,
    from: String,
    to: String,
}

impl Default for CompositeConfig {
    fn default() -> Self {
        CompositeConfig {
            max_cloud: 20.0,
            from: "2018-01-01".into(),
            to: "2020-01-01".into(),
        }
    }
}

#[derive(Args)]
struct ExtractArgs {
    /// Mosaic to cut from; repeat to try several in order.
    #[arg(long, required = true)]
    mosaic: Vec<PathBuf>,
    #[arg(long)]
    points: PathBuf,
    /// Patch side: 201 for discovery, 21 for impact.
    #[arg(long, default_value_t = DISCOVERY_PATCH)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Discovery,
    Impact,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Discovery => Task::Discovery,
            TaskArg::Impact => Task::Impact,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    task: TaskArg,
    /// Patch directory with a manifest; repeat to train on the union.
    #[arg(long, required = true)]
    patches: Vec<PathBuf>,
    /// [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Cross-validation folds; 1 trains once on everything [default: 10].
    #[arg(long)]
    folds: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// JSON training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weights file; stats, history.csv and metrics.json go next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    mosaic: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Normalization stats [default: <weights>.stats.json].
    #[arg(long)]
    stats: Option<PathBuf>,
    /// [default: 0.5]
    #[arg(long)]
    threshold: Option<f64>,
    /// Largest tile side in pixels [default: 4608].
    #[arg(long)]
    max_tile: Option<usize>,
    /// Overlap between neighboring tiles in pixels [default: 216].
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; format from the extension unless --format is given.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct DetectConfig {
    threshold: f64,
    max_tile: usize,
    overlap: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        let d = DetectOptions::default();
        DetectConfig {
            threshold: d.threshold,
            max_tile: d.max_tile,
            overlap: d.overlap,
        }
    }
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    mosaic: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// [default: <weights>.stats.json]
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    detections: PathBuf,
    /// csv, kml or geojson [default: from the --out extension].
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// A mosaic with randomly placed targets plus its ground truth.
    Scene,
    /// A cloudy scene stack with QA60 bands and the clear base scene.
    Stack,
    /// Discovery and impact patch sets plus the points they came from.
    Dataset,
}

#[derive(Args)]
struct SynthArgs {
    kind: SynthKind,
    /// JSON spec for the chosen kind; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReviewArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    mosaic: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Label journal [default: <detections>.journal.jsonl].
    #[arg(long)]
    journal: Option<PathBuf>,
    /// Built review UI to serve at `/`.
    #[arg(long)]
    ui: Option<PathBuf>,
}

struct Failure {
    code: u8,
    kind: String,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Usage(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        };
        Failure {
            code,
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        kind: "usage".into(),
        message: msg.into(),
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?)
}

fn stats_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".stats.json");
    PathBuf::from(s)
}

fn create_parent(path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn output_format(path: &Path, flag: Option<&str>) -> CliResult<Format> {
    match flag {
        Some(f) => f.parse().map_err(usage),
        None => Format::from_path(path)
            .ok_or_else(|| usage(format!("cannot tell the format of {}; pass --format", path.display()))),
    }
}

/// The twelve model bands of a mosaic, by name when the file carries them.
fn load_mosaic(path: &Path) -> CliResult<Raster> {
    let m = read_geotiff(path)?;
    match m.model_bands() {
        Ok(b) => Ok(b),
        Err(e) if m.band_count() == 12 => {
            log::warn!("{}: {e}; using its 12 bands in file order", path.display());
            Ok(m)
        }
        Err(_) => Err(Error::Input(format!("{} has {} bands, the models need the 12 Sentinel-2 bands", path.display(), m.band_count())).into()),
    }
}

fn load_model(path: &Path, expect: &NetworkSpec, what: &str) -> CliResult<(NetworkSpec, WeightSet)> {
    let (spec, w) = load_weights(path)?;
    if spec != *expect {
        return Err(Error::Input(format!("{} does not hold {what} weights", path.display())).into());
    }
    Ok((spec, w))
}

fn composite(a: CompositeArgs) -> CliResult {
    let mut cfg: CompositeConfig = read_config(a.config.as_deref())?;
    if let Some(v) = a.max_cloud {
        cfg.max_cloud = v;
    }
    if let Some(v) = a.from {
        cfg.from = v;
    }
    if let Some(v) = a.to {
        cfg.to = v;
    }
    let (from, to) = (parse_date(&cfg.from)?, parse_date(&cfg.to)?);
    if from >= to {
        return Err(usage(format!("empty date window [{from}, {to})")));
    }
    let stack = SceneStack::load_dir(&a.scenes)?;
    log::info!("{} scenes loaded from {}", stack.len(), a.scenes.display());
    let out = composite_stack(&stack, from, to, cfg.max_cloud)?;
    create_parent(&a.out)?;
    write_geotiff(&out, &a.out)?;
    log::info!("composite written to {}", a.out.display());
    Ok(())
}

fn extract(a: ExtractArgs) -> CliResult {
    if a.size != DISCOVERY_PATCH && a.size != IMPACT_PATCH {
        return Err(usage(format!("--size must be {DISCOVERY_PATCH} or {IMPACT_PATCH}")));
    }
    let load = load_points(&a.points)?;
    for e in &load.errors {
        log::warn!("{} row {}: {}", a.points.display(), e.row, e.message);
    }
    let mosaics = a.mosaic.iter().map(|p| read_geotiff(p)).collect::<orsense_core::Result<Vec<_>>>()?;
    let report = build_patchset(&load.records, &mosaics, a.size, &a.out)?;
    log::info!(
        "{} patches written to {}, {} skipped",
        report.manifest.records.len(),
        a.out.display(),
        report.skipped.len()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let mut cfg: TrainConfig = read_config(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.folds {
        cfg.k = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.optimizer.learning_rate = v;
    }
    if cfg.k == 0 {
        return Err(usage("--folds must be at least 1"));
    }
    let task: Task = a.task.into();
    let spec = match task {
        Task::Discovery => build_discovery_fcn(),
        Task::Impact => build_impact_cnn(),
    };
    let sets = a.patches.iter().map(PatchSet::load).collect::<orsense_core::Result<Vec<_>>>()?;
    let set = PatchSet::concat(sets)?;
    create_parent(&a.out)?;
    let dir = a.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let t0 = std::time::Instant::now();
    if cfg.k == 1 {
        let outcome = train_all(&spec, &set, task, &cfg)?;
        save_weights(&spec, &outcome.weights, &a.out)?;
        outcome.stats.save(stats_path(&a.out))?;
        outcome.history.write_csv(dir.join("history.csv"))?;
        let last = outcome.history.epochs.last().expect("at least one epoch");
        let metrics = serde_json::json!({
            "task": task,
            "k": 1,
            "train_accuracy": last.train_acc,
            "train_loss": last.train_loss,
            "seconds": t0.elapsed().as_secs_f64(),
        });
        write_json(&dir.join("metrics.json"), &metrics)?;
        log::info!("trained on {} patches, final train accuracy {:.4}", set.len(), last.train_acc);
    } else {
        let report = cross_validate(&spec, &set, task, &cfg)?;
        let best = report.best_fold();
        save_weights(&spec, &best.outcome.weights, &a.out)?;
        best.outcome.stats.save(stats_path(&a.out))?;
        report.write_history(dir.join("history.csv"))?;
        let mut metrics = report.metrics_json();
        metrics["seconds"] = t0.elapsed().as_secs_f64().into();
        write_json(&dir.join("metrics.json"), &metrics)?;
        log::info!(
            "{}-fold validation accuracy {:.4} ± {:.4}; fold {} weights saved to {}",
            report.k,
            report.mean_accuracy,
            report.std_accuracy,
            best.fold + 1,
            a.out.display()
        );
    }
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> CliResult {
    let text = serde_json::to_string_pretty(v).map_err(Error::from)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn detect_cmd(a: DetectArgs) -> CliResult {
    let mut cfg: DetectConfig = read_config(a.config.as_deref())?;
    if let Some(v) = a.threshold {
        cfg.threshold = v;
    }
    if let Some(v) = a.max_tile {
        cfg.max_tile = v;
    }
    if let Some(v) = a.overlap {
        cfg.overlap = v;
    }
    let format = output_format(&a.out, a.format.as_deref())?;
    let (spec, w) = load_model(&a.weights, &build_discovery_fcn(), "discovery")?;
    let stats = NormStats::load(a.stats.unwrap_or_else(|| stats_path(&a.weights)))?;
    let mosaic = load_mosaic(&a.mosaic)?;
    let opts = DetectOptions {
        threshold: cfg.threshold,
        max_tile: cfg.max_tile,
        overlap: cfg.overlap,
    };
    let mut set = detect(&mosaic, &spec, &w, &stats, &opts)?;
    set.provenance.mosaic = a.mosaic.display().to_string();
    cluster(&mut set, stride_meters(&mosaic));
    create_parent(&a.out)?;
    set.export(format, &a.out)?;
    log::info!(
        "{} detections over {} grid cells in {} tiles written to {}",
        set.detections.len(),
        set.provenance.grid_cells,
        set.provenance.tiles,
        a.out.display()
    );
    Ok(())
}

fn classify_cmd(a: ClassifyArgs) -> CliResult {
    let format = output_format(&a.out, a.format.as_deref())?;
    let (spec, w) = load_model(&a.weights, &build_impact_cnn(), "impact")?;
    let stats = NormStats::load(a.stats.unwrap_or_else(|| stats_path(&a.weights)))?;
    let mosaic = load_mosaic(&a.mosaic)?;
    let set = DetectionSet::load(&a.detections)?;
    let mut out = impact_filter(&set, &mosaic, &spec, &w, &stats)?;
    cluster(&mut out, stride_meters(&mosaic));
    create_parent(&a.out)?;
    out.export(format, &a.out)?;
    log::info!(
        "{} of {} detections kept after impact filtering",
        out.detections.len(),
        set.detections.len()
    );
    Ok(())
}

fn export_cmd(a: ExportArgs) -> CliResult {
    let format = output_format(&a.out, a.format.as_deref())?;
    let set = DetectionSet::load(&a.detections)?;
    create_parent(&a.out)?;
    set.export(format, &a.out)?;
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> CliResult {
    let out = &a.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match a.kind {
        SynthKind::Scene => {
            let mut spec: MosaicSpec = read_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            let scene = mosaic_scene_spec(&spec)?;
            let (raster, truth) = generate_scene(&scene)?;
            write_geotiff(&raster, out.join("mosaic.tif"))?;
            write_points_csv(&truth, out.join("truth.csv"))?;
            write_json(&out.join("scene.json"), &serde_json::to_value(&scene).map_err(Error::from)?)?;
            log::info!("{}px mosaic with {} targets written to {}", scene.size, truth.len(), out.display());
        }
        SynthKind::Stack => {
            let mut spec: StackSpec = read_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                spec.scene.seed = s;
            }
            let (stack, base) = generate_cloudy_stack(&spec)?;
            write_stack(&stack, out.join("scenes"))?;
            write_geotiff(&base, out.join("base.tif"))?;
            let (_, truth) = generate_scene(&spec.scene)?;
            write_points_csv(&truth, out.join("truth.csv"))?;
            log::info!("{} scenes written to {}", stack.len(), out.join("scenes").display());
        }
        SynthKind::Dataset => {
            let mut spec: DatasetSpec = read_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            let sum = generate_dataset(&spec, out)?;
            log::info!(
                "{} discovery and {} impact patches written to {}",
                sum.discovery.records.len(),
                sum.impact.records.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn review_cmd(a: ReviewArgs) -> CliResult {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| usage(format!("bad --host/--port: {e}")))?;
    let session = orsense_review::ReviewSession::open(&a.detections, &a.mosaic, a.journal).map_err(|e| Failure {
        code: 3,
        kind: "input".into(),
        message: e.to_string(),
    })?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(orsense_review::serve(Arc::new(session), addr, a.ui))
        .map_err(|e| Error::io(addr.to_string(), e))?;
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    match cli.cmd {
        Cmd::Composite(a) => composite(a),
        Cmd::Extract(a) => extract(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Detect(a) => detect_cmd(a),
        Cmd::ClassifyImpact(a) => classify_cmd(a),
        Cmd::Export(a) => export_cmd(a),
        Cmd::Synth(a) => synth_cmd(a),
        Cmd::Review(a) => review_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error kind={}: {}", f.kind, f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
