//! Command-line front end. Every subcommand reads and writes the on-disk
//! formats of [`crate::volume`] and prints a JSON summary on stdout. Failures
//! print one JSON line on stderr and map to exit codes 2 (usage),
//! 3 (validation) and 4 (numerical).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::loss::{finite_difference_check, random_instance, transition_corrected_loss, LossOptions, Reduction};
use crate::metrics::{evaluate, MetricsOptions};
use crate::phantom::{generate_phantom, inject_boundary_noise, NoiseSpec, PhantomSpec};
use crate::pipeline::{run_pipeline, write_json, PipelineSpec, MANIFEST_NAME};
use crate::smoothing::{compute_mask, smooth_labels_with, standard_smooth, SmoothingConfig};
use crate::trainer::{run_demo, DemoConfig, DemoModes, TrainConfig};
use crate::transition::{estimate_transition, TransitionMatrix, TransitionSample, DEFAULT_LAMBDA};
use crate::volume::{
    read_labels, read_probs, read_scalar, read_scores, write_volume_as, ElementType, LabelId,
    UncertaintyTable, VolumeRef,
};
use crate::{Error, Result, FORMAT_VERSION};

/// Version of the transition CSV layout.
pub const TRANSITION_CSV_VERSION: u32 = 1;

pub fn version_string() -> String {
    format!(
        "noisyseg {} (volume format {FORMAT_VERSION}, transition csv {TRANSITION_CSV_VERSION}, manifest {FORMAT_VERSION})",
        env!("CARGO_PKG_VERSION")
    )
}

#[derive(Parser, Debug)]
#[command(name = "noisyseg", disable_version_flag = true, about = "Noisy-annotation tools for 3D label volumes")]
struct Cli {
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Print version and file format versions.
    #[arg(long, short = 'V')]
    version: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a nested-shell phantom with clean and noisy labels.
    Phantom(PhantomArgs),
    /// Smooth a label volume into soft targets and an altered-voxel mask.
    Smooth(SmoothArgs),
    /// Recompute the altered-voxel mask from labels and soft targets.
    Mask(MaskArgs),
    /// Estimate the label transition matrix from (labels, soft targets) pairs.
    #[command(name = "estimate-T")]
    EstimateT(EstimateArgs),
    /// Evaluate the corrected loss.
    Loss(LossArgs),
    /// Compare analytic loss gradients with central differences.
    GradCheck(GradCheckArgs),
    /// DSC, HD95 and ASSD between two label volumes.
    Metrics(MetricsArgs),
    /// Train clean, plain and corrected models on noisy phantoms.
    TrainDemo(TrainDemoArgs),
    /// Run every stage end to end and write a checksummed manifest.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// JSON with `phantom` and `noise` objects.
    #[arg(long)]
    spec: PathBuf,
    /// Outputs are written as `<prefix>_clean`, `<prefix>_noisy`, ...
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SmoothMethod {
    Adaptive,
    Standard,
}

#[derive(Args, Debug)]
struct SmoothArgs {
    #[arg(long)]
    labels: PathBuf,
    /// Per-label uncertainty JSON (`{"0": 0, "1": 2, ...}`).
    #[arg(long)]
    uncertainty: Option<PathBuf>,
    #[arg(long)]
    out_probs: PathBuf,
    #[arg(long)]
    out_mask: PathBuf,
    #[arg(long)]
    tau_override: Option<f64>,
    #[arg(long, value_enum, default_value_t = SmoothMethod::Adaptive)]
    method: SmoothMethod,
    /// Strength of standard smoothing.
    #[arg(long, default_value_t = crate::pipeline::DEFAULT_ALPHA)]
    alpha: f64,
    /// Store probabilities as f64 instead of f32.
    #[arg(long)]
    f64: bool,
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    probs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// JSON `{"pairs": [{"labels": .., "smoothed": .., "mask": ..}]}`; paths
    /// are relative to the manifest, `mask` is optional.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
}

#[derive(Args, Debug)]
struct LossArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    targets: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    transition: PathBuf,
    /// Overrides the lambda stored in the transition file.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum, default_value_t = Reduction::Sum)]
    reduction: Reduction,
    /// Use `(T + lambda I)^-1` instead of `(T^T + lambda I)^-1`.
    #[arg(long)]
    no_transpose: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-voxel loss map.
    #[arg(long)]
    per_voxel: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 8])]
    labels: Vec<usize>,
    /// Edge length of the random cubic instances.
    #[arg(long, default_value_t = 3)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, value_enum, default_value_t = Reduction::Sum)]
    reduction: Reduction,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// `all` (foreground labels) or a comma-separated list.
    #[arg(long, default_value = "all")]
    labels: String,
    /// Include directed distance statistics.
    #[arg(long)]
    directed: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DemoMode {
    Corrected,
    Plain,
    Both,
}

#[derive(Args, Debug)]
struct TrainDemoArgs {
    #[arg(long)]
    phantom_spec: PathBuf,
    #[arg(long)]
    noise: PathBuf,
    #[arg(long, value_enum, default_value_t = DemoMode::Both)]
    mode: DemoMode,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Optional training config JSON.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long)]
    tau_override: Option<f64>,
    #[arg(long)]
    no_transpose: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            return report(&Error::Usage(first.to_string()));
        }
    };
    if cli.version {
        println!("{}", version_string());
        return 0;
    }
    let Some(command) = cli.command else {
        return report(&Error::Usage("missing subcommand (see --help)".into()));
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => return report(&Error::Usage(format!("cannot start {} threads: {e}", cli.threads))),
    };
    match pool.install(|| run(command)) {
        Ok(summary) => {
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            0
        }
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> i32 {
    let stage = match e {
        Error::Stage { stage, .. } => Some(stage.as_str()),
        _ => None,
    };
    let line = json!({
        "error": e.kind(),
        "exit_code": e.exit_code(),
        "stage": stage,
        "message": e.to_string().replace('\n', " "),
    });
    eprintln!("{line}");
    e.exit_code()
}

fn run(command: Command) -> Result<serde_json::Value> {
    match command {
        Command::Phantom(a) => phantom(a),
        Command::Smooth(a) => smooth(a),
        Command::Mask(a) => mask(a),
        Command::EstimateT(a) => estimate(a),
        Command::Loss(a) => loss(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Metrics(a) => metrics(a),
        Command::TrainDemo(a) => train_demo(a),
        Command::Pipeline(a) => pipeline(a),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_vol<'a>(vol: impl Into<VolumeRef<'a>>, path: &Path, f64: bool) -> Result<()> {
    create_parent(path)?;
    let ty = if f64 { ElementType::F64 } else { ElementType::F32 };
    write_volume_as(vol, path, ty)
}

/// Phantom config; other top-level keys (as in a pipeline spec) are ignored.
#[derive(Deserialize)]
struct PhantomFile {
    phantom: PhantomSpec,
    noise: NoiseSpec,
}

fn phantom(a: PhantomArgs) -> Result<serde_json::Value> {
    let cfg: PhantomFile = read_json(&a.spec)?;
    let phantom = generate_phantom(&cfg.phantom)?;
    let noisy = inject_boundary_noise(&phantom.clean, &cfg.noise)?;
    let table = cfg.noise.uncertainty_table()?;
    let paths = ["_clean", "_noisy", "_intensity", "_uncertainty.json"].map(|s| with_suffix(&a.out_prefix, s));
    write_vol(&phantom.clean, &paths[0], false)?;
    write_vol(&noisy, &paths[1], false)?;
    write_vol(&phantom.intensity, &paths[2], false)?;
    table.save(&paths[3])?;
    let changed = noisy.labels().iter().zip(phantom.clean.labels()).filter(|(x, y)| x != y).count();
    Ok(json!({
        "clean": paths[0], "noisy": paths[1], "intensity": paths[2], "uncertainty": paths[3],
        "num_labels": phantom.clean.num_labels(),
        "flipped_voxels": changed,
    }))
}

fn smooth(a: SmoothArgs) -> Result<serde_json::Value> {
    let labels = read_labels(&a.labels)?;
    let (probs, mask) = match a.method {
        SmoothMethod::Adaptive => {
            let path = a
                .uncertainty
                .as_deref()
                .ok_or_else(|| Error::Usage("--uncertainty is required for adaptive smoothing".into()))?;
            let table = UncertaintyTable::load(path)?;
            let out = smooth_labels_with(&labels, &table, &SmoothingConfig { tau_override: a.tau_override })?;
            (out.smoothed, out.mask)
        }
        SmoothMethod::Standard => {
            let probs = standard_smooth(&labels, a.alpha)?;
            let mask = compute_mask(&labels, &probs)?;
            (probs, mask)
        }
    };
    write_vol(&probs, &a.out_probs, a.f64)?;
    write_vol(&mask, &a.out_mask, false)?;
    Ok(json!({
        "probs": a.out_probs,
        "mask": a.out_mask,
        "altered_voxels": mask.count_nonzero(),
        "voxels": labels.geometry().len(),
    }))
}

fn mask(a: MaskArgs) -> Result<serde_json::Value> {
    let labels = read_labels(&a.labels)?;
    let probs = read_probs(&a.probs)?;
    let mask = compute_mask(&labels, &probs)?;
    write_vol(&mask, &a.out, false)?;
    Ok(json!({ "mask": a.out, "altered_voxels": mask.count_nonzero() }))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairsFile {
    pairs: Vec<PairEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairEntry {
    labels: PathBuf,
    smoothed: PathBuf,
    #[serde(default)]
    mask: Option<PathBuf>,
}

fn estimate(a: EstimateArgs) -> Result<serde_json::Value> {
    let manifest: PairsFile = read_json(&a.pairs)?;
    if manifest.pairs.is_empty() {
        return Err(Error::validation("pairs manifest lists no volumes"));
    }
    let base = a.pairs.parent().unwrap_or(Path::new(""));
    let mut loaded = Vec::with_capacity(manifest.pairs.len());
    for p in &manifest.pairs {
        let labels = read_labels(&base.join(&p.labels))?;
        let smoothed = read_probs(&base.join(&p.smoothed))?;
        let mask = match &p.mask {
            Some(m) => read_scalar(&base.join(m))?,
            None => compute_mask(&labels, &smoothed)?,
        };
        loaded.push((labels, smoothed, mask));
    }
    let samples: Vec<TransitionSample> = loaded
        .iter()
        .map(|(l, s, m)| TransitionSample::new(l, s, m))
        .collect();
    let t = estimate_transition(&samples, a.lambda)?;
    create_parent(&a.out)?;
    t.save(&a.out)?;
    let l = t.num_labels();
    Ok(json!({
        "out": a.out,
        "volumes": samples.len(),
        "lambda": a.lambda,
        "diagonal": (0..l).map(|j| t.matrix().get(j, j)).collect::<Vec<_>>(),
    }))
}

fn loss(a: LossArgs) -> Result<serde_json::Value> {
    let scores = read_scores(&a.scores)?;
    let targets = read_probs(&a.targets)?;
    let mask = read_scalar(&a.mask)?;
    let mut t = TransitionMatrix::load(&a.transition)?;
    if let Some(lambda) = a.lambda {
        t = t.with_lambda(lambda)?;
    }
    if a.no_transpose {
        t = t.without_transpose()?;
    }
    let options = LossOptions {
        reduction: a.reduction,
        per_voxel: a.per_voxel.is_some(),
    };
    let report = transition_corrected_loss(&scores, &targets, &mask, &t, options)?;
    if let (Some(path), Some(map)) = (&a.per_voxel, &report.per_voxel) {
        write_vol(map, path, true)?;
    }
    let value = json!({
        "total": report.total,
        "clean_term": report.clean_term,
        "corrected_term": report.corrected_term,
        "reduction": report.reduction,
        "num_voxels": report.num_voxels,
        "lambda": t.lambda(),
        "transposed": t.is_transposed(),
    });
    if let Some(out) = &a.out {
        create_parent(out)?;
        write_json(&value, out)?;
    }
    Ok(value)
}

fn grad_check(a: GradCheckArgs) -> Result<serde_json::Value> {
    if a.labels.is_empty() || a.size == 0 {
        return Err(Error::Usage("grad-check needs labels and a positive size".into()));
    }
    let mut runs = Vec::new();
    let mut worst = 0.0f64;
    for (i, &l) in a.labels.iter().enumerate() {
        let (scores, targets, mask, c) = random_instance([a.size; 3], l, a.seed.wrapping_add(i as u64))?;
        let check = finite_difference_check(&scores, &targets, &mask, &c, a.reduction, a.step)?;
        worst = worst.max(check.max_relative_error);
        runs.push(check);
    }
    if !(worst <= a.tolerance) {
        return Err(Error::numerical(format!(
            "max relative gradient error {worst:e} exceeds {:e}",
            a.tolerance
        )));
    }
    Ok(json!({ "max_relative_error": worst, "tolerance": a.tolerance, "runs": runs }))
}

fn parse_labels(spec: &str) -> Result<Option<Vec<LabelId>>> {
    if spec.trim() == "all" {
        return Ok(None);
    }
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<LabelId>()
                .map_err(|_| Error::Usage(format!("--labels: bad label id {s:?}")))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn metrics(a: MetricsArgs) -> Result<serde_json::Value> {
    let labels = parse_labels(&a.labels)?;
    let pred = read_labels(&a.pred)?;
    let reference = read_labels(&a.reference)?;
    let report = evaluate(
        &pred,
        &reference,
        &MetricsOptions {
            labels,
            directed: a.directed,
        },
    )?;
    if let Some(out) = &a.out {
        create_parent(out)?;
        write_json(&report, out)?;
    }
    Ok(serde_json::to_value(&report).expect("report serializes"))
}

fn train_demo(a: TrainDemoArgs) -> Result<serde_json::Value> {
    let config = DemoConfig {
        phantom: read_json(&a.phantom_spec)?,
        noise: read_json(&a.noise)?,
        train: match &a.train {
            Some(p) => read_json(p)?,
            None => TrainConfig::default(),
        },
        seeds: a.seeds,
        lambda: a.lambda,
        tau_override: a.tau_override,
        no_transpose: a.no_transpose,
    };
    if config.seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    let modes = match a.mode {
        DemoMode::Corrected => DemoModes { plain: false, corrected: true },
        DemoMode::Plain => DemoModes { plain: true, corrected: false },
        DemoMode::Both => DemoModes::BOTH,
    };
    let report = run_demo(&config, modes)?;
    if let Some(out) = &a.out {
        create_parent(out)?;
        write_json(&report, out)?;
    }
    Ok(serde_json::to_value(&report).expect("report serializes"))
}

fn pipeline(a: PipelineArgs) -> Result<serde_json::Value> {
    let spec = PipelineSpec::load(&a.spec)?;
    let manifest = run_pipeline(&spec, Some(&a.spec), &a.out_dir)?;
    Ok(json!({
        "manifest": a.out_dir.join(MANIFEST_NAME),
        "stages": manifest.stages.iter().map(|s| &s.name).collect::<Vec<_>>(),
        "outputs": manifest.outputs().count(),
    }))
}
