//! End-to-end run: phantom, smoothing, mask, transition estimate, training
//! demo and metrics, with a manifest of every output and its SHA-256.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::{evaluate, MetricsOptions, MetricsReport};
use crate::phantom::{generate_phantom, inject_boundary_noise, NoiseSpec, PhantomSpec, RNG_NAME};
use crate::smoothing::{compute_mask, smooth_labels_with, SmoothingConfig};
use crate::trainer::{featurize, predict, run_seed, summarize, DemoConfig, DemoModes, TrainConfig};
use crate::transition::{estimate_transition, TransitionSample, DEFAULT_LAMBDA};
use crate::volume::{write_volume, volume_paths, VolumeRef};
use crate::{Error, Result, FORMAT_VERSION};

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub phantom: PhantomSpec,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Standard-smoothing strength; recorded for reference runs.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub tau_override: Option<f64>,
    #[serde(default)]
    pub no_transpose: bool,
}

fn default_seeds() -> u64 {
    5
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl PipelineSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn demo_config(&self) -> DemoConfig {
        DemoConfig {
            phantom: self.phantom.clone(),
            noise: self.noise.clone(),
            train: self.train.clone(),
            seeds: self.seeds,
            lambda: self.lambda,
            tau_override: self.tau_override,
            no_transpose: self.no_transpose,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub wall_clock_s: f64,
    pub outputs: Vec<OutputFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    /// Largest per-label uncertainty radius, in voxels.
    pub radius: u32,
    pub uncertainty: Vec<u32>,
    pub lambda: f64,
    pub alpha: f64,
    pub tau_override: Option<f64>,
    pub seeds: u64,
    pub phantom_seed: u64,
    pub noise_seed: u64,
    pub no_transpose: bool,
    pub train: TrainConfig,
    pub rng: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub format_version: u32,
    pub inputs: Vec<OutputFile>,
    pub parameters: Parameters,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn outputs(&self) -> impl Iterator<Item = &OutputFile> {
        self.stages.iter().flat_map(|s| s.outputs.iter())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

pub fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

struct Stage<'a> {
    dir: &'a Path,
    name: &'static str,
    start: Instant,
    files: Vec<PathBuf>,
}

impl<'a> Stage<'a> {
    fn begin(dir: &'a Path, name: &'static str) -> Self {
        Stage {
            dir,
            name,
            start: Instant::now(),
            files: Vec::new(),
        }
    }

    fn volume<'v>(&mut self, vol: impl Into<VolumeRef<'v>>, stem: &str) -> Result<()> {
        let path = self.dir.join(stem);
        write_volume(vol, &path)?;
        let (header, payload) = volume_paths(&path);
        self.files.push(header);
        self.files.push(payload);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, value: &T, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        write_json(value, &path)?;
        self.files.push(path);
        Ok(())
    }

    fn finish(self) -> Result<StageRecord> {
        let wall_clock_s = self.start.elapsed().as_secs_f64();
        let outputs = self
            .files
            .iter()
            .map(|p| describe(p, self.dir))
            .collect::<Result<_>>()?;
        Ok(StageRecord {
            name: self.name.to_string(),
            wall_clock_s,
            outputs,
        })
    }
}

fn describe(path: &Path, dir: &Path) -> Result<OutputFile> {
    let (bytes, sha256) = sha256_file(path)?;
    let rel = path.strip_prefix(dir).unwrap_or(path);
    Ok(OutputFile {
        path: rel.to_string_lossy().into_owned(),
        bytes,
        sha256,
    })
}

fn staged<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| e.in_stage(name))
}

/// Runs every stage into `out_dir` (created if missing) and writes
/// `manifest.json` there. Seed 0 of the demo provides the volumes written by
/// the per-stage outputs.
pub fn run_pipeline(spec: &PipelineSpec, spec_path: Option<&Path>, out_dir: &Path) -> Result<RunManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let table = staged("config", || spec.noise.uncertainty_table())?;
    let mut stages = Vec::new();

    let mut st = Stage::begin(out_dir, "phantom");
    let (phantom, noisy) = staged(st.name, || {
        let phantom = generate_phantom(&spec.phantom)?;
        let noisy = inject_boundary_noise(&phantom.clean, &spec.noise)?;
        st.volume(&phantom.clean, "clean")?;
        st.volume(&noisy, "noisy")?;
        st.volume(&phantom.intensity, "intensity")?;
        let path = out_dir.join("uncertainty.json");
        table.save(&path)?;
        st.files.push(path);
        Ok((phantom, noisy))
    })?;
    stages.push(st.finish()?);

    let mut st = Stage::begin(out_dir, "smooth");
    let smoothing = staged(st.name, || {
        let config = SmoothingConfig {
            tau_override: spec.tau_override,
        };
        let out = smooth_labels_with(&noisy, &table, &config)?;
        st.volume(&out.smoothed, "smoothed")?;
        Ok(out)
    })?;
    stages.push(st.finish()?);

    let mut st = Stage::begin(out_dir, "mask");
    let mask = staged(st.name, || {
        let mask = compute_mask(&noisy, &smoothing.smoothed)?;
        st.volume(&mask, "mask")?;
        Ok(mask)
    })?;
    stages.push(st.finish()?);

    let mut st = Stage::begin(out_dir, "estimate-T");
    staged(st.name, || {
        let mut t = estimate_transition(
            &[TransitionSample::new(&noisy, &smoothing.smoothed, &mask)],
            spec.lambda,
        )?;
        if spec.no_transpose {
            t = t.without_transpose()?;
        }
        let path = out_dir.join("transition.csv");
        t.save(&path)?;
        st.files.push(path);
        Ok(())
    })?;
    stages.push(st.finish()?);

    let demo = spec.demo_config();
    let mut st = Stage::begin(out_dir, "train-demo");
    let prediction = staged(st.name, || {
        let mut per_seed = Vec::new();
        let mut first = None;
        for s in 0..demo.seeds.max(1) {
            let (result, artifacts) = run_seed(&demo, s, DemoModes::BOTH)?;
            per_seed.push(result);
            first.get_or_insert(artifacts);
        }
        st.json(&summarize(per_seed), "demo.json")?;
        let model = first
            .and_then(|a| a.corrected_model)
            .expect("corrected model requested");
        st.json(&model, "model.json")?;
        let prediction = predict(&model, &featurize(&phantom.intensity))?.argmax();
        st.volume(&prediction, "prediction")?;
        Ok(prediction)
    })?;
    stages.push(st.finish()?);

    let mut st = Stage::begin(out_dir, "metrics");
    staged(st.name, || -> Result<MetricsReport> {
        let report = evaluate(&prediction, &phantom.clean, &MetricsOptions::default())?;
        st.json(&report, "metrics.json")?;
        Ok(report)
    })?;
    stages.push(st.finish()?);

    let inputs = match spec_path {
        Some(p) => vec![describe(p, Path::new(""))?],
        None => Vec::new(),
    };
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        format_version: FORMAT_VERSION,
        inputs,
        parameters: Parameters {
            radius: table.max_uncertainty(),
            uncertainty: table.per_label().to_vec(),
            lambda: spec.lambda,
            alpha: spec.alpha,
            tau_override: spec.tau_override,
            seeds: spec.seeds,
            phantom_seed: spec.phantom.seed,
            noise_seed: spec.noise.seed,
            no_transpose: spec.no_transpose,
            train: spec.train.clone(),
            rng: RNG_NAME.to_string(),
        },
        stages,
    };
    write_json(&manifest, &out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}
