//! Clean-vs-noisy training experiment on synthetic phantoms.
//!
//! For each seed: generate a phantom, inject boundary noise, smooth the noisy
//! labels with the matching uncertainty table, estimate the transition
//! matrix, then train three models from zero: plain cross-entropy on the
//! clean labels (reference), plain cross-entropy on the smoothed noisy labels,
//! and the corrected loss on the same targets. Each model is scored by mean
//! foreground Dice against the clean labels and by parameter distance to the
//! reference model.

use serde::{Deserialize, Serialize};

use super::{featurize, predict, train, LinearModel, LossMode, TrainConfig};
use crate::metrics::dsc;
use crate::phantom::{generate_phantom, inject_boundary_noise, NoiseSpec, PhantomSpec};
use crate::smoothing::{smooth_labels_with, SmoothingConfig};
use crate::transition::{estimate_transition, SquareMatrix, TransitionMatrix, TransitionSample, DEFAULT_LAMBDA};
use crate::volume::{LabelId, LabelVolume, ScalarMap};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoConfig {
    pub phantom: PhantomSpec,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub tau_override: Option<f64>,
    /// Use `(T + lambda I)^-1` instead of `(T^T + lambda I)^-1`.
    #[serde(default)]
    pub no_transpose: bool,
}

impl DemoConfig {
    /// 32^3 four-label shell phantom at 0.8 mm spacing with boundary noise
    /// budgets (0, 1, 2, 2) voxels and default training.
    pub fn four_shell(seeds: u64) -> Self {
        DemoConfig {
            phantom: PhantomSpec {
                dims: [32, 32, 32],
                spacing: [0.8; 3],
                radii: vec![14.0, 10.0, 6.0],
                seed: 1,
                intensity_means: vec![0.0, 1.0, 2.0, 3.0],
                intensity_sigma: 0.5,
            },
            noise: NoiseSpec::new(vec![0, 1, 2, 2], 101),
            train: TrainConfig::default(),
            seeds,
            lambda: DEFAULT_LAMBDA,
            tau_override: None,
            no_transpose: false,
        }
    }
}

fn default_seeds() -> u64 {
    5
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

/// Which noisy-label models to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DemoModes {
    pub plain: bool,
    pub corrected: bool,
}

impl DemoModes {
    pub const BOTH: DemoModes = DemoModes {
        plain: true,
        corrected: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Fraction of voxels whose noisy label differs from the clean one.
    pub noise_fraction: f64,
    /// Fraction of voxels altered by smoothing.
    pub mask_fraction: f64,
    pub transition_diagonal: Vec<f64>,
    pub dsc_clean_model: f64,
    pub dsc_plain: Option<f64>,
    pub dsc_corrected: Option<f64>,
    pub param_distance_plain: Option<f64>,
    pub param_distance_corrected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoReport {
    pub rng: &'static str,
    pub per_seed: Vec<SeedResult>,
    pub mean_dsc_clean_model: f64,
    pub mean_dsc_plain: Option<f64>,
    pub mean_dsc_corrected: Option<f64>,
    /// `mean_dsc_corrected - mean_dsc_plain`.
    pub mean_dsc_gap: Option<f64>,
    pub mean_param_distance_plain: Option<f64>,
    pub mean_param_distance_corrected: Option<f64>,
}

/// Everything produced for one seed, for callers that want the volumes.
#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub clean: LabelVolume,
    pub noisy: LabelVolume,
    pub intensity: ScalarMap,
    pub smoothed: crate::volume::ProbVolume,
    pub mask: ScalarMap,
    pub transition: TransitionMatrix,
    pub clean_model: LinearModel,
    pub plain_model: Option<LinearModel>,
    pub corrected_model: Option<LinearModel>,
}

/// Mean Dice over foreground labels.
pub fn mean_foreground_dsc(pred: &LabelVolume, reference: &LabelVolume) -> Result<f64> {
    let l = reference.num_labels();
    let mut total = 0.0;
    for label in 1..l as LabelId {
        total += dsc(pred, reference, label)?;
    }
    Ok(total / (l - 1) as f64)
}

pub fn run_seed(config: &DemoConfig, offset: u64, modes: DemoModes) -> Result<(SeedResult, SeedArtifacts)> {
    let mut phantom_spec = config.phantom.clone();
    phantom_spec.seed = config.phantom.seed.wrapping_add(offset);
    let mut noise = config.noise.clone();
    noise.seed = config.noise.seed.wrapping_add(offset);

    let phantom = generate_phantom(&phantom_spec)?;
    let noisy = inject_boundary_noise(&phantom.clean, &noise)?;
    let table = noise.uncertainty_table()?;
    let smoothing = smooth_labels_with(
        &noisy,
        &table,
        &SmoothingConfig {
            tau_override: config.tau_override,
        },
    )?;
    let mut transition = estimate_transition(
        &[TransitionSample::new(&noisy, &smoothing.smoothed, &smoothing.mask)],
        config.lambda,
    )?;
    if config.no_transpose {
        transition = transition.without_transpose()?;
    }

    let features = featurize(&phantom.intensity);
    let l = phantom.clean.num_labels();
    let identity = SquareMatrix::identity(l);
    let zero_mask = ScalarMap::zeros(*phantom.clean.geometry());
    let plain_cfg = TrainConfig {
        mode: LossMode::Plain,
        ..config.train.clone()
    };
    let corrected_cfg = TrainConfig {
        mode: LossMode::Corrected,
        ..config.train.clone()
    };

    let clean_model = train(&features, &phantom.clean.one_hot(), &zero_mask, &identity, &plain_cfg)?.model;
    let score = |m: &LinearModel| -> Result<f64> {
        mean_foreground_dsc(&predict(m, &features)?.argmax(), &phantom.clean)
    };
    let plain_model = if modes.plain {
        Some(train(&features, &smoothing.smoothed, &zero_mask, &identity, &plain_cfg)?.model)
    } else {
        None
    };
    let corrected_model = if modes.corrected {
        Some(
            train(
                &features,
                &smoothing.smoothed,
                &smoothing.mask,
                transition.corrected_inverse(),
                &corrected_cfg,
            )?
            .model,
        )
    } else {
        None
    };

    let n = phantom.clean.geometry().len() as f64;
    let changed = noisy
        .labels()
        .iter()
        .zip(phantom.clean.labels())
        .filter(|(a, b)| a != b)
        .count();
    let result = SeedResult {
        seed: offset,
        noise_fraction: changed as f64 / n,
        mask_fraction: smoothing.mask.count_nonzero() as f64 / n,
        transition_diagonal: (0..l).map(|j| transition.matrix().get(j, j)).collect(),
        dsc_clean_model: score(&clean_model)?,
        dsc_plain: plain_model.as_ref().map(score).transpose()?,
        dsc_corrected: corrected_model.as_ref().map(score).transpose()?,
        param_distance_plain: plain_model.as_ref().map(|m| m.distance(&clean_model)),
        param_distance_corrected: corrected_model.as_ref().map(|m| m.distance(&clean_model)),
    };
    let artifacts = SeedArtifacts {
        clean: phantom.clean,
        noisy,
        intensity: phantom.intensity,
        smoothed: smoothing.smoothed,
        mask: smoothing.mask,
        transition,
        clean_model,
        plain_model,
        corrected_model,
    };
    Ok((result, artifacts))
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn run_demo(config: &DemoConfig, modes: DemoModes) -> Result<DemoReport> {
    let per_seed: Vec<SeedResult> = (0..config.seeds)
        .map(|s| run_seed(config, s, modes).map(|(r, _)| r))
        .collect::<Result<_>>()?;
    Ok(summarize(per_seed))
}

/// Means and gap over per-seed results.
pub fn summarize(per_seed: Vec<SeedResult>) -> DemoReport {
    let mean_dsc_plain = mean_of(per_seed.iter().map(|r| r.dsc_plain));
    let mean_dsc_corrected = mean_of(per_seed.iter().map(|r| r.dsc_corrected));
    DemoReport {
        rng: crate::phantom::RNG_NAME,
        mean_dsc_clean_model: mean_of(per_seed.iter().map(|r| Some(r.dsc_clean_model))).unwrap_or(f64::NAN),
        mean_dsc_gap: mean_dsc_corrected.zip(mean_dsc_plain).map(|(c, p)| c - p),
        mean_dsc_plain,
        mean_dsc_corrected,
        mean_param_distance_plain: mean_of(per_seed.iter().map(|r| r.param_distance_plain)),
        mean_param_distance_corrected: mean_of(per_seed.iter().map(|r| r.param_distance_corrected)),
        per_seed,
    }
}
