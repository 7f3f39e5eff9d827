//! Per-voxel linear softmax classifier trained by full-batch gradient descent.
//!
//! The model maps five voxel features (standardized intensity, x/y/z scaled to
//! [-1, 1], distance from the grid center in those scaled units) to label
//! scores. Each iteration starts from twice the last accepted step (capped at
//! the configured step) and halves it until the loss strictly decreases; if
//! no halving helps, training stops early.

mod demo;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::loss::{softmax, LossCoefficients, LossOptions, Reduction, ScoreVolume};
use crate::sum::BLOCK;
use crate::transition::SquareMatrix;
use crate::volume::{GridGeometry, ProbVolume, ScalarMap};
use crate::{Error, Result};

pub use demo::{
    mean_foreground_dsc, run_demo, run_seed, summarize, DemoConfig, DemoModes, DemoReport, SeedArtifacts,
    SeedResult,
};

pub const NUM_FEATURES: usize = 5;

/// `N x F` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    geometry: GridGeometry,
    data: Vec<f64>,
}

impl Features {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * NUM_FEATURES..(i + 1) * NUM_FEATURES]
    }
}

/// Builds `[intensity, x, y, z, radius]` per voxel.
pub fn featurize(intensity: &ScalarMap) -> Features {
    let g = *intensity.geometry();
    let n = g.len() as f64;
    let values = intensity.values();
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let dims = g.dims();
    let scale = |c: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            2.0 * c as f64 / (n - 1) as f64 - 1.0
        }
    };
    let mut data = Vec::with_capacity(g.len() * NUM_FEATURES);
    for (i, &v) in values.iter().enumerate() {
        let p = g.coords(i);
        let c = [scale(p[0], dims[0]), scale(p[1], dims[1]), scale(p[2], dims[2])];
        let r = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        let iv = if std > 0.0 { (v - mean) / std } else { v - mean };
        data.extend_from_slice(&[iv, c[0], c[1], c[2], r]);
    }
    Features { geometry: g, data }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub num_labels: usize,
    /// `F x L`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(num_labels: usize) -> Self {
        LinearModel {
            num_labels,
            weights: vec![0.0; NUM_FEATURES * num_labels],
            bias: vec![0.0; num_labels],
        }
    }

    /// Small Gaussian initialization (std 0.01).
    pub fn gaussian(num_labels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let mut m = LinearModel::zeros(num_labels);
        m.weights.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        m
    }

    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().chain(self.bias.iter()).copied()
    }

    /// Euclidean distance between parameter vectors.
    pub fn distance(&self, other: &LinearModel) -> f64 {
        self.parameters()
            .zip(other.parameters())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn is_finite(&self) -> bool {
        self.parameters().all(f64::is_finite)
    }

    pub fn scores(&self, features: &Features) -> Result<ScoreVolume> {
        let l = self.num_labels;
        let n = features.geometry().len();
        let mut scores = vec![0.0; n * l];
        scores
            .par_chunks_mut(BLOCK * l)
            .enumerate()
            .for_each(|(b, out)| {
                for (off, row) in out.chunks_exact_mut(l).enumerate() {
                    let x = features.row(b * BLOCK + off);
                    for (k, s) in row.iter_mut().enumerate() {
                        let mut acc = self.bias[k];
                        for (f, &xf) in x.iter().enumerate() {
                            acc += xf * self.weights[f * l + k];
                        }
                        *s = acc;
                    }
                }
            });
        ScoreVolume::new(*features.geometry(), l, scores)
    }
}

/// Softmax of the affine map.
pub fn predict(model: &LinearModel, features: &Features) -> Result<ProbVolume> {
    Ok(softmax(&model.scores(features)?))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Soft cross-entropy on every voxel; the mask is ignored.
    Plain,
    /// Cross-entropy on mask-0 voxels, transition-corrected on mask-1 voxels.
    #[default]
    Corrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub step: f64,
    pub iterations: usize,
    /// Gaussian initialization seed; zeros when absent.
    pub init_seed: Option<u64>,
    pub mode: LossMode,
    pub reduction: Reduction,
    /// Step halvings tried per iteration before stopping.
    pub max_halvings: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step: 256.0,
            iterations: 2000,
            init_seed: None,
            mode: LossMode::Corrected,
            reduction: Reduction::Mean,
            max_halvings: 30,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::validation("training step must be positive"));
        }

        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: LinearModel,
    /// Loss before training, then after every accepted step.
    pub losses: Vec<f64>,
    pub accepted_steps: usize,
}

struct Objective<'a> {
    features: &'a Features,
    coefficients: LossCoefficients,
    reduction: Reduction,
}

impl Objective<'_> {
    fn loss(&self, model: &LinearModel) -> Result<f64> {
        let scores = model.scores(self.features)?;
        let options = LossOptions {
            reduction: self.reduction,
            per_voxel: false,
        };
        Ok(self.coefficients.loss(&scores, options)?.total)
    }

    fn gradient(&self, model: &LinearModel) -> Result<LinearModel> {
        let l = model.num_labels;
        let scores = model.scores(self.features)?;
        let g = self.coefficients.grad(&scores, self.reduction)?;
        let width = (NUM_FEATURES + 1) * l;
        let partials: Vec<Vec<f64>> = g
            .par_chunks(BLOCK * l)
            .enumerate()
            .map(|(b, gb)| {
                let mut acc = vec![0.0; width];
                for (off, grow) in gb.chunks_exact(l).enumerate() {
                    let x = self.features.row(b * BLOCK + off);
                    for (f, &xf) in x.iter().enumerate() {
                        for k in 0..l {
                            acc[f * l + k] += xf * grow[k];
                        }
                    }
                    for k in 0..l {
                        acc[NUM_FEATURES * l + k] += grow[k];
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![0.0; width];
        for p in &partials {
            total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
        }
        let bias = total.split_off(NUM_FEATURES * l);
        Ok(LinearModel {
            num_labels: l,
            weights: total,
            bias,
        })
    }
}

/// Gradient descent with step halving. `c` is only used in corrected mode.
pub fn train(
    features: &Features,
    targets: &ProbVolume,
    mask: &ScalarMap,
    c: &SquareMatrix,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    features.geometry().check_same_grid(targets.geometry(), "train targets")?;
    let l = targets.num_labels();
    let plain_mask;
    let mask = match config.mode {
        LossMode::Corrected => mask,
        LossMode::Plain => {
            plain_mask = ScalarMap::zeros(*features.geometry());
            &plain_mask
        }
    };
    let objective = Objective {
        features,
        coefficients: LossCoefficients::new(targets, mask, c)?,
        reduction: config.reduction,
    };
    let mut model = match config.init_seed {
        Some(seed) => LinearModel::gaussian(l, seed),
        None => LinearModel::zeros(l),
    };
    let mut current = objective.loss(&model)?;
    let mut losses = vec![current];
    let mut accepted_steps = 0;
    let mut last_step = config.step;
    for _ in 0..config.iterations {
        let grad = objective.gradient(&model)?;
        let mut step = (2.0 * last_step).min(config.step);
        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let candidate = LinearModel {
                num_labels: l,
                weights: model
                    .weights
                    .iter()
                    .zip(&grad.weights)
                    .map(|(w, g)| w - step * g)
                    .collect(),
                bias: model.bias.iter().zip(&grad.bias).map(|(b, g)| b - step * g).collect(),
            };
            if candidate.is_finite() {
                if let Ok(v) = objective.loss(&candidate) {
                    if v < current {
                        last_step = step;
                        accepted = Some((candidate, v));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((m, v)) => {
                model = m;
                current = v;
                losses.push(v);
                accepted_steps += 1;
            }
            None => break,
        }
    }
    if !current.is_finite() || !model.is_finite() {
        return Err(Error::numerical("training diverged"));
    }
    Ok(TrainOutcome {
        model,
        losses,
        accepted_steps,
    })
}
