//! Label transition matrix estimation and its regularized inverse.
//!
//! `T[k][j]` is the probability that true label `j` is observed as label `k`,
//! so columns sum to one. It is estimated from smoothed training labels by
//! accumulating the soft rows of altered voxels (mask = 1) into the column of
//! their hard label. The loss uses `C = (T^T + lambda I)^-1`.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::volume::{LabelVolume, ProbVolume, ScalarMap};
use crate::{Error, Result};

/// Column-sum tolerance for estimated matrices.
pub const STOCHASTIC_TOL: f64 = 1e-9;
/// Column-sum tolerance when loading a matrix from disk.
pub const LOAD_TOL: f64 = 1e-6;
/// Largest accepted 1-norm condition number of `T^T + lambda I`.
pub const MAX_CONDITION: f64 = 1e12;
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() != n * n {
            return Err(Error::validation(format!(
                "square matrix of order {n} needs {} entries, got {}",
                n * n,
                data.len()
            )));
        }
        Ok(SquareMatrix { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::validation("matrix rows must all have length n"));
        }
        SquareMatrix::new(n, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        SquareMatrix { n, data }
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = SquareMatrix::identity(n);
        m.data.iter_mut().for_each(|v| *v *= s);
        m
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.n + col] = v;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.n..(row + 1) * self.n]
    }

    pub fn transpose(&self) -> SquareMatrix {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[j * n + i] = self.data[i * n + j];
            }
        }
        SquareMatrix { n, data: out }
    }

    pub fn matmul(&self, other: &SquareMatrix) -> SquareMatrix {
        assert_eq!(self.n, other.n, "matmul order mismatch");
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                for j in 0..n {
                    out[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        SquareMatrix { n, data: out }
    }

    /// `self * v`.
    pub fn mul_vec(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    pub fn add_diagonal(&self, s: f64) -> SquareMatrix {
        let mut m = self.clone();
        for i in 0..self.n {
            m.data[i * self.n + i] += s;
        }
        m
    }

    /// Maximum absolute column sum.
    pub fn norm_1(&self) -> f64 {
        (0..self.n)
            .map(|j| (0..self.n).map(|i| self.get(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Largest entrywise deviation from the identity.
    pub fn max_abs_deviation_from_identity(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((self.get(i, j) - target).abs());
            }
        }
        worst
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting. Fails when a
    /// pivot vanishes or the 1-norm condition number exceeds
    /// [`MAX_CONDITION`].
    pub fn inverse(&self) -> Result<SquareMatrix> {
        let n = self.n;
        let mut a = self.data.clone();
        let mut inv = SquareMatrix::identity(n).data;
        for col in 0..n {
            let pivot_row = (col..n)
                .max_by(|&r1, &r2| a[r1 * n + col].abs().total_cmp(&a[r2 * n + col].abs()))
                .expect("non-empty pivot range");
            let pivot = a[pivot_row * n + col];
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(Error::numerical(format!(
                    "matrix is singular (zero pivot in column {col})"
                )));
            }
            if pivot_row != col {
                for j in 0..n {
                    a.swap(col * n + j, pivot_row * n + j);
                    inv.swap(col * n + j, pivot_row * n + j);
                }
            }
            let scale = 1.0 / pivot;
            for j in 0..n {
                a[col * n + j] *= scale;
                inv[col * n + j] *= scale;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a[r * n + col];
                if f == 0.0 {
                    continue;
                }
                for j in 0..n {
                    a[r * n + j] -= f * a[col * n + j];
                    inv[r * n + j] -= f * inv[col * n + j];
                }
            }
        }
        let inv = SquareMatrix { n, data: inv };
        let cond = self.norm_1() * inv.norm_1();
        if !cond.is_finite() || cond > MAX_CONDITION {
            return Err(Error::numerical(format!(
                "matrix is numerically singular (condition estimate {cond:e})"
            )));
        }
        Ok(inv)
    }
}

/// `(T^T + lambda I)^-1`.
pub fn corrected_inverse(t: &SquareMatrix, lambda: f64) -> Result<SquareMatrix> {
    check_lambda(lambda)?;
    t.transpose().add_diagonal(lambda).inverse()
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(Error::validation(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )))
    }
}

/// Left-stochastic transition matrix with its cached corrected inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    t: SquareMatrix,
    lambda: f64,
    transpose: bool,
    corrected_inverse: SquareMatrix,
}

impl TransitionMatrix {
    /// Validates `t` (entries in [0, 1], columns summing to one within
    /// [`STOCHASTIC_TOL`]) and caches `(T^T + lambda I)^-1`.
    pub fn new(t: SquareMatrix, lambda: f64) -> Result<Self> {
        TransitionMatrix::build(t, lambda, true, STOCHASTIC_TOL)
    }

    fn build(t: SquareMatrix, lambda: f64, transpose: bool, tol: f64) -> Result<Self> {
        check_lambda(lambda)?;
        check_stochastic(&t, tol)?;
        let corrected_inverse = if transpose {
            corrected_inverse(&t, lambda)?
        } else {
            t.add_diagonal(lambda).inverse()?
        };
        Ok(TransitionMatrix {
            t,
            lambda,
            transpose,
            corrected_inverse,
        })
    }

    pub fn identity(n: usize, lambda: f64) -> Result<Self> {
        TransitionMatrix::new(SquareMatrix::identity(n), lambda)
    }

    /// Same `T` with a different regularization.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        TransitionMatrix::build(self.t.clone(), lambda, self.transpose, f64::INFINITY)
    }

    /// Uses `(T + lambda I)^-1` instead of the transposed form.
    pub fn without_transpose(&self) -> Result<Self> {
        TransitionMatrix::build(self.t.clone(), self.lambda, false, f64::INFINITY)
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.t
    }

    pub fn num_labels(&self) -> usize {
        self.t.order()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_transposed(&self) -> bool {
        self.transpose
    }

    /// The matrix `C` applied to per-class loss vectors.
    pub fn corrected_inverse(&self) -> &SquareMatrix {
        &self.corrected_inverse
    }

    /// Writes CSV: a `# transition LxL lambda=<v>` line, then `L` rows of `L`
    /// comma-separated entries with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let n = self.t.order();
        let mut out = format!("# transition {n}x{n} lambda={}\n", self.lambda);
        for i in 0..n {
            let row: Vec<String> = self.t.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", row.join(",")).expect("write to string");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::validation("transition csv is empty"))?;
        let (n, lambda) = parse_header(header)?;
        let mut data = Vec::with_capacity(n * n);
        let mut rows = 0;
        for line in lines {
            let mut count = 0;
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::validation(format!("transition csv: bad number {:?}", field.trim()))
                })?;
                data.push(v);
                count += 1;
            }
            if count != n {
                return Err(Error::validation(format!(
                    "transition csv: row {rows} has {count} entries, expected {n}"
                )));
            }
            rows += 1;
        }
        if rows != n {
            return Err(Error::validation(format!(
                "transition csv: {rows} rows, expected {n}"
            )));
        }
        TransitionMatrix::build(SquareMatrix::new(n, data)?, lambda, true, LOAD_TOL)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TransitionMatrix::from_csv(&text)
    }
}

fn parse_header(line: &str) -> Result<(usize, f64)> {
    let bad = || Error::validation(format!("transition csv: bad header {line:?}"));
    let rest = line
        .trim()
        .strip_prefix('#')
        .map(str::trim)
        .and_then(|s| s.strip_prefix("transition"))
        .ok_or_else(bad)?;
    let mut parts = rest.split_whitespace();
    let shape = parts.next().ok_or_else(bad)?;
    let (a, b) = shape.split_once('x').ok_or_else(bad)?;
    let (n, m): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
    if n != m || n == 0 {
        return Err(bad());
    }
    let lambda = parts
        .next()
        .and_then(|s| s.strip_prefix("lambda="))
        .ok_or_else(bad)?
        .parse()
        .map_err(|_| bad())?;
    Ok((n, lambda))
}

fn check_stochastic(t: &SquareMatrix, tol: f64) -> Result<()> {
    let n = t.order();
    if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::validation(format!(
            "transition entry {v} outside [0, 1]"
        )));
    }
    for j in 0..n {
        let s: f64 = (0..n).map(|i| t.get(i, j)).sum();
        if (s - 1.0).abs() > tol {
            return Err(Error::validation(format!(
                "transition column {j} sums to {s}"
            )));
        }
    }
    Ok(())
}

/// One training volume: hard labels, their smoothed rows and the mask.
#[derive(Debug, Clone, Copy)]
pub struct TransitionSample<'a> {
    pub labels: &'a LabelVolume,
    pub smoothed: &'a ProbVolume,
    pub mask: &'a ScalarMap,
}

impl<'a> TransitionSample<'a> {
    pub fn new(labels: &'a LabelVolume, smoothed: &'a ProbVolume, mask: &'a ScalarMap) -> Self {
        TransitionSample {
            labels,
            smoothed,
            mask,
        }
    }

    fn validate(&self, num_labels: usize) -> Result<()> {
        let g = self.labels.geometry();
        g.check_same_grid(self.smoothed.geometry(), "transition sample")?;
        g.check_same_grid(self.mask.geometry(), "transition sample")?;
        if self.labels.num_labels() != num_labels || self.smoothed.num_labels() != num_labels {
            return Err(Error::validation(format!(
                "transition samples disagree on L (expected {num_labels})"
            )));
        }
        self.mask.check_binary("transition mask")
    }

    /// Unnormalized `T` accumulation for this volume, in voxel order.
    fn accumulate(&self) -> Vec<f64> {
        let l = self.labels.num_labels();
        let mut acc = vec![0.0; l * l];
        for ((row, &j), &m) in self
            .smoothed
            .rows()
            .zip(self.labels.labels())
            .zip(self.mask.values())
        {
            if m == 0.0 {
                continue;
            }
            for (k, &p) in row.iter().enumerate() {
                acc[k * l + j as usize] += p;
            }
        }
        acc
    }
}

/// Estimates `T` from altered voxels of all samples; columns without any
/// altered voxel become identity columns.
pub fn estimate_transition(samples: &[TransitionSample<'_>], lambda: f64) -> Result<TransitionMatrix> {
    let first = samples
        .first()
        .ok_or_else(|| Error::validation("no samples to estimate the transition matrix from"))?;
    let l = first.labels.num_labels();
    for s in samples {
        s.validate(l)?;
    }
    let partials: Vec<Vec<f64>> = samples.par_iter().map(|s| s.accumulate()).collect();
    let mut acc = vec![0.0; l * l];
    for p in &partials {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    let mut t = SquareMatrix::new(l, acc)?;
    for j in 0..l {
        let mass: f64 = (0..l).map(|k| t.get(k, j)).sum();
        for k in 0..l {
            let v = if mass > 0.0 {
                t.get(k, j) / mass
            } else if k == j {
                1.0
            } else {
                0.0
            };
            t.set(k, j, v);
        }
    }
    TransitionMatrix::new(t, lambda)
}
