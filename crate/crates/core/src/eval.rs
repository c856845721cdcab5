//! Toy datasets, density grids, OOD scoring and sample statistics.

use std::f64::consts::PI;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{ClassCond, EnergyFn, ModelError};
use crate::ndgrad::Tensor;
use crate::rng::RngStream;
use crate::sampler::SampleBatch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unknown toy dataset `{0}` (expected checkerboard, gaussian, ring or mixture8)")]
    UnknownToy(String),
    #[error("density grids need a 2-dimensional model, got dimension {0}")]
    NotTwoDimensional(usize),
    #[error("grid resolution must be at least 2 per axis, got {0}")]
    Resolution(usize),
    #[error("bad grid bounds {0:?}")]
    Bounds([f64; 4]),
    #[error("AUROC needs non-empty pools (got {pos} positive, {neg} negative)")]
    EmptyPool { pos: usize, neg: usize },
    #[error("`{name}` is {dim}-dimensional only, requested dimension {requested}")]
    ToyDimension {
        name: &'static str,
        dim: usize,
        requested: usize,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    /// Uniform over the 8 "on" unit squares of a 4x4 board on `[-2, 2]^2`.
    Checkerboard,
    /// Standard normal in any dimension.
    Gaussian,
    /// Radius-1.5 ring with radial noise 0.1.
    Ring,
    /// Eight Gaussians (std 0.1) evenly spaced on a radius-1.5 circle.
    Mixture8,
}

impl ToyKind {
    pub fn name(self) -> &'static str {
        match self {
            ToyKind::Checkerboard => "checkerboard",
            ToyKind::Gaussian => "gaussian",
            ToyKind::Ring => "ring",
            ToyKind::Mixture8 => "mixture8",
        }
    }

    /// Number of labels [`gen_toy`] assigns.
    pub fn num_labels(self) -> usize {
        match self {
            ToyKind::Gaussian => 1,
            _ => 8,
        }
    }
}

impl FromStr for ToyKind {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checkerboard" => Ok(Self::Checkerboard),
            "gaussian" => Ok(Self::Gaussian),
            "ring" => Ok(Self::Ring),
            "mixture8" | "mixture-of-8" => Ok(Self::Mixture8),
            other => Err(EvalError::UnknownToy(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub kind: ToyKind,
    pub dim: usize,
    /// Uniform scale applied to every point.
    pub extent: f64,
    pub seed: u64,
}

impl ToySpec {
    pub fn new(kind: ToyKind, seed: u64) -> Self {
        Self {
            kind,
            dim: 2,
            extent: 1.0,
            seed,
        }
    }
}

/// Toy samples with a label per point: the on-square index for the
/// checkerboard, the component or octant for the circular toys, 0 otherwise.
pub fn gen_toy(spec: &ToySpec, n: usize) -> Result<(SampleBatch, Vec<usize>)> {
    let d = spec.dim;
    if spec.kind != ToyKind::Gaussian && d != 2 {
        return Err(EvalError::ToyDimension {
            name: spec.kind.name(),
            dim: 2,
            requested: d,
        });
    }
    let mut rng = RngStream::new(spec.seed);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        match spec.kind {
            ToyKind::Checkerboard => {
                let sq = rng.below(8);
                let (x, y) = on_square_origin(sq);
                data.push(x + rng.uniform());
                data.push(y + rng.uniform());
                labels.push(sq);
            }
            ToyKind::Gaussian => {
                for _ in 0..d {
                    data.push(rng.normal());
                }
                labels.push(0);
            }
            ToyKind::Ring => {
                let theta = 2.0 * PI * rng.uniform();
                let r = 1.5 + 0.1 * rng.normal();
                data.push(r * theta.cos());
                data.push(r * theta.sin());
                labels.push(((theta / (2.0 * PI) * 8.0) as usize).min(7));
            }
            ToyKind::Mixture8 => {
                let k = rng.below(8);
                let theta = 2.0 * PI * k as f64 / 8.0;
                data.push(1.5 * theta.cos() + 0.1 * rng.normal());
                data.push(1.5 * theta.sin() + 0.1 * rng.normal());
                labels.push(k);
            }
        }
    }
    for v in &mut data {
        *v *= spec.extent;
    }
    Ok((SampleBatch::new(0, Tensor::from_rows(n, d, data).expect("sized")), labels))
}

/// Lower-left corner of the `k`-th on square, in row-major board order.
fn on_square_origin(k: usize) -> (f64, f64) {
    let row = k / 2;
    let col = 2 * (k % 2) + row % 2;
    (col as f64 - 2.0, row as f64 - 2.0)
}

/// Index (0..8) of the on square containing the point, if any.
pub fn checkerboard_square(x: f64, y: f64) -> Option<usize> {
    if !(-2.0..2.0).contains(&x) || !(-2.0..2.0).contains(&y) {
        return None;
    }
    let col = (x + 2.0).floor() as usize;
    let row = (y + 2.0).floor() as usize;
    ((row + col) % 2 == 0).then_some(row * 2 + col / 2)
}

pub fn on_checkerboard(x: f64, y: f64) -> bool {
    checkerboard_square(x, y).is_some()
}

/// Fraction of rows that lie on an on square, and the per-square fractions.
/// Anything but 2-D points scores zero.
pub fn checkerboard_stats(points: &Tensor<f64>) -> (f64, [f64; 8]) {
    let n = points.rows().max(1) as f64;
    if points.cols() != 2 {
        return (0.0, [0.0; 8]);
    }
    let mut per = [0usize; 8];
    for i in 0..points.rows() {
        if let Some(k) = checkerboard_square(points.get(i, 0), points.get(i, 1)) {
            per[k] += 1;
        }
    }
    (per.iter().sum::<usize>() as f64 / n, per.map(|c| c as f64 / n))
}

/// Energy of a level-`t` model on the lattice of cell centers.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub level: usize,
    /// `[xmin, xmax, ymin, ymax]`.
    pub bounds: [f64; 4],
    pub resolution: usize,
    /// Cell centers, x-major.
    pub points: Vec<[f64; 2]>,
    /// Unnormalized log-density at each center.
    pub log_density: Vec<f64>,
    /// Softmax of `log_density` over the grid.
    pub prob: Vec<f64>,
}

impl DensityGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,log_density,prob\n");
        for ((p, l), q) in self.points.iter().zip(&self.log_density).zip(&self.prob) {
            out.push_str(&format!("{},{},{},{}\n", p[0], p[1], l, q));
        }
        out
    }

    /// Grid-softmax mass on cells whose centers satisfy `pred`.
    pub fn mass_where(&self, pred: impl Fn(f64, f64) -> bool) -> f64 {
        self.points
            .iter()
            .zip(&self.prob)
            .filter(|(p, _)| pred(p[0], p[1]))
            .map(|(_, q)| q)
            .sum()
    }

    pub fn argmax(&self) -> [f64; 2] {
        let mut best = 0;
        for (i, v) in self.log_density.iter().enumerate() {
            if *v > self.log_density[best] {
                best = i;
            }
        }
        self.points[best]
    }
}

/// Evaluates the level-`t` log-density of `x_t` at every cell center.
///
/// The level-`t` model is defined on `y_t = alpha_{t+1} x_t`; grid points are
/// in `x_t` coordinates and scaled before evaluation.
pub fn density_grid(model: &dyn EnergyFn, t: usize, bounds: [f64; 4], resolution: usize) -> Result<DensityGrid> {
    if model.dim() != 2 {
        return Err(EvalError::NotTwoDimensional(model.dim()));
    }
    if resolution < 2 {
        return Err(EvalError::Resolution(resolution));
    }
    let [x0, x1, y0, y1] = bounds;
    if !(x0 < x1 && y0 < y1) || bounds.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Bounds(bounds));
    }
    let a = if t < model.schedule().num_levels() {
        model.schedule().alpha_next(t)
    } else {
        1.0
    };
    let (dx, dy) = ((x1 - x0) / resolution as f64, (y1 - y0) / resolution as f64);
    let mut points = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            points.push([x0 + (i as f64 + 0.5) * dx, y0 + (j as f64 + 0.5) * dy]);
        }
    }
    let log_density = points
        .par_chunks(1024)
        .map(|chunk| {
            let flat = chunk.iter().flat_map(|p| [a * p[0], a * p[1]]).collect();
            let y = Tensor::from_rows(chunk.len(), 2, flat).expect("sized");
            model.energy(&y, t, ClassCond::Null)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?
        .concat();
    let prob = softmax(&log_density);
    Ok(DensityGrid {
        level: t,
        bounds,
        resolution,
        points,
        log_density,
        prob,
    })
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Lowest-level log-density of each row; higher means more in-distribution.
pub fn ood_score(model: &dyn EnergyFn, batch: &SampleBatch) -> Result<Vec<f64>> {
    let a = model.schedule().alpha_next(0);
    Ok(model.energy(&batch.data.map(|v| a * v), 0, ClassCond::Null)?)
}

/// Probability that a random positive outscores a random negative, ties
/// counted half (the Mann-Whitney statistic over `n_pos * n_neg`).
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::EmptyPool {
            pos: pos.len(),
            neg: neg.len(),
        });
    }
    let mut neg_sorted = neg.to_vec();
    neg_sorted.sort_by(f64::total_cmp);
    let mut twice_u: u128 = 0;
    for &p in pos {
        let below = neg_sorted.partition_point(|&v| v < p);
        let not_above = neg_sorted.partition_point(|&v| v <= p);
        twice_u += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(twice_u as f64 / (2.0 * pos.len() as f64 * neg.len() as f64))
}

/// Per-column mean and the full covariance (divisor `n - 1`).
pub fn mean_and_cov(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let r = x.row(i);
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (r[a] - mean[a]) * (r[b] - mean[b]) / (n as f64 - 1.0);
            }
        }
    }
    (mean, cov)
}
