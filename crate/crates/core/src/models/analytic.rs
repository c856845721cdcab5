//! Closed-form models used as references.

use nalgebra::{DMatrix, DVector};

use super::{check_dim, check_level, ClassCond, EnergyFn, InitializerFn, ModelError, Result, SharedSchedule};
use crate::ndgrad::Tensor;
use crate::schedule::NoiseSchedule;

/// Exact per-level model of Gaussian data `x_0 ~ N(mean, cov)`.
///
/// At level `t`, `y_t = alpha_{t+1} x_t` is Gaussian with mean
/// `alpha_{t+1} abar_t mean` and covariance
/// `alpha_{t+1}^2 (abar_t^2 cov + sbar_t^2 I)`, so its log-density is a known
/// quadratic. As an initializer it returns the exact conditional mean of
/// `y_t` given `x_{t+1}`.
#[derive(Clone, Debug)]
pub struct GaussianTarget {
    schedule: SharedSchedule,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    levels: Vec<Level>,
}

#[derive(Clone, Debug)]
struct Level {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    // exact conditional mean = post_x * x_next + post_c
    post_x: DMatrix<f64>,
    post_c: DVector<f64>,
}

impl GaussianTarget {
    pub fn new(schedule: SharedSchedule, mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(ModelError::Dimension {
                expected: d * d,
                got: cov.len(),
            });
        }
        let mean = DVector::from_vec(mean);
        let cov = DMatrix::from_row_slice(d, d, &cov);
        let eye = DMatrix::<f64>::identity(d, d);
        let mut levels = Vec::new();
        for t in 0..schedule.num_levels() {
            let a = schedule.alpha_next(t);
            let (ab, sb) = (schedule.alpha_bar(t), schedule.sigma_bar(t));
            let lvl_mean = &mean * (a * ab);
            let lvl_cov = (&cov * (ab * ab) + &eye * (sb * sb)) * (a * a);
            let precision = lvl_cov
                .try_inverse()
                .ok_or(ModelError::Dimension { expected: d, got: 0 })?;
            let tether = 1.0 / schedule.sigma_next(t).powi(2);
            let post_cov = (&precision + &eye * tether)
                .try_inverse()
                .ok_or(ModelError::Dimension { expected: d, got: 0 })?;
            levels.push(Level {
                post_x: &post_cov * tether,
                post_c: &post_cov * (&precision * &lvl_mean),
                mean: lvl_mean,
                precision,
            });
        }
        Ok(Self {
            schedule,
            mean,
            cov,
            levels,
        })
    }

    pub fn data_mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn data_cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

impl EnergyFn for GaussianTarget {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn num_classes(&self) -> usize {
        0
    }

    fn energy_and_grad(&self, y: &Tensor<f64>, t: usize, class: ClassCond) -> Result<(Vec<f64>, Tensor<f64>)> {
        check_dim(y, self.dim())?;
        check_level(&self.schedule, t)?;
        class.table_rows(y.rows(), 0)?;
        let lvl = &self.levels[t];
        let mut energy = Vec::with_capacity(y.rows());
        let mut grad = Tensor::zeros(y.shape());
        for i in 0..y.rows() {
            let diff = DVector::from_row_slice(y.row(i)) - &lvl.mean;
            let g = -(&lvl.precision * &diff);
            energy.push(0.5 * diff.dot(&g));
            grad.row_mut(i).copy_from_slice(g.as_slice());
        }
        Ok((energy, grad))
    }
}

impl InitializerFn for GaussianTarget {
    fn mean(&self, x_next: &Tensor<f64>, t: usize, _class: ClassCond) -> Result<Tensor<f64>> {
        check_dim(x_next, self.dim())?;
        check_level(&self.schedule, t)?;
        let lvl = &self.levels[t];
        let mut out = Tensor::zeros(x_next.shape());
        for i in 0..x_next.rows() {
            let m = &lvl.post_x * DVector::from_row_slice(x_next.row(i)) + &lvl.post_c;
            out.row_mut(i).copy_from_slice(m.as_slice());
        }
        Ok(out)
    }
}

/// `f(y) = -precision * |y - center|^2 / 2` at every level.
#[derive(Clone, Debug)]
pub struct FixedQuadratic {
    schedule: SharedSchedule,
    pub center: Vec<f64>,
    pub precision: f64,
}

impl FixedQuadratic {
    pub fn new(schedule: SharedSchedule, center: Vec<f64>, precision: f64) -> Self {
        Self {
            schedule,
            center,
            precision,
        }
    }
}

impl EnergyFn for FixedQuadratic {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
    fn dim(&self) -> usize {
        self.center.len()
    }
    fn num_classes(&self) -> usize {
        0
    }

    fn energy_and_grad(&self, y: &Tensor<f64>, t: usize, class: ClassCond) -> Result<(Vec<f64>, Tensor<f64>)> {
        check_dim(y, self.dim())?;
        check_level(&self.schedule, t)?;
        class.table_rows(y.rows(), 0)?;
        let mut energy = Vec::with_capacity(y.rows());
        let mut grad = Tensor::zeros(y.shape());
        for i in 0..y.rows() {
            let mut sq = 0.0;
            for (j, (&v, &c)) in y.row(i).iter().zip(&self.center).enumerate() {
                sq += (v - c) * (v - c);
                grad.set(i, j, -self.precision * (v - c));
            }
            energy.push(-0.5 * self.precision * sq);
        }
        Ok((energy, grad))
    }
}

/// Initializer that proposes `x_next` itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityInitializer;

impl InitializerFn for IdentityInitializer {
    fn mean(&self, x_next: &Tensor<f64>, _t: usize, _class: ClassCond) -> Result<Tensor<f64>> {
        Ok(x_next.clone())
    }
}

/// Energy model that is identically zero.
#[derive(Clone, Debug)]
pub struct ZeroEnergy {
    schedule: SharedSchedule,
    dim: usize,
}

impl ZeroEnergy {
    pub fn new(schedule: SharedSchedule, dim: usize) -> Self {
        Self { schedule, dim }
    }
}

impl EnergyFn for ZeroEnergy {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn num_classes(&self) -> usize {
        0
    }
    fn energy_and_grad(&self, y: &Tensor<f64>, t: usize, _class: ClassCond) -> Result<(Vec<f64>, Tensor<f64>)> {
        check_dim(y, self.dim)?;
        check_level(&self.schedule, t)?;
        Ok((vec![0.0; y.rows()], Tensor::zeros(y.shape())))
    }
}
