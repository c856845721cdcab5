//! The two learned model families and the gradient algebra built on them.
//!
//! An energy model gives the unnormalized log-density `f(y; t, c)` of the
//! scaled noisy data `y_t = alpha_{t+1} x_t` at every modeled level. An
//! initializer gives the mean of a Gaussian proposal for `y_t` given the
//! sample one level up. Both are reached through the [`EnergyFn`] and
//! [`InitializerFn`] traits so the sampler runs identically on trained
//! networks and on closed-form reference models.

pub mod analytic;
mod energy;
mod guidance;
mod initializer;

use std::sync::Arc;

use thiserror::Error;

use crate::ndgrad::{NdError, Tensor};
use crate::schedule::NoiseSchedule;

pub use energy::EnergyModel;
pub use guidance::{
    compositional_grad, cond_energy_grad, guidance_terms, guided_energy_grad, guided_initializer_mean,
    sampling_grad, GuidanceSpec,
};
pub use initializer::{initializer_sample, InitTarget, InitializerModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("class {class} out of range for a model with {classes} classes")]
    BadClass { class: usize, classes: usize },
    #[error("guidance needs a class-conditional model")]
    NotConditional,
    #[error("compositional sampling needs at least one concept")]
    NoConcepts,
    #[error("level {level} out of range for {levels} modeled levels")]
    BadLevel { level: usize, levels: usize },
    #[error("expected {expected}-dimensional data, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("energy and initializer were built on different schedules")]
    ScheduleMismatch,
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Class conditioning for a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClassCond<'a> {
    /// The unconditional branch (null token).
    Null,
    /// One class for every row.
    Class(usize),
    /// A class (or null) per row.
    PerRow(&'a [Option<usize>]),
}

impl From<Option<usize>> for ClassCond<'_> {
    fn from(c: Option<usize>) -> Self {
        c.map_or(ClassCond::Null, ClassCond::Class)
    }
}

impl ClassCond<'_> {
    /// Per-row embedding-table rows, validating each index. Unconditional
    /// models accept only [`ClassCond::Null`] (or all-null rows).
    pub fn table_rows(&self, rows: usize, num_classes: usize) -> Result<Option<Vec<usize>>> {
        let check = |c: usize| {
            if c < num_classes {
                Ok(c)
            } else {
                Err(ModelError::BadClass {
                    class: c,
                    classes: num_classes,
                })
            }
        };
        let out = match *self {
            ClassCond::Null => vec![num_classes; rows],
            ClassCond::Class(c) => vec![check(c)?; rows],
            ClassCond::PerRow(labels) => {
                if labels.len() != rows {
                    return Err(ModelError::Nd(NdError::Shape {
                        op: "class labels",
                        lhs: vec![rows],
                        rhs: vec![labels.len()],
                    }));
                }
                labels
                    .iter()
                    .map(|l| l.map_or(Ok(num_classes), check))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok((num_classes > 0).then_some(out))
    }
}

/// Unnormalized log-density of each modeled level.
pub trait EnergyFn: Sync {
    fn schedule(&self) -> &NoiseSchedule;
    fn dim(&self) -> usize;
    /// Number of real classes (0 for an unconditional model).
    fn num_classes(&self) -> usize;

    /// `f(y; t, c)` per row together with `grad_y f`.
    fn energy_and_grad(&self, y: &Tensor<f64>, t: usize, class: ClassCond) -> Result<(Vec<f64>, Tensor<f64>)>;

    fn energy(&self, y: &Tensor<f64>, t: usize, class: ClassCond) -> Result<Vec<f64>> {
        Ok(self.energy_and_grad(y, t, class)?.0)
    }
}

/// Mean of the Gaussian proposal for `y_t` given `x_{t+1}`.
pub trait InitializerFn: Sync {
    fn mean(&self, x_next: &Tensor<f64>, t: usize, class: ClassCond) -> Result<Tensor<f64>>;
}

/// An energy model paired with its initializer.
#[derive(Clone, Copy)]
pub struct ModelPair<'a> {
    pub energy: &'a dyn EnergyFn,
    pub init: &'a dyn InitializerFn,
}

impl<'a> ModelPair<'a> {
    pub fn new(energy: &'a dyn EnergyFn, init: &'a dyn InitializerFn) -> Self {
        Self { energy, init }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        self.energy.schedule()
    }
}

pub(crate) fn check_level(schedule: &NoiseSchedule, t: usize) -> Result<()> {
    if t >= schedule.num_levels() {
        return Err(ModelError::BadLevel {
            level: t,
            levels: schedule.num_levels(),
        });
    }
    Ok(())
}

pub(crate) fn check_dim(x: &Tensor<f64>, dim: usize) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != dim {
        return Err(ModelError::Dimension {
            expected: dim,
            got: x.cols(),
        });
    }
    Ok(())
}

pub(crate) type SharedSchedule = Arc<NoiseSchedule>;
