use serde::{Deserialize, Serialize};

use super::{check_dim, check_level, ClassCond, InitializerFn, ModelError, Result, SharedSchedule};
use crate::ndgrad::{Conditioning, Mlp, MlpSpec, NdError, Real, Tape, Tensor};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;

/// What the initializer network output is read as.
///
/// Every variant produces the same thing, the proposal mean for `y_t`, as
/// `a_t * x_next + b_t * out`; only the coefficients differ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitTarget {
    /// The output is a residual added to `x_next`.
    #[default]
    Direct,
    /// The output estimates the clean sample `x_0`.
    CleanData,
    /// The output estimates the shared noise draw.
    Noise,
}

impl std::str::FromStr for InitTarget {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "direct" => Ok(Self::Direct),
            "clean_data" => Ok(Self::CleanData),
            "noise" => Ok(Self::Noise),
            other => Err(format!("unknown initializer target `{other}`")),
        }
    }
}

impl InitTarget {
    /// `(a_t, b_t)` with `mean = a_t * x_next + b_t * out`.
    ///
    /// The non-direct variants invert the shared-noise pair
    /// `x_{t+1} = abar_{t+1} x_0 + sbar_{t+1} e`, `y_t = alpha_{t+1} (abar_t x_0 + sbar_t e)`.
    pub fn coefficients(self, s: &NoiseSchedule, t: usize) -> (f64, f64) {
        let (ab, sb) = (s.alpha_bar(t), s.sigma_bar(t));
        let (ab1, sb1) = (s.alpha_bar(t + 1), s.sigma_bar(t + 1));
        let a = s.alpha_next(t);
        match self {
            InitTarget::Direct => (1.0, 1.0),
            InitTarget::CleanData => (a * sb / sb1, a * (ab - sb * ab1 / sb1)),
            InitTarget::Noise => (a * ab / ab1, a * (sb - ab * sb1 / ab1)),
        }
    }
}

/// Network-backed Gaussian initializer `N(g(x_{t+1}; t, c), sigma_tilde_t^2 I)`.
#[derive(Clone, Debug)]
pub struct InitializerModel<R: Real = f32> {
    net: Mlp<R>,
    schedule: SharedSchedule,
    target: InitTarget,
}

/// Output of [`InitializerModel::raw_forward`].
pub struct InitForward<R> {
    pub mean: Tensor<f64>,
    pub tape: Tape<R>,
    /// Per-row `b_t`, the derivative of the mean with respect to the net output.
    pub out_scale: Vec<f64>,
}

impl<R: Real> InitializerModel<R> {
    /// New initializer with a zeroed output layer.
    pub fn new(spec: MlpSpec, schedule: SharedSchedule, target: InitTarget, rng: &mut RngStream) -> Result<Self> {
        Self::from_net(Mlp::init(spec, rng, 0.0), schedule, target)
    }

    pub fn from_net(net: Mlp<R>, schedule: SharedSchedule, target: InitTarget) -> Result<Self> {
        if net.spec().output_dim != net.spec().input_dim {
            return Err(ModelError::Nd(NdError::Shape {
                op: "initializer head",
                lhs: vec![net.spec().output_dim],
                rhs: vec![net.spec().input_dim],
            }));
        }
        Ok(Self { net, schedule, target })
    }

    pub fn net(&self) -> &Mlp<R> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp<R> {
        &mut self.net
    }

    pub fn target(&self) -> InitTarget {
        self.target
    }

    pub fn dim(&self) -> usize {
        self.net.spec().input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.net.spec().num_classes
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Proposal means for rows at (possibly different) levels, with the tape
    /// needed to differentiate a loss on the mean.
    pub fn raw_forward(&self, x_next: &Tensor<f64>, levels: &[usize], class: ClassCond) -> Result<InitForward<R>> {
        check_dim(x_next, self.dim())?;
        for &t in levels {
            check_level(&self.schedule, t)?;
        }
        let cond = Conditioning {
            log_snr: levels.iter().map(|&t| self.schedule.lambda(t + 1)).collect(),
            class_rows: class.table_rows(x_next.rows(), self.num_classes())?,
        };
        let (out, tape) = self.net.forward(&x_next.cast(), &cond)?;
        let d = self.dim();
        let mut mean = Tensor::zeros(x_next.shape());
        let mut out_scale = Vec::with_capacity(levels.len());
        for (i, &t) in levels.iter().enumerate() {
            let (a, b) = self.target.coefficients(&self.schedule, t);
            out_scale.push(b);
            for j in 0..d {
                mean.set(i, j, a * x_next.get(i, j) + b * out.get(i, j).f64());
            }
        }
        Ok(InitForward { mean, tape, out_scale })
    }
}

impl<R: Real> InitializerFn for InitializerModel<R> {
    fn mean(&self, x_next: &Tensor<f64>, t: usize, class: ClassCond) -> Result<Tensor<f64>> {
        Ok(self.raw_forward(x_next, &vec![t; x_next.rows()], class)?.mean)
    }
}

/// Draws `mean + sigma_tilde_t * eps` with `eps` from `rng`.
pub fn initializer_sample(
    init: &dyn InitializerFn,
    schedule: &NoiseSchedule,
    x_next: &Tensor<f64>,
    t: usize,
    class: ClassCond,
    rng: &mut RngStream,
) -> Result<Tensor<f64>> {
    let mut y = init.mean(x_next, t, class)?;
    let sd = schedule.sigma_tilde(t);
    for v in y.data_mut() {
        *v += sd * rng.normal();
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::ndgrad::Activation;
    use crate::schedule::build_cosine_schedule;

    #[test]
    fn zero_output_direct_is_identity() {
        let sched = Arc::new(build_cosine_schedule(5, 9.8, -5.1, 0.054).unwrap());
        let spec = MlpSpec {
            input_dim: 2,
            output_dim: 2,
            hidden: vec![8],
            time_embed_dim: 4,
            num_classes: 2,
            class_embed_dim: 3,
            activation: Activation::Swish,
        };
        let m = InitializerModel::<f64>::new(spec, sched, InitTarget::Direct, &mut RngStream::new(1)).unwrap();
        let x = Tensor::from_fn(3, 2, |i, j| i as f64 - 2.0 * j as f64);
        assert_eq!(m.mean(&x, 2, ClassCond::Class(1)).unwrap(), x);
    }

    // Feeding the exact clean sample (or noise) recovers the shared-noise y_t.
    #[test]
    fn target_coefficients_invert_the_pair() {
        let s = build_cosine_schedule(6, 9.8, -5.1, 0.054).unwrap();
        let (x0, e) = (0.7, -1.3);
        for t in 0..6 {
            let x1 = s.alpha_bar(t + 1) * x0 + s.sigma_bar(t + 1) * e;
            let y = s.alpha_next(t) * (s.alpha_bar(t) * x0 + s.sigma_bar(t) * e);
            let (a, b) = InitTarget::CleanData.coefficients(&s, t);
            assert!((a * x1 + b * x0 - y).abs() < 1e-12);
            let (a, b) = InitTarget::Noise.coefficients(&s, t);
            assert!((a * x1 + b * e - y).abs() < 1e-12);
        }
    }
}
