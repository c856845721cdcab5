use super::{check_dim, check_level, ClassCond, EnergyFn, ModelError, Result, SharedSchedule};
use crate::ndgrad::{Conditioning, Mlp, MlpSpec, NdError, Real, Tape, Tensor};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;

/// Network-backed energy model: `f(y; t, c) = net(y, lambda_t, c) / s_t^2`.
///
/// Dividing the raw output by the squared Langevin step size makes the
/// Langevin drift `(s_t^2 / 2) grad f` equal to half the raw network gradient
/// at every level.
#[derive(Clone, Debug)]
pub struct EnergyModel<R: Real = f32> {
    net: Mlp<R>,
    schedule: SharedSchedule,
}

impl<R: Real> EnergyModel<R> {
    pub fn new(spec: MlpSpec, schedule: SharedSchedule, rng: &mut RngStream) -> Result<Self> {
        Self::from_net(Mlp::init(spec, rng, 0.0), schedule)
    }

    pub fn from_net(net: Mlp<R>, schedule: SharedSchedule) -> Result<Self> {
        if net.spec().output_dim != 1 {
            return Err(ModelError::Nd(NdError::Shape {
                op: "energy head",
                lhs: vec![net.spec().output_dim],
                rhs: vec![1],
            }));
        }
        Ok(Self { net, schedule })
    }

    pub fn net(&self) -> &Mlp<R> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp<R> {
        &mut self.net
    }

    pub fn shared_schedule(&self) -> &SharedSchedule {
        &self.schedule
    }

    /// Raw network output for rows at (possibly different) levels, with the tape.
    pub fn raw_forward(
        &self,
        y: &Tensor<f64>,
        levels: &[usize],
        class: ClassCond,
    ) -> Result<(Tensor<R>, Tape<R>)> {
        check_dim(y, self.dim())?;
        for &t in levels {
            check_level(&self.schedule, t)?;
        }
        let rows = class.table_rows(y.rows(), self.num_classes())?;
        let cond = Conditioning {
            log_snr: levels.iter().map(|&t| self.schedule.lambda(t)).collect(),
            class_rows: rows,
        };
        Ok(self.net.forward(&y.cast(), &cond)?)
    }
}

impl<R: Real> EnergyFn for EnergyModel<R> {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn dim(&self) -> usize {
        self.net.spec().input_dim
    }

    fn num_classes(&self) -> usize {
        self.net.spec().num_classes
    }

    fn energy_and_grad(&self, y: &Tensor<f64>, t: usize, class: ClassCond) -> Result<(Vec<f64>, Tensor<f64>)> {
        let levels = vec![t; y.rows()];
        let (out, tape) = self.raw_forward(y, &levels, class)?;
        let inv = 1.0 / self.schedule.step_size(t).powi(2);
        let seed = Tensor::full(out.shape(), R::one());
        let grad = tape.grad_input(&seed)?;
        let energy = out.data().iter().map(|v| v.f64() * inv).collect();
        let grad = Tensor::raw(grad.shape().to_vec(), grad.data().iter().map(|v| v.f64() * inv).collect());
        Ok((energy, grad))
    }
}
