//! Cooperative training of the energy models and initializers.

mod checkpoint;
mod config;

use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointHeader, FORMAT_VERSION, MAGIC};
pub use config::{ConfigError, EbmLossScale, PairMode, TrainConfig, KEYS};

use crate::eval::{gen_toy, EvalError, ToySpec};
use crate::io::{self, IoError};
use crate::models::{ClassCond, EnergyModel, InitializerModel, ModelError};
use crate::ndgrad::{ema_update, Adam, Mlp, NdError, ParamSet, Tensor};
use crate::rng::RngStream;
use crate::schedule::{NoiseSchedule, ScheduleError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training chain diverged at iteration {iter}, level {level}: |value| {value:e} exceeds {bound:e}")]
    Diverged {
        iter: u64,
        level: usize,
        value: f64,
        bound: f64,
    },
    #[error("non-finite {what} at iteration {iter}")]
    NonFinite { what: &'static str, iter: u64 },
    #[error("training data: {0}")]
    Data(String),
}

impl From<NdError> for TrainError {
    fn from(e: NdError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

// Stream ids under the run seed.
const STREAM_ENERGY_INIT: u64 = 1;
const STREAM_INIT_INIT: u64 = 2;
const STREAM_ITER: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

/// `base_lr * min(1, (iter + head_start) / warmup_iters)`.
pub fn warmup_lr(iter: u64, base_lr: f64, warmup_iters: u64, head_start: u64) -> f64 {
    if warmup_iters == 0 {
        return base_lr;
    }
    base_lr * ((iter + head_start) as f64 / warmup_iters as f64).min(1.0)
}

/// Builds `(y_t, x_{t+1})` for rows at the given levels.
///
/// `e` is the shared noise; `e2` is the second draw used only by
/// [`PairMode::Independent`].
pub fn make_pair(
    x0: &Tensor<f64>,
    levels: &[usize],
    e: &Tensor<f64>,
    e2: Option<&Tensor<f64>>,
    schedule: &NoiseSchedule,
    mode: PairMode,
) -> (Tensor<f64>, Tensor<f64>) {
    let d = x0.cols();
    let mut y = Tensor::zeros(x0.shape());
    let mut x_next = Tensor::zeros(x0.shape());
    for (i, &t) in levels.iter().enumerate() {
        let (ab, sb) = (schedule.alpha_bar(t), schedule.sigma_bar(t));
        let (ab1, sb1) = (schedule.alpha_bar(t + 1), schedule.sigma_bar(t + 1));
        let (a, s) = (schedule.alpha_next(t), schedule.sigma_next(t));
        for j in 0..d {
            let (x, n) = (x0.get(i, j), e.get(i, j));
            let xt = ab * x + sb * n;
            y.set(i, j, a * xt);
            let next = match mode {
                PairMode::Shared => ab1 * x + sb1 * n,
                PairMode::Independent => a * xt + s * e2.expect("independent pairing needs a second draw").get(i, j),
                PairMode::Literal => ab1 * xt + sb1 * n,
            };
            x_next.set(i, j, next);
        }
    }
    (y, x_next)
}

/// Training points and optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub x: Tensor<f64>,
    pub labels: Option<Vec<usize>>,
}

impl TrainData {
    /// The data a config describes: the CSV at `data_path` (a trailing
    /// `label` column supplies classes) or a seeded toy sample.
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let data = match &cfg.data_path {
            Some(p) => {
                let (header, t) = io::read_csv(Path::new(p))?;
                if header.last().map(String::as_str) == Some("label") {
                    let d = t.cols() - 1;
                    let labels = (0..t.rows()).map(|i| t.get(i, d) as usize).collect();
                    let x = Tensor::from_fn(t.rows(), d, |i, j| t.get(i, j));
                    Self { x, labels: Some(labels) }
                } else {
                    Self { x: t, labels: None }
                }
            }
            None => {
                let spec = ToySpec {
                    kind: cfg.dataset,
                    dim: cfg.data_dim,
                    extent: cfg.data_extent,
                    seed: cfg.seed,
                };
                let (b, labels) = gen_toy(&spec, cfg.data_size)?;
                Self {
                    x: b.data,
                    labels: Some(labels),
                }
            }
        };
        if data.x.rows() < cfg.batch_size {
            return Err(TrainError::Data(format!(
                "{} rows is fewer than one batch of {}",
                data.x.rows(),
                cfg.batch_size
            )));
        }
        if !data.x.is_finite() {
            return Err(TrainError::Data("non-finite values".into()));
        }
        if cfg.num_classes > 0 {
            let labels = data
                .labels
                .as_ref()
                .ok_or_else(|| TrainError::Data("a conditional model needs labels".into()))?;
            if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.num_classes) {
                return Err(TrainError::Data(format!(
                    "label {bad} out of range for {} classes",
                    cfg.num_classes
                )));
            }
        }
        Ok(data)
    }

    /// Batch number `iter`: consecutive slices of a per-epoch permutation.
    pub fn batch(&self, iter: u64, batch_size: usize, seed: u64) -> (Tensor<f64>, Option<Vec<usize>>) {
        let n = self.x.rows();
        let per_epoch = (n / batch_size) as u64;
        let (epoch, k) = (iter / per_epoch, (iter % per_epoch) as usize);
        let perm = RngStream::with_stream(seed, STREAM_SHUFFLE).derive(epoch).permutation(n);
        let idx = &perm[k * batch_size..(k + 1) * batch_size];
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        (self.x.gather_rows(idx), labels)
    }
}

/// Diagnostics from one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub iter: u64,
    /// Level of the batch (of the first row when levels vary per row).
    pub level: usize,
    pub ebm_loss: f64,
    pub init_loss: f64,
    pub mean_energy_real: f64,
    pub mean_energy_fake: f64,
    pub lr_ebm: f64,
    pub lr_init: f64,
}

/// Networks, EMA shadows, optimizer state and the iteration counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    schedule: Arc<NoiseSchedule>,
    pub energy: EnergyModel<f32>,
    pub init: InitializerModel<f32>,
    pub energy_ema: ParamSet<f32>,
    pub init_ema: ParamSet<f32>,
    pub energy_opt: Adam<f32>,
    pub init_opt: Adam<f32>,
    pub iter: u64,
    data: TrainData,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let data = TrainData::from_config(&config)?;
        Self::with_data(config, data)
    }

    /// Fresh networks on explicit data.
    pub fn with_data(config: TrainConfig, data: TrainData) -> Result<Self> {
        config.validate()?;
        let schedule = Arc::new(NoiseSchedule::new(config.schedule_config())?);
        let dim = data.x.cols();
        let mut rng_e = RngStream::with_stream(config.seed, STREAM_ENERGY_INIT);
        let mut rng_i = RngStream::with_stream(config.seed, STREAM_INIT_INIT);
        let energy = EnergyModel::new(config.energy_spec(dim), schedule.clone(), &mut rng_e)?;
        let init = InitializerModel::new(config.init_spec(dim), schedule.clone(), config.init_target, &mut rng_i)?;
        let adam = config.adam_config();
        Ok(Self {
            energy_ema: energy.net().params().clone(),
            init_ema: init.net().params().clone(),
            energy_opt: Adam::new(energy.net().params(), adam),
            init_opt: Adam::new(init.net().params(), adam),
            config,
            schedule,
            energy,
            init,
            iter: 0,
            data,
        })
    }

    pub fn schedule(&self) -> &Arc<NoiseSchedule> {
        &self.schedule
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    /// Models carrying the EMA weights, as used for sampling.
    pub fn ema_models(&self) -> Result<(EnergyModel<f32>, InitializerModel<f32>)> {
        let e = Mlp::from_params(self.energy.net().spec().clone(), self.energy_ema.clone())?;
        let i = Mlp::from_params(self.init.net().spec().clone(), self.init_ema.clone())?;
        Ok((
            EnergyModel::from_net(e, self.schedule.clone())?,
            InitializerModel::from_net(i, self.schedule.clone(), self.config.init_target)?,
        ))
    }

    /// Per-row energies and input gradients with rows at their own levels.
    fn energy_rows(&self, y: &Tensor<f64>, levels: &[usize], class: ClassCond) -> Result<(Vec<f64>, Tensor<f64>)> {
        let (out, tape) = self.energy.raw_forward(y, levels, class)?;
        let g = tape.grad_input(&Tensor::full(out.shape(), 1.0f32))?;
        let d = y.cols();
        let mut grad = Tensor::zeros(y.shape());
        let mut energy = Vec::with_capacity(levels.len());
        for (i, &t) in levels.iter().enumerate() {
            let inv = 1.0 / self.schedule.step_size(t).powi(2);
            energy.push(out.get(i, 0) as f64 * inv);
            for j in 0..d {
                grad.set(i, j, g.get(i, j) as f64 * inv);
            }
        }
        Ok((energy, grad))
    }

    /// One iteration of cooperative training.
    pub fn train_step(&mut self) -> Result<StepStats> {
        let iter = self.iter;
        let cfg = self.config.clone();
        let sched = self.schedule.clone();
        let mut rng = RngStream::with_stream(cfg.seed, STREAM_ITER).derive(iter);
        let (x0, labels) = self.data.batch(iter, cfg.batch_size, cfg.seed);
        let (n, d) = (x0.rows(), x0.cols());
        let big_t = sched.num_levels();

        let levels: Vec<usize> = if cfg.per_element_levels {
            (0..n).map(|_| rng.below(big_t)).collect()
        } else {
            vec![rng.below(big_t); n]
        };
        let classes: Option<Vec<Option<usize>>> = if cfg.num_classes > 0 {
            labels.map(|l| {
                l.into_iter()
                    .map(|c| if rng.uniform() < cfg.p_uncond { None } else { Some(c) })
                    .collect()
            })
        } else {
            None
        };
        let class = classes.as_deref().map_or(ClassCond::Null, ClassCond::PerRow);

        let mut e = Tensor::zeros(&[n, d]);
        rng.fill_normal(e.data_mut());
        let e2 = (cfg.pair_mode == PairMode::Independent).then(|| {
            let mut e2 = Tensor::zeros(&[n, d]);
            rng.fill_normal(e2.data_mut());
            e2
        });
        let (y, x_next) = make_pair(&x0, &levels, &e, e2.as_ref(), &sched, cfg.pair_mode);

        // Initializer proposal, kept with its tape for the regression loss.
        let init_fwd = self.init.raw_forward(&x_next, &levels, class)?;
        let mut y_fake = init_fwd.mean.clone();
        for i in 0..n {
            let sd = sched.sigma_tilde(levels[i]);
            for v in y_fake.row_mut(i) {
                *v += sd * rng.normal();
            }
        }

        // Langevin refinement of the proposal under the current energy.
        for _ in 0..cfg.steps {
            let (_, g) = self.energy_rows(&y_fake, &levels, class)?;
            for i in 0..n {
                let t = levels[i];
                let s = sched.step_size(t);
                let inv_var = 1.0 / sched.sigma_next(t).powi(2);
                for j in 0..d {
                    let yv = y_fake.get(i, j);
                    let grad = g.get(i, j) - (yv - x_next.get(i, j)) * inv_var;
                    let next = yv + 0.5 * s * s * grad + s * rng.normal();
                    if !(next.abs() <= cfg.divergence_bound) {
                        return Err(TrainError::Diverged {
                            iter,
                            level: t,
                            value: next,
                            bound: cfg.divergence_bound,
                        });
                    }
                    y_fake.set(i, j, next);
                }
            }
        }

        // Energy loss -(mean f(y) - mean f(y_fake)) in one pass over [y; y_fake].
        let stacked = Tensor::vstack(&y, &y_fake)?;
        let levels2: Vec<usize> = levels.iter().chain(&levels).copied().collect();
        let classes2: Option<Vec<Option<usize>>> =
            classes.as_ref().map(|c| c.iter().chain(c).copied().collect());
        let class2 = classes2.as_deref().map_or(ClassCond::Null, ClassCond::PerRow);
        let (out, tape) = self.energy.raw_forward(&stacked, &levels2, class2)?;
        let mut upstream = Tensor::<f32>::zeros(out.shape());
        let (mut real, mut fake) = (0.0, 0.0);
        for (k, &t) in levels2.iter().enumerate() {
            let inv = 1.0 / sched.step_size(t).powi(2);
            let f = out.get(k, 0) as f64 * inv;
            let w = match cfg.ebm_loss_scale {
                EbmLossScale::Energy => inv,
                EbmLossScale::Raw => 1.0,
            } / n as f64;
            if k < n {
                real += f / n as f64;
                upstream.set(k, 0, -w as f32);
            } else {
                fake += f / n as f64;
                upstream.set(k, 0, w as f32);
            }
        }
        let ebm_loss = -(real - fake);
        if !ebm_loss.is_finite() {
            return Err(TrainError::NonFinite { what: "energy loss", iter });
        }
        let mut energy_grads = tape.grad_params(self.energy.net().params(), &upstream)?;

        // Initializer loss mean_i |y_fake_i - g_i|^2; y_fake is a constant.
        let mut init_up = Tensor::<f32>::zeros(&[n, d]);
        let mut init_loss = 0.0;
        for i in 0..n {
            let b = init_fwd.out_scale[i];
            for j in 0..d {
                let diff = init_fwd.mean.get(i, j) - y_fake.get(i, j);
                init_loss += diff * diff / n as f64;
                init_up.set(i, j, (2.0 * b * diff / n as f64) as f32);
            }
        }
        if !init_loss.is_finite() {
            return Err(TrainError::NonFinite {
                what: "initializer loss",
                iter,
            });
        }
        let mut init_grads = init_fwd.tape.grad_params(self.init.net().params(), &init_up)?;

        if cfg.grad_clip > 0.0 {
            for g in [&mut energy_grads, &mut init_grads] {
                let norm = g.global_norm();
                if norm > cfg.grad_clip {
                    g.scale((cfg.grad_clip / norm) as f32);
                }
            }
        }
        let lr_ebm = warmup_lr(iter, cfg.lr_ebm, cfg.warmup_iters, 0);
        let lr_init = warmup_lr(iter, cfg.lr_init, cfg.warmup_iters, cfg.init_head_start);
        self.energy_opt
            .step(self.energy.net_mut().params_mut(), &energy_grads, lr_ebm)?;
        self.init_opt.step(self.init.net_mut().params_mut(), &init_grads, lr_init)?;
        ema_update(&mut self.energy_ema, self.energy.net().params(), cfg.ema_decay)?;
        ema_update(&mut self.init_ema, self.init.net().params(), cfg.ema_decay)?;
        self.iter += 1;
        Ok(StepStats {
            iter,
            level: levels[0],
            ebm_loss,
            init_loss,
            mean_energy_real: real,
            mean_energy_fake: fake,
            lr_ebm,
            lr_init,
        })
    }

    /// Runs until `total_iters`, calling `on_step` after every iteration.
    pub fn fit(&mut self, mut on_step: impl FnMut(&StepStats)) -> Result<()> {
        while self.iter < self.config.total_iters {
            let stats = self.train_step()?;
            on_step(&stats);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_trainer(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write(path, self.to_checkpoint().to_bytes())?;
        Ok(())
    }

    /// Restores a trainer; the training data is rebuilt from the stored config.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let data = TrainData::from_config(&ckpt.header.config)?;
        Self::from_checkpoint_with_data(ckpt, data)
    }

    pub fn from_checkpoint_with_data(ckpt: Checkpoint, data: TrainData) -> Result<Self> {
        let parts = ckpt.into_parts()?;
        let schedule = Arc::new(NoiseSchedule::new(parts.config.schedule_config())?);
        let energy = EnergyModel::from_net(parts.energy, schedule.clone())?;
        let init = InitializerModel::from_net(parts.init, schedule.clone(), parts.config.init_target)?;
        if data.x.cols() != energy.net().spec().input_dim {
            return Err(TrainError::Data(format!(
                "data has {} columns, checkpoint models {}",
                data.x.cols(),
                energy.net().spec().input_dim
            )));
        }
        Ok(Self {
            config: parts.config,
            schedule,
            energy,
            init,
            energy_ema: parts.energy_ema,
            init_ema: parts.init_ema,
            energy_opt: parts.energy_opt,
            init_opt: parts.init_opt,
            iter: parts.iter,
            data,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_values() {
        assert_eq!(warmup_lr(0, 1e-4, 10_000, 0), 0.0);
        assert_eq!(warmup_lr(0, 1e-5, 10_000, 500), 0.05 * 1e-5);
        assert_eq!(warmup_lr(20_000, 1e-4, 10_000, 0), 1e-4);
        assert_eq!(warmup_lr(20_000, 1e-5, 10_000, 500), 1e-5);
    }

    #[test]
    fn pair_identities() {
        let s = NoiseSchedule::new(crate::schedule::ScheduleConfig::default()).unwrap();
        let x0 = Tensor::from_fn(4, 2, |i, j| i as f64 - j as f64 * 0.5);
        let zero = Tensor::zeros(&[4, 2]);
        let levels = [0, 2, 3, 5];
        let (y, xn) = make_pair(&x0, &levels, &zero, None, &s, PairMode::Shared);
        for (i, &t) in levels.iter().enumerate() {
            for j in 0..2 {
                assert!((y.get(i, j) - xn.get(i, j)).abs() <= 1e-15 * x0.get(i, j).abs().max(1.0));
                assert!((xn.get(i, j) - s.alpha_bar(t + 1) * x0.get(i, j)).abs() < 1e-15);
            }
        }
        let e = Tensor::from_fn(4, 2, |i, j| 0.3 + i as f64 * 0.1 - j as f64);
        let (y, xn) = make_pair(&zero, &levels, &e, None, &s, PairMode::Shared);
        for (i, &t) in levels.iter().enumerate() {
            for j in 0..2 {
                assert!((y.get(i, j) - s.alpha_next(t) * s.sigma_bar(t) * e.get(i, j)).abs() < 1e-15);
                assert_eq!(xn.get(i, j), s.sigma_bar(t + 1) * e.get(i, j));
            }
        }
    }
}
