//! Variance-preserving noise ladder built from a cosine log-SNR curve.
//!
//! Levels `t = 0..=T` sit on the grid `u = t / T`. Level 0 carries the
//! largest log-SNR and level `T` the smallest; only levels `0..T` carry an
//! energy model, level `T` is treated as a standard normal at sampling time.
//!
//! Per-step quantities are indexed by the lower level of the transition they
//! describe: [`NoiseSchedule::alpha_next`]`(t)` is the signal coefficient of the
//! step from level `t` to level `t + 1`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("need at least 2 noise levels, got {0}")]
    TooFewLevels(usize),
    #[error("log-SNR endpoints must be finite with lambda_max > lambda_min (got {max}, {min})")]
    BadEndpoints { max: f64, min: f64 },
    #[error("step constant must be positive and finite, got {0}")]
    BadStepConstant(f64),
    #[error("non-positive per-step variance {variance:e} between levels {level} and {}", level + 1)]
    DegenerateStep { level: usize, variance: f64 },
    #[error("noise level {level} out of range 0..={max}")]
    LevelOutOfRange { level: usize, max: usize },
    #[error("step counts must be positive (train {train}, inference {infer})")]
    BadStepCount { train: usize, infer: usize },
}

/// Which per-step standard deviation scales the initializer proposal width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaTildeRule {
    /// `sqrt((1 - abar_t^2) / (1 - abar_{t+1}^2)) * sigma_{t+1}`, the posterior
    /// width of the step that produced `x_{t+1}`.
    #[default]
    NextStep,
    /// Same ratio times `sigma_t`, with `sigma_0 := sigma_bar_0`.
    SameLevel,
}

impl std::str::FromStr for SigmaTildeRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "next_step" => Ok(Self::NextStep),
            "same_level" => Ok(Self::SameLevel),
            other => Err(format!("unknown sigma_tilde rule `{other}`")),
        }
    }
}

/// Inputs from which every schedule coefficient is derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub num_levels: usize,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub step_constant: f64,
    #[serde(default)]
    pub sigma_tilde: SigmaTildeRule,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_levels: 6,
            lambda_max: 9.8,
            lambda_min: -5.1,
            step_constant: 0.054,
            sigma_tilde: SigmaTildeRule::NextStep,
        }
    }
}

/// Immutable per-level coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    lambda: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma_bar: Vec<f64>,
    // index t holds the t -> t+1 step
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    sigma_tilde: Vec<f64>,
    step_size: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Builds the cosine log-SNR schedule with `num_levels` modeled levels.
pub fn build_cosine_schedule(
    num_levels: usize,
    lambda_max: f64,
    lambda_min: f64,
    step_constant: f64,
) -> Result<NoiseSchedule, ScheduleError> {
    NoiseSchedule::new(ScheduleConfig {
        num_levels,
        lambda_max,
        lambda_min,
        step_constant,
        sigma_tilde: SigmaTildeRule::NextStep,
    })
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self, ScheduleError> {
        let t_max = config.num_levels;
        if t_max < 2 {
            return Err(ScheduleError::TooFewLevels(t_max));
        }
        let (lmax, lmin) = (config.lambda_max, config.lambda_min);
        if !lmax.is_finite() || !lmin.is_finite() || lmax <= lmin {
            return Err(ScheduleError::BadEndpoints { max: lmax, min: lmin });
        }
        let c = config.step_constant;
        if !(c.is_finite() && c > 0.0) {
            return Err(ScheduleError::BadStepConstant(c));
        }

        let b = (-0.5 * lmax).exp().atan();
        let a = (-0.5 * lmin).exp().atan() - b;
        let mut lambda: Vec<f64> = (0..=t_max)
            .map(|t| {
                let u = t as f64 / t_max as f64;
                -2.0 * (a * u + b).tan().ln()
            })
            .collect();
        // The grid endpoints are the configured values up to rounding; pin them.
        lambda[0] = lmax;
        lambda[t_max] = lmin;

        let alpha_bar: Vec<f64> = lambda.iter().map(|&l| sigmoid(l).sqrt()).collect();
        // sigma_bar^2 = sigmoid(-lambda) avoids cancellation in 1 - abar^2.
        let sigma_bar: Vec<f64> = lambda.iter().map(|&l| sigmoid(-l).sqrt()).collect();

        let mut alpha = Vec::with_capacity(t_max);
        let mut sigma = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let a_step = alpha_bar[t + 1] / alpha_bar[t];
            let var = sigma_bar[t + 1].powi(2) - a_step * a_step * sigma_bar[t].powi(2);
            if !(var > 0.0) {
                return Err(ScheduleError::DegenerateStep { level: t, variance: var });
            }
            alpha.push(a_step);
            sigma.push(var.sqrt());
        }

        let mut sigma_tilde = Vec::with_capacity(t_max);
        let mut step_size = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let ratio = (sigma_bar[t].powi(2) / sigma_bar[t + 1].powi(2)).sqrt();
            let width = match config.sigma_tilde {
                SigmaTildeRule::NextStep => sigma[t],
                SigmaTildeRule::SameLevel if t == 0 => sigma_bar[0],
                SigmaTildeRule::SameLevel => sigma[t - 1],
            };
            sigma_tilde.push(ratio * width);
            step_size.push((c * sigma_bar[t] * sigma[t] * sigma[t]).sqrt());
        }

        Ok(Self {
            config,
            lambda,
            alpha_bar,
            sigma_bar,
            alpha,
            sigma,
            sigma_tilde,
            step_size,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    /// Number of modeled levels `T`.
    pub fn num_levels(&self) -> usize {
        self.config.num_levels
    }

    pub fn lambda(&self, t: usize) -> f64 {
        self.lambda[t]
    }
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
    pub fn sigma_bar(&self, t: usize) -> f64 {
        self.sigma_bar[t]
    }
    /// Signal coefficient of the step `t -> t + 1`.
    pub fn alpha_next(&self, t: usize) -> f64 {
        self.alpha[t]
    }
    /// Noise std of the step `t -> t + 1`.
    pub fn sigma_next(&self, t: usize) -> f64 {
        self.sigma[t]
    }
    /// Initializer proposal std at level `t`.
    pub fn sigma_tilde(&self, t: usize) -> f64 {
        self.sigma_tilde[t]
    }
    /// Langevin step size `s_t` at level `t`.
    pub fn step_size(&self, t: usize) -> f64 {
        self.step_size[t]
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambda
    }

    fn check_level(&self, t: usize, max: usize) -> Result<(), ScheduleError> {
        if t > max {
            Err(ScheduleError::LevelOutOfRange { level: t, max })
        } else {
            Ok(())
        }
    }

    /// The scalar networks receive as noise-level conditioning (the log-SNR).
    pub fn snr_embedding_input(&self, t: usize) -> Result<f64, ScheduleError> {
        self.check_level(t, self.num_levels())?;
        Ok(self.lambda[t])
    }

    /// Step size rescaled for running `infer_steps` Langevin steps on a model
    /// trained with `train_steps`: `s_t * sqrt(train / infer)`.
    pub fn adjusted_step_size(
        &self,
        t: usize,
        train_steps: usize,
        infer_steps: usize,
    ) -> Result<f64, ScheduleError> {
        self.check_level(t, self.num_levels() - 1)?;
        if train_steps == 0 || infer_steps == 0 {
            return Err(ScheduleError::BadStepCount {
                train: train_steps,
                infer: infer_steps,
            });
        }
        if train_steps == infer_steps {
            return Ok(self.step_size[t]);
        }
        Ok(self.step_size[t] * (train_steps as f64 / infer_steps as f64).sqrt())
    }

    /// CSV table, one row per level. Per-step columns are blank where undefined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,lambda,alpha_bar,sigma_bar,alpha,sigma,sigma_tilde,step_size\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        for t in 0..=self.num_levels() {
            let step = t.checked_sub(1);
            let below_top = (t < self.num_levels()).then_some(t);
            out.push_str(&format!(
                "{t},{:.17e},{:.17e},{:.17e},{},{},{},{}\n",
                self.lambda[t],
                self.alpha_bar[t],
                self.sigma_bar[t],
                opt(step.map(|s| self.alpha[s])),
                opt(step.map(|s| self.sigma[s])),
                opt(below_top.map(|s| self.sigma_tilde[s])),
                opt(below_top.map(|s| self.step_size[s])),
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper_t6() -> NoiseSchedule {
        build_cosine_schedule(6, 9.8, -5.1, 0.054).unwrap()
    }

    #[test]
    fn endpoints_are_exact() {
        let s = paper_t6();
        assert_eq!(s.snr_embedding_input(0).unwrap(), 9.8);
        assert_eq!(s.snr_embedding_input(6).unwrap(), -5.1);
        assert!(matches!(
            s.snr_embedding_input(7),
            Err(ScheduleError::LevelOutOfRange { level: 7, max: 6 })
        ));
    }

    // Reference values from a 50-digit mpmath evaluation of the same formulas.
    #[test]
    fn matches_high_precision_reference() {
        let s = paper_t6();
        assert!((s.lambda(3) - 0.141_071_066_563_060_99).abs() < 1e-9);
        assert!((s.alpha_bar(0) - 0.999_972_275_4).abs() < 1e-9);
        assert!((s.sigma_bar(0) - 0.007_446_376_617).abs() < 1e-11);
        assert!((s.sigma_next(0) - 0.252_159_41).abs() < 1e-7);
        assert!((s.step_size(0) - 0.005_056_436_4).abs() < 1e-9);
        assert!((s.sigma_tilde(1) - 0.222_086_02).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_configs() {
        assert_eq!(
            build_cosine_schedule(1, 9.8, -5.1, 0.054).unwrap_err(),
            ScheduleError::TooFewLevels(1)
        );
        assert!(matches!(
            build_cosine_schedule(6, f64::INFINITY, -5.1, 0.054),
            Err(ScheduleError::BadEndpoints { .. })
        ));
        assert!(matches!(
            build_cosine_schedule(6, -5.1, 9.8, 0.054),
            Err(ScheduleError::BadEndpoints { .. })
        ));
        assert!(matches!(
            build_cosine_schedule(6, 9.8, -5.1, 0.0),
            Err(ScheduleError::BadStepConstant(_))
        ));
    }

    #[test]
    fn adjusted_step_size_rules() {
        let s = paper_t6();
        for t in 0..6 {
            assert_eq!(s.adjusted_step_size(t, 15, 15).unwrap(), s.step_size(t));
            let r5 = s.adjusted_step_size(t, 15, 3).unwrap() / s.step_size(t);
            assert!((r5 - 5f64.sqrt()).abs() < 1e-12);
            let r8 = s.adjusted_step_size(t, 15, 8).unwrap() / s.step_size(t);
            assert!((r8 - 1.369_306_393_762_915_3).abs() < 1e-12);
        }
        assert!(s.adjusted_step_size(0, 0, 3).is_err());
        assert!(s.adjusted_step_size(0, 15, 0).is_err());
        assert!(s.adjusted_step_size(6, 15, 15).is_err());
    }

    #[test]
    fn csv_has_one_row_per_level() {
        let csv = paper_t6().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 8);
        assert!(lines[1].starts_with("0,9.8"));
        assert_eq!(lines[7].split(',').count(), 8);
        assert!(lines[7].ends_with(",,"));
    }

    #[test]
    fn same_level_rule_differs_from_next_step() {
        let mut cfg = ScheduleConfig::default();
        cfg.sigma_tilde = SigmaTildeRule::SameLevel;
        let lit = NoiseSchedule::new(cfg).unwrap();
        let def = paper_t6();
        let ratio = def.sigma_bar(2) / def.sigma_bar(3);
        assert!((lit.sigma_tilde(2) - ratio * def.sigma_next(1)).abs() < 1e-15);
        assert_ne!(lit.sigma_tilde(2), def.sigma_tilde(2));
    }

    proptest! {
        #[test]
        fn schedule_invariants(
            t_max in 2usize..40,
            lmax in 2.0f64..14.0,
            span in 1.0f64..20.0,
            c in 0.001f64..1.0,
        ) {
            let s = build_cosine_schedule(t_max, lmax, lmax - span, c).unwrap();
            prop_assert_eq!(s.lambda(0), lmax);
            prop_assert_eq!(s.lambda(t_max), lmax - span);
            for t in 0..=t_max {
                let vp = s.alpha_bar(t).powi(2) + s.sigma_bar(t).powi(2);
                prop_assert!((vp - 1.0).abs() < 1e-12);
                if t < t_max {
                    prop_assert!(s.lambda(t + 1) < s.lambda(t));
                    prop_assert!(s.sigma_next(t) > 0.0);
                    prop_assert!(s.step_size(t) > 0.0);
                    prop_assert!(s.sigma_tilde(t) < s.sigma_next(t));
                }
            }
            let mut prod = 1.0;
            for t in 1..=t_max {
                prod *= s.alpha_next(t - 1);
                let want = s.alpha_bar(t) / s.alpha_bar(0);
                prop_assert!((prod - want).abs() <= 1e-9 * want);
            }
        }
    }
}
