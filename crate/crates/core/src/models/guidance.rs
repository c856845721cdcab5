use serde::{Deserialize, Serialize};

use super::{check_dim, ClassCond, EnergyFn, InitializerFn, ModelError, Result};
use crate::ndgrad::Tensor;

/// Guidance weight and the concepts to condition on.
///
/// No concepts means unconditional sampling; one concept is classifier-free
/// guidance; several concepts compose as a product of experts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub weight: f64,
    pub concepts: Vec<usize>,
}

impl GuidanceSpec {
    pub fn unconditional() -> Self {
        Self::default()
    }

    pub fn class(class: usize, weight: f64) -> Self {
        Self {
            weight,
            concepts: vec![class],
        }
    }
}

/// Branch coefficients for a guidance spec: `w + 1` on every concept
/// (summed when a concept repeats) and `-(M w + M - 1)` on the null branch,
/// which is dropped when it is exactly zero.
pub fn guidance_terms(spec: &GuidanceSpec) -> Vec<(Option<usize>, f64)> {
    if spec.concepts.is_empty() {
        return vec![(None, 1.0)];
    }
    let w = spec.weight;
    let m = spec.concepts.len() as f64;
    let mut terms: Vec<(Option<usize>, f64)> = Vec::new();
    for &c in &spec.concepts {
        match terms.iter_mut().find(|(k, _)| *k == Some(c)) {
            Some((_, coeff)) => *coeff += w + 1.0,
            None => terms.push((Some(c), w + 1.0)),
        }
    }
    let null = -(m * w + m - 1.0);
    if null != 0.0 {
        terms.push((None, null));
    }
    terms
}

fn subtract_tether(grad: &mut Tensor<f64>, y: &Tensor<f64>, x_next: &Tensor<f64>, sigma: f64) -> Result<()> {
    y.check_same(x_next, "tether")?;
    let inv = 1.0 / (sigma * sigma);
    for ((g, &yv), &xv) in grad.data_mut().iter_mut().zip(y.data()).zip(x_next.data()) {
        *g -= (yv - xv) * inv;
    }
    Ok(())
}

fn combined(
    m: &dyn EnergyFn,
    y: &Tensor<f64>,
    x_next: &Tensor<f64>,
    t: usize,
    terms: &[(Option<usize>, f64)],
) -> Result<Tensor<f64>> {
    check_dim(x_next, m.dim())?;
    let mut acc: Option<Tensor<f64>> = None;
    for &(class, coeff) in terms {
        let (_, g) = m.energy_and_grad(y, t, class.into())?;
        match &mut acc {
            None => acc = Some(g.map(|v| coeff * v)),
            Some(a) => a.axpy(coeff, &g)?,
        }
    }
    let mut grad = acc.expect("at least one guidance term");
    subtract_tether(&mut grad, y, x_next, m.schedule().sigma_next(t))?;
    Ok(grad)
}

/// Gradient of the conditional log-density `log p(y_t | x_{t+1})` up to a
/// constant: `grad f(y; t, c) - (y - x_next) / sigma_{t+1}^2`.
pub fn cond_energy_grad(
    m: &dyn EnergyFn,
    y: &Tensor<f64>,
    x_next: &Tensor<f64>,
    t: usize,
    class: ClassCond,
) -> Result<Tensor<f64>> {
    check_dim(x_next, m.dim())?;
    let (_, mut grad) = m.energy_and_grad(y, t, class)?;
    subtract_tether(&mut grad, y, x_next, m.schedule().sigma_next(t))?;
    Ok(grad)
}

/// Classifier-free guided gradient:
/// `(w + 1) grad f(y; c, t) - w grad f(y; t) - (y - x_next) / sigma_{t+1}^2`.
pub fn guided_energy_grad(
    m: &dyn EnergyFn,
    y: &Tensor<f64>,
    x_next: &Tensor<f64>,
    t: usize,
    class: usize,
    weight: f64,
) -> Result<Tensor<f64>> {
    if m.num_classes() == 0 {
        return Err(ModelError::NotConditional);
    }
    combined(m, y, x_next, t, &guidance_terms(&GuidanceSpec::class(class, weight)))
}

/// Guided product-of-experts gradient over `spec.concepts`.
pub fn compositional_grad(
    m: &dyn EnergyFn,
    y: &Tensor<f64>,
    x_next: &Tensor<f64>,
    t: usize,
    spec: &GuidanceSpec,
) -> Result<Tensor<f64>> {
    if spec.concepts.is_empty() {
        return Err(ModelError::NoConcepts);
    }
    if m.num_classes() == 0 {
        return Err(ModelError::NotConditional);
    }
    combined(m, y, x_next, t, &guidance_terms(spec))
}

/// Whichever of the three gradients `spec` calls for.
pub fn sampling_grad(
    m: &dyn EnergyFn,
    y: &Tensor<f64>,
    x_next: &Tensor<f64>,
    t: usize,
    spec: &GuidanceSpec,
) -> Result<Tensor<f64>> {
    if spec.concepts.is_empty() {
        cond_energy_grad(m, y, x_next, t, ClassCond::Null)
    } else {
        compositional_grad(m, y, x_next, t, spec)
    }
}

/// Initializer mean under guidance: the same branch coefficients applied to
/// the Gaussian means. They sum to one, so the result is an affine
/// combination of conditional and unconditional means.
pub fn guided_initializer_mean(
    init: &dyn InitializerFn,
    x_next: &Tensor<f64>,
    t: usize,
    spec: &GuidanceSpec,
) -> Result<Tensor<f64>> {
    let mut acc: Option<Tensor<f64>> = None;
    for (class, coeff) in guidance_terms(spec) {
        let g = init.mean(x_next, t, class.into())?;
        match &mut acc {
            None => acc = Some(if coeff == 1.0 { g } else { g.map(|v| coeff * v) }),
            Some(a) => a.axpy(coeff, &g)?,
        }
    }
    Ok(acc.expect("at least one guidance term"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_algebra() {
        assert_eq!(guidance_terms(&GuidanceSpec::unconditional()), vec![(None, 1.0)]);
        assert_eq!(guidance_terms(&GuidanceSpec::class(4, 0.0)), vec![(Some(4), 1.0)]);
        assert_eq!(
            guidance_terms(&GuidanceSpec::class(4, 1.5)),
            vec![(Some(4), 2.5), (None, -1.5)]
        );
        let three = GuidanceSpec {
            weight: 3.0,
            concepts: vec![0, 1, 2],
        };
        assert_eq!(
            guidance_terms(&three),
            vec![(Some(0), 4.0), (Some(1), 4.0), (Some(2), 4.0), (None, -11.0)]
        );
        let pair = GuidanceSpec {
            weight: 0.0,
            concepts: vec![1, 2],
        };
        assert_eq!(guidance_terms(&pair), vec![(Some(1), 1.0), (Some(2), 1.0), (None, -1.0)]);
        let repeated = GuidanceSpec {
            weight: 0.5,
            concepts: vec![3, 3],
        };
        assert_eq!(guidance_terms(&repeated), guidance_terms(&GuidanceSpec::class(3, 2.0)));
    }
}
