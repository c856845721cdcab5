use serde::{Deserialize, Serialize};

use super::{NdError, NodeId, ParamSet, Real, Result, Tape, Tensor};
use crate::rng::RngStream;

/// Smooth hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Swish,
    Softplus,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "swish" => Ok(Self::Swish),
            "softplus" => Ok(Self::Softplus),
            "tanh" => Ok(Self::Tanh),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

/// Shape of a conditioned MLP.
///
/// The first layer sees `[x, sinusoidal(log_snr), class_embedding]`
/// concatenated column-wise. Either conditioning block may be disabled by
/// setting its width (or class count) to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    /// Number of real classes; the embedding table has one extra row for the null token.
    pub num_classes: usize,
    pub class_embed_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn feature_dim(&self) -> usize {
        let class = if self.num_classes > 0 { self.class_embed_dim } else { 0 };
        self.input_dim + self.time_embed_dim + class
    }

    /// Row of the embedding table used for the unconditional branch.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }
}

/// Per-row conditioning for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub log_snr: Vec<f64>,
    /// Embedding-table rows (null token included); ignored by unconditional nets.
    pub class_rows: Option<Vec<usize>>,
}

impl Conditioning {
    pub fn uniform(rows: usize, log_snr: f64, class_row: Option<usize>) -> Self {
        Self {
            log_snr: vec![log_snr; rows],
            class_rows: class_row.map(|c| vec![c; rows]),
        }
    }
}

/// Sinusoidal features of a scalar: `[sin(w_k v)..., cos(w_k v)...]` with
/// frequencies spaced geometrically over `[0.05, 5]`.
pub fn sinusoidal_embedding(value: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let w = 0.05 * 100f64.powf(frac);
        out[k] = (w * value).sin();
        out[half + k] = (w * value).cos();
    }
    if dim % 2 == 1 {
        out[dim - 1] = value;
    }
    out
}

/// A conditioned multilayer perceptron and its parameters.
#[derive(Clone, Debug)]
pub struct Mlp<R: Real> {
    spec: MlpSpec,
    params: ParamSet<R>,
}

impl<R: Real> Mlp<R> {
    /// Random LeCun-uniform hidden layers; the output layer is scaled by
    /// `output_scale` (zero gives an exactly-zero network output).
    pub fn init(spec: MlpSpec, rng: &mut RngStream, output_scale: f64) -> Self {
        let mut params = ParamSet::new();
        if spec.num_classes > 0 {
            let rows = spec.num_classes + 1;
            let table = Tensor::from_fn(rows, spec.class_embed_dim, |_, _| R::of(rng.normal()));
            params.push("class_embedding", table);
        }
        let mut fan_in = spec.feature_dim();
        let widths: Vec<usize> = spec.hidden.iter().copied().chain([spec.output_dim]).collect();
        let last = widths.len() - 1;
        for (i, &w) in widths.iter().enumerate() {
            let bound = (3.0 / fan_in as f64).sqrt() * if i == last { output_scale } else { 1.0 };
            let weight =
                Tensor::from_fn(fan_in, w, |_, _| R::of(bound * (2.0 * rng.uniform() - 1.0)));
            params.push(format!("layer{i}.weight"), weight);
            params.push(format!("layer{i}.bias"), Tensor::zeros(&[w]));
            fan_in = w;
        }
        Self { spec, params }
    }

    /// Wraps existing parameters after checking they fit `spec`.
    pub fn from_params(spec: MlpSpec, params: ParamSet<R>) -> Result<Self> {
        let template = Self::init(spec.clone(), &mut RngStream::new(0), 1.0);
        template.params.check_compatible(&params)?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<R> {
        &mut self.params
    }

    /// Records a forward pass. The returned tape has `input` marked for
    /// [`Tape::grad_input`] and the `[n, output_dim]` result as its output.
    pub fn forward(&self, input: &Tensor<R>, cond: &Conditioning) -> Result<(Tensor<R>, Tape<R>)> {
        let spec = &self.spec;
        let n = input.rows();
        if input.shape().len() != 2 || input.cols() != spec.input_dim {
            return Err(NdError::Shape {
                op: "mlp input",
                lhs: input.shape().to_vec(),
                rhs: vec![n, spec.input_dim],
            });
        }
        if cond.log_snr.len() != n {
            return Err(NdError::Shape {
                op: "mlp conditioning",
                lhs: vec![n],
                rhs: vec![cond.log_snr.len()],
            });
        }

        let mut tape = Tape::new();
        let x = tape.input(input.clone())?;
        let mut parts: Vec<NodeId> = vec![x];
        if spec.time_embed_dim > 0 {
            let d = spec.time_embed_dim;
            let mut feats = Vec::with_capacity(n * d);
            let mut cache: Option<(f64, Vec<f64>)> = None;
            for &l in &cond.log_snr {
                let emb = match &cache {
                    Some((v, e)) if *v == l => e.clone(),
                    _ => {
                        let e = sinusoidal_embedding(l, d);
                        cache = Some((l, e.clone()));
                        e
                    }
                };
                feats.extend(emb.into_iter().map(R::of));
            }
            parts.push(tape.leaf(Tensor::raw(vec![n, d], feats))?);
        }
        let mut next_param = 0;
        if spec.num_classes > 0 {
            let rows = match &cond.class_rows {
                Some(r) if r.len() == n => r.clone(),
                Some(r) => {
                    return Err(NdError::Shape {
                        op: "class rows",
                        lhs: vec![n],
                        rhs: vec![r.len()],
                    })
                }
                None => vec![spec.null_class(); n],
            };
            let table = tape.param(&self.params, 0)?;
            parts.push(tape.gather(table, &rows)?);
            next_param = 1;
        }
        let mut h = if parts.len() == 1 { x } else { tape.concat(&parts)? };

        let layers = spec.hidden.len() + 1;
        for layer in 0..layers {
            let w = tape.param(&self.params, next_param + 2 * layer)?;
            let b = tape.param(&self.params, next_param + 2 * layer + 1)?;
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = if layer + 1 == layers {
                z
            } else {
                match spec.activation {
                    Activation::Swish => tape.swish(z)?,
                    Activation::Softplus => tape.softplus(z)?,
                    Activation::Tanh => tape.tanh(z)?,
                }
            };
        }
        tape.set_output(h);
        Ok((tape.value(h).clone(), tape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(hidden: Vec<usize>) -> MlpSpec {
        MlpSpec {
            input_dim: 2,
            output_dim: 2,
            hidden,
            time_embed_dim: 0,
            num_classes: 0,
            class_embed_dim: 0,
            activation: Activation::Swish,
        }
    }

    #[test]
    fn zero_output_layer_gives_bias_only() {
        let mut rng = RngStream::new(3);
        let mut net = Mlp::<f64>::init(spec(vec![8]), &mut rng, 0.0);
        let b = net.params().index_of("layer1.bias").unwrap();
        net.params_mut().tensor_mut(b).data_mut().copy_from_slice(&[0.5, -1.0]);
        let x = Tensor::from_fn(4, 2, |i, j| i as f64 * 3.0 - j as f64);
        let (y, _) = net.forward(&x, &Conditioning::uniform(4, 0.0, None)).unwrap();
        for i in 0..4 {
            assert_eq!(y.row(i), &[0.5, -1.0]);
        }
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let mut rng = RngStream::new(3);
        let mut net = Mlp::<f64>::init(spec(vec![]), &mut rng, 1.0);
        let w = net.params().index_of("layer0.weight").unwrap();
        net.params_mut()
            .tensor_mut(w)
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let x = Tensor::from_fn(5, 2, |i, j| (i as f64).sin() + j as f64);
        let (y, _) = net.forward(&x, &Conditioning::uniform(5, 1.0, None)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut s = spec(vec![16, 16]);
        s.time_embed_dim = 8;
        s.num_classes = 3;
        s.class_embed_dim = 4;
        let net_a = Mlp::<f32>::init(s.clone(), &mut RngStream::new(9), 1.0);
        let net_b = Mlp::<f32>::init(s, &mut RngStream::new(9), 1.0);
        let x = Tensor::from_fn(7, 2, |i, j| (i * 2 + j) as f32 * 0.1);
        let cond = Conditioning {
            log_snr: vec![2.0; 7],
            class_rows: Some(vec![0, 1, 2, 3, 0, 1, 2]),
        };
        let (ya, _) = net_a.forward(&x, &cond).unwrap();
        let (yb, _) = net_b.forward(&x, &cond).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ya), bits(&yb));
    }

    #[test]
    fn shape_errors() {
        let net = Mlp::<f64>::init(spec(vec![4]), &mut RngStream::new(1), 1.0);
        let bad = Tensor::zeros(&[3, 5]);
        assert!(net.forward(&bad, &Conditioning::uniform(3, 0.0, None)).is_err());
        let ok = Tensor::zeros(&[3, 2]);
        assert!(net.forward(&ok, &Conditioning::uniform(2, 0.0, None)).is_err());
    }

    #[test]
    fn embedding_is_bounded_and_distinct() {
        let a = sinusoidal_embedding(9.8, 32);
        let b = sinusoidal_embedding(-5.1, 32);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }
}
