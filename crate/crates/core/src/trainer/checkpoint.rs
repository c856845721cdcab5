//! Binary checkpoint: magic, version, JSON header, f32 tensor blobs, CRC32.
//!
//! ```text
//! "CDRL" | u32 version | u64 header_len | header (UTF-8 JSON)
//!        | tensors as little-endian f32, in header order | u32 crc32
//! ```
//! All integers are little-endian; the checksum covers every preceding byte.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Trainer, TrainConfig, STREAM_ITER};
use crate::io;
use crate::models::{EnergyModel, InitTarget, InitializerModel, ModelError};
use crate::ndgrad::{Adam, AdamConfig, Mlp, MlpSpec, NdError, ParamSet, Tensor};
use crate::rng::{RngState, RngStream};
use crate::schedule::{NoiseSchedule, ScheduleConfig, ScheduleError};

pub const MAGIC: &[u8; 4] = b"CDRL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic {0:?})")]
    Magic([u8; 4]),
    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: needed {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Io(#[from] io::IoError),
}

impl From<NdError> for CheckpointError {
    fn from(e: NdError) -> Self {
        CheckpointError::Layout(e.to_string())
    }
}

impl From<ModelError> for CheckpointError {
    fn from(e: ModelError) -> Self {
        CheckpointError::Layout(e.to_string())
    }
}

impl From<ScheduleError> for CheckpointError {
    fn from(e: ScheduleError) -> Self {
        CheckpointError::Header(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schedule: ScheduleConfig,
    pub energy_spec: MlpSpec,
    pub init_spec: MlpSpec,
    pub init_target: InitTarget,
    pub config: TrainConfig,
    pub iter: u64,
    /// Position of the stream the next iteration draws from.
    pub rng: RngState,
    pub energy_adam: AdamConfig,
    pub init_adam: AdamConfig,
    pub energy_adam_step: u64,
    pub init_adam_step: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Parsed checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

/// The pieces a trainer is rebuilt from.
pub struct Parts {
    pub config: TrainConfig,
    pub energy: Mlp<f32>,
    pub init: Mlp<f32>,
    pub energy_ema: ParamSet<f32>,
    pub init_ema: ParamSet<f32>,
    pub energy_opt: Adam<f32>,
    pub init_opt: Adam<f32>,
    pub iter: u64,
}

const GROUPS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

fn push_group(entries: &mut Vec<TensorEntry>, tensors: &mut Vec<Tensor<f32>>, prefix: &str, set: &ParamSet<f32>) {
    for (name, t) in set.names().iter().zip(set.tensors()) {
        entries.push(TensorEntry {
            name: format!("{prefix}/{name}"),
            shape: t.shape().to_vec(),
        });
        tensors.push(t.clone());
    }
}

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer) -> Self {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        for (model, params, ema, opt) in [
            ("energy", tr.energy.net().params(), &tr.energy_ema, &tr.energy_opt),
            ("init", tr.init.net().params(), &tr.init_ema, &tr.init_opt),
        ] {
            for (group, set) in GROUPS.iter().zip([params, ema, &opt.m, &opt.v]) {
                push_group(&mut entries, &mut tensors, &format!("{model}/{group}"), set);
            }
        }
        let header = CheckpointHeader {
            schedule: tr.schedule().config().clone(),
            energy_spec: tr.energy.net().spec().clone(),
            init_spec: tr.init.net().spec().clone(),
            init_target: tr.init.target(),
            config: tr.config.clone(),
            iter: tr.iter,
            rng: RngStream::with_stream(tr.config.seed, STREAM_ITER).derive(tr.iter).state(),
            energy_adam: tr.energy_opt.config,
            init_adam: tr.init_opt.config,
            energy_adam_step: tr.energy_opt.step,
            init_adam_step: tr.init_opt.step,
            tensors: entries,
        };
        Self { header, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let floats: usize = self.tensors.iter().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(CheckpointError::Truncated {
                    needed: n,
                    have: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::Magic(magic));
        }
        need(16)?;
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let hlen = usize::try_from(hlen).map_err(|_| CheckpointError::Header("header length overflows".into()))?;
        let hend = 16usize
            .checked_add(hlen)
            .ok_or_else(|| CheckpointError::Header("header length overflows".into()))?;
        need(hend)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut floats = 0usize;
        for e in &header.tensors {
            let n = e
                .shape
                .iter()
                .try_fold(1usize, |a, &b| a.checked_mul(b))
                .ok_or_else(|| CheckpointError::Header(format!("tensor {} too large", e.name)))?;
            floats = floats
                .checked_add(n)
                .ok_or_else(|| CheckpointError::Header("tensor sizes overflow".into()))?;
        }
        let body_end = floats
            .checked_mul(4)
            .and_then(|b| b.checked_add(hend))
            .ok_or_else(|| CheckpointError::Header("tensor sizes overflow".into()))?;
        need(body_end + 4)?;
        if bytes.len() != body_end + 4 {
            return Err(CheckpointError::Layout(format!(
                "{} trailing bytes after the checksum",
                bytes.len() - body_end - 4
            )));
        }
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut pos = hend;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = bytes[pos..pos + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos += 4 * n;
            tensors.push(Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Self { header, tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| io::IoError::Fs {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(io::write(path, self.to_bytes())?)
    }

    fn group(&self, prefix: &str) -> Result<ParamSet<f32>> {
        let mut set = ParamSet::new();
        let lead = format!("{prefix}/");
        for (e, t) in self.header.tensors.iter().zip(&self.tensors) {
            if let Some(name) = e.name.strip_prefix(&lead) {
                set.push(name, t.clone());
            }
        }
        Ok(set)
    }

    pub fn into_parts(self) -> Result<Parts> {
        let h = &self.header;
        if h.schedule != h.config.schedule_config() {
            return Err(CheckpointError::Header("schedule disagrees with the stored config".into()));
        }
        let net = |model: &str, spec: &MlpSpec| -> Result<(Mlp<f32>, ParamSet<f32>, Adam<f32>)> {
            let params = self.group(&format!("{model}/params"))?;
            let ema = self.group(&format!("{model}/ema"))?;
            let m = self.group(&format!("{model}/adam_m"))?;
            let v = self.group(&format!("{model}/adam_v"))?;
            let (config, step) = if model == "energy" {
                (h.energy_adam, h.energy_adam_step)
            } else {
                (h.init_adam, h.init_adam_step)
            };
            let net = Mlp::from_params(spec.clone(), params)?;
            for other in [&ema, &m, &v] {
                net.params().check_compatible(other)?;
            }
            Ok((net, ema, Adam { config, step, m, v }))
        };
        let (energy, energy_ema, energy_opt) = net("energy", &h.energy_spec)?;
        let (init, init_ema, init_opt) = net("init", &h.init_spec)?;
        Ok(Parts {
            config: h.config.clone(),
            energy,
            init,
            energy_ema,
            init_ema,
            energy_opt,
            init_opt,
            iter: h.iter,
        })
    }

    /// Sampling models, with EMA weights when `ema` is set.
    pub fn models(&self, ema: bool) -> Result<(EnergyModel<f32>, InitializerModel<f32>)> {
        let h = &self.header;
        let schedule = Arc::new(NoiseSchedule::new(h.schedule.clone())?);
        let which = if ema { "ema" } else { "params" };
        let e = Mlp::from_params(h.energy_spec.clone(), self.group(&format!("energy/{which}"))?)?;
        let i = Mlp::from_params(h.init_spec.clone(), self.group(&format!("init/{which}"))?)?;
        Ok((
            EnergyModel::from_net(e, schedule.clone())?,
            InitializerModel::from_net(i, schedule, h.init_target)?,
        ))
    }
}
