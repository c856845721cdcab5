use std::sync::atomic::{AtomicU64, Ordering};

use super::{NdError, Real, Result, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Named parameter tensors with a stable flattening order.
///
/// Every mutable access bumps `version`, which lets a [`super::Tape`] detect
/// that the weights it recorded have since changed.
#[derive(Debug)]
pub struct ParamSet<R: Real> {
    id: u64,
    version: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> Clone for ParamSet<R> {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            version: self.version,
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl<R: Real> PartialEq for ParamSet<R> {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl<R: Real> Default for ParamSet<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            version: 0,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor. Panics on a duplicate name, which is a construction bug.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<R>) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name `{name}`");
        self.names.push(name);
        self.tensors.push(tensor);
        self.version += 1;
        self.tensors.len() - 1
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor<R> {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| NdError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<R>> {
        Ok(&self.tensors[self.index_of(name)?])
    }

    /// Mutable access to all tensors; counts as a mutation.
    pub fn tensors_mut(&mut self) -> &mut [Tensor<R>] {
        self.version += 1;
        &mut self.tensors
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<R> {
        self.version += 1;
        &mut self.tensors[i]
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            id: fresh_id(),
            version: 0,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Concatenates every tensor in declaration order.
    pub fn flatten(&self) -> Vec<R> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn unflatten(&mut self, flat: &[R]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(NdError::Shape {
                op: "unflatten",
                lhs: vec![self.num_scalars()],
                rhs: vec![flat.len()],
            });
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.names != other.names {
            return Err(NdError::Shape {
                op: "param layout",
                lhs: vec![self.len()],
                rhs: vec![other.len()],
            });
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            a.check_same(b, "param layout")?;
        }
        Ok(())
    }

    /// Euclidean norm over every scalar.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: R) {
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v = *v * s;
            }
        }
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: R, other: &Self) -> Result<()> {
        self.check_compatible(other)?;
        let others = other.tensors.clone();
        for (a, b) in self.tensors_mut().iter_mut().zip(&others) {
            a.axpy(s, b)?;
        }
        Ok(())
    }
}
