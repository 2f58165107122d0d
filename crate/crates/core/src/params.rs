//! Named parameter storage and the per-pass forward context.

use std::collections::BTreeMap;

use fxmm_tensor::{Gradients, Mode, Scalar, Tape, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::seed::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered parameter list. Registration order is the serialisation
/// order and the optimizer-state order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        grads.accumulate_into(&mut self.tensors)?;
        Ok(())
    }

    /// First parameter holding a non-finite value or gradient.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter()
            .find(|(_, _, t)| {
                t.data().iter().any(|v| !v.is_finite())
                    || t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()))
            })
            .map(|(_, n, _)| n)
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn load_values(&mut self, other: &Params<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter layout differs".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint("parameter shape differs".into()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Glorot-uniform matrix of shape `[fan_in × fan_out]`.
pub fn glorot<T: Scalar>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape covers data")
}

/// Normal samples with the given std, redrawn until inside ±2 std.
pub fn truncated_normal<T: Scalar>(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape covers data")
}

/// Whether gates draw exploration noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteMode {
    Train,
    Infer,
}

/// Everything one forward pass needs: the tape, lazily bound parameters,
/// the gate noise stream and expert-usage counters.
pub struct Forward<'a, T: Scalar> {
    pub tape: Tape<T>,
    params: &'a Params<T>,
    bound: Vec<Option<Var>>,
    pub route: RouteMode,
    noise: Option<Rng>,
    usage: BTreeMap<String, Vec<u64>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(params: &'a Params<T>, mode: Mode, route: RouteMode, noise: Option<Rng>) -> Self {
        Self {
            tape: Tape::new(mode),
            params,
            bound: vec![None; params.len()],
            route,
            noise,
            usage: BTreeMap::new(),
        }
    }

    /// Inference tape with deterministic routing.
    pub fn inference(params: &'a Params<T>) -> Self {
        Self::new(params, Mode::Inference, RouteMode::Infer, None)
    }

    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.tape = std::mem::replace(&mut self.tape, Tape::inference()).with_parallel(parallel);
        self
    }

    pub fn params(&self) -> &'a Params<T> {
        self.params
    }

    /// Tape variable for a parameter, bound on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(id.0, self.params.get(id));
        self.bound[id.0] = Some(v);
        v
    }

    /// Standard-normal draws for gate noise; `None` when no stream is attached.
    pub fn normal_draws(&mut self, n: usize) -> Option<Vec<T>> {
        let rng = self.noise.as_mut()?;
        Some(
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::lit(z)
                })
                .collect(),
        )
    }

    pub fn record_usage(&mut self, site: &str, counts: &[u64]) {
        let entry = self
            .usage
            .entry(site.to_string())
            .or_insert_with(|| vec![0; counts.len()]);
        entry.iter_mut().zip(counts).for_each(|(a, b)| *a += b);
    }

    pub fn usage(&self) -> &BTreeMap<String, Vec<u64>> {
        &self.usage
    }

    /// Returns the noise stream and usage counters.
    pub fn finish(self) -> (Tape<T>, Option<Rng>, BTreeMap<String, Vec<u64>>) {
        (self.tape, self.noise, self.usage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn truncated_normal_respects_clip() {
        let mut rng = Rng::seed_from_u64(1);
        let t: Tensor<f64> = truncated_normal(&mut rng, vec![100, 20], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04 + 1e-12));
        let mean = t.data().iter().sum::<f64>() / 2000.0;
        assert!(mean.abs() < 0.003);
    }

    #[test]
    fn params_bind_once_per_pass() {
        let mut params = Params::<f64>::new();
        let id = params.add("w", Tensor::zeros(vec![2]));
        let mut fwd = Forward::new(&params, Mode::Training, RouteMode::Infer, None);
        let a = fwd.p(id);
        let b = fwd.p(id);
        assert_eq!(a, b);
        assert_eq!(fwd.tape.len(), 1);
    }
}
