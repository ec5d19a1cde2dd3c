//! Named parameter storage shared by the networks, optimizers, EMA and
//! checkpoints.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use stylefat_autograd::{Scalar, Tensor};

use crate::error::{ensure, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Projection applied after every optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Constraint {
    Free,
    /// Clipped to `[0, 1]` (LIN/AdaLIN blend ratios).
    UnitInterval,
}

/// Ordered, named collection of trainable tensors.
///
/// Every stored tensor is a gradient-tracking leaf. Updating a value replaces
/// the leaf, so graphs built before the update keep the old values.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    constraints: Vec<Constraint>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            constraints: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, constraint: Constraint) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value.detach().requires_grad());
        self.constraints.push(constraint);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.values.iter().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn constraint(&self, id: ParamId) -> Constraint {
        self.constraints[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces one parameter's values (same shape), applying its constraint.
    pub fn set(&mut self, id: ParamId, data: Vec<T>) {
        let shape = self.values[id.0].shape().to_vec();
        let data = match self.constraints[id.0] {
            Constraint::Free => data,
            Constraint::UnitInterval => data
                .into_iter()
                .map(|v| v.max(T::zero()).min(T::one()))
                .collect(),
        };
        self.values[id.0] = Tensor::leaf(data, &shape);
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn ensure_same_layout(&self, other: &ParamStore<T>) -> Result<()> {
        ensure!(
            self.len() == other.len(),
            Shape,
            "parameter count {} vs {}",
            self.len(),
            other.len()
        );
        for ((na, a), (nb, b)) in self.iter().zip(other.iter()) {
            ensure!(na == nb, Shape, "parameter name {na} vs {nb}");
            ensure!(
                a.shape() == b.shape(),
                Shape,
                "parameter {na} shape {:?} vs {:?}",
                a.shape(),
                b.shape()
            );
        }
        Ok(())
    }

    /// Copies values from a store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        self.ensure_same_layout(other)?;
        for (dst, src) in self.values.iter_mut().zip(other.values.iter()) {
            *dst = src.detach().requires_grad();
        }
        Ok(())
    }

    /// Bitwise equality of every value.
    pub fn values_equal(&self, other: &ParamStore<T>) -> bool {
        self.ensure_same_layout(other).is_ok()
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .all(|(a, b)| {
                    // f32 -> f64 is exact, so comparing f64 bit patterns is bitwise equality
                    a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
                })
    }
}

/// He-normal initialisation for a layer followed by a leaky rectifier.
pub fn he_normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, slope: f64) -> Tensor<T> {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let std = gain / (fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect();
    Tensor::from_vec(data, shape)
}

/// Normal initialisation with an explicit standard deviation.
pub fn normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect();
    Tensor::from_vec(data, shape)
}
