//! Named learnable parameters plus batch-norm running statistics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{BatchNormStats, Tape, Tensor, Var};
use crate::error::{AadError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamKind {
    /// Only weight tensors are subject to magnitude pruning.
    pub fn is_prunable(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    bn: Vec<(String, BatchNormStats<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), bn: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), kind, value, grad: None });
        ParamId(self.params.len() - 1)
    }

    pub fn add_bn(&mut self, name: impl Into<String>, channels: usize) -> BnId {
        self.bn.push((name.into(), BatchNormStats::new(channels)));
        BnId(self.bn.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn bn_stats(&self, id: BnId) -> &BatchNormStats<T> {
        &self.bn[id.0].1
    }

    pub fn bn_stats_mut(&mut self, id: BnId) -> &mut BatchNormStats<T> {
        &mut self.bn[id.0].1
    }

    /// Total learnable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on the tape as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect()
    }

    /// Places every parameter on the tape as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), false)).collect()
    }

    /// Copies of all running statistics, in registration order.
    pub fn bn_snapshot(&self) -> Vec<BatchNormStats<T>> {
        self.bn.iter().map(|(_, s)| s.clone()).collect()
    }

    pub fn restore_bn(&mut self, stats: Vec<BatchNormStats<T>>) {
        assert_eq!(stats.len(), self.bn.len(), "running-statistics count changed");
        for ((_, dst), src) in self.bn.iter_mut().zip(stats) {
            *dst = src;
        }
    }

    /// Moves leaf gradients from the tape into the store. Parameters the
    /// forward pass never touched receive a zero gradient.
    pub fn collect_grads(&mut self, tape: &mut Tape<T>, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            p.grad = Some(tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())));
        }
    }

    /// Parameters and running statistics as named tensors, in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (name, stats) in &self.bn {
            let c = stats.running_mean.len();
            out.push((format!("{name}.running_mean"), Tensor::from_vec(&[c], stats.running_mean.clone()).unwrap()));
            out.push((format!("{name}.running_var"), Tensor::from_vec(&[c], stats.running_var.clone()).unwrap()));
        }
        out
    }

    /// Overwrites every parameter and running statistic from `tensors`.
    /// Missing, surplus or mis-shaped entries are errors.
    pub fn load_named(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut map: HashMap<String, Tensor<T>> = tensors.into_iter().collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = map.remove(name).ok_or_else(|| AadError::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != shape {
                return Err(AadError::DimensionMismatch(format!(
                    "tensor {name}: checkpoint {:?}, model {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        for p in &mut self.params {
            p.value = take(&p.name, p.value.shape())?;
        }
        for (name, stats) in &mut self.bn {
            let c = stats.running_mean.len();
            stats.running_mean = take(&format!("{name}.running_mean"), &[c])?.into_data();
            stats.running_var = take(&format!("{name}.running_var"), &[c])?.into_data();
        }
        if let Some(extra) = map.keys().next() {
            return Err(AadError::Format(format!("checkpoint has unexpected tensor {extra}")));
        }
        Ok(())
    }
}
