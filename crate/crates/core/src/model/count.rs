use std::fmt;

use serde::Serialize;

use super::PAPER_PARAM_TOTAL;
use crate::scalar::Scalar;
use crate::tensor::{ParamKind, ParamStore};

/// Learnable scalars of one layer, grouped by kind.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub layer: String,
    pub weights: usize,
    pub biases: usize,
    pub bn: usize,
}

impl LayerCount {
    pub fn total(&self) -> usize {
        self.weights + self.biases + self.bn
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub layers: Vec<LayerCount>,
    pub total: usize,
    /// Weight tensors only; biases and batch-norm affine terms are excluded.
    pub prunable: usize,
    pub reference_total: usize,
    pub delta_to_reference: i64,
}

/// Layer key of a parameter name: everything before the last component
/// group (`eeg.layer1.conv.weight` -> `eeg.layer1`, `fc2.bias` -> `fc2`).
fn layer_of(name: &str) -> &str {
    for marker in [".conv.", ".bn.", ".fwd.", ".bwd."] {
        if let Some(i) = name.find(marker) {
            return &name[..i];
        }
    }
    name.rsplit_once('.').map_or(name, |(l, _)| l)
}

impl ParamReport {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        let mut layers: Vec<LayerCount> = Vec::new();
        for p in store.iter() {
            let key = layer_of(&p.name);
            if layers.last().is_none_or(|l| l.layer != key) {
                layers.push(LayerCount { layer: key.to_string(), weights: 0, biases: 0, bn: 0 });
            }
            let entry = layers.last_mut().unwrap();
            let n = p.value.numel();
            match p.kind {
                ParamKind::Weight => entry.weights += n,
                ParamKind::Bias => entry.biases += n,
                ParamKind::BnScale | ParamKind::BnShift => entry.bn += n,
            }
        }
        let total = layers.iter().map(LayerCount::total).sum();
        let prunable = layers.iter().map(|l| l.weights).sum();
        ParamReport {
            layers,
            total,
            prunable,
            reference_total: PAPER_PARAM_TOTAL,
            delta_to_reference: total as i64 - PAPER_PARAM_TOTAL as i64,
        }
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>9} {:>7} {:>5} {:>9}", "layer", "weights", "bias", "bn", "total")?;
        for l in &self.layers {
            writeln!(f, "{:<16} {:>9} {:>7} {:>5} {:>9}", l.layer, l.weights, l.biases, l.bn, l.total())?;
        }
        writeln!(f, "total learnable parameters: {}", self.total)?;
        writeln!(f, "prunable (weights only):    {}", self.prunable)?;
        write!(
            f,
            "reference total {}: delta {:+}",
            self.reference_total, self.delta_to_reference
        )
    }
}
