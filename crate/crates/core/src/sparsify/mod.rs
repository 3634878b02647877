//! Per-layer magnitude pruning, masked fine-tuning and sparsity accounting.
//! Only weight tensors are pruned; biases and batch-norm terms never are.

mod sparse_checkpoint;

pub use sparse_checkpoint::{load_sparse_checkpoint, read_sparse_checkpoint, save_sparse_checkpoint, write_sparse_checkpoint, SPARSE_MAGIC};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AadError, Result};
use crate::scalar::Scalar;
use crate::synth::TrialSource;
use crate::tensor::ParamStore;
use crate::train::{EpochHook, EpochMetrics, FitOutcome, SplitPlan, Trainer};

/// Keep-flags for `weights`: the `floor(s · n)` smallest magnitudes are
/// dropped, ties going to the lower flat index.
pub fn magnitude_mask<T: Scalar>(weights: &[T], sparsity: f64) -> Result<Vec<bool>> {
    check_sparsity(sparsity)?;
    let n = weights.len();
    let drop = (sparsity * n as f64 + 1e-9).floor() as usize;
    let mut keep = vec![true; n];
    if drop == 0 {
        return Ok(keep);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mag = |i: usize| weights[i].as_f64().abs();
    order.select_nth_unstable_by(drop - 1, |&a, &b| mag(a).total_cmp(&mag(b)).then(a.cmp(&b)));
    for &i in &order[..drop] {
        keep[i] = false;
    }
    Ok(keep)
}

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(AadError::invalid(format!("sparsity must lie in [0, 1), got {s}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    pub name: String,
    pub keep: Vec<bool>,
}

impl LayerMask {
    pub fn pruned(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }
}

/// One mask per prunable tensor, in parameter-store order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub sparsity: f64,
    pub layers: Vec<LayerMask>,
}

impl PruneMask {
    /// Keep-flags aligned with every tensor in `store` (`None` = not pruned),
    /// the form the optimizer consumes.
    pub fn keep_vectors<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Vec<Option<Vec<bool>>>> {
        let mut out: Vec<Option<Vec<bool>>> = vec![None; store.len()];
        for l in &self.layers {
            let id = store.find(&l.name).ok_or_else(|| AadError::invalid(format!("mask names unknown tensor {}", l.name)))?;
            let p = store.get(id);
            if !p.kind.is_prunable() {
                return Err(AadError::invalid(format!("{} is not a weight tensor and cannot be masked", l.name)));
            }
            if p.value.numel() != l.keep.len() {
                return Err(AadError::invalid(format!(
                    "mask for {} has {} entries, tensor {:?} has {}",
                    l.name,
                    l.keep.len(),
                    p.value.shape(),
                    p.value.numel()
                )));
            }
            out[id.0] = Some(l.keep.clone());
        }
        Ok(out)
    }

    pub fn pruned(&self) -> usize {
        self.layers.iter().map(LayerMask::pruned).sum()
    }

    pub fn prunable(&self) -> usize {
        self.layers.iter().map(|l| l.keep.len()).sum()
    }
}

/// Per-layer masks at sparsity `s` for every weight tensor in `store`.
pub fn compute_prune_mask<T: Scalar>(store: &ParamStore<T>, sparsity: f64) -> Result<PruneMask> {
    check_sparsity(sparsity)?;
    let layers = store
        .iter()
        .filter(|p| p.kind.is_prunable())
        .map(|p| Ok(LayerMask { name: p.name.clone(), keep: magnitude_mask(p.value.data(), sparsity)? }))
        .collect::<Result<_>>()?;
    Ok(PruneMask { sparsity, layers })
}

/// Zeroes the masked weights in `store`.
pub fn apply_mask<T: Scalar>(store: &mut ParamStore<T>, mask: &PruneMask) -> Result<()> {
    let keep = mask.keep_vectors(store)?;
    for (p, k) in store.iter_mut().zip(keep) {
        if let Some(k) = k {
            for (w, keep) in p.value.data_mut().iter_mut().zip(k) {
                if !keep {
                    *w = T::zero();
                }
            }
        }
    }
    Ok(())
}

/// Prunes the trainer's model and installs the mask for later updates
/// (Adam moments at masked positions are cleared too).
pub fn prune_trainer<T: Scalar>(trainer: &mut Trainer<T>, sparsity: f64) -> Result<PruneMask> {
    let mask = compute_prune_mask(trainer.model.params(), sparsity)?;
    let keep = mask.keep_vectors(trainer.model.params())?;
    trainer.set_mask(Some(keep))?;
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSparsity {
    pub name: String,
    pub total: usize,
    pub zeros: usize,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparsityReport {
    /// Weight tensors only.
    pub layers: Vec<LayerSparsity>,
    pub prunable_total: usize,
    pub prunable_zeros: usize,
    /// Zero fraction over weight tensors; biases and batch norm are
    /// excluded from both numerator and denominator.
    pub global_sparsity: f64,
    pub params_total: usize,
    pub params_nonzero: usize,
}

pub fn sparsity_report<T: Scalar>(store: &ParamStore<T>) -> SparsityReport {
    let zeros = |d: &[T]| d.iter().filter(|v| **v == T::zero()).count();
    let layers: Vec<LayerSparsity> = store
        .iter()
        .filter(|p| p.kind.is_prunable())
        .map(|p| {
            let (total, z) = (p.value.numel(), zeros(p.value.data()));
            LayerSparsity { name: p.name.clone(), total, zeros: z, sparsity: z as f64 / total.max(1) as f64 }
        })
        .collect();
    let prunable_total: usize = layers.iter().map(|l| l.total).sum();
    let prunable_zeros: usize = layers.iter().map(|l| l.zeros).sum();
    let params_total = store.count();
    let all_zeros: usize = store.iter().map(|p| zeros(p.value.data())).sum();
    SparsityReport {
        layers,
        prunable_total,
        prunable_zeros,
        global_sparsity: if prunable_total == 0 { 0.0 } else { prunable_zeros as f64 / prunable_total as f64 },
        params_total,
        params_nonzero: params_total - all_zeros,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FinetuneSchedule {
    /// Full target sparsity from the first epoch.
    OneShot { sparsity: f64 },
    /// Linear ramp from 0 to `sparsity` over `ramp_epochs`, then constant.
    Sequential { sparsity: f64, ramp_epochs: usize },
}

impl FinetuneSchedule {
    /// The ramp spans the first half of `epochs` (40 of 80).
    pub fn sequential(sparsity: f64, epochs: usize) -> Self {
        FinetuneSchedule::Sequential { sparsity, ramp_epochs: (epochs / 2).max(1) }
    }

    pub fn target(&self) -> f64 {
        match *self {
            FinetuneSchedule::OneShot { sparsity } | FinetuneSchedule::Sequential { sparsity, .. } => sparsity,
        }
    }

    /// Sparsity in force during 1-based `epoch`.
    pub fn sparsity_at(&self, epoch: usize) -> f64 {
        match *self {
            FinetuneSchedule::OneShot { sparsity } => sparsity,
            FinetuneSchedule::Sequential { sparsity, ramp_epochs } => {
                sparsity * epoch.min(ramp_epochs) as f64 / ramp_epochs.max(1) as f64
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_sparsity(self.target())?;
        if let FinetuneSchedule::Sequential { ramp_epochs: 0, .. } = self {
            return Err(AadError::invalid("sequential ramp needs at least one epoch"));
        }
        Ok(())
    }
}

/// Sparsity state after one fine-tuning epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSparsity {
    pub epoch: usize,
    pub scheduled: f64,
    pub report: SparsityReport,
}

struct MaskHook {
    schedule: FinetuneSchedule,
    start_epoch: usize,
    current: Option<f64>,
    mask: Option<PruneMask>,
    history: Vec<EpochSparsity>,
}

impl<T: Scalar> EpochHook<T> for MaskHook {
    fn before_epoch(&mut self, epoch: usize, trainer: &mut Trainer<T>) -> Result<()> {
        let s = self.schedule.sparsity_at(epoch - self.start_epoch);
        if self.current != Some(s) {
            self.mask = Some(prune_trainer(trainer, s)?);
            self.current = Some(s);
        }
        Ok(())
    }

    fn after_epoch(&mut self, epoch: usize, trainer: &mut Trainer<T>, _: &[EpochMetrics]) -> Result<()> {
        let store = trainer.model.params();
        let mask = self.mask.as_ref().expect("mask installed before the epoch");
        for l in &mask.layers {
            let p = store.get(store.find(&l.name).expect("mask built from this store"));
            if let Some(j) = l.keep.iter().zip(p.value.data()).position(|(k, w)| !k && *w != T::zero()) {
                return Err(AadError::Format(format!("epoch {epoch}: pruned weight {}[{j}] came back to life", l.name)));
            }
        }
        self.history.push(EpochSparsity {
            epoch,
            scheduled: self.current.unwrap_or(0.0),
            report: sparsity_report(store),
        });
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    pub fit: FitOutcome,
    pub sparsity: Vec<EpochSparsity>,
    pub mask: PruneMask,
}

/// Fine-tunes an already trained model under `schedule` for `epochs`
/// epochs. After every epoch the masked weights are verified to be exactly
/// zero; a violation aborts with an error.
pub fn finetune<T: Scalar, S: TrialSource>(
    trainer: &mut Trainer<T>,
    data: &S,
    plan: &SplitPlan,
    schedule: FinetuneSchedule,
    epochs: usize,
    out: Option<&Path>,
) -> Result<FinetuneOutcome> {
    schedule.validate()?;
    let mut hook = MaskHook { schedule, start_epoch: trainer.epoch(), current: None, mask: None, history: Vec::new() };
    let fit = trainer.fit(data, plan, epochs, out, &mut hook)?;
    let mask = hook.mask.ok_or_else(|| AadError::invalid("fine-tuning needs at least one epoch"))?;
    Ok(FinetuneOutcome { fit, sparsity: hook.history, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamKind, Tensor};

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("a.weight", ParamKind::Weight, Tensor::from_vec(&[2, 3], vec![0.3, -0.1, 0.5, 0.2, -0.4, 0.05]).unwrap());
        s.add("a.bias", ParamKind::Bias, Tensor::from_vec(&[3], vec![0.0, 0.01, -0.02]).unwrap());
        s.add("bn.gamma", ParamKind::BnScale, Tensor::from_vec(&[3], vec![1e-6, 1.0, 1.0]).unwrap());
        s.add("b.weight", ParamKind::Weight, Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap());
        s
    }

    #[test]
    fn smallest_magnitudes_go_first() {
        let keep = magnitude_mask(&[0.1, -0.5, 0.2, -0.05], 0.5).unwrap();
        assert_eq!(keep, [false, true, true, false]);
    }

    #[test]
    fn zero_sparsity_keeps_everything() {
        assert!(magnitude_mask(&[0.0, 1.0, -2.0], 0.0).unwrap().iter().all(|k| *k));
    }

    #[test]
    fn ties_break_by_flat_index() {
        assert_eq!(magnitude_mask(&[1.0, -1.0, 1.0, -1.0], 0.5).unwrap(), [false, false, true, true]);
    }

    #[test]
    fn full_sparsity_rejected() {
        assert!(matches!(magnitude_mask(&[1.0], 1.0), Err(AadError::InvalidArgument(_))));
        assert!(compute_prune_mask(&store(), 1.2).is_err());
    }

    #[test]
    fn only_weights_are_masked() {
        let mut s = store();
        let mask = compute_prune_mask(&s, 0.5).unwrap();
        assert_eq!(mask.layers.iter().map(|l| l.name.as_str()).collect::<Vec<_>>(), ["a.weight", "b.weight"]);
        assert_eq!(mask.pruned(), 3 + 1);
        apply_mask(&mut s, &mask).unwrap();
        let r = sparsity_report(&s);
        assert_eq!(r.prunable_zeros, mask.pruned());
        assert_eq!(r.prunable_total, 9);
        assert_eq!(s.get(s.find("a.weight").unwrap()).value.data(), &[0.3, 0.0, 0.5, 0.0, -0.4, 0.0]);
        assert_eq!(s.get(s.find("bn.gamma").unwrap()).value.data()[0], 1e-6);
        // bias zero is counted in the model total but not in prunable sparsity
        assert_eq!(r.params_nonzero, r.params_total - 4 - 1);
    }

    #[test]
    fn mask_shape_must_match() {
        let mut s = store();
        let mut mask = compute_prune_mask(&s, 0.5).unwrap();
        mask.layers[1].keep.push(true);
        assert!(matches!(apply_mask(&mut s, &mask), Err(AadError::InvalidArgument(_))));
        let bias = PruneMask { sparsity: 0.5, layers: vec![LayerMask { name: "a.bias".into(), keep: vec![false; 3] }] };
        assert!(apply_mask(&mut s, &bias).is_err());
    }

    #[test]
    fn recomputing_after_apply_is_a_superset() {
        let mut s = store();
        let m1 = compute_prune_mask(&s, 0.5).unwrap();
        apply_mask(&mut s, &m1).unwrap();
        let m2 = compute_prune_mask(&s, 0.5).unwrap();
        for (a, b) in m1.layers.iter().zip(&m2.layers) {
            assert!(a.keep.iter().zip(&b.keep).all(|(k1, k2)| *k1 || !*k2));
        }
    }

    #[test]
    fn schedules() {
        let one = FinetuneSchedule::OneShot { sparsity: 0.5 };
        assert_eq!(one.sparsity_at(1), 0.5);
        let seq = FinetuneSchedule::sequential(0.8, 80);
        assert_eq!(seq, FinetuneSchedule::Sequential { sparsity: 0.8, ramp_epochs: 40 });
        assert!((seq.sparsity_at(20) - 0.4).abs() < 1e-15);
        assert_eq!(seq.sparsity_at(40), 0.8);
        assert_eq!(seq.sparsity_at(80), 0.8);
        let ramp: Vec<f64> = (1..=80).map(|e| seq.sparsity_at(e)).collect();
        assert!(ramp.windows(2).all(|w| w[0] <= w[1]));
    }
}
