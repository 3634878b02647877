use super::RawSignal;
use crate::error::{AadError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const DEGENERATE_STD: f64 = 1e-8;

/// Overlapping windows `[trial_len, channels]`, one every `hop_s` seconds.
/// A signal shorter than one trial yields no segments.
pub fn segment_trials<T: Scalar>(signal: &RawSignal<T>, trial_len_s: f64, hop_s: f64) -> Result<Vec<Tensor<T>>> {
    if !(trial_len_s > 0.0 && hop_s > 0.0) {
        return Err(AadError::invalid("trial length and hop must be positive"));
    }
    let fs = signal.sample_rate() as f64;
    let len = (trial_len_s * fs).round() as usize;
    let hop = (hop_s * fs).round() as usize;
    if len == 0 || hop == 0 {
        return Err(AadError::invalid("trial length and hop must span at least one sample"));
    }
    let n = signal.n_samples();
    if n < len {
        return Ok(Vec::new());
    }
    let ch = signal.n_channels();
    let data = signal.samples().data();
    (0..=(n - len) / hop)
        .map(|k| Tensor::from_vec(&[len, ch], data[k * hop * ch..(k * hop + len) * ch].to_vec()))
        .collect()
}

/// Per column: zero mean, unit population variance. Columns with standard
/// deviation below 1e-8 become all-zero.
pub fn normalize_trial<T: Scalar>(eeg: &Tensor<T>) -> Result<Tensor<T>> {
    if eeg.rank() != 2 || eeg.shape()[0] < 2 {
        return Err(AadError::invalid(format!("trial must be [T >= 2, E], got {:?}", eeg.shape())));
    }
    let (t, e) = (eeg.shape()[0], eeg.shape()[1]);
    let mut out = eeg.clone();
    for c in 0..e {
        let col = || eeg.data()[c..].iter().step_by(e).map(|v| v.as_f64());
        let mean = col().sum::<f64>() / t as f64;
        let var = col().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
        let std = var.sqrt();
        for r in 0..t {
            let v = &mut out.data_mut()[r * e + c];
            *v = if std < DEGENERATE_STD { T::zero() } else { T::lit((v.as_f64() - mean) / std) };
        }
    }
    Ok(out)
}
