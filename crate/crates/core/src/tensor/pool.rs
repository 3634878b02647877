//! Max pooling with independent window rules per axis.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{AadError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolAxis {
    /// Non-overlapping windows of this size; the remainder is discarded.
    Fixed(usize),
    /// Exactly this many windows spanning the whole axis.
    Adaptive(usize),
}

impl PoolAxis {
    pub fn output_len(&self, n: usize) -> usize {
        match *self {
            PoolAxis::Fixed(q) => n / q.max(1),
            PoolAxis::Adaptive(out) => out,
        }
    }

    pub fn windows(&self, n: usize) -> Result<Vec<(usize, usize)>> {
        match *self {
            PoolAxis::Fixed(0) | PoolAxis::Adaptive(0) => Err(AadError::invalid("pool size must be >= 1")),
            PoolAxis::Fixed(q) => {
                if n < q {
                    return Err(AadError::invalid(format!("pool window {q} longer than axis {n}")));
                }
                Ok((0..n / q).map(|i| (i * q, i * q + q)).collect())
            }
            PoolAxis::Adaptive(out) => Ok((0..out)
                .map(|i| {
                    let start = i * n / out;
                    let end = ((i + 1) * n).div_ceil(out);
                    (start, end.max(start + 1))
                })
                .collect()),
        }
    }

    pub fn is_identity(&self, n: usize) -> bool {
        match *self {
            PoolAxis::Fixed(q) => q == 1,
            PoolAxis::Adaptive(out) => out == n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub time: PoolAxis,
    pub feature: PoolAxis,
}

impl PoolSpec {
    pub fn fixed(time: usize, feature: usize) -> Self {
        PoolSpec { time: PoolAxis::Fixed(time), feature: PoolAxis::Fixed(feature) }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        (self.time.output_len(h), self.feature.output_len(w))
    }

    pub fn is_identity(&self, h: usize, w: usize) -> bool {
        self.time.is_identity(h) && self.feature.is_identity(w)
    }
}

/// Returns the pooled tensor and, per output element, the in-plane flat index
/// of the selected input. Ties go to the first maximum in row-major order.
pub fn maxpool2d_forward<T: Scalar>(x: &Tensor<T>, spec: &PoolSpec) -> Result<(Tensor<T>, Vec<u32>)> {
    if x.rank() != 4 {
        return Err(AadError::invalid(format!("maxpool2d expects rank 4, got {:?}", x.shape())));
    }
    let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let rows = spec.time.windows(h)?;
    let cols = spec.feature.windows(w)?;
    let (ho, wo) = (rows.len(), cols.len());
    let mut out = vec![T::zero(); b * c * ho * wo];
    let mut arg = vec![0u32; b * c * ho * wo];
    let planes = x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)).zip(arg.chunks_mut(ho * wo));
    for ((plane, out), arg) in planes {
        if let (PoolAxis::Fixed(qt), PoolAxis::Fixed(qf)) = (spec.time, spec.feature) {
            pool_plane_fixed(plane, w, qt, qf, wo, out, arg);
            continue;
        }
        let cells = out.iter_mut().zip(arg.iter_mut());
        let windows = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c)));
        for (((r0, r1), (c0, c1)), (bv, ba)) in windows.zip(cells) {
            let mut best = plane[r0 * w + c0];
            let mut at = r0 * w + c0;
            for r in r0..r1 {
                let row = &plane[r * w..r * w + c1];
                for (q, &v) in row.iter().enumerate().skip(c0) {
                    // select form keeps the scan free of data-dependent branches
                    let gt = v > best;
                    best = if gt { v } else { best };
                    at = if gt { r * w + q } else { at };
                }
            }
            *bv = best;
            *ba = at as u32;
        }
    }
    Ok((Tensor::from_vec(&[b, c, ho, wo], out)?, arg))
}

/// Non-overlapping windows: each window row is reduced on its own, then
/// rows are merged elementwise, which the compiler vectorises.
fn pool_plane_fixed<T: Scalar>(plane: &[T], w: usize, qt: usize, qf: usize, wo: usize, out: &mut [T], arg: &mut [u32]) {
    for (i, (best, at)) in out.chunks_exact_mut(wo).zip(arg.chunks_exact_mut(wo)).enumerate() {
        for dr in 0..qt {
            let r = i * qt + dr;
            let row = &plane[r * w..r * w + wo * qf];
            let base = (r * w) as u32;
            for (j, (win, (bv, ba))) in row.chunks_exact(qf).zip(best.iter_mut().zip(at.iter_mut())).enumerate() {
                let mut m = win[0];
                let mut k = 0u32;
                for (q, &v) in win.iter().enumerate().skip(1) {
                    let gt = v > m;
                    m = if gt { v } else { m };
                    k = if gt { q as u32 } else { k };
                }
                let idx = base + (j * qf) as u32 + k;
                let take = dr == 0 || m > *bv;
                *bv = if take { m } else { *bv };
                *ba = if take { idx } else { *ba };
            }
        }
    }
}

pub fn maxpool2d_backward<T: Scalar>(gy: &Tensor<T>, argmax: &[u32], in_shape: &[usize]) -> Tensor<T> {
    let plane_in = in_shape[2] * in_shape[3];
    let plane_out = gy.shape()[2] * gy.shape()[3];
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (i, (&g, &a)) in gy.data().iter().zip(argmax).enumerate() {
        d[(i / plane_out) * plane_in + a as usize] += g;
    }
    dx
}
