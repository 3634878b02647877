//! Stride-1 dilated 2-D cross-correlation over `[batch, channel, height, width]`.
//!
//! Wide-channel layers run as one GEMM per kernel tap over a zero-padded copy
//! of the input (output rows are laid out at the padded width and cropped
//! afterwards). Single-channel inputs use an explicit im2col matrix instead,
//! since a per-tap GEMM with one input channel degenerates to rank-1 updates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::direct::{pack_weights, N_TILE};
use super::Tensor;
use crate::error::{AadError, Result};
use crate::scalar::{gemm, MatRef, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (time, feature)
    pub kernel: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        dilation: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        if in_channels == 0
            || out_channels == 0
            || kernel.0 == 0
            || kernel.1 == 0
            || dilation.0 == 0
            || dilation.1 == 0
        {
            return Err(AadError::invalid("conv2d channels, kernel and dilation must be >= 1"));
        }
        Ok(Conv2dSpec { in_channels, out_channels, kernel, dilation, padding })
    }

    /// Output extents for a `h x w` input: `in + 2p - d(k-1)` per axis.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |n: usize, k: usize, d: usize, p: usize| -> Result<usize> {
            let span = d * (k - 1);
            let padded = n + 2 * p;
            if padded <= span {
                return Err(AadError::invalid(format!(
                    "conv2d output extent non-positive: input {n}, padding {p}, kernel {k}, dilation {d}"
                )));
            }
            Ok(padded - span)
        };
        Ok((
            axis(h, self.kernel.0, self.dilation.0, self.padding.0)?,
            axis(w, self.kernel.1, self.dilation.1, self.padding.1)?,
        ))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    wp: usize,
    /// Per-channel stride of the padded buffer, including the read-overrun tail.
    chan: usize,
    /// Output row count at padded width: `ho * wp`.
    n: usize,
}

impl Geometry {
    fn new(spec: &Conv2dSpec, h: usize, w: usize) -> Result<Self> {
        let (ho, wo) = spec.output_extent(h, w)?;
        let hp = h + 2 * spec.padding.0;
        let wp = w + 2 * spec.padding.1;
        let tail = (spec.kernel.1 - 1) * spec.dilation.1;
        Ok(Geometry {
            cin: spec.in_channels,
            cout: spec.out_channels,
            h,
            w,
            ho,
            wo,
            wp,
            chan: hp * wp + tail,
            n: ho * wp,
        })
    }

    fn tap_offset(&self, spec: &Conv2dSpec, ki: usize, kj: usize) -> usize {
        ki * spec.dilation.0 * self.wp + kj * spec.dilation.1
    }
}

fn use_im2col(spec: &Conv2dSpec) -> bool {
    spec.in_channels < 4
}

fn check_input<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, spec: &Conv2dSpec) -> Result<()> {
    if x.rank() != 4 || x.shape()[1] != spec.in_channels {
        return Err(AadError::invalid(format!(
            "conv2d expects [batch, {}, h, w], got {:?}",
            spec.in_channels,
            x.shape()
        )));
    }
    if w.shape() != spec.weight_shape() {
        return Err(AadError::ShapeMismatch { expected: spec.weight_shape().to_vec(), actual: w.shape().to_vec() });
    }
    if b.shape() != [spec.out_channels] {
        return Err(AadError::ShapeMismatch { expected: vec![spec.out_channels], actual: b.shape().to_vec() });
    }
    Ok(())
}

fn pad_sample<T: Scalar>(x: &[T], g: &Geometry, spec: &Conv2dSpec) -> Vec<T> {
    let mut out = vec![T::zero(); g.cin * g.chan];
    let (ph, pw) = spec.padding;
    for c in 0..g.cin {
        for r in 0..g.h {
            let src = &x[(c * g.h + r) * g.w..(c * g.h + r + 1) * g.w];
            let dst = c * g.chan + (r + ph) * g.wp + pw;
            out[dst..dst + g.w].copy_from_slice(src);
        }
    }
    out
}

/// Column matrix `[cin*kh*kw, ho*wo]`, row order matching the weight layout.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, spec: &Conv2dSpec) -> Vec<T> {
    let (kh, kw) = spec.kernel;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = spec.padding;
    let cols_n = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.cin * kh * kw * cols_n];
    for c in 0..g.cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let base = row * cols_n;
                let shift_w = kj * dw;
                // valid output columns: 0 <= ow + shift_w - pw < w
                let lo = pw.saturating_sub(shift_w);
                let hi = (g.w + pw).saturating_sub(shift_w).min(g.wo);
                if lo >= hi {
                    continue;
                }
                for oh in 0..g.ho {
                    let ih = oh + ki * dh;
                    if ih < ph || ih - ph >= g.h {
                        continue;
                    }
                    let ih = ih - ph;
                    let src = (c * g.h + ih) * g.w + lo + shift_w - pw;
                    let dst = base + oh * g.wo + lo;
                    cols[dst..dst + hi - lo].copy_from_slice(&x[src..src + hi - lo]);
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], dx: &mut [T], g: &Geometry, spec: &Conv2dSpec) {
    let (kh, kw) = spec.kernel;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = spec.padding;
    let cols_n = g.ho * g.wo;
    for c in 0..g.cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let base = row * cols_n;
                let shift_w = kj * dw;
                let lo = pw.saturating_sub(shift_w);
                let hi = (g.w + pw).saturating_sub(shift_w).min(g.wo);
                if lo >= hi {
                    continue;
                }
                for oh in 0..g.ho {
                    let ih = oh + ki * dh;
                    if ih < ph || ih - ph >= g.h {
                        continue;
                    }
                    let ih = ih - ph;
                    let dst = (c * g.h + ih) * g.w + lo + shift_w - pw;
                    let src = base + oh * g.wo + lo;
                    for (d, s) in dx[dst..dst + hi - lo].iter_mut().zip(&cols[src..src + hi - lo]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

fn forward_sample<T: Scalar>(x: &[T], w: &[T], bias: &[T], g: &Geometry, spec: &Conv2dSpec, y: &mut [T]) {
    let plane = g.ho * g.wo;
    if use_im2col(spec) {
        let cols = im2col(x, g, spec);
        let k = spec.fan_in();
        gemm(MatRef::row_major(w, g.cout, k), MatRef::row_major(&cols, k, plane), y, plane, false);
    } else {
        let xp = pad_sample(x, g, spec);
        let mut yp = vec![T::zero(); g.cout * g.n];
        let taps = spec.taps();
        for ki in 0..spec.kernel.0 {
            for kj in 0..spec.kernel.1 {
                let tap = ki * spec.kernel.1 + kj;
                let off = g.tap_offset(spec, ki, kj);
                let a = MatRef { data: &w[tap..], rows: g.cout, cols: g.cin, row_stride: g.cin * taps, col_stride: taps };
                let b = MatRef { data: &xp[off..], rows: g.cin, cols: g.n, row_stride: g.chan, col_stride: 1 };
                gemm(a, b, &mut yp, g.n, tap > 0);
            }
        }
        for co in 0..g.cout {
            for oh in 0..g.ho {
                let src = co * g.n + oh * g.wp;
                let dst = co * plane + oh * g.wo;
                y[dst..dst + g.wo].copy_from_slice(&yp[src..src + g.wo]);
            }
        }
    }
    for co in 0..g.cout {
        let b = bias[co];
        for v in &mut y[co * plane..(co + 1) * plane] {
            *v += b;
        }
    }
}

/// Input offsets of every (channel, tap) pair, in weight order.
fn direct_offsets(g: &Geometry, spec: &Conv2dSpec) -> Vec<usize> {
    let mut out = Vec::with_capacity(spec.fan_in());
    for c in 0..g.cin {
        for ki in 0..spec.kernel.0 {
            for kj in 0..spec.kernel.1 {
                out.push(c * g.chan + g.tap_offset(spec, ki, kj));
            }
        }
    }
    out
}

fn direct_forward_sample<T: Scalar>(
    x: &[T],
    wpack: &[T],
    offsets: &[usize],
    bias: &[T],
    g: &Geometry,
    spec: &Conv2dSpec,
    y: &mut [T],
) {
    let n_pad = g.n.div_ceil(N_TILE) * N_TILE;
    let mut xp = pad_sample(x, g, spec);
    let need = offsets.iter().copied().max().unwrap_or(0) + n_pad;
    if xp.len() < need {
        xp.resize(need, T::zero());
    }
    let mut yp = vec![T::zero(); g.cout * n_pad];
    let ran = T::direct_corr(&xp, offsets, wpack, g.cout, n_pad, &mut yp, n_pad);
    debug_assert!(ran, "direct kernel vanished between detection and use");
    let plane = g.ho * g.wo;
    for co in 0..g.cout {
        let b = bias[co];
        for oh in 0..g.ho {
            let src = co * n_pad + oh * g.wp;
            let dst = co * plane + oh * g.wo;
            for (d, s) in y[dst..dst + g.wo].iter_mut().zip(&yp[src..src + g.wo]) {
                *d = *s + b;
            }
        }
    }
}

/// Weight gradient of one sample through the direct kernel.
fn direct_wgrad_sample<T: Scalar>(x: &[T], gy: &[T], offsets: &[usize], g: &Geometry, spec: &Conv2dSpec) -> Vec<T> {
    let n_pad = g.n.div_ceil(N_TILE) * N_TILE;
    let mut xp = pad_sample(x, g, spec);
    let need = offsets.iter().copied().max().unwrap_or(0) + n_pad;
    if xp.len() < need {
        xp.resize(need, T::zero());
    }
    let mut gp = vec![T::zero(); g.cout * n_pad];
    for co in 0..g.cout {
        for oh in 0..g.ho {
            let dst = co * n_pad + oh * g.wp;
            let src = (co * g.ho + oh) * g.wo;
            gp[dst..dst + g.wo].copy_from_slice(&gy[src..src + g.wo]);
        }
    }
    let mut dw = vec![T::zero(); g.cout * offsets.len()];
    let ran = T::direct_wgrad(&xp, offsets, &gp, g.cout, n_pad, &mut dw);
    debug_assert!(ran, "direct kernel vanished between detection and use");
    dw
}

/// Forward pass. `x`: `[B, Cin, H, W]`, `w`: `[Cout, Cin, kh, kw]`, `b`: `[Cout]`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, spec: &Conv2dSpec) -> Result<Tensor<T>> {
    check_input(x, w, b, spec)?;
    let (batch, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let g = Geometry::new(spec, h, wd)?;
    let in_len = g.cin * h * wd;
    let out_len = g.cout * g.ho * g.wo;
    let mut y = vec![T::zero(); batch * out_len];
    if T::has_direct_kernel() {
        let wpack = pack_weights(w.data(), g.cout, spec.fan_in());
        let offsets = direct_offsets(&g, spec);
        y.par_chunks_mut(out_len).zip(x.data().par_chunks(in_len)).for_each(|(ys, xs)| {
            direct_forward_sample(xs, &wpack, &offsets, b.data(), &g, spec, ys);
        });
    } else {
        y.par_chunks_mut(out_len).zip(x.data().par_chunks(in_len)).for_each(|(ys, xs)| {
            forward_sample(xs, w.data(), b.data(), &g, spec, ys);
        });
    }
    Tensor::from_vec(&[batch, g.cout, g.ho, g.wo], y)
}

/// The correlation whose output is the input gradient: channels swapped,
/// padding `d(k-1) - p`. `None` when that padding would be negative.
fn transposed_spec(spec: &Conv2dSpec) -> Option<Conv2dSpec> {
    let pt = (spec.dilation.0 * (spec.kernel.0 - 1)).checked_sub(spec.padding.0)?;
    let pw = (spec.dilation.1 * (spec.kernel.1 - 1)).checked_sub(spec.padding.1)?;
    Some(Conv2dSpec {
        in_channels: spec.out_channels,
        out_channels: spec.in_channels,
        kernel: spec.kernel,
        dilation: spec.dilation,
        padding: (pt, pw),
    })
}

/// `w'[i][o][a][b] = w[o][i][kh-1-a][kw-1-b]`.
fn flip_weights<T: Scalar>(w: &[T], spec: &Conv2dSpec) -> Vec<T> {
    let (kh, kw) = spec.kernel;
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let mut out = vec![T::zero(); w.len()];
    for o in 0..cout {
        for i in 0..cin {
            for a in 0..kh {
                for b in 0..kw {
                    out[((i * cout + o) * kh + a) * kw + b] = w[((o * cin + i) * kh + kh - 1 - a) * kw + kw - 1 - b];
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

fn backward_sample<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &Geometry,
    spec: &Conv2dSpec,
    dx: Option<&mut [T]>,
) -> Vec<T> {
    let plane = g.ho * g.wo;
    let k = spec.fan_in();
    let taps = spec.taps();
    let mut dw = vec![T::zero(); g.cout * k];
    if use_im2col(spec) {
        let cols = im2col(x, g, spec);
        gemm(MatRef::row_major(gy, g.cout, plane), MatRef::row_major(&cols, k, plane).t(), &mut dw, k, false);
        if let Some(dx) = dx {
            let mut dcols = vec![T::zero(); k * plane];
            gemm(MatRef::row_major(w, g.cout, k).t(), MatRef::row_major(gy, g.cout, plane), &mut dcols, plane, false);
            col2im_add(&dcols, dx, g, spec);
        }
        return dw;
    }
    let xp = pad_sample(x, g, spec);
    let mut gp = vec![T::zero(); g.cout * g.n];
    for co in 0..g.cout {
        for oh in 0..g.ho {
            let dst = co * g.n + oh * g.wp;
            let src = co * plane + oh * g.wo;
            gp[dst..dst + g.wo].copy_from_slice(&gy[src..src + g.wo]);
        }
    }
    let mut dxp = dx.as_ref().map(|_| vec![T::zero(); g.cin * g.chan]);
    let mut tap_grad = vec![T::zero(); g.cout * g.cin];
    for ki in 0..spec.kernel.0 {
        for kj in 0..spec.kernel.1 {
            let tap = ki * spec.kernel.1 + kj;
            let off = g.tap_offset(spec, ki, kj);
            let xs = MatRef { data: &xp[off..], rows: g.cin, cols: g.n, row_stride: g.chan, col_stride: 1 };
            gemm(MatRef::row_major(&gp, g.cout, g.n), xs.t(), &mut tap_grad, g.cin, false);
            for co in 0..g.cout {
                for ci in 0..g.cin {
                    dw[co * k + ci * taps + tap] = tap_grad[co * g.cin + ci];
                }
            }
            if let Some(dxp) = dxp.as_mut() {
                let wt = MatRef { data: &w[tap..], rows: g.cout, cols: g.cin, row_stride: g.cin * taps, col_stride: taps };
                gemm(wt.t(), MatRef::row_major(&gp, g.cout, g.n), &mut dxp[off..], g.chan, true);
            }
        }
    }
    if let (Some(dx), Some(dxp)) = (dx, dxp) {
        let (ph, pw) = spec.padding;
        for c in 0..g.cin {
            for r in 0..g.h {
                let src = c * g.chan + (r + ph) * g.wp + pw;
                let dst = (c * g.h + r) * g.w;
                for (d, s) in dx[dst..dst + g.w].iter_mut().zip(&dxp[src..src + g.w]) {
                    *d += *s;
                }
            }
        }
    }
    dw
}

/// Gradients of the forward pass with respect to input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    spec: &Conv2dSpec,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (batch, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let g = Geometry::new(spec, h, wd)?;
    let in_len = g.cin * h * wd;
    let plane = g.ho * g.wo;
    let out_len = g.cout * plane;
    debug_assert_eq!(gy.numel(), batch * out_len);

    let fast_dx = if need_dx && T::has_direct_kernel() { transposed_spec(spec) } else { None };
    if let Some(ts) = fast_dx {
        let wt = Tensor::from_vec(&[g.cin, g.cout, spec.kernel.0, spec.kernel.1], flip_weights(w.data(), spec))?;
        let dx = conv2d_forward(gy, &wt, &Tensor::zeros(&[g.cin]), &ts)?;
        if dx.shape() != x.shape() {
            return Err(AadError::ShapeMismatch { expected: x.shape().to_vec(), actual: dx.shape().to_vec() });
        }
        let grads = conv2d_backward(x, w, gy, spec, false)?;
        return Ok(ConvGrads { dx: Some(dx), ..grads });
    }
    let mut dx = if need_dx { Some(vec![T::zero(); x.numel()]) } else { None };
    let direct_dw = !need_dx && T::has_direct_kernel();
    let offsets = if direct_dw { direct_offsets(&g, spec) } else { Vec::new() };
    let partials: Vec<Vec<T>> = match dx.as_mut() {
        Some(dx) => dx
            .par_chunks_mut(in_len)
            .zip(x.data().par_chunks(in_len))
            .zip(gy.data().par_chunks(out_len))
            .map(|((dxs, xs), gys)| backward_sample(xs, w.data(), gys, &g, spec, Some(dxs)))
            .collect(),
        None if direct_dw => x
            .data()
            .par_chunks(in_len)
            .zip(gy.data().par_chunks(out_len))
            .map(|(xs, gys)| direct_wgrad_sample(xs, gys, &offsets, &g, spec))
            .collect(),
        None => x
            .data()
            .par_chunks(in_len)
            .zip(gy.data().par_chunks(out_len))
            .map(|(xs, gys)| backward_sample(xs, w.data(), gys, &g, spec, None))
            .collect(),
    };
    // fixed-order reduction keeps results independent of scheduling
    let mut dw = vec![T::zero(); w.numel()];
    for p in &partials {
        for (a, b) in dw.iter_mut().zip(p) {
            *a += *b;
        }
    }
    let mut db = vec![T::zero(); g.cout];
    for s in 0..batch {
        for (co, acc) in db.iter_mut().enumerate() {
            let base = s * out_len + co * plane;
            *acc += gy.data()[base..base + plane].iter().copied().sum::<T>();
        }
    }
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::from_vec(x.shape(), d)).transpose()?,
        dw: Tensor::from_vec(w.shape(), dw)?,
        db: Tensor::from_vec(&[g.cout], db)?,
    })
}
