//! Bidirectional LSTM over `[batch, time, feature]`.
//!
//! Gate order inside the `4H` axis is input, forget, candidate, output. Each
//! direction owns `w_ih [F, 4H]`, `w_hh [H, 4H]` and a single bias `[4H]`.
//! The output at step `t` is `[h_fwd(t) | h_bwd(t)]`.

use super::Tensor;
use crate::error::{AadError, Result};
use crate::scalar::{gemm, MatRef, Scalar};

#[derive(Clone, Copy)]
pub struct LstmWeights<'a, T> {
    pub w_ih: &'a Tensor<T>,
    pub w_hh: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
}

impl<T: Scalar> LstmWeights<'_, T> {
    fn hidden(&self) -> usize {
        self.w_hh.rows()
    }

    fn check(&self, features: usize) -> Result<()> {
        let h = self.hidden();
        if self.w_ih.shape() != [features, 4 * h] || self.w_hh.shape() != [h, 4 * h] || self.bias.shape() != [4 * h] {
            return Err(AadError::invalid(format!(
                "lstm weights inconsistent: w_ih {:?}, w_hh {:?}, bias {:?}, features {features}",
                self.w_ih.shape(),
                self.w_hh.shape(),
                self.bias.shape()
            )));
        }
        Ok(())
    }
}

/// Per-step state of one direction, indexed by processing step.
#[derive(Clone, Debug)]
pub struct DirectionCache<T> {
    /// Activated gates `[steps, B, 4H]`.
    gates: Vec<T>,
    /// Cell state `[steps, B, H]`.
    cells: Vec<T>,
    tanh_cells: Vec<T>,
    hidden: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct LstmCache<T> {
    fwd: DirectionCache<T>,
    bwd: DirectionCache<T>,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Runs one direction; returns hidden states `[B, T, H]` in original time order.
fn run_direction<T: Scalar>(x: &Tensor<T>, p: LstmWeights<'_, T>, reverse: bool) -> (Vec<T>, DirectionCache<T>) {
    let (b, steps, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h = p.hidden();
    let g4 = 4 * h;
    let mut xw = vec![T::zero(); b * steps * g4];
    gemm(MatRef::row_major(x.data(), b * steps, f), MatRef::row_major(p.w_ih.data(), f, g4), &mut xw, g4, false);

    let mut cache = DirectionCache {
        gates: vec![T::zero(); steps * b * g4],
        cells: vec![T::zero(); steps * b * h],
        tanh_cells: vec![T::zero(); steps * b * h],
        hidden: vec![T::zero(); steps * b * h],
    };
    let mut out = vec![T::zero(); b * steps * h];
    let mut z = vec![T::zero(); b * g4];
    for s in 0..steps {
        let t = if reverse { steps - 1 - s } else { s };
        for bi in 0..b {
            let row = &xw[(bi * steps + t) * g4..(bi * steps + t + 1) * g4];
            for ((zv, &xv), &bv) in z[bi * g4..(bi + 1) * g4].iter_mut().zip(row).zip(p.bias.data()) {
                *zv = xv + bv;
            }
        }
        if s > 0 {
            let prev = &cache.hidden[(s - 1) * b * h..s * b * h];
            gemm(MatRef::row_major(prev, b, h), MatRef::row_major(p.w_hh.data(), h, g4), &mut z, g4, true);
        }
        for bi in 0..b {
            for j in 0..h {
                let zr = &z[bi * g4..(bi + 1) * g4];
                let i_g = sigmoid(zr[j]);
                let f_g = sigmoid(zr[h + j]);
                let c_g = zr[2 * h + j].tanh();
                let o_g = sigmoid(zr[3 * h + j]);
                let c_prev = if s > 0 { cache.cells[((s - 1) * b + bi) * h + j] } else { T::zero() };
                let c = f_g * c_prev + i_g * c_g;
                let tc = c.tanh();
                let hv = o_g * tc;
                let gb = (s * b + bi) * g4;
                cache.gates[gb + j] = i_g;
                cache.gates[gb + h + j] = f_g;
                cache.gates[gb + 2 * h + j] = c_g;
                cache.gates[gb + 3 * h + j] = o_g;
                let sb = (s * b + bi) * h + j;
                cache.cells[sb] = c;
                cache.tanh_cells[sb] = tc;
                cache.hidden[sb] = hv;
                out[(bi * steps + t) * h + j] = hv;
            }
        }
    }
    (out, cache)
}

pub fn blstm_forward<T: Scalar>(
    x: &Tensor<T>,
    fwd: LstmWeights<'_, T>,
    bwd: LstmWeights<'_, T>,
) -> Result<(Tensor<T>, LstmCache<T>)> {
    if x.rank() != 3 {
        return Err(AadError::invalid(format!("blstm expects [batch, time, feature], got {:?}", x.shape())));
    }
    let (b, steps, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    fwd.check(f)?;
    bwd.check(f)?;
    let h = fwd.hidden();
    if bwd.hidden() != h {
        return Err(AadError::invalid("blstm directions must share the hidden size"));
    }
    let (hf, cf) = run_direction(x, fwd, false);
    let (hb, cb) = run_direction(x, bwd, true);
    let mut y = vec![T::zero(); b * steps * 2 * h];
    for r in 0..b * steps {
        y[r * 2 * h..r * 2 * h + h].copy_from_slice(&hf[r * h..(r + 1) * h]);
        y[r * 2 * h + h..(r + 1) * 2 * h].copy_from_slice(&hb[r * h..(r + 1) * h]);
    }
    Ok((Tensor::from_vec(&[b, steps, 2 * h], y)?, LstmCache { fwd: cf, bwd: cb }))
}

pub struct DirectionGrads<T> {
    pub w_ih: Tensor<T>,
    pub w_hh: Tensor<T>,
    pub bias: Tensor<T>,
}

pub struct BlstmGrads<T> {
    pub dx: Tensor<T>,
    pub fwd: DirectionGrads<T>,
    pub bwd: DirectionGrads<T>,
}

/// Backpropagation through time for one direction. `gy` is `[B, T, 2H]`,
/// `half` selects which half of the feature axis belongs to this direction.
fn backward_direction<T: Scalar>(
    x: &Tensor<T>,
    p: LstmWeights<'_, T>,
    cache: &DirectionCache<T>,
    gy: &Tensor<T>,
    half: usize,
    reverse: bool,
    dx: &mut [T],
) -> Result<DirectionGrads<T>> {
    let (b, steps, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h = p.hidden();
    let g4 = 4 * h;
    let mut dz_all = vec![T::zero(); b * steps * g4];
    let mut dz = vec![T::zero(); b * g4];
    let mut dh_next = vec![T::zero(); b * h];
    let mut dc_next = vec![T::zero(); b * h];
    let mut dw_hh = vec![T::zero(); h * g4];
    let one = T::one();
    for s in (0..steps).rev() {
        let t = if reverse { steps - 1 - s } else { s };
        for bi in 0..b {
            for j in 0..h {
                let dh = gy.data()[(bi * steps + t) * 2 * h + half * h + j] + dh_next[bi * h + j];
                let gb = (s * b + bi) * g4;
                let (i_g, f_g, c_g, o_g) =
                    (cache.gates[gb + j], cache.gates[gb + h + j], cache.gates[gb + 2 * h + j], cache.gates[gb + 3 * h + j]);
                let sb = (s * b + bi) * h + j;
                let tc = cache.tanh_cells[sb];
                let c_prev = if s > 0 { cache.cells[((s - 1) * b + bi) * h + j] } else { T::zero() };
                let d_o = dh * tc;
                let dc = dc_next[bi * h + j] + dh * o_g * (one - tc * tc);
                dc_next[bi * h + j] = dc * f_g;
                let zr = &mut dz[bi * g4..(bi + 1) * g4];
                zr[j] = dc * c_g * i_g * (one - i_g);
                zr[h + j] = dc * c_prev * f_g * (one - f_g);
                zr[2 * h + j] = dc * i_g * (one - c_g * c_g);
                zr[3 * h + j] = d_o * o_g * (one - o_g);
            }
            dz_all[(bi * steps + t) * g4..(bi * steps + t + 1) * g4].copy_from_slice(&dz[bi * g4..(bi + 1) * g4]);
        }
        let dzm = MatRef::row_major(&dz, b, g4);
        gemm(dzm, MatRef::row_major(p.w_hh.data(), h, g4).t(), &mut dh_next, h, false);
        if s > 0 {
            let prev = &cache.hidden[(s - 1) * b * h..s * b * h];
            gemm(MatRef::row_major(prev, b, h).t(), dzm, &mut dw_hh, g4, true);
        }
    }
    let dzm = MatRef::row_major(&dz_all, b * steps, g4);
    let mut dw_ih = vec![T::zero(); f * g4];
    gemm(MatRef::row_major(x.data(), b * steps, f).t(), dzm, &mut dw_ih, g4, false);
    gemm(dzm, MatRef::row_major(p.w_ih.data(), f, g4).t(), dx, f, true);
    let mut bias = vec![T::zero(); g4];
    for row in dz_all.chunks(g4) {
        for (a, &v) in bias.iter_mut().zip(row) {
            *a += v;
        }
    }
    Ok(DirectionGrads {
        w_ih: Tensor::from_vec(&[f, g4], dw_ih)?,
        w_hh: Tensor::from_vec(&[h, g4], dw_hh)?,
        bias: Tensor::from_vec(&[g4], bias)?,
    })
}

pub fn blstm_backward<T: Scalar>(
    x: &Tensor<T>,
    fwd: LstmWeights<'_, T>,
    bwd: LstmWeights<'_, T>,
    cache: &LstmCache<T>,
    gy: &Tensor<T>,
) -> Result<BlstmGrads<T>> {
    let mut dx = vec![T::zero(); x.numel()];
    let gf = backward_direction(x, fwd, &cache.fwd, gy, 0, false, &mut dx)?;
    let gb = backward_direction(x, bwd, &cache.bwd, gy, 1, true, &mut dx)?;
    Ok(BlstmGrads { dx: Tensor::from_vec(x.shape(), dx)?, fwd: gf, bwd: gb })
}
