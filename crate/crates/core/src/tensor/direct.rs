//! Register-blocked direct correlation for `f32` on AVX-512.
//!
//! Computes `y[o][t] = sum_k w[o][k] * xp[offsets[k] + t]` for
//! `t < n_pad` (a multiple of [`N_TILE`]): every reduction index `k` is one
//! (input channel, tap) pair whose input row is a shifted view of the padded
//! input. Eight output channels by 48 positions stay in 24 vector
//! registers for the whole reduction, so nothing but the input is streamed.

pub(crate) const M_TILE: usize = 8;
pub(crate) const N_TILE: usize = 48;

pub(crate) struct DirectArgs<'a> {
    pub xp: &'a [f32],
    pub offsets: &'a [usize],
    /// `[ceil(cout / 8), K, 8]`, zero rows past `cout`.
    pub wpack: &'a [f32],
    pub cout: usize,
    pub n_pad: usize,
    pub ldy: usize,
}

/// Packs `w[o][k]` (row-major `[cout, k_len]`) into 8-row panels.
pub(crate) fn pack_weights<T: Copy + Default>(w: &[T], cout: usize, k_len: usize) -> Vec<T> {
    let blocks = cout.div_ceil(M_TILE);
    let mut out = vec![T::default(); blocks * k_len * M_TILE];
    for o in 0..cout {
        let (blk, r) = (o / M_TILE, o % M_TILE);
        for k in 0..k_len {
            out[(blk * k_len + k) * M_TILE + r] = w[o * k_len + k];
        }
    }
    out
}

pub(crate) fn available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx512f")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

fn check(a: &DirectArgs<'_>, y: &[f32]) {
    let k_len = a.offsets.len();
    assert_eq!(a.n_pad % N_TILE, 0);
    assert!(a.wpack.len() >= a.cout.div_ceil(M_TILE) * k_len * M_TILE);
    let max_off = a.offsets.iter().copied().max().unwrap_or(0);
    assert!(max_off + a.n_pad <= a.xp.len(), "input buffer too short for the requested tiles");
    assert!(a.cout == 0 || (a.cout - 1) * a.ldy + a.n_pad <= y.len());
    assert!(a.ldy >= a.n_pad);
}

/// Runs the kernel; returns false when the CPU lacks AVX-512.
pub(crate) fn corr(a: &DirectArgs<'_>, y: &mut [f32]) -> bool {
    check(a, y);
    #[cfg(target_arch = "x86_64")]
    if available() {
        // SAFETY: feature detected above; bounds asserted in `check`.
        unsafe { corr_avx512(a, y) };
        return true;
    }
    false
}

/// Portable reference with the same accumulation order per output.
#[cfg(test)]
pub(crate) fn corr_reference(a: &DirectArgs<'_>, y: &mut [f32]) {
    check(a, y);
    let k_len = a.offsets.len();
    for o in 0..a.cout {
        let (blk, r) = (o / M_TILE, o % M_TILE);
        for t in 0..a.n_pad {
            let mut s = 0.0f32;
            for (k, &off) in a.offsets.iter().enumerate() {
                s = a.wpack[(blk * k_len + k) * M_TILE + r].mul_add(a.xp[off + t], s);
            }
            y[o * a.ldy + t] = s;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn corr_avx512(a: &DirectArgs<'_>, y: &mut [f32]) {
    use std::arch::x86_64::*;
    let k_len = a.offsets.len();
    let blocks = a.cout.div_ceil(M_TILE);
    let xp = a.xp.as_ptr();
    let yp = y.as_mut_ptr();
    for t in (0..a.n_pad).step_by(N_TILE) {
        for blk in 0..blocks {
            let mut acc = [_mm512_setzero_ps(); 24];
            let wb = a.wpack.as_ptr().add(blk * k_len * M_TILE);
            for (k, &off) in a.offsets.iter().enumerate() {
                let p = xp.add(off + t);
                if blk == 0 {
                    // the shifted rows are too many streams for the hardware prefetcher
                    let ahead = p.wrapping_add(2 * N_TILE) as *const i8;
                    _mm_prefetch::<_MM_HINT_T0>(ahead);
                    _mm_prefetch::<_MM_HINT_T0>(ahead.wrapping_add(64));
                    _mm_prefetch::<_MM_HINT_T0>(ahead.wrapping_add(128));
                }
                let b0 = _mm512_loadu_ps(p);
                let b1 = _mm512_loadu_ps(p.add(16));
                let b2 = _mm512_loadu_ps(p.add(32));
                let w = wb.add(k * M_TILE);
                for r in 0..M_TILE {
                    let av = _mm512_set1_ps(*w.add(r));
                    acc[3 * r] = _mm512_fmadd_ps(av, b0, acc[3 * r]);
                    acc[3 * r + 1] = _mm512_fmadd_ps(av, b1, acc[3 * r + 1]);
                    acc[3 * r + 2] = _mm512_fmadd_ps(av, b2, acc[3 * r + 2]);
                }
            }
            for r in 0..M_TILE.min(a.cout - blk * M_TILE) {
                let dst = yp.add((blk * M_TILE + r) * a.ldy + t);
                _mm512_storeu_ps(dst, acc[3 * r]);
                _mm512_storeu_ps(dst.add(16), acc[3 * r + 1]);
                _mm512_storeu_ps(dst.add(32), acc[3 * r + 2]);
            }
        }
    }
}

/// Weight gradient `dw[o][k] += sum_t gp[o * n_pad + t] * xp[offsets[k] + t]`.
pub(crate) struct WgradArgs<'a> {
    pub xp: &'a [f32],
    pub offsets: &'a [usize],
    /// `[cout, n_pad]`, zero at positions outside the cropped output.
    pub gp: &'a [f32],
    pub cout: usize,
    pub n_pad: usize,
}

const WG_K: usize = 8;
const WG_O: usize = 3;
/// Positions per pass; keeps eight input rows resident in L1.
const WG_CHUNK: usize = 1024;

fn check_wgrad(a: &WgradArgs<'_>, dw: &[f32]) {
    assert_eq!(a.n_pad % 16, 0);
    assert!(a.gp.len() >= a.cout * a.n_pad);
    let max_off = a.offsets.iter().copied().max().unwrap_or(0);
    assert!(max_off + a.n_pad <= a.xp.len(), "input buffer too short for the requested positions");
    assert!(dw.len() >= a.cout * a.offsets.len());
}

/// Returns false when the CPU lacks AVX-512.
pub(crate) fn wgrad(a: &WgradArgs<'_>, dw: &mut [f32]) -> bool {
    check_wgrad(a, dw);
    #[cfg(target_arch = "x86_64")]
    if available() {
        // SAFETY: feature detected above; bounds asserted in `check_wgrad`.
        unsafe { wgrad_avx512(a, dw) };
        return true;
    }
    false
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn wgrad_avx512(a: &WgradArgs<'_>, dw: &mut [f32]) {
    use std::arch::x86_64::*;
    let k_len = a.offsets.len();
    let k_pad = k_len.div_ceil(WG_K) * WG_K;
    let o_pad = a.cout.div_ceil(WG_O) * WG_O;
    // padding rows repeat a valid offset / read zeros; their sums are discarded
    let mut offs = a.offsets.to_vec();
    offs.resize(k_pad, a.offsets[0]);
    // 64-byte aligned copy so the row loads never split a cache line
    let mut gbuf = vec![0.0f32; o_pad * a.n_pad + 16];
    let lead = gbuf.as_ptr().align_offset(64).min(16);
    let gp = &mut gbuf[lead..lead + o_pad * a.n_pad];
    gp[..a.cout * a.n_pad].copy_from_slice(&a.gp[..a.cout * a.n_pad]);
    // per-lane partial sums, reduced once at the end
    let mut lanes = vec![_mm512_setzero_ps(); k_pad * o_pad];
    let xp = a.xp.as_ptr();
    let gpp = gp.as_ptr();
    for t0 in (0..a.n_pad).step_by(WG_CHUNK) {
        let t1 = (t0 + WG_CHUNK).min(a.n_pad);
        for kb in (0..k_pad).step_by(WG_K) {
            let xr: [*const f32; WG_K] = std::array::from_fn(|j| xp.add(offs[kb + j]));
            for ob in (0..o_pad).step_by(WG_O) {
                let gr: [*const f32; WG_O] = std::array::from_fn(|i| gpp.add((ob + i) * a.n_pad));
                let mut acc = [_mm512_setzero_ps(); WG_K * WG_O];
                for t in (t0..t1).step_by(16) {
                    let g0 = _mm512_loadu_ps(gr[0].add(t));
                    let g1 = _mm512_loadu_ps(gr[1].add(t));
                    let g2 = _mm512_loadu_ps(gr[2].add(t));
                    for j in 0..WG_K {
                        let xv = _mm512_loadu_ps(xr[j].add(t));
                        acc[3 * j] = _mm512_fmadd_ps(xv, g0, acc[3 * j]);
                        acc[3 * j + 1] = _mm512_fmadd_ps(xv, g1, acc[3 * j + 1]);
                        acc[3 * j + 2] = _mm512_fmadd_ps(xv, g2, acc[3 * j + 2]);
                    }
                }
                for j in 0..WG_K {
                    for i in 0..WG_O {
                        let l = &mut lanes[(kb + j) * o_pad + ob + i];
                        *l = _mm512_add_ps(*l, acc[3 * j + i]);
                    }
                }
            }
        }
    }
    for o in 0..a.cout {
        for k in 0..k_len {
            dw[o * k_len + k] += _mm512_reduce_add_ps(lanes[k * o_pad + o]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_matches_reference() {
        if !available() {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (cout, k_len) in [(8, 5), (13, 17), (1, 1), (32, 40)] {
            let n_pad = 96;
            let offsets: Vec<usize> = (0..k_len).map(|_| rng.random_range(0..50)).collect();
            let xp: Vec<f32> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f32> = (0..cout * k_len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wpack = pack_weights(&w, cout, k_len);
            let args = DirectArgs { xp: &xp, offsets: &offsets, wpack: &wpack, cout, n_pad, ldy: n_pad + 3 };
            let mut fast = vec![0.0; cout * (n_pad + 3)];
            let mut slow = fast.clone();
            assert!(corr(&args, &mut fast));
            corr_reference(&args, &mut slow);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }
}

#[cfg(test)]
mod wgrad_tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wgrad_matches_reference() {
        if !available() {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (cout, k_len, n_pad) in [(1, 1, 16), (32, 224, 1056), (5, 9, 48), (4, 17, 2000)] {
            let offsets: Vec<usize> = (0..k_len).map(|_| rng.random_range(0..60)).collect();
            let xp: Vec<f32> = (0..n_pad + 60).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gp: Vec<f32> = (0..cout * n_pad).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut dw = vec![0.25f32; cout * k_len];
            assert!(wgrad(&WgradArgs { xp: &xp, offsets: &offsets, gp: &gp, cout, n_pad }, &mut dw));
            for o in 0..cout {
                for (k, &off) in offsets.iter().enumerate() {
                    let r: f64 = (0..n_pad).map(|t| gp[o * n_pad + t] as f64 * xp[off + t] as f64).sum();
                    let got = dw[o * k_len + k] as f64 - 0.25;
                    assert!((got - r).abs() < 1e-4 * (1.0 + (n_pad as f64).sqrt()), "{got} vs {r}");
                }
            }
        }
    }
}
