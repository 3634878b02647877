//! Summary statistics: median of the final epochs and the paired
//! Wilcoxon signed-rank test.

use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{AadError, Result};

/// Median of the last `k` values; even `k` averages the middle two.
pub fn median_last_k(values: &[f64], k: usize) -> Result<f64> {
    if k == 0 || values.len() < k {
        return Err(AadError::invalid(format!("need at least k = {k} > 0 values, got {}", values.len())));
    }
    let mut tail = values[values.len() - k..].to_vec();
    if tail.iter().any(|v| v.is_nan()) {
        return Err(AadError::invalid("median of NaN values"));
    }
    tail.sort_by(f64::total_cmp);
    Ok(if k % 2 == 1 { tail[k / 2] } else { 0.5 * (tail[k / 2 - 1] + tail[k / 2]) })
}

/// Largest sample size handled by exact enumeration.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
    /// Every difference was zero.
    AllZero,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    /// Rank sum of positive differences `a - b`.
    pub w_plus: f64,
    pub w_minus: f64,
    /// Pairs with a non-zero difference.
    pub n: usize,
    /// Two-sided.
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

impl WilcoxonResult {
    /// +1 when `a` tends to exceed `b`, -1 for the reverse, 0 if balanced.
    pub fn direction(&self) -> f64 {
        let d = self.w_plus - self.w_minus;
        if d == 0.0 {
            0.0
        } else {
            d.signum()
        }
    }
}

/// Non-zero differences' ranks of `|d|` (ties share the mean rank), each
/// doubled so they stay integral, and whether each difference is positive.
pub fn signed_doubled_ranks(a: &[f64], b: &[f64]) -> Result<(Vec<u64>, Vec<bool>)> {
    if a.len() != b.len() {
        return Err(AadError::invalid(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(AadError::invalid("paired samples are empty"));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(AadError::invalid("paired samples must be finite"));
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let mut ranks = vec![0u64; d.len()];
    let mut i = 0;
    while i < d.len() {
        let mut j = i;
        while j + 1 < d.len() && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        // positions i..=j (1-based i+1..=j+1) share the doubled mean rank i+j+2
        ranks[i..=j].iter_mut().for_each(|r| *r = (i + j + 2) as u64);
        i = j + 1;
    }
    let positive = d.iter().map(|v| *v > 0.0).collect();
    Ok((ranks, positive))
}

/// Two-sided p from the null counts of doubled `W+`.
fn two_sided(counts: &[f64], w2: u64, total: f64) -> f64 {
    let lower: f64 = counts[..=w2 as usize].iter().sum();
    let upper: f64 = counts[w2 as usize..].iter().sum();
    (2.0 * lower.min(upper) / total).min(1.0)
}

/// Paired two-sided Wilcoxon signed-rank test on `a - b`. Zero differences
/// are discarded; tied magnitudes get mean ranks. The null distribution is
/// enumerated exactly for `n <= 25` (tie-aware) and approximated by a
/// continuity-corrected normal above.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let (ranks, positive) = signed_doubled_ranks(a, b)?;
    let n = ranks.len();
    let w2_plus: u64 = ranks.iter().zip(&positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let w2_total: u64 = ranks.iter().sum();
    let (w_plus, w_minus) = (w2_plus as f64 / 2.0, (w2_total - w2_plus) as f64 / 2.0);
    let result = |p_value, method| WilcoxonResult {
        statistic: w_plus.min(w_minus),
        w_plus,
        w_minus,
        n,
        p_value,
        method,
    };
    if n == 0 {
        return Ok(result(1.0, WilcoxonMethod::AllZero));
    }
    if n <= WILCOXON_EXACT_MAX_N {
        // subset-sum counts over doubled ranks
        let mut counts = vec![0.0f64; w2_total as usize + 1];
        counts[0] = 1.0;
        let mut reach = 0usize;
        for &r in &ranks {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let p = two_sided(&counts, w2_plus, 2f64.powi(n as i32));
        return Ok(result(p, WilcoxonMethod::Exact));
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let t = ranks[i..].iter().take_while(|&&r| r == ranks[i]).count() as f64;
        tie_term += t * t * t - t;
        i += t as usize;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(result(erfc(z / std::f64::consts::SQRT_2).min(1.0), WilcoxonMethod::Normal))
}

/// Reference p-value by visiting all `2^n` sign assignments. Only for
/// small `n`; used to validate the exact path.
pub fn wilcoxon_brute_force_p(a: &[f64], b: &[f64]) -> Result<f64> {
    let (ranks, positive) = signed_doubled_ranks(a, b)?;
    let n = ranks.len();
    if n == 0 {
        return Ok(1.0);
    }
    if n > 20 {
        return Err(AadError::invalid("brute-force enumeration is limited to n <= 20"));
    }
    let observed: u64 = ranks.iter().zip(&positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let total: u64 = ranks.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    for signs in 0u32..(1 << n) {
        let w: u64 = (0..n).filter(|&i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
        counts[w as usize] += 1.0;
    }
    Ok(two_sided(&counts, observed, 2f64.powi(n as i32)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_last_five() {
        assert_eq!(median_last_k(&[0.70, 0.72, 0.71, 0.74, 0.73], 5).unwrap(), 0.72);
        assert_eq!(median_last_k(&[0.3; 9], 5).unwrap(), 0.3);
        let v = [0.9, 0.8, 0.1, 0.2, 0.3, 0.4];
        assert!((median_last_k(&v, 4).unwrap() - 0.25).abs() < 1e-15);
        assert!(median_last_k(&[0.1, 0.2], 5).is_err());
        assert!(median_last_k(&[0.1], 0).is_err());
    }

    #[test]
    fn identical_samples_give_p_one() {
        let a = [0.1, 0.5, 0.7, 0.2, 0.9];
        let r = wilcoxon_signed_rank(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.method, WilcoxonMethod::AllZero);
    }

    #[test]
    fn hand_dataset_matches_enumeration() {
        let a = [11.0, 2.0, 0.0, 8.0, 7.0, 3.5];
        let b = [0.0, 0.0, 2.0, 0.0, 0.0, 0.0];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.n, 6);
        // |d| = 11 2 2 8 7 3.5 → ranks 6, 1.5, 1.5, 5, 4, 3; only d3 < 0
        assert_eq!(r.w_minus, 1.5);
        assert_eq!(r.w_plus, 19.5);
        assert!((r.p_value - wilcoxon_brute_force_p(&a, &b).unwrap()).abs() < 1e-15);
        // W- <= 1.5 for the empty set and either tied rank: 2 · 3/64
        assert!((r.p_value - 6.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn swapping_negates_direction_only() {
        let a = [3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.6];
        let b = [2.0, 1.7, 1.0, 1.0, 3.0, 5.0, 3.5];
        let (x, y) = (wilcoxon_signed_rank(&a, &b).unwrap(), wilcoxon_signed_rank(&b, &a).unwrap());
        assert_eq!(x.p_value, y.p_value);
        assert_eq!(x.direction(), -y.direction());
        assert_eq!(x.statistic, y.statistic);
    }

    #[test]
    fn normal_branch_is_close_to_exact_at_the_switch() {
        let a: Vec<f64> = (0..26).map(|i| (i as f64 * 0.37).sin() + 0.3).collect();
        let b: Vec<f64> = (0..26).map(|i| (i as f64 * 0.91).cos() * 0.5).collect();
        let approx = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(approx.method, WilcoxonMethod::Normal);
        let exact = wilcoxon_signed_rank(&a[..25], &b[..25]).unwrap();
        assert_eq!(exact.method, WilcoxonMethod::Exact);
        assert!((approx.p_value - exact.p_value).abs() < 0.05);
    }

    #[test]
    fn unequal_lengths_rejected() {
        assert!(wilcoxon_signed_rank(&[1.0; 5], &[1.0; 6]).is_err());
    }
}
