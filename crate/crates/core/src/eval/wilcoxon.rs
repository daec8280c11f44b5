//! Exact one-sided Wilcoxon signed-rank test for small paired samples.
//!
//! Zero differences are dropped (the usual convention), tied absolute
//! differences receive midranks, and the p-value is exact: the distribution
//! of the positive-rank sum is enumerated over all `2^m` sign assignments
//! of the observed rank multiset.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Exact `P(W >= w_plus)` under the null.
    pub p_one_sided: f64,
    /// Pairs remaining after zero differences were dropped.
    pub n_nonzero: usize,
    /// All differences were zero; the test is undefined and `p = 1`.
    pub degenerate: bool,
}

/// Exact test on paired differences. `m` after zero-drop must stay within
/// the exact enumeration regime (`<= 20`).
pub fn wilcoxon_exact(diffs: &[f64]) -> Result<WilcoxonResult> {
    if diffs.is_empty() {
        return Err(Error::contract("wilcoxon_exact on empty differences"));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::contract("non-finite difference"));
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let m = nonzero.len();
    if m == 0 {
        return Ok(WilcoxonResult { w_plus: 0.0, p_one_sided: 1.0, n_nonzero: 0, degenerate: true });
    }
    if m > 20 {
        return Err(Error::contract(format!(
            "{m} non-zero pairs exceeds the exact enumeration regime (20)"
        )));
    }

    // midranks of |d|, doubled so every rank is integral
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| abs[a].partial_cmp(&abs[b]).unwrap());
    let mut doubled = vec![0u64; m];
    let mut i = 0;
    while i < m {
        let mut j = i;
        while j + 1 < m && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u64; // 2 * midrank
        for k in i..=j {
            doubled[order[k]] = rank2;
        }
        i = j + 1;
    }
    let w2_obs: u64 = nonzero
        .iter()
        .zip(&doubled)
        .filter(|(&d, _)| d > 0.0)
        .map(|(_, &r)| r)
        .sum();

    // exact null distribution of the doubled rank sum by subset-sum counting
    let max_sum: u64 = doubled.iter().sum();
    let mut counts = vec![0u64; max_sum as usize + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r as usize..counts.len()).rev() {
            counts[s] += counts[s - r as usize];
        }
    }
    let at_least: u64 = counts[w2_obs as usize..].iter().sum();
    let p = at_least as f64 / 2f64.powi(m as i32);

    Ok(WilcoxonResult {
        w_plus: w2_obs as f64 / 2.0,
        p_one_sided: p,
        n_nonzero: m,
        degenerate: false,
    })
}
