//! One-sided Wilcoxon signed-rank test (alternative: differences tend to be
//! positive).
//!
//! Zero differences are dropped, tied magnitudes receive average ranks. Up to
//! [`EXACT_MAX_N`] non-zero differences the null distribution of `W+` is
//! counted exactly over all `2^n` sign assignments; beyond that a normal
//! approximation with tie and continuity corrections is used.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const EXACT_MAX_N: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Number of non-zero differences.
    pub n: usize,
    /// Sum of the ranks of positive differences.
    pub w_plus: f64,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Average ranks (1-based) of `|d|` for the non-zero differences, returned
/// alongside the differences they belong to.
pub fn signed_ranks(diffs: &[f64]) -> Result<Vec<(f64, f64)>> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("non-finite paired difference"));
    }
    let mut nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nz.is_empty() {
        return Err(Error::UndefinedMetric(
            "signed-rank test needs at least one non-zero difference".into(),
        ));
    }
    nz.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut out = Vec::with_capacity(nz.len());
    let mut i = 0;
    while i < nz.len() {
        let mut j = i;
        while j + 1 < nz.len() && nz[j + 1].abs() == nz[i].abs() {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &d in &nz[i..=j] {
            out.push((d, rank));
        }
        i = j + 1;
    }
    Ok(out)
}

fn w_plus(ranked: &[(f64, f64)]) -> f64 {
    ranked.iter().filter(|(d, _)| *d > 0.0).map(|(_, r)| r).sum()
}

/// Exact upper-tail probability `P(W+ >= observed)`.
///
/// Average ranks are multiples of 1/2, so the null distribution is counted
/// over doubled ranks with a subset-sum recurrence.
pub fn wilcoxon_exact(diffs: &[f64]) -> Result<WilcoxonResult> {
    let ranked = signed_ranks(diffs)?;
    let n = ranked.len();
    if n > 62 {
        return Err(Error::invalid("exact signed-rank test limited to 62 differences"));
    }
    let doubled: Vec<usize> = ranked.iter().map(|(_, r)| (r * 2.0).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max_sum + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let observed = w_plus(&ranked);
    let threshold = (observed * 2.0).round() as usize;
    let tail: f64 = counts[threshold..].iter().sum();
    Ok(WilcoxonResult {
        n,
        w_plus: observed,
        p_value: tail / 2f64.powi(n as i32),
        method: WilcoxonMethod::Exact,
    })
}

/// Normal approximation of `P(W+ >= observed)` with tie-corrected variance
/// and a continuity correction of 1/2.
pub fn wilcoxon_normal(diffs: &[f64]) -> Result<WilcoxonResult> {
    let ranked = signed_ranks(diffs)?;
    let n = ranked.len() as f64;
    let observed = w_plus(&ranked);
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < ranked.len() {
        let mut j = i;
        while j + 1 < ranked.len() && ranked[j + 1].1 == ranked[i].1 {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let z = (observed - mean - 0.5) / var.sqrt();
    let std_normal = Normal::standard();
    Ok(WilcoxonResult {
        n: ranked.len(),
        w_plus: observed,
        p_value: 1.0 - std_normal.cdf(z),
        method: WilcoxonMethod::Normal,
    })
}

/// Exact for up to 25 non-zero differences, normal approximation beyond.
pub fn wilcoxon_one_sided(diffs: &[f64]) -> Result<WilcoxonResult> {
    let nonzero = diffs.iter().filter(|&&d| d != 0.0).count();
    if nonzero <= EXACT_MAX_N {
        wilcoxon_exact(diffs)
    } else {
        wilcoxon_normal(diffs)
    }
}
