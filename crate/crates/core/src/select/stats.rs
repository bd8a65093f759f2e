//! Exact binomial confidence intervals and inter-annotator agreement.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need 0 <= k <= n and n >= 1, got k={k}, n={n}")]
    Counts { k: u64, n: u64 },
    #[error("alpha {0} outside (0, 1)")]
    Alpha(f64),
    #[error("no label pairs")]
    Empty,
    #[error("chance agreement is 1 but observed agreement is {0}; kappa undefined")]
    Degenerate(f64),
}

struct Binomial {
    n: u64,
    /// `ln C(n, i)` for `i = 0..=n`.
    ln_choose: Vec<f64>,
}

impl Binomial {
    fn new(n: u64) -> Self {
        let mut ln_choose = Vec::with_capacity(n as usize + 1);
        let mut acc = 0.0;
        ln_choose.push(0.0);
        for i in 1..=n {
            acc += ((n - i + 1) as f64).ln() - (i as f64).ln();
            ln_choose.push(acc);
        }
        Self { n, ln_choose }
    }

    fn ln_pmf(&self, i: u64, p: f64) -> f64 {
        let a = if i == 0 { 0.0 } else { i as f64 * p.ln() };
        let b = if i == self.n { 0.0 } else { (self.n - i) as f64 * (1.0 - p).ln() };
        self.ln_choose[i as usize] + a + b
    }

    /// Sum of pmf over `range`, in log space.
    fn mass(&self, range: std::ops::RangeInclusive<u64>, p: f64) -> f64 {
        let terms: Vec<f64> = range.map(|i| self.ln_pmf(i, p)).collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return 0.0;
        }
        max.exp() * terms.iter().map(|t| (t - max).exp()).sum::<f64>()
    }
}

/// Bisection for the root of a monotone function on `[0, 1]`.
fn bisect(mut f: impl FnMut(f64) -> f64, increasing: bool) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        let above = f(mid) > 0.0;
        if above == increasing {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Two-sided Clopper-Pearson interval for `k` successes in `n` trials.
pub fn clopper_pearson(k: u64, n: u64, alpha: f64) -> Result<(f64, f64), StatsError> {
    if n == 0 || k > n {
        return Err(StatsError::Counts { k, n });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::Alpha(alpha));
    }
    let b = Binomial::new(n);
    let target = alpha / 2.0;
    // P(X >= k; p) grows with p; P(X <= k; p) shrinks.
    let lo = if k == 0 {
        0.0
    } else {
        bisect(|p| b.mass(k..=n, p) - target, true)
    };
    let hi = if k == n {
        1.0
    } else {
        bisect(|p| b.mass(0..=k, p) - target, false)
    };
    Ok((lo, hi))
}

/// Two intervals are treated as significantly different when disjoint.
pub fn intervals_disjoint(a: (f64, f64), b: (f64, f64)) -> bool {
    a.1 < b.0 || b.1 < a.0
}

/// Cohen's kappa for two raters. Returns 1 when both chance and observed
/// agreement are 1.
pub fn cohens_kappa<L: Ord>(pairs: &[(L, L)]) -> Result<f64, StatsError> {
    if pairs.is_empty() {
        return Err(StatsError::Empty);
    }
    let n = pairs.len() as f64;
    let mut left: BTreeMap<&L, usize> = BTreeMap::new();
    let mut right: BTreeMap<&L, usize> = BTreeMap::new();
    let mut agree = 0usize;
    for (a, b) in pairs {
        *left.entry(a).or_default() += 1;
        *right.entry(b).or_default() += 1;
        if a == b {
            agree += 1;
        }
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = left
        .iter()
        .map(|(label, &ca)| ca as f64 * right.get(label).copied().unwrap_or(0) as f64)
        .sum::<f64>()
        / (n * n);
    if (1.0 - p_e).abs() < 1e-15 {
        return if p_o == 1.0 { Ok(1.0) } else { Err(StatsError::Degenerate(p_o)) };
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}
