//! Wilcoxon rank-sum (Mann-Whitney) test for two independent samples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest pooled size for which `Auto` uses the exact null distribution.
pub const EXACT_AUTO_LIMIT: usize = 20;

/// Largest pooled size accepted by an explicit `Exact` request; the subset
/// counts stay within `u128` up to here.
pub const EXACT_MAX: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSumMethod {
    #[default]
    Auto,
    Exact,
    Normal,
}

impl FromStr for RankSumMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(RankSumMethod::Auto),
            "exact" => Ok(RankSumMethod::Exact),
            "normal" => Ok(RankSumMethod::Normal),
            other => Err(Error::InvalidArgument(format!("unknown rank-sum method {other:?}"))),
        }
    }
}

impl fmt::Display for RankSumMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankSumMethod::Auto => "auto",
            RankSumMethod::Exact => "exact",
            RankSumMethod::Normal => "normal",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// `U` of the first sample: its rank sum minus `n (n + 1) / 2`.
    #[serde(rename = "u")]
    pub u_statistic: f64,
    /// Continuity-corrected normal score; reported for both methods.
    pub z: f64,
    #[serde(rename = "p")]
    pub p_two_sided: f64,
    /// Either `exact` or `normal`, never `auto`.
    pub method: RankSumMethod,
}

/// 1-based ranks with ties sharing the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Sizes of the groups of tied values.
fn tie_groups(values: &[f64]) -> Vec<usize> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let j = i + v[i..].iter().take_while(|&&x| x == v[i]).count();
        groups.push(j - i);
        i = j;
    }
    groups
}

/// Number of size-`n` subsets of the pooled doubled ranks reaching each
/// doubled rank sum, indexed by that sum.
pub fn rank_sum_distribution(doubled_ranks: &[usize], n: usize) -> Vec<u128> {
    let max: usize = doubled_ranks.iter().sum();
    let mut ways = vec![vec![0u128; max + 1]; n + 1];
    ways[0][0] = 1;
    for (seen, &r) in doubled_ranks.iter().enumerate() {
        for k in (1..=n.min(seen + 1)).rev() {
            let (lo, hi) = ways.split_at_mut(k);
            for s in (r..=max).rev() {
                hi[0][s] += lo[k - 1][s - r];
            }
        }
    }
    ways.swap_remove(n)
}

pub fn rank_sum_test(x: &[f64], y: &[f64], method: RankSumMethod) -> Result<RankSumResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Empty("rank-sum test needs two non-empty samples".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("rank-sum samples contain NaN".into()));
    }
    let (n, m) = (x.len(), y.len());
    let total = n + m;
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = midranks(&pooled);
    let w: f64 = ranks[..n].iter().sum();
    let u = w - (n * (n + 1)) as f64 / 2.0;

    let mean = n as f64 * (total + 1) as f64 / 2.0;
    let ties: f64 = tie_groups(&pooled).iter().map(|&t| (t * t * t - t) as f64).sum();
    let tie_term = if total > 1 { ties / (total * (total - 1)) as f64 } else { 0.0 };
    let var = (n * m) as f64 / 12.0 * ((total + 1) as f64 - tie_term);
    let dev = (w - mean).abs();
    let z = if var > 0.0 {
        (w - mean).signum() * (dev - 0.5).max(0.0) / var.sqrt()
    } else {
        0.0
    };

    let exact = match method {
        RankSumMethod::Exact => true,
        RankSumMethod::Normal => false,
        RankSumMethod::Auto => total <= EXACT_AUTO_LIMIT,
    };
    if exact && total > EXACT_MAX {
        return Err(Error::InvalidArgument(format!(
            "exact rank-sum test supports at most {EXACT_MAX} pooled values, got {total}; use the normal method"
        )));
    }
    let p = if exact {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let dist = rank_sum_distribution(&doubled, n);
        let centre = n * (total + 1);
        let observed = (2.0 * w).round() as usize;
        let gap = observed.abs_diff(centre);
        let all: u128 = dist.iter().sum();
        let extreme: u128 = dist
            .iter()
            .enumerate()
            .filter(|(s, _)| s.abs_diff(centre) >= gap)
            .map(|(_, c)| c)
            .sum();
        extreme as f64 / all as f64
    } else if var > 0.0 {
        let std = Normal::standard();
        (2.0 * std.sf(z.abs())).min(1.0)
    } else {
        1.0
    };
    Ok(RankSumResult {
        u_statistic: u,
        z,
        p_two_sided: p.clamp(0.0, 1.0),
        method: if exact { RankSumMethod::Exact } else { RankSumMethod::Normal },
    })
}
