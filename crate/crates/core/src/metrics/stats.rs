//! Rank-based omnibus and post-hoc tests, and percentile bootstrap intervals.

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

fn check_groups(groups: &[Vec<f64>]) -> Result<()> {
    if groups.len() < 2 {
        return Err(Error::arg(format!(
            "need at least 2 groups, got {}",
            groups.len()
        )));
    }
    if let Some(i) = groups.iter().position(Vec::is_empty) {
        return Err(Error::arg(format!("group {i} is empty")));
    }
    if groups.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::arg("samples must not be NaN"));
    }
    Ok(())
}

/// Midranks (1-based) of `values` and the tie term `Σ(t³ − t)`.
pub fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

struct Pooled {
    mean_ranks: Vec<f64>,
    sizes: Vec<f64>,
    n: f64,
    ties: f64,
}

fn pool(groups: &[Vec<f64>]) -> Pooled {
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let (ranks, ties) = midranks(&all);
    let mut mean_ranks = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for g in groups {
        let s: f64 = ranks[offset..offset + g.len()].iter().sum();
        mean_ranks.push(s / g.len() as f64);
        offset += g.len();
    }
    Pooled {
        mean_ranks,
        sizes: groups.iter().map(|g| g.len() as f64).collect(),
        n: all.len() as f64,
        ties,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KruskalWallis {
    pub h: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Tie-corrected Kruskal–Wallis H with a χ²(k − 1) p-value.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallis> {
    check_groups(groups)?;
    let p = pool(groups);
    let df = groups.len() - 1;
    let n = p.n;
    let correction = 1.0 - p.ties / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(KruskalWallis {
            h: 0.0,
            df,
            p_value: 1.0,
        });
    }
    let s: f64 = p
        .mean_ranks
        .iter()
        .zip(&p.sizes)
        .map(|(r, m)| m * r * r)
        .sum();
    let h = ((12.0 / (n * (n + 1.0)) * s - 3.0 * (n + 1.0)) / correction).max(0.0);
    let chi = ChiSquared::new(df as f64).map_err(|e| Error::arg(e.to_string()))?;
    Ok(KruskalWallis {
        h,
        df,
        p_value: chi.sf(h).clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DunnMatrix {
    /// `z[i][j] = (R̄ᵢ − R̄ⱼ)/σᵢⱼ`.
    pub z: Vec<Vec<f64>>,
    /// Bonferroni-adjusted two-sided p-values, unit diagonal.
    pub p_adjusted: Vec<Vec<f64>>,
}

/// Dunn's pairwise test on mean ranks with tie-corrected variance and a
/// Bonferroni factor of `k(k − 1)/2`.
pub fn dunn_bonferroni(groups: &[Vec<f64>]) -> Result<DunnMatrix> {
    check_groups(groups)?;
    let p = pool(groups);
    let k = groups.len();
    let n = p.n;
    let pairs = (k * (k - 1) / 2) as f64;
    let base = n * (n + 1.0) / 12.0 - p.ties / (12.0 * (n - 1.0));
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut z = vec![vec![0.0; k]; k];
    let mut adj = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let var = base * (1.0 / p.sizes[i] + 1.0 / p.sizes[j]);
            if var <= 0.0 {
                continue;
            }
            let zij = (p.mean_ranks[i] - p.mean_ranks[j]) / var.sqrt();
            z[i][j] = zij;
            adj[i][j] = (2.0 * normal.sf(zij.abs()) * pairs).min(1.0);
        }
    }
    Ok(DunnMatrix { z, p_adjusted: adj })
}

pub const BOOTSTRAP_ITERATIONS: usize = 10_000;

fn mean(xs: impl Iterator<Item = f64>, anchor: f64, n: usize) -> f64 {
    anchor + xs.map(|x| x - anchor).sum::<f64>() / n as f64
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci(
    sample: &[f64],
    iterations: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if sample.is_empty() {
        return Err(Error::arg("bootstrap needs a nonempty sample"));
    }
    if iterations == 0 {
        return Err(Error::arg("bootstrap needs at least one iteration"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::arg(format!(
            "confidence level must be in (0, 1), got {level}"
        )));
    }
    let n = sample.len();
    let anchor = sample[0];
    let mut rng = stream_rng(seed, 0xB007);
    let mut means: Vec<f64> = (0..iterations)
        .map(|_| mean((0..n).map(|_| sample[rng.gen_range(0..n)]), anchor, n))
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile(&means, alpha), quantile(&means, 1.0 - alpha)))
}
