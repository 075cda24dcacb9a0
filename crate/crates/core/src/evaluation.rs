//! Overlap metrics and rank tests.

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::phantom::{rescan_to_scan, RigidTransform};
use crate::volume::LabelMap;

/// Largest sample size that uses the exact Wilcoxon distribution.
pub const WILCOXON_EXACT_MAX: usize = 20;
/// Largest combined sample size that uses the exact Mann-Whitney distribution.
pub const MANN_WHITNEY_EXACT_MAX: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("label maps differ in grid: {0:?} vs {1:?}")]
    GridMismatch([usize; 3], [usize; 3]),
    #[error("label maps differ in label count: {0} vs {1}")]
    LabelCountMismatch(u16, u16),
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sample is empty")]
    Empty,
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("sample contains a non-finite value")]
    NonFinite,
}

/// Dice of every foreground label `1..L`; labels absent from both maps score 1.
pub fn dice_per_label(a: &LabelMap, b: &LabelMap) -> Result<Vec<f64>, StatsError> {
    if a.grid().dims != b.grid().dims {
        return Err(StatsError::GridMismatch(a.grid().dims, b.grid().dims));
    }
    if a.num_labels() != b.num_labels() {
        return Err(StatsError::LabelCountMismatch(a.num_labels(), b.num_labels()));
    }
    let n = a.num_labels() as usize;
    let mut size_a = vec![0usize; n];
    let mut size_b = vec![0usize; n];
    let mut inter = vec![0usize; n];
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        size_a[x as usize] += 1;
        size_b[y as usize] += 1;
        if x == y {
            inter[x as usize] += 1;
        }
    }
    Ok((1..n)
        .map(|c| match size_a[c] + size_b[c] {
            0 => 1.0,
            s => 2.0 * inter[c] as f64 / s as f64,
        })
        .collect())
}

pub fn mean_dice(a: &LabelMap, b: &LabelMap) -> Result<f64, StatsError> {
    let d = dice_per_label(a, b)?;
    Ok(if d.is_empty() {
        1.0
    } else {
        d.iter().sum::<f64>() / d.len() as f64
    })
}

/// Consistency between segmentations of a scan and of its rescan: the rescan map is
/// brought back to scan space with the known motion, then compared by mean Dice.
pub fn scan_rescan_consistency(
    seg_scan: &LabelMap,
    seg_rescan: &LabelMap,
    transform: &RigidTransform,
) -> Result<f64, StatsError> {
    mean_dice(seg_scan, &rescan_to_scan(seg_rescan, transform))
}

/// Midranks (1-based) doubled so they are integers, plus tie-group sizes.
fn doubled_ranks(values: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0; values.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, doubled midrank = start + 1 + end
        for &i in &idx[start..end] {
            ranks[i] = start + 1 + end;
        }
        ties.push(end - start);
        start = end;
    }
    (ranks, ties)
}

fn check_finite(v: &[f64]) -> Result<(), StatsError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid parameters")
}

/// One-sided Wilcoxon signed-rank test of "x is greater than y". Zero differences are dropped.
pub fn wilcoxon_signed_rank_one_sided(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    check_finite(x)?;
    check_finite(y)?;
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Err(StatsError::AllZeroDifferences);
    }
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = doubled_ranks(&abs);
    let w2: usize = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    if n <= WILCOXON_EXACT_MAX {
        // counts[s] = number of sign patterns whose positive doubled-rank sum is s
        let total: usize = ranks.iter().sum();
        let mut counts = vec![0f64; total + 1];
        counts[0] = 1.0;
        for &r in &ranks {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let tail: f64 = counts[w2..].iter().sum();
        return Ok(tail / 2f64.powi(n as i32));
    }
    let nf = n as f64;
    let w = w2 as f64 / 2.0;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_adj: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_adj).sqrt();
    let z = (w - mean - 0.5) / sd;
    Ok(1.0 - std_normal().cdf(z))
}

/// One-sided Mann-Whitney test of "a tends to be less than b".
pub fn mann_whitney_one_sided(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    check_finite(a)?;
    check_finite(b)?;
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = doubled_ranks(&pooled);
    let ra2: usize = ranks[..na].iter().sum();
    if n <= MANN_WHITNEY_EXACT_MAX {
        // counts[k][s] = number of k-subsets of the pooled ranks with doubled sum s
        let total: usize = ranks.iter().sum();
        let mut counts = vec![vec![0f64; total + 1]; na + 1];
        counts[0][0] = 1.0;
        for &r in &ranks {
            for k in (1..=na).rev() {
                for s in (r..=total).rev() {
                    counts[k][s] += counts[k - 1][s - r];
                }
            }
        }
        let all: f64 = counts[na].iter().sum();
        let low: f64 = counts[na][..=ra2].iter().sum();
        return Ok(low / all);
    }
    let (naf, nbf, nf) = (na as f64, nb as f64, n as f64);
    let u = ra2 as f64 / 2.0 - naf * (naf + 1.0) / 2.0;
    let mean = naf * nbf / 2.0;
    let tie_sum: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = naf * nbf / 12.0 * ((nf + 1.0) - tie_sum / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = (u + 0.5 - mean) / var.sqrt();
    Ok(std_normal().cdf(z))
}

/// Sample mean and (n - 1) standard deviation; zero spread for a single value.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
