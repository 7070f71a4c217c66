//! Shapiro-Wilk, Wilcoxon signed-rank and Kruskal-Wallis tests.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::special::{chi2_sf, normal_ppf, normal_sf};

/// Largest effective sample size for which Wilcoxon p-values are enumerated exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    ShapiroWilk,
    Wilcoxon,
    KruskalWallis,
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestKind::ShapiroWilk => "shapiro_wilk",
            TestKind::Wilcoxon => "wilcoxon",
            TestKind::KruskalWallis => "kruskal_wallis",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub test: TestKind,
    pub statistic: f64,
    pub p_value: f64,
    /// Effective sample size (nonzero pairs for Wilcoxon, pooled N for Kruskal-Wallis).
    pub n: usize,
    pub exact: bool,
    pub tie_corrected: bool,
    pub zeros_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("{test}: sample size {n} outside [{min}, {max}]")]
    SampleSize {
        test: TestKind,
        n: usize,
        min: usize,
        max: usize,
    },
    #[error("zero variance: all values identical")]
    ZeroVariance,
    #[error("all differences zero")]
    AllDifferencesZero,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("group {0} is empty")]
    EmptyGroup(usize),
    #[error("all pooled values identical")]
    AllIdentical,
    #[error("non-finite input value")]
    NonFinite,
    #[error("exact Wilcoxon needs at most 25 nonzero pairs and no tied magnitudes")]
    ExactUnavailable,
}

fn check_finite(xs: &[f64]) -> Result<(), StatsError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

/// Midranks (1-based) of `values`, plus the tie-group sizes.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // Positions i..j (0-based) share the average of ranks i+1..=j.
        let rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

fn tie_sum(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t * t * t - t) as f64).sum()
}

fn poly(coefs: &[f64], x: f64) -> f64 {
    coefs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Shapiro-Wilk W and p-value (Royston's AS R94 approximation), 3 ≤ n ≤ 5000.
pub fn shapiro_wilk(sample: &[f64]) -> Result<StatResult, StatsError> {
    const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
    const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    const C3: [f64; 4] = [0.544, -0.39978, 0.025054, -6.714e-4];
    const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
    const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
    const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
    const G: [f64; 2] = [-2.273, 0.459];

    let n = sample.len();
    if !(3..=5000).contains(&n) {
        return Err(StatsError::SampleSize {
            test: TestKind::ShapiroWilk,
            n,
            min: 3,
            max: 5000,
        });
    }
    check_finite(sample)?;
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let range = x[n - 1] - x[0];
    if range <= 0.0 {
        return Err(StatsError::ZeroVariance);
    }

    // Half-vector of coefficients for the lower order statistics (positive values).
    let half = n / 2;
    let an = n as f64;
    let mut a = vec![0.0; half];
    if n == 3 {
        a[0] = 0.5f64.sqrt();
    } else {
        let m: Vec<f64> = (1..=half)
            .map(|i| normal_ppf((i as f64 - 0.375) / (an + 0.25)))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (first_free, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            a[1] = a2;
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
            (2, fac)
        } else {
            let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt();
            (1, fac)
        };
        a[0] = a1;
        for i in first_free..half {
            a[i] = -m[i] / fac;
        }
    }

    // Full antisymmetric coefficient vector against the sorted sample.
    let coef = |i: usize| -> f64 {
        let j = n - 1 - i;
        if i < j {
            -a[i]
        } else if i > j {
            a[j]
        } else {
            0.0
        }
    };

    // W as the squared correlation between coefficients and data; 1 − W is
    // formed directly to keep precision when W is close to 1.
    let xs: Vec<f64> = x.iter().map(|v| v / range).collect();
    let mean_x = xs.iter().sum::<f64>() / an;
    let mean_a = (0..n).map(coef).sum::<f64>() / an;
    let (mut ssa, mut ssx, mut sax) = (0.0, 0.0, 0.0);
    for (i, xi) in xs.iter().enumerate() {
        let da = coef(i) - mean_a;
        let dx = xi - mean_x;
        ssa += da * da;
        ssx += dx * dx;
        sax += da * dx;
    }
    let ssassx = (ssa * ssx).sqrt();
    let w1 = (ssassx - sax) * (ssassx + sax) / (ssa * ssx);
    let w = 1.0 - w1;

    let p = if n == 3 {
        // Exact distribution for three observations.
        let pi6 = 6.0 / std::f64::consts::PI;
        let stqr = std::f64::consts::FRAC_PI_3;
        (pi6 * (w.sqrt().asin() - stqr)).clamp(0.0, 1.0)
    } else {
        let mut y = w1.ln();
        let (mean, sd) = if n <= 11 {
            let gamma = poly(&G, an);
            if y >= gamma {
                return Ok(sw_result(w, 1e-99, n));
            }
            y = -(gamma - y).ln();
            (poly(&C3, an), poly(&C4, an).exp())
        } else {
            let ln_n = an.ln();
            (poly(&C5, ln_n), poly(&C6, ln_n).exp())
        };
        normal_sf((y - mean) / sd)
    };
    Ok(sw_result(w, p, n))
}

fn sw_result(w: f64, p: f64, n: usize) -> StatResult {
    StatResult {
        test: TestKind::ShapiroWilk,
        statistic: w,
        p_value: p.clamp(0.0, 1.0),
        n,
        exact: n == 3,
        tie_corrected: false,
        zeros_dropped: 0,
    }
}

/// Number of sign assignments of ranks 1..=n giving each positive-rank sum.
fn signed_rank_counts(n: usize) -> Vec<f64> {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0.0; max + 1];
    counts[0] = 1.0;
    for r in 1..=n {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped; the statistic is the sum of ranks of the
/// positive differences. Exact enumeration is used for ≤ 25 nonzero pairs
/// without tied magnitudes, otherwise the normal approximation with tie and
/// continuity corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<StatResult, StatsError> {
    wilcoxon_signed_rank_with(a, b, WilcoxonMethod::Auto)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Exact when possible, otherwise the normal approximation.
    Auto,
    /// Exact enumeration; errors on tied magnitudes or more than 25 pairs.
    Exact,
    /// Normal approximation regardless of sample size.
    Normal,
}

pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], method: WilcoxonMethod) -> Result<StatResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    check_finite(a)?;
    check_finite(b)?;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let zeros_dropped = a.len() - diffs.len();
    let n = diffs.len();
    if n == 0 {
        return Err(StatsError::AllDifferencesZero);
    }
    let mags: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = midranks(&mags);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .fold(0.0, |acc, (_, r)| acc + r);
    let nf = n as f64;

    let exact_ok = n <= WILCOXON_EXACT_MAX_N && ties.is_empty();
    if method == WilcoxonMethod::Exact && !exact_ok {
        return Err(StatsError::ExactUnavailable);
    }
    if exact_ok && method != WilcoxonMethod::Normal {
        let counts = signed_rank_counts(n);
        let total = 2f64.powi(n as i32);
        let w = w_plus.round() as usize;
        let lower: f64 = counts[..=w].iter().sum::<f64>() / total;
        let upper: f64 = counts[w..].iter().sum::<f64>() / total;
        let p = (2.0 * lower.min(upper)).min(1.0);
        return Ok(StatResult {
            test: TestKind::Wilcoxon,
            statistic: w_plus,
            p_value: p,
            n,
            exact: true,
            tie_corrected: false,
            zeros_dropped,
        });
    }

    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_sum(&ties) / 48.0;
    let dev = w_plus - mean;
    // Continuity correction; f64::signum(0.0) is 1.0, hence the guard.
    let corrected = if dev == 0.0 { 0.0 } else { dev - 0.5 * dev.signum() };
    let z = corrected / var.sqrt();
    let p = (2.0 * normal_sf(z.abs())).min(1.0);
    Ok(StatResult {
        test: TestKind::Wilcoxon,
        statistic: w_plus,
        p_value: p,
        n,
        exact: false,
        tie_corrected: !ties.is_empty(),
        zeros_dropped,
    })
}

/// Kruskal-Wallis H test with tie correction; p from chi-squared with g − 1 df.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<StatResult, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(groups.len()));
    }
    if let Some(i) = groups.iter().position(Vec::is_empty) {
        return Err(StatsError::EmptyGroup(i));
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    check_finite(&pooled)?;
    if pooled.iter().all(|v| *v == pooled[0]) {
        return Err(StatsError::AllIdentical);
    }
    let total = pooled.len() as f64;
    let (ranks, ties) = midranks(&pooled);
    let mut offset = 0;
    let mut sum_sq = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        sum_sq += r * r / g.len() as f64;
        offset += g.len();
    }
    let h_raw = 12.0 / (total * (total + 1.0)) * sum_sq - 3.0 * (total + 1.0);
    let correction = 1.0 - tie_sum(&ties) / (total * total * total - total);
    let mut h = h_raw / correction;
    if h < 1e-12 {
        h = 0.0;
    }
    let df = (groups.len() - 1) as f64;
    Ok(StatResult {
        test: TestKind::KruskalWallis,
        statistic: h,
        p_value: chi2_sf(h, df).clamp(0.0, 1.0),
        n: pooled.len(),
        exact: false,
        tie_corrected: !ties.is_empty(),
        zeros_dropped: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midranks_average_ties() {
        let (r, t) = midranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, vec![2]);
    }

    #[test]
    fn signed_rank_counts_match_enumeration() {
        for n in 1..=10usize {
            let mut brute = vec![0.0; n * (n + 1) / 2 + 1];
            for mask in 0u32..(1 << n) {
                let s: usize = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| i + 1).sum();
                brute[s] += 1.0;
            }
            assert_eq!(signed_rank_counts(n), brute);
        }
    }

    #[test]
    fn wilcoxon_one_to_five() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert_eq!(r.statistic, 15.0);
        assert_eq!(r.p_value, 0.0625);
        assert!(r.exact);
        let neg = wilcoxon_signed_rank(&[0.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(neg.statistic, 0.0);
        assert_eq!(neg.p_value, r.p_value);
    }

    #[test]
    fn wilcoxon_degenerate_inputs() {
        assert_eq!(
            wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0]).unwrap_err(),
            StatsError::AllDifferencesZero
        );
        assert_eq!(
            wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]).unwrap_err(),
            StatsError::LengthMismatch(1, 2)
        );
    }

    #[test]
    fn wilcoxon_tied_normal_approximation() {
        // SciPy: wilcoxon(d, correction=True, method="approx") → p = 1.036782974284865e-04,
        // statistic min(W+, W−) = 37.5; here W+ = 29·30/2 − 37.5.
        let d = [
            0.5, -1.0, 1.0, 2.0, 2.0, -3.0, 4.0, 4.0, 5.0, 0.0, 6.0, -7.0, 8.0, 9.0, 9.0, 10.0, 11.0, 12.0, -13.0,
            14.0, 15.0, 16.0, 17.0, 18.0, 19.0, 20.0, 21.0, 22.0, 23.0, 24.0,
        ];
        let r = wilcoxon_signed_rank(&d, &[0.0; 30]).unwrap();
        assert_eq!(r.zeros_dropped, 1);
        assert_eq!(r.n, 29);
        assert_eq!(r.statistic, 29.0 * 30.0 / 2.0 - 37.5);
        assert!(!r.exact && r.tie_corrected);
        assert!((r.p_value - 1.036782974284865e-04).abs() < 1e-12, "{}", r.p_value);
    }

    #[test]
    fn kruskal_three_separated_groups() {
        let r = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]).unwrap();
        assert!((r.statistic - 7.2).abs() < 1e-12);
        assert!((r.p_value - 0.02732372244729252).abs() < 1e-12);
    }

    #[test]
    fn kruskal_ties_reference() {
        // SciPy: kruskal([1,2,2,3],[2,3,4,4,5],[5,6]) → H = 6.665492957746479, p = 0.03569493493358824.
        let r = kruskal_wallis(&[vec![1.0, 2.0, 2.0, 3.0], vec![2.0, 3.0, 4.0, 4.0, 5.0], vec![5.0, 6.0]]).unwrap();
        assert!((r.statistic - 6.665492957746479).abs() < 1e-10);
        assert!((r.p_value - 0.03569493493358824).abs() < 1e-10);
        assert!(r.tie_corrected);
    }

    #[test]
    fn kruskal_identical_groups_and_errors() {
        let r = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(kruskal_wallis(&[vec![1.0]]).unwrap_err(), StatsError::TooFewGroups(1));
        assert_eq!(
            kruskal_wallis(&[vec![1.0], vec![]]).unwrap_err(),
            StatsError::EmptyGroup(1)
        );
        assert_eq!(
            kruskal_wallis(&[vec![2.0, 2.0], vec![2.0]]).unwrap_err(),
            StatsError::AllIdentical
        );
    }

    #[test]
    fn shapiro_errors() {
        assert!(matches!(
            shapiro_wilk(&[1.0, 2.0]),
            Err(StatsError::SampleSize { n: 2, .. })
        ));
        assert_eq!(shapiro_wilk(&[4.0; 10]).unwrap_err(), StatsError::ZeroVariance);
    }

    #[test]
    fn shapiro_uniform_grid() {
        // SciPy: shapiro(range(1, 51)) → W = 0.9555826875589973, p = 0.058091862177350316.
        let grid: Vec<f64> = (1..=50).map(f64::from).collect();
        let r = shapiro_wilk(&grid).unwrap();
        assert!((r.statistic - 0.9555826875589973).abs() < 1e-4);
        assert!((r.p_value - 0.058091862177350316).abs() < 1e-4);
    }
}
