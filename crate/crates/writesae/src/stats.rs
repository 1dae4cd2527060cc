//! Self-contained statistical toolkit used by every experiment module.
//!
//! Conventions: two-sided p-values throughout; midranks for ties; Wilcoxon
//! drops zero differences (Pratt variant behind a flag). Rank tests switch to
//! exact enumeration on small inputs and a tie-corrected normal approximation
//! above that. Resampling is seeded and deterministic.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Ci {
    pub low: f64,
    pub high: f64,
    pub level: f64,
}

/// Outcome of a hypothesis test.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p: f64,
    /// `true` when the inputs were degenerate for this test (e.g. no nonzero
    /// differences for Wilcoxon, constant input for a correlation).
    pub degenerate: bool,
}

// ---------------------------------------------------------------------------
// Normal distribution helpers
// ---------------------------------------------------------------------------

/// Complementary error function (Numerical Recipes rational approximation,
/// relative error ≤ 1.2e-7; adequate for p-values).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Two-sided p from a z statistic.
fn two_sided_p(z: f64) -> f64 {
    (erfc(z.abs() / std::f64::consts::SQRT_2)).min(1.0)
}

/// Inverse standard normal CDF (Acklam's algorithm, |rel err| < 1.15e-9).
pub fn norm_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile requires p in (0,1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -norm_quantile(1.0 - p)
    }
}

// ---------------------------------------------------------------------------
// Wilson score interval
// ---------------------------------------------------------------------------

/// Wilson score interval for a binomial proportion.
pub fn wilson_ci(successes: usize, n: usize, level: f64) -> Result<Ci> {
    if n == 0 {
        return Err(Error::Config("wilson_ci requires n >= 1".into()));
    }
    if successes > n {
        return Err(Error::Config("wilson_ci requires successes <= n".into()));
    }
    let z = norm_quantile(0.5 + level / 2.0);
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = p + z2 / (2.0 * nf);
    let rad = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    Ok(Ci { low: ((center - rad) / denom).max(0.0), high: ((center + rad) / denom).min(1.0), level })
}

// ---------------------------------------------------------------------------
// Ranks
// ---------------------------------------------------------------------------

/// Midranks (1-based) of a slice.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Σ(t³ − t) over tie groups, used in variance corrections.
fn tie_term(sorted: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        acc += t * t * t - t;
        i = j + 1;
    }
    acc
}

// ---------------------------------------------------------------------------
// Cliff's delta
// ---------------------------------------------------------------------------

/// Cliff's δ = (#{x_i > y_j} − #{x_i < y_j}) / (|x||y|).
///
/// Computed by sorting y and binary-searching, which equals the O(nm)
/// double loop exactly (integer counts).
pub fn cliffs_delta(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Config("cliffs_delta requires nonempty inputs".into()));
    }
    let mut ys = y.to_vec();
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut gt: i64 = 0;
    let mut lt: i64 = 0;
    for &xi in x {
        let below = ys.partition_point(|&v| v < xi) as i64;
        let at_or_below = ys.partition_point(|&v| v <= xi) as i64;
        gt += below;
        lt += ys.len() as i64 - at_or_below;
    }
    Ok((gt - lt) as f64 / (x.len() as f64 * y.len() as f64))
}

// ---------------------------------------------------------------------------
// Mann-Whitney U
// ---------------------------------------------------------------------------

fn binom(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

fn mann_whitney_u_stat(x: &[f64], y: &[f64]) -> f64 {
    let mut pooled: Vec<f64> = x.to_vec();
    pooled.extend_from_slice(y);
    let ranks = midranks(&pooled);
    let r1: f64 = ranks[..x.len()].iter().sum();
    r1 - (x.len() * (x.len() + 1)) as f64 / 2.0
}

/// Two-sided Mann-Whitney U test. Exact enumeration over group assignments
/// on small inputs, tie-corrected normal approximation otherwise.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Config("mann_whitney_u requires nonempty inputs".into()));
    }
    let n1 = x.len();
    let n2 = y.len();
    let u = mann_whitney_u_stat(x, y);
    let exact_feasible = binom(n1 + n2, n1) <= 200_000.0;
    if exact_feasible {
        let p = mw_exact_p(x, y, u);
        return Ok(TestResult { statistic: u, p, degenerate: false });
    }
    let n = (n1 + n2) as f64;
    let mu = (n1 * n2) as f64 / 2.0;
    let mut pooled: Vec<f64> = x.to_vec();
    pooled.extend_from_slice(y);
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ties = tie_term(&pooled);
    let var = (n1 * n2) as f64 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(TestResult { statistic: u, p: 1.0, degenerate: true });
    }
    // Continuity correction toward the mean.
    let diff = u - mu;
    let z = (diff - 0.5 * diff.signum()) / var.sqrt();
    Ok(TestResult { statistic: u, p: two_sided_p(z), degenerate: false })
}

/// Exact two-sided Mann-Whitney p: enumerate all C(n+m, n) assignments of the
/// pooled values, p = 2·min(P(U ≤ u), P(U ≥ u)) capped at 1.
fn mw_exact_p(x: &[f64], y: &[f64], u_obs: f64) -> f64 {
    let n1 = x.len();
    let n = n1 + y.len();
    let mut pooled: Vec<f64> = x.to_vec();
    pooled.extend_from_slice(y);
    let ranks = midranks(&pooled);
    let offset = (n1 * (n1 + 1)) as f64 / 2.0;
    let mut le = 0u64;
    let mut ge = 0u64;
    let mut total = 0u64;
    let mut comb: Vec<usize> = (0..n1).collect();
    loop {
        let r1: f64 = comb.iter().map(|&i| ranks[i]).sum();
        let u = r1 - offset;
        // Tolerate float fuzz from midrank sums.
        if u <= u_obs + 1e-9 {
            le += 1;
        }
        if u >= u_obs - 1e-9 {
            ge += 1;
        }
        total += 1;
        // Next combination in lexicographic order.
        let mut i = n1;
        loop {
            if i == 0 {
                return {
                    let pl = le as f64 / total as f64;
                    let pg = ge as f64 / total as f64;
                    (2.0 * pl.min(pg)).min(1.0)
                };
            }
            i -= 1;
            if comb[i] != i + n - n1 {
                break;
            }
        }
        comb[i] += 1;
        for j in i + 1..n1 {
            comb[j] = comb[j - 1] + 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank
// ---------------------------------------------------------------------------

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped by default; `pratt` keeps them in the ranking
/// before dropping their ranks. Exact enumeration of all sign patterns for
/// ≤ 20 nonzero differences, normal approximation otherwise.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], pratt: bool) -> Result<TestResult> {
    if x.len() != y.len() {
        return Err(Error::Shape("wilcoxon requires paired samples of equal length".into()));
    }
    if x.is_empty() {
        return Err(Error::Config("wilcoxon requires nonempty inputs".into()));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranked: Vec<(f64, f64)> = if pratt {
        // Rank including zeros, then discard zero entries.
        let ranks = midranks(&abs);
        diffs.iter().zip(ranks).filter(|(d, _)| **d != 0.0).map(|(d, r)| (*d, r)).collect()
    } else {
        let nz: Vec<f64> = diffs.iter().cloned().filter(|d| *d != 0.0).collect();
        let nz_abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
        let ranks = midranks(&nz_abs);
        nz.into_iter().zip(ranks).collect()
    };
    let n = ranked.len();
    if n == 0 {
        return Ok(TestResult { statistic: 0.0, p: 1.0, degenerate: true });
    }
    let w_plus: f64 = ranked.iter().filter(|(d, _)| *d > 0.0).map(|(_, r)| r).sum();
    if n <= 20 {
        // Enumerate all sign patterns of the observed ranks.
        let ranks: Vec<f64> = ranked.iter().map(|(_, r)| *r).collect();
        let mut le = 0u64;
        let mut ge = 0u64;
        let total = 1u64 << n;
        for mask in 0..total {
            let mut w = 0.0;
            for (i, r) in ranks.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    w += r;
                }
            }
            if w <= w_plus + 1e-9 {
                le += 1;
            }
            if w >= w_plus - 1e-9 {
                ge += 1;
            }
        }
        let p = (2.0 * (le.min(ge) as f64) / total as f64).min(1.0);
        return Ok(TestResult { statistic: w_plus, p, degenerate: false });
    }
    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let mut sorted_abs: Vec<f64> = ranked.iter().map(|(d, _)| d.abs()).collect();
    sorted_abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term(&sorted_abs) / 48.0;
    if var <= 0.0 {
        return Ok(TestResult { statistic: w_plus, p: 1.0, degenerate: true });
    }
    let diff = w_plus - mu;
    let z = (diff - 0.5 * diff.signum()) / var.sqrt();
    Ok(TestResult { statistic: w_plus, p: two_sided_p(z), degenerate: false })
}

// ---------------------------------------------------------------------------
// Kolmogorov-Smirnov
// ---------------------------------------------------------------------------

/// Two-sample two-sided KS test with the asymptotic Kolmogorov distribution.
pub fn ks_2samp(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Config("ks_2samp requires nonempty inputs".into()));
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (n1, n2) = (xs.len() as f64, ys.len() as f64);
    let mut d: f64 = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < xs.len() && j < ys.len() {
        let t = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= t {
            i += 1;
        }
        while j < ys.len() && ys[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n1 - j as f64 / n2).abs());
    }
    let ne = (n1 * n2 / (n1 + n2)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    let mut p = 0.0;
    for jj in 1..=100 {
        let jf = jj as f64;
        p += 2.0 * (-1.0f64).powi(jj - 1) * (-2.0 * jf * jf * lambda * lambda).exp();
    }
    Ok(TestResult { statistic: d, p: p.clamp(0.0, 1.0), degenerate: false })
}

// ---------------------------------------------------------------------------
// Correlations
// ---------------------------------------------------------------------------

/// Pearson correlation; errors on constant input (undefined).
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape("pearson_r requires equal-length inputs of size >= 2".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation undefined for constant input".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation via midranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson_r(&midranks(x), &midranks(y))
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

/// Percentile bootstrap CI resampling whole clusters with replacement.
///
/// `stat` sees the values of the resampled clusters pooled in draw order.
/// With singleton clusters this reduces to the ordinary bootstrap.
pub fn cluster_bootstrap(
    clusters: &[Vec<f64>],
    stat: &dyn Fn(&[f64]) -> f64,
    resamples: usize,
    seed: u64,
    level: f64,
) -> Result<Ci> {
    cluster_bootstrap_groups(clusters, &|groups| {
        let pooled: Vec<f64> = groups.iter().flat_map(|g| g.iter().cloned()).collect();
        stat(&pooled)
    }, resamples, seed, level)
}

/// Cluster bootstrap where the statistic sees the group structure of the
/// resample (needed for per-cluster means and similar).
pub fn cluster_bootstrap_groups(
    clusters: &[Vec<f64>],
    stat: &dyn Fn(&[&[f64]]) -> f64,
    resamples: usize,
    seed: u64,
    level: f64,
) -> Result<Ci> {
    if clusters.len() < 2 {
        return Err(Error::Degenerate("cluster bootstrap requires >= 2 clusters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(resamples);
    let mut draw: Vec<&[f64]> = Vec::with_capacity(clusters.len());
    for _ in 0..resamples {
        draw.clear();
        for _ in 0..clusters.len() {
            let c = rng.gen_range(0..clusters.len());
            draw.push(&clusters[c]);
        }
        stats.push(stat(&draw));
    }
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    let lo_idx = (alpha * (resamples - 1) as f64).floor() as usize;
    let hi_idx = ((1.0 - alpha) * (resamples - 1) as f64).ceil() as usize;
    Ok(Ci { low: stats[lo_idx], high: stats[hi_idx.min(resamples - 1)], level })
}

// ---------------------------------------------------------------------------
// Medians
// ---------------------------------------------------------------------------

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// (median, MAD/√n): median and the median absolute deviation scaled by 1/√n.
pub fn median_mad(values: &[f64]) -> (f64, f64) {
    let med = median(values);
    let devs: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    let mad = median(&devs);
    (med, mad / (values.len() as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Multiple testing
// ---------------------------------------------------------------------------

/// Holm step-down adjusted p-values (Bonferroni is the first step of the
/// same ladder). Intended for small families (≤ 8 hypotheses).
pub fn holm_adjust(ps: &[f64]) -> Vec<f64> {
    let m = ps.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| ps[a].partial_cmp(&ps[b]).unwrap());
    let mut adj = vec![0.0; m];
    let mut running = 0.0f64;
    for (rank, &i) in idx.iter().enumerate() {
        let val = ((m - rank) as f64 * ps[i]).min(1.0);
        running = running.max(val);
        adj[i] = running;
    }
    adj
}
