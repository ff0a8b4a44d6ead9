//! Statistics for the timing and distance analyses: windowed Gaussian fits
//! with Q-Q diagnostics, median peaks, Spearman rank correlation, and the
//! two-sample Kolmogorov–Smirnov test.
//!
//! Everything here is pure and unit-agnostic (values are plain `f64`s; the
//! callers pass minutes or kilometres). Two methodological choices are
//! deliberate and documented:
//!
//! * Gaussian fits use windowed sample moments, not histogram least-squares;
//!   the Q-Q plot is the adequacy check.
//! * Spearman p-values are exact (full permutation enumeration) up to
//!   n = 10, because the t-approximation is unreliable at the 5–6 points
//!   per curve this pipeline produces; above that the usual t-approximation
//!   applies.

use thiserror::Error;

/// Maximum n for which the Spearman p-value is computed exactly.
pub const EXACT_SPEARMAN_MAX_N: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("input is constant; statistic undefined")]
    ConstantInput,
}

/// A Gaussian fitted to the in-window part of a sample by moments.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    /// Sample mean of the in-window points.
    pub mu: f64,
    /// Sample standard deviation (n−1 denominator); strictly positive.
    pub sigma: f64,
    /// The closed fit window `[lo, hi]`.
    pub window: (f64, f64),
    /// Number of in-window points used.
    pub n: usize,
}

/// Fits a Gaussian to the points of `sample` inside the closed `window` by
/// sample moments. Requires at least 10 in-window points and non-constant
/// values.
pub fn gaussian_fit_window(sample: &[f64], window: (f64, f64)) -> Result<GaussianFit, StatsError> {
    let (lo, hi) = window;
    let points: Vec<f64> = sample
        .iter()
        .copied()
        .filter(|&v| v >= lo && v <= hi)
        .collect();
    if points.len() < 10 {
        return Err(StatsError::InsufficientData {
            needed: 10,
            got: points.len(),
        });
    }
    let n = points.len() as f64;
    let mu = points.iter().sum::<f64>() / n;
    let var = points.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0);
    let sigma = var.sqrt();
    if sigma <= 0.0 {
        return Err(StatsError::ConstantInput);
    }
    Ok(GaussianFit {
        mu,
        sigma,
        window,
        n: points.len(),
    })
}

/// Standard normal quantile Φ⁻¹ via Acklam's rational approximation
/// (relative error below 1.2e-9 over (0, 1)): central rational polynomial
/// with √(−2 ln p) tail expansions outside p ∈ [0.02425, 0.97575].
#[allow(clippy::excessive_precision)] // coefficients quoted as published
pub fn inv_phi(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile defined on (0, 1), got {p}");

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
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Q-Q pairs against the fitted Gaussian: for the i-th order statistic the
/// theoretical quantile is `Φ⁻¹((i − 0.5)/n)·σ + μ`. Returns
/// `(theoretical, empirical)` in ascending order.
pub fn qq_points(sample: &[f64], fit: &GaussianFit) -> Vec<(f64, f64)> {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = (i as f64 + 0.5) / n;
            (inv_phi(p) * fit.sigma + fit.mu, v)
        })
        .collect()
}

/// Lower median: the ⌈n/2⌉-th order statistic, deterministic for even n.
pub fn median_peak(sample: &[f64]) -> Option<f64> {
    if sample.is_empty() {
        return None;
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted[sorted.len().div_ceil(2) - 1])
}

/// How a Spearman p-value was obtained.
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum PMethod {
    /// Full enumeration of all n! rank permutations.
    Exact,
    /// Student-t approximation with ν = n − 2.
    Approximate,
}

impl std::fmt::Display for PMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PMethod::Exact => "exact",
            PMethod::Approximate => "approximate",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpearmanResult {
    pub rho: f64,
    /// Two-sided p-value in (0, 1].
    pub p_value: f64,
    pub n: usize,
    pub method: PMethod,
}

/// Spearman rank correlation of `y` against a strictly ordered `x`
/// (bin indices). Ties in `y` receive midranks. The p-value is the exact
/// two-sided permutation probability for n ≤ 10 and the t-approximation
/// above.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<SpearmanResult, StatsError> {
    let n = x.len();
    assert_eq!(n, y.len(), "x and y must pair up");
    if n < 3 {
        return Err(StatsError::InsufficientData { needed: 3, got: n });
    }
    debug_assert!(
        x.windows(2).all(|w| w[0] < w[1]),
        "x must be strictly ascending"
    );
    if y.iter().all(|&v| v == y[0]) {
        return Err(StatsError::ConstantInput);
    }

    let rx: Vec<f64> = (1..=n).map(|i| i as f64).collect();
    let ry = midranks(y);
    let rho = pearson(&rx, &ry);

    let (p_value, method) = if n <= EXACT_SPEARMAN_MAX_N {
        (exact_permutation_p(&rx, &ry), PMethod::Exact)
    } else {
        let t = rho * ((n as f64 - 2.0) / (1.0 - rho * rho).max(1e-300)).sqrt();
        let nu = n as f64 - 2.0;
        let p = incomplete_beta(nu / 2.0, 0.5, nu / (nu + t * t));
        (p.clamp(1e-300, 1.0), PMethod::Approximate)
    };
    Ok(SpearmanResult {
        rho,
        p_value,
        n,
        method,
    })
}

/// Midranks: ties share the average of the ranks they span.
fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

/// Exact two-sided permutation p-value: the fraction of all n! orderings of
/// the y-ranks whose |ρ| reaches the observed |ρ|. Since the rank norms are
/// permutation-invariant, comparing |ρ| reduces to comparing the absolute
/// centered dot product, which Heap's algorithm lets us update in O(1) per
/// generated permutation. Ranks are half-integers, so the running dot
/// product stays exact in floating point.
fn exact_permutation_p(x_ranks: &[f64], y_ranks: &[f64]) -> f64 {
    let n = x_ranks.len();
    let mx = x_ranks.iter().sum::<f64>() / n as f64;
    let xc: Vec<f64> = x_ranks.iter().map(|&v| v - mx).collect();
    let mut y = y_ranks.to_vec();

    let mut dot: f64 = xc.iter().zip(&y).map(|(a, b)| a * b).sum();
    let observed = dot.abs();
    const TOL: f64 = 1e-9;

    let mut hits: u64 = 0;
    let mut total: u64 = 0;
    let tally = |dot: f64, hits: &mut u64, total: &mut u64| {
        *total += 1;
        if dot.abs() >= observed - TOL {
            *hits += 1;
        }
    };
    tally(dot, &mut hits, &mut total);

    // Heap's algorithm, iterative form; each step swaps exactly two slots.
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            let j = if i % 2 == 0 { 0 } else { c[i] };
            dot += (xc[j] - xc[i]) * (y[i] - y[j]);
            y.swap(j, i);
            tally(dot, &mut hits, &mut total);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

/// Regularized incomplete beta I_x(a, b) by the standard continued fraction
/// (modified Lentz evaluation), using the symmetry transform for fast
/// convergence.
fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-14;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..200 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos log-gamma (g = 7, 9 coefficients), accurate to ~1e-13 for the
/// positive arguments used here.
#[allow(clippy::excessive_precision)] // coefficients quoted as published
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KsResult {
    /// Supremum distance between the two empirical CDFs, in [0, 1].
    pub d_statistic: f64,
    /// Two-sided p-value in (0, 1] from the asymptotic Kolmogorov series.
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
}

/// Two-sample two-sided Kolmogorov–Smirnov test. D is found by a merge
/// sweep over the pooled sorted values (advancing both sides through ties);
/// the p-value uses the Kolmogorov series `2·Σ (−1)^{j−1} e^{−2 j² λ²}`
/// with λ = √(n₁n₂/(n₁+n₂))·D, truncated when terms drop below 1e-12.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    assert!(
        !a.is_empty() && !b.is_empty(),
        "both samples must be non-empty"
    );
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);

    let (n1, n2) = (sa.len(), sb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n1 || j < n2 {
        let next = match (sa.get(i), sb.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        while i < n1 && sa[i] == next {
            i += 1;
        }
        while j < n2 && sb[j] == next {
            j += 1;
        }
        d = d.max((i as f64 / n1 as f64 - j as f64 / n2 as f64).abs());
    }

    let ne = (n1 as f64 * n2 as f64) / (n1 + n2) as f64;
    let lambda = ne.sqrt() * d;
    KsResult {
        d_statistic: d,
        p_value: kolmogorov_p(lambda),
        n1,
        n2,
    }
}

fn kolmogorov_p(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0; // the series is numerically 1 below any useful λ
    }
    let mut p = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64).powi(2) * lambda * lambda).exp();
        if term < 1e-12 {
            break;
        }
        p += sign * term;
        sign = -sign;
    }
    (2.0 * p).clamp(1e-300, 1.0)
}
