//! Small numerical toolkit: compensated sums, running moments, batch-means
//! ratio errors, weighted line fits, trapezoid quadrature and the two-sample
//! Kolmogorov–Smirnov statistic.

use serde::{Deserialize, Serialize};

use crate::real::Real;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CompensatedSum<F> {
    sum: F,
    comp: F,
}

impl<F: Real> CompensatedSum<F> {
    pub fn new() -> Self {
        Self { sum: F::zero(), comp: F::zero() }
    }

    #[inline]
    pub fn add(&mut self, x: F) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> F {
        self.sum + self.comp
    }
}

/// Welford accumulator for mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats<F> {
    n: u64,
    mean: F,
    m2: F,
}

impl<F: Real> RunningStats<F> {
    pub fn new() -> Self {
        Self { n: 0, mean: F::zero(), m2: F::zero() }
    }

    pub fn push(&mut self, x: F) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / F::c(self.n as f64);
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> F {
        self.mean
    }

    /// Unbiased sample variance (zero with fewer than two samples).
    pub fn variance(&self) -> F {
        if self.n < 2 {
            F::zero()
        } else {
            self.m2 / F::c((self.n - 1) as f64)
        }
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> F {
        if self.n < 2 {
            F::zero()
        } else {
            (self.variance() / F::c(self.n as f64)).sqrt()
        }
    }

    pub fn merge(&mut self, other: &Self) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        let (na, nb, nn) = (F::c(self.n as f64), F::c(other.n as f64), F::c(n as f64));
        self.mean += d * nb / nn;
        self.m2 += other.m2 + d * d * na * nb / nn;
        self.n = n;
    }
}

/// Mean and standard error of a list of values.
pub fn mean_stderr<F: Real>(xs: &[F]) -> (F, F) {
    let mut s = RunningStats::new();
    for &x in xs {
        s.push(x);
    }
    (s.mean(), s.stderr())
}

/// Ratio `sum(y) / sum(x)` over paired batch totals with a delta-method
/// standard error computed from the batch-to-batch spread.
pub fn ratio_with_stderr<F: Real>(y: &[F], x: &[F]) -> (F, F) {
    assert_eq!(y.len(), x.len(), "paired batches");
    let b = y.len();
    let sy: F = y.iter().copied().sum();
    let sx: F = x.iter().copied().sum();
    let r = sy / sx;
    if b < 2 {
        return (r, F::nan());
    }
    let xbar = sx / F::usize(b);
    let ss: F = y
        .iter()
        .zip(x)
        .map(|(&yi, &xi)| {
            let z = yi - r * xi;
            z * z
        })
        .sum();
    let var = ss / F::usize(b - 1) / F::usize(b) / (xbar * xbar);
    (r, var.sqrt())
}

/// Weighted least-squares line `y = level + slope * (x - center)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit<F> {
    pub center: F,
    pub level: F,
    pub slope: F,
    pub level_stderr: F,
    pub slope_stderr: F,
}

/// Fits a line with weights `w` (inverse variances). With `center = None`
/// the weighted mean of `x` is used, which decorrelates level and slope.
pub fn weighted_line_fit<F: Real>(x: &[F], y: &[F], w: &[F], center: Option<F>) -> Option<LineFit<F>> {
    let n = x.len();
    if n < 2 || y.len() != n || w.len() != n {
        return None;
    }
    let sw: F = w.iter().copied().sum();
    if !(sw > F::zero()) {
        return None;
    }
    let c = center.unwrap_or_else(|| x.iter().zip(w).map(|(&xi, &wi)| xi * wi).sum::<F>() / sw);
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (F::zero(), F::zero(), F::zero(), F::zero(), F::zero());
    for i in 0..n {
        let u = x[i] - c;
        s0 += w[i];
        s1 += w[i] * u;
        s2 += w[i] * u * u;
        t0 += w[i] * y[i];
        t1 += w[i] * u * y[i];
    }
    let det = s0 * s2 - s1 * s1;
    if !(det > F::zero()) {
        return None;
    }
    let level = (s2 * t0 - s1 * t1) / det;
    let slope = (s0 * t1 - s1 * t0) / det;
    Some(LineFit { center: c, level, slope, level_stderr: (s2 / det).sqrt(), slope_stderr: (s0 / det).sqrt() })
}

/// Trapezoid rule on a uniform grid with spacing `h`.
pub fn trapezoid<F: Real>(h: F, y: &[F]) -> F {
    match y.len() {
        0 | 1 => F::zero(),
        n => {
            let inner: F = y[1..n - 1].iter().copied().sum();
            h * (inner + (y[0] + y[n - 1]) * F::c(0.5))
        }
    }
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_statistic<F: Real>(a: &[F], b: &[F]) -> F {
    let mut a: Vec<F> = a.to_vec();
    let mut b: Vec<F> = b.to_vec();
    let cmp = |p: &F, q: &F| p.partial_cmp(q).unwrap_or(std::cmp::Ordering::Equal);
    a.sort_by(cmp);
    b.sort_by(cmp);
    let (na, nb) = (F::usize(a.len()), F::usize(b.len()));
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = F::zero();
    while i < a.len() && j < b.len() {
        let v = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        let gap = (F::usize(i) / na - F::usize(j) / nb).abs();
        if gap > d {
            d = gap;
        }
    }
    d
}

/// Asymptotic two-sample KS critical value at the 1% level.
pub fn ks_critical_1pct<F: Real>(n: usize, m: usize) -> F {
    let (n, m) = (F::usize(n), F::usize(m));
    F::c(1.628) * ((n + m) / (n * m)).sqrt()
}
