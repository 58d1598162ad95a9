//! The Poisson defect `psi` of `f(x) = nu(alpha e^x, beta e^x]`, the moments
//! of `psi`, the smoothing operator and the tail constants.
//!
//! All measure-valued inputs share the convention `nu(1, e] = 1`.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{fit_plateau, CumulativeMass, MeasureError, MeasureEstimate, PlateauFit, TailProfile, NORMALIZATION};
use crate::model::{sample_innovation, ChainKind, Innovation, ModelError, ModelSpec};
use crate::real::Real;
use crate::stats::{trapezoid, RunningStats};

/// Largest clipped fraction tolerated by [`mu_bar_convolve`].
pub const MAX_CLIPPED_FRACTION: f64 = 1e-3;
/// Largest `|psi|` at the grid ends relative to its peak.
pub const MAX_BOUNDARY_RATIO: f64 = 1e-3;
/// Number of independent batches of draws used for Monte Carlo errors.
pub const DEFAULT_PSI_BATCHES: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstantsError {
    #[error("grid needs at least two points and a positive uniform spacing")]
    InvalidGrid,
    #[error("clipped mass fraction {fraction:.3e} exceeds {limit:.0e}; widen the grid")]
    GridTooNarrow { fraction: f64, limit: f64 },
    #[error("grids do not match: {0}")]
    GridMismatch(String),
    #[error("|psi| at the grid boundary is {ratio:.3e} of its peak (limit {limit:.0e}); widen the grid")]
    BoundaryDecay { ratio: f64, limit: f64 },
    #[error("operation needs a {expected:?} model, got {found:?}")]
    WrongKind { expected: ChainKind, found: ChainKind },
    #[error("at least one Monte Carlo draw is required")]
    NoDraws,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Uniform grid `lo + i h`, `i < n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid<F> {
    pub lo: F,
    pub h: F,
    pub n: usize,
}

impl<F: Real> UniformGrid<F> {
    /// Grid from `lo` to `hi` (inclusive up to rounding) with step `h`.
    pub fn span(lo: F, hi: F, h: F) -> Result<Self, ConstantsError> {
        if !(h > F::zero()) || !(hi > lo) {
            return Err(ConstantsError::InvalidGrid);
        }
        let n = ((hi - lo) / h + F::c(1e-9)).floor().to_usize().unwrap_or(0) + 1;
        if n < 2 {
            return Err(ConstantsError::InvalidGrid);
        }
        Ok(Self { lo, h, n })
    }

    /// Recovers the grid from points, which must be uniformly spaced.
    pub fn from_points(x: &[F]) -> Result<Self, ConstantsError> {
        if x.len() < 2 {
            return Err(ConstantsError::InvalidGrid);
        }
        let h = (x[x.len() - 1] - x[0]) / F::usize(x.len() - 1);
        if !(h > F::zero()) {
            return Err(ConstantsError::InvalidGrid);
        }
        let tol = h * F::c(1e-6);
        for (i, &xi) in x.iter().enumerate() {
            if (xi - (x[0] + h * F::usize(i))).abs() > tol {
                return Err(ConstantsError::InvalidGrid);
            }
        }
        Ok(Self { lo: x[0], h, n: x.len() })
    }

    #[inline]
    pub fn x(&self, i: usize) -> F {
        self.lo + self.h * F::usize(i)
    }

    pub fn hi(&self) -> F {
        self.x(self.n - 1)
    }

    pub fn points(&self) -> Vec<F> {
        (0..self.n).map(|i| self.x(i)).collect()
    }

    /// Linear interpolation of `f` at `t`; `None` outside the grid.
    #[inline]
    pub fn interpolate(&self, f: &[F], t: F) -> Option<F> {
        let u = (t - self.lo) / self.h;
        if !(u >= F::zero()) || u > F::usize(self.n - 1) {
            return None;
        }
        let i = u.floor().to_usize().unwrap_or(0).min(self.n - 2);
        let w = u - F::usize(i);
        Some(f[i] + (f[i + 1] - f[i]) * w)
    }
}

/// Reach of `|log A|`: outside it the law has mass below `10^-4`.
pub fn log_a_reach<F: Real>(model: &ModelSpec<F>) -> F {
    use crate::model::ALaw;
    let reach = |m: F, s2: F| m.abs() + F::c(4.0) * s2.sqrt();
    match &model.a_law {
        ALaw::LogNormal { m, s2 } => reach(*m, *s2),
        ALaw::LogMixture { components } => components.iter().map(|c| reach(c.m, c.s2)).fold(F::zero(), |a, b| if b > a { b } else { a }),
    }
}

/// `(mu_bar * f)` at chosen points, with per-point Monte Carlo errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Convolution<F> {
    pub x: Vec<F>,
    pub values: Vec<F>,
    pub stderr: Vec<F>,
    /// Share of draws whose shifted point left the grid (clamped to the edge value).
    pub clipped_fraction: f64,
}

/// `(mu_bar * f)(x) = E f(x - log A)` by Monte Carlo with linear
/// interpolation of `f` on `grid`, evaluated at the points `at`.
///
/// Draws of `log A` are shared across points. Shifted points outside the grid
/// take the nearest edge value and are counted; more than
/// [`MAX_CLIPPED_FRACTION`] of them is an error.
pub fn mu_bar_convolve<F: Real, R: Rng + ?Sized>(
    grid: &UniformGrid<F>,
    f: &[F],
    at: &[F],
    model: &ModelSpec<F>,
    mc_draws: usize,
    rng: &mut R,
) -> Result<Convolution<F>, ConstantsError> {
    if f.len() != grid.n {
        return Err(ConstantsError::GridMismatch(format!("{} values on a {}-point grid", f.len(), grid.n)));
    }
    if mc_draws == 0 {
        return Err(ConstantsError::NoDraws);
    }
    let logs: Vec<F> = (0..mc_draws).map(|_| model.a_law.sample_log(rng)).collect();
    convolve_logs(grid, f, at, &logs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiMethod {
    /// Monte Carlo over the input law of the defining difference of interval masses.
    FromDefinition,
    /// `mu_bar * f - f` from a tail profile.
    FromResidual,
}

/// `psi` on a uniform grid, with the ingredients of its error bars.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiGrid<F> {
    pub alpha: F,
    pub beta: F,
    pub x: Vec<F>,
    pub psi: Vec<F>,
    /// Combined Monte Carlo and replica standard error per point.
    pub stderr: Vec<F>,
    pub method: PsiMethod,
    /// Share of interval evaluations that reached beyond the populated support.
    pub truncated_fraction: f64,
    /// `psi` recomputed on independent batches of draws (Monte Carlo spread).
    pub batch_psi: Vec<Vec<F>>,
    /// `psi` recomputed on each replica measure with all draws (measure spread).
    pub replica_psi: Vec<Vec<F>>,
}

impl<F: Real> PsiGrid<F> {
    /// A `psi` without error information, e.g. a synthetic test input.
    pub fn exact(alpha: F, beta: F, x: Vec<F>, psi: Vec<F>) -> Self {
        let n = x.len();
        Self {
            alpha,
            beta,
            x,
            psi,
            stderr: vec![F::zero(); n],
            method: PsiMethod::FromDefinition,
            truncated_fraction: 0.0,
            batch_psi: Vec::new(),
            replica_psi: Vec::new(),
        }
    }

    /// CSV with columns `x,psi,stderr,method`.
    pub fn to_csv(&self, meta: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in meta {
            let _ = writeln!(out, "# {k}={v}");
        }
        let _ = writeln!(out, "# alpha={}", self.alpha);
        let _ = writeln!(out, "# beta={}", self.beta);
        let _ = writeln!(out, "# truncated_fraction={}", self.truncated_fraction);
        out.push_str("x,psi,stderr,method\n");
        let method = match self.method {
            PsiMethod::FromDefinition => "from_definition",
            PsiMethod::FromResidual => "from_residual",
        };
        for i in 0..self.x.len() {
            let _ = writeln!(out, "{},{},{},{}", self.x[i], self.psi[i], self.stderr[i], method);
        }
        out
    }
}

/// `nu{s : lo < Phi(s) <= hi}` for the chain's monotone step map `Phi`.
fn preimage_mass(c: &CumulativeMass, kind: ChainKind, inn: &Innovation<f64>, lo: f64, hi: f64) -> (f64, bool) {
    let m = match kind {
        ChainKind::Affine => c.interval((lo - inn.b) / inn.a, (hi - inn.b) / inn.a),
        ChainKind::Letac => {
            let floor = inn.b + inn.a * inn.c;
            if hi < floor {
                return (0.0, false);
            }
            if lo < floor {
                c.up_to((hi - inn.b) / inn.a)
            } else {
                c.interval((lo - inn.b) / inn.a, (hi - inn.b) / inn.a)
            }
        }
        ChainKind::Extremal => {
            if hi < inn.d {
                return (0.0, false);
            }
            if lo < inn.d {
                c.up_to(hi / inn.a)
            } else {
                c.interval(lo / inn.a, hi / inn.a)
            }
        }
    };
    (m.value, m.truncated)
}

/// The defining difference for one draw at one point.
#[inline]
fn psi_term(c: &CumulativeMass, kind: ChainKind, inn: &Innovation<f64>, lo: f64, hi: f64) -> (f64, bool) {
    let scaled = c.interval(lo / inn.a, hi / inn.a);
    let (pre, t) = preimage_mass(c, kind, inn, lo, hi);
    (scaled.value - pre, scaled.truncated || t)
}

fn to_f64_innovation<F: Real>(inn: &Innovation<F>) -> Innovation<f64> {
    Innovation { log_a: inn.log_a.f64(), a: inn.a.f64(), b: inn.b.f64(), c: inn.c.f64(), d: inn.d.f64() }
}

fn spread_stderr(rows: &[Vec<f64>], i: usize) -> f64 {
    if rows.len() < 2 {
        return 0.0;
    }
    let mut s = RunningStats::new();
    rows.iter().for_each(|r| s.push(r[i]));
    s.stderr()
}

/// `psi(x) = E[nu{s : a s in I_x} - nu{s : Phi(s) in I_x}]` with
/// `I_x = (alpha e^x, beta e^x]`, by Monte Carlo over the input law.
///
/// Interval masses come from the pooled histogram, with log-uniform
/// apportionment inside bins. Monte Carlo errors come from `batches`
/// independent groups of draws; measure errors from recomputing `psi` on each
/// replica histogram with the same draws.
#[allow(clippy::too_many_arguments)]
pub fn psi_from_definition<F: Real, R: Rng + ?Sized>(
    model: &ModelSpec<F>,
    nu: &MeasureEstimate<F>,
    alpha: F,
    beta: F,
    x_grid: &[F],
    mc_draws: usize,
    batches: usize,
    rng: &mut R,
) -> Result<PsiGrid<F>, ConstantsError> {
    model.check_shape()?;
    if mc_draws == 0 {
        return Err(ConstantsError::NoDraws);
    }
    let batches = batches.clamp(1, mc_draws);
    let draws: Vec<Innovation<f64>> = (0..mc_draws).map(|_| to_f64_innovation(&sample_innovation(model, rng))).collect();
    let kind = model.chain_kind;
    let pooled = nu.pooled.cumulative();
    let replicas: Vec<CumulativeMass> = nu.replicas.iter().map(|h| h.cumulative()).collect();
    let (la, lb) = (alpha.f64().ln(), beta.f64().ln());
    let n = x_grid.len();
    let mut psi = vec![0.0; n];
    let mut batch_psi = vec![vec![0.0; n]; batches];
    let mut replica_psi = vec![vec![0.0; n]; replicas.len()];
    let mut truncated = 0u64;
    for (j, inn) in draws.iter().enumerate() {
        let b = j * batches / mc_draws;
        for (i, &x) in x_grid.iter().enumerate() {
            let (lo, hi) = ((la + x.f64()).exp(), (lb + x.f64()).exp());
            let (v, t) = psi_term(&pooled, kind, inn, lo, hi);
            psi[i] += v;
            batch_psi[b][i] += v;
            truncated += u64::from(t);
            for (r, c) in replicas.iter().enumerate() {
                replica_psi[r][i] += psi_term(c, kind, inn, lo, hi).0;
            }
        }
    }
    let mut counts = vec![0usize; batches];
    for j in 0..mc_draws {
        counts[j * batches / mc_draws] += 1;
    }
    psi.iter_mut().for_each(|v| *v /= mc_draws as f64);
    for (row, &c) in batch_psi.iter_mut().zip(&counts) {
        row.iter_mut().for_each(|v| *v /= c as f64);
    }
    for row in &mut replica_psi {
        row.iter_mut().for_each(|v| *v /= mc_draws as f64);
    }
    let stderr: Vec<f64> = (0..n)
        .map(|i| {
            let mc = spread_stderr(&batch_psi, i);
            let rep = spread_stderr(&replica_psi, i);
            (mc * mc + rep * rep).sqrt()
        })
        .collect();
    let conv = |v: Vec<f64>| v.into_iter().map(F::c).collect::<Vec<F>>();
    Ok(PsiGrid {
        alpha,
        beta,
        x: x_grid.to_vec(),
        psi: conv(psi),
        stderr: conv(stderr),
        method: PsiMethod::FromDefinition,
        truncated_fraction: truncated as f64 / (n * mc_draws).max(1) as f64,
        batch_psi: batch_psi.into_iter().map(conv).collect(),
        replica_psi: replica_psi.into_iter().map(conv).collect(),
    })
}

/// Grid points of a profile far enough from both ends that shifts by
/// `log A` stay inside the grid for all but a negligible share of draws.
pub fn interior_points<F: Real>(grid: &UniformGrid<F>, model: &ModelSpec<F>) -> Vec<F> {
    let reach = log_a_reach(model);
    grid.points().into_iter().filter(|&x| x - reach >= grid.lo && x + reach <= grid.hi()).collect()
}

fn profile_values<F: Real>(profile: &TailProfile<F>) -> Result<(UniformGrid<F>, Vec<F>), ConstantsError> {
    let x: Vec<F> = profile.points.iter().map(|p| p.x).collect();
    let grid = UniformGrid::from_points(&x)?;
    let f: Option<Vec<F>> = profile.points.iter().map(|p| p.f_hat).collect();
    let f = f.ok_or_else(|| ConstantsError::GridMismatch("profile has missing points".into()))?;
    Ok((grid, f))
}

/// `psi = mu_bar * f - f` at the interior points of the profile grid.
///
/// This route is circular as a check of the Poisson equation and serves only
/// as a cross-reference for the definition route.
pub fn psi_from_residual<F: Real, R: Rng + ?Sized>(
    profile: &TailProfile<F>,
    model: &ModelSpec<F>,
    mc_draws: usize,
    rng: &mut R,
) -> Result<PsiGrid<F>, ConstantsError> {
    let (grid, f) = profile_values(profile)?;
    let at = interior_points(&grid, model);
    let conv = mu_bar_convolve(&grid, &f, &at, model, mc_draws, rng)?;
    let mut psi = Vec::with_capacity(at.len());
    for (i, &x) in at.iter().enumerate() {
        let fx = grid.interpolate(&f, x).unwrap_or_else(F::zero);
        psi.push(conv.values[i] - fx);
    }
    Ok(PsiGrid {
        alpha: profile.alpha,
        beta: profile.beta,
        x: at,
        psi,
        stderr: conv.stderr,
        method: PsiMethod::FromResidual,
        truncated_fraction: conv.clipped_fraction,
        batch_psi: Vec::new(),
        replica_psi: Vec::new(),
    })
}

/// Residual of the Poisson equation at each `psi` grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonResidual<F> {
    pub x: Vec<F>,
    pub residual: Vec<F>,
    pub stderr: Vec<F>,
    pub sup_abs: F,
    /// Largest `|r| / stderr` (infinite if some stderr is zero with `r != 0`).
    pub max_z: F,
}

impl<F: Real> PoissonResidual<F> {
    pub fn to_csv(&self, meta: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in meta {
            let _ = writeln!(out, "# {k}={v}");
        }
        let _ = writeln!(out, "# sup_abs={}", self.sup_abs);
        let _ = writeln!(out, "# max_z={}", self.max_z);
        out.push_str("x,residual,stderr\n");
        for i in 0..self.x.len() {
            let _ = writeln!(out, "{},{},{}", self.x[i], self.residual[i], self.stderr[i]);
        }
        out
    }

    /// Points with `|r| > k stderr`.
    pub fn violations(&self, k: F) -> usize {
        self.residual.iter().zip(&self.stderr).filter(|(&r, &s)| r.abs() > k * s).count()
    }
}

/// `r(x) = (mu_bar * f)(x) - f(x) - psi(x)` at the `psi` points that are
/// interior to the profile grid.
///
/// The error combines the Monte Carlo error of the convolution, the Monte
/// Carlo error of `psi`, and the replica spread of `r` itself when both the
/// profile and `psi` carry per-replica values. The replica variance is
/// averaged over neighbouring points within [`RESIDUAL_VARIANCE_HALF_WIDTH`].
pub fn poisson_residual<F: Real, R: Rng + ?Sized>(
    f_profile: &TailProfile<F>,
    psi: &PsiGrid<F>,
    model: &ModelSpec<F>,
    mc_draws: usize,
    rng: &mut R,
) -> Result<PoissonResidual<F>, ConstantsError> {
    if (f_profile.alpha - psi.alpha).abs() > F::c(1e-12) || (f_profile.beta - psi.beta).abs() > F::c(1e-12) {
        return Err(ConstantsError::GridMismatch("profile and psi use different (alpha, beta)".into()));
    }
    let (grid, f) = profile_values(f_profile)?;
    let reach = log_a_reach(model);
    let idx: Vec<usize> = (0..psi.x.len()).filter(|&i| psi.x[i] - reach >= grid.lo && psi.x[i] + reach <= grid.hi()).collect();
    if idx.is_empty() {
        return Err(ConstantsError::GridMismatch("no psi point is interior to the profile grid".into()));
    }
    let at: Vec<F> = idx.iter().map(|&i| psi.x[i]).collect();
    // one set of draws drives the pooled and the replica convolutions
    let logs: Vec<F> = (0..mc_draws.max(1)).map(|_| model.a_law.sample_log(rng)).collect();
    let convolve = |vals: &[F]| convolve_logs(&grid, vals, &at, &logs);
    let pooled = convolve(&f)?;
    let psi_mc: Vec<f64> = idx.iter().map(|&i| spread_stderr(&to_f64_rows(&psi.batch_psi), i)).collect();
    let reps = f_profile.replica_values.len();
    let mut replica_r: Vec<Vec<f64>> = Vec::new();
    if reps >= 2 && psi.replica_psi.len() == reps {
        for r in 0..reps {
            let vals: Option<Vec<F>> = f_profile.replica_values[r].iter().copied().collect();
            let Some(vals) = vals else { continue };
            let c = convolve(&vals)?;
            replica_r.push(
                idx.iter()
                    .enumerate()
                    .map(|(j, &i)| {
                        let fx = grid.interpolate(&vals, psi.x[i]).unwrap_or_else(F::zero);
                        (c.values[j] - fx - psi.replica_psi[r][i]).f64()
                    })
                    .collect(),
            );
        }
    }
    let rep_var = if replica_r.len() >= 2 {
        let v: Vec<f64> = (0..idx.len()).map(|j| spread_stderr(&replica_r, j).powi(2)).collect();
        let xs: Vec<f64> = at.iter().map(|x| x.f64()).collect();
        pooled_variance(&xs, &v, RESIDUAL_VARIANCE_HALF_WIDTH)
    } else {
        Vec::new()
    };
    let mut residual = Vec::with_capacity(idx.len());
    let mut stderr = Vec::with_capacity(idx.len());
    for (j, &i) in idx.iter().enumerate() {
        let fx = grid.interpolate(&f, psi.x[i]).unwrap_or_else(F::zero);
        residual.push(pooled.values[j] - fx - psi.psi[i]);
        let conv_se = pooled.stderr[j].f64();
        let se = if !rep_var.is_empty() {
            (conv_se * conv_se + psi_mc[j] * psi_mc[j] + rep_var[j]).sqrt()
        } else {
            let ps = psi.stderr[i].f64();
            (conv_se * conv_se + ps * ps).sqrt()
        };
        stderr.push(F::c(se));
    }
    let sup_abs = residual.iter().fold(F::zero(), |m, r| if r.abs() > m { r.abs() } else { m });
    let max_z = residual.iter().zip(&stderr).fold(F::zero(), |m, (&r, &s)| {
        let z = if s > F::zero() {
            r.abs() / s
        } else if r == F::zero() {
            F::zero()
        } else {
            F::infinity()
        };
        if z > m {
            z
        } else {
            m
        }
    });
    Ok(PoissonResidual { x: at, residual, stderr, sup_abs, max_z })
}

/// Half-width in `x` of the neighbourhood over which replica variances of the
/// residual are averaged.
pub const RESIDUAL_VARIANCE_HALF_WIDTH: f64 = 0.5;

/// Mean of `v` over the points within `half_width` of each point. Variances
/// from a handful of replicas are noisy point by point; the residual variance
/// changes slowly in `x`, so a local average stabilizes the error bars.
fn pooled_variance(x: &[f64], v: &[f64], half_width: f64) -> Vec<f64> {
    x.iter()
        .map(|&xj| {
            let (sum, n) = x
                .iter()
                .zip(v)
                .filter(|(&xk, _)| (xk - xj).abs() <= half_width + 1e-12)
                .fold((0.0, 0usize), |(s, n), (_, &vk)| (s + vk, n + 1));
            sum / n as f64
        })
        .collect()
}

fn to_f64_rows<F: Real>(rows: &[Vec<F>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|v| v.f64()).collect()).collect()
}

fn convolve_logs<F: Real>(grid: &UniformGrid<F>, f: &[F], at: &[F], logs: &[F]) -> Result<Convolution<F>, ConstantsError> {
    let (first, last) = (f[0], f[grid.n - 1]);
    let mut clipped = 0u64;
    let mut values = Vec::with_capacity(at.len());
    let mut stderr = Vec::with_capacity(at.len());
    for &x in at {
        let mut s = RunningStats::new();
        for &la in logs {
            let t = x - la;
            let v = grid.interpolate(f, t).unwrap_or_else(|| {
                clipped += 1;
                if t < grid.lo {
                    first
                } else {
                    last
                }
            });
            s.push(v);
        }
        values.push(s.mean());
        stderr.push(s.stderr());
    }
    let fraction = clipped as f64 / (at.len() * logs.len()).max(1) as f64;
    if fraction > MAX_CLIPPED_FRACTION {
        return Err(ConstantsError::GridTooNarrow { fraction, limit: MAX_CLIPPED_FRACTION });
    }
    Ok(Convolution { x: at.to_vec(), values, stderr, clipped_fraction: fraction })
}

/// Result of [`smooth`].
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed<F> {
    pub values: Vec<F>,
    /// Kernel mass left of the grid, `e^-(t - t_min)`; times a bound on
    /// `|g|` there, it bounds the neglected contribution.
    pub edge_weight: Vec<F>,
}

/// `g_check(t) = int_{-inf}^t e^-(t - u) g(u) du` on a uniform grid with
/// spacing `h`, taking `g = 0` left of the grid.
///
/// One left-to-right pass of the exact recurrence
/// `g_check(t + h) = e^-h g_check(t) + int_t^{t+h} e^-(t + h - u) g(u) du`
/// with the increment by the trapezoid rule.
pub fn smooth<F: Real>(h: F, g: &[F]) -> Smoothed<F> {
    let decay = (-h).exp();
    let half = h * F::c(0.5);
    let mut values = Vec::with_capacity(g.len());
    let mut edge_weight = Vec::with_capacity(g.len());
    let mut acc = F::zero();
    let mut edge = F::one();
    for (i, &gi) in g.iter().enumerate() {
        if i > 0 {
            acc = decay * acc + half * (decay * g[i - 1] + gi);
            edge *= decay;
        }
        values.push(acc);
        edge_weight.push(edge);
    }
    Smoothed { values, edge_weight }
}

/// A value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate<F> {
    pub value: F,
    pub stderr: F,
}

impl<F: Real> Estimate<F> {
    pub fn new(value: F, stderr: F) -> Self {
        Self { value, stderr }
    }

    /// `|value| <= k stderr`.
    pub fn compatible_with_zero(&self, k: F) -> bool {
        self.value.abs() <= k * self.stderr
    }
}

/// First two moments of `psi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiMoments<F> {
    /// `int psi dx`.
    pub c1: Estimate<F>,
    /// `-int (x + 1) psi(x) dx`.
    pub c2: Estimate<F>,
    /// `max(|psi(x_0)|, |psi(x_last)|) / max |psi|`.
    pub boundary_ratio: F,
}

/// Span in `x` over which the outward decay rate of `psi` is fitted.
pub const TAIL_FIT_SPAN: f64 = 1.0;

/// Outward exponential decay rate of `|psi|` over the edge points, or `None`
/// when they change sign, vanish, or do not decay.
fn tail_rate(x: &[f64], psi: &[f64]) -> Option<f64> {
    let sign = psi[0].signum();
    if psi.len() < 3 || psi.iter().any(|&p| p == 0.0 || p.signum() != sign) {
        return None;
    }
    let ly: Vec<f64> = psi.iter().map(|p| p.abs().ln()).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let rate = -sxy / sxx;
    (rate > 0.0).then_some(rate)
}

/// Tail terms `(int psi, -int (x + 1) psi)` past the upper edge `e` for
/// `psi(x) = p exp(-rate (x - e))`.
fn upper_tail(e: f64, p: f64, rate: f64) -> (f64, f64) {
    (p / rate, -p * ((e + 1.0) / rate + 1.0 / (rate * rate)))
}

/// Tail terms past the lower edge `e` for `psi(x) = p exp(rate (x - e))`.
fn lower_tail(e: f64, p: f64, rate: f64) -> (f64, f64) {
    (p / rate, -p * ((e + 1.0) / rate - 1.0 / (rate * rate)))
}

/// Extrapolated tails at both edges, each paired with the change obtained
/// when the decay rate is fitted one span further inside.
fn tails(x: &[f64], h: f64, psi: &[f64]) -> [((f64, f64), (f64, f64)); 2] {
    let n = x.len();
    let m = ((TAIL_FIT_SPAN / h).round() as usize + 1).min(n);
    let rx: Vec<f64> = x.iter().rev().map(|v| -v).collect();
    let rp: Vec<f64> = psi.iter().rev().copied().collect();
    let side = |xs: &[f64], ps: &[f64], f: &dyn Fn(f64) -> (f64, f64)| {
        let Some(l) = tail_rate(&xs[xs.len() - m..], &ps[ps.len() - m..]) else {
            return ((0.0, 0.0), (0.0, 0.0));
        };
        let t = f(l);
        let alt = if xs.len() >= 2 * m - 1 {
            tail_rate(&xs[xs.len() + 1 - 2 * m..=xs.len() - m], &ps[ps.len() + 1 - 2 * m..=ps.len() - m])
        } else {
            None
        };
        let d = alt.map_or(t, |l2| {
            let u = f(l2);
            ((t.0 - u.0).abs(), (t.1 - u.1).abs())
        });
        (t, d)
    };
    let up = side(x, psi, &|l| upper_tail(x[n - 1], psi[n - 1], l));
    let lo = side(&rx, &rp, &|l| lower_tail(x[0], psi[0], l));
    [up, lo]
}

/// Trapezoid integrals plus the exponential extrapolation of each tail beyond
/// the grid.
fn psi_integrals(x: &[f64], h: f64, psi: &[f64]) -> (f64, f64) {
    let weighted: Vec<f64> = x.iter().zip(psi).map(|(&xi, &p)| (xi + 1.0) * p).collect();
    let (mut c1, mut c2) = (trapezoid(h, psi), -trapezoid(h, &weighted));
    for (t, _) in tails(x, h, psi) {
        c1 += t.0;
        c2 += t.1;
    }
    (c1, c2)
}

fn integral_spread(x: &[f64], h: f64, rows: &[Vec<f64>]) -> (f64, f64) {
    if rows.len() < 2 {
        return (0.0, 0.0);
    }
    let mut s1 = RunningStats::new();
    let mut s2 = RunningStats::new();
    for r in rows {
        let (a, b) = psi_integrals(x, h, r);
        s1.push(a);
        s2.push(b);
    }
    (s1.stderr(), s2.stderr())
}

/// `C^1 = int psi` and `C^2 = -int (x + 1) psi` by the trapezoid rule, with
/// exponentially decaying tails extrapolated past both grid edges.
///
/// Errors combine the spread of the integrals over batches of draws, their
/// spread over replica measures, and the sensitivity of the tail terms to the
/// fitted decay rate; without batches or replicas, pointwise errors are
/// propagated as independent.
pub fn c1_c2_from_psi<F: Real>(psi: &PsiGrid<F>) -> Result<PsiMoments<F>, ConstantsError> {
    let grid = UniformGrid::from_points(&psi.x)?;
    let x: Vec<f64> = psi.x.iter().map(|v| v.f64()).collect();
    let p: Vec<f64> = psi.psi.iter().map(|v| v.f64()).collect();
    let h = grid.h.f64();
    let peak = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let edge = p[0].abs().max(p[p.len() - 1].abs());
    let ratio = if peak > 0.0 { edge / peak } else { 0.0 };
    if ratio >= MAX_BOUNDARY_RATIO {
        return Err(ConstantsError::BoundaryDecay { ratio, limit: MAX_BOUNDARY_RATIO });
    }
    let (c1, c2) = psi_integrals(&x, h, &p);
    let (b1, b2) = integral_spread(&x, h, &to_f64_rows(&psi.batch_psi));
    let (r1, r2) = integral_spread(&x, h, &to_f64_rows(&psi.replica_psi));
    let (mut t1, mut t2) = (0.0, 0.0);
    for (_, d) in tails(&x, h, &p) {
        t1 += d.0 * d.0;
        t2 += d.1 * d.1;
    }
    let (mut se1, mut se2) = ((b1 * b1 + r1 * r1 + t1).sqrt(), (b2 * b2 + r2 * r2 + t2).sqrt());
    if psi.batch_psi.len() < 2 && psi.replica_psi.len() < 2 {
        let n = x.len();
        let w = |i: usize| if i == 0 || i == n - 1 { 0.5 * h } else { h };
        let (mut v1, mut v2) = (0.0, 0.0);
        for i in 0..n {
            let s = psi.stderr[i].f64() * w(i);
            v1 += s * s;
            v2 += (s * (x[i] + 1.0)).powi(2);
        }
        se1 = (v1 + t1).sqrt();
        se2 = (v2 + t2).sqrt();
    }
    Ok(PsiMoments { c1: Estimate::new(F::c(c1), F::c(se1)), c2: Estimate::new(F::c(c2), F::c(se2)), boundary_ratio: F::c(ratio) })
}

/// `D^1_+` and its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct D1Estimate<F> {
    pub d1_plus: Estimate<F>,
    /// `-E[1{b >= 0} nu(-b/a, 0]]`.
    pub nonnegative_b_term: Estimate<F>,
    /// `E[1{b < 0} nu(0, -b/a]]`.
    pub negative_b_term: Estimate<F>,
    pub truncated_fraction: f64,
}

/// `D^1_+ = -int_{b >= 0} nu(-b/a, 0] dmu + int_{b < 0} nu(0, -b/a] dmu`.
///
/// The formula only involves `(a, b)` and applies to any model with a `B`
/// component. For the Letac chain, where `nu` lives on `[delta, inf)` and
/// `B > 0`, both terms vanish identically.
pub fn d1_affine<F: Real, R: Rng + ?Sized>(
    model: &ModelSpec<F>,
    nu: &MeasureEstimate<F>,
    mc_draws: usize,
    rng: &mut R,
) -> Result<D1Estimate<F>, ConstantsError> {
    if model.chain_kind == ChainKind::Extremal {
        return Err(ConstantsError::WrongKind { expected: ChainKind::Affine, found: model.chain_kind });
    }
    model.check_shape()?;
    if mc_draws == 0 {
        return Err(ConstantsError::NoDraws);
    }
    let draws: Vec<Innovation<f64>> = (0..mc_draws).map(|_| to_f64_innovation(&sample_innovation(model, rng))).collect();
    let terms = |c: &CumulativeMass| {
        let mut pos = RunningStats::new();
        let mut neg = RunningStats::new();
        let mut tot = RunningStats::new();
        let mut truncated = 0u64;
        for inn in &draws {
            let t = -inn.b / inn.a;
            let (p, n) = if inn.b >= 0.0 {
                let m = c.interval(t, 0.0);
                truncated += u64::from(m.truncated);
                (-m.value, 0.0)
            } else {
                let m = c.interval(0.0, t);
                truncated += u64::from(m.truncated);
                (0.0, m.value)
            };
            pos.push(p);
            neg.push(n);
            tot.push(p + n);
        }
        (pos, neg, tot, truncated)
    };
    let (pos, neg, tot, truncated) = terms(&nu.pooled.cumulative());
    let mut reps = (RunningStats::new(), RunningStats::new(), RunningStats::new());
    if nu.replicas.len() >= 2 {
        for h in &nu.replicas {
            let (p, n, t, _) = terms(&h.cumulative());
            reps.0.push(p.mean());
            reps.1.push(n.mean());
            reps.2.push(t.mean());
        }
    }
    let est = |s: &RunningStats<f64>, r: &RunningStats<f64>| {
        let se = (s.stderr().powi(2) + r.stderr().powi(2)).sqrt();
        Estimate::new(F::c(s.mean()), F::c(se))
    };
    Ok(D1Estimate {
        d1_plus: est(&tot, &reps.2),
        nonnegative_b_term: est(&pos, &reps.0),
        negative_b_term: est(&neg, &reps.1),
        truncated_fraction: truncated as f64 / mc_draws as f64,
    })
}

/// `(2 / sigma^2) I` for a normalized functional integral `I`.
pub fn formula_constant<F: Real>(sigma2: F, integral: Estimate<F>) -> Estimate<F> {
    let k = F::c(2.0) / sigma2;
    Estimate::new(k * integral.value, k * integral.stderr)
}

/// `C_+` of the Letac chain from the normalized integral of
/// `log((b + a max(c, s)) / (a s))` against `nu ⊗ mu`, as produced by the
/// ladder functional channel.
pub fn c_plus_formula_letac<F: Real>(model: &ModelSpec<F>, sigma2: F, integral: Estimate<F>) -> Result<Estimate<F>, ConstantsError> {
    if model.chain_kind != ChainKind::Letac {
        return Err(ConstantsError::WrongKind { expected: ChainKind::Letac, found: model.chain_kind });
    }
    Ok(formula_constant(sigma2, integral))
}

/// `C_+ + C_-` of the affine chain with the floor-halving stability check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CSumEstimate<F> {
    pub c_sum: Estimate<F>,
    /// The same estimate with the floor `eps_0` halved.
    pub c_sum_half_eps: Estimate<F>,
    /// Share of visits excluded by the floor.
    pub excluded_fraction: f64,
    /// The two estimates differ by at most 3 combined standard errors.
    pub stable: bool,
}

/// `C_+ + C_- = (2 / sigma^2) int int log|(a s + b) / (a s)| dnu dmu` from
/// the normalized integrals at floors `eps_0` and `eps_0 / 2`.
pub fn c_sum_affine<F: Real>(
    model: &ModelSpec<F>,
    sigma2: F,
    integral: Estimate<F>,
    integral_half_eps: Estimate<F>,
    excluded_fraction: f64,
) -> Result<CSumEstimate<F>, ConstantsError> {
    if model.chain_kind != ChainKind::Affine {
        return Err(ConstantsError::WrongKind { expected: ChainKind::Affine, found: model.chain_kind });
    }
    let a = formula_constant(sigma2, integral);
    let b = formula_constant(sigma2, integral_half_eps);
    let se = (a.stderr * a.stderr + b.stderr * b.stderr).sqrt();
    Ok(CSumEstimate { c_sum: a, c_sum_half_eps: b, excluded_fraction, stable: (a.value - b.value).abs() <= F::c(3.0) * se })
}

/// Comparison of the plateau level with `2 C^2 / sigma^2`, or of the
/// profile slope with `2 C^1 / sigma^2` when `C^1` is not compatible with 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelLink<F> {
    pub plateau: PlateauFit<F>,
    pub moments: PsiMoments<F>,
    /// `C^1` within 3 standard errors of 0.
    pub c1_vanishes: bool,
    /// `2 C^2 / sigma^2`.
    pub predicted_level: Estimate<F>,
    /// `2 C^1 / sigma^2`.
    pub predicted_slope: Estimate<F>,
    /// Difference over its combined error, for the branch that applies.
    pub z: F,
    /// `|plateau level - predicted level| / plateau level`.
    pub relative_gap: F,
}

/// Links a tail profile with `psi`: for `C^1 = 0`, the plateau level equals
/// `2 C^2 / sigma^2`; otherwise `f(x) / x` tends to `2 C^1 / sigma^2`.
pub fn level_link<F: Real>(profile: &TailProfile<F>, window: (F, F), psi: &PsiGrid<F>, sigma2: F) -> Result<LevelLink<F>, ConstantsError> {
    let plateau = fit_plateau(profile, window)?;
    let moments = c1_c2_from_psi(psi)?;
    let c1_vanishes = moments.c1.compatible_with_zero(F::c(3.0));
    let predicted_level = formula_constant(sigma2, moments.c2);
    let predicted_slope = formula_constant(sigma2, moments.c1);
    let z = if c1_vanishes {
        let se = (plateau.level_stderr.powi(2) + predicted_level.stderr.powi(2)).sqrt();
        (plateau.level - predicted_level.value) / se
    } else {
        let se = (plateau.slope_stderr.powi(2) + predicted_slope.stderr.powi(2)).sqrt();
        (plateau.slope - predicted_slope.value) / se
    };
    Ok(LevelLink {
        plateau,
        moments,
        c1_vanishes,
        predicted_level,
        predicted_slope,
        z,
        relative_gap: (plateau.level - predicted_level.value).abs() / plateau.level.abs(),
    })
}

/// Every constant of a run under one normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport<F> {
    pub sigma2: F,
    pub alpha: F,
    pub beta: F,
    pub c1: Estimate<F>,
    pub c2: Estimate<F>,
    pub d1_plus: Option<Estimate<F>>,
    pub c_plus_plateau: Estimate<F>,
    /// Structurally zero for the Letac chain, whose measure lives on `[delta, inf)`.
    pub c_minus_plateau: Option<Estimate<F>>,
    pub c_plus_formula: Option<Estimate<F>>,
    pub c_sum: Option<CSumEstimate<F>>,
    pub plateau_window: (F, F),
    pub normalization: String,
    pub fingerprint: String,
}

impl<F: Real> ConstantsReport<F> {
    pub fn new(sigma2: F, alpha: F, beta: F, moments: &PsiMoments<F>, plateau: &PlateauFit<F>, fingerprint: String) -> Self {
        Self {
            sigma2,
            alpha,
            beta,
            c1: moments.c1,
            c2: moments.c2,
            d1_plus: None,
            c_plus_plateau: Estimate::new(plateau.constant, plateau.constant_stderr),
            c_minus_plateau: None,
            c_plus_formula: None,
            c_sum: None,
            plateau_window: plateau.window,
            normalization: NORMALIZATION.to_string(),
            fingerprint,
        }
    }

    /// `key = value +- stderr` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let est = |out: &mut String, k: &str, e: &Estimate<F>| {
            let _ = writeln!(out, "{k} = {} +- {}", e.value, e.stderr);
        };
        let _ = writeln!(out, "fingerprint = {}", self.fingerprint);
        let _ = writeln!(out, "normalization = {}", self.normalization);
        let _ = writeln!(out, "alpha = {}", self.alpha);
        let _ = writeln!(out, "beta = {}", self.beta);
        let _ = writeln!(out, "plateau_window = [{}, {}]", self.plateau_window.0, self.plateau_window.1);
        let _ = writeln!(out, "sigma2 = {}", self.sigma2);
        est(&mut out, "c1", &self.c1);
        est(&mut out, "c2", &self.c2);
        if let Some(d) = &self.d1_plus {
            est(&mut out, "d1_plus", d);
        }
        est(&mut out, "c_plus_plateau", &self.c_plus_plateau);
        match &self.c_minus_plateau {
            Some(c) => est(&mut out, "c_minus_plateau", c),
            None => {
                let _ = writeln!(out, "c_minus_plateau = 0 (structural)");
            }
        }
        if let Some(c) = &self.c_plus_formula {
            est(&mut out, "c_plus_formula", c);
        }
        if let Some(c) = &self.c_sum {
            est(&mut out, "c_sum", &c.c_sum);
            est(&mut out, "c_sum_half_eps", &c.c_sum_half_eps);
            let _ = writeln!(out, "c_sum_excluded_fraction = {}", c.excluded_fraction);
            let _ = writeln!(out, "c_sum_stable = {}", c.stable);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{Geometry, LogHistogram, ProfilePoint};
    use crate::model::reference::{m1, m2};
    use crate::model::{BLaw, CLaw};
    use crate::rng::{Purpose, RandomStream};
    use approx::assert_relative_eq;

    fn rng(r: u32) -> RandomStream {
        RandomStream::substream(11, Purpose::Test, r)
    }

    #[test]
    fn convolution_of_constant_line_and_square() {
        let m = m1::<f64>();
        let grid = UniformGrid::span(-20.0, 20.0, 1.0 / 16.0).unwrap();
        let xs = grid.points();
        let at = vec![-3.0, 0.0, 2.5];
        let c = mu_bar_convolve(&grid, &vec![2.5; grid.n], &at, &m, 10_000, &mut rng(0)).unwrap();
        assert!(c.values.iter().all(|&v| v == 2.5));
        let lin: Vec<f64> = xs.clone();
        let c = mu_bar_convolve(&grid, &lin, &at, &m, 100_000, &mut rng(1)).unwrap();
        for (i, &x) in at.iter().enumerate() {
            assert!((c.values[i] - x).abs() < 4.0 * c.stderr[i]);
        }
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let c = mu_bar_convolve(&grid, &sq, &at, &m, 100_000, &mut rng(2)).unwrap();
        for (i, &x) in at.iter().enumerate() {
            // linear interpolation of x^2 adds h^2 / 4 at worst
            let bias = (1.0 / 16.0f64).powi(2) / 4.0;
            assert!((c.values[i] - (x * x + 0.25)).abs() < 4.0 * c.stderr[i] + bias);
        }
    }

    #[test]
    fn narrow_grid_is_rejected() {
        let m = m1::<f64>();
        let grid = UniformGrid::span(-1.0, 1.0, 0.1).unwrap();
        let err = mu_bar_convolve(&grid, &vec![1.0; grid.n], &[0.9], &m, 1000, &mut rng(3)).unwrap_err();
        assert!(matches!(err, ConstantsError::GridTooNarrow { .. }));
    }

    fn grid_1e3(lo: f64, hi: f64) -> (f64, Vec<f64>) {
        let g = UniformGrid::span(lo, hi, 1e-3).unwrap();
        (g.h, g.points())
    }

    #[test]
    fn smoothing_constant_exponential_and_step() {
        let (h, t) = grid_1e3(-5.0, 5.0);
        // constant: c (1 - e^-(t - t_min))
        let s = smooth(h, &vec![3.0; t.len()]);
        for i in 0..t.len() {
            let exact = 3.0 * (1.0 - (-(t[i] - t[0])).exp());
            assert!((s.values[i] - exact).abs() < 1e-6);
        }
        // e^t: e^t / 2, minus the mass left of the grid
        let g: Vec<f64> = t.iter().map(|x| x.exp()).collect();
        let s = smooth(h, &g);
        for i in t.len() / 2..t.len() {
            let exact = t[i].exp() / 2.0 - (2.0 * t[0] - t[i]).exp() / 2.0;
            assert!(((s.values[i] - exact) / exact).abs() < 1e-6, "t = {}", t[i]);
        }
        // 1{t >= 0} with the grid starting at the jump: 1 - e^-t
        let (h, t) = grid_1e3(0.0, 8.0);
        let s = smooth(h, &vec![1.0; t.len()]);
        for i in 0..t.len() {
            assert!((s.values[i] - (1.0 - (-t[i]).exp())).abs() < 1e-6);
        }
    }

    #[test]
    fn smoothing_is_linear_and_preserves_mass() {
        let (h, t) = grid_1e3(-10.0, 30.0);
        let a: Vec<f64> = t.iter().map(|x| (-x * x).exp()).collect();
        let b: Vec<f64> = t.iter().map(|x| (-(x - 1.0).powi(2)).exp() * 0.5).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x + y).collect();
        let (sa, sb, ss) = (smooth(h, &a), smooth(h, &b), smooth(h, &sum));
        for i in 0..t.len() {
            assert!((ss.values[i] - 2.0 * sa.values[i] - sb.values[i]).abs() < 1e-12);
            assert!(sa.values[i] >= 0.0);
        }
        assert_relative_eq!(trapezoid(h, &sa.values), trapezoid(h, &a), max_relative = 1e-6);
    }

    #[test]
    fn gaussian_psi_moments() {
        let g = UniformGrid::span(-10.0, 10.0, 1e-3).unwrap();
        let x = g.points();
        let psi: Vec<f64> = x.iter().map(|&v: &f64| (-v * v / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()).collect();
        let m = c1_c2_from_psi(&PsiGrid::exact(1.0, std::f64::consts::E, x.clone(), psi)).unwrap();
        assert!((m.c1.value - 1.0).abs() < 1e-8);
        assert!((m.c2.value + 1.0).abs() < 1e-8);
        let zero = c1_c2_from_psi(&PsiGrid::exact(1.0, 2.0, x.clone(), vec![0.0; x.len()])).unwrap();
        assert_eq!((zero.c1.value, zero.c2.value), (0.0, 0.0));
    }

    #[test]
    fn pooled_variance_averages_neighbours() {
        let x = [0.0, 0.25, 0.5, 0.75, 3.0];
        let v = [1.0, 2.0, 3.0, 4.0, 10.0];
        let p = pooled_variance(&x, &v, 0.5);
        assert_relative_eq!(p[0], 2.0);
        assert_relative_eq!(p[1], 2.5);
        assert_relative_eq!(p[3], 3.0);
        assert_relative_eq!(p[4], 10.0);
    }

    #[test]
    fn exponential_tails_are_extrapolated() {
        // psi = e^{-|x|} has int = 2 and -int (x + 1) psi = -2
        let g = UniformGrid::span(-8.0, 9.0, 1e-3).unwrap();
        let x = g.points();
        let psi: Vec<f64> = x.iter().map(|&v: &f64| (-v.abs()).exp()).collect();
        let m = c1_c2_from_psi(&PsiGrid::exact(1.0, 2.0, x, psi)).unwrap();
        assert!((m.c1.value - 2.0).abs() < 1e-6, "{}", m.c1.value);
        assert!((m.c2.value + 2.0).abs() < 1e-6, "{}", m.c2.value);
    }

    #[test]
    fn boundary_decay_is_enforced() {
        let g = UniformGrid::span(-2.0, 2.0, 0.01).unwrap();
        let x = g.points();
        let psi: Vec<f64> = x.iter().map(|&v: &f64| (-v * v / 2.0).exp()).collect();
        let err = c1_c2_from_psi(&PsiGrid::exact(1.0, 2.0, x, psi)).unwrap_err();
        assert!(matches!(err, ConstantsError::BoundaryDecay { .. }));
    }

    fn histogram_of(model: &ModelSpec<f64>, x0: f64, n: u64, seed: u32) -> LogHistogram<f64> {
        let g = Geometry { ratio: crate::measure::DEFAULT_RATIO, log_min: -20.0, log_max: 200.0 };
        crate::measure::occupation(model, x0, n, &mut rng(100 + seed), g, crate::real::StateRange::Extended).unwrap()
    }

    fn estimate_of(model: &ModelSpec<f64>, x0: f64, n: u64, reps: u32) -> MeasureEstimate<f64> {
        let hs = (0..reps).map(|r| histogram_of(model, x0, n, r)).collect();
        MeasureEstimate::from_replicas(hs, 1.0, std::f64::consts::E).unwrap()
    }

    #[test]
    fn psi_vanishes_without_b() {
        let mut m = m1::<f64>();
        m.b_law = Some(BLaw::Constant { c: 0.0 });
        let est = estimate_of(&m1::<f64>(), 0.0, 200_000, 2);
        let grid: Vec<f64> = (0..40).map(|i| -2.0 + 0.25 * i as f64).collect();
        let psi = psi_from_definition(&m, &est, 1.0, std::f64::consts::E, &grid, 500, 5, &mut rng(4)).unwrap();
        assert!(psi.psi.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn letac_with_zero_c_matches_affine_path() {
        let mut letac = m2::<f64>();
        letac.c_law = Some(CLaw::Constant { c: 0.0 });
        let mut affine = letac.clone();
        affine.chain_kind = ChainKind::Affine;
        affine.c_law = None;
        let est = estimate_of(&letac, 0.5, 300_000, 2);
        let grid: Vec<f64> = (0..48).map(|i| -1.0 + 0.25 * i as f64).collect();
        let (e, b) = (std::f64::consts::E, 4);
        let p1 = psi_from_definition(&letac, &est, 1.0, e, &grid, 2000, b, &mut rng(5)).unwrap();
        let p2 = psi_from_definition(&affine, &est, 1.0, e, &grid, 2000, b, &mut rng(5)).unwrap();
        for i in 0..grid.len() {
            assert!((p1.psi[i] - p2.psi[i]).abs() < 1e-9 * (1.0 + p1.psi[i].abs()));
        }
    }

    #[test]
    fn residual_route_reproduces_itself() {
        let m = m1::<f64>();
        let est = estimate_of(&m, 0.0, 400_000, 1);
        let grid: Vec<f64> = (0..200).map(|i| -4.0 + i as f64 / 16.0).collect();
        let prof = crate::measure::tail_profile(&est.pooled, 1.0, std::f64::consts::E, &grid).unwrap();
        let mut r = rng(6);
        let psi = psi_from_residual(&prof, &m, 2000, &mut r).unwrap();
        assert_eq!(psi.method, PsiMethod::FromResidual);
        // same draws as the residual computation: exact cancellation
        let res = poisson_residual(&prof, &psi, &m, 2000, &mut rng(6)).unwrap();
        assert_eq!(res.sup_abs, 0.0);
        assert_eq!(res.x, psi.x);
    }

    #[test]
    fn exact_identity_gives_zero_residual() {
        // nu = Lebesgue measure on (0, inf) in log scale is not a histogram;
        // instead use f linear in x and psi = mu_bar f - f = 0 for centered log A
        let m = m1::<f64>();
        let x: Vec<f64> = (0..320).map(|i| -10.0 + i as f64 / 16.0).collect();
        let prof = TailProfile {
            alpha: 1.0,
            beta: std::f64::consts::E,
            points: x.iter().map(|&v| ProfilePoint { x: v, f_hat: Some(3.0), stderr: None }).collect(),
            replica_values: Vec::new(),
            normalization: NORMALIZATION.into(),
        };
        let psi = PsiGrid::exact(1.0, std::f64::consts::E, x.clone(), vec![0.0; x.len()]);
        let r = poisson_residual(&prof, &psi, &m, 1000, &mut rng(7)).unwrap();
        assert_eq!(r.sup_abs, 0.0);
        assert_eq!(r.max_z, 0.0);
    }

    #[test]
    fn d1_vanishes_for_nonnegative_b_on_positive_support() {
        let m = m2::<f64>();
        let est = estimate_of(&m, 0.5, 200_000, 2);
        let d = d1_affine(&m, &est, 5000, &mut rng(8)).unwrap();
        assert_eq!(d.d1_plus.value, 0.0);
        assert_eq!(d.d1_plus.stderr, 0.0);
    }

    #[test]
    fn d1_terms_balance_for_symmetric_model() {
        // a symmetric measure: mirror an M1 histogram onto itself
        let m = m1::<f64>();
        let mut h = histogram_of(&m, 0.0, 300_000, 9);
        let mut mirrored = LogHistogram::new(*h.geometry()).unwrap();
        for (bin, c) in h.nonempty() {
            let flipped = match bin {
                crate::measure::Bin::Pos(k) => crate::measure::Bin::Neg(k),
                crate::measure::Bin::Neg(k) => crate::measure::Bin::Pos(k),
                z => z,
            };
            mirrored.add_count(mirrored.slot_of(flipped), c);
        }
        h.merge(&mirrored).unwrap();
        let est = MeasureEstimate::from_replicas(vec![h], 1.0, std::f64::consts::E).unwrap();
        let d = d1_affine(&m, &est, 200_000, &mut rng(10)).unwrap();
        let (p, n) = (d.nonnegative_b_term, d.negative_b_term);
        let se = (p.stderr.powi(2) + n.stderr.powi(2)).sqrt();
        assert!((p.value + n.value).abs() < 4.0 * se, "{p:?} {n:?}");
    }

    #[test]
    fn level_link_synthetic_identity() {
        // profile = L, psi Gaussian scaled so that -int (x + 1) psi = L sigma^2 / 2
        // with int psi = 0: psi = q (phi(x - 1) - phi(x)) gives -int (x+1) psi = -q
        let (level, sigma2) = (0.7, 0.25);
        let q = -level * sigma2 / 2.0;
        let g = UniformGrid::span(-12.0, 12.0, 1.0 / 64.0).unwrap();
        let x = g.points();
        let phi = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let psi: Vec<f64> = x.iter().map(|&t| q * (phi(t - 1.0) - phi(t))).collect();
        let prof = TailProfile {
            alpha: 1.0,
            beta: std::f64::consts::E,
            points: x.iter().map(|&v| ProfilePoint { x: v, f_hat: Some(level), stderr: Some(0.01) }).collect(),
            replica_values: Vec::new(),
            normalization: NORMALIZATION.into(),
        };
        let mut psi_grid = PsiGrid::exact(1.0, std::f64::consts::E, x.clone(), psi);
        psi_grid.stderr = vec![1e-4; x.len()];
        let link = level_link(&prof, (8.0, 12.0), &psi_grid, sigma2).unwrap();
        assert!(link.c1_vanishes);
        assert!(link.z.abs() < 1e-6, "z = {}", link.z);
        assert!(link.relative_gap < 1e-8);
    }

    #[test]
    fn level_link_slope_branch() {
        // psi = q phi with q != 0; f = (2 / sigma^2) int_{-inf}^x int_{-inf}^y psi
        // grows with slope 2q / sigma^2
        let (q, sigma2) = (0.05, 0.25);
        let g = UniformGrid::span(-10.0, 14.0, 1.0 / 64.0).unwrap();
        let x = g.points();
        let phi = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let psi: Vec<f64> = x.iter().map(|&t| q * phi(t)).collect();
        let slope = 2.0 * q / sigma2;
        let prof = TailProfile {
            alpha: 1.0,
            beta: std::f64::consts::E,
            points: x.iter().map(|&v| ProfilePoint { x: v, f_hat: Some(slope * v.max(0.0)), stderr: Some(0.01) }).collect(),
            replica_values: Vec::new(),
            normalization: NORMALIZATION.into(),
        };
        let mut psi_grid = PsiGrid::exact(1.0, std::f64::consts::E, x.clone(), psi);
        psi_grid.stderr = vec![1e-4; x.len()];
        let link = level_link(&prof, (8.0, 12.0), &psi_grid, sigma2).unwrap();
        assert!(!link.c1_vanishes);
        assert_relative_eq!(link.predicted_slope.value, slope, max_relative = 1e-6);
        assert_relative_eq!(link.plateau.slope, slope, max_relative = 1e-9);
    }

    #[test]
    fn formula_constants_and_kinds() {
        let e = Estimate::new(0.5, 0.01);
        let c = c_plus_formula_letac(&m2::<f64>(), 0.25, e).unwrap();
        assert_relative_eq!(c.value, 4.0);
        assert_relative_eq!(c.stderr, 0.08);
        assert!(c_plus_formula_letac(&m1::<f64>(), 0.25, e).is_err());
        let zero = Estimate::new(0.0, 0.0);
        let s = c_sum_affine(&m1::<f64>(), 0.25, zero, zero, 0.0).unwrap();
        assert_eq!(s.c_sum.value, 0.0);
        assert!(s.stable);
    }

    #[test]
    fn report_text_lists_entries() {
        let m = PsiMoments { c1: Estimate::new(0.0, 0.1), c2: Estimate::new(-0.2, 0.1), boundary_ratio: 0.0 };
        let p = PlateauFit {
            window: (8.0, 12.0),
            n_points: 64,
            level: 1.0,
            slope: 0.0,
            level_stderr: 0.1,
            slope_stderr: 0.1,
            constant: 1.0,
            constant_stderr: 0.1,
            flat: true,
        };
        let r = ConstantsReport::new(0.25, 1.0, std::f64::consts::E, &m, &p, "abc".into());
        let t = r.to_text();
        assert!(t.contains("fingerprint = abc"));
        assert!(t.contains("c_minus_plateau = 0 (structural)"));
    }
}
