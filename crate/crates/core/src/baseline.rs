//! Contractive-regime check: the stationary law has a power tail whose index
//! solves `E[A^alpha] = 1`, known in closed form for log-normal `A`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{Bin, LogHistogram};
use crate::model::{ALaw, ModelSpec};
use crate::real::Real;
use crate::stats::{weighted_line_fit, RunningStats};

/// Minimum number of window points for a tail-index fit.
pub const MIN_TAIL_POINTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("the tail index needs E log A < 0, got {0}")]
    NotContractive(f64),
    #[error("the closed-form tail index needs a log-normal A law")]
    UnsupportedFamily,
    #[error("tail fit needs at least {need} usable points in the window, found {found}")]
    InsufficientPoints { need: usize, found: usize },
    #[error("histogram is empty")]
    Empty,
}

/// `alpha* = -2 m / s^2`, the positive root of `exp(m a + s^2 a^2 / 2) = 1`.
pub fn kesten_index<F: Real>(model: &ModelSpec<F>) -> Result<F, BaselineError> {
    match &model.a_law {
        ALaw::LogNormal { m, s2 } => {
            if !(*m < F::zero()) {
                return Err(BaselineError::NotContractive(m.f64()));
            }
            Ok(F::c(-2.0) * *m / *s2)
        }
        ALaw::LogMixture { .. } => Err(BaselineError::UnsupportedFamily),
    }
}

/// Fitted tail index with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailIndexFit<F> {
    pub alpha: F,
    pub stderr: F,
    pub n_points: usize,
}

/// `(log x, log nu(|t| > x))` at the bin edges inside the window, with `nu`
/// normalized to a probability.
fn tail_points<F: Real>(hist: &LogHistogram<F>, window: (F, F)) -> Result<(Vec<F>, Vec<F>), BaselineError> {
    let total = hist.total_steps();
    if total == 0 {
        return Err(BaselineError::Empty);
    }
    let (k_min, k_max) = hist.k_range();
    let nk = (k_max - k_min + 1) as usize;
    // mass of |t| in bin k, both sides
    let mut per_k = vec![0u64; nk];
    for (bin, c) in hist.nonempty() {
        if let Bin::Pos(k) | Bin::Neg(k) = bin {
            per_k[(k - k_min) as usize] += c;
        }
    }
    // above[i] = mass with |t| > edge(k_min + i)
    let mut above = vec![0u64; nk + 1];
    for i in (0..nk).rev() {
        above[i] = above[i + 1] + per_k[i];
    }
    let g = hist.geometry();
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    for (i, &a) in above.iter().enumerate().take(nk) {
        let k = k_min + i as i64;
        let l = g.edge(k).ln();
        if l < window.0.f64() || l > window.1.f64() || a == 0 {
            continue;
        }
        lx.push(F::c(l));
        ly.push(F::c((a as f64 / total as f64).ln()));
    }
    Ok((lx, ly))
}

fn slope_fit<F: Real>(lx: &[F], ly: &[F]) -> Result<(F, F), BaselineError> {
    if lx.len() < MIN_TAIL_POINTS {
        return Err(BaselineError::InsufficientPoints { need: MIN_TAIL_POINTS, found: lx.len() });
    }
    let w = vec![F::one(); lx.len()];
    let fit = weighted_line_fit(lx, ly, &w, None).ok_or(BaselineError::InsufficientPoints { need: MIN_TAIL_POINTS, found: lx.len() })?;
    let n = lx.len();
    let rss: F = lx
        .iter()
        .zip(ly)
        .map(|(&x, &y)| {
            let r = y - fit.level - fit.slope * (x - fit.center);
            r * r
        })
        .sum();
    let s2 = rss / F::usize(n - 2);
    Ok((-fit.slope, fit.slope_stderr * s2.sqrt()))
}

/// Least-squares slope of `log nu(|t| > x)` against `log x` over the window
/// `(log x_lo, log x_hi)`, with `nu` the histogram normalized to total mass 1.
///
/// The standard error is the regression error, which understates the true
/// error because neighbouring tail masses are strongly correlated; use
/// [`fit_tail_index_replicas`] for a replica-based error.
pub fn fit_tail_index<F: Real>(hist: &LogHistogram<F>, window: (F, F)) -> Result<TailIndexFit<F>, BaselineError> {
    let (lx, ly) = tail_points(hist, window)?;
    let (alpha, stderr) = slope_fit(&lx, &ly)?;
    Ok(TailIndexFit { alpha, stderr, n_points: lx.len() })
}

/// Tail index of the pooled histogram, with the standard error taken from the
/// spread of per-replica fits.
pub fn fit_tail_index_replicas<F: Real>(replicas: &[LogHistogram<F>], window: (F, F)) -> Result<TailIndexFit<F>, BaselineError> {
    let first = replicas.first().ok_or(BaselineError::Empty)?;
    let mut pooled = LogHistogram::new(*first.geometry()).map_err(|_| BaselineError::Empty)?;
    for r in replicas {
        pooled.merge(r).map_err(|_| BaselineError::Empty)?;
    }
    let mut fit = fit_tail_index(&pooled, window)?;
    if replicas.len() >= 2 {
        let mut s = RunningStats::new();
        for r in replicas {
            s.push(fit_tail_index(r, window)?.alpha);
        }
        fit.stderr = s.stderr();
    }
    Ok(fit)
}

/// Closed-form against fitted tail index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KestenBaselineReport<F> {
    pub alpha_star_analytic: F,
    pub alpha_star_fitted: F,
    pub stderr: F,
    pub fit_window: (F, F),
    pub n_steps: u64,
    /// `|fitted - analytic| / analytic`.
    pub relative_error: F,
}

impl<F: Real> KestenBaselineReport<F> {
    pub fn new(analytic: F, fit: TailIndexFit<F>, window: (F, F), n_steps: u64) -> Self {
        Self {
            alpha_star_analytic: analytic,
            alpha_star_fitted: fit.alpha,
            stderr: fit.stderr,
            fit_window: window,
            n_steps,
            relative_error: (fit.alpha - analytic).abs() / analytic,
        }
    }

    pub fn to_text(&self, fingerprint: &str) -> String {
        format!(
            "fingerprint = {fingerprint}\nalpha_star_analytic = {}\nalpha_star_fitted = {} +- {}\nfit_window = [{}, {}]\nn_steps = {}\nrelative_error = {}\n",
            self.alpha_star_analytic,
            self.alpha_star_fitted,
            self.stderr,
            self.fit_window.0,
            self.fit_window.1,
            self.n_steps,
            self.relative_error
        )
    }
}
