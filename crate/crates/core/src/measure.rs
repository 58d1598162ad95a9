//! Log-binned occupation histograms, the ratio-ergodic estimator of the
//! invariant measure, tail profiles and plateau fits.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chains::{simulate, Flow, Observer, SimError, Transition};
use crate::ladder::Functional;
use crate::model::ModelSpec;
use crate::real::{Real, Scaled, StateRange};
use crate::stats::{ratio_with_stderr, weighted_line_fit, CompensatedSum, RunningStats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("histogram geometries differ")]
    GeometryMismatch,
    #[error("reference interval ({lo}, {hi}] has no occupation; the run is too short")]
    EmptyReference { lo: f64, hi: f64 },
    #[error("bin ratio too coarse: bin width {bin} exceeds (log beta - log alpha)/8 = {limit}")]
    Unresolvable { bin: f64, limit: f64 },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("plateau fit needs at least {need} grid points with values in the window, found {found}")]
    InsufficientPoints { need: usize, found: usize },
    #[error("malformed histogram csv at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Sim(#[from] SimErrorF64),
}

/// Simulation failure with the partial state reduced to plain numbers, so
/// that error types stay scalar-independent.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("state overflow after {steps} steps (log|x| = {log_abs_x})")]
pub struct SimErrorF64 {
    pub steps: u64,
    pub log_abs_x: f64,
}

impl<F: Real> From<SimError<F>> for SimErrorF64 {
    fn from(e: SimError<F>) -> Self {
        let SimError::Overflow { state } = e;
        Self { steps: state.n, log_abs_x: state.x.ln_abs().f64() }
    }
}

impl<F: Real> From<SimError<F>> for MeasureError {
    fn from(e: SimError<F>) -> Self {
        MeasureError::Sim(e.into())
    }
}

/// Binning of the real line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    /// Bin ratio `rho > 1`; bins are `(rho^k, rho^(k+1)]`.
    pub ratio: f64,
    /// Smallest resolved `log|x|`; below it everything falls in the near-zero bin.
    pub log_min: f64,
    /// Largest resolved `log|x|`; values above clamp into the last bin.
    pub log_max: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self { ratio: DEFAULT_RATIO, log_min: -32.0, log_max: 4096.0 }
    }
}

/// `e^(1/16)`: sixteen bins per unit of `log|x|`.
pub const DEFAULT_RATIO: f64 = 1.064_494_458_917_859_4;

impl Geometry {
    /// `log rho`, snapped to `1/n` when `rho` is `e^(1/n)` up to rounding so
    /// that bin edges fall exactly on integer powers of `e`.
    pub fn ln_ratio(&self) -> f64 {
        1.0 / self.bins_per_e()
    }

    /// Bins per unit of `log|x|`.
    pub fn bins_per_e(&self) -> f64 {
        let b = 1.0 / self.ratio.ln();
        if (b - b.round()).abs() < 1e-9 * b {
            b.round()
        } else {
            b
        }
    }

    /// `rho^k`, computed as `exp(k / n)` for ratios of the form `e^(1/n)`.
    pub fn edge(&self, k: i64) -> f64 {
        let b = self.bins_per_e();
        if b == b.round() {
            (k as f64 / b).exp()
        } else {
            self.ratio.powi(k as i32)
        }
    }

    /// Bin index range `[k_min, k_max]`.
    pub fn k_range(&self) -> (i64, i64) {
        let b = self.bins_per_e();
        ((self.log_min * b).floor() as i64, (self.log_max * b).ceil() as i64 - 1)
    }

    fn check(&self) -> Result<(), MeasureError> {
        if !(self.ratio > 1.0)
            || !self.ratio.is_finite()
            || !(self.log_min < self.log_max)
            || !self.log_min.is_finite()
            || !self.log_max.is_finite()
        {
            return Err(MeasureError::InvalidGeometry(format!("{self:?}")));
        }
        let (lo, hi) = self.k_range();
        if hi - lo > 1 << 26 {
            return Err(MeasureError::InvalidGeometry("too many bins".into()));
        }
        Ok(())
    }
}

/// Which part of the line a bin covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bin {
    /// `[-rho^k_min, rho^k_min]`.
    Zero,
    /// `(rho^k, rho^(k+1)]`.
    Pos(i64),
    /// `(-rho^(k+1), -rho^k]`.
    Neg(i64),
}

/// Geometric-binned occupation counts over the real line.
///
/// Counts are integers, so merging is exact and order-independent; the
/// weight of a bin is `count * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogHistogram<F> {
    geometry: Geometry,
    k_min: i64,
    k_max: i64,
    /// Layout: `[zero, pos(k_min..=k_max), neg(k_min..=k_max)]`.
    counts: Vec<u64>,
    total: u64,
    overflow: u64,
    scale: F,
    bins_per_e: F,
    /// `rho^k` for `k` from `k_min - 1` up to the largest finite edge (at most `k_max + 2`).
    native_edges: Vec<f64>,
}

impl<F: Real> LogHistogram<F> {
    pub fn new(geometry: Geometry) -> Result<Self, MeasureError> {
        geometry.check()?;
        let (k_min, k_max) = geometry.k_range();
        let nk = (k_max - k_min + 1) as usize;
        Ok(Self {
            geometry,
            k_min,
            k_max,
            counts: vec![0; 2 * nk + 1],
            total: 0,
            overflow: 0,
            scale: F::one(),
            bins_per_e: F::c(geometry.bins_per_e()),
            native_edges: (k_min - 1..=k_max + 2).map(|k| geometry.edge(k)).take_while(|e| e.is_finite()).collect(),
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn k_range(&self) -> (i64, i64) {
        (self.k_min, self.k_max)
    }

    fn nk(&self) -> usize {
        (self.k_max - self.k_min + 1) as usize
    }

    /// Number of flat slots (`2 * nk + 1`).
    pub fn slots(&self) -> usize {
        self.counts.len()
    }

    pub fn total_steps(&self) -> u64 {
        self.total
    }

    /// Records that clamped into the last bin.
    pub fn overflow(&self) -> u64 {
        self.overflow
    }

    pub fn scale(&self) -> F {
        self.scale
    }

    pub fn set_scale(&mut self, scale: F) {
        self.scale = scale;
    }

    pub fn slot_of(&self, bin: Bin) -> usize {
        match bin {
            Bin::Zero => 0,
            Bin::Pos(k) => 1 + (k - self.k_min) as usize,
            Bin::Neg(k) => 1 + self.nk() + (k - self.k_min) as usize,
        }
    }

    pub fn bin_of_slot(&self, slot: usize) -> Bin {
        let nk = self.nk();
        if slot == 0 {
            Bin::Zero
        } else if slot <= nk {
            Bin::Pos(self.k_min + (slot - 1) as i64)
        } else {
            Bin::Neg(self.k_min + (slot - 1 - nk) as i64)
        }
    }

    /// Slot for a state, and whether it was clamped at the top.
    #[inline]
    pub fn locate(&self, x: Scaled<F>) -> (usize, bool) {
        let m = x.mantissa();
        if m == F::zero() {
            return (0, false);
        }
        let base = if m < F::zero() { 1 + self.nk() } else { 1 };
        let k = if x.chunks() == 0 {
            match self.native_bin(m.abs().f64()) {
                Some(k) => k,
                None => self.log_bin(x),
            }
        } else {
            self.log_bin(x)
        };
        if k < self.k_min {
            (0, false)
        } else if k > self.k_max {
            (base + self.nk() - 1, true)
        } else {
            (base + (k - self.k_min) as usize, false)
        }
    }

    /// `ceil(log|x| / log rho) - 1` through the logarithm.
    fn log_bin(&self, x: Scaled<F>) -> i64 {
        let t = (x.ln_abs() * self.bins_per_e).f64().clamp(-1e15, 1e15);
        let tr = t as i64;
        if (tr as f64) < t {
            tr
        } else {
            tr - 1
        }
    }

    /// Bin of a positive native value by an approximate logarithm corrected
    /// against the exact edge table; `None` outside the table.
    #[inline]
    fn native_bin(&self, a: f64) -> Option<i64> {
        let bits = a.to_bits();
        let e = ((bits >> 52) & 0x7ff) as i64;
        if e == 0 || e == 0x7ff {
            return None;
        }
        let m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
        let z = (m - 1.0) / (m + 1.0);
        let ln_m = 2.0 * z * (1.0 + z * z * (1.0 / 3.0 + z * z * 0.2));
        let approx = ((e - 1023) as f64 * std::f64::consts::LN_2 + ln_m) * self.geometry.bins_per_e();
        let lo = self.k_min - 1;
        let hi = lo + self.native_edges.len() as i64 - 2;
        let mut k = (approx as i64).clamp(lo, hi);
        let edge = |k: i64| self.native_edges[(k - lo) as usize];
        // edge(k) < a <= edge(k + 1)
        while a <= edge(k) {
            if k == lo {
                return Some(lo);
            }
            k -= 1;
        }
        while a > edge(k + 1) {
            if k + 1 >= hi {
                return None;
            }
            k += 1;
        }
        Some(k)
    }

    #[inline]
    pub fn record(&mut self, x: Scaled<F>) {
        let (slot, clamped) = self.locate(x);
        self.add_slot(slot, clamped);
    }

    #[inline]
    pub fn record_value(&mut self, x: F) {
        self.record(Scaled::new(x));
    }

    /// Adds `n` visits to a slot.
    pub fn add_count(&mut self, slot: usize, n: u64) {
        self.counts[slot] += n;
        self.total += n;
    }

    #[inline]
    pub fn add_slot(&mut self, slot: usize, clamped: bool) {
        self.counts[slot] += 1;
        self.total += 1;
        self.overflow += u64::from(clamped);
    }

    pub fn count(&self, bin: Bin) -> u64 {
        self.counts[self.slot_of(bin)]
    }

    pub fn count_slot(&self, slot: usize) -> u64 {
        self.counts[slot]
    }

    pub fn weight(&self, bin: Bin) -> F {
        F::c(self.count(bin) as f64) * self.scale
    }

    /// Lower and upper edge of a bin.
    pub fn edges(&self, bin: Bin) -> (F, F) {
        let p = |k: i64| F::c(self.geometry.edge(k));
        match bin {
            Bin::Zero => (-p(self.k_min), p(self.k_min)),
            Bin::Pos(k) => (p(k), p(k + 1)),
            Bin::Neg(k) => (-p(k + 1), -p(k)),
        }
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.geometry == other.geometry
    }

    /// Adds the counts of `other`. The scale is kept if both scales agree,
    /// otherwise reset to 1 (raw counts).
    pub fn merge(&mut self, other: &Self) -> Result<(), MeasureError> {
        if !self.same_geometry(other) {
            return Err(MeasureError::GeometryMismatch);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
        self.total += other.total;
        self.overflow += other.overflow;
        if other.total > 0 && self.scale != other.scale {
            self.scale = F::one();
        }
        Ok(())
    }

    /// Non-empty slots in export order: negative side from the far end in,
    /// then the near-zero bin, then the positive side outward.
    pub fn nonempty(&self) -> impl Iterator<Item = (Bin, u64)> + '_ {
        let nk = self.nk();
        let neg = (0..nk).rev().map(move |i| 1 + nk + i);
        let pos = (0..nk).map(|i| 1 + i);
        neg.chain(std::iter::once(0)).chain(pos).filter(|&s| self.counts[s] > 0).map(|s| (self.bin_of_slot(s), self.counts[s]))
    }

    /// Largest `k` with a non-empty bin on the given side.
    pub fn top_k(&self, negative: bool) -> Option<i64> {
        let nk = self.nk();
        let base = if negative { 1 + nk } else { 1 };
        (0..nk).rev().find(|&i| self.counts[base + i] > 0).map(|i| self.k_min + i as i64)
    }

    pub fn cumulative(&self) -> CumulativeMass {
        CumulativeMass::new(self)
    }

    /// Signed cumulative view in raw counts (scale 1), used for hit tests.
    pub fn mass(&self, lo: F, hi: F) -> F {
        let c = self.cumulative();
        F::c(c.interval(lo.f64(), hi.f64()).value)
    }

    /// Rescales so that the reference interval has weight 1.
    pub fn normalize_to(&mut self, lo: F, hi: F) -> Result<(), MeasureError> {
        self.scale = F::one();
        let m = self.mass(lo, hi);
        if !(m > F::zero()) {
            return Err(MeasureError::EmptyReference { lo: lo.f64(), hi: hi.f64() });
        }
        self.scale = F::one() / m;
        Ok(())
    }

    /// Rescales to a probability measure.
    pub fn normalize_total(&mut self) -> Result<(), MeasureError> {
        if self.total == 0 {
            return Err(MeasureError::EmptyReference { lo: f64::NEG_INFINITY, hi: f64::INFINITY });
        }
        self.scale = F::one() / F::c(self.total as f64);
        Ok(())
    }

    /// CSV with columns `side,k,lo,hi,weight`, preceded by `#` header lines
    /// carrying the geometry and any caller-supplied metadata.
    pub fn to_csv(&self, meta: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in meta {
            let _ = writeln!(out, "# {k}={v}");
        }
        let g = &self.geometry;
        let _ = writeln!(out, "# ratio={}", g.ratio);
        let _ = writeln!(out, "# log_min={}", g.log_min);
        let _ = writeln!(out, "# log_max={}", g.log_max);
        let _ = writeln!(out, "# scale={}", self.scale);
        let _ = writeln!(out, "# total_steps={}", self.total);
        let _ = writeln!(out, "# overflow={}", self.overflow);
        out.push_str("side,k,lo,hi,weight\n");
        for (bin, c) in self.nonempty() {
            let (lo, hi) = self.edges(bin);
            let (side, k) = match bin {
                Bin::Zero => ("zero", self.k_min),
                Bin::Pos(k) => ("pos", k),
                Bin::Neg(k) => ("neg", k),
            };
            let w = if self.scale == F::one() { F::c(c as f64) } else { F::c(c as f64) * self.scale };
            let _ = writeln!(out, "{side},{k},{lo},{hi},{w}");
        }
        out
    }

    /// Parses the output of [`to_csv`](Self::to_csv). Counts are recovered
    /// as `round(weight / scale)`.
    pub fn from_csv(text: &str) -> Result<Self, MeasureError> {
        let mut g = Geometry::default();
        let mut scale = 1.0f64;
        let mut total: Option<u64> = None;
        let mut overflow = 0u64;
        let mut rows = Vec::new();
        let mut seen_header = false;
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| MeasureError::Csv { line: i + 1, msg };
            if let Some(rest) = line.strip_prefix('#') {
                let Some((k, v)) = rest.trim().split_once('=') else { continue };
                let pf = |v: &str| v.parse::<f64>().map_err(|e| err(e.to_string()));
                match k {
                    "ratio" => g.ratio = pf(v)?,
                    "log_min" => g.log_min = pf(v)?,
                    "log_max" => g.log_max = pf(v)?,
                    "scale" => scale = pf(v)?,
                    "total_steps" => total = Some(v.parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?),
                    "overflow" => overflow = v.parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?,
                    _ => {}
                }
                continue;
            }
            if !seen_header {
                if line.trim() != "side,k,lo,hi,weight" {
                    return Err(err(format!("expected column header, got {line:?}")));
                }
                seen_header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err("expected 5 fields".into()));
            }
            let k: i64 = f[1].parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?;
            let w: f64 = f[4].parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?;
            let bin = match f[0] {
                "zero" => Bin::Zero,
                "pos" => Bin::Pos(k),
                "neg" => Bin::Neg(k),
                s => return Err(err(format!("unknown side {s:?}"))),
            };
            rows.push((i + 1, bin, w));
        }
        let mut h = Self::new(g)?;
        for (line, bin, w) in rows {
            if let Bin::Pos(k) | Bin::Neg(k) = bin {
                if k < h.k_min || k > h.k_max {
                    return Err(MeasureError::Csv { line, msg: format!("bin {k} outside geometry") });
                }
            }
            let c = (w / scale).round() as u64;
            let s = h.slot_of(bin);
            h.counts[s] = c;
            h.total += c;
        }
        if let Some(t) = total {
            if t != h.total {
                return Err(MeasureError::Csv { line: 0, msg: format!("total_steps {t} != sum of counts {}", h.total) });
            }
        }
        h.overflow = overflow;
        h.scale = F::c(scale);
        Ok(h)
    }
}

/// Interval mass with a flag raised when an endpoint lies outside the
/// populated support (the mass beyond it is then unknown, taken as zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mass {
    pub value: f64,
    pub truncated: bool,
}

/// Prefix sums of a histogram for O(1) interval-mass queries.
///
/// Within a bin, mass is spread uniformly in `log|x|`; within the near-zero
/// bin, uniformly in `x`.
#[derive(Debug, Clone)]
pub struct CumulativeMass {
    bins_per_e: f64,
    k_min: i64,
    log_max: f64,
    /// `prefix[i]` = weight of bins `k_min .. k_min + i` on each side.
    pos: Vec<f64>,
    neg: Vec<f64>,
    pos_w: Vec<f64>,
    neg_w: Vec<f64>,
    zero: f64,
    r0: f64,
    /// `log|x|` beyond which nothing is known, per side.
    pos_top: f64,
    neg_top: f64,
}

impl CumulativeMass {
    fn new<F: Real>(h: &LogHistogram<F>) -> Self {
        let nk = h.nk();
        let scale = h.scale.f64();
        let w = |s: usize| h.counts[s] as f64 * scale;
        let pos_w: Vec<f64> = (0..nk).map(|i| w(1 + i)).collect();
        let neg_w: Vec<f64> = (0..nk).map(|i| w(1 + nk + i)).collect();
        let prefix = |v: &[f64]| {
            let mut p = Vec::with_capacity(v.len() + 1);
            let mut acc = 0.0;
            p.push(0.0);
            for &x in v {
                acc += x;
                p.push(acc);
            }
            p
        };
        let bpe = h.geometry.bins_per_e();
        let top = |neg: bool| {
            // the clamped last bin is not a faithful estimate of its interval
            let clamped_top = h.overflow > 0;
            match h.top_k(neg) {
                Some(k) if clamped_top && k == h.k_max => (k as f64) / bpe,
                Some(k) => (k + 1) as f64 / bpe,
                None => h.k_min as f64 / bpe,
            }
        };
        Self {
            bins_per_e: bpe,
            k_min: h.k_min,
            log_max: (h.k_max + 1) as f64 / bpe,
            pos: prefix(&pos_w),
            neg: prefix(&neg_w),
            pos_w,
            neg_w,
            zero: w(0),
            r0: h.geometry.edge(h.k_min),
            pos_top: top(false),
            neg_top: top(true),
        }
    }

    /// Mass of `(0, y]` on one half-line for `y > 0`.
    fn half(&self, y: f64, negative: bool) -> Mass {
        let (pre, wts, top) = if negative { (&self.neg, &self.neg_w, self.neg_top) } else { (&self.pos, &self.pos_w, self.pos_top) };
        if y <= self.r0 {
            return Mass { value: 0.5 * self.zero * y / self.r0, truncated: false };
        }
        let l = y.ln();
        let half_zero = 0.5 * self.zero;
        if l >= top {
            return Mass { value: half_zero + pre[pre.len() - 1], truncated: l > top };
        }
        let t = l * self.bins_per_e;
        let k = (t.ceil() - 1.0) as i64;
        let i = ((k - self.k_min).max(0) as usize).min(wts.len() - 1);
        let frac = (t - (self.k_min + i as i64) as f64).clamp(0.0, 1.0);
        Mass { value: half_zero + pre[i] + frac * wts[i], truncated: false }
    }

    /// Signed cumulative mass: `nu(0, y]` for `y >= 0`, `-nu(y, 0]` for `y < 0`.
    pub fn signed(&self, y: f64) -> Mass {
        if y >= 0.0 {
            self.half(y, false)
        } else {
            let m = self.half(-y, true);
            // nu(y, 0] = nu[-|y|, 0) up to boundary convention
            Mass { value: -m.value, truncated: m.truncated }
        }
    }

    /// `nu(u, v]`, zero if `v <= u`.
    pub fn interval(&self, u: f64, v: f64) -> Mass {
        if !(v > u) {
            return Mass { value: 0.0, truncated: false };
        }
        let (a, b) = (self.signed(u), self.signed(v));
        Mass { value: b.value - a.value, truncated: a.truncated || b.truncated }
    }

    /// `nu(-inf, v]`; truncated whenever the negative support is not empty
    /// beyond the resolved range.
    pub fn up_to(&self, v: f64) -> Mass {
        let total_neg = self.neg[self.neg.len() - 1] + 0.5 * self.zero;
        let b = self.signed(v);
        Mass { value: total_neg + b.value, truncated: b.truncated }
    }

    /// Highest populated `log|x|` on the positive side.
    pub fn positive_top(&self) -> f64 {
        self.pos_top
    }

    pub fn negative_top(&self) -> f64 {
        self.neg_top
    }
}

/// Pooled histogram plus the per-replica histograms it was merged from.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureEstimate<F> {
    pub pooled: LogHistogram<F>,
    pub replicas: Vec<LogHistogram<F>>,
}

/// The reference interval `(1, e]`.
pub fn reference_interval<F: Real>() -> (F, F) {
    (F::one(), F::E())
}

impl<F: Real> MeasureEstimate<F> {
    /// Merges replicas (in order) and normalizes everything at `(lo, hi]`.
    pub fn from_replicas(mut replicas: Vec<LogHistogram<F>>, lo: F, hi: F) -> Result<Self, MeasureError> {
        let first = replicas.first().ok_or(MeasureError::EmptyReference { lo: lo.f64(), hi: hi.f64() })?;
        let mut pooled = LogHistogram::new(*first.geometry())?;
        for r in &replicas {
            pooled.merge(r)?;
        }
        pooled.normalize_to(lo, hi)?;
        for r in &mut replicas {
            r.normalize_to(lo, hi)?;
        }
        Ok(Self { pooled, replicas })
    }
}

/// Records every visited state into a histogram.
pub struct HistogramObserver<'h, F> {
    pub hist: &'h mut LogHistogram<F>,
}

impl<F: Real> Observer<F> for HistogramObserver<'_, F> {
    #[inline]
    fn observe(&mut self, t: &Transition<'_, F>) -> Flow {
        self.hist.record(t.x);
        Flow::Continue
    }
}

/// Occupation histogram of one trajectory of `n_steps` states `X_1..X_n`,
/// normalized so that the reference interval has weight 1.
pub fn estimate_ratio<F: Real, R: Rng + ?Sized>(
    model: &ModelSpec<F>,
    x0: F,
    n_steps: u64,
    rng: &mut R,
    reference: (F, F),
    geometry: Geometry,
    range: StateRange,
) -> Result<LogHistogram<F>, MeasureError> {
    let mut hist = occupation(model, x0, n_steps, rng, geometry, range)?;
    hist.normalize_to(reference.0, reference.1)?;
    Ok(hist)
}

/// Raw (unnormalized) occupation counts of one trajectory.
pub fn occupation<F: Real, R: Rng + ?Sized>(
    model: &ModelSpec<F>,
    x0: F,
    n_steps: u64,
    rng: &mut R,
    geometry: Geometry,
    range: StateRange,
) -> Result<LogHistogram<F>, MeasureError> {
    let mut hist = LogHistogram::new(geometry)?;
    simulate(model, x0, n_steps, rng, range, HistogramObserver { hist: &mut hist })?;
    Ok(hist)
}

/// Per-trajectory sums of visit functionals, for ratio-estimator integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalSums<F> {
    pub names: Vec<String>,
    pub sums: Vec<F>,
    pub excluded_visits: Vec<u64>,
    /// Visits to the reference interval `(1, e]`.
    pub reference_hits: u64,
    pub visits: u64,
}

struct FunctionalObserver<'a, F> {
    functionals: &'a [Functional<F>],
    sums: Vec<CompensatedSum<F>>,
    excluded: Vec<u64>,
    reference_hits: u64,
}

impl<F: Real> Observer<F> for FunctionalObserver<'_, F> {
    #[inline]
    fn observe(&mut self, t: &Transition<'_, F>) -> Flow {
        // the visit to X_{n-1}, paired with the innovation that leaves it
        let prev = t.prev;
        if prev.chunks() == 0 && prev.mantissa() > F::one() && prev.mantissa() <= F::E() {
            self.reference_hits += 1;
        }
        let ds = t.s - t.innovation.log_a;
        for (i, g) in self.functionals.iter().enumerate() {
            match g.eval(prev, ds, t.innovation) {
                Some(v) => self.sums[i].add(v),
                None => self.excluded[i] += 1,
            }
        }
        Flow::Continue
    }
}

/// Occupation histogram of one trajectory together with the sums of
/// `g(X_{n-1}, xi_n)` over its `n_steps` transitions.
pub fn occupation_with_functionals<F: Real, R: Rng + ?Sized>(
    model: &ModelSpec<F>,
    x0: F,
    n_steps: u64,
    functionals: &[Functional<F>],
    rng: &mut R,
    geometry: Geometry,
    range: StateRange,
) -> Result<(LogHistogram<F>, FunctionalSums<F>), MeasureError> {
    let mut hist = LogHistogram::new(geometry)?;
    let mut obs = FunctionalObserver {
        functionals,
        sums: vec![CompensatedSum::new(); functionals.len()],
        excluded: vec![0; functionals.len()],
        reference_hits: 0,
    };
    simulate(model, x0, n_steps, rng, range, (HistogramObserver { hist: &mut hist }, &mut obs))?;
    let sums = FunctionalSums {
        names: functionals.iter().map(Functional::name).collect(),
        sums: obs.sums.iter().map(CompensatedSum::value).collect(),
        excluded_visits: obs.excluded,
        reference_hits: obs.reference_hits,
        visits: n_steps,
    };
    Ok((hist, sums))
}

/// Pooled normalized integrals `sum g / reference hits` over replicas, with
/// delta-method errors from the replica spread.
pub fn pooled_functionals<F: Real>(replicas: &[FunctionalSums<F>]) -> Vec<(F, F)> {
    let Some(first) = replicas.first() else { return Vec::new() };
    let refs: Vec<F> = replicas.iter().map(|r| F::c(r.reference_hits as f64)).collect();
    (0..first.sums.len())
        .map(|i| {
            let ys: Vec<F> = replicas.iter().map(|r| r.sums[i]).collect();
            ratio_with_stderr(&ys, &refs)
        })
        .collect()
}

/// One point of a tail profile; `None` marks a point outside the support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint<F> {
    pub x: F,
    pub f_hat: Option<F>,
    pub stderr: Option<F>,
}

/// `x -> nu(alpha e^x, beta e^x]` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TailProfile<F> {
    pub alpha: F,
    pub beta: F,
    pub points: Vec<ProfilePoint<F>>,
    /// Per-replica values on the same grid (empty for a single histogram).
    pub replica_values: Vec<Vec<Option<F>>>,
    pub normalization: String,
}

pub const NORMALIZATION: &str = "nu(1, e] = 1";

impl<F: Real> TailProfile<F> {
    pub fn to_csv(&self, meta: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in meta {
            let _ = writeln!(out, "# {k}={v}");
        }
        let _ = writeln!(out, "# alpha={}", self.alpha);
        let _ = writeln!(out, "# beta={}", self.beta);
        let _ = writeln!(out, "# normalization={}", self.normalization);
        out.push_str("x,f_hat,stderr\n");
        let opt = |v: Option<F>| v.map(|v| v.to_string()).unwrap_or_default();
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.x, opt(p.f_hat), opt(p.stderr));
        }
        out
    }
}

fn profile_values<F: Real>(c: &CumulativeMass, alpha: F, beta: F, grid: &[F], negative: bool) -> Vec<Option<F>> {
    let (la, lb) = (alpha.ln().f64(), beta.ln().f64());
    let top = if negative { c.negative_top() } else { c.positive_top() };
    let floor = c.k_min as f64 / c.bins_per_e;
    grid.iter()
        .map(|&x| {
            let (lo, hi) = (la + x.f64(), lb + x.f64());
            if lo >= top || lo < floor || hi > c.log_max {
                return None;
            }
            let m = if negative { c.interval(-hi.exp(), -lo.exp()) } else { c.interval(lo.exp(), hi.exp()) };
            Some(F::c(m.value))
        })
        .collect()
}

fn check_resolution<F: Real>(geometry: &Geometry, alpha: F, beta: F) -> Result<(), MeasureError> {
    let bin = geometry.ln_ratio();
    let limit = (beta.ln() - alpha.ln()).f64() / 8.0;
    if bin > limit * (1.0 + 1e-12) {
        return Err(MeasureError::Unresolvable { bin, limit });
    }
    Ok(())
}

/// Tail profile of a single histogram; no standard errors.
pub fn tail_profile<F: Real>(hist: &LogHistogram<F>, alpha: F, beta: F, grid: &[F]) -> Result<TailProfile<F>, MeasureError> {
    tail_profile_side(hist, alpha, beta, grid, false)
}

/// Tail profile on either half-line; the negative side uses `(-beta e^x, -alpha e^x]`.
pub fn tail_profile_side<F: Real>(
    hist: &LogHistogram<F>,
    alpha: F,
    beta: F,
    grid: &[F],
    negative: bool,
) -> Result<TailProfile<F>, MeasureError> {
    check_resolution(&hist.geometry, alpha, beta)?;
    let vals = profile_values(&hist.cumulative(), alpha, beta, grid, negative);
    Ok(TailProfile {
        alpha,
        beta,
        points: grid.iter().zip(vals).map(|(&x, f)| ProfilePoint { x, f_hat: f, stderr: None }).collect(),
        replica_values: Vec::new(),
        normalization: NORMALIZATION.to_string(),
    })
}

/// Tail profile of a pooled estimate with standard errors from replica spread.
pub fn tail_profile_estimate<F: Real>(
    est: &MeasureEstimate<F>,
    alpha: F,
    beta: F,
    grid: &[F],
    negative: bool,
) -> Result<TailProfile<F>, MeasureError> {
    let mut prof = tail_profile_side(&est.pooled, alpha, beta, grid, negative)?;
    let reps: Vec<Vec<Option<F>>> = est.replicas.iter().map(|h| profile_values(&h.cumulative(), alpha, beta, grid, negative)).collect();
    if reps.len() >= 2 {
        for (i, p) in prof.points.iter_mut().enumerate() {
            let vals: Option<Vec<F>> = reps.iter().map(|r| r[i]).collect();
            p.stderr = vals.map(|v| {
                let mut s = RunningStats::new();
                v.into_iter().for_each(|x| s.push(x));
                s.stderr()
            });
            if p.stderr.is_none() {
                p.f_hat = None;
            }
        }
    }
    prof.replica_values = reps;
    Ok(prof)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauFit<F> {
    pub window: (F, F),
    pub n_points: usize,
    pub level: F,
    pub slope: F,
    pub level_stderr: F,
    pub slope_stderr: F,
    /// `level / log(beta / alpha)`.
    pub constant: F,
    pub constant_stderr: F,
    /// `|slope| <= 2 slope_stderr`.
    pub flat: bool,
}

pub const MIN_PLATEAU_POINTS: usize = 8;

/// Weighted least squares `f = level + slope (x - midpoint)` over the window.
///
/// Weights are inverse variances when every point has a positive stderr,
/// uniform otherwise. With per-replica values available, the reported
/// standard errors come from the spread of the per-replica fits, which
/// accounts for the strong correlation between neighbouring grid points.
pub fn fit_plateau<F: Real>(profile: &TailProfile<F>, window: (F, F)) -> Result<PlateauFit<F>, MeasureError> {
    let idx: Vec<usize> = profile
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.x >= window.0 && p.x <= window.1 && p.f_hat.is_some())
        .map(|(i, _)| i)
        .collect();
    if idx.len() < MIN_PLATEAU_POINTS {
        return Err(MeasureError::InsufficientPoints { need: MIN_PLATEAU_POINTS, found: idx.len() });
    }
    let x: Vec<F> = idx.iter().map(|&i| profile.points[i].x).collect();
    let y: Vec<F> = idx.iter().map(|&i| profile.points[i].f_hat.unwrap_or_else(F::zero)).collect();
    let se: Vec<Option<F>> = idx.iter().map(|&i| profile.points[i].stderr).collect();
    let w: Vec<F> = if se.iter().all(|s| s.is_some_and(|s| s > F::zero())) {
        se.iter().map(|s| s.map_or(F::one(), |s| F::one() / (s * s))).collect()
    } else {
        vec![F::one(); x.len()]
    };
    let mid = (window.0 + window.1) * F::c(0.5);
    let fit =
        weighted_line_fit(&x, &y, &w, Some(mid)).ok_or(MeasureError::InsufficientPoints { need: MIN_PLATEAU_POINTS, found: idx.len() })?;
    let (mut level_se, mut slope_se) = (fit.level_stderr, fit.slope_stderr);
    if profile.replica_values.len() >= 2 {
        let mut lv = RunningStats::new();
        let mut sl = RunningStats::new();
        for rep in &profile.replica_values {
            let yr: Option<Vec<F>> = idx.iter().map(|&i| rep[i]).collect();
            if let Some(fr) = yr.and_then(|yr| weighted_line_fit(&x, &yr, &w, Some(mid))) {
                lv.push(fr.level);
                sl.push(fr.slope);
            }
        }
        if lv.count() >= 2 {
            level_se = lv.stderr();
            slope_se = sl.stderr();
        }
    } else if se.iter().any(Option::is_none) {
        // residual-based scale for unweighted fits
        let n = x.len();
        let rss: F = x
            .iter()
            .zip(&y)
            .map(|(&xi, &yi)| {
                let r = yi - fit.level - fit.slope * (xi - mid);
                r * r
            })
            .sum();
        let s2 = rss / F::usize(n - 2);
        level_se = fit.level_stderr * s2.sqrt();
        slope_se = fit.slope_stderr * s2.sqrt();
    }
    let lr = (profile.beta / profile.alpha).ln();
    Ok(PlateauFit {
        window,
        n_points: idx.len(),
        level: fit.level,
        slope: fit.slope,
        level_stderr: level_se,
        slope_stderr: slope_se,
        constant: fit.level / lr,
        constant_stderr: level_se / lr,
        flat: fit.slope.abs() <= F::c(2.0) * slope_se,
    })
}

/// Effective hits a grid point needs to enter the default plateau window.
pub const MIN_WINDOW_HITS: f64 = 1e3;

/// Longest run of consecutive grid points with `x >= 0` whose intervals each
/// hold at least `min_hits` raw visits of `hist`, the histogram the profile
/// was computed from. Ties go to the run further out.
pub fn default_plateau_window<F: Real>(profile: &TailProfile<F>, hist: &LogHistogram<F>, min_hits: f64) -> Option<(F, F)> {
    let scale = hist.scale().f64();
    let ok = |p: &ProfilePoint<F>| p.x >= F::zero() && p.f_hat.is_some_and(|f| f.f64() / scale >= min_hits);
    let mut best: Option<(usize, usize)> = None;
    let mut start: Option<usize> = None;
    for (i, p) in profile.points.iter().enumerate() {
        match (ok(p), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if best.is_none_or(|(a, b)| i - 1 - s >= b - a) {
                    best = Some((s, i - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        let e = profile.points.len() - 1;
        if best.is_none_or(|(a, b)| e - s >= b - a) {
            best = Some((s, e));
        }
    }
    best.filter(|(a, b)| b - a + 1 >= MIN_PLATEAU_POINTS).map(|(a, b)| (profile.points[a].x, profile.points[b].x))
}

/// `nu((1 + |x|)^-gamma)` restricted to `log|x| <= log_window`, from bin
/// midpoints in log scale. The near-zero bin contributes with weight 1.
pub fn moment_weight<F: Real>(hist: &LogHistogram<F>, gamma: F, log_window: F) -> F {
    let w = F::one() / hist.bins_per_e;
    let mut acc = F::zero();
    for (bin, c) in hist.nonempty() {
        let k = match bin {
            Bin::Zero => {
                acc += F::c(c as f64);
                continue;
            }
            Bin::Pos(k) | Bin::Neg(k) => k,
        };
        let lo = F::c(k as f64) * w;
        if lo + w > log_window {
            if lo >= log_window {
                continue;
            }
            // partial bin, log-uniform share
            let share = (log_window - lo) / w;
            let mid = lo + (log_window - lo) * F::c(0.5);
            acc += share * F::c(c as f64) * (F::one() + mid.exp()).powf(-gamma);
            continue;
        }
        let mid = lo + w * F::c(0.5);
        acc += F::c(c as f64) * (F::one() + mid.exp()).powf(-gamma);
    }
    acc * hist.scale
}

/// `max_x nu[-x, x] / (1 + x^gamma)` over the resolved positive range
/// `log x <= log_max`.
pub fn growth_ratio<F: Real>(hist: &LogHistogram<F>, gamma: F, log_max: F) -> F {
    let c = hist.cumulative();
    let mut best = F::zero();
    let (k_min, _) = hist.k_range();
    let w = 1.0 / c.bins_per_e;
    let mut k = k_min;
    loop {
        let l = (k + 1) as f64 * w;
        if l > log_max.f64() {
            break;
        }
        let x = l.exp();
        let m = c.signed(x).value - c.signed(-x).value;
        let r = F::c(m / (1.0 + x.powf(gamma.f64())));
        if r > best {
            best = r;
        }
        k += 1;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn default_window_is_longest_well_sampled_run() {
        let pt = |x: f64, f: Option<f64>| ProfilePoint { x, f_hat: f, stderr: None };
        let mut points: Vec<ProfilePoint<f64>> = (0..40).map(|i| pt(i as f64 * 0.5 - 5.0, Some(5000.0))).collect();
        points[14].f_hat = Some(10.0);
        points[30].f_hat = None;
        let profile = TailProfile { alpha: 1.0, beta: 2.0, points, replica_values: vec![], normalization: NORMALIZATION.into() };
        let hist = LogHistogram::<f64>::new(Geometry::default()).unwrap();
        // x >= 0 starts at index 10; runs are 10..=13, 15..=29, 31..=39
        assert_eq!(default_plateau_window(&profile, &hist, MIN_WINDOW_HITS), Some((2.5, 9.5)));
        assert_eq!(default_plateau_window(&profile, &hist, 1e4), None);
    }

    fn geom2() -> Geometry {
        Geometry { ratio: DEFAULT_RATIO, log_min: -10.0, log_max: 20.0 }
    }

    #[test]
    fn ratio_two_bins() {
        let g = Geometry { ratio: 2.0, log_min: -10.0 * 2f64.ln(), log_max: 10.0 };
        let h = LogHistogram::<f64>::new(g).unwrap();
        assert_eq!(h.k_range().0, -10);
        let (s, _) = h.locate(Scaled::new(1.0));
        assert_eq!(h.bin_of_slot(s), Bin::Pos(-1));
        assert_eq!(h.edges(Bin::Pos(-1)), (0.5, 1.0));
        let (s, _) = h.locate(Scaled::new(-3.0));
        assert_eq!(h.bin_of_slot(s), Bin::Neg(1));
        assert_eq!(h.edges(Bin::Neg(1)), (-4.0, -2.0));
    }

    #[test]
    fn fast_binning_matches_logarithm() {
        use rand::{Rng, SeedableRng};
        let h = LogHistogram::<f64>::new(Geometry::default()).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..200_000 {
            let x = rng.random_range(-40.0f64..700.0).exp();
            let fast = h.native_bin(x).unwrap();
            let t = x.ln() * h.geometry().bins_per_e();
            if t < h.k_range().0 as f64 - 1e-6 {
                assert!(fast < h.k_range().0);
                continue;
            }
            // away from edges both routes must agree
            if (t - t.round()).abs() > 1e-9 {
                assert_eq!(fast, t.ceil() as i64 - 1, "x = {x}");
            }
            let (lo, hi) = (h.geometry().edge(fast), h.geometry().edge(fast + 1));
            assert!(lo < x && x <= hi, "x = {x} not in ({lo}, {hi}]");
        }
    }

    #[test]
    fn bin_arithmetic() {
        let h = LogHistogram::<f64>::new(geom2()).unwrap();
        let (s, _) = h.locate(Scaled::new(1.0));
        assert_eq!(h.bin_of_slot(s), Bin::Pos(-1));
        let (s, _) = h.locate(Scaled::new(std::f64::consts::E));
        assert_eq!(h.bin_of_slot(s), Bin::Pos(15));
        let (s, _) = h.locate(Scaled::new(-3.0));
        // ln 3 * 16 = 17.58 -> k = 17
        assert_eq!(h.bin_of_slot(s), Bin::Neg(17));
        let (lo, hi) = h.edges(Bin::Neg(17));
        assert!(lo < -3.0 && -3.0 <= hi);
        let (s, _) = h.locate(Scaled::new(0.0));
        assert_eq!(s, 0);
        let (s, clamped) = h.locate(Scaled::new(1e300));
        assert!(clamped);
        assert_eq!(h.bin_of_slot(s), Bin::Pos(h.k_range().1));
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let mut h = LogHistogram::<f64>::new(Geometry::default()).unwrap();
        let mut x = 0.3f64;
        for i in 0..1_000_000 {
            x = (x * 1.7 + 0.1 * i as f64).sin() * (i as f64 % 50.0).exp();
            h.record_value(x);
        }
        let before = h.clone();
        h.merge(&LogHistogram::new(Geometry::default()).unwrap()).unwrap();
        assert_eq!(h, before);
        assert_eq!(h.total_steps(), 1_000_000);
        assert_eq!(h.counts.iter().sum::<u64>(), 1_000_000);
    }

    #[test]
    fn csv_round_trip() {
        let mut h = LogHistogram::<f64>::new(geom2()).unwrap();
        for &v in &[0.0, 1.0, 2.5, -3.0, 1e-6, 7.0, 7.1] {
            h.record_value(v);
        }
        let text = h.to_csv(&[("seed".into(), "1".into())]);
        let back = LogHistogram::<f64>::from_csv(&text).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn single_bin_inside_interval() {
        let mut h = LogHistogram::<f64>::new(geom2()).unwrap();
        h.record_value(1.5);
        let p = tail_profile(&h, 1.0, std::f64::consts::E, &[0.0]).unwrap();
        assert_relative_eq!(p.points[0].f_hat.unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn aligned_interval_sums_sixteen_bins() {
        let mut h = LogHistogram::<f64>::new(geom2()).unwrap();
        for k in -20i64..40 {
            for _ in 0..(k + 21) {
                h.record_value(((k as f64 + 0.5) / 16.0).exp());
            }
        }
        let p = tail_profile(&h, 1.0, std::f64::consts::E, &[0.0, 1.0]).unwrap();
        let expect0: u64 = (0..16).map(|k| (k + 21) as u64).sum();
        let expect1: u64 = (16..32).map(|k| (k + 21) as u64).sum();
        assert_relative_eq!(p.points[0].f_hat.unwrap(), expect0 as f64, epsilon = 1e-9);
        assert_relative_eq!(p.points[1].f_hat.unwrap(), expect1 as f64, epsilon = 1e-9);
    }

    #[test]
    fn additivity_and_scale_covariance() {
        let mut h = LogHistogram::<f64>::new(geom2()).unwrap();
        let mut s = 0.123f64;
        for _ in 0..50_000 {
            s = (s * 9301.0 + 49297.0) % 233280.0;
            h.record_value((s / 233280.0 * 12.0 - 2.0).exp());
        }
        let e = std::f64::consts::E;
        let grid: Vec<f64> = (0..40).map(|i| -1.0 + 0.173 * i as f64).collect();
        let a = tail_profile(&h, 1.0, e, &grid).unwrap();
        let b = tail_profile(&h, e, e * e, &grid).unwrap();
        let ab = tail_profile(&h, 1.0, e * e, &grid).unwrap();
        for i in 0..grid.len() {
            if let (Some(x), Some(y), Some(z)) = (a.points[i].f_hat, b.points[i].f_hat, ab.points[i].f_hat) {
                assert_relative_eq!(x + y, z, epsilon = 1e-9);
            }
        }
        // (lambda alpha, lambda beta) at x equals (alpha, beta) at x + log lambda
        let lambda = (3.0f64 / 16.0).exp();
        let shifted: Vec<f64> = grid.iter().map(|x| x + lambda.ln()).collect();
        let p = tail_profile(&h, lambda, lambda * e, &grid).unwrap();
        let q = tail_profile(&h, 1.0, e, &shifted).unwrap();
        for i in 0..grid.len() {
            if let (Some(x), Some(y)) = (p.points[i].f_hat, q.points[i].f_hat) {
                assert_relative_eq!(x, y, epsilon = 1e-9, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn coarse_bins_are_rejected() {
        let h = LogHistogram::<f64>::new(Geometry { ratio: 0.25f64.exp(), ..geom2() }).unwrap();
        assert!(matches!(tail_profile(&h, 1.0, 2.0, &[0.0]), Err(MeasureError::Unresolvable { .. })));
    }

    #[test]
    fn outside_support_is_missing() {
        let mut h = LogHistogram::<f64>::new(geom2()).unwrap();
        h.record_value(2.0);
        let p = tail_profile(&h, 1.0, std::f64::consts::E, &[0.0, 5.0]).unwrap();
        assert!(p.points[0].f_hat.is_some());
        assert!(p.points[1].f_hat.is_none());
    }

    fn synthetic(f: impl Fn(f64) -> f64) -> TailProfile<f64> {
        TailProfile {
            alpha: 1.0,
            beta: std::f64::consts::E,
            points: (0..=32)
                .map(|i| {
                    let x = 8.0 + i as f64 / 8.0;
                    ProfilePoint { x, f_hat: Some(f(x)), stderr: Some(0.1) }
                })
                .collect(),
            replica_values: vec![],
            normalization: NORMALIZATION.into(),
        }
    }

    #[test]
    fn plateau_of_constant_and_line() {
        let fit = fit_plateau(&synthetic(|_| 2.5), (8.0, 12.0)).unwrap();
        assert_relative_eq!(fit.level, 2.5, epsilon = 1e-12);
        assert!(fit.slope.abs() < 1e-12);
        assert!(fit.flat);
        let fit = fit_plateau(&synthetic(|x| 0.7 + 0.2 * x), (8.0, 12.0)).unwrap();
        assert_relative_eq!(fit.level, 0.7 + 0.2 * 10.0, epsilon = 1e-12);
        assert_relative_eq!(fit.slope, 0.2, epsilon = 1e-12);
        assert!(matches!(fit_plateau(&synthetic(|_| 1.0), (8.0, 8.5)), Err(MeasureError::InsufficientPoints { .. })));
    }

    #[test]
    fn normalization_at_reference() {
        let mut h = LogHistogram::<f64>::new(Geometry::default()).unwrap();
        for i in 0..1000 {
            h.record_value(1.0 + i as f64 * 0.01);
        }
        h.normalize_to(1.0, std::f64::consts::E).unwrap();
        assert_relative_eq!(h.mass(1.0, std::f64::consts::E), 1.0, epsilon = 1e-12);
        let mut empty = LogHistogram::<f64>::new(Geometry::default()).unwrap();
        assert!(empty.normalize_to(1.0, 2.0).is_err());
    }

    #[test]
    fn signed_cumulative_spans_zero() {
        let mut h = LogHistogram::<f64>::new(geom2()).unwrap();
        h.record_value(-2.0);
        h.record_value(0.0);
        h.record_value(3.0);
        let c = h.cumulative();
        assert_relative_eq!(c.interval(-10.0, 10.0).value, 3.0, epsilon = 1e-12);
        assert_relative_eq!(c.interval(-10.0, 0.0).value, 1.5, epsilon = 1e-12);
        assert_relative_eq!(c.up_to(0.0).value, 1.5, epsilon = 1e-12);
        assert_relative_eq!(c.up_to(100.0).value, 3.0, epsilon = 1e-12);
        assert!(c.interval(1.0, 1e6).truncated);
    }
}
