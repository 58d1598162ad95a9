//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use critrec_core::measure::Geometry;
use critrec_core::ModelSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ConfigError;

/// Which estimator of the invariant measure a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    Ratio,
    Ladder,
    Both,
}

impl EstimatorChoice {
    pub fn ratio(self) -> bool {
        matches!(self, Self::Ratio | Self::Both)
    }

    pub fn ladder(self) -> bool {
        matches!(self, Self::Ladder | Self::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub replicas: u32,
    /// Index of the first replica; replica `i` always uses the substreams of
    /// `(seed, i)`, so any subset can be rerun on its own.
    pub first_replica: u32,
    /// Steps per replica for the ratio estimator.
    pub n_steps: u64,
    /// Ladder cycles per replica.
    pub n_cycles: u64,
    pub estimator: EstimatorChoice,
    pub x0: f64,
    pub cycle_cap: u64,
    pub burn_in_cycles: u64,
    /// Largest tolerated share of ladder cycles discarded at the cap.
    pub max_excluded_fraction: f64,
    /// Worker threads; 0 uses the machine parallelism. Does not affect results.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 1,
            replicas: 1,
            first_replica: 0,
            n_steps: 1_000_000,
            n_cycles: 10_000,
            estimator: EstimatorChoice::Ratio,
            x0: 0.0,
            cycle_cap: 1_000_000,
            burn_in_cycles: 1_000,
            max_excluded_fraction: 0.01,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramSection {
    pub bin_ratio: f64,
    pub log_min: f64,
    pub log_max: f64,
}

impl Default for HistogramSection {
    fn default() -> Self {
        let g = Geometry::default();
        Self { bin_ratio: g.ratio, log_min: g.log_min, log_max: g.log_max }
    }
}

impl HistogramSection {
    pub fn geometry(&self) -> Geometry {
        Geometry { ratio: self.bin_ratio, log_min: self.log_min, log_max: self.log_max }
    }
}

/// Uniform grid `lo, lo + step, ..., <= hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { lo: -4.0, hi: 16.0, step: 0.0625 }
    }
}

impl GridSpec {
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| self.lo + i as f64 * self.step).collect()
    }

    fn check(&self, field: &str) -> Result<(), ConfigError> {
        if !(self.step > 0.0 && self.hi > self.lo && self.lo.is_finite() && self.hi.is_finite()) {
            return Err(ConfigError::Invalid { field: field.into(), msg: "needs lo < hi and step > 0".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TailSection {
    /// `(alpha, beta)` intervals of the profiles.
    pub pairs: Vec<[f64; 2]>,
    /// Plateau window in `x`; when absent, the longest well-sampled run.
    pub window: Option<[f64; 2]>,
    /// Also profile the negative half-line.
    pub negative: bool,
}

impl Default for TailSection {
    fn default() -> Self {
        Self { pairs: vec![[1.0, 2.0], [1.0, 4.0], [2.0, 8.0]], window: None, negative: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsSection {
    /// Interval `(alpha e^x, beta e^x]` defining `f` and `psi`.
    pub alpha: f64,
    pub beta: f64,
    pub mc_draws: usize,
    pub batches: usize,
    /// Grid for `psi`; defaults to the profile grid.
    pub psi_grid: Option<GridSpec>,
    /// Floor of the affine log-ratio functional.
    pub eps: f64,
    /// Window in `x` where the Poisson residual is judged; defaults to the whole grid.
    pub residual_window: Option<[f64; 2]>,
}

impl Default for ConstantsSection {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: std::f64::consts::E,
            mc_draws: 20_000,
            batches: critrec_core::constants::DEFAULT_PSI_BATCHES,
            psi_grid: None,
            eps: 1e-3,
            residual_window: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    /// Fit window in `log x`.
    pub window: [f64; 2],
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self { window: [3.0, 7.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub histogram: HistogramSection,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub tail: TailSection,
    #[serde(default)]
    pub constants: ConstantsSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    /// Output directory; overridden by `--out`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicas: Option<u32>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.to_path_buf(), msg: e.to_string() })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse(msg) => ConfigError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(s) = o.seed {
            self.run.seed = s;
        }
        if let Some(r) = o.replicas {
            self.run.replicas = r;
        }
        self.check()
    }

    fn check(&self) -> Result<(), ConfigError> {
        let bad = |field: &str, msg: &str| Err(ConfigError::Invalid { field: field.into(), msg: msg.into() });
        if self.run.replicas < 1 {
            return bad("run.replicas", "must be at least 1");
        }
        if self.run.first_replica.checked_add(self.run.replicas).is_none() {
            return bad("run.first_replica", "replica indices overflow");
        }
        if self.run.cycle_cap < 1 {
            return bad("run.cycle_cap", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.run.max_excluded_fraction) {
            return bad("run.max_excluded_fraction", "must lie in [0, 1]");
        }
        if !self.run.x0.is_finite() {
            return bad("run.x0", "must be finite");
        }
        critrec_core::measure::LogHistogram::<f64>::new(self.histogram.geometry())
            .map_err(|e| ConfigError::Invalid { field: "histogram".into(), msg: e.to_string() })?;
        self.grid.check("grid")?;
        if let Some(g) = &self.constants.psi_grid {
            g.check("constants.psi_grid")?;
        }
        if self.tail.pairs.is_empty() {
            return bad("tail.pairs", "needs at least one (alpha, beta)");
        }
        for [a, b] in self.tail.pairs.iter().copied().chain([[self.constants.alpha, self.constants.beta]]) {
            if !(a > 0.0 && b > a && b.is_finite()) {
                return bad("tail.pairs", "each pair needs 0 < alpha < beta");
            }
        }
        for (name, w) in [("tail.window", self.tail.window), ("constants.residual_window", self.constants.residual_window)] {
            if w.is_some_and(|[lo, hi]| !(lo < hi)) {
                return bad(name, "needs lo < hi");
            }
        }
        if !(self.baseline.window[0] < self.baseline.window[1]) {
            return bad("baseline.window", "needs lo < hi");
        }
        if self.constants.mc_draws == 0 || self.constants.batches == 0 {
            return bad("constants", "mc_draws and batches must be positive");
        }
        if !(self.constants.eps > 0.0) {
            return bad("constants.eps", "must be positive");
        }
        Ok(())
    }

    /// Replica indices covered by this run.
    pub fn replica_ids(&self) -> std::ops::Range<u32> {
        self.run.first_replica..self.run.first_replica + self.run.replicas
    }

    pub fn psi_grid(&self) -> GridSpec {
        self.constants.psi_grid.unwrap_or(self.grid)
    }

    /// SHA-256 of the canonical TOML form, ignoring settings that cannot
    /// change results (output location, worker count).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.run.workers = 0;
        let canonical = toml::to_string(&c).expect("config serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const M1: &str = r#"
[model]
chain_kind = "affine"
delta = 0.5
regime = "critical"
a_law = { family = "log_normal", m = 0.0, s2 = 0.25 }
b_law = { family = "normal", m = 0.0, s2 = 1.0 }

[run]
n_steps = 1000
"#;

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::parse(M1).unwrap();
        assert_eq!(c.model, critrec_core::model::reference::m1());
        assert_eq!(c.run.n_steps, 1000);
        assert_eq!(c.run.replicas, 1);
        assert_eq!(c.tail.pairs.len(), 3);
    }

    #[test]
    fn unknown_field_reports_line_and_name() {
        let text = M1.replace("n_steps = 1000", "n_steps = 1000\nn_stepz = 5");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("n_stepz"), "{err}");
        assert!(err.contains("line 11"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let text = M1.replace("n_steps = 1000", "replicas = 0");
        assert!(matches!(RunConfig::parse(&text), Err(ConfigError::Invalid { .. })));
        let text = format!("{M1}\n[grid]\nlo = 3.0\nhi = 1.0\nstep = 0.1\n");
        assert!(matches!(RunConfig::parse(&text), Err(ConfigError::Invalid { .. })));
    }

    #[test]
    fn fingerprint_ignores_location_and_workers() {
        let a = RunConfig::parse(M1).unwrap();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        b.run.workers = 7;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.run.seed = 2;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut c = RunConfig::parse(M1).unwrap();
        c.apply(&Overrides { seed: Some(9), replicas: Some(4) }).unwrap();
        assert_eq!((c.run.seed, c.run.replicas), (9, 4));
        assert!(c.apply(&Overrides { seed: None, replicas: Some(0) }).is_err());
    }

    #[test]
    fn grid_points_include_hi() {
        let g = GridSpec { lo: -1.0, hi: 1.0, step: 0.25 };
        let p = g.points();
        assert_eq!(p.len(), 9);
        assert_eq!(p[8], 1.0);
    }
}
