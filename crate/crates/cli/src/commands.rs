//! The subcommands: simulation, estimation and report emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use critrec_core::baseline::{fit_tail_index_replicas, kesten_index, BaselineError, KestenBaselineReport};
use critrec_core::constants::{
    c_plus_formula_letac, c_sum_affine, d1_affine, formula_constant, level_link, poisson_residual, psi_from_definition, ConstantsReport,
    Estimate,
};
use critrec_core::ladder::{accumulate_cycles, burn_in_embedded, Functional, LadderOptions, LadderRun};
use critrec_core::measure::{
    default_plateau_window, fit_plateau, occupation_with_functionals, pooled_functionals, reference_interval, tail_profile_estimate,
    FunctionalSums, LogHistogram, MeasureEstimate, PlateauFit, TailProfile, MIN_WINDOW_HITS,
};
use critrec_core::model::{validate, ChainKind, Regime, ValidationReport};
use critrec_core::{Purpose, RandomStream, StateRange};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::Command;

/// Files produced by one subcommand, in write order.
pub type Artifacts = Vec<(String, String)>;

/// One estimator's replicas, merged in replica order.
struct Estimated {
    name: &'static str,
    estimate: MeasureEstimate<f64>,
    /// Normalized functional integrals with standard errors and excluded visit shares.
    integrals: Vec<(Estimate<f64>, f64)>,
    notes: Vec<(String, String)>,
}

pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub fingerprint: String,
    pub command: Command,
}

impl Context<'_> {
    fn meta(&self, estimator: Option<&str>) -> Vec<(String, String)> {
        let ids = self.cfg.replica_ids();
        let mut m = vec![
            ("subcommand".to_string(), self.command.name().to_string()),
            ("fingerprint".to_string(), self.fingerprint.clone()),
            ("seed".to_string(), self.cfg.run.seed.to_string()),
            ("replicas".to_string(), format!("{}..{}", ids.start, ids.end)),
        ];
        if let Some(e) = estimator {
            m.push(("estimator".to_string(), e.to_string()));
        }
        m
    }

    /// `key = value` lines for text reports, leaving out keys the report body
    /// already carries.
    fn header(&self, estimator: Option<&str>, skip: &[&str]) -> String {
        let mut out = String::new();
        for (k, v) in self.meta(estimator).into_iter().filter(|(k, _)| !skip.contains(&k.as_str())) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Runs the subcommand and returns its artifacts without touching the disk.
pub fn execute(ctx: &Context<'_>) -> Result<Artifacts, CliError> {
    let report = check_assumptions(ctx)?;
    match ctx.command {
        Command::Validate => Ok(validation(ctx)?.0),
        Command::Simulate => simulate(ctx),
        Command::Tail => tail(ctx),
        Command::Constants => constants(ctx, report.sigma2),
        Command::PoissonCheck => poisson_check(ctx),
        Command::KestenBaseline => kesten_baseline(ctx),
    }
}

/// Names of the artifacts a subcommand will write.
pub fn artifact_names(cfg: &RunConfig, command: Command) -> Vec<String> {
    let est = estimator_names(cfg);
    match command {
        Command::Validate => vec!["validation.toml".into()],
        Command::Simulate => est.iter().map(|e| format!("histogram_{e}.csv")).collect(),
        Command::Tail => {
            let mut v = Vec::new();
            for e in &est {
                v.push(format!("histogram_{e}.csv"));
                for side in sides(cfg) {
                    for [a, b] in &cfg.tail.pairs {
                        v.push(profile_name(e, side, *a, *b));
                    }
                }
                v.push(format!("plateau_{e}.toml"));
            }
            v
        }
        Command::Constants => vec!["psi.csv".into(), "constants.txt".into()],
        Command::PoissonCheck => vec!["psi.csv".into(), "residual.csv".into(), "poisson.txt".into()],
        Command::KestenBaseline => vec!["baseline.txt".into()],
    }
}

fn estimator_names(cfg: &RunConfig) -> Vec<&'static str> {
    let mut v = Vec::new();
    if cfg.run.estimator.ratio() {
        v.push("ratio");
    }
    if cfg.run.estimator.ladder() {
        v.push("ladder");
    }
    v
}

fn sides(cfg: &RunConfig) -> Vec<bool> {
    if cfg.tail.negative {
        vec![false, true]
    } else {
        vec![false]
    }
}

fn profile_name(est: &str, negative: bool, a: f64, b: f64) -> String {
    let side = if negative { "neg" } else { "pos" };
    format!("tail_{est}_{side}_a{a}_b{b}.csv")
}

fn check_assumptions(ctx: &Context<'_>) -> Result<ValidationReport<f64>, CliError> {
    let model = &ctx.cfg.model;
    let report = validate(model).map_err(|e| CliError::Assumption(e.to_string()))?;
    if !report.all_hold() {
        return Err(CliError::Assumption(format!("failing assumptions: {}", report.failures().join(", "))));
    }
    let needed = match ctx.command {
        Command::Validate | Command::Simulate => None,
        Command::KestenBaseline => Some(Regime::Contractive),
        _ => Some(Regime::Critical),
    };
    if let Some(r) = needed.filter(|&r| r != model.regime) {
        return Err(CliError::Assumption(format!("`{}` needs a {r:?} model, got {:?}", ctx.command.name(), model.regime)));
    }
    Ok(report)
}

#[derive(Serialize)]
struct ValidationFile<'a> {
    subcommand: &'a str,
    fingerprint: &'a str,
    seed: u64,
    report: &'a ValidationReport<f64>,
}

/// The validation report artifact, together with the failure to report after
/// it is written.
pub fn validation(ctx: &Context<'_>) -> Result<(Artifacts, Option<CliError>), CliError> {
    let report = validate(&ctx.cfg.model).map_err(|e| CliError::Assumption(e.to_string()))?;
    let file = ValidationFile { subcommand: ctx.command.name(), fingerprint: &ctx.fingerprint, seed: ctx.cfg.run.seed, report: &report };
    let text = toml::to_string(&file).map_err(|e| CliError::Runtime(e.to_string()))?;
    let failure = (!report.all_hold()).then(|| CliError::Assumption(format!("failing assumptions: {}", report.failures().join(", "))));
    Ok((vec![("validation.toml".into(), text)], failure))
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new().num_threads(cfg.run.workers).build().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Occupation histogram and functional sums of one ratio-estimator replica.
pub type RatioReplica = (LogHistogram<f64>, FunctionalSums<f64>);

/// Ratio-estimator replicas, in replica order.
pub fn ratio_replicas(cfg: &RunConfig, functionals: &[Functional<f64>]) -> Result<Vec<RatioReplica>, CliError> {
    let ids: Vec<u32> = cfg.replica_ids().collect();
    let geometry = cfg.histogram.geometry();
    pool(cfg)?.install(|| {
        ids.par_iter()
            .map(|&r| {
                let mut rng = RandomStream::substream(cfg.run.seed, Purpose::Simulate, r);
                occupation_with_functionals(&cfg.model, cfg.run.x0, cfg.run.n_steps, functionals, &mut rng, geometry, StateRange::Extended)
                    .map_err(CliError::from)
            })
            .collect()
    })
}

fn ladder_options(cfg: &RunConfig) -> LadderOptions {
    LadderOptions { cycle_cap: cfg.run.cycle_cap, geometry: cfg.histogram.geometry(), ..LadderOptions::default() }
}

/// Ladder-estimator replicas, in replica order. Each replica burns in the
/// embedded chain on its own stream before accumulating cycles.
pub fn ladder_replicas(cfg: &RunConfig, functionals: &[Functional<f64>]) -> Result<Vec<LadderRun<f64>>, CliError> {
    let ids: Vec<u32> = cfg.replica_ids().collect();
    let opts = ladder_options(cfg);
    let runs: Vec<LadderRun<f64>> = pool(cfg)?.install(|| {
        ids.par_iter()
            .map(|&r| {
                let mut rng = RandomStream::substream(cfg.run.seed, Purpose::Burnin, r);
                let burn = burn_in_embedded(&cfg.model, cfg.run.x0, cfg.run.burn_in_cycles, &mut rng, &opts)?;
                let mut rng = RandomStream::substream(cfg.run.seed, Purpose::Ladder, r);
                accumulate_cycles(&cfg.model, burn.w, cfg.run.n_cycles, functionals, &mut rng, &opts).map_err(CliError::from)
            })
            .collect::<Result<_, CliError>>()
    })?;
    for (r, run) in ids.iter().zip(&runs) {
        let f = run.exclusion_fraction();
        if f > cfg.run.max_excluded_fraction {
            return Err(CliError::Runtime(format!(
                "replica {r}: {f} of ladder cycles hit the cycle cap {} (limit {})",
                cfg.run.cycle_cap, cfg.run.max_excluded_fraction
            )));
        }
    }
    Ok(runs)
}

fn normalized(hists: Vec<LogHistogram<f64>>) -> Result<MeasureEstimate<f64>, CliError> {
    let (lo, hi) = reference_interval();
    Ok(MeasureEstimate::from_replicas(hists, lo, hi)?)
}

fn estimate_ratio(cfg: &RunConfig, functionals: &[Functional<f64>]) -> Result<Estimated, CliError> {
    let reps = ratio_replicas(cfg, functionals)?;
    let sums: Vec<FunctionalSums<f64>> = reps.iter().map(|(_, s)| s.clone()).collect();
    let visits: u64 = sums.iter().map(|s| s.visits).sum();
    let integrals = pooled_functionals(&sums)
        .into_iter()
        .enumerate()
        .map(|(i, (v, se))| {
            let excluded: u64 = sums.iter().map(|s| s.excluded_visits[i]).sum();
            (Estimate::new(v, se), excluded as f64 / visits.max(1) as f64)
        })
        .collect();
    let reference_hits: u64 = sums.iter().map(|s| s.reference_hits).sum();
    let notes = vec![("steps_per_replica".into(), cfg.run.n_steps.to_string()), ("reference_hits".into(), reference_hits.to_string())];
    Ok(Estimated { name: "ratio", estimate: normalized(reps.into_iter().map(|(h, _)| h).collect())?, integrals, notes })
}

fn estimate_ladder(cfg: &RunConfig, functionals: &[Functional<f64>]) -> Result<Estimated, CliError> {
    let runs = ladder_replicas(cfg, functionals)?;
    let rows = runs[0].batch_sums.len();
    let mut batches: Vec<Vec<f64>> = vec![Vec::new(); rows];
    let mut excluded = vec![0u64; functionals.len()];
    let (mut steps, mut completed, mut capped) = (0u64, 0u64, 0u64);
    for run in &runs {
        for (row, b) in batches.iter_mut().zip(&run.batch_sums) {
            row.extend_from_slice(b);
        }
        for (e, f) in excluded.iter_mut().zip(&run.functionals) {
            *e += f.excluded_visits;
        }
        steps += run.steps;
        completed += run.cycles_completed;
        capped += run.cycles_excluded;
    }
    let names: Vec<String> = functionals.iter().map(Functional::name).collect();
    let integrals = LadderRun::estimates_from_batches(&names, &batches, &excluded)
        .into_iter()
        .map(|f| (Estimate::new(f.normalized, f.normalized_stderr), f.excluded_visits as f64 / steps.max(1) as f64))
        .collect();
    let notes = vec![
        ("cycles_per_replica".into(), cfg.run.n_cycles.to_string()),
        ("cycle_cap".into(), cfg.run.cycle_cap.to_string()),
        ("cycles_completed".into(), completed.to_string()),
        ("cycles_excluded".into(), capped.to_string()),
        ("experimental".into(), (cfg.model.chain_kind != ChainKind::Letac).to_string()),
    ];
    Ok(Estimated { name: "ladder", estimate: normalized(runs.into_iter().map(|r| r.histogram).collect())?, integrals, notes })
}

fn estimates(cfg: &RunConfig, functionals: &[Functional<f64>]) -> Result<Vec<Estimated>, CliError> {
    let mut v = Vec::new();
    if cfg.run.estimator.ratio() {
        v.push(estimate_ratio(cfg, functionals)?);
    }
    if cfg.run.estimator.ladder() {
        v.push(estimate_ladder(cfg, functionals)?);
    }
    Ok(v)
}

/// The estimator that feeds constants and residuals: the ladder when selected.
fn primary(cfg: &RunConfig, functionals: &[Functional<f64>]) -> Result<Estimated, CliError> {
    if cfg.run.estimator.ladder() {
        estimate_ladder(cfg, functionals)
    } else {
        estimate_ratio(cfg, functionals)
    }
}

fn histogram_csv(ctx: &Context<'_>, e: &Estimated) -> (String, String) {
    let mut meta = ctx.meta(Some(e.name));
    meta.extend(e.notes.iter().cloned());
    (format!("histogram_{}.csv", e.name), e.estimate.pooled.to_csv(&meta))
}

fn simulate(ctx: &Context<'_>) -> Result<Artifacts, CliError> {
    Ok(estimates(ctx.cfg, &[])?.iter().map(|e| histogram_csv(ctx, e)).collect())
}

#[derive(Serialize)]
struct PlateauEntry {
    alpha: f64,
    beta: f64,
    side: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<PlateauFit<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

#[derive(Serialize)]
struct PlateauFile<'a> {
    subcommand: &'a str,
    fingerprint: &'a str,
    seed: u64,
    estimator: &'a str,
    normalization: &'a str,
    plateau: Vec<PlateauEntry>,
}

fn plateau_window(cfg: &RunConfig, profile: &TailProfile<f64>, est: &MeasureEstimate<f64>) -> Option<(f64, f64)> {
    match cfg.tail.window {
        Some([lo, hi]) => Some((lo, hi)),
        None => default_plateau_window(profile, &est.pooled, MIN_WINDOW_HITS),
    }
}

fn tail(ctx: &Context<'_>) -> Result<Artifacts, CliError> {
    let cfg = ctx.cfg;
    let grid = cfg.grid.points();
    let mut out = Vec::new();
    for e in estimates(cfg, &[])? {
        out.push(histogram_csv(ctx, &e));
        let mut entries = Vec::new();
        for negative in sides(cfg) {
            for &[a, b] in &cfg.tail.pairs {
                let profile = tail_profile_estimate(&e.estimate, a, b, &grid, negative)?;
                out.push((profile_name(e.name, negative, a, b), profile.to_csv(&ctx.meta(Some(e.name)))));
                let side = if negative { "neg" } else { "pos" };
                let (fit, note) = match plateau_window(cfg, &profile, &e.estimate) {
                    None => (None, Some(format!("no window with {MIN_WINDOW_HITS} hits per point"))),
                    Some(w) => match fit_plateau(&profile, w) {
                        Ok(f) => (Some(f), None),
                        Err(err) => (None, Some(err.to_string())),
                    },
                };
                entries.push(PlateauEntry { alpha: a, beta: b, side, fit, note });
            }
        }
        let file = PlateauFile {
            subcommand: ctx.command.name(),
            fingerprint: &ctx.fingerprint,
            seed: cfg.run.seed,
            estimator: e.name,
            normalization: critrec_core::measure::NORMALIZATION,
            plateau: entries,
        };
        let text = toml::to_string(&file).map_err(|err| CliError::Runtime(err.to_string()))?;
        out.push((format!("plateau_{}.toml", e.name), text));
    }
    Ok(out)
}

/// Functionals whose normalized integrals give the closed-form constants.
fn formula_functionals(cfg: &RunConfig) -> Vec<Functional<f64>> {
    match cfg.model.chain_kind {
        ChainKind::Letac => vec![Functional::LetacLogRatio],
        ChainKind::Extremal => vec![Functional::ExtremalLogRatio],
        ChainKind::Affine => {
            let eps = cfg.constants.eps;
            vec![Functional::AffineAbsLogRatio { eps }, Functional::AffineAbsLogRatio { eps: eps / 2.0 }]
        }
    }
}

fn constants(ctx: &Context<'_>, sigma2: f64) -> Result<Artifacts, CliError> {
    let cfg = ctx.cfg;
    let c = &cfg.constants;
    let model = &cfg.model;
    let e = primary(cfg, &formula_functionals(cfg))?;
    let profile = tail_profile_estimate(&e.estimate, c.alpha, c.beta, &cfg.grid.points(), false)?;
    let window = plateau_window(cfg, &profile, &e.estimate)
        .ok_or_else(|| CliError::Runtime(format!("no plateau window with {MIN_WINDOW_HITS} hits per point; set tail.window")))?;
    let mut rng = RandomStream::substream(cfg.run.seed, Purpose::Psi, 0);
    let psi = psi_from_definition(model, &e.estimate, c.alpha, c.beta, &cfg.psi_grid().points(), c.mc_draws, c.batches, &mut rng)?;
    let link = level_link(&profile, window, &psi, sigma2)?;
    let mut report = ConstantsReport::new(sigma2, c.alpha, c.beta, &link.moments, &link.plateau, ctx.fingerprint.clone());
    if model.chain_kind != ChainKind::Extremal {
        let mut rng = RandomStream::substream(cfg.run.seed, Purpose::Boundary, 0);
        report.d1_plus = Some(d1_affine(model, &e.estimate, c.mc_draws, &mut rng)?.d1_plus);
    }
    match model.chain_kind {
        ChainKind::Affine => {
            let neg = tail_profile_estimate(&e.estimate, c.alpha, c.beta, &cfg.grid.points(), true)?;
            let fit = fit_plateau(&neg, window)?;
            report.c_minus_plateau = Some(Estimate::new(fit.constant, fit.constant_stderr));
            let (i1, x1) = e.integrals[0];
            let (i2, _) = e.integrals[1];
            report.c_sum = Some(c_sum_affine(model, sigma2, i1, i2, x1)?);
        }
        ChainKind::Letac => report.c_plus_formula = Some(c_plus_formula_letac(model, sigma2, e.integrals[0].0)?),
        ChainKind::Extremal => report.c_plus_formula = Some(formula_constant(sigma2, e.integrals[0].0)),
    }
    let mut text = ctx.header(Some(e.name), &["fingerprint"]);
    text.push_str(&report.to_text());
    let _ = writeln!(text, "predicted_level_from_c2 = {} +- {}", link.predicted_level.value, link.predicted_level.stderr);
    let _ = writeln!(text, "plateau_level = {} +- {}", link.plateau.level, link.plateau.level_stderr);
    let _ = writeln!(text, "relative_gap = {}", link.relative_gap);
    let _ = writeln!(text, "c1_vanishes = {}", link.c1_vanishes);
    let _ = writeln!(text, "boundary_ratio = {}", link.moments.boundary_ratio);
    let _ = writeln!(text, "psi_truncated_fraction = {}", psi.truncated_fraction);
    for (k, v) in &e.notes {
        let _ = writeln!(text, "{k} = {v}");
    }
    Ok(vec![("psi.csv".into(), psi.to_csv(&ctx.meta(Some(e.name)))), ("constants.txt".into(), text)])
}

fn poisson_check(ctx: &Context<'_>) -> Result<Artifacts, CliError> {
    let cfg = ctx.cfg;
    let c = &cfg.constants;
    let e = primary(cfg, &[])?;
    let profile = tail_profile_estimate(&e.estimate, c.alpha, c.beta, &cfg.grid.points(), false)?;
    let mut rng = RandomStream::substream(cfg.run.seed, Purpose::Psi, 0);
    let psi = psi_from_definition(&cfg.model, &e.estimate, c.alpha, c.beta, &cfg.psi_grid().points(), c.mc_draws, c.batches, &mut rng)?;
    let mut rng = RandomStream::substream(cfg.run.seed, Purpose::Convolve, 0);
    let res = poisson_residual(&profile, &psi, &cfg.model, c.mc_draws, &mut rng)?;
    let [lo, hi] = c.residual_window.unwrap_or([f64::NEG_INFINITY, f64::INFINITY]);
    let inside: Vec<usize> = (0..res.x.len()).filter(|&i| res.x[i] >= lo && res.x[i] <= hi).collect();
    let violations = inside.iter().filter(|&&i| res.residual[i].abs() > 3.0 * res.stderr[i]).count();
    let mut text = ctx.header(Some(e.name), &[]);
    let _ = writeln!(text, "alpha = {}\nbeta = {}", c.alpha, c.beta);
    let _ = writeln!(text, "window = [{lo}, {hi}]");
    let _ = writeln!(text, "points_in_window = {}", inside.len());
    let _ = writeln!(text, "violations_3se = {violations}");
    let _ = writeln!(text, "sup_abs = {}\nmax_z = {}", res.sup_abs, res.max_z);
    let meta = ctx.meta(Some(e.name));
    Ok(vec![("psi.csv".into(), psi.to_csv(&meta)), ("residual.csv".into(), res.to_csv(&meta)), ("poisson.txt".into(), text)])
}

fn kesten_baseline(ctx: &Context<'_>) -> Result<Artifacts, CliError> {
    let cfg = ctx.cfg;
    let analytic = kesten_index(&cfg.model).map_err(|e| match e {
        BaselineError::NotContractive(_) | BaselineError::UnsupportedFamily => CliError::Assumption(e.to_string()),
        other => CliError::from(other),
    })?;
    let hists: Vec<LogHistogram<f64>> = ratio_replicas(cfg, &[])?.into_iter().map(|(h, _)| h).collect();
    let window = (cfg.baseline.window[0], cfg.baseline.window[1]);
    let fit = fit_tail_index_replicas(&hists, window)?;
    let n_steps = cfg.run.n_steps * u64::from(cfg.run.replicas);
    let report = KestenBaselineReport::new(analytic, fit, window, n_steps);
    let mut text = ctx.header(None, &["fingerprint"]);
    text.push_str(&report.to_text(&ctx.fingerprint));
    Ok(vec![("baseline.txt".into(), text)])
}

/// Refuses to overwrite unless forced, then writes every artifact.
pub fn write_artifacts(dir: &Path, names: &[String], artifacts: &Artifacts, force: bool) -> Result<Vec<PathBuf>, CliError> {
    check_writable(dir, names, force)?;
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
    let mut written = Vec::new();
    for (name, text) in artifacts {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|source| CliError::Io { path: path.clone(), source })?;
        written.push(path);
    }
    Ok(written)
}

pub fn check_writable(dir: &Path, names: &[String], force: bool) -> Result<(), CliError> {
    if force {
        return Ok(());
    }
    match names.iter().map(|n| dir.join(n)).find(|p| p.exists()) {
        Some(p) => Err(CliError::Exists(p)),
        None => Ok(()),
    }
}
