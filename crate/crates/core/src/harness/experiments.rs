//! Experiment drivers behind the CLI verbs.
//!
//! Each verb computes all artifacts in memory first and only then writes
//! them, so a failing run leaves no partial files behind. Repeats run on
//! scoped threads with seeds `seed, seed + 1, ...`; every run uses its own
//! seed for data synthesis, initialization and sampling.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ChainStart, ExperimentConfig, RepresentationKind, Series};
use super::io::{encode_csv, encode_pgm, OutputSet};
use super::{blocks_image, gen_step_series, gen_turning_series, holdout_split, relative_error};
use crate::error::{Error, Result};
use crate::inference::{
    map_estimate_with, map_initial_point, prior_eigenpairs, run_mcmc_from, InferenceProblem, MapOptions,
    Representation,
};
use crate::kernels::{Eigenpairs, Grid};
use crate::models::{motion_blur_operator, synthesize_observation, LinearInverseData, LinearOperator, Likelihood, RegressionData};
use crate::processes::{prior_draw, qep_predict, ProcessPrior};
use crate::stats;

// random streams derived from one seed
const STREAM_NOISE: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_BANDS: u64 = 3;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One row of an optimization or sampling trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub neg_log_posterior: f64,
    pub relative_error: f64,
}

/// Metrics of one run, or of a set of repeats.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub label: String,
    /// `‖û - u†‖ / ‖u†‖` of a point estimate.
    pub relative_error: Option<f64>,
    /// `‖ū - u†‖ / ‖u†‖` of the posterior mean.
    pub rem: Option<f64>,
    /// Standard deviation of REM over repeats.
    pub rem_std: Option<f64>,
    pub rem_per_repeat: Vec<f64>,
    pub trace: Vec<TraceRow>,
    /// Pointwise posterior standard deviation.
    pub posterior_std: Option<DVector<f64>>,
    /// Further named diagnostics.
    pub extra: Vec<(String, f64)>,
}

impl MetricsReport {
    fn named(label: String) -> Self {
        Self {
            label,
            ..Default::default()
        }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        match key {
            "relative_error" => self.relative_error,
            "rem" => self.rem,
            "rem_std" => self.rem_std,
            _ => self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| *v),
        }
    }

    /// Every reported number is finite and nonnegative.
    pub fn is_valid(&self) -> bool {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        [self.relative_error, self.rem, self.rem_std].iter().flatten().all(|v| ok(*v))
            && self.rem_per_repeat.iter().all(|v| ok(*v))
            && self.trace.iter().all(|t| t.neg_log_posterior.is_finite() && ok(t.relative_error))
            && self.posterior_std.iter().flat_map(|s| s.iter()).all(|v| ok(*v))
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut out = String::from("metric,value\n");
        let mut row = |k: &str, v: f64| out.push_str(&format!("{k},{v}\n"));
        if let Some(v) = self.relative_error {
            row("relative_error", v);
        }
        if let Some(v) = self.rem {
            row("rem", v);
        }
        if let Some(v) = self.rem_std {
            row("rem_std", v);
        }
        for (i, v) in self.rem_per_repeat.iter().enumerate() {
            row(&format!("rem_repeat_{i}"), *v);
        }
        for (k, v) in &self.extra {
            row(k, *v);
        }
        out.into_bytes()
    }

    pub fn from_csv(label: String, text: &str) -> Result<Self> {
        let mut report = Self::named(label);
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("bad metrics row '{line}'")))?;
            let v: f64 = v.trim().parse().map_err(|_| Error::Parse(format!("bad metric value '{v}'")))?;
            match k {
                "relative_error" => report.relative_error = Some(v),
                "rem" => report.rem = Some(v),
                "rem_std" => report.rem_std = Some(v),
                k if k.starts_with("rem_repeat_") => report.rem_per_repeat.push(v),
                k => report.extra.push((k.to_string(), v)),
            }
        }
        Ok(report)
    }
}

/// Reports of all repeats, their summary, and the files written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub runs: Vec<MetricsReport>,
    pub summary: MetricsReport,
    pub files: Vec<PathBuf>,
}

struct Artifacts {
    report: MetricsReport,
    files: Vec<(String, Vec<u8>)>,
}

/// Synthetic data for one seed.
struct Setup {
    grid: Grid,
    truth: DVector<f64>,
    observed: DVector<f64>,
    likelihood: Arc<dyn Likelihood>,
    regression: Option<RegressionData>,
}

fn series_truth(cfg: &ExperimentConfig) -> Result<(Grid, DVector<f64>)> {
    match cfg.effective_series() {
        Series::Step => gen_step_series(cfg.n),
        Series::Turning => gen_turning_series(cfg.n),
    }
}

fn default_ratios(cfg: &ExperimentConfig, grid: &Grid) -> Vec<f64> {
    if let Some(r) = cfg.noise_ratio {
        return vec![r];
    }
    if cfg.experiment.is_image() {
        return vec![0.05];
    }
    match cfg.effective_series() {
        Series::Step => vec![0.015],
        Series::Turning => grid
            .points()
            .map(|p| if p[0] <= 1.0 { 0.01 } else { 0.07 })
            .collect(),
    }
}

fn setup(cfg: &ExperimentConfig, seed: u64) -> Result<Setup> {
    let mut rng = rng_for(seed, STREAM_NOISE);
    if cfg.experiment.is_image() {
        let grid = Grid::pixel_centers(cfg.rows, cfg.cols)?;
        let truth = blocks_image(cfg.rows, cfg.cols)?;
        let blur = motion_blur_operator(cfg.rows, cfg.cols, cfg.blur_length, cfg.blur_angle)?;
        let clean = blur.apply(&truth);
        let ratios = default_ratios(cfg, &grid);
        let (observed, std) = synthesize_observation(&clean, &ratios, cfg.noise_norm, &mut rng)?;
        let data = LinearInverseData::new(Arc::new(blur), observed.clone(), std[0])?;
        Ok(Setup {
            grid,
            truth,
            observed,
            likelihood: Arc::new(data),
            regression: None,
        })
    } else {
        let (grid, truth) = series_truth(cfg)?;
        let ratios = default_ratios(cfg, &grid);
        let (observed, std) = synthesize_observation(&truth, &ratios, cfg.noise_norm, &mut rng)?;
        let inputs = grid.points().map(|p| p[0]).collect();
        let data = RegressionData::new(inputs, observed.clone(), std)?;
        Ok(Setup {
            grid,
            truth,
            observed,
            likelihood: Arc::new(data.clone()),
            regression: Some(data),
        })
    }
}

/// Eigenpairs needed by the configured representation, if any.
fn eigenpairs(cfg: &ExperimentConfig, prior: &ProcessPrior, grid: &Grid) -> Result<Option<Arc<Eigenpairs>>> {
    if matches!(prior, ProcessPrior::Besov(_)) || cfg.effective_representation() == RepresentationKind::Direct {
        return Ok(None);
    }
    let l = cfg.effective_truncation().min(grid.len());
    Ok(Some(Arc::new(prior_eigenpairs(prior, grid, l)?)))
}

fn problem(
    cfg: &ExperimentConfig,
    prior: &ProcessPrior,
    setup: &Setup,
    eig: Option<&Arc<Eigenpairs>>,
) -> Result<InferenceProblem> {
    let representation = match (cfg.effective_representation(), eig) {
        (RepresentationKind::Joint, Some(e)) => Representation::Joint(e.as_ref().clone()),
        (RepresentationKind::Independent, Some(e)) => Representation::Independent(e.as_ref().clone()),
        _ => Representation::Direct,
    };
    let grid = basis_grid(prior, &setup.grid)?;
    InferenceProblem::from_process(prior, &grid, representation, setup.likelihood.clone())
}

/// The cosine basis of the Besov prior lives on the unit interval, so the
/// time axis `[0, 2]` is mapped onto `[0, 1]` for it. Other priors see the
/// grid unchanged.
fn basis_grid(prior: &ProcessPrior, grid: &Grid) -> Result<Grid> {
    if !matches!(prior, ProcessPrior::Besov(_)) || grid.dim() != 1 || grid.len() < 2 {
        return Ok(grid.clone());
    }
    let (lo, hi) = grid
        .points()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[0]), b.max(p[0])));
    Grid::new(1, grid.points().map(|p| (p[0] - lo) / (hi - lo)).collect())
}

fn seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.repeats as u64).map(|i| cfg.seed.wrapping_add(i)).collect()
}

/// Runs `job` for every repeat seed on scoped threads, in seed order.
fn for_each_seed<F>(cfg: &ExperimentConfig, job: F) -> Result<Vec<Artifacts>>
where
    F: Fn(u64) -> Result<Artifacts> + Sync,
{
    let seeds = seeds(cfg);
    if seeds.len() == 1 {
        return Ok(vec![job(seeds[0])?]);
    }
    let job = &job;
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds.iter().map(|&s| scope.spawn(move || job(s))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numerical("worker thread panicked".into()))))
            .collect()
    })
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

/// Writes every artifact; on any write error removes what was written.
fn commit(cfg: &ExperimentConfig, runs: Vec<Artifacts>, summary: Option<(String, Vec<u8>)>, summary_report: MetricsReport) -> Result<RunOutput> {
    let mut out = OutputSet::new(&output_dir(cfg))?;
    let mut reports = Vec::with_capacity(runs.len());
    let all = runs
        .into_iter()
        .flat_map(|a| {
            reports.push(a.report);
            a.files
        })
        .chain(summary);
    for (name, bytes) in all {
        if let Err(e) = out.write(&name, &bytes) {
            out.discard();
            return Err(e);
        }
    }
    Ok(RunOutput {
        runs: reports,
        summary: summary_report,
        files: out.files().to_vec(),
    })
}

fn summarize(cfg: &ExperimentConfig, runs: &[Artifacts]) -> MetricsReport {
    let mut s = MetricsReport::named(format!("{}.summary", cfg.stem(cfg.seed)));
    let rel: Vec<f64> = runs.iter().filter_map(|a| a.report.relative_error).collect();
    if !rel.is_empty() {
        s.relative_error = Some(stats::mean(&rel));
        s.extra.push(("relative_error_median".into(), stats::median(&rel)));
        s.extra.push(("relative_error_std".into(), std0(&rel)));
    }
    let rems: Vec<f64> = runs.iter().filter_map(|a| a.report.rem).collect();
    if !rems.is_empty() {
        s.rem = Some(stats::mean(&rems));
        s.rem_std = Some(std0(&rems));
        s.rem_per_repeat = rems;
    }
    s.extra.push(("repeats".into(), runs.len() as f64));
    s
}

fn std0(xs: &[f64]) -> f64 {
    if xs.len() > 1 {
        stats::std_dev(xs)
    } else {
        0.0
    }
}

fn finish(cfg: &ExperimentConfig, runs: Vec<Artifacts>) -> Result<RunOutput> {
    let summary = summarize(cfg, &runs);
    let file = (runs.len() > 1).then(|| (format!("{}.summary.csv", cfg.stem(cfg.seed)), summary.to_csv()));
    for a in &runs {
        if !a.report.is_valid() {
            return Err(Error::Numerical(format!("run {} produced non-finite metrics", a.report.label)));
        }
    }
    commit(cfg, runs, file, summary)
}

fn trace_csv(trace: &[TraceRow]) -> Result<Vec<u8>> {
    let it: Vec<f64> = trace.iter().map(|t| t.iteration as f64).collect();
    let nlp: Vec<f64> = trace.iter().map(|t| t.neg_log_posterior).collect();
    let err: Vec<f64> = trace.iter().map(|t| t.relative_error).collect();
    encode_csv(&["iteration", "neg_log_posterior", "relative_error"], &[&it, &nlp, &err])
}

/// Field-valued columns with the grid coordinates in front.
fn field_csv(grid: &Grid, names: &[&str], fields: &[&DVector<f64>]) -> Result<Vec<u8>> {
    let mut header: Vec<&str> = if grid.dim() == 1 { vec!["t"] } else { vec!["x", "y"] };
    let coords: Vec<Vec<f64>> = (0..grid.dim())
        .map(|k| grid.points().map(|p| p[k]).collect())
        .collect();
    header.extend_from_slice(names);
    let mut cols: Vec<&[f64]> = coords.iter().map(Vec::as_slice).collect();
    cols.extend(fields.iter().map(|f| f.as_slice()));
    encode_csv(&header, &cols)
}

fn image_pgm(cfg: &ExperimentConfig, v: &DVector<f64>, hi: f64) -> Result<Vec<u8>> {
    encode_pgm(v, cfg.rows, cfg.cols, 0.0, hi, true)
}

fn ensure_valid(cfg: &ExperimentConfig) -> Result<ProcessPrior> {
    cfg.validate()?;
    cfg.process_prior()
}

/// `sample-prior`: independent prior draws on the experiment grid.
pub fn sample_prior(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let prior = ensure_valid(cfg)?;
    let grid = if cfg.experiment.is_image() {
        Grid::pixel_centers(cfg.rows, cfg.cols)?
    } else {
        Grid::uniform_1d(cfg.n, 0.0, 2.0)?
    };
    let runs = for_each_seed(cfg, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws = (0..cfg.draws)
            .map(|_| prior_draw(&prior, &basis_grid(&prior, &grid)?, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let stem = cfg.stem(seed);
        let names: Vec<String> = (1..=draws.len()).map(|i| format!("draw_{i}")).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let refs: Vec<&DVector<f64>> = draws.iter().collect();
        let mut files = vec![(format!("{stem}.prior.csv"), field_csv(&grid, &name_refs, &refs)?)];
        if cfg.experiment.is_image() {
            for (i, d) in draws.iter().enumerate() {
                let (lo, hi) = (d.min(), d.max());
                let hi = if hi > lo { hi } else { lo + 1.0 };
                files.push((format!("{stem}.prior_{}.pgm", i + 1), encode_pgm(d, cfg.rows, cfg.cols, lo, hi, true)?));
            }
        }
        let mut report = MetricsReport::named(stem.clone());
        let all: Vec<f64> = draws.iter().flat_map(|d| d.iter().copied()).collect();
        if !all.is_empty() {
            report.extra.push(("draw_std".into(), stats::std_dev(&all)));
            report.extra.push(("draw_excess_kurtosis".into(), stats::excess_kurtosis(&all)));
        }
        files.push((format!("{stem}.metrics.csv"), report.to_csv()));
        Ok(Artifacts { report, files })
    })?;
    finish(cfg, runs)
}

/// MAP estimate for one seed, with its trace.
pub struct MapRun {
    pub latent: DVector<f64>,
    pub field: DVector<f64>,
    pub truth: DVector<f64>,
    pub observed: DVector<f64>,
    pub report: MetricsReport,
}

/// Runs MAP estimation for one seed without writing files.
pub fn map_run(cfg: &ExperimentConfig, seed: u64) -> Result<MapRun> {
    let prior = ensure_valid(cfg)?;
    let s = setup(cfg, seed)?;
    let eig = eigenpairs(cfg, &prior, &s.grid)?;
    map_with(cfg, &prior, &s, eig.as_ref(), seed).map(|(run, _)| run)
}

fn map_with(
    cfg: &ExperimentConfig,
    prior: &ProcessPrior,
    s: &Setup,
    eig: Option<&Arc<Eigenpairs>>,
    seed: u64,
) -> Result<(MapRun, InferenceProblem)> {
    let problem = problem(cfg, prior, s, eig)?;
    let init = map_initial_point(&problem, cfg.map_init_scale, &mut rng_for(seed, STREAM_INIT))?;
    let opts = MapOptions {
        max_iter: cfg.map_iter,
        tol: cfg.map_tol,
        ..Default::default()
    };
    let mut trace = Vec::new();
    let mut trace_err = None;
    let res = map_estimate_with(&problem, &init, &opts, |it, z, f| match relative_error(&problem.field(z), &s.truth) {
        Ok(e) => trace.push(TraceRow {
            iteration: it,
            neg_log_posterior: f,
            relative_error: e,
        }),
        Err(e) => trace_err = Some(e),
    })?;
    if let Some(e) = trace_err {
        return Err(e);
    }
    let field = problem.field(&res.latent);
    let mut report = MetricsReport::named(cfg.stem(seed));
    report.relative_error = Some(relative_error(&field, &s.truth)?);
    report.trace = trace;
    report.extra = vec![
        ("map_iterations".into(), res.iterations as f64),
        ("map_converged".into(), f64::from(u8::from(res.converged))),
        ("line_search_failed".into(), f64::from(u8::from(res.line_search_failed))),
        ("final_neg_log_posterior".into(), *res.trace.last().unwrap_or(&f64::NAN)),
    ];
    Ok((
        MapRun {
            latent: res.latent,
            field,
            truth: s.truth.clone(),
            observed: s.observed.clone(),
            report,
        },
        problem,
    ))
}

/// `fit-map`: MAP estimate, objective/error trace and metrics.
pub fn fit_map(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let prior = ensure_valid(cfg)?;
    let grid0 = setup(cfg, cfg.seed)?.grid;
    let eig = eigenpairs(cfg, &prior, &grid0)?;
    let runs = for_each_seed(cfg, |seed| {
        let s = setup(cfg, seed)?;
        let (run, _) = map_with(cfg, &prior, &s, eig.as_ref(), seed)?;
        let stem = cfg.stem(seed);
        let mut files = vec![
            (
                format!("{stem}.map.csv"),
                field_csv(&s.grid, &["truth", "observed", "map"], &[&s.truth, &s.observed, &run.field])?,
            ),
            (format!("{stem}.trace.csv"), trace_csv(&run.report.trace)?),
        ];
        if cfg.experiment.is_image() {
            files.push((format!("{stem}.map.pgm"), image_pgm(cfg, &run.field, 1.0)?));
            files.push((format!("{stem}.truth.pgm"), image_pgm(cfg, &s.truth, 1.0)?));
            files.push((format!("{stem}.observed.pgm"), image_pgm(cfg, &s.observed, 1.0)?));
        }
        files.push((format!("{stem}.metrics.csv"), run.report.to_csv()));
        Ok(Artifacts {
            report: run.report,
            files,
        })
    })?;
    finish(cfg, runs)
}

fn chain_artifacts(
    cfg: &ExperimentConfig,
    prior: &ProcessPrior,
    eig: Option<&Arc<Eigenpairs>>,
    seed: u64,
) -> Result<Artifacts> {
    let s = setup(cfg, seed)?;
    let (problem, init) = match cfg.effective_mcmc_init() {
        ChainStart::Prior => (problem(cfg, prior, &s, eig)?, None),
        ChainStart::Map => {
            let (run, problem) = map_with(cfg, prior, &s, eig, seed)?;
            let latent = run.latent;
            (problem, Some(latent))
        }
    };
    let chain = run_mcmc_from(&problem, init.as_ref(), cfg.samples, cfg.burnin, seed)?;
    let stem = cfg.stem(seed);
    let mut report = MetricsReport::named(stem.clone());
    let mut files = Vec::new();
    let mut chain_bytes = Vec::new();
    chain.write_to(&mut chain_bytes, &cfg.hash())?;
    files.push((format!("{stem}.chain.csv"), chain_bytes));

    let mut trace = Vec::with_capacity(chain.len());
    for (i, (z, nlp)) in chain.samples.iter().zip(&chain.neg_log_posterior).enumerate() {
        trace.push(TraceRow {
            iteration: cfg.burnin + i + 1,
            neg_log_posterior: *nlp,
            relative_error: relative_error(&problem.field(z), &s.truth)?,
        });
    }
    files.push((format!("{stem}.trace.csv"), trace_csv(&trace)?));
    report.trace = trace;
    report.extra.push((
        "mean_shrinks_per_step".into(),
        chain.shrinks as f64 / chain.iterations.max(1) as f64,
    ));

    if let Some((mean, std)) = chain.moments_of(|z| problem.field(z)) {
        report.rem = Some(relative_error(&mean, &s.truth)?);
        files.push((
            format!("{stem}.posterior.csv"),
            field_csv(&s.grid, &["truth", "observed", "mean", "std"], &[&s.truth, &s.observed, &mean, &std])?,
        ));
        if cfg.experiment.is_image() {
            let top = std.max();
            files.push((format!("{stem}.mean.pgm"), image_pgm(cfg, &mean, 1.0)?));
            files.push((format!("{stem}.std.pgm"), image_pgm(cfg, &std, if top > 0.0 { top } else { 1.0 })?));
            files.push((format!("{stem}.truth.pgm"), image_pgm(cfg, &s.truth, 1.0)?));
            files.push((format!("{stem}.observed.pgm"), image_pgm(cfg, &s.observed, 1.0)?));
        }
        report.extra.push(("posterior_std_mean".into(), stats::mean(std.as_slice())));
        report.posterior_std = Some(std);
    }
    files.push((format!("{stem}.metrics.csv"), report.to_csv()));
    Ok(Artifacts { report, files })
}

/// `run-mcmc`: elliptical slice sampling, posterior mean/std and REM.
pub fn run_chain(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let prior = ensure_valid(cfg)?;
    let grid0 = setup(cfg, cfg.seed)?.grid;
    let eig = eigenpairs(cfg, &prior, &grid0)?;
    let runs = for_each_seed(cfg, |seed| chain_artifacts(cfg, &prior, eig.as_ref(), seed))?;
    finish(cfg, runs)
}

/// `deblur`: the image experiment with posterior sampling over all repeats,
/// summarized as REM and Std(REM).
pub fn deblur(cfg: &ExperimentConfig) -> Result<RunOutput> {
    if !cfg.experiment.is_image() {
        return Err(Error::InvalidInput(format!(
            "deblur needs experiment = image_deblur, got {}",
            cfg.experiment
        )));
    }
    let out = run_chain(cfg)?;
    if out.runs.len() == 1 {
        // make the summary available even for a single repeat
        let mut extra = OutputSet::new(&output_dir(cfg))?;
        let path = extra.write(&format!("{}.summary.csv", cfg.stem(cfg.seed)), &out.summary.to_csv())?;
        let mut files = out.files;
        files.push(path);
        return Ok(RunOutput { files, ..out });
    }
    Ok(out)
}

/// Hold-out prediction for one seed.
pub struct PredictRun {
    pub grid: Grid,
    pub truth: DVector<f64>,
    pub observed: DVector<f64>,
    /// 1 for training points, 0 for held-out points.
    pub train: DVector<f64>,
    pub mean: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub std: DVector<f64>,
    pub report: MetricsReport,
}

/// Runs hold-out prediction for one seed without writing files.
pub fn predict_run(cfg: &ExperimentConfig, seed: u64) -> Result<PredictRun> {
    let prior = ensure_valid(cfg)?;
    if cfg.experiment.is_image() {
        return Err(Error::InvalidInput("predict needs a time-series experiment".into()));
    }
    let s = setup(cfg, seed)?;
    let data = s.regression.as_ref().expect("time-series setup carries regression data");
    let (train, test) = holdout_split(s.grid.len());
    let train_data = data.select(&train)?;
    let noise: Vec<f64> = train_data.noise_std.iter().map(|v| v * v).collect();
    let pred = qep_predict(&prior, &s.grid.select(&train)?, &train_data.observations, &s.grid, &noise)?;
    let (lower, upper) = pred.credible_bands(cfg.band_draws, cfg.band_level, &mut rng_for(seed, STREAM_BANDS))?;
    let std = pred.covariance.diagonal().map(|v| v.max(0.0).sqrt());
    let is_train = DVector::from_fn(s.grid.len(), |i, _| if train.binary_search(&i).is_ok() { 1.0 } else { 0.0 });

    let mut report = MetricsReport::named(cfg.stem(seed));
    let pick = |v: &DVector<f64>, idx: &[usize]| DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]));
    report.relative_error = Some(relative_error(&pick(&pred.mean, &test), &pick(&s.truth, &test))?);
    let covered = test
        .iter()
        .filter(|&&i| s.truth[i] >= lower[i] && s.truth[i] <= upper[i])
        .count();
    report.extra.push(("test_coverage".into(), covered as f64 / test.len().max(1) as f64));
    let tail = s.grid.len() - s.grid.len() / 8;
    let width = |idx: Vec<usize>| {
        let w: Vec<f64> = idx.iter().map(|&i| upper[i] - lower[i]).collect();
        if w.is_empty() {
            0.0
        } else {
            stats::mean(&w)
        }
    };
    report.extra.push(("band_width_interpolation".into(), width(test.iter().copied().filter(|&i| i < tail).collect())));
    report.extra.push(("band_width_extrapolation".into(), width(test.iter().copied().filter(|&i| i >= tail).collect())));
    report.posterior_std = Some(std.clone());
    Ok(PredictRun {
        grid: s.grid,
        truth: s.truth,
        observed: s.observed,
        train: is_train,
        mean: pred.mean,
        lower,
        upper,
        std,
        report,
    })
}

/// `predict`: hold-out prediction with credible bands (GP and Q-EP only).
pub fn predict(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let runs = for_each_seed(cfg, |seed| {
        let p = predict_run(cfg, seed)?;
        let stem = cfg.stem(seed);
        let files = vec![
            (
                format!("{stem}.predict.csv"),
                field_csv(
                    &p.grid,
                    &["truth", "observed", "train", "mean", "lower", "upper", "std"],
                    &[&p.truth, &p.observed, &p.train, &p.mean, &p.lower, &p.upper, &p.std],
                )?,
            ),
            (format!("{stem}.metrics.csv"), p.report.to_csv()),
        ];
        Ok(Artifacts {
            report: p.report,
            files,
        })
    })?;
    finish(cfg, runs)
}

/// `report`: collects every `*.metrics.csv` and `*.summary.csv` in `dir`
/// into a table, written to `dir/report.csv` and returned as text.
pub fn report(dir: &Path) -> Result<(String, PathBuf)> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".metrics.csv") || n.ends_with(".summary.csv"))
        })
        .collect();
    entries.sort();
    let mut text = String::from("run,relative_error,rem,rem_std\n");
    let cell = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.4}"));
    for path in &entries {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let label = name.trim_end_matches(".csv").to_string();
        let r = MetricsReport::from_csv(label.clone(), &std::fs::read_to_string(path)?)?;
        text.push_str(&format!("{label},{},{},{}\n", cell(r.relative_error), cell(r.rem), cell(r.rem_std)));
    }
    let out = dir.join("report.csv");
    std::fs::write(&out, &text)?;
    Ok((text, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{Experiment, PriorKind};

    fn small(experiment: Experiment, prior: PriorKind, dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            experiment,
            prior,
            n: 24,
            rows: 8,
            cols: 8,
            blur_length: 3,
            truncation: Some(20),
            samples: 40,
            burnin: 10,
            map_iter: 200,
            band_draws: 200,
            draws: 2,
            output_dir: Some(dir.to_path_buf()),
            ..Default::default()
        }
    }

    fn tempdir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("qep-exp-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&d);
        d
    }

    #[test]
    fn metrics_round_trip() {
        let mut r = MetricsReport::named("x".into());
        r.rem = Some(0.25);
        r.rem_std = Some(0.01);
        r.rem_per_repeat = vec![0.2, 0.3];
        r.extra.push(("k".into(), 3.0));
        let back = MetricsReport::from_csv("x".into(), std::str::from_utf8(&r.to_csv()).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn verbs_write_named_outputs() {
        let dir = tempdir("verbs");
        let cfg = small(Experiment::TsStep, PriorKind::Qep, &dir);
        let out = fit_map(&cfg).unwrap();
        assert!(dir.join("ts_step_qep_1_0.map.csv").exists());
        assert!(dir.join("ts_step_qep_1_0.trace.csv").exists());
        assert!(out.runs[0].is_valid());
        let trace = &out.runs[0].trace;
        assert!(trace.windows(2).all(|w| w[1].iteration > w[0].iteration));

        let cfg = small(Experiment::TsPredict, PriorKind::Gp, &dir);
        predict(&cfg).unwrap();
        assert!(dir.join("ts_predict_gp_2_0.predict.csv").exists());

        let mut cfg = small(Experiment::ImageDeblur, PriorKind::Besov, &dir);
        cfg.repeats = 2;
        let out = deblur(&cfg).unwrap();
        assert_eq!(out.summary.rem_per_repeat.len(), 2);
        assert!(dir.join("image_deblur_besov_1_1.std.pgm").exists());

        let (text, _) = report(&dir).unwrap();
        assert!(text.contains("image_deblur_besov_1_0.summary"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn failing_run_leaves_no_files() {
        let dir = tempdir("fail");
        let cfg = small(Experiment::TsPredict, PriorKind::Besov, &dir);
        assert!(predict(&cfg).is_err());
        let count = std::fs::read_dir(&dir).map(|d| d.count()).unwrap_or(0);
        assert_eq!(count, 0);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn gp_and_qep2_paths_agree() {
        let dir = tempdir("q2");
        let gp = small(Experiment::TsStep, PriorKind::Gp, &dir);
        let qep = ExperimentConfig { prior: PriorKind::Qep, q: 2.0, ..gp.clone() };
        let a = run_chain(&gp).unwrap();
        let b = run_chain(&qep).unwrap();
        assert_eq!(a.runs[0].trace, b.runs[0].trace);
        assert_eq!(a.runs[0].rem, b.runs[0].rem);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
