//! Browser demo: prior draws, hold-out prediction and a small deblurring
//! problem, exported through `wasm-bindgen`.
//!
//! Every export returns a flat `Float64Array`; the layouts are documented on
//! the plain Rust functions, which are also what the native tests call.

use nalgebra::DVector;
use qep::harness::config::{Experiment, ExperimentConfig, PriorKind, Series};
use qep::harness::experiments::{map_run, predict_run};
use qep::kernels::{Grid, KernelSpec};
use qep::processes::{prior_draw, BesovSpec, ProcessPrior};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn prior_from(kind: &str, q: f64, lengthscale: f64, terms: usize) -> qep::Result<ProcessPrior> {
    let kernel = KernelSpec::matern(0.5, 1.0, lengthscale, 1.0)?;
    Ok(match kind.parse::<PriorKind>()? {
        PriorKind::Gp => ProcessPrior::Gp { kernel },
        PriorKind::Qep => ProcessPrior::Qep { kernel, q },
        PriorKind::Besov => ProcessPrior::Besov(BesovSpec::new(q, 1.0, 1.0, 1, terms)?),
    })
}

/// `count` draws on `n` points of `[0, 1]`, concatenated draw by draw.
pub fn prior_draws_impl(kind: &str, q: f64, lengthscale: f64, n: usize, count: usize, seed: u64) -> qep::Result<Vec<f64>> {
    let prior = prior_from(kind, q, lengthscale, 4 * n)?;
    let grid = Grid::uniform_1d(n, 0.0, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * count);
    for _ in 0..count {
        out.extend(prior_draw(&prior, &grid, &mut rng)?.iter());
    }
    Ok(out)
}

/// Hold-out prediction on the step (`turning = false`) or turning series.
/// Layout: seven blocks of `n` values: t, truth, observed, train flag,
/// mean, lower band, upper band.
pub fn predict_series_impl(turning: bool, kind: &str, q: f64, n: usize, seed: u64) -> qep::Result<Vec<f64>> {
    let cfg = ExperimentConfig {
        experiment: Experiment::TsPredict,
        series: if turning { Series::Turning } else { Series::Step },
        prior: kind.parse()?,
        q,
        n,
        band_draws: 500,
        ..Default::default()
    };
    let p = predict_run(&cfg, seed)?;
    let t: Vec<f64> = (0..n).map(|i| 2.0 * i as f64 / (n - 1) as f64).collect();
    Ok([&DVector::from_vec(t), &p.truth, &p.observed, &p.train, &p.mean, &p.lower, &p.upper]
        .iter()
        .flat_map(|v| v.iter().copied())
        .collect())
}

/// MAP deblurring of the `size × size` blocks image. Layout: truth,
/// blurred noisy observation, MAP estimate (row-major), then the relative error.
pub fn deblur_impl(kind: &str, q: f64, size: usize, blur_length: usize, seed: u64) -> qep::Result<Vec<f64>> {
    let cfg = ExperimentConfig {
        experiment: Experiment::ImageDeblur,
        prior: kind.parse()?,
        q,
        rows: size,
        cols: size,
        blur_length,
        truncation: Some(size * size / 4),
        map_iter: 400,
        ..Default::default()
    };
    let run = map_run(&cfg, seed)?;
    let mut out: Vec<f64> = run.truth.iter().chain(run.observed.iter()).chain(run.field.iter()).copied().collect();
    out.push(run.report.relative_error.unwrap_or(f64::NAN));
    Ok(out)
}

fn js<T>(r: qep::Result<T>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn prior_draws(kind: &str, q: f64, lengthscale: f64, n: usize, count: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    js(prior_draws_impl(kind, q, lengthscale, n, count, seed.into()))
}

#[wasm_bindgen]
pub fn predict_series(turning: bool, kind: &str, q: f64, n: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    js(predict_series_impl(turning, kind, q, n, seed.into()))
}

#[wasm_bindgen]
pub fn deblur(kind: &str, q: f64, size: usize, blur_length: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    js(deblur_impl(kind, q, size, blur_length, seed.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts() {
        assert_eq!(prior_draws_impl("qep", 1.0, 0.3, 30, 3, 1).unwrap().len(), 90);
        assert_eq!(prior_draws_impl("besov", 1.0, 0.3, 30, 2, 1).unwrap().len(), 60);
        assert_eq!(predict_series_impl(true, "qep", 1.0, 40, 2).unwrap().len(), 280);
        let d = deblur_impl("qep", 1.0, 12, 3, 0).unwrap();
        assert_eq!(d.len(), 3 * 144 + 1);
        assert!(d[432] < 1.0);
        assert!(predict_series_impl(false, "besov", 1.0, 40, 2).is_err());
    }
}
