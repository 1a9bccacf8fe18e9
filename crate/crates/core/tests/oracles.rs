//! Statistical and numerical oracles for densities, samplers and MCMC.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qep::inference::{besov_whiten, run_mcmc, FieldMap, InferenceProblem, LatentPrior};
use qep::kernels::{gram, CovarianceMatrix, Grid, KernelSpec};
use qep::models::FlatLikelihood;
use qep::processes::{prior_draw, scalar_piq_sample, IndependentCoefficients, ProcessPrior};
use qep::qed::{cov_constant, Qed};
use qep::special::{chi2_cdf, piq_cdf};
use qep::stats::{
    ks_critical_value, ks_statistic, ks_two_sample, ks_two_sample_critical_value, sample_covariance,
};

const ALPHA: f64 = 1e-3;

fn spd(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
    &a * a.transpose() + DMatrix::identity(d, d) * 0.3
}

// d=1 through u = ±v², v = t/(1-t), and d=2 in polar coordinates through ρ = t/(1-t),
// both of which remove the singularity at the origin for q < 2
fn total_mass(qed: &Qed, m: usize) -> f64 {
    let h = 1.0 / m as f64;
    let mid = |k: usize| (k as f64 + 0.5) * h;
    match qed.dim() {
        1 => (0..m)
            .map(|k| {
                let t = mid(k);
                let v = t / (1.0 - t);
                let p = |x: f64| qed.logpdf(&DVector::from_vec(vec![x])).unwrap().exp();
                (p(v * v) + p(-v * v)) * 2.0 * v * h / ((1.0 - t) * (1.0 - t))
            })
            .sum(),
        2 => (0..m)
            .map(|k| {
                let t = mid(k);
                let rho = t / (1.0 - t);
                let p = qed.logpdf(&DVector::from_vec(vec![rho, 0.0])).unwrap().exp();
                2.0 * std::f64::consts::PI * rho * p * h / ((1.0 - t) * (1.0 - t))
            })
            .sum(),
        _ => unreachable!(),
    }
}

/// Mass removed by flooring the quadratic form at 1e-12·d. Only visible in
/// d=1, where the density behaves like c|u|^{q/2-1} near the origin.
fn floor_deficit(d: usize, q: f64) -> f64 {
    if d != 1 {
        return 0.0;
    }
    let a = 0.5 * q - 1.0;
    let c = 0.5 * q / (2.0 * std::f64::consts::PI).sqrt();
    let delta = 1e-6f64;
    2.0 * c * delta.powf(a + 1.0) * (1.0 / (a + 1.0) - 1.0)
}

#[test]
fn density_integrates_to_one() {
    for q in [1.0, 1.5, 2.0, 3.0] {
        for scaled in [false, true] {
            for d in [1, 2] {
                let qed = Qed::centered(CovarianceMatrix::identity(d), q, scaled).unwrap();
                let mass = total_mass(&qed, 200_000) + floor_deficit(d, q);
                assert!((mass - 1.0).abs() < 1e-5, "d={d} q={q} scaled={scaled}: {mass}");
            }
        }
    }
}

#[test]
fn scaled_sampler_radial_law() {
    let n = 20_000;
    for (d, q) in [(3, 1.0), (5, 1.5), (6, 3.0)] {
        let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
        let qed = Qed::centered(CovarianceMatrix::new(spd(d, 7), 0.0).unwrap(), q, true).unwrap();
        let rq: Vec<f64> = (0..n)
            .map(|_| qed.quad_form(&qed.sample(&mut rng).unwrap()).unwrap().powf(0.5 * q))
            .collect();
        let ks = ks_statistic(&rq, |g| chi2_cdf(g, d as f64));
        assert!(ks < ks_critical_value(n, ALPHA), "d={d} q={q}: D={ks}");
    }
}

#[test]
fn unscaled_covariance_constant() {
    let (d, q, n) = (3, 1.5, 100_000);
    let c = spd(d, 11);
    let qed = Qed::centered(CovarianceMatrix::new(c.clone(), 0.0).unwrap(), q, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let draws: Vec<DVector<f64>> = (0..n).map(|_| qed.sample(&mut rng).unwrap()).collect();
    let target = &c * cov_constant(d, q, false);
    let err = (sample_covariance(&draws) - &target).amax() / target.amax();
    assert!(err < 0.03, "{err}");
}

#[test]
fn scalar_piq_matches_cdf() {
    let n = 20_000;
    for q in [0.8, 1.0, 1.5, 2.0, 4.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xs: Vec<f64> = (0..n).map(|_| scalar_piq_sample(q, &mut rng)).collect();
        let ks = ks_statistic(&xs, |u| piq_cdf(u, q));
        assert!(ks < ks_critical_value(n, ALPHA), "q={q}: D={ks}");
    }
}

#[test]
fn besov_whitening_pushes_normal_to_piq() {
    let n = 20_000;
    for q in [1.0, 1.5] {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let w = besov_whiten(&z, q, &vec![1.0; n]).unwrap();
        let direct: Vec<f64> = (0..n).map(|_| scalar_piq_sample(q, &mut rng)).collect();
        let ks = ks_two_sample(w.as_slice(), &direct);
        assert!(ks < ks_two_sample_critical_value(n, n, ALPHA), "q={q}: D={ks}");
    }
}

fn flat_chain_rq(prior: LatentPrior, steps: usize, seed: u64) -> Vec<DVector<f64>> {
    let d = prior.dim();
    let problem = InferenceProblem::new(prior, FieldMap::Identity, Arc::new(FlatLikelihood { len: d })).unwrap();
    run_mcmc(&problem, steps, 0, seed).unwrap().samples
}

#[test]
fn ess_leaves_elliptic_priors_invariant() {
    let steps = 5_000;
    for (d, q) in [(2, 1.0), (2, 1.5), (10, 1.5), (10, 2.0)] {
        let qed = Qed::centered(CovarianceMatrix::new(spd(d, 41), 0.0).unwrap(), q, true).unwrap();
        let rq: Vec<f64> = flat_chain_rq(LatentPrior::Elliptic(qed.clone()), steps, 42)
            .iter()
            .map(|z| qed.quad_form(z).unwrap().powf(0.5 * q))
            .collect();
        let ks = ks_statistic(&rq, |g| chi2_cdf(g, d as f64));
        assert!(ks < ks_critical_value(steps, ALPHA), "d={d} q={q}: D={ks}");
    }
}

#[test]
fn ess_leaves_coefficient_priors_invariant() {
    let steps = 5_000;
    let q = 1.0;
    let chain = flat_chain_rq(LatentPrior::IidPiQ { dim: 4, q }, steps, 51);
    let first: Vec<f64> = chain.iter().map(|z| z[0]).collect();
    let ks = ks_statistic(&first, |u| piq_cdf(u, q));
    assert!(ks < ks_critical_value(steps, ALPHA), "iid: D={ks}");

    let variances = vec![2.0, 0.5, 0.1];
    let prior = IndependentCoefficients::new(variances.clone(), q).unwrap();
    let chain = flat_chain_rq(LatentPrior::Independent(prior), steps, 52);
    for (l, v) in variances.iter().enumerate() {
        // each coefficient is a 1-D q-ED: (z²/λ)^{q/2} ~ χ²₁
        let g: Vec<f64> = chain.iter().map(|z| (z[l] * z[l] / v).powf(0.5 * q)).collect();
        let ks = ks_statistic(&g, |x| chi2_cdf(x, 1.0));
        assert!(ks < ks_critical_value(steps, ALPHA), "coefficient {l}: D={ks}");
    }
}

#[test]
fn process_draw_covariance_matches_kernel() {
    let grid = Grid::uniform_1d(5, 0.0, 1.0).unwrap();
    let kernel = KernelSpec::matern(1.5, 1.3, 0.4, 1.0).unwrap();
    let k = gram(&kernel, &grid, 0.0).unwrap().entries().clone();
    let n = 60_000;
    for q in [1.0, 2.0] {
        let prior = ProcessPrior::Qep { kernel, q };
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let draws: Vec<DVector<f64>> = (0..n).map(|_| prior_draw(&prior, &grid, &mut rng).unwrap()).collect();
        let target = &k * cov_constant(grid.len(), q, true);
        let err = (sample_covariance(&draws) - &target).amax() / target.amax();
        assert!(err < 0.04, "q={q}: {err}");
    }
}
