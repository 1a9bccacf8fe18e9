//! Posterior computation: elliptical slice sampling, MAP estimation by
//! gradient descent with backtracking, and Gaussian whitening of latent priors.
//!
//! Every latent prior here can be written as a deterministic transform of a
//! standard normal vector `ξ`:
//!
//! * joint q-ED `(μ, C)`: `z = μ + s·‖ξ‖^{2/q-1}·Lξ`, exact because
//!   `‖ξ‖² ~ χ²_d` has the law of `R^q`;
//! * independent one-dimensional q-EDs: the same map coordinatewise;
//! * iid `π_q` coefficients (Besov): `z_ℓ = F_q^{-1}(Φ(ξ_ℓ))`.
//!
//! [`run_mcmc`] runs the elliptical slice sampler on `ξ` with its `N(0, I)`
//! prior and reports states mapped back to the latent coordinates.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, invalid, Error, Result};
use crate::kernels::{gram, Eigenpairs, Grid};
use crate::models::Likelihood;
use crate::processes::{kl_coefficient_prior, scalar_piq_sample, IndependentCoefficients, ProcessPrior};
use crate::qed::Qed;
use crate::special::{normal_to_piq, piq_log_normalizer, piq_to_normal};

/// Maximum number of bracket shrinkages in one slice-sampling update.
pub const MAX_SHRINKS: usize = 1000;

/// Prior on the latent vector.
#[derive(Debug, Clone)]
pub enum LatentPrior {
    /// Joint (scaled or unscaled) q-ED.
    Elliptic(Qed),
    /// Independent one-dimensional q-ED coefficients.
    Independent(IndependentCoefficients),
    /// Iid `π_q` coefficients, `p(z) ∝ exp(-½ Σ |z_ℓ|^q)`.
    IidPiQ { dim: usize, q: f64 },
}

impl LatentPrior {
    pub fn dim(&self) -> usize {
        match self {
            Self::Elliptic(d) => d.dim(),
            Self::Independent(c) => c.dim(),
            Self::IidPiQ { dim, .. } => *dim,
        }
    }

    pub fn q(&self) -> f64 {
        match self {
            Self::Elliptic(d) => d.q(),
            Self::Independent(c) => c.q,
            Self::IidPiQ { q, .. } => *q,
        }
    }

    /// Log-density (normalized) and gradient.
    pub fn logpdf_with_grad(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        check_len(self.dim(), z.len())?;
        match self {
            Self::Elliptic(d) => d.logpdf_with_grad(z),
            Self::Independent(c) => c.logpdf_with_grad(z),
            Self::IidPiQ { dim, q } => {
                let q = *q;
                let mut value = -(*dim as f64) * piq_log_normalizer(q);
                let grad = DVector::from_fn(*dim, |i, _| {
                    let a = z[i].abs();
                    value -= 0.5 * a.powf(q);
                    if a == 0.0 {
                        0.0
                    } else {
                        -0.5 * q * a.powf(q - 1.0) * z[i].signum()
                    }
                });
                Ok((value, grad))
            }
        }
    }

    pub fn logpdf(&self, z: &DVector<f64>) -> Result<f64> {
        match self {
            Self::Elliptic(d) => d.logpdf(z),
            _ => Ok(self.logpdf_with_grad(z)?.0),
        }
    }

    /// Direct draw from the prior.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        Ok(match self {
            Self::Elliptic(d) => d.sample(rng)?,
            Self::Independent(c) => c.sample(rng),
            Self::IidPiQ { dim, q } => DVector::from_fn(*dim, |_, _| scalar_piq_sample(*q, rng)),
        })
    }

    /// Maps a standard normal vector to a draw from this prior.
    pub fn whiten(&self, xi: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.dim(), xi.len())?;
        match self {
            Self::Elliptic(d) => {
                let norm = xi.norm();
                if norm == 0.0 {
                    return Ok(d.mean().clone());
                }
                let radial = norm.powf(2.0 / d.q() - 1.0) * d.scale_factor();
                Ok(d.mean() + d.cov().mul_lower(xi)? * radial)
            }
            Self::Independent(c) => Ok(DVector::from_fn(c.dim(), |i, _| {
                let x = xi[i];
                c.variances[i].sqrt() * x.abs().powf(2.0 / c.q) * x.signum()
            })),
            Self::IidPiQ { q, .. } => Ok(xi.map(|x| normal_to_piq(x, *q).0)),
        }
    }

    /// Inverse of [`whiten`](Self::whiten).
    pub fn unwhiten(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.dim(), z.len())?;
        match self {
            Self::Elliptic(d) => {
                let w = d.cov().solve_lower(&(z - d.mean()))? / d.scale_factor();
                let norm = w.norm();
                if norm == 0.0 {
                    return Ok(w);
                }
                Ok(&w * norm.powf(0.5 * d.q() - 1.0))
            }
            Self::Independent(c) => Ok(DVector::from_fn(c.dim(), |i, _| {
                let x = z[i] / c.variances[i].sqrt();
                x.abs().powf(0.5 * c.q) * x.signum()
            })),
            Self::IidPiQ { q, .. } => Ok(z.map(|u| piq_to_normal(u, *q))),
        }
    }
}

/// Coefficient-space or grid-space mapping from latent to field values.
#[derive(Debug, Clone)]
pub enum FieldMap {
    Identity,
    /// `u = B z`.
    Linear(Arc<DMatrix<f64>>),
}

impl FieldMap {
    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Identity => z.clone(),
            Self::Linear(b) => b.as_ref() * z,
        }
    }

    pub fn apply_transpose(&self, g: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Identity => g.clone(),
            Self::Linear(b) => b.tr_mul(g),
        }
    }

    fn dims(&self, latent: usize) -> (usize, usize) {
        match self {
            Self::Identity => (latent, latent),
            Self::Linear(b) => (b.ncols(), b.nrows()),
        }
    }
}

/// Latent parameterization of a GP/Q-EP prior.
#[derive(Debug, Clone)]
pub enum Representation {
    /// The latent vector is the field on the grid.
    Direct,
    /// Truncated KL coefficients with the joint scaled q-ED prior.
    Joint(Eigenpairs),
    /// Truncated KL coefficients with independent coefficient priors.
    Independent(Eigenpairs),
}

/// Prior, likelihood and latent parameterization.
#[derive(Clone)]
pub struct InferenceProblem {
    pub prior: LatentPrior,
    pub field_map: FieldMap,
    pub likelihood: Arc<dyn Likelihood>,
}

impl std::fmt::Debug for InferenceProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InferenceProblem")
            .field("prior", &self.prior)
            .field("field_map", &self.field_map)
            .finish_non_exhaustive()
    }
}

impl InferenceProblem {
    pub fn new(prior: LatentPrior, field_map: FieldMap, likelihood: Arc<dyn Likelihood>) -> Result<Self> {
        let (latent, field) = field_map.dims(prior.dim());
        check_len(prior.dim(), latent)?;
        check_len(likelihood.field_len(), field)?;
        Ok(Self {
            prior,
            field_map,
            likelihood,
        })
    }

    /// Builds the problem for a process prior on `grid`.
    ///
    /// Besov priors always use their coefficient space (weights folded into
    /// the basis) and ignore `representation`.
    pub fn from_process(
        prior: &ProcessPrior,
        grid: &Grid,
        representation: Representation,
        likelihood: Arc<dyn Likelihood>,
    ) -> Result<Self> {
        match prior {
            ProcessPrior::Besov(spec) => {
                let basis = spec.weighted_basis(grid)?;
                Self::new(
                    LatentPrior::IidPiQ {
                        dim: spec.truncation,
                        q: spec.q,
                    },
                    FieldMap::Linear(Arc::new(basis)),
                    likelihood,
                )
            }
            _ => match representation {
                Representation::Direct => Self::new(
                    LatentPrior::Elliptic(prior.marginal(grid)?),
                    FieldMap::Identity,
                    likelihood,
                ),
                Representation::Joint(eig) => Self::new(
                    LatentPrior::Elliptic(kl_coefficient_prior(&eig, prior.q())?),
                    FieldMap::Linear(Arc::new(eig.vectors)),
                    likelihood,
                ),
                Representation::Independent(eig) => Self::new(
                    LatentPrior::Independent(IndependentCoefficients::from_eigenpairs(&eig, prior.q())?),
                    FieldMap::Linear(Arc::new(eig.vectors)),
                    likelihood,
                ),
            },
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn field(&self, z: &DVector<f64>) -> DVector<f64> {
        self.field_map.apply(z)
    }

    /// Log-likelihood of a latent vector.
    pub fn log_likelihood(&self, z: &DVector<f64>) -> Result<f64> {
        self.likelihood.log_likelihood(&self.field(z))
    }

    /// Negative log-posterior and its gradient in latent coordinates.
    pub fn neg_log_posterior_with_grad(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (ll, gl) = self.likelihood.log_likelihood_with_grad(&self.field(z))?;
        let (lp, gp) = self.prior.logpdf_with_grad(z)?;
        let value = -ll - lp;
        if !value.is_finite() {
            return Err(non_finite(z, value));
        }
        Ok((value, -(self.field_map.apply_transpose(&gl) + gp)))
    }
}

fn non_finite(z: &DVector<f64>, value: f64) -> Error {
    Error::Numerical(format!(
        "negative log-posterior is {value} at a latent with norm {:e} and max |z| {:e}",
        z.norm(),
        z.amax()
    ))
}

/// `-log L(u(z)) - log p(z)`, with the likelihood's additive constant
/// dropped and the prior density normalized. The omitted constant depends
/// only on the observation noise, so values are comparable within one
/// problem instance.
pub fn neg_log_posterior(problem: &InferenceProblem, z: &DVector<f64>) -> Result<f64> {
    let value = -problem.log_likelihood(z)? - problem.prior.logpdf(z)?;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(non_finite(z, value))
    }
}

/// `current·cos θ + aux·sin θ`.
pub fn ellipse_point(current: &DVector<f64>, aux: &DVector<f64>, theta: f64) -> DVector<f64> {
    current * theta.cos() + aux * theta.sin()
}

/// Result of one slice-sampling update.
#[derive(Debug, Clone)]
pub struct EssOutcome {
    pub state: DVector<f64>,
    pub log_likelihood: f64,
    pub shrinks: usize,
}

/// One elliptical slice sampling update.
///
/// The auxiliary point comes from `prior_sampler`; the update leaves
/// `prior × likelihood` invariant when the prior is a centred Gaussian.
pub fn ess_step<R, S, L>(
    current: &DVector<f64>,
    current_log_lik: f64,
    mut prior_sampler: S,
    log_likelihood: L,
    rng: &mut R,
) -> Result<EssOutcome>
where
    R: Rng + ?Sized,
    S: FnMut(&mut R) -> Result<DVector<f64>>,
    L: Fn(&DVector<f64>) -> Result<f64>,
{
    if !current_log_lik.is_finite() {
        return Err(Error::Numerical("current state has non-finite log-likelihood".into()));
    }
    let aux = prior_sampler(rng)?;
    let threshold = current_log_lik + rng.random::<f64>().ln();
    let mut theta = rng.random::<f64>() * std::f64::consts::TAU;
    let (mut lo, mut hi) = (theta - std::f64::consts::TAU, theta);
    for shrinks in 0..=MAX_SHRINKS {
        let proposal = ellipse_point(current, &aux, theta);
        let ll = log_likelihood(&proposal)?;
        if ll > threshold {
            return Ok(EssOutcome {
                state: proposal,
                log_likelihood: ll,
                shrinks,
            });
        }
        if theta < 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        theta = lo + rng.random::<f64>() * (hi - lo);
    }
    Err(Error::Numerical(format!(
        "elliptical slice sampler exceeded {MAX_SHRINKS} bracket shrinkages"
    )))
}

/// Post-burn-in output of [`run_mcmc`].
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    /// Latent states (in prior coordinates).
    pub samples: Vec<DVector<f64>>,
    pub neg_log_posterior: Vec<f64>,
    /// Bracket shrinkages over all iterations, burn-in included.
    pub shrinks: u64,
    pub iterations: u64,
    pub seed: u64,
    pub burn_in: usize,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean and pointwise standard deviation of `f(sample)` over the chain.
    pub fn moments_of(&self, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let first = f(self.samples.first()?);
        let mut mean = DVector::zeros(first.len());
        let mut sq = DVector::zeros(first.len());
        for s in &self.samples {
            let v = f(s);
            mean += &v;
            sq += v.component_mul(&v);
        }
        let n = self.samples.len() as f64;
        mean /= n;
        let std = DVector::from_fn(mean.len(), |i, _| {
            let var = if n > 1.0 {
                (sq[i] - n * mean[i] * mean[i]) / (n - 1.0)
            } else {
                0.0
            };
            var.max(0.0).sqrt()
        });
        Some((mean, std))
    }

    /// Writes the samples as comma-separated rows under a `#` header line.
    pub fn write_to(&self, mut w: impl Write, config_hash: &str) -> Result<()> {
        let dim = self.samples.first().map_or(0, DVector::len);
        writeln!(
            w,
            "# qep-chain seed={} burn_in={} samples={} dim={} config={}",
            self.seed,
            self.burn_in,
            self.samples.len(),
            dim,
            config_hash
        )?;
        for s in &self.samples {
            let row: Vec<String> = s.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads back samples written by [`Chain::write_to`]; returns them with
    /// the seed and burn-in recorded in the header.
    pub fn read_samples(r: impl BufRead) -> Result<(Vec<DVector<f64>>, u64, usize)> {
        let mut samples = Vec::new();
        let (mut seed, mut burn_in) = (0, 0);
        for line in r.lines() {
            let line = line?;
            if let Some(header) = line.strip_prefix('#') {
                for field in header.split_whitespace() {
                    if let Some(v) = field.strip_prefix("seed=") {
                        seed = v.parse().map_err(|_| Error::Parse(format!("bad seed '{v}'")))?;
                    } else if let Some(v) = field.strip_prefix("burn_in=") {
                        burn_in = v.parse().map_err(|_| Error::Parse(format!("bad burn-in '{v}'")))?;
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("bad number '{t}'"))))
                .collect::<Result<Vec<_>>>()?;
            samples.push(DVector::from_vec(row));
        }
        Ok((samples, seed, burn_in))
    }
}

/// Runs elliptical slice sampling for `n_burnin + n_samples` iterations from
/// a prior draw and keeps the last `n_samples` states. Deterministic given
/// `seed`.
pub fn run_mcmc(problem: &InferenceProblem, n_samples: usize, n_burnin: usize, seed: u64) -> Result<Chain> {
    run_mcmc_from(problem, None, n_samples, n_burnin, seed)
}

/// As [`run_mcmc`], optionally starting from the latent state `init`
/// (for example a MAP estimate) instead of a prior draw.
pub fn run_mcmc_from(
    problem: &InferenceProblem,
    init: Option<&DVector<f64>>,
    n_samples: usize,
    n_burnin: usize,
    seed: u64,
) -> Result<Chain> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = problem.latent_dim();
    let normal = |rng: &mut ChaCha8Rng| -> Result<DVector<f64>> {
        Ok(DVector::from_fn(dim, |_, _| StandardNormal.sample(rng)))
    };
    let whitened_ll = |xi: &DVector<f64>| -> Result<f64> { problem.log_likelihood(&problem.prior.whiten(xi)?) };

    for _ in 0..10 {
        let ll = whitened_ll(&normal(&mut rng)?)?;
        if !ll.is_finite() {
            return Err(Error::Numerical(
                "log-likelihood is not finite on a prior draw".into(),
            ));
        }
    }

    let mut xi = normal(&mut rng)?;
    if let Some(z) = init {
        xi = problem.prior.unwhiten(z)?;
    }
    let mut ll = whitened_ll(&xi)?;
    let mut chain = Chain {
        samples: Vec::with_capacity(n_samples),
        neg_log_posterior: Vec::with_capacity(n_samples),
        shrinks: 0,
        iterations: 0,
        seed,
        burn_in: n_burnin,
    };
    for it in 0..n_burnin + n_samples {
        let out = ess_step(&xi, ll, normal, whitened_ll, &mut rng)?;
        xi = out.state;
        ll = out.log_likelihood;
        chain.shrinks += out.shrinks as u64;
        chain.iterations += 1;
        if it >= n_burnin {
            let z = problem.prior.whiten(&xi)?;
            let nlp = -ll - problem.prior.logpdf(&z)?;
            if !nlp.is_finite() {
                return Err(non_finite(&z, nlp));
            }
            chain.neg_log_posterior.push(nlp);
            chain.samples.push(z);
        }
    }
    Ok(chain)
}

/// Settings for [`map_estimate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapOptions {
    pub max_iter: usize,
    /// Stop once `‖∇‖∞ <= tol`.
    pub tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Step shrink factor in the backtracking loop.
    pub shrink: f64,
    /// Consecutive failed line searches before giving up.
    pub max_failures: usize,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            tol: 1e-6,
            armijo: 1e-4,
            shrink: 0.5,
            max_failures: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapResult {
    pub latent: DVector<f64>,
    /// Objective before the first step and after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the line search failed `max_failures` times in a row.
    pub line_search_failed: bool,
}

/// Gradient descent with Armijo backtracking on the negative log-posterior.
pub fn map_estimate(problem: &InferenceProblem, init: &DVector<f64>, opts: &MapOptions) -> Result<MapResult> {
    map_estimate_with(problem, init, opts, |_, _, _| {})
}

/// As [`map_estimate`], calling `observer(iteration, latent, objective)` after
/// the initial evaluation and every accepted step.
pub fn map_estimate_with(
    problem: &InferenceProblem,
    init: &DVector<f64>,
    opts: &MapOptions,
    mut observer: impl FnMut(usize, &DVector<f64>, f64),
) -> Result<MapResult> {
    check_len(problem.latent_dim(), init.len())?;
    if !(opts.shrink > 0.0 && opts.shrink < 1.0) || !(opts.armijo > 0.0 && opts.armijo < 1.0) {
        return invalid("line-search constants must lie in (0, 1)");
    }
    let mut x = init.clone();
    let (mut f, mut g) = problem.neg_log_posterior_with_grad(&x)?;
    observer(0, &x, f);
    let mut trace = vec![f];
    let mut step = 1.0 / g.amax().max(1.0);
    let mut failures = 0;
    let mut converged = false;
    let mut line_search_failed = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        if g.amax() <= opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let slope = g.norm_squared();
        let mut t = step;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x - &g * t;
            if let Ok((fc, gc)) = problem.neg_log_posterior_with_grad(&cand) {
                if fc <= f - opts.armijo * t * slope {
                    accepted = Some((cand, fc, gc));
                    break;
                }
            }
            t *= opts.shrink;
        }
        match accepted {
            Some((cand, fc, gc)) => {
                failures = 0;
                x = cand;
                f = fc;
                g = gc;
                step = t / opts.shrink;
                trace.push(f);
                observer(iterations, &x, f);
            }
            None => {
                failures += 1;
                step = t;
                if failures >= opts.max_failures {
                    line_search_failed = true;
                    break;
                }
            }
        }
    }
    if !converged && g.amax() <= opts.tol {
        converged = true;
    }
    Ok(MapResult {
        latent: x,
        trace,
        iterations,
        converged,
        line_search_failed,
    })
}

/// White-noise representation of Besov coefficients:
/// `u_ℓ = γ_ℓ · F_q^{-1}(Φ(z_ℓ))`.
pub fn besov_whiten(z: &DVector<f64>, q: f64, gamma: &[f64]) -> Result<DVector<f64>> {
    check_len(gamma.len(), z.len())?;
    if z.iter().any(|v| !v.is_finite()) {
        return invalid("whitening input must be finite");
    }
    Ok(DVector::from_fn(z.len(), |i, _| gamma[i] * normal_to_piq(z[i], q).0))
}

/// Small random starting point for MAP: a prior draw scaled by `scale`.
pub fn map_initial_point<R: Rng + ?Sized>(problem: &InferenceProblem, scale: f64, rng: &mut R) -> Result<DVector<f64>> {
    Ok(problem.prior.sample(rng)? * scale)
}

/// GP/Q-EP problem on `grid` with a dense Gram-based direct representation.
pub fn direct_problem(prior: &ProcessPrior, grid: &Grid, likelihood: Arc<dyn Likelihood>) -> Result<InferenceProblem> {
    InferenceProblem::from_process(prior, grid, Representation::Direct, likelihood)
}

/// Convenience: truncated eigenpairs of the prior's Gram matrix on `grid`.
pub fn prior_eigenpairs(prior: &ProcessPrior, grid: &Grid, l_trunc: usize) -> Result<Eigenpairs> {
    let kernel = prior
        .kernel()
        .ok_or_else(|| Error::Unsupported("Besov priors have no kernel".into()))?;
    crate::kernels::truncated_eig(&gram(kernel, grid, kernel.default_jitter())?, l_trunc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{CovarianceMatrix, KernelSpec};
    use crate::models::{FlatLikelihood, RegressionData};
    use crate::processes::BesovSpec;
    use crate::special::chi2_cdf;
    use crate::stats::{ks_critical_value, ks_statistic};

    fn regression(n: usize, seed: u64) -> Arc<RegressionData> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arc::new(
            RegressionData::new(
                (0..n).map(|i| i as f64 / n as f64).collect(),
                DVector::from_fn(n, |_, _| rng.random::<f64>()),
                DVector::from_element(n, 0.3),
            )
            .unwrap(),
        )
    }

    #[test]
    fn theta_zero_is_identity() {
        let a = DVector::from_vec(vec![1.0, -2.0]);
        let b = DVector::from_vec(vec![5.0, 7.0]);
        assert_eq!(ellipse_point(&a, &b, 0.0), a);
    }

    #[test]
    fn empty_chain() {
        let prior = ProcessPrior::Qep { kernel: KernelSpec::default(), q: 1.0 };
        let grid = Grid::uniform_1d(5, 0.0, 1.0).unwrap();
        let problem = direct_problem(&prior, &grid, regression(5, 1)).unwrap();
        let chain = run_mcmc(&problem, 0, 3, 9).unwrap();
        assert!(chain.is_empty());
        assert_eq!(chain.iterations, 3);
    }

    #[test]
    fn chain_is_deterministic() {
        let prior = ProcessPrior::Qep { kernel: KernelSpec::default(), q: 1.0 };
        let grid = Grid::uniform_1d(8, 0.0, 1.0).unwrap();
        let problem = direct_problem(&prior, &grid, regression(8, 2)).unwrap();
        let a = run_mcmc(&problem, 50, 10, 42).unwrap();
        let b = run_mcmc(&problem, 50, 10, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.neg_log_posterior.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn whitened_elliptic_prior_has_chi2_radial_law() {
        let dist = Qed::centered(CovarianceMatrix::identity(4), 1.0, false).unwrap();
        let prior = LatentPrior::Elliptic(dist.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let rq: Vec<f64> = (0..n)
            .map(|_| {
                let xi = DVector::from_fn(4, |_, _| StandardNormal.sample(&mut rng));
                let z = prior.whiten(&xi).unwrap();
                dist.quad_form(&z).unwrap().powf(0.5)
            })
            .collect();
        let d = ks_statistic(&rq, |x| chi2_cdf(x, 4.0));
        assert!(d < ks_critical_value(n, 1e-3));
    }

    #[test]
    fn direct_qed_auxiliary_is_not_prior_invariant() {
        // Rotating two independent q-ED vectors does not preserve the q-ED
        // law when q != 2, so the slice sampler must not be fed q-ED
        // auxiliary draws directly.
        let d = 10;
        let dist = Qed::centered(CovarianceMatrix::identity(d), 1.0, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let flat = |_: &DVector<f64>| Ok(0.0);
        let mut state = dist.sample(&mut rng).unwrap();
        let mut rq = Vec::new();
        for _ in 0..10_000 {
            state = ess_step(&state, 0.0, |r: &mut ChaCha8Rng| dist.sample(r), flat, &mut rng)
                .unwrap()
                .state;
            rq.push(dist.quad_form(&state).unwrap().sqrt());
        }
        let stat = ks_statistic(&rq, |x| chi2_cdf(x, d as f64));
        assert!(stat > 3.0 * ks_critical_value(rq.len(), 1e-3));
    }

    #[test]
    fn flat_likelihood_accepts_first_proposal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DVector::from_vec(vec![0.3, 0.1]);
        let out = ess_step(
            &x,
            0.0,
            |r: &mut ChaCha8Rng| Ok(DVector::from_fn(2, |_, _| StandardNormal.sample(r))),
            |_| Ok(0.0),
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.shrinks, 0);
    }

    #[test]
    fn shrink_limit_reports_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = DVector::from_vec(vec![0.0]);
        // only the current point itself is inside the slice
        let res = ess_step(
            &x,
            0.0,
            |_: &mut ChaCha8Rng| Ok(DVector::from_element(1, 1.0)),
            |p: &DVector<f64>| Ok(if p[0] == 0.0 { 0.0 } else { f64::NEG_INFINITY }),
            &mut rng,
        );
        assert!(matches!(res, Err(Error::Numerical(_))));
    }

    #[test]
    fn unwhiten_inverts_whiten() {
        let c = CovarianceMatrix::from_diagonal(&[1.0, 4.0, 0.5]).unwrap();
        let priors = [
            LatentPrior::Elliptic(Qed::centered(c, 1.0, true).unwrap()),
            LatentPrior::Independent(IndependentCoefficients::new(vec![1.0, 4.0, 0.5], 1.5).unwrap()),
            LatentPrior::IidPiQ { dim: 3, q: 1.0 },
        ];
        let xi = DVector::from_vec(vec![0.3, -1.7, 2.2]);
        for p in &priors {
            let back = p.unwhiten(&p.whiten(&xi).unwrap()).unwrap();
            assert!((back - &xi).amax() < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn whitening_identities() {
        let gamma = [0.5, 2.0, 1.0];
        let z = DVector::from_vec(vec![0.3, -1.2, 2.2]);
        let w = besov_whiten(&z, 2.0, &gamma).unwrap();
        for i in 0..3 {
            assert_eq!(w[i], gamma[i] * z[i]);
        }
        assert_eq!(besov_whiten(&DVector::zeros(3), 1.0, &gamma).unwrap(), DVector::zeros(3));
    }

    #[test]
    fn besov_whitening_is_increasing() {
        let gamma = vec![1.0; 200];
        let z = DVector::from_fn(200, |i, _| -6.0 + 12.0 * i as f64 / 199.0);
        for &q in &[1.0, 1.5] {
            let w = besov_whiten(&z, q, &gamma).unwrap();
            assert!(w.as_slice().windows(2).all(|p| p[1] > p[0]));
        }
    }

    #[test]
    fn map_gaussian_matches_closed_form() {
        // q = 2 on the grid: MAP = K (K + σ²I)^{-1} y
        let n = 10;
        let grid = Grid::uniform_1d(n, 0.0, 1.0).unwrap();
        let kernel = KernelSpec::default();
        let data = regression(n, 7);
        let prior = ProcessPrior::Gp { kernel };
        let problem = direct_problem(&prior, &grid, data.clone()).unwrap();
        let init = DVector::from_element(n, 0.01);
        let opts = MapOptions { max_iter: 100_000, tol: 1e-7, ..Default::default() };
        let res = map_estimate(&problem, &init, &opts).unwrap();
        assert!(res.converged);
        let k = gram(&kernel, &grid, kernel.default_jitter()).unwrap();
        let mut a = k.entries().clone();
        for i in 0..n {
            a[(i, i)] += 0.09;
        }
        let expect = k.entries() * a.lu().solve(&data.observations).unwrap();
        assert!((res.latent - expect).amax() < 1e-6);
        assert!(res.trace.windows(2).all(|p| p[1] <= p[0] + 1e-12));
    }

    #[test]
    fn besov_problem_dimensions() {
        let spec = BesovSpec::new(1.0, 1.0, 1.0, 1, 30).unwrap();
        let grid = Grid::uniform_1d(12, 0.0, 2.0).unwrap();
        let problem = InferenceProblem::from_process(
            &ProcessPrior::Besov(spec),
            &grid,
            Representation::Direct,
            regression(12, 1),
        )
        .unwrap();
        assert_eq!(problem.latent_dim(), 30);
        let mismatch = InferenceProblem::from_process(
            &ProcessPrior::Gp { kernel: KernelSpec::default() },
            &grid,
            Representation::Direct,
            Arc::new(FlatLikelihood { len: 5 }),
        );
        assert!(mismatch.is_err());
    }

    #[test]
    fn chain_file_round_trip() {
        let chain = Chain {
            samples: vec![DVector::from_vec(vec![1.5, -2.0]), DVector::from_vec(vec![0.1, 3e-9])],
            neg_log_posterior: vec![1.0, 2.0],
            shrinks: 0,
            iterations: 2,
            seed: 17,
            burn_in: 4,
        };
        let mut buf = Vec::new();
        chain.write_to(&mut buf, "abc").unwrap();
        let (samples, seed, burn) = Chain::read_samples(buf.as_slice()).unwrap();
        assert_eq!(samples, chain.samples);
        assert_eq!((seed, burn), (17, 4));
    }
}
