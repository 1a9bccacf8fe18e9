//! The multivariate q-exponential distribution.
//!
//! `q-ED_d(μ, C)` is the elliptic-contour law with density generator
//! `g(r) = r^{(q/2-1)d/2} exp(-r^{q/2}/2)`, i.e.
//!
//! ```text
//! p(u) = (q/2) (2π)^{-d/2} |C|^{-1/2} r^{(q/2-1)d/2} exp(-r^{q/2}/2),
//! r(u) = (u-μ)ᵀ C⁻¹ (u-μ).
//! ```
//!
//! Draws use the stochastic representation `u = μ + R L S` with `S` uniform
//! on the unit sphere of ℝ^d and `R^q ~ χ²_d`. The *scaled* law multiplies
//! `u - μ` by `d^{1/2 - 1/q}`, which keeps the covariance bounded as `d`
//! grows; this is the finite-dimensional law of the q-exponential process.

use std::f64::consts::{LN_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{check_len, invalid, Error, Result};
use crate::kernels::CovarianceMatrix;
use crate::special::{chi2_cdf, ln_gamma};

/// Relative floor on the quadratic form: `r >= R_FLOOR · d`.
pub const R_FLOOR: f64 = 1e-12;

/// Multivariate q-exponential distribution.
#[derive(Debug, Clone)]
pub struct Qed {
    mean: DVector<f64>,
    cov: CovarianceMatrix,
    q: f64,
    scaled: bool,
}

impl Qed {
    pub fn new(mean: DVector<f64>, cov: CovarianceMatrix, q: f64, scaled: bool) -> Result<Self> {
        if !(q.is_finite() && q > 0.0) {
            return invalid(format!("shape q must be positive, got {q}"));
        }
        check_len(cov.dim(), mean.len())?;
        if mean.iter().any(|m| !m.is_finite()) {
            return invalid("mean must be finite");
        }
        Ok(Self {
            mean,
            cov,
            q,
            scaled,
        })
    }

    /// Zero-mean distribution.
    pub fn centered(cov: CovarianceMatrix, q: f64, scaled: bool) -> Result<Self> {
        Self::new(DVector::zeros(cov.dim()), cov, q, scaled)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn is_scaled(&self) -> bool {
        self.scaled
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &CovarianceMatrix {
        &self.cov
    }

    /// Multiplier applied to `u - μ`: `d^{1/2-1/q}` when scaled, else 1.
    pub fn scale_factor(&self) -> f64 {
        if self.scaled {
            scale_factor(self.dim(), self.q)
        } else {
            1.0
        }
    }

    /// Quadratic form `r = vᵀ C⁻¹ v` in unscaled coordinates, `v = (u-μ)/scale`.
    pub fn quad_form(&self, u: &DVector<f64>) -> Result<f64> {
        check_len(self.dim(), u.len())?;
        let v = (u - &self.mean) / self.scale_factor();
        let w = self.cov.solve_lower(&v)?;
        Ok(w.norm_squared())
    }

    fn log_normalizer(&self) -> Result<f64> {
        let d = self.dim() as f64;
        let jacobian = if self.scaled {
            d * self.scale_factor().ln()
        } else {
            0.0
        };
        Ok((0.5 * self.q).ln() - 0.5 * d * (2.0 * PI).ln() - 0.5 * self.cov.log_det()? - jacobian)
    }

    /// Log-density at `u`, with the quadratic form floored at `R_FLOOR·d`.
    pub fn logpdf(&self, u: &DVector<f64>) -> Result<f64> {
        let r = self.quad_form(u)?;
        Ok(self.log_normalizer()? + self.log_generator(r))
    }

    fn log_generator(&self, r: f64) -> f64 {
        let d = self.dim() as f64;
        let r = r.max(R_FLOOR * d);
        (0.5 * self.q - 1.0) * 0.5 * d * r.ln() - 0.5 * r.powf(0.5 * self.q)
    }

    /// Log-density and its gradient with respect to `u`.
    pub fn logpdf_with_grad(&self, u: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        check_len(self.dim(), u.len())?;
        let d = self.dim() as f64;
        let s = self.scale_factor();
        let v = (u - &self.mean) / s;
        let cinv_v = self.cov.solve(&v)?;
        let r = v.dot(&cinv_v);
        let value = self.log_normalizer()? + self.log_generator(r);
        let rf = r.max(R_FLOOR * d);
        // d/dr of the log generator, evaluated at the floored r
        let dr = (0.5 * self.q - 1.0) * 0.5 * d / rf - 0.25 * self.q * rf.powf(0.5 * self.q - 1.0);
        let grad = cinv_v * (2.0 * dr / s);
        Ok((value, grad))
    }

    /// One draw `μ + scale · R · L · S`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let d = self.dim();
        let sphere = sphere_sample(d, rng);
        let radius = RadialLaw::new(d, self.q)?.sample_r(rng);
        let dir = self.cov.mul_lower(&sphere)?;
        Ok(&self.mean + dir * (radius * self.scale_factor()))
    }

    /// Covariance matrix `cov_constant · C`.
    pub fn covariance(&self) -> DMatrix<f64> {
        self.cov.entries() * cov_constant(self.dim(), self.q, self.scaled)
    }

    /// Conditional law of the free coordinates given the observed ones.
    ///
    /// Mean `μ₁ + C₁₂C₂₂⁻¹(u₂-μ₂)`, structure matrix `C₁₁ - C₁₂C₂₂⁻¹C₂₁`,
    /// same `q`. The result is unscaled: when `self` is scaled, the observed
    /// values are mapped back by `1/scale` before conditioning and the
    /// conditional mean is mapped forward again, but the returned structure
    /// matrix is that of the unscaled vector. Callers that need the scaled
    /// law multiply it by `scale²` (see [`crate::processes::qep_predict`]).
    pub fn conditional(&self, observed: &[usize], values: &DVector<f64>) -> Result<Qed> {
        let d = self.dim();
        check_len(observed.len(), values.len())?;
        if observed.is_empty() || observed.len() >= d {
            return invalid("observed indices must form a strict nonempty subset");
        }
        let mut is_obs = vec![false; d];
        for &i in observed {
            if i >= d || is_obs[i] {
                return invalid(format!("observed index {i} out of range or repeated"));
            }
            is_obs[i] = true;
        }
        let free: Vec<usize> = (0..d).filter(|&i| !is_obs[i]).collect();

        let s = self.scale_factor();
        let c11 = self.cov.submatrix(&free, &free);
        let c12 = self.cov.submatrix(&free, observed);
        let c22 = CovarianceMatrix::new(
            self.cov.submatrix(observed, observed),
            self.cov.base_jitter(),
        )?;
        let mu1 = DVector::from_iterator(free.len(), free.iter().map(|&i| self.mean[i]));
        let mu2 = DVector::from_iterator(observed.len(), observed.iter().map(|&i| self.mean[i]));

        let resid = (values - mu2) / s;
        let weights = c22.solve(&resid)?;
        let cond_mean = mu1 + (&c12 * weights) * s;

        let factor = c22.factor()?;
        let solved = factor.chol.solve(&c12.transpose());
        let mut cond_cov = c11 - &c12 * solved;
        symmetrize(&mut cond_cov);
        let cov = CovarianceMatrix::new(cond_cov, self.cov.base_jitter())?;
        Qed::new(cond_mean, cov, self.q, false)
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `d^{1/2 - 1/q}`.
pub fn scale_factor(d: usize, q: f64) -> f64 {
    (d as f64).powf(0.5 - 1.0 / q)
}

/// Uniform direction on the unit sphere of ℝ^d (normalized Gaussian vector).
pub fn sphere_sample<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let n = v.norm();
        if n > 0.0 {
            return v / n;
        }
    }
}

/// Law of the radial variable `R = sqrt(r(u))`, with `R^q ~ χ²_d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialLaw {
    pub d: usize,
    pub q: f64,
}

impl RadialLaw {
    pub fn new(d: usize, q: f64) -> Result<Self> {
        if d == 0 || !(q > 0.0 && q.is_finite()) {
            return invalid(format!("radial law needs d >= 1 and q > 0 (d={d}, q={q})"));
        }
        Ok(Self { d, q })
    }

    /// Draws `G = R^q ~ χ²_d` through a Gamma(d/2, scale 2) generator.
    pub fn sample_rq<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Gamma::new(0.5 * self.d as f64, 2.0)
            .expect("valid gamma parameters")
            .sample(rng)
    }

    /// Draws `R = G^{1/q}`, computed in log space.
    pub fn sample_r<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        (self.sample_rq(rng).ln() / self.q).exp()
    }

    /// CDF of `R^q`.
    pub fn cdf_rq(&self, g: f64) -> f64 {
        chi2_cdf(g, self.d as f64)
    }

    pub fn moment(&self, k: f64) -> Result<f64> {
        moment_r(self.d, self.q, k)
    }
}

/// `E[R^k] = 2^{k/q} Γ(d/2 + k/q) / Γ(d/2)`.
///
/// When `k/q` is a small integer `m` the ratio is the rising factorial
/// `Π_{j<m} (d/2 + j)`, which is exact in floating point for `k = q`.
pub fn moment_r(d: usize, q: f64, k: f64) -> Result<f64> {
    if d == 0 || !(q > 0.0) || !(k >= 0.0) {
        return invalid(format!("moment needs d >= 1, q > 0, k >= 0 (d={d}, q={q}, k={k})"));
    }
    let ratio = k / q;
    let half_d = 0.5 * d as f64;
    if ratio == ratio.round() && ratio <= 16.0 {
        let m = ratio as usize;
        let prod = (0..m).fold(1.0, |acc, j| acc * 2.0 * (half_d + j as f64));
        if prod.is_finite() {
            return Ok(prod);
        }
    }
    let log = ratio * LN_2 + ln_gamma(half_d + ratio) - ln_gamma(half_d);
    let value = log.exp();
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numerical(format!(
            "E[R^{k}] overflows for d={d}, q={q} (log value {log})"
        )))
    }
}

/// Factor relating `Cov(u)` to `C`: `E[R²]/d`, times `d^{1-2/q}` if scaled.
pub fn cov_constant(d: usize, q: f64, scaled: bool) -> f64 {
    let base = moment_r(d, q, 2.0).expect("valid parameters") / d as f64;
    if scaled {
        base * (d as f64).powf(1.0 - 2.0 / q)
    } else {
        base
    }
}

/// Log-density of the multivariate exponential power law with generator
/// `exp(-r^{q/2}/2)`, without the radial factor of the q-ED; kept as a
/// reference point, never sampled.
pub fn gomez_ep_logpdf(
    mean: &DVector<f64>,
    cov: &CovarianceMatrix,
    q: f64,
    u: &DVector<f64>,
) -> Result<f64> {
    check_len(mean.len(), u.len())?;
    let d = mean.len() as f64;
    let w = cov.solve_lower(&(u - mean))?;
    let r = w.norm_squared();
    Ok(q.ln() + ln_gamma(0.5 * d) - LN_2 - ln_gamma(d / q) - (d / q) * LN_2
        - 0.5 * d * PI.ln()
        - 0.5 * cov.log_det()?
        - 0.5 * r.powf(0.5 * q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spd(d: usize, seed: u64) -> CovarianceMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
        let mut m = &a * a.transpose() + DMatrix::identity(d, d) * 0.5;
        symmetrize(&mut m);
        CovarianceMatrix::new(m, 0.0).unwrap()
    }

    #[test]
    fn d1_density_closed_form() {
        let dist = Qed::centered(CovarianceMatrix::identity(1), 1.0, false).unwrap();
        let u: f64 = 2.0;
        let expect = (0.5f64).ln() - 0.5 * (2.0 * PI).ln() + (0.5 - 1.0) * 0.5 * (u * u).ln()
            - 0.5 * u.abs();
        let got = dist.logpdf(&DVector::from_element(1, u)).unwrap();
        assert!((got - expect).abs() < 1e-14);
    }

    #[test]
    fn gaussian_case_matches_mvn() {
        let c = spd(4, 3);
        let mean = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let u = DVector::from_vec(vec![1.0, 0.5, -0.7, 0.2]);
        for scaled in [false, true] {
            let dist = Qed::new(mean.clone(), c.clone(), 2.0, scaled).unwrap();
            let diff = &u - &mean;
            let r = diff.dot(&c.solve(&diff).unwrap());
            let mvn = -2.0 * (2.0 * PI).ln() - 0.5 * c.log_det().unwrap() - 0.5 * r;
            assert!((dist.logpdf(&u).unwrap() - mvn).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_differences() {
        let c = spd(5, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &q in &[1.0, 1.5, 2.0, 3.0] {
            for scaled in [false, true] {
                let dist = Qed::centered(c.clone(), q, scaled).unwrap();
                let u = dist.sample(&mut rng).unwrap();
                let (_, g) = dist.logpdf_with_grad(&u).unwrap();
                for i in 0..5 {
                    let h = 1e-6;
                    let mut up = u.clone();
                    up[i] += h;
                    let mut dn = u.clone();
                    dn[i] -= h;
                    let fd = (dist.logpdf(&up).unwrap() - dist.logpdf(&dn).unwrap()) / (2.0 * h);
                    assert!((g[i] - fd).abs() < 1e-5 * (1.0 + fd.abs()), "q={q} i={i}");
                }
            }
        }
    }

    #[test]
    fn density_finite_at_mean() {
        let dist = Qed::centered(CovarianceMatrix::identity(3), 1.0, true).unwrap();
        let (v, g) = dist.logpdf_with_grad(&DVector::zeros(3)).unwrap();
        assert!(v.is_finite());
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn moments() {
        assert_eq!(moment_r(7, 1.3, 0.0).unwrap(), 1.0);
        for d in 1..30 {
            for &q in &[0.5, 1.0, 1.5, 2.0, 3.7] {
                assert_eq!(moment_r(d, q, q).unwrap(), d as f64);
            }
        }
        for d in 1..30 {
            assert_eq!(cov_constant(d, 2.0, false), 1.0);
            assert_eq!(cov_constant(d, 2.0, true), 1.0);
        }
        // Γ-ratio by hand: 4·Γ(3)/(2·Γ(1)) = 4
        assert!((cov_constant(2, 1.0, false) - 4.0).abs() < 1e-14);
        let big = moment_r(100, 1.0, 2.0).unwrap();
        assert!((big / 1e4 - 1.0).abs() < 0.05);
        assert!((cov_constant(10_000, 1.0, true) - 1.0).abs() <= 0.02);
        assert!(moment_r(0, 1.0, 1.0).is_err());
    }

    #[test]
    fn non_integer_moment_uses_log_gamma() {
        // E[R^1] at d=4, q=2 is √2·Γ(2.5)/Γ(2) = √2·(3√π/4)
        let expect = 2f64.sqrt() * 0.75 * PI.sqrt();
        assert!((moment_r(4, 2.0, 1.0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn block_diagonal_conditional_is_marginal() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.0, 0.0, 0.0, 1.5]);
        let dist = Qed::centered(CovarianceMatrix::new(m, 0.0).unwrap(), 1.0, false).unwrap();
        let cond = dist.conditional(&[2], &DVector::from_element(1, 0.8)).unwrap();
        assert!(cond.mean().norm() < 1e-15);
        assert_eq!(cond.cov().entries()[(0, 0)], 2.0);
        assert_eq!(cond.cov().entries()[(0, 1)], 0.3);
        assert!(!cond.is_scaled());
    }

    #[test]
    fn conditional_rejects_bad_subsets() {
        let dist = Qed::centered(CovarianceMatrix::identity(3), 1.0, false).unwrap();
        assert!(dist.conditional(&[], &DVector::zeros(0)).is_err());
        assert!(dist.conditional(&[0, 1, 2], &DVector::zeros(3)).is_err());
        assert!(dist.conditional(&[0, 0], &DVector::zeros(2)).is_err());
    }

    #[test]
    fn gomez_matches_gaussian_at_q2() {
        let c = spd(3, 5);
        let mean = DVector::zeros(3);
        let u = DVector::from_vec(vec![0.4, -1.0, 0.2]);
        let qed = Qed::centered(c.clone(), 2.0, false).unwrap();
        let ep = gomez_ep_logpdf(&mean, &c, 2.0, &u).unwrap();
        assert!((ep - qed.logpdf(&u).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sphere_has_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 1..8 {
            let s = sphere_sample(d, &mut rng);
            assert!((s.norm() - 1.0).abs() < 1e-12);
        }
    }
}
