//! Function-space priors: the q-exponential process, the Gaussian process
//! (its `q = 2` member) and the Besov series prior, plus truncated
//! Karhunen–Loève representations and prediction.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{check_len, invalid, Error, Result};
use crate::kernels::{cross_gram, gram, CovarianceMatrix, Eigenpairs, Grid, KernelSpec};
use crate::qed::{cov_constant, scale_factor, symmetrize, Qed, R_FLOOR};
use crate::stats::quantile;

/// Orthonormal basis used by the Besov series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BesovBasis {
    /// `φ₀(t) = √2`, `φ_j(t) = cos(π j t)`; tensor products in 2-D.
    FourierCosine,
}

/// Besov series prior `u(x) = Σ_ℓ γ_ℓ u_ℓ φ_ℓ(x)`, `u_ℓ ~ π_q` iid.
#[derive(Debug, Clone, PartialEq)]
pub struct BesovSpec {
    pub q: f64,
    pub kappa: f64,
    pub smoothness: f64,
    pub domain_dim: usize,
    pub basis: BesovBasis,
    pub truncation: usize,
}

impl BesovSpec {
    pub fn new(q: f64, kappa: f64, smoothness: f64, domain_dim: usize, truncation: usize) -> Result<Self> {
        let spec = Self {
            q,
            kappa,
            smoothness,
            domain_dim,
            basis: BesovBasis::FourierCosine,
            truncation,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.kappa > 0.0 && self.smoothness > 0.0) {
            return invalid("Besov q, kappa and smoothness must be positive");
        }
        if !(1..=2).contains(&self.domain_dim) {
            return invalid("Besov basis is available on 1-D and 2-D domains only");
        }
        if self.truncation == 0 {
            return invalid("Besov truncation must be positive");
        }
        Ok(())
    }

    /// Decay exponent `s/d* + 1/2 - 1/q`.
    pub fn decay(&self) -> f64 {
        self.smoothness / self.domain_dim as f64 + 0.5 - 1.0 / self.q
    }

    /// `γ_ℓ = κ^{-1/q} ℓ^{-(s/d* + 1/2 - 1/q)}` for `ℓ = 1..=L`.
    pub fn weights(&self) -> Vec<f64> {
        let amp = self.kappa.powf(-1.0 / self.q);
        let decay = self.decay();
        (1..=self.truncation)
            .map(|l| amp * (l as f64).powf(-decay))
            .collect()
    }

    /// Basis values `Φ[n, ℓ] = φ_ℓ(x_n)` (unweighted), `N × L`.
    pub fn basis_matrix(&self, grid: &Grid) -> Result<DMatrix<f64>> {
        self.validate()?;
        if grid.dim() != self.domain_dim {
            return Err(Error::DimensionMismatch {
                expected: self.domain_dim,
                got: grid.dim(),
            });
        }
        let n = grid.len();
        let mut m = DMatrix::zeros(n, self.truncation);
        match self.domain_dim {
            1 => {
                for (col, j) in (0..self.truncation).enumerate() {
                    for (row, p) in grid.points().enumerate() {
                        m[(row, col)] = cosine_1d(j, p[0]);
                    }
                }
            }
            _ => {
                for (col, (i, j)) in tensor_order(self.truncation).into_iter().enumerate() {
                    for (row, p) in grid.points().enumerate() {
                        m[(row, col)] = cosine_1d(i, p[0]) * cosine_1d(j, p[1]);
                    }
                }
            }
        }
        Ok(m)
    }

    /// Basis with the weights folded in: `Ψ[n, ℓ] = γ_ℓ φ_ℓ(x_n)`.
    pub fn weighted_basis(&self, grid: &Grid) -> Result<DMatrix<f64>> {
        let mut m = self.basis_matrix(grid)?;
        for (mut col, g) in m.column_iter_mut().zip(self.weights()) {
            col *= g;
        }
        Ok(m)
    }
}

fn cosine_1d(j: usize, t: f64) -> f64 {
    if j == 0 {
        SQRT_2
    } else {
        (PI * j as f64 * t).cos()
    }
}

/// First `count` index pairs `(i, j)` ordered by total frequency `i + j`,
/// then by `i`.
pub fn tensor_order(count: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(count);
    let mut total = 0;
    while out.len() < count {
        for i in 0..=total {
            if out.len() == count {
                break;
            }
            out.push((i, total - i));
        }
        total += 1;
    }
    out
}

/// A function-space prior.
#[derive(Debug, Clone, PartialEq)]
pub enum ProcessPrior {
    Gp { kernel: KernelSpec },
    Qep { kernel: KernelSpec, q: f64 },
    Besov(BesovSpec),
}

impl ProcessPrior {
    pub fn q(&self) -> f64 {
        match self {
            ProcessPrior::Gp { .. } => 2.0,
            ProcessPrior::Qep { q, .. } => *q,
            ProcessPrior::Besov(b) => b.q,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProcessPrior::Gp { .. } => "gp",
            ProcessPrior::Qep { .. } => "qep",
            ProcessPrior::Besov(_) => "besov",
        }
    }

    pub fn kernel(&self) -> Option<&KernelSpec> {
        match self {
            ProcessPrior::Gp { kernel } | ProcessPrior::Qep { kernel, .. } => Some(kernel),
            ProcessPrior::Besov(_) => None,
        }
    }

    /// Finite-dimensional law on `grid` (GP and Q-EP only): scaled q-ED(0, K).
    pub fn marginal(&self, grid: &Grid) -> Result<Qed> {
        let kernel = self.kernel().ok_or_else(|| {
            Error::Unsupported("the Besov prior has no closed-form finite-dimensional law".into())
        })?;
        let q = self.q();
        if !(q > 0.0) {
            return invalid(format!("q must be positive, got {q}"));
        }
        let c = gram(kernel, grid, kernel.default_jitter())?;
        Qed::centered(c, q, true)
    }
}

/// Scalar draw from `π_q ∝ exp(-|u|^q/2)`: `|u|^q ~ Gamma(1/q, rate 1/2)`, random sign.
pub fn scalar_piq_sample<R: Rng + ?Sized>(q: f64, rng: &mut R) -> f64 {
    let g: f64 = Gamma::new(1.0 / q, 2.0).expect("valid gamma parameters").sample(rng);
    let magnitude = (g.ln() / q).exp();
    if rng.random::<bool>() {
        magnitude
    } else {
        -magnitude
    }
}

/// One draw of the prior evaluated on `grid`.
///
/// GP and Q-EP draws are generated on the lexicographically sorted grid and
/// scattered back, so permuting the grid permutes the draw identically for
/// the same random stream.
pub fn prior_draw<R: Rng + ?Sized>(prior: &ProcessPrior, grid: &Grid, rng: &mut R) -> Result<DVector<f64>> {
    match prior {
        ProcessPrior::Besov(spec) => {
            let basis = spec.weighted_basis(grid)?;
            let coeffs = DVector::from_fn(spec.truncation, |_, _| scalar_piq_sample(spec.q, rng));
            Ok(basis * coeffs)
        }
        _ => {
            let order = canonical_order(grid);
            let sorted = grid.select(&order)?;
            let draw = prior.marginal(&sorted)?.sample(rng)?;
            let mut out = DVector::zeros(grid.len());
            for (k, &i) in order.iter().enumerate() {
                out[i] = draw[k];
            }
            Ok(out)
        }
    }
}

fn canonical_order(grid: &Grid) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| {
        grid.point(a)
            .iter()
            .zip(grid.point(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// How a latent vector maps to field values on the grid.
#[derive(Debug, Clone)]
pub enum FieldRepresentation {
    /// The latent vector is the field on the grid.
    Direct { len: usize },
    /// `u = Σ_ℓ z_ℓ φ_ℓ` over truncated eigenpairs.
    Coefficient { eigenpairs: Eigenpairs },
}

impl FieldRepresentation {
    pub fn latent_dim(&self) -> usize {
        match self {
            Self::Direct { len } => *len,
            Self::Coefficient { eigenpairs } => eigenpairs.len(),
        }
    }

    pub fn field_len(&self) -> usize {
        match self {
            Self::Direct { len } => *len,
            Self::Coefficient { eigenpairs } => eigenpairs.vectors.nrows(),
        }
    }

    pub fn reconstruct(&self, latent: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.latent_dim(), latent.len())?;
        Ok(match self {
            Self::Direct { .. } => latent.clone(),
            Self::Coefficient { eigenpairs } => &eigenpairs.vectors * latent,
        })
    }

    /// Coefficients of the orthogonal projection of a field (`Φᵀ u`).
    pub fn project(&self, field: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.field_len(), field.len())?;
        Ok(match self {
            Self::Direct { .. } => field.clone(),
            Self::Coefficient { eigenpairs } => eigenpairs.vectors.tr_mul(field),
        })
    }
}

/// Joint scaled `q-ED(0, diag(λ))` prior on truncated KL coefficients.
pub fn kl_coefficient_prior(eigenpairs: &Eigenpairs, q: f64) -> Result<Qed> {
    check_positive(eigenpairs.values.as_slice())?;
    Qed::centered(CovarianceMatrix::from_diagonal(eigenpairs.values.as_slice())?, q, true)
}

fn check_positive(values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "KL coefficient variances must be positive, found {v:e}"
        )));
    }
    Ok(())
}

/// Coefficient prior with independent one-dimensional `q-ED(0, λ_ℓ)` entries.
///
/// Uncorrelated like the joint prior but not elliptical as a vector; offered
/// for comparison with [`kl_coefficient_prior`].
#[derive(Debug, Clone, PartialEq)]
pub struct IndependentCoefficients {
    pub variances: Vec<f64>,
    pub q: f64,
}

impl IndependentCoefficients {
    pub fn new(variances: Vec<f64>, q: f64) -> Result<Self> {
        check_positive(&variances)?;
        if !(q > 0.0) {
            return invalid("q must be positive");
        }
        Ok(Self { variances, q })
    }

    pub fn from_eigenpairs(eigenpairs: &Eigenpairs, q: f64) -> Result<Self> {
        Self::new(eigenpairs.values.as_slice().to_vec(), q)
    }

    pub fn dim(&self) -> usize {
        self.variances.len()
    }

    pub fn logpdf_with_grad(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        check_len(self.dim(), z.len())?;
        let q = self.q;
        let mut value = 0.0;
        let mut grad = DVector::zeros(z.len());
        for (i, (&zi, &lam)) in z.iter().zip(&self.variances).enumerate() {
            let r = (zi * zi / lam).max(R_FLOOR);
            value += (0.5 * q).ln() - 0.5 * (2.0 * PI * lam).ln() + (0.5 * q - 1.0) * 0.5 * r.ln()
                - 0.5 * r.powf(0.5 * q);
            let dr = (0.5 * q - 1.0) * 0.5 / r - 0.25 * q * r.powf(0.5 * q - 1.0);
            grad[i] = dr * 2.0 * zi / lam;
        }
        Ok((value, grad))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.variances.iter().map(|&lam| {
                let g: f64 = Gamma::new(0.5, 2.0).expect("valid").sample(rng);
                let r = (g.ln() / self.q).exp();
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * r * lam.sqrt()
            }),
        )
    }
}

/// Predictive law at test points.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Conditional q-ED of the test values (unscaled semantics, scaling applied).
    pub conditional: Qed,
}

impl Prediction {
    /// Pointwise central credible band from `n_draws` conditional draws.
    pub fn credible_bands<R: Rng + ?Sized>(
        &self,
        n_draws: usize,
        level: f64,
        rng: &mut R,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if n_draws < 2 || !(level > 0.0 && level < 1.0) {
            return invalid("credible bands need at least two draws and a level in (0, 1)");
        }
        let d = self.mean.len();
        let mut cols = vec![Vec::with_capacity(n_draws); d];
        for _ in 0..n_draws {
            let draw = self.conditional.sample(rng)?;
            for (c, v) in cols.iter_mut().zip(draw.iter()) {
                c.push(*v);
            }
        }
        let lo = 0.5 * (1.0 - level);
        let lower = DVector::from_iterator(d, cols.iter().map(|c| quantile(c, lo)));
        let upper = DVector::from_iterator(d, cols.iter().map(|c| quantile(c, 1.0 - lo)));
        Ok((lower, upper))
    }
}

/// Predictive distribution of a GP or Q-EP prior at `test` given noisy
/// observations at `train`.
///
/// The joint Gram matrix over test ∪ train (noise variances added to the
/// train diagonal) defines a q-ED of dimension `n = n_test + n_train`.
/// Conditioning gives the predictive mean `K₁₂K₂₂⁻¹y`, identical for every
/// `q`; the conditional structure matrix is multiplied by the squared
/// process scaling `n^{1-2/q}` and the predictive covariance is that matrix
/// times `cov_constant(n_test, q)`. `noise_var` holds one variance per
/// training point or a single shared value.
pub fn qep_predict(
    prior: &ProcessPrior,
    train: &Grid,
    train_values: &DVector<f64>,
    test: &Grid,
    noise_var: &[f64],
) -> Result<Prediction> {
    let kernel = prior.kernel().ok_or_else(|| {
        Error::Unsupported("prediction is not defined for the Besov series prior".into())
    })?;
    let q = prior.q();
    let (n_test, n_train) = (test.len(), train.len());
    check_len(n_train, train_values.len())?;
    if noise_var.len() != 1 && noise_var.len() != n_train {
        return Err(Error::DimensionMismatch {
            expected: n_train,
            got: noise_var.len(),
        });
    }
    if noise_var.iter().any(|v| !(*v >= 0.0)) {
        return invalid("noise variances must be nonnegative");
    }
    let joint_grid = test.concat(train)?;
    let jitter = kernel.default_jitter();
    let mut k = gram(kernel, &joint_grid, jitter)?.entries().clone();
    for i in 0..n_train {
        let nv = if noise_var.len() == 1 { noise_var[0] } else { noise_var[i] };
        k[(n_test + i, n_test + i)] += nv;
    }
    let joint = Qed::centered(CovarianceMatrix::new(k, jitter)?, q, false)?;
    let observed: Vec<usize> = (n_test..n_test + n_train).collect();
    let cond = joint.conditional(&observed, train_values)?;

    let s2 = scale_factor(n_test + n_train, q).powi(2);
    let mut structure = cond.cov().entries() * s2;
    symmetrize(&mut structure);
    let covariance = &structure * cov_constant(n_test, q, false);
    let conditional = Qed::new(
        cond.mean().clone(),
        CovarianceMatrix::new(structure, jitter * s2)?,
        q,
        false,
    )?;
    Ok(Prediction {
        mean: cond.mean().clone(),
        covariance,
        conditional,
    })
}

/// Standard GP regression posterior, the `q = 2` reference for [`qep_predict`].
pub fn gp_posterior(
    kernel: &KernelSpec,
    train: &Grid,
    train_values: &DVector<f64>,
    test: &Grid,
    noise_var: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let jitter = kernel.default_jitter();
    let mut k22 = gram(kernel, train, jitter)?.entries().clone();
    for i in 0..train.len() {
        k22[(i, i)] += noise_var;
    }
    let k22 = CovarianceMatrix::new(k22, jitter)?;
    let k12 = cross_gram(kernel, test, train)?;
    let k11 = gram(kernel, test, jitter)?;
    let alpha = k22.solve(train_values)?;
    let mean = &k12 * alpha;
    let v = k22.factor()?.chol.solve(&k12.transpose());
    let cov = k11.entries() - &k12 * v;
    Ok((mean, cov))
}
