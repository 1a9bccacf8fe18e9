//! Covariance functions, Gram matrices and the factorizations shared by the
//! Gaussian and q-exponential priors.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{invalid, Error, Result};

/// Number of times the diagonal jitter is multiplied by ten before giving up.
pub const MAX_JITTER_ESCALATIONS: usize = 3;

/// Relative floor applied to eigenvalues, `λ >= EIGEN_FLOOR * λ_max`.
pub const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Matern,
    PoweredExponential,
}

/// Parametric stationary covariance function.
///
/// Both families act on the scaled distance `(‖x - y‖ / l)^s`. The Matérn
/// family is restricted to half-integer smoothness `ν ∈ {1/2, 3/2, 5/2}`,
/// where the Bessel form reduces to an exponential times a polynomial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub variance: f64,
    pub lengthscale: f64,
    pub smoothness: f64,
    pub exponent: f64,
}

impl KernelSpec {
    pub fn matern(smoothness: f64, variance: f64, lengthscale: f64, exponent: f64) -> Result<Self> {
        Self {
            family: KernelFamily::Matern,
            variance,
            lengthscale,
            smoothness,
            exponent,
        }
        .validated()
    }

    pub fn powered_exponential(variance: f64, lengthscale: f64, exponent: f64) -> Result<Self> {
        Self {
            family: KernelFamily::PoweredExponential,
            variance,
            lengthscale,
            smoothness: 0.5,
            exponent,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.variance) || !positive(self.lengthscale) || !positive(self.exponent) {
            return invalid(format!(
                "kernel parameters must be positive and finite: variance={}, lengthscale={}, exponent={}",
                self.variance, self.lengthscale, self.exponent
            ));
        }
        if self.family == KernelFamily::Matern && half_integer_order(self.smoothness).is_none() {
            return invalid(format!(
                "Matérn smoothness must be one of 0.5, 1.5, 2.5 (got {})",
                self.smoothness
            ));
        }
        Ok(self)
    }

    /// Diagonal jitter used when the caller does not supply one.
    pub fn default_jitter(&self) -> f64 {
        1e-8 * self.variance
    }

    /// Covariance as a function of the Euclidean distance between points.
    pub fn eval_distance(&self, dist: f64) -> f64 {
        let scaled = (dist / self.lengthscale).powf(self.exponent);
        match self.family {
            KernelFamily::PoweredExponential => self.variance * (-scaled).exp(),
            KernelFamily::Matern => {
                let z = (2.0 * self.smoothness).sqrt() * scaled;
                let poly = match half_integer_order(self.smoothness) {
                    Some(0) => 1.0,
                    Some(1) => 1.0 + z,
                    _ => 1.0 + z + z * z / 3.0,
                };
                self.variance * poly * (-z).exp()
            }
        }
    }
}

impl Default for KernelSpec {
    /// Matérn with `ν = 1/2, σ² = 1, l = 0.5, s = 1`.
    fn default() -> Self {
        Self {
            family: KernelFamily::Matern,
            variance: 1.0,
            lengthscale: 0.5,
            smoothness: 0.5,
            exponent: 1.0,
        }
    }
}

fn half_integer_order(nu: f64) -> Option<usize> {
    [0.5, 1.5, 2.5]
        .iter()
        .position(|&v| (nu - v).abs() < 1e-12)
}

/// Evaluates `C(x, y)`.
pub fn eval_kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return invalid("kernel evaluated at non-finite coordinates");
    }
    Ok(spec.eval_distance(euclidean(x, y)))
}

fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// A set of points stored row-major in one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    coords: Vec<f64>,
}

impl Grid {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || coords.is_empty() || !coords.len().is_multiple_of(dim) {
            return invalid("grid needs a positive dimension and at least one point");
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return invalid("grid coordinates must be finite");
        }
        Ok(Self { dim, coords })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return invalid("all points must share one dimension");
        }
        Self::new(dim, points.concat())
    }

    /// `n` evenly spaced points on `[a, b]`, endpoints included.
    pub fn uniform_1d(n: usize, a: f64, b: f64) -> Result<Self> {
        match n {
            0 => invalid("grid needs at least one point"),
            1 => Self::new(1, vec![a]),
            _ => {
                let h = (b - a) / (n - 1) as f64;
                Self::new(1, (0..n).map(|i| a + h * i as f64).collect())
            }
        }
    }

    /// Pixel centres of a `rows × cols` image on the unit square, row-major,
    /// with coordinates `(x, y) = ((j + 1/2)/cols, (i + 1/2)/rows)`.
    pub fn pixel_centers(rows: usize, cols: usize) -> Result<Self> {
        let mut coords = Vec::with_capacity(2 * rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                coords.push((j as f64 + 0.5) / cols as f64);
                coords.push((i as f64 + 0.5) / rows as f64);
            }
        }
        Self::new(2, coords)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    /// Subset of points in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.len() {
                return invalid(format!("point index {i} out of range"));
            }
            coords.extend_from_slice(self.point(i));
        }
        Self::new(self.dim, coords)
    }

    /// Concatenation of two grids of equal dimension.
    pub fn concat(&self, other: &Grid) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        Self::new(self.dim, [self.coords.as_slice(), &other.coords].concat())
    }
}

/// Lower Cholesky factor together with the diagonal shift that made it succeed.
#[derive(Debug, Clone)]
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    /// Jitter actually on the diagonal of the factored matrix.
    pub jitter: f64,
}

/// Symmetric positive-(semi)definite matrix with a lazily computed Cholesky factor.
#[derive(Debug, Clone)]
pub struct CovarianceMatrix {
    entries: DMatrix<f64>,
    jitter: f64,
    factor: OnceLock<std::result::Result<Factor, f64>>,
}

impl CovarianceMatrix {
    /// Wraps a symmetric matrix that already includes `jitter` on its diagonal.
    pub fn new(entries: DMatrix<f64>, jitter: f64) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return invalid("covariance must be a non-empty square matrix");
        }
        if !(jitter >= 0.0) {
            return invalid("jitter must be nonnegative");
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return invalid("covariance entries must be finite");
        }
        let d = entries.nrows();
        for i in 0..d {
            for j in 0..i {
                if entries[(i, j)] != entries[(j, i)] {
                    return invalid("covariance matrix must be exactly symmetric");
                }
            }
        }
        Ok(Self {
            entries,
            jitter,
            factor: OnceLock::new(),
        })
    }

    pub fn from_diagonal(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(values)), 0.0)
    }

    pub fn identity(d: usize) -> Self {
        Self::new(DMatrix::identity(d, d), 0.0).expect("identity is valid")
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Jitter requested at construction (already part of `entries`).
    pub fn base_jitter(&self) -> f64 {
        self.jitter
    }

    /// Cholesky factor, escalating the jitter tenfold up to
    /// [`MAX_JITTER_ESCALATIONS`] times on failure.
    pub fn factor(&self) -> Result<&Factor> {
        let res = self.factor.get_or_init(|| {
            let mut extra = 0.0;
            let mut jitter = self.jitter;
            for attempt in 0..=MAX_JITTER_ESCALATIONS {
                if attempt > 0 {
                    let next = jitter * 10.0;
                    extra += next - jitter;
                    jitter = next;
                }
                let mut m = self.entries.clone();
                for i in 0..m.nrows() {
                    m[(i, i)] += extra;
                }
                if let Some(chol) = Cholesky::new(m) {
                    return Ok(Factor { chol, jitter });
                }
            }
            Err(jitter)
        });
        res.as_ref()
            .map_err(|&jitter| Error::NotPositiveDefinite { jitter })
    }

    /// Lower-triangular `L` with `C (+ escalated jitter) = L Lᵀ`.
    pub fn cholesky_l(&self) -> Result<DMatrix<f64>> {
        Ok(self.factor()?.chol.l())
    }

    pub fn log_det(&self) -> Result<f64> {
        let l = self.factor()?.chol.l_dirty();
        Ok(2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>())
    }

    /// Solves `C x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.factor()?.chol.solve(b))
    }

    /// Solves `L w = b` for the lower factor.
    pub fn solve_lower(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let l = self.factor()?.chol.l_dirty();
        l.solve_lower_triangular(b)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))
    }

    /// Computes `L v`.
    pub fn mul_lower(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let l = self.factor()?.chol.l();
        Ok(l * v)
    }

    /// Principal submatrix on the given indices, carrying over the base jitter.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.entries[(rows[i], cols[j])])
    }
}

/// Assembles the Gram matrix `K_ij = C(x_i, x_j) + jitter·1{i=j}`.
pub fn gram(spec: &KernelSpec, points: &Grid, jitter: f64) -> Result<CovarianceMatrix> {
    let spec = spec.validated()?;
    let n = points.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let xi = points.point(i);
        m[(i, i)] = spec.variance + jitter;
        for j in 0..i {
            let v = spec.eval_distance(euclidean(xi, points.point(j)));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    CovarianceMatrix::new(m, jitter)
}

/// Cross-covariance `K_ij = C(a_i, b_j)`.
pub fn cross_gram(spec: &KernelSpec, a: &Grid, b: &Grid) -> Result<DMatrix<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
        spec.eval_distance(euclidean(a.point(i), b.point(j)))
    }))
}

/// Leading eigenpairs of a covariance matrix.
#[derive(Debug, Clone)]
pub struct Eigenpairs {
    /// Eigenvalues, sorted descending and floored at `EIGEN_FLOOR·λ_max`.
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors as columns (`d × L`).
    pub vectors: DMatrix<f64>,
}

impl Eigenpairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `Σ_ℓ λ_ℓ φ_ℓ φ_ℓᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.vectors.nrows(), self.len(), |i, j| {
            self.vectors[(i, j)] * self.values[j]
        });
        scaled * self.vectors.transpose()
    }
}

/// Top-`l_trunc` eigenpairs of `C`, eigenvalues descending.
///
/// Each eigenvector's largest-magnitude entry is made positive so results are
/// reproducible across runs.
pub fn truncated_eig(c: &CovarianceMatrix, l_trunc: usize) -> Result<Eigenpairs> {
    let d = c.dim();
    if l_trunc == 0 || l_trunc > d {
        return invalid(format!("truncation {l_trunc} must lie in 1..={d}"));
    }
    let eig = SymmetricEigen::try_new(c.entries().clone(), f64::EPSILON, 0).ok_or_else(|| {
        Error::Numerical(format!("symmetric eigen-solver did not converge (d = {d})"))
    })?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda_max = eig.eigenvalues[order[0]];
    if !(lambda_max > 0.0) {
        return Err(Error::Numerical(format!(
            "largest eigenvalue {lambda_max:e} is not positive"
        )));
    }
    let floor = EIGEN_FLOOR * lambda_max;
    let values = DVector::from_iterator(
        l_trunc,
        order[..l_trunc].iter().map(|&k| eig.eigenvalues[k].max(floor)),
    );
    let mut vectors = DMatrix::zeros(d, l_trunc);
    for (col, &k) in order[..l_trunc].iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = v.iter().copied().fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        vectors.set_column(col, &(v * sign));
    }
    Ok(Eigenpairs { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// K_ν(z) = ∫_0^∞ exp(-z cosh t) cosh(ν t) dt by the trapezoid rule,
    /// which is spectrally accurate for this integrand.
    fn bessel_k(nu: f64, z: f64) -> f64 {
        let h = 1e-3;
        let n = 40_000;
        let f = |t: f64| (-z * t.cosh()).exp() * (nu * t).cosh();
        let mut s = 0.5 * f(0.0);
        for i in 1..n {
            s += f(i as f64 * h);
        }
        s * h
    }

    fn gamma_fn(x: f64) -> f64 {
        crate::special::ln_gamma(x).exp()
    }

    fn matern_bessel(spec: &KernelSpec, dist: f64) -> f64 {
        let nu = spec.smoothness;
        let z = (2.0 * nu).sqrt() * (dist / spec.lengthscale).powf(spec.exponent);
        spec.variance * 2f64.powf(1.0 - nu) / gamma_fn(nu) * z.powf(nu) * bessel_k(nu, z)
    }

    #[test]
    fn matern_half_at_zero_and_half_unit() {
        let spec = KernelSpec::default();
        assert_eq!(eval_kernel(&spec, &[0.3], &[0.3]).unwrap(), 1.0);
        let v = eval_kernel(&spec, &[0.0], &[0.5]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn half_integer_maternss_match_bessel_form() {
        for &nu in &[0.5, 1.5, 2.5] {
            let spec = KernelSpec::matern(nu, 1.7, 0.4, 1.0).unwrap();
            for &dist in &[0.05, 0.2, 0.5, 1.1] {
                let closed = spec.eval_distance(dist);
                let oracle = matern_bessel(&spec, dist);
                assert!(
                    (closed - oracle).abs() < 1e-9,
                    "nu={nu} dist={dist}: {closed} vs {oracle}"
                );
            }
        }
    }

    #[test]
    fn powered_exponential_decays() {
        let spec = KernelSpec::powered_exponential(2.0, 1.0, 2.0).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..40 {
            let v = spec.eval_distance(k as f64 * 0.25);
            assert!(v <= prev);
            prev = v;
        }
        assert!(spec.eval_distance(1e3) < 1e-300);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(KernelSpec::matern(1.0, 1.0, 1.0, 1.0).is_err());
        assert!(KernelSpec::matern(0.5, 0.0, 1.0, 1.0).is_err());
        assert!(KernelSpec::powered_exponential(1.0, -1.0, 1.0).is_err());
        assert!(eval_kernel(&KernelSpec::default(), &[f64::NAN], &[0.0]).is_err());
    }

    #[test]
    fn single_point_gram() {
        let g = gram(&KernelSpec::default(), &Grid::uniform_1d(1, 0.0, 1.0).unwrap(), 0.25).unwrap();
        assert_eq!(g.entries()[(0, 0)], 1.25);
    }

    #[test]
    fn duplicate_points_need_jitter() {
        let grid = Grid::from_points(&[vec![0.3], vec![0.3]]).unwrap();
        let singular = gram(&KernelSpec::default(), &grid, 0.0).unwrap();
        assert!(matches!(singular.factor(), Err(Error::NotPositiveDefinite { .. })));
        let ok = gram(&KernelSpec::default(), &grid, 1e-6).unwrap();
        assert!(ok.factor().is_ok());
    }

    #[test]
    fn jitter_escalation_recovers_nearly_singular() {
        // rank-one plus a tiny negative perturbation; 1e-9 jitter is not enough
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-8]);
        let c = CovarianceMatrix::new(m, 1e-9).unwrap();
        let f = c.factor().unwrap();
        assert!(f.jitter > 1e-9 && f.jitter <= 1e-6 + 1e-18);
    }

    #[test]
    fn diag_eig() {
        let c = CovarianceMatrix::from_diagonal(&[1.0, 4.0]).unwrap();
        let e = truncated_eig(&c, 1).unwrap();
        assert!((e.values[0] - 4.0).abs() < 1e-14);
        assert!((e.vectors[(1, 0)].abs() - 1.0).abs() < 1e-14);
        assert!(e.vectors[(0, 0)].abs() < 1e-14);
        let id = truncated_eig(&CovarianceMatrix::identity(5), 5).unwrap();
        assert!(id.values.iter().all(|v| (v - 1.0).abs() < 1e-14));
        assert!(truncated_eig(&c, 3).is_err());
    }
}
