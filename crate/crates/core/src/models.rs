//! Forward models and Gaussian likelihoods: pointwise regression for time
//! series and the linear (blur) inverse problem for images.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, invalid, Result};

/// Log-likelihood of field values, up to an additive constant.
pub trait Likelihood: Send + Sync {
    /// Number of field values expected.
    fn field_len(&self) -> usize;

    fn log_likelihood(&self, field: &DVector<f64>) -> Result<f64>;

    /// Value and gradient with respect to the field.
    fn log_likelihood_with_grad(&self, field: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
}

/// Likelihood that ignores the data; its posterior is the prior.
#[derive(Debug, Clone, Copy)]
pub struct FlatLikelihood {
    pub len: usize,
}

impl Likelihood for FlatLikelihood {
    fn field_len(&self) -> usize {
        self.len
    }

    fn log_likelihood(&self, field: &DVector<f64>) -> Result<f64> {
        check_len(self.len, field.len())?;
        Ok(0.0)
    }

    fn log_likelihood_with_grad(&self, field: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        check_len(self.len, field.len())?;
        Ok((0.0, DVector::zeros(self.len)))
    }
}

/// Observations `y_i = u(t_i) + ε_i`, `ε_i ~ N(0, σ_i²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    pub inputs: Vec<f64>,
    pub observations: DVector<f64>,
    pub noise_std: DVector<f64>,
}

impl RegressionData {
    pub fn new(inputs: Vec<f64>, observations: DVector<f64>, noise_std: DVector<f64>) -> Result<Self> {
        check_len(inputs.len(), observations.len())?;
        check_len(inputs.len(), noise_std.len())?;
        if noise_std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return invalid("noise standard deviations must be positive");
        }
        Ok(Self {
            inputs,
            observations,
            noise_std,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Restriction to a subset of observations.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.inputs[i]).collect(),
            DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.observations[i])),
            DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.noise_std[i])),
        )
    }
}

/// `-½ Σ ((y_i - u_i)/σ_i)²` and its gradient `(y - u)/σ²`.
pub fn gaussian_loglik(data: &RegressionData, field: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    check_len(data.len(), field.len())?;
    let mut value = 0.0;
    let mut grad = DVector::zeros(field.len());
    for i in 0..field.len() {
        let var = data.noise_std[i] * data.noise_std[i];
        let resid = data.observations[i] - field[i];
        value -= 0.5 * resid * resid / var;
        grad[i] = resid / var;
    }
    Ok((value, grad))
}

impl Likelihood for RegressionData {
    fn field_len(&self) -> usize {
        self.len()
    }

    fn log_likelihood(&self, field: &DVector<f64>) -> Result<f64> {
        Ok(gaussian_loglik(self, field)?.0)
    }

    fn log_likelihood_with_grad(&self, field: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        gaussian_loglik(self, field)
    }
}

/// A linear map `ℝ^d → ℝ^J` with its transpose.
pub trait LinearOperator: Send + Sync + std::fmt::Debug {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn apply(&self, u: &DVector<f64>) -> DVector<f64>;
    fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64>;
}

impl LinearOperator for DMatrix<f64> {
    fn rows(&self) -> usize {
        self.nrows()
    }

    fn cols(&self) -> usize {
        self.ncols()
    }

    fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        self * u
    }

    fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        self.tr_mul(v)
    }
}

/// Motion blur on a `rows × cols` image (row-major vectorization): 2-D
/// convolution with a normalized line-segment point spread function and
/// zero padding outside the image.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionBlur {
    rows: usize,
    cols: usize,
    /// PSF taps `(row offset, col offset, weight)`, weights summing to one.
    taps: Vec<(isize, isize, f64)>,
}

impl MotionBlur {
    pub fn taps(&self) -> &[(isize, isize, f64)] {
        &self.taps
    }

    /// Largest absolute tap offset in either direction.
    pub fn reach(&self) -> usize {
        self.taps
            .iter()
            .map(|&(di, dj, _)| di.unsigned_abs().max(dj.unsigned_abs()))
            .max()
            .unwrap_or(0)
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn convolve(&self, u: &DVector<f64>, sign: isize) -> DVector<f64> {
        let (rows, cols) = (self.rows as isize, self.cols as isize);
        let mut out = DVector::zeros(u.len());
        for i in 0..rows {
            for j in 0..cols {
                let mut acc = 0.0;
                for &(di, dj, w) in &self.taps {
                    let (si, sj) = (i - sign * di, j - sign * dj);
                    if si >= 0 && si < rows && sj >= 0 && sj < cols {
                        acc += w * u[(si * cols + sj) as usize];
                    }
                }
                out[(i * cols + j) as usize] = acc;
            }
        }
        out
    }
}

impl LinearOperator for MotionBlur {
    fn rows(&self) -> usize {
        self.rows * self.cols
    }

    fn cols(&self) -> usize {
        self.rows * self.cols
    }

    fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        self.convolve(u, 1)
    }

    fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        self.convolve(v, -1)
    }
}

/// Builds the motion-blur operator for a line of `blur_length` pixels at
/// `angle` radians (0 is horizontal motion).
///
/// The segment is sampled at `blur_length` unit steps centred on the origin
/// and each sample is rounded to the nearest pixel offset; samples landing on
/// the same offset are merged.
pub fn motion_blur_operator(rows: usize, cols: usize, blur_length: usize, angle: f64) -> Result<MotionBlur> {
    if rows == 0 || cols == 0 {
        return invalid("image dimensions must be positive");
    }
    if blur_length == 0 || blur_length > rows.min(cols) {
        return invalid(format!(
            "blur length {blur_length} must lie in 1..={}",
            rows.min(cols)
        ));
    }
    if !angle.is_finite() {
        return invalid("blur angle must be finite");
    }
    let w = 1.0 / blur_length as f64;
    let centre = 0.5 * (blur_length as f64 - 1.0);
    let mut taps: Vec<(isize, isize, f64)> = Vec::new();
    for k in 0..blur_length {
        let t = k as f64 - centre;
        // image rows grow downwards, so a positive angle moves up
        let di = (-t * angle.sin()).round() as isize;
        let dj = (t * angle.cos()).round() as isize;
        match taps.iter_mut().find(|(a, b, _)| *a == di && *b == dj) {
            Some(tap) => tap.2 += w,
            None => taps.push((di, dj, w)),
        }
    }
    Ok(MotionBlur { rows, cols, taps })
}

/// Keeps a subset of the rows of another operator (`J < d` observations).
#[derive(Debug, Clone)]
pub struct RowSubsample<A> {
    pub inner: A,
    pub rows: Vec<usize>,
}

impl<A: LinearOperator> LinearOperator for RowSubsample<A> {
    fn rows(&self) -> usize {
        self.rows.len()
    }

    fn cols(&self) -> usize {
        self.inner.cols()
    }

    fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        let full = self.inner.apply(u);
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|&r| full[r]))
    }

    fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut full = DVector::zeros(self.inner.rows());
        for (k, &r) in self.rows.iter().enumerate() {
            full[r] += v[k];
        }
        self.inner.apply_transpose(&full)
    }
}

/// `y = A u + ε`, `ε ~ N(0, σ_ε² I)`.
#[derive(Debug, Clone)]
pub struct LinearInverseData {
    pub operator: Arc<dyn LinearOperator>,
    pub observations: DVector<f64>,
    pub noise_std: f64,
}

impl LinearInverseData {
    pub fn new(operator: Arc<dyn LinearOperator>, observations: DVector<f64>, noise_std: f64) -> Result<Self> {
        check_len(operator.rows(), observations.len())?;
        if !(noise_std > 0.0 && noise_std.is_finite()) {
            return invalid("noise standard deviation must be positive");
        }
        Ok(Self {
            operator,
            observations,
            noise_std,
        })
    }
}

/// `-‖y - A u‖² / (2σ_ε²)` and its gradient `Aᵀ(y - A u)/σ_ε²`.
pub fn linear_loglik(data: &LinearInverseData, field: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    check_len(data.operator.cols(), field.len())?;
    let var = data.noise_std * data.noise_std;
    let resid = &data.observations - data.operator.apply(field);
    let value = -0.5 * resid.norm_squared() / var;
    let grad = data.operator.apply_transpose(&resid) / var;
    Ok((value, grad))
}

impl Likelihood for LinearInverseData {
    fn field_len(&self) -> usize {
        self.operator.cols()
    }

    fn log_likelihood(&self, field: &DVector<f64>) -> Result<f64> {
        check_len(self.operator.cols(), field.len())?;
        let resid = &self.observations - self.operator.apply(field);
        Ok(-0.5 * resid.norm_squared() / (self.noise_std * self.noise_std))
    }

    fn log_likelihood_with_grad(&self, field: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        linear_loglik(self, field)
    }
}

/// Norm used to turn a relative noise ratio into a standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseNorm {
    /// Euclidean norm divided by `√N`.
    #[default]
    Rms,
    L2,
    Max,
}

impl NoiseNorm {
    pub fn norm(&self, v: &DVector<f64>) -> f64 {
        match self {
            NoiseNorm::Rms => v.norm() / (v.len() as f64).sqrt(),
            NoiseNorm::L2 => v.norm(),
            NoiseNorm::Max => v.amax(),
        }
    }
}

impl std::str::FromStr for NoiseNorm {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rms" => Ok(Self::Rms),
            "l2" => Ok(Self::L2),
            "max" => Ok(Self::Max),
            other => Err(crate::Error::Parse(format!("unknown noise norm '{other}'"))),
        }
    }
}

impl std::fmt::Display for NoiseNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rms => "rms",
            Self::L2 => "l2",
            Self::Max => "max",
        })
    }
}

/// Adds independent Gaussian noise with per-entry standard deviations
/// `ratio_i · ‖clean‖`; returns the noisy vector and the deviations used.
///
/// A zero ratio returns `clean` unchanged (its deviation is reported as zero).
pub fn synthesize_observation<R: Rng + ?Sized>(
    clean: &DVector<f64>,
    ratios: &[f64],
    norm: NoiseNorm,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if ratios.len() != 1 && ratios.len() != clean.len() {
        return invalid("noise ratios must be a single value or one per entry");
    }
    if ratios.iter().any(|r| !(*r >= 0.0)) {
        return invalid("noise ratios must be nonnegative");
    }
    let scale = norm.norm(clean);
    let std = DVector::from_fn(clean.len(), |i, _| {
        let r = if ratios.len() == 1 { ratios[0] } else { ratios[i] };
        r * scale
    });
    let noisy = DVector::from_fn(clean.len(), |i, _| {
        let e: f64 = StandardNormal.sample(rng);
        clean[i] + std[i] * e
    });
    Ok((noisy, std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn regression_misfit_values() {
        let data = RegressionData::new(vec![0.0], DVector::from_element(1, 0.0), DVector::from_element(1, 1.0)).unwrap();
        let (v, g) = gaussian_loglik(&data, &DVector::from_element(1, 2.0)).unwrap();
        assert_eq!(v, -2.0);
        assert_eq!(g[0], -2.0);
        let (v0, _) = gaussian_loglik(&data, &DVector::from_element(1, 0.0)).unwrap();
        assert_eq!(v0, 0.0);
        assert!(gaussian_loglik(&data, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn regression_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 12;
        let data = RegressionData::new(
            (0..n).map(|i| i as f64).collect(),
            random_vec(n, &mut rng),
            DVector::from_fn(n, |i, _| 0.1 + 0.05 * i as f64),
        )
        .unwrap();
        let u = random_vec(n, &mut rng);
        let (_, g) = gaussian_loglik(&data, &u).unwrap();
        for i in 0..n {
            let h = 1e-6;
            let mut up = u.clone();
            up[i] += h;
            let mut dn = u.clone();
            dn[i] -= h;
            let fd = (gaussian_loglik(&data, &up).unwrap().0 - gaussian_loglik(&data, &dn).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-8 * g[i].abs().max(1.0));
        }
    }

    #[test]
    fn unit_blur_is_identity() {
        let a = motion_blur_operator(6, 7, 1, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_vec(42, &mut rng);
        assert_eq!(a.apply(&u), u);
        assert_eq!(a.apply_transpose(&u), u);
    }

    #[test]
    fn psf_is_normalized() {
        for &(len, angle) in &[(5usize, 0.0), (4, 0.7), (7, std::f64::consts::FRAC_PI_2)] {
            let a = motion_blur_operator(16, 16, len, angle).unwrap();
            let total: f64 = a.taps().iter().map(|t| t.2).sum();
            assert!((total - 1.0).abs() < 1e-14);
        }
        assert!(motion_blur_operator(4, 4, 5, 0.0).is_err());
        assert!(motion_blur_operator(4, 4, 0, 0.0).is_err());
    }

    #[test]
    fn constant_image_preserved_in_interior() {
        let a = motion_blur_operator(10, 10, 5, 0.0).unwrap();
        let out = a.apply(&DVector::from_element(100, 3.0));
        for i in 0..10 {
            for j in 2..8 {
                assert!((out[i * 10 + j] - 3.0).abs() < 1e-14);
            }
        }
        assert!(out[0] < 3.0);
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &angle in &[0.0, 0.5, 2.0] {
            let a = motion_blur_operator(9, 11, 5, angle).unwrap();
            for _ in 0..10 {
                let u = random_vec(99, &mut rng);
                let v = random_vec(99, &mut rng);
                let lhs = a.apply(&u).dot(&v);
                let rhs = u.dot(&a.apply_transpose(&v));
                assert!((lhs - rhs).abs() <= 1e-10 * u.norm() * v.norm());
            }
        }
    }

    #[test]
    fn subsampled_operator_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = RowSubsample {
            inner: motion_blur_operator(8, 8, 3, 0.0).unwrap(),
            rows: (0..64).step_by(3).collect(),
        };
        let u = random_vec(64, &mut rng);
        let v = random_vec(a.rows(), &mut rng);
        assert!((a.apply(&u).dot(&v) - u.dot(&a.apply_transpose(&v))).abs() < 1e-12);
    }

    #[test]
    fn noise_scaling_divides_misfit() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let op: Arc<dyn LinearOperator> = Arc::new(motion_blur_operator(6, 6, 3, 0.0).unwrap());
        let y = random_vec(36, &mut rng);
        let u = random_vec(36, &mut rng);
        let d1 = LinearInverseData::new(op.clone(), y.clone(), 0.2).unwrap();
        let d10 = LinearInverseData::new(op, y, 2.0).unwrap();
        let (a, _) = linear_loglik(&d1, &u).unwrap();
        let (b, _) = linear_loglik(&d10, &u).unwrap();
        assert!((a / b - 100.0).abs() < 1e-10);
    }

    #[test]
    fn exact_fit_has_zero_misfit() {
        let op = motion_blur_operator(5, 5, 3, 0.0).unwrap();
        let u = DVector::from_fn(25, |i, _| i as f64);
        let y = op.apply(&u);
        let data = LinearInverseData::new(Arc::new(op), y, 0.1).unwrap();
        assert_eq!(linear_loglik(&data, &u).unwrap().0, 0.0);
    }

    #[test]
    fn zero_ratio_is_noise_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let clean = random_vec(30, &mut rng);
        let (y, std) = synthesize_observation(&clean, &[0.0], NoiseNorm::Rms, &mut rng).unwrap();
        assert_eq!(y, clean);
        assert!(std.iter().all(|s| *s == 0.0));
    }
}
