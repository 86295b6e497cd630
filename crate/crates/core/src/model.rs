//! Model parameters, conjugate priors, the complete log-likelihood, its
//! sufficient statistics and the closed-form maximisation map `theta_hat(s)`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::kernel::{build_gram_matrix, Geometry};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Relative tolerance used for the strict positive-definiteness test on
/// statistic-space membership.
pub const SPACE_EIG_TOL: f64 = 1e-12;

/// Fixed-point controls for the coupled `(alpha, sigma^2)` equations.
pub const FIXED_POINT_TOL: f64 = 1e-10;
pub const FIXED_POINT_MAX_ITERS: usize = 100;
pub const FIXED_POINT_DAMPING: f64 = 0.5;

/// Scalar hyper-parameters; the covariance matrices come from the geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub sigma0_sq: f64,
    pub a_p: f64,
    pub a_g: f64,
    /// Bound on `|alpha|`, only checked after each update.
    pub r_bound: f64,
    /// Enforce the theoretical `a_g >= 4 k_g + 1` instead of `a_g > 0`.
    pub strict_a_g: bool,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            sigma0_sq: 0.1,
            a_p: 3.0,
            a_g: 0.1,
            r_bound: 1e6,
            strict_a_g: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HyperParams {
    mu_p: DVector<f64>,
    sigma_p: DMatrix<f64>,
    sigma_p_inv: DMatrix<f64>,
    sigma0_sq: f64,
    a_p: f64,
    a_g: f64,
    sigma_g: DMatrix<f64>,
    r_bound: f64,
}

fn spd_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let inv = Cholesky::new(m.clone())
        .ok_or(Error::Singular(what))?
        .inverse();
    Ok(symmetrize(inv))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn check_symmetric(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidParameter(format!("{what} must be square")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidParameter(format!("{what} must be symmetric")));
    }
    Ok(())
}

impl HyperParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mu_p: DVector<f64>,
        sigma_p: DMatrix<f64>,
        sigma0_sq: f64,
        a_p: f64,
        a_g: f64,
        sigma_g: DMatrix<f64>,
        r_bound: f64,
        strict_a_g: bool,
    ) -> Result<Self> {
        check_len("prior template covariance", mu_p.len(), sigma_p.nrows())?;
        check_symmetric(&sigma_p, "Sigma_p")?;
        check_symmetric(&sigma_g, "Sigma_g")?;
        let sigma_p_inv = spd_inverse(&sigma_p, "Sigma_p")?;
        Self::assemble(mu_p, sigma_p, sigma_p_inv, sigma0_sq, a_p, a_g, sigma_g, r_bound, strict_a_g)
    }

    /// `mu_p = 0`, `Sigma_p = M_p^{-1}` and `Sigma_g = diag(M_g^{-1}, M_g^{-1})`
    /// with `M_p`, `M_g` the kernel Gram matrices of the control points.
    pub fn from_geometry(geometry: &Geometry, cfg: &HyperConfig) -> Result<Self> {
        let m_p = build_gram_matrix(geometry.phot_kernel(), geometry.photometric());
        let m_g = build_gram_matrix(geometry.geom_kernel(), geometry.geometric());
        let sigma_p = spd_inverse(&m_p, "photometric Gram matrix")?;
        let m_g_inv = spd_inverse(&m_g, "geometric Gram matrix")?;
        let kg = geometry.k_g();
        let mut sigma_g = DMatrix::zeros(2 * kg, 2 * kg);
        sigma_g.view_mut((0, 0), (kg, kg)).copy_from(&m_g_inv);
        sigma_g.view_mut((kg, kg), (kg, kg)).copy_from(&m_g_inv);
        Self::assemble(
            DVector::zeros(geometry.k_p()),
            sigma_p,
            m_p,
            cfg.sigma0_sq,
            cfg.a_p,
            cfg.a_g,
            sigma_g,
            cfg.r_bound,
            cfg.strict_a_g,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        mu_p: DVector<f64>,
        sigma_p: DMatrix<f64>,
        sigma_p_inv: DMatrix<f64>,
        sigma0_sq: f64,
        a_p: f64,
        a_g: f64,
        sigma_g: DMatrix<f64>,
        r_bound: f64,
        strict_a_g: bool,
    ) -> Result<Self> {
        if !(sigma0_sq.is_finite() && sigma0_sq > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma0_sq must be positive, got {sigma0_sq}"
            )));
        }
        if !(a_p.is_finite() && a_p >= 3.0) {
            return Err(Error::InvalidParameter(format!("a_p must be >= 3, got {a_p}")));
        }
        if !(a_g.is_finite() && a_g > 0.0) {
            return Err(Error::InvalidParameter(format!("a_g must be positive, got {a_g}")));
        }
        if !sigma_g.nrows().is_multiple_of(2) {
            return Err(Error::InvalidParameter(
                "Sigma_g must have even dimension 2 k_g".into(),
            ));
        }
        let kg = sigma_g.nrows() / 2;
        if strict_a_g && a_g < (4 * kg + 1) as f64 {
            return Err(Error::InvalidParameter(format!(
                "a_g = {a_g} violates a_g >= 4 k_g + 1 = {}",
                4 * kg + 1
            )));
        }
        if r_bound.is_nan() || r_bound <= 0.0 {
            return Err(Error::InvalidParameter(format!("R must be positive, got {r_bound}")));
        }
        if Cholesky::new(sigma_g.clone()).is_none() {
            return Err(Error::Singular("Sigma_g"));
        }
        Ok(Self {
            mu_p,
            sigma_p,
            sigma_p_inv,
            sigma0_sq,
            a_p,
            a_g,
            sigma_g,
            r_bound,
        })
    }

    pub fn mu_p(&self) -> &DVector<f64> {
        &self.mu_p
    }
    pub fn sigma_p(&self) -> &DMatrix<f64> {
        &self.sigma_p
    }
    pub fn sigma_p_inv(&self) -> &DMatrix<f64> {
        &self.sigma_p_inv
    }
    pub fn sigma0_sq(&self) -> f64 {
        self.sigma0_sq
    }
    pub fn a_p(&self) -> f64 {
        self.a_p
    }
    pub fn a_g(&self) -> f64 {
        self.a_g
    }
    pub fn sigma_g(&self) -> &DMatrix<f64> {
        &self.sigma_g
    }
    pub fn r_bound(&self) -> f64 {
        self.r_bound
    }
    pub fn k_p(&self) -> usize {
        self.mu_p.len()
    }
    pub fn beta_len(&self) -> usize {
        self.sigma_g.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub alpha: DVector<f64>,
    pub sigma_sq: f64,
    pub gamma_g: DMatrix<f64>,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_sq.is_finite() && self.sigma_sq > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma^2 must be positive, got {}",
                self.sigma_sq
            )));
        }
        if self.alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidParameter("alpha must be finite".into()));
        }
        check_symmetric(&self.gamma_g, "Gamma_g")?;
        if Cholesky::new(self.gamma_g.clone()).is_none() {
            return Err(Error::Singular("Gamma_g"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub s1: DVector<f64>,
    pub s2: DMatrix<f64>,
    pub s3: DMatrix<f64>,
}

impl SufficientStats {
    pub fn zeros(k_p: usize, beta_len: usize) -> Self {
        Self {
            s1: DVector::zeros(k_p),
            s2: DMatrix::zeros(k_p, k_p),
            s3: DMatrix::zeros(beta_len, beta_len),
        }
    }

    /// Contribution of a single image.
    pub fn from_image(beta: &DVector<f64>, design: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        check_len("image length", design.nrows(), y.len())?;
        Ok(Self {
            s1: design.tr_mul(y),
            s2: design.tr_mul(design),
            s3: beta * beta.transpose(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.s1 += &other.s1;
        self.s2 += &other.s2;
        self.s3 += &other.s3;
    }

    /// Euclidean norm of the flattened triple.
    pub fn norm(&self) -> f64 {
        (self.s1.norm_squared() + self.s2.norm_squared() + self.s3.norm_squared()).sqrt()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        ((&self.s1 - &other.s1).norm_squared()
            + (&self.s2 - &other.s2).norm_squared()
            + (&self.s3 - &other.s3).norm_squared())
        .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.s1.iter().chain(self.s2.iter()).chain(self.s3.iter()).all(|x| x.is_finite())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.s1.len(), self.s3.nrows())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSummary {
    pub n: usize,
    pub pixel_count: usize,
    pub total_sq_norm: f64,
}

impl DatasetSummary {
    pub fn from_images(images: &[DVector<f64>]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::EmptyDataset("no images".into()))?;
        let pixel_count = first.len();
        if pixel_count == 0 {
            return Err(Error::EmptyDataset("images have no pixels".into()));
        }
        for y in images {
            check_len("image length", pixel_count, y.len())?;
        }
        Ok(Self {
            n: images.len(),
            pixel_count,
            total_sq_norm: images.iter().map(|y| y.norm_squared()).sum(),
        })
    }
}

/// `log N(y_i; K_p^{beta_i} alpha, sigma^2 Id)`.
pub fn conditional_log_likelihood(
    y: &DVector<f64>,
    beta: &[f64],
    theta: &ModelParams,
    geometry: &Geometry,
) -> Result<f64> {
    check_len("image length", geometry.pixel_count(), y.len())?;
    check_len("template coefficients", geometry.k_p(), theta.alpha.len())?;
    let pred = geometry.render(theta.alpha.as_slice(), beta)?;
    Ok(gaussian_log_density_iso(&(y - pred).norm_squared(), y.len(), theta.sigma_sq))
}

fn gaussian_log_density_iso(residual_sq: &f64, dim: usize, var: f64) -> f64 {
    -0.5 * dim as f64 * (var.ln() + LN_2PI) - residual_sq / (2.0 * var)
}

/// `log N(beta; 0, Gamma_g)`, using a precomputed Cholesky factor.
fn beta_log_prior(beta: &DVector<f64>, chol: &Cholesky<f64, Dyn>, log_det: f64) -> f64 {
    let sol = chol.solve(beta);
    -0.5 * beta.len() as f64 * LN_2PI - 0.5 * log_det - 0.5 * beta.dot(&sol)
}

fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Unnormalised log prior density of `theta` under the conjugate priors.
pub fn prior_log_density(theta: &ModelParams, hyper: &HyperParams) -> Result<f64> {
    check_len("template coefficients", hyper.k_p(), theta.alpha.len())?;
    check_len("deformation covariance", hyper.beta_len(), theta.gamma_g.nrows())?;
    if !(theta.sigma_sq.is_finite() && theta.sigma_sq > 0.0) {
        return Err(Error::InvalidParameter("sigma^2 must be positive".into()));
    }
    let chol = Cholesky::new(theta.gamma_g.clone()).ok_or(Error::Singular("Gamma_g"))?;
    let log_det = chol_log_det(&chol);
    let frob = chol.solve(hyper.sigma_g()).trace();
    let diff = &theta.alpha - hyper.mu_p();
    let quad = diff.dot(&(hyper.sigma_p_inv() * &diff));
    Ok(-0.5 * quad
        + hyper.a_p() * (-hyper.sigma0_sq() / (2.0 * theta.sigma_sq) - 0.5 * theta.sigma_sq.ln())
        + hyper.a_g() * (-0.5 * frob - 0.5 * log_det))
}

/// `log q(y, beta, theta)`: data term, Gaussian deformation prior and the
/// parameter prior.
pub fn complete_log_posterior(
    ys: &[DVector<f64>],
    betas: &[DVector<f64>],
    theta: &ModelParams,
    hyper: &HyperParams,
    geometry: &Geometry,
) -> Result<f64> {
    check_len("deformation count", ys.len(), betas.len())?;
    let chol = Cholesky::new(theta.gamma_g.clone()).ok_or(Error::Singular("Gamma_g"))?;
    let log_det = chol_log_det(&chol);
    let mut total = prior_log_density(theta, hyper)?;
    for (y, beta) in ys.iter().zip(betas) {
        check_len("deformation coefficients", geometry.beta_len(), beta.len())?;
        total += conditional_log_likelihood(y, beta.as_slice(), theta, geometry)?;
        total += beta_log_prior(beta, &chol, log_det);
    }
    Ok(total)
}

/// Statistics summed over images in index order.
pub fn compute_sufficient_stats(
    betas: &[DVector<f64>],
    designs: &[DMatrix<f64>],
    ys: &[DVector<f64>],
) -> Result<SufficientStats> {
    check_len("design matrix count", ys.len(), designs.len())?;
    check_len("deformation count", ys.len(), betas.len())?;
    let first = designs
        .first()
        .ok_or_else(|| Error::EmptyDataset("no images".into()))?;
    let mut acc = SufficientStats::zeros(first.ncols(), betas[0].len());
    for ((beta, design), y) in betas.iter().zip(designs).zip(ys) {
        check_len("design columns", first.ncols(), design.ncols())?;
        check_len("deformation coefficients", acc.s3.nrows(), beta.len())?;
        acc.add_assign(&SufficientStats::from_image(beta, design, y)?);
    }
    Ok(acc)
}

fn min_eigenvalue_strictly_positive(m: DMatrix<f64>) -> bool {
    if m.iter().any(|x| !x.is_finite()) {
        return false;
    }
    let eig = symmetrize(m).symmetric_eigenvalues();
    let scale = eig.amax().max(f64::MIN_POSITIVE);
    eig.min() > SPACE_EIG_TOL * scale
}

/// Membership in the statistic space: `S2 + sigma0^2 Sigma_p^{-1}` and
/// `S3 + a_g Sigma_g` both positive definite.
pub fn stats_in_space(s: &SufficientStats, hyper: &HyperParams) -> bool {
    if s.s1.len() != hyper.k_p() || s.s3.nrows() != hyper.beta_len() || !s.is_finite() {
        return false;
    }
    min_eigenvalue_strictly_positive(&s.s2 + hyper.sigma_p_inv() * hyper.sigma0_sq())
        && min_eigenvalue_strictly_positive(&s.s3 + hyper.sigma_g() * hyper.a_g())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateMode {
    /// Noise variance held at the given value.
    FixedSigma { sigma_sq: f64 },
    /// `(alpha, sigma^2)` solved jointly.
    Full,
}

fn solve_alpha(s: &SufficientStats, hyper: &HyperParams, sigma_sq: f64) -> Result<DVector<f64>> {
    let a = &s.s2 + hyper.sigma_p_inv() * sigma_sq;
    let rhs = &s.s1 + hyper.sigma_p_inv() * hyper.mu_p() * sigma_sq;
    let chol = Cholesky::new(a).ok_or(Error::Singular("S2 + sigma^2 Sigma_p^{-1}"))?;
    Ok(chol.solve(&rhs))
}

fn sigma_sq_given_alpha(
    s: &SufficientStats,
    hyper: &HyperParams,
    summary: &DatasetSummary,
    alpha: &DVector<f64>,
) -> f64 {
    let quad = summary.total_sq_norm + alpha.dot(&(&s.s2 * alpha)) - 2.0 * alpha.dot(&s.s1);
    (quad + hyper.a_p() * hyper.sigma0_sq())
        / ((summary.n * summary.pixel_count) as f64 + hyper.a_p())
}

/// `theta_hat(s)`, with the full-mode fixed point started from the value
/// obtained at `alpha = 0`.
pub fn update_parameters(
    s: &SufficientStats,
    hyper: &HyperParams,
    summary: &DatasetSummary,
    mode: UpdateMode,
) -> Result<ModelParams> {
    update_parameters_from(s, hyper, summary, mode, None)
}

/// `theta_hat(s)` with an explicit starting value for the full-mode fixed point.
pub fn update_parameters_from(
    s: &SufficientStats,
    hyper: &HyperParams,
    summary: &DatasetSummary,
    mode: UpdateMode,
    sigma_sq_start: Option<f64>,
) -> Result<ModelParams> {
    check_len("S1 length", hyper.k_p(), s.s1.len())?;
    check_len("S3 size", hyper.beta_len(), s.s3.nrows())?;
    let gamma_g = symmetrize((&s.s3 + hyper.sigma_g() * hyper.a_g()) / (summary.n as f64 + hyper.a_g()));

    let (alpha, sigma_sq) = match mode {
        UpdateMode::FixedSigma { sigma_sq } => {
            if !(sigma_sq.is_finite() && sigma_sq > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "fixed sigma^2 must be positive, got {sigma_sq}"
                )));
            }
            (solve_alpha(s, hyper, sigma_sq)?, sigma_sq)
        }
        UpdateMode::Full => {
            let mut sigma_sq = match sigma_sq_start {
                Some(v) if v.is_finite() && v > 0.0 => v,
                _ => sigma_sq_given_alpha(s, hyper, summary, &DVector::zeros(hyper.k_p())),
            };
            let mut converged = false;
            let mut change = f64::INFINITY;
            for _ in 0..FIXED_POINT_MAX_ITERS {
                let alpha = solve_alpha(s, hyper, sigma_sq)?;
                let target = sigma_sq_given_alpha(s, hyper, summary, &alpha);
                let next = (1.0 - FIXED_POINT_DAMPING) * sigma_sq + FIXED_POINT_DAMPING * target;
                if !(next.is_finite() && next > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "sigma^2 update left the positive reals: {next}"
                    )));
                }
                change = (next - sigma_sq).abs() / sigma_sq;
                sigma_sq = next;
                if change <= FIXED_POINT_TOL {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::NoConvergence {
                    iterations: FIXED_POINT_MAX_ITERS,
                    last_change: change,
                });
            }
            (solve_alpha(s, hyper, sigma_sq)?, sigma_sq)
        }
    };
    if alpha.norm() >= hyper.r_bound() {
        log::warn!(
            "template coefficient norm {} exceeds the bound R = {}",
            alpha.norm(),
            hyper.r_bound()
        );
    }
    Ok(ModelParams {
        alpha,
        sigma_sq,
        gamma_g,
    })
}

/// Normal density in one dimension, used by tests and the sampler oracle.
pub fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean) * (x - mean) / var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{kernel_eval, ControlPointSet, KernelSpec, PixelGrid};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_hyper(a_g: f64) -> HyperParams {
        HyperParams::new(
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            1.0,
            3.0,
            a_g,
            DMatrix::identity(2, 2),
            1e6,
            false,
        )
        .unwrap()
    }

    fn tiny_geometry() -> Geometry {
        Geometry::new(
            PixelGrid::new(2, 1).unwrap(),
            ControlPointSet::new(vec![[0.1, 0.2]]).unwrap(),
            ControlPointSet::new(vec![[-0.2, 0.0]]).unwrap(),
            KernelSpec::gaussian(0.5).unwrap(),
            KernelSpec::gaussian(0.7).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn hyper_validation() {
        let bad_ap = HyperParams::new(
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            1.0,
            2.5,
            1.0,
            DMatrix::identity(2, 2),
            1e6,
            false,
        );
        assert!(bad_ap.is_err());
        let strict = HyperParams::new(
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            1.0,
            3.0,
            0.1,
            DMatrix::identity(2, 2),
            1e6,
            true,
        );
        assert!(strict.is_err());
        let singular = HyperParams::new(
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            1.0,
            3.0,
            0.1,
            DMatrix::zeros(2, 2),
            1e6,
            false,
        );
        assert!(singular.is_err());
    }

    #[test]
    fn hyper_from_geometry_duplicates_blocks() {
        let g = tiny_geometry();
        let h = HyperParams::from_geometry(&g, &HyperConfig::default()).unwrap();
        assert_eq!(h.sigma_g().nrows(), 2);
        assert_relative_eq!(h.sigma_g()[(0, 0)], 1.0);
        assert_relative_eq!(h.sigma_g()[(1, 1)], 1.0);
        assert_eq!(h.sigma_g()[(0, 1)], 0.0);
    }

    #[test]
    fn likelihood_zero_residual() {
        let g = tiny_geometry();
        let theta = ModelParams {
            alpha: DVector::zeros(1),
            sigma_sq: 0.7,
            gamma_g: DMatrix::identity(2, 2),
        };
        let ll = conditional_log_likelihood(&DVector::zeros(2), &[0.3, -0.1], &theta, &g).unwrap();
        assert_relative_eq!(ll, -(0.7f64.ln() + (2.0 * PI).ln()), epsilon = 1e-14);
    }

    #[test]
    fn likelihood_matches_density_oracle() {
        let g = tiny_geometry();
        let theta = ModelParams {
            alpha: DVector::from_vec(vec![1.3]),
            sigma_sq: 0.4,
            gamma_g: DMatrix::identity(2, 2),
        };
        let beta = [0.15, -0.05];
        let y = DVector::from_vec(vec![0.9, 0.2]);
        // per-pixel univariate normal densities
        let mut expected = 0.0;
        for (u, v) in g.grid().coords().iter().enumerate() {
            let z = [
                kernel_eval(g.geom_kernel(), *v, [-0.2, 0.0]) * beta[0],
                kernel_eval(g.geom_kernel(), *v, [-0.2, 0.0]) * beta[1],
            ];
            let mean = 1.3 * kernel_eval(g.phot_kernel(), [v[0] - z[0], v[1] - z[1]], [0.1, 0.2]);
            expected += normal_log_pdf(y[u], mean, 0.4);
        }
        let ll = conditional_log_likelihood(&y, &beta, &theta, &g).unwrap();
        assert_relative_eq!(ll, expected, epsilon = 1e-12);
        let undeformed = conditional_log_likelihood(&y, &[0.0, 0.0], &theta, &g).unwrap();
        let mut expected0 = 0.0;
        for (u, v) in g.grid().coords().iter().enumerate() {
            expected0 += normal_log_pdf(y[u], 1.3 * kernel_eval(g.phot_kernel(), *v, [0.1, 0.2]), 0.4);
        }
        assert_relative_eq!(undeformed, expected0, epsilon = 1e-12);
    }

    #[test]
    fn complete_posterior_at_origin_is_log_det_terms() {
        let g = tiny_geometry();
        let h = HyperParams::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 2.0),
            0.5,
            3.0,
            0.8,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.5]),
            1e6,
            false,
        )
        .unwrap();
        let gamma = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let theta = ModelParams {
            alpha: DVector::zeros(1),
            sigma_sq: 0.25,
            gamma_g: gamma.clone(),
        };
        let ys = vec![DVector::zeros(2); 3];
        let betas = vec![DVector::zeros(2); 3];
        let v = complete_log_posterior(&ys, &betas, &theta, &h, &g).unwrap();
        let det: f64 = 0.5 * 0.3 - 0.01;
        let inv = DMatrix::from_row_slice(2, 2, &[0.3, -0.1, -0.1, 0.5]) / det;
        let frob = (inv * h.sigma_g()).trace();
        let expected = -3.0 * (0.25f64.ln() + LN_2PI) - 3.0 * LN_2PI - 1.5 * det.ln()
            + 0.8 * (-0.5 * frob - 0.5 * det.ln())
            + 3.0 * (-0.5 / 0.5 - 0.5 * 0.25f64.ln());
        assert_relative_eq!(v, expected, epsilon = 1e-12);
    }

    #[test]
    fn complete_posterior_decomposes_and_matches_hand_value() {
        let g = tiny_geometry();
        let h = HyperParams::new(
            DVector::from_vec(vec![0.3]),
            DMatrix::from_element(1, 1, 2.0),
            0.5,
            4.0,
            1.5,
            DMatrix::identity(2, 2),
            1e6,
            false,
        )
        .unwrap();
        let theta = ModelParams {
            alpha: DVector::from_vec(vec![1.1]),
            sigma_sq: 0.3,
            gamma_g: DMatrix::from_row_slice(2, 2, &[0.4, 0.0, 0.0, 0.2]),
        };
        let y = DVector::from_vec(vec![0.5, 1.0]);
        let beta = DVector::from_vec(vec![0.1, -0.2]);
        let total = complete_log_posterior(std::slice::from_ref(&y), std::slice::from_ref(&beta), &theta, &h, &g).unwrap();
        let ll = conditional_log_likelihood(&y, beta.as_slice(), &theta, &g).unwrap();
        let prior = prior_log_density(&theta, &h).unwrap();
        let beta_prior = normal_log_pdf(0.1, 0.0, 0.4) + normal_log_pdf(-0.2, 0.0, 0.2);
        assert_relative_eq!(total, ll + beta_prior + prior, epsilon = 1e-12);

        // hand evaluation of every scalar term
        let mut resid = 0.0;
        for (u, v) in g.grid().coords().iter().enumerate() {
            let w = kernel_eval(g.geom_kernel(), *v, [-0.2, 0.0]);
            let p = [v[0] - w * 0.1, v[1] + w * 0.2];
            let pred = 1.1 * kernel_eval(g.phot_kernel(), p, [0.1, 0.2]);
            resid += (y[u] - pred).powi(2);
        }
        let hand = -(0.3f64.ln() + LN_2PI) - resid / 0.6
            + (-LN_2PI - 0.5 * (0.08f64).ln() - 0.5 * (0.01 / 0.4 + 0.04 / 0.2))
            + 1.5 * (-0.5 * (1.0 / 0.4 + 1.0 / 0.2) - 0.5 * 0.08f64.ln())
            - 0.5 * (0.8f64 * 0.8) / 2.0
            + 4.0 * (-0.5 / 0.6 - 0.5 * 0.3f64.ln());
        assert_relative_eq!(total, hand, epsilon = 1e-12);
    }

    #[test]
    fn prior_density_terms() {
        let h = HyperParams::new(
            DVector::from_vec(vec![0.5]),
            DMatrix::identity(1, 1),
            1.0,
            3.0,
            2.0,
            DMatrix::identity(2, 2),
            1e6,
            false,
        )
        .unwrap();
        let theta = ModelParams {
            alpha: DVector::from_vec(vec![0.5]),
            sigma_sq: 1.0,
            gamma_g: DMatrix::identity(2, 2),
        };
        // alpha = mu_p, <I, I>_F = 2, log|I| = 0, log sigma^2 = 0
        let v = prior_log_density(&theta, &h).unwrap();
        assert_relative_eq!(v, 3.0 * (-0.5) + 2.0 * (-0.5 * 2.0), epsilon = 1e-14);
    }

    #[test]
    fn prior_density_random_spd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = HyperParams::new(
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            0.7,
            3.5,
            1.3,
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            1e6,
            false,
        )
        .unwrap();
        for _ in 0..20 {
            let a: f64 = rng.random_range(0.2..2.0);
            let c: f64 = rng.random_range(0.2..2.0);
            let b: f64 = rng.random_range(-0.9..0.9) * (a * c).sqrt();
            let theta = ModelParams {
                alpha: DVector::from_vec(vec![rng.random_range(-1.0..1.0)]),
                sigma_sq: rng.random_range(0.1..3.0),
                gamma_g: DMatrix::from_row_slice(2, 2, &[a, b, b, c]),
            };
            let det = a * c - b * b;
            // closed-form 2x2 inverse trace against Sigma_g
            let frob = (c * 2.0 - 2.0 * b * 0.3 + a * 1.0) / det;
            let al = theta.alpha[0];
            let s2 = theta.sigma_sq;
            let expected = -0.5 * al * al + 3.5 * (-0.7 / (2.0 * s2) - 0.5 * s2.ln())
                + 1.3 * (-0.5 * frob - 0.5 * det.ln());
            assert_relative_eq!(prior_log_density(&theta, &h).unwrap(), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn stats_trivial_cases_and_loop_oracle() {
        let g = Geometry::new(
            PixelGrid::new(3, 3).unwrap(),
            ControlPointSet::square_lattice(3, 1.5).unwrap(),
            ControlPointSet::square_lattice(2, 1.0).unwrap(),
            KernelSpec::gaussian(0.5).unwrap(),
            KernelSpec::gaussian(0.6).unwrap(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zero_betas = vec![DVector::zeros(8); 2];
        let zeros = vec![DVector::zeros(9); 2];
        let d0 = g.deformed_design_matrix(&[0.0; 8]).unwrap();
        let s = compute_sufficient_stats(&zero_betas, &[d0.clone(), d0.clone()], &zeros).unwrap();
        assert_eq!(s.s1, DVector::zeros(9));
        assert_eq!(s.s3, DMatrix::zeros(8, 8));
        assert_relative_eq!(s.s2, d0.transpose() * &d0 * 2.0, max_relative = 1e-14);

        let betas: Vec<DVector<f64>> = (0..2)
            .map(|_| DVector::from_fn(8, |_, _| rng.random_range(-0.3..0.3)))
            .collect();
        let ys: Vec<DVector<f64>> = (0..2)
            .map(|_| DVector::from_fn(9, |_, _| rng.random_range(0.0..2.0)))
            .collect();
        let designs: Vec<DMatrix<f64>> = betas
            .iter()
            .map(|b| g.deformed_design_matrix(b.as_slice()).unwrap())
            .collect();
        let s = compute_sufficient_stats(&betas, &designs, &ys).unwrap();
        // naive triple loops
        let mut s1 = vec![0.0; 9];
        let mut s2 = vec![vec![0.0; 9]; 9];
        let mut s3 = vec![vec![0.0; 8]; 8];
        for i in 0..2 {
            for j in 0..9 {
                for u in 0..9 {
                    s1[j] += designs[i][(u, j)] * ys[i][u];
                    for l in 0..9 {
                        s2[j][l] += designs[i][(u, j)] * designs[i][(u, l)];
                    }
                }
            }
            for a in 0..8 {
                for b in 0..8 {
                    s3[a][b] += betas[i][a] * betas[i][b];
                }
            }
        }
        for j in 0..9 {
            assert_relative_eq!(s.s1[j], s1[j], max_relative = 1e-12);
            for l in 0..9 {
                assert_relative_eq!(s.s2[(j, l)], s2[j][l], max_relative = 1e-12);
            }
        }
        for a in 0..8 {
            for b in 0..8 {
                assert_relative_eq!(s.s3[(a, b)], s3[a][b], max_relative = 1e-12, epsilon = 1e-15);
            }
        }
        assert!(compute_sufficient_stats(&betas, &designs[..1], &ys).is_err());
    }

    #[test]
    fn stats_are_additive_over_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 5;
        let betas: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0))).collect();
        let designs: Vec<DMatrix<f64>> = (0..n).map(|_| DMatrix::from_fn(6, 3, |_, _| rng.random_range(0.0..1.0))).collect();
        let ys: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(6, |_, _| rng.random_range(0.0..2.0))).collect();
        let all = compute_sufficient_stats(&betas, &designs, &ys).unwrap();
        let mut parts = compute_sufficient_stats(&betas[..2], &designs[..2], &ys[..2]).unwrap();
        parts.add_assign(&compute_sufficient_stats(&betas[2..], &designs[2..], &ys[2..]).unwrap());
        assert_relative_eq!(all.s1, parts.s1, max_relative = 1e-12);
        assert_relative_eq!(all.s2, parts.s2, max_relative = 1e-12);
        assert_relative_eq!(all.s3, parts.s3, max_relative = 1e-12);
    }

    #[test]
    fn space_membership() {
        let h = scalar_hyper(1.0);
        let s = SufficientStats {
            s1: DVector::from_vec(vec![0.3]),
            s2: DMatrix::from_element(1, 1, 0.2),
            s3: DMatrix::from_row_slice(2, 2, &[0.1, 0.05, 0.05, 0.2]),
        };
        assert!(stats_in_space(&s, &h));
        let neg = SufficientStats {
            s2: h.sigma_p_inv() * (-2.0 * h.sigma0_sq()),
            ..s.clone()
        };
        assert!(!stats_in_space(&neg, &h));
        // S3 + a_g Sigma_g = v v^t has a zero eigenvalue
        let v = DVector::from_vec(vec![1.0, 2.0]);
        let boundary = SufficientStats {
            s3: -h.sigma_g() * h.a_g() + &v * v.transpose(),
            ..s.clone()
        };
        assert!(!stats_in_space(&boundary, &h));
        let nan = SufficientStats {
            s1: DVector::from_vec(vec![f64::NAN]),
            ..s
        };
        assert!(!stats_in_space(&nan, &h));
    }

    #[test]
    fn update_direct_formulas() {
        let summary = DatasetSummary {
            n: 1,
            pixel_count: 1,
            total_sq_norm: 0.0,
        };
        let h = scalar_hyper(1.0);
        let s = SufficientStats {
            s1: DVector::from_vec(vec![1.0]),
            s2: DMatrix::from_element(1, 1, 1.0),
            s3: DMatrix::identity(2, 2),
        };
        let t = update_parameters(&s, &h, &summary, UpdateMode::FixedSigma { sigma_sq: 1.0 }).unwrap();
        assert_relative_eq!(t.alpha[0], 0.5, epsilon = 1e-15);
        assert_eq!(t.gamma_g, DMatrix::identity(2, 2));

        let zero = SufficientStats {
            s1: DVector::zeros(1),
            ..s
        };
        let t = update_parameters(&zero, &h, &summary, UpdateMode::Full).unwrap();
        assert_eq!(t.alpha[0], 0.0);
        assert_relative_eq!(t.sigma_sq, 0.75, epsilon = 1e-12);
    }

    #[test]
    fn full_mode_reaches_the_coupled_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = HyperParams::new(
            DVector::from_vec(vec![0.1, -0.2, 0.0]),
            DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 1.0, 0.1, 0.0, 0.1, 1.0]),
            0.3,
            3.0,
            0.5,
            DMatrix::identity(2, 2),
            1e6,
            false,
        )
        .unwrap();
        let design = DMatrix::from_fn(10, 3, |_, _| rng.random_range(0.0..1.0));
        let y = DVector::from_fn(10, |_, _| rng.random_range(0.0..2.0));
        let beta = DVector::from_vec(vec![0.2, 0.1]);
        let s = SufficientStats::from_image(&beta, &design, &y).unwrap();
        let summary = DatasetSummary::from_images(std::slice::from_ref(&y)).unwrap();
        let t = update_parameters(&s, &h, &summary, UpdateMode::Full).unwrap();
        let alpha = solve_alpha(&s, &h, t.sigma_sq).unwrap();
        assert_relative_eq!(alpha, t.alpha, max_relative = 1e-12);
        let target = sigma_sq_given_alpha(&s, &h, &summary, &t.alpha);
        assert_relative_eq!(target, t.sigma_sq, max_relative = 1e-8);
        let resid = (&y - &design * &t.alpha).norm_squared();
        assert_relative_eq!(
            summary.total_sq_norm + t.alpha.dot(&(&s.s2 * &t.alpha)) - 2.0 * t.alpha.dot(&s.s1),
            resid,
            max_relative = 1e-10
        );
        assert!(resid >= 0.0);
    }

    #[test]
    fn update_rejects_bad_fixed_sigma() {
        let h = scalar_hyper(1.0);
        let s = SufficientStats::zeros(1, 2);
        let summary = DatasetSummary {
            n: 1,
            pixel_count: 1,
            total_sq_norm: 0.0,
        };
        assert!(update_parameters(&s, &h, &summary, UpdateMode::FixedSigma { sigma_sq: 0.0 }).is_err());
    }
}
