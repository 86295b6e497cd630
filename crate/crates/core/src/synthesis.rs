//! Sampling images from a fitted model.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernel::Geometry;
use crate::model::ModelParams;
use crate::rng::{stream, Domain};

/// `beta ~ N(0, Gamma_g)` through the Cholesky factor of `Gamma_g`.
pub fn sample_deformation<R: Rng + ?Sized>(gamma_g: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let chol = Cholesky::new(gamma_g.clone()).ok_or(Error::Singular("Gamma_g"))?;
    let z = DVector::from_fn(gamma_g.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(chol.l() * z)
}

/// Template `alpha` deformed by `beta`, sampled on the grid. Values are not clamped.
pub fn render(alpha: &DVector<f64>, beta: &DVector<f64>, geometry: &Geometry) -> Result<DVector<f64>> {
    geometry.render(alpha.as_slice(), beta.as_slice())
}

/// Coefficients `alpha_j = exp(-|p_j|^2 / (2 width^2))` over the photometric
/// control points: a smooth centred blob, handy as a known template.
pub fn blob_coefficients(geometry: &Geometry, width: f64) -> DVector<f64> {
    let pts = geometry.photometric().points();
    DVector::from_iterator(
        pts.len(),
        pts.iter().map(|p| (-(p[0] * p[0] + p[1] * p[1]) / (2.0 * width * width)).exp()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisRequest {
    pub count: usize,
    /// Also emit the image deformed by `-beta` for every draw.
    pub include_symmetric: bool,
    /// Variance of additive pixel noise.
    pub noise: Option<f64>,
    pub seed: u64,
}

impl Default for SynthesisRequest {
    fn default() -> Self {
        Self {
            count: 20,
            include_symmetric: true,
            noise: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    /// Index of the deformation draw.
    pub draw: usize,
    /// True for the image rendered with `-beta`.
    pub symmetric: bool,
    pub beta: DVector<f64>,
    pub image: DVector<f64>,
}

/// Draws `count` deformations and renders each one (and its mirror when
/// requested). Output order: draw 0, its mirror, draw 1, ...
pub fn synthesize(model: &ModelParams, req: &SynthesisRequest, geometry: &Geometry) -> Result<Vec<SyntheticImage>> {
    if req.count == 0 {
        return Err(Error::InvalidParameter("synthesis count must be at least 1".into()));
    }
    if let Some(v) = req.noise {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidParameter(format!("noise variance must be nonnegative, got {v}")));
        }
    }
    model.validate()?;
    let mut out = Vec::with_capacity(req.count * if req.include_symmetric { 2 } else { 1 });
    for draw in 0..req.count {
        let mut rng = stream(req.seed, Domain::Synthesis, 0, draw as u64);
        let beta = sample_deformation(&model.gamma_g, &mut rng)?;
        let mut variants = vec![(false, beta.clone())];
        if req.include_symmetric {
            variants.push((true, -beta));
        }
        for (symmetric, b) in variants {
            let mut image = render(&model.alpha, &b, geometry)?;
            if let Some(var) = req.noise.filter(|v| *v > 0.0) {
                let mut noise_rng = stream(req.seed, Domain::Noise, 0, (2 * draw + symmetric as usize) as u64);
                let sd = var.sqrt();
                for px in image.iter_mut() {
                    *px += sd * noise_rng.sample::<f64, _>(StandardNormal);
                }
            }
            out.push(SyntheticImage {
                draw,
                symmetric,
                beta: b,
                image,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{ControlPointSet, KernelSpec, PixelGrid};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geometry() -> Geometry {
        Geometry::new(
            PixelGrid::new(8, 8).unwrap(),
            ControlPointSet::square_lattice(5, 1.5).unwrap(),
            ControlPointSet::square_lattice(3, 1.0).unwrap(),
            KernelSpec::gaussian(0.3).unwrap(),
            KernelSpec::gaussian(0.4).unwrap(),
        )
        .unwrap()
    }

    fn model(g: &Geometry) -> ModelParams {
        let alpha = DVector::from_fn(g.k_p(), |i, _| (i as f64 * 0.37).sin().abs());
        ModelParams {
            alpha,
            sigma_sq: 0.1,
            gamma_g: DMatrix::identity(g.beta_len(), g.beta_len()) * 0.01,
        }
    }

    #[test]
    fn degenerate_covariance_gives_tiny_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_deformation(&(DMatrix::identity(4, 4) * 1e-20), &mut rng).unwrap();
        assert!(b.norm() < 1e-8);
        assert!(sample_deformation(&DMatrix::zeros(2, 2), &mut rng).is_err());
    }

    #[test]
    fn identity_covariance_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dim = 3;
        let n = 10_000;
        let mut cov = DMatrix::zeros(dim, dim);
        let mut mean = DVector::zeros(dim);
        let draws: Vec<_> = (0..n)
            .map(|_| sample_deformation(&DMatrix::identity(dim, dim), &mut rng).unwrap())
            .collect();
        for d in &draws {
            mean += d;
        }
        mean /= n as f64;
        for d in &draws {
            let c = d - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        let err = (&cov - DMatrix::identity(dim, dim)).norm() / (dim as f64).sqrt();
        assert!(err < 0.05, "relative Frobenius error {err}");
    }

    #[test]
    fn fixed_seed_repeats_bit_for_bit() {
        let gamma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let a = sample_deformation(&gamma, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_deformation(&gamma, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn render_trivial_cases() {
        let g = geometry();
        let m = model(&g);
        let zero_beta = DVector::zeros(g.beta_len());
        let img = render(&m.alpha, &zero_beta, &g).unwrap();
        for (u, v) in g.grid().coords().iter().enumerate() {
            assert_relative_eq!(img[u], g.eval_template(m.alpha.as_slice(), *v).unwrap(), max_relative = 1e-12);
        }
        let beta = DVector::from_fn(g.beta_len(), |i, _| 0.05 * (i as f64).cos());
        assert_eq!(render(&DVector::zeros(g.k_p()), &beta, &g).unwrap(), DVector::zeros(64));
        let direct = g.deformed_design_matrix(beta.as_slice()).unwrap() * &m.alpha;
        assert_relative_eq!(render(&m.alpha, &beta, &g).unwrap(), direct, max_relative = 1e-12);
    }

    #[test]
    fn symmetric_pairs_use_negated_fields() {
        let g = geometry();
        let m = model(&g);
        let req = SynthesisRequest {
            count: 20,
            include_symmetric: true,
            noise: None,
            seed: 4,
        };
        let imgs = synthesize(&m, &req, &g).unwrap();
        assert_eq!(imgs.len(), 40);
        for pair in imgs.chunks(2) {
            assert_eq!(pair[0].draw, pair[1].draw);
            assert!(!pair[0].symmetric && pair[1].symmetric);
            assert_eq!(pair[1].beta, -&pair[0].beta);
            let f0 = g.displacement_field(pair[0].beta.as_slice()).unwrap();
            let f1 = g.displacement_field(pair[1].beta.as_slice()).unwrap();
            for (a, b) in f0.iter().zip(&f1) {
                assert_eq!(*a, [-b[0], -b[1]]);
            }
            assert_eq!(pair[1].image, render(&m.alpha, &(-&pair[0].beta), &g).unwrap());
        }
        let again = synthesize(&m, &req, &g).unwrap();
        assert_eq!(imgs, again);
    }

    #[test]
    fn noise_is_reproducible_and_shape_preserving() {
        let g = geometry();
        let m = model(&g);
        let clean = SynthesisRequest {
            count: 3,
            include_symmetric: false,
            noise: Some(0.0),
            seed: 8,
        };
        let noisy = SynthesisRequest { noise: Some(0.5), ..clean };
        let a = synthesize(&m, &clean, &g).unwrap();
        let b = synthesize(&m, &noisy, &g).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.beta, y.beta);
            assert_eq!(x.image.len(), y.image.len());
            assert_ne!(x.image, y.image);
            assert_eq!(x.image, render(&m.alpha, &x.beta, &g).unwrap());
        }
        assert_eq!(b, synthesize(&m, &noisy, &g).unwrap());
        assert!(synthesize(&m, &SynthesisRequest { count: 0, ..clean }, &g).is_err());
    }
}
