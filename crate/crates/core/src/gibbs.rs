//! Hybrid Gibbs sampler for the deformation coefficients.
//!
//! Each coordinate `j` of each `beta_i` is updated by a Metropolis-Hastings
//! step whose proposal is the Gaussian conditional of `beta^j` given the
//! other coordinates under `N(0, Gamma_g)`. With that proposal the prior
//! cancels from the Hastings ratio, leaving only the change in the data
//! residual. Coordinates are visited in ascending order (x-block, then
//! y-block); images are independent given `theta` and are scanned in
//! parallel, each with its own random stream.
//!
//! Full-vector proposals drawn from the prior were rejected for this
//! sampler: in dimension `2 k_g` almost every such candidate is refused.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::kernel::{Geometry, Point};
use crate::model::ModelParams;
use crate::rng::{stream, Domain};

/// Markov chain state of one image: the coefficients plus cached quantities
/// that depend on them (displacement field, deformed template, residual).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageChain {
    beta: DVector<f64>,
    field: Vec<Point>,
    prediction: Vec<f64>,
    residual_sq: f64,
}

impl ImageChain {
    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn field(&self) -> &[Point] {
        &self.field
    }

    pub fn prediction(&self) -> &[f64] {
        &self.prediction
    }

    pub fn residual_sq(&self) -> f64 {
        self.residual_sq
    }

    fn build(beta: DVector<f64>, y: &DVector<f64>, alpha: &[f64], geometry: &Geometry) -> Result<Self> {
        let field = geometry.displacement_field(beta.as_slice())?;
        let mut chain = Self {
            beta,
            field,
            prediction: vec![0.0; geometry.pixel_count()],
            residual_sq: 0.0,
        };
        chain.refresh(y, alpha, geometry);
        Ok(chain)
    }

    fn refresh(&mut self, y: &DVector<f64>, alpha: &[f64], geometry: &Geometry) {
        let mut ws = geometry.workspace();
        geometry.render_field(alpha, &self.field, &mut self.prediction, &mut ws);
        self.residual_sq = residual_sq(y.as_slice(), &self.prediction);
    }
}

fn residual_sq(y: &[f64], pred: &[f64]) -> f64 {
    y.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    chains: Vec<ImageChain>,
}

impl ChainState {
    pub fn new(
        betas: Vec<DVector<f64>>,
        ys: &[DVector<f64>],
        alpha: &DVector<f64>,
        geometry: &Geometry,
    ) -> Result<Self> {
        check_len("deformation count", ys.len(), betas.len())?;
        check_len("template coefficients", geometry.k_p(), alpha.len())?;
        let chains = betas
            .into_iter()
            .zip(ys)
            .map(|(b, y)| {
                check_len("deformation coefficients", geometry.beta_len(), b.len())?;
                check_len("image length", geometry.pixel_count(), y.len())?;
                ImageChain::build(b, y, alpha.as_slice(), geometry)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { chains })
    }

    /// All `beta_i = 0`.
    pub fn zeros(ys: &[DVector<f64>], alpha: &DVector<f64>, geometry: &Geometry) -> Result<Self> {
        Self::new(vec![DVector::zeros(geometry.beta_len()); ys.len()], ys, alpha, geometry)
    }

    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }

    pub fn chains(&self) -> &[ImageChain] {
        &self.chains
    }

    pub fn betas(&self) -> Vec<DVector<f64>> {
        self.chains.iter().map(|c| c.beta.clone()).collect()
    }

    /// Recomputes the template-dependent caches for a new `alpha`.
    pub fn refresh(&mut self, ys: &[DVector<f64>], alpha: &DVector<f64>, geometry: &Geometry) {
        self.chains
            .par_iter_mut()
            .zip(ys.par_iter())
            .for_each(|(c, y)| c.refresh(y, alpha.as_slice(), geometry));
    }

    /// Largest relative deviation between the caches and a from-scratch
    /// recomputation of field, prediction and residual.
    pub fn cache_deviation(&self, ys: &[DVector<f64>], alpha: &DVector<f64>, geometry: &Geometry) -> Result<f64> {
        let mut worst: f64 = 0.0;
        let rel = |a: f64, b: f64| (a - b).abs() / (1.0 + b.abs());
        for (c, y) in self.chains.iter().zip(ys) {
            let fresh = ImageChain::build(c.beta.clone(), y, alpha.as_slice(), geometry)?;
            for (a, b) in c.field.iter().zip(&fresh.field) {
                worst = worst.max(rel(a[0], b[0])).max(rel(a[1], b[1]));
            }
            for (a, b) in c.prediction.iter().zip(&fresh.prediction) {
                worst = worst.max(rel(*a, *b));
            }
            worst = worst.max(rel(c.residual_sq, fresh.residual_sq));
        }
        Ok(worst)
    }
}

/// Acceptance counts of one or more scans.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScanDiagnostics {
    pub accepted_per_coord: Vec<u64>,
    pub proposed_per_coord: Vec<u64>,
    pub accepted_per_image: Vec<u64>,
    pub proposed_per_image: Vec<u64>,
}

impl ScanDiagnostics {
    fn new(n: usize, dim: usize) -> Self {
        Self {
            accepted_per_coord: vec![0; dim],
            proposed_per_coord: vec![0; dim],
            accepted_per_image: vec![0; n],
            proposed_per_image: vec![0; n],
        }
    }

    pub fn total_proposed(&self) -> u64 {
        self.proposed_per_coord.iter().sum()
    }

    pub fn total_accepted(&self) -> u64 {
        self.accepted_per_coord.iter().sum()
    }

    pub fn mean_acceptance(&self) -> f64 {
        let p = self.total_proposed();
        if p == 0 {
            0.0
        } else {
            self.total_accepted() as f64 / p as f64
        }
    }

    /// Acceptance rates of the x-block and y-block coordinates.
    pub fn block_acceptance(&self) -> (f64, f64) {
        let kg = self.accepted_per_coord.len() / 2;
        let rate = |r: std::ops::Range<usize>| {
            let a: u64 = self.accepted_per_coord[r.clone()].iter().sum();
            let p: u64 = self.proposed_per_coord[r].iter().sum();
            if p == 0 {
                0.0
            } else {
                a as f64 / p as f64
            }
        };
        (rate(0..kg), rate(kg..2 * kg))
    }
}

/// Mean and variance of the Gaussian conditional of `beta^j` given the other
/// coordinates under `N(0, Gamma_g)`.
pub fn conditional_proposal_params(beta: &[f64], j: usize, gamma_g: &DMatrix<f64>) -> Result<(f64, f64)> {
    check_len("deformation coefficients", gamma_g.nrows(), beta.len())?;
    if j >= beta.len() {
        return Err(Error::InvalidParameter(format!(
            "coordinate {j} out of range for dimension {}",
            beta.len()
        )));
    }
    let precision = precision_matrix(gamma_g)?;
    let pb: f64 = precision.row(j).iter().zip(beta).map(|(p, b)| p * b).sum();
    Ok(proposal_from_precision(beta[j], pb, precision[(j, j)]))
}

#[inline]
fn proposal_from_precision(beta_j: f64, pb_j: f64, p_jj: f64) -> (f64, f64) {
    (beta_j - pb_j / p_jj, 1.0 / p_jj)
}

pub fn precision_matrix(gamma_g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = Cholesky::new(gamma_g.clone())
        .ok_or(Error::Singular("Gamma_g"))?
        .inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// `log r_j`: half the drop in squared residual when coordinate `j` of
/// `beta` moves to `b`, divided by `sigma^2`.
pub fn acceptance_log_ratio(
    y: &DVector<f64>,
    beta: &[f64],
    j: usize,
    b: f64,
    theta: &ModelParams,
    geometry: &Geometry,
) -> Result<f64> {
    check_len("image length", geometry.pixel_count(), y.len())?;
    if j >= beta.len() {
        return Err(Error::InvalidParameter(format!("coordinate {j} out of range")));
    }
    let current = geometry.render(theta.alpha.as_slice(), beta)?;
    let mut moved = beta.to_vec();
    moved[j] = b;
    let proposed = geometry.render(theta.alpha.as_slice(), &moved)?;
    Ok(((y - current).norm_squared() - (y - proposed).norm_squared()) / (2.0 * theta.sigma_sq))
}

/// Random stream address for one scan of the whole chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanKey {
    pub seed: u64,
    pub epoch: u64,
}

#[derive(Clone, Copy)]
pub struct ScanOptions<'a> {
    /// Full sweeps over all coordinates per call.
    pub sweeps: usize,
    /// Transforms each log acceptance ratio before the accept/reject draw.
    pub hook: Option<&'a (dyn Fn(f64) -> f64 + Sync)>,
}

impl Default for ScanOptions<'_> {
    fn default() -> Self {
        Self { sweeps: 1, hook: None }
    }
}

/// One full scan `Pi_theta` of every image chain.
pub fn gibbs_scan(
    state: &mut ChainState,
    ys: &[DVector<f64>],
    theta: &ModelParams,
    geometry: &Geometry,
    key: ScanKey,
) -> Result<ScanDiagnostics> {
    gibbs_scan_with(state, ys, theta, geometry, key, ScanOptions::default())
}

pub fn gibbs_scan_with(
    state: &mut ChainState,
    ys: &[DVector<f64>],
    theta: &ModelParams,
    geometry: &Geometry,
    key: ScanKey,
    opts: ScanOptions<'_>,
) -> Result<ScanDiagnostics> {
    check_len("image count", state.len(), ys.len())?;
    check_len("template coefficients", geometry.k_p(), theta.alpha.len())?;
    check_len("deformation covariance", geometry.beta_len(), theta.gamma_g.nrows())?;
    if !(theta.sigma_sq.is_finite() && theta.sigma_sq > 0.0) {
        return Err(Error::InvalidParameter("sigma^2 must be positive".into()));
    }
    let precision = precision_matrix(&theta.gamma_g)?;
    let dim = geometry.beta_len();
    let per_image: Vec<Vec<u64>> = state
        .chains
        .par_iter_mut()
        .zip(ys.par_iter())
        .enumerate()
        .map(|(i, (chain, y))| {
            chain.refresh(y, theta.alpha.as_slice(), geometry);
            let mut rng = stream(key.seed, Domain::Gibbs, key.epoch, i as u64);
            scan_image(chain, y.as_slice(), theta, &precision, geometry, &mut rng, &opts)
        })
        .collect();

    let mut diag = ScanDiagnostics::new(state.len(), dim);
    for (i, acc) in per_image.iter().enumerate() {
        for (j, a) in acc.iter().enumerate() {
            diag.accepted_per_coord[j] += a;
            diag.proposed_per_coord[j] += opts.sweeps as u64;
        }
        diag.accepted_per_image[i] = acc.iter().sum();
        diag.proposed_per_image[i] = (opts.sweeps * dim) as u64;
    }
    Ok(diag)
}

fn scan_image<R: Rng>(
    chain: &mut ImageChain,
    y: &[f64],
    theta: &ModelParams,
    precision: &DMatrix<f64>,
    geometry: &Geometry,
    rng: &mut R,
    opts: &ScanOptions<'_>,
) -> Vec<u64> {
    let kg = geometry.k_g();
    let dim = 2 * kg;
    let npix = geometry.pixel_count();
    let alpha = theta.alpha.as_slice();
    let two_sigma_sq = 2.0 * theta.sigma_sq;
    let coords = geometry.grid().coords();
    let mut ws = geometry.workspace();
    let mut accepted = vec![0u64; dim];
    let mut pb = precision * &chain.beta;
    let mut axis_values = vec![0.0; npix];
    let mut candidate = vec![0.0; npix];

    for _ in 0..opts.sweeps {
        for j in 0..dim {
            let (mean, var) = proposal_from_precision(chain.beta[j], pb[j], precision[(j, j)]);
            let z: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random();
            let b = mean + var.sqrt() * z;
            let delta = b - chain.beta[j];
            let axis = j / kg;
            let landmark = j % kg;

            let mut res_new = 0.0;
            for p in 0..npix {
                let mut d = chain.field[p];
                d[axis] += geometry.geom_weight(p, landmark) * delta;
                axis_values[p] = d[axis];
                let v = coords[p];
                let pred = geometry.template_value(alpha, [v[0] - d[0], v[1] - d[1]], &mut ws);
                candidate[p] = pred;
                res_new += (y[p] - pred) * (y[p] - pred);
            }
            let mut log_r = (chain.residual_sq - res_new) / two_sigma_sq;
            if let Some(hook) = opts.hook {
                log_r = hook(log_r);
            }
            if log_r >= 0.0 || u < log_r.exp() {
                chain.beta[j] = b;
                for (acc, p) in pb.iter_mut().zip(precision.column(j).iter()) {
                    *acc += p * delta;
                }
                for (f, a) in chain.field.iter_mut().zip(&axis_values) {
                    f[axis] = *a;
                }
                std::mem::swap(&mut chain.prediction, &mut candidate);
                chain.residual_sq = res_new;
                accepted[j] += 1;
            }
        }
    }
    accepted
}
