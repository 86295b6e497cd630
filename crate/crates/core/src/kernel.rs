//! Kernels, control-point sets and pixel grids, and the evaluation of
//! templates, deformation fields and deformed design matrices built on them.
//!
//! Templates and deformations are finite kernel expansions
//!
//! ```text
//! I_alpha(v) = sum_j K_p(v, p_{p,j}) alpha_j
//! z_beta(v)  = sum_j K_g(v, p_{g,j}) (beta_j, beta_{k_g + j})
//! ```
//!
//! so a coefficient vector `beta` of length `2 k_g` stores all x-weights first
//! and then all y-weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// A point of the plane.
pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `exp(-|x - y|^2 / (2 h^2))`
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        let spec = Self {
            kind: KernelKind::Gaussian,
            bandwidth,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kernel bandwidth must be positive and finite, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, x: Point, y: Point) -> f64 {
        match self.kind {
            KernelKind::Gaussian => {
                let dx = x[0] - y[0];
                let dy = x[1] - y[1];
                (-(dx * dx + dy * dy) / (2.0 * self.bandwidth * self.bandwidth)).exp()
            }
        }
    }

    /// One axis factor of a product-separable kernel.
    #[inline]
    fn axis_factor(&self, d: f64) -> f64 {
        match self.kind {
            KernelKind::Gaussian => (-(d * d) / (2.0 * self.bandwidth * self.bandwidth)).exp(),
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: Point, y: Point) -> f64 {
    spec.eval(x, y)
}

/// Axis coordinates of a rectangular lattice; point `iy * xs.len() + ix` sits
/// at `(xs[ix], ys[iy])`.
#[derive(Debug, Clone, PartialEq)]
struct Lattice {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlPointSet {
    points: Vec<Point>,
    lattice: Option<Lattice>,
}

impl ControlPointSet {
    /// Arbitrary point list. Points must be distinct and finite.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidParameter(
                "control point set must be nonempty".into(),
            ));
        }
        if points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::InvalidParameter(
                "control points must be finite".into(),
            ));
        }
        for (i, p) in points.iter().enumerate() {
            if points[..i].contains(p) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate control point ({}, {})",
                    p[0], p[1]
                )));
            }
        }
        Ok(Self {
            points,
            lattice: None,
        })
    }

    /// Equi-spaced square lattice with `per_axis` points per axis covering
    /// `[-half_extent, half_extent]^2`, endpoints included. A single point per
    /// axis sits at the origin.
    pub fn square_lattice(per_axis: usize, half_extent: f64) -> Result<Self> {
        if per_axis == 0 {
            return Err(Error::InvalidParameter(
                "lattice needs at least one point per axis".into(),
            ));
        }
        if !(half_extent.is_finite() && half_extent > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lattice half extent must be positive, got {half_extent}"
            )));
        }
        let axis: Vec<f64> = if per_axis == 1 {
            vec![0.0]
        } else {
            (0..per_axis)
                .map(|i| -half_extent + 2.0 * half_extent * i as f64 / (per_axis - 1) as f64)
                .collect()
        };
        let mut points = Vec::with_capacity(per_axis * per_axis);
        for &y in &axis {
            for &x in &axis {
                points.push([x, y]);
            }
        }
        Ok(Self {
            points,
            lattice: Some(Lattice {
                xs: axis.clone(),
                ys: axis,
            }),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }
}

/// Pixel grid on `D = [-1, 1]^2`. Pixel `u = row * width + col` sits at the
/// center of its cell: `x = -1 + (2 col + 1) / width`, `y = -1 + (2 row + 1) / height`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    width: usize,
    height: usize,
    coords: Vec<Point>,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter(format!(
                "pixel grid must be nonempty, got {width}x{height}"
            )));
        }
        let mut coords = Vec::with_capacity(width * height);
        for row in 0..height {
            let y = -1.0 + (2 * row + 1) as f64 / height as f64;
            for col in 0..width {
                let x = -1.0 + (2 * col + 1) as f64 / width as f64;
                coords.push([x, y]);
            }
        }
        Ok(Self {
            width,
            height,
            coords,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }
}

pub fn build_gram_matrix(spec: &KernelSpec, pts: &ControlPointSet) -> DMatrix<f64> {
    let p = pts.points();
    let k = p.len();
    let mut m = DMatrix::zeros(k, k);
    for a in 0..k {
        m[(a, a)] = spec.eval(p[a], p[a]);
        for b in 0..a {
            let v = spec.eval(p[a], p[b]);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    m
}

/// Displacement `z_beta(v)` of a deformation expansion.
pub fn eval_deformation(
    beta: &[f64],
    geom_pts: &ControlPointSet,
    spec: &KernelSpec,
    v: Point,
) -> Result<Point> {
    let kg = geom_pts.len();
    check_len("deformation coefficients", 2 * kg, beta.len())?;
    let mut z = [0.0; 2];
    for (j, p) in geom_pts.points().iter().enumerate() {
        let w = spec.eval(v, *p);
        z[0] += w * beta[j];
        z[1] += w * beta[kg + j];
    }
    Ok(z)
}

/// Template gray level `I_alpha(v)`.
pub fn eval_template(
    alpha: &[f64],
    phot_pts: &ControlPointSet,
    spec: &KernelSpec,
    v: Point,
) -> Result<f64> {
    check_len("template coefficients", phot_pts.len(), alpha.len())?;
    Ok(phot_pts
        .points()
        .iter()
        .zip(alpha)
        .map(|(p, a)| spec.eval(v, *p) * a)
        .sum())
}

/// Scratch buffers for the separable evaluation path.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    ex: Vec<f64>,
    ey: Vec<f64>,
}

/// Grid, control points and kernels shared by every image of a dataset.
#[derive(Debug, Clone)]
pub struct Geometry {
    grid: PixelGrid,
    photometric: ControlPointSet,
    geometric: ControlPointSet,
    phot_kernel: KernelSpec,
    geom_kernel: KernelSpec,
    /// `K_g(v_u, p_{g,j})`, `|Lambda| x k_g`, row-major by pixel.
    geom_weights: Vec<f64>,
}

impl Geometry {
    pub fn new(
        grid: PixelGrid,
        photometric: ControlPointSet,
        geometric: ControlPointSet,
        phot_kernel: KernelSpec,
        geom_kernel: KernelSpec,
    ) -> Result<Self> {
        phot_kernel.validate()?;
        geom_kernel.validate()?;
        let kg = geometric.len();
        let mut geom_weights = Vec::with_capacity(grid.len() * kg);
        for v in grid.coords() {
            for p in geometric.points() {
                geom_weights.push(geom_kernel.eval(*v, *p));
            }
        }
        Ok(Self {
            grid,
            photometric,
            geometric,
            phot_kernel,
            geom_kernel,
            geom_weights,
        })
    }

    pub fn grid(&self) -> &PixelGrid {
        &self.grid
    }

    pub fn photometric(&self) -> &ControlPointSet {
        &self.photometric
    }

    pub fn geometric(&self) -> &ControlPointSet {
        &self.geometric
    }

    pub fn phot_kernel(&self) -> &KernelSpec {
        &self.phot_kernel
    }

    pub fn geom_kernel(&self) -> &KernelSpec {
        &self.geom_kernel
    }

    pub fn k_p(&self) -> usize {
        self.photometric.len()
    }

    pub fn k_g(&self) -> usize {
        self.geometric.len()
    }

    pub fn beta_len(&self) -> usize {
        2 * self.geometric.len()
    }

    pub fn pixel_count(&self) -> usize {
        self.grid.len()
    }

    /// `K_g(v_u, p_{g,j})`.
    #[inline]
    pub fn geom_weight(&self, u: usize, j: usize) -> f64 {
        self.geom_weights[u * self.geometric.len() + j]
    }

    pub fn workspace(&self) -> Workspace {
        match &self.photometric.lattice {
            Some(l) => Workspace {
                ex: vec![0.0; l.xs.len()],
                ey: vec![0.0; l.ys.len()],
            },
            None => Workspace::default(),
        }
    }

    pub fn eval_deformation(&self, beta: &[f64], v: Point) -> Result<Point> {
        eval_deformation(beta, &self.geometric, &self.geom_kernel, v)
    }

    pub fn eval_template(&self, alpha: &[f64], v: Point) -> Result<f64> {
        check_len("template coefficients", self.k_p(), alpha.len())?;
        let mut ws = self.workspace();
        Ok(self.template_value(alpha, v, &mut ws))
    }

    /// Displacement at every pixel of the grid.
    pub fn displacement_field(&self, beta: &[f64]) -> Result<Vec<Point>> {
        let kg = self.k_g();
        check_len("deformation coefficients", 2 * kg, beta.len())?;
        let (bx, by) = beta.split_at(kg);
        Ok(self
            .geom_weights
            .chunks_exact(kg)
            .map(|w| {
                let mut z = [0.0; 2];
                for j in 0..kg {
                    z[0] += w[j] * bx[j];
                    z[1] += w[j] * by[j];
                }
                z
            })
            .collect())
    }

    /// Template value at an arbitrary point; `alpha` length is not checked.
    #[inline]
    pub(crate) fn template_value(&self, alpha: &[f64], v: Point, ws: &mut Workspace) -> f64 {
        match &self.photometric.lattice {
            Some(l) => {
                for (e, x) in ws.ex.iter_mut().zip(&l.xs) {
                    *e = self.phot_kernel.axis_factor(v[0] - x);
                }
                for (e, y) in ws.ey.iter_mut().zip(&l.ys) {
                    *e = self.phot_kernel.axis_factor(v[1] - y);
                }
                let nx = l.xs.len();
                let mut acc = 0.0;
                for (row, ey) in alpha.chunks_exact(nx).zip(&ws.ey) {
                    let inner: f64 = row.iter().zip(&ws.ex).map(|(a, e)| a * e).sum();
                    acc += ey * inner;
                }
                acc
            }
            None => self
                .photometric
                .points()
                .iter()
                .zip(alpha)
                .map(|(p, a)| self.phot_kernel.eval(v, *p) * a)
                .sum(),
        }
    }

    /// Fills `out[j] = K_p(v, p_{p,j})`.
    pub(crate) fn design_row(&self, v: Point, out: &mut [f64], ws: &mut Workspace) {
        match &self.photometric.lattice {
            Some(l) => {
                for (e, x) in ws.ex.iter_mut().zip(&l.xs) {
                    *e = self.phot_kernel.axis_factor(v[0] - x);
                }
                for (e, y) in ws.ey.iter_mut().zip(&l.ys) {
                    *e = self.phot_kernel.axis_factor(v[1] - y);
                }
                let nx = l.xs.len();
                for (row, ey) in out.chunks_exact_mut(nx).zip(&ws.ey) {
                    for (o, ex) in row.iter_mut().zip(&ws.ex) {
                        *o = ey * ex;
                    }
                }
            }
            None => {
                for (o, p) in out.iter_mut().zip(self.photometric.points()) {
                    *o = self.phot_kernel.eval(v, *p);
                }
            }
        }
    }

    /// `K_p^beta(u, j) = K_p(v_u - z_beta(v_u), p_{p,j})`, `|Lambda| x k_p`.
    pub fn deformed_design_matrix(&self, beta: &[f64]) -> Result<DMatrix<f64>> {
        let z = self.displacement_field(beta)?;
        Ok(self.design_matrix_from_field(&z))
    }

    pub(crate) fn design_matrix_from_field(&self, z: &[Point]) -> DMatrix<f64> {
        let kp = self.k_p();
        let n = self.pixel_count();
        let mut ws = self.workspace();
        // filled row by row in a row-major buffer, then transposed into nalgebra's layout
        let mut rows = vec![0.0; n * kp];
        for ((v, d), out) in self
            .grid
            .coords()
            .iter()
            .zip(z)
            .zip(rows.chunks_exact_mut(kp))
        {
            self.design_row([v[0] - d[0], v[1] - d[1]], out, &mut ws);
        }
        DMatrix::from_row_slice(n, kp, &rows)
    }

    /// Deformed template `K_p^beta alpha` sampled on the grid, given a precomputed
    /// displacement field.
    pub(crate) fn render_field(&self, alpha: &[f64], z: &[Point], out: &mut [f64], ws: &mut Workspace) {
        for ((o, v), d) in out.iter_mut().zip(self.grid.coords()).zip(z) {
            *o = self.template_value(alpha, [v[0] - d[0], v[1] - d[1]], ws);
        }
    }

    /// Deformed template sampled on the grid.
    pub fn render(&self, alpha: &[f64], beta: &[f64]) -> Result<DVector<f64>> {
        check_len("template coefficients", self.k_p(), alpha.len())?;
        let z = self.displacement_field(beta)?;
        let mut out = vec![0.0; self.pixel_count()];
        let mut ws = self.workspace();
        self.render_field(alpha, &z, &mut out, &mut ws);
        Ok(DVector::from_vec(out))
    }
}

/// Free-function form of [`Geometry::deformed_design_matrix`].
pub fn build_deformed_design_matrix(beta: &[f64], geometry: &Geometry) -> Result<DMatrix<f64>> {
    geometry.deformed_design_matrix(beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_geometry(lattice: bool) -> Geometry {
        let grid = PixelGrid::new(5, 4).unwrap();
        let phot = if lattice {
            ControlPointSet::square_lattice(4, 1.5).unwrap()
        } else {
            let l = ControlPointSet::square_lattice(4, 1.5).unwrap();
            ControlPointSet::new(l.points().to_vec()).unwrap()
        };
        let geom = ControlPointSet::square_lattice(3, 1.0).unwrap();
        Geometry::new(
            grid,
            phot,
            geom,
            KernelSpec::gaussian(0.4).unwrap(),
            KernelSpec::gaussian(0.3).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn kernel_identity_and_hand_value() {
        let s = KernelSpec::gaussian(0.12).unwrap();
        assert_eq!(kernel_eval(&s, [0.0, 0.0], [0.0, 0.0]), 1.0);
        assert_relative_eq!(
            kernel_eval(&s, [0.0, 0.0], [0.12, 0.0]),
            0.6065306597126334,
            epsilon = 1e-15
        );
    }

    #[test]
    fn kernel_rejects_bad_bandwidth() {
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(-1.0).is_err());
        assert!(KernelSpec::gaussian(f64::NAN).is_err());
    }

    #[test]
    fn gram_single_far_and_unit_distance() {
        let s = KernelSpec::gaussian(0.3).unwrap();
        let one = ControlPointSet::new(vec![[0.2, -0.1]]).unwrap();
        assert_eq!(build_gram_matrix(&s, &one), DMatrix::from_element(1, 1, 1.0));

        let far = ControlPointSet::new(vec![[0.0, 0.0], [30.0, 0.0]]).unwrap();
        let m = build_gram_matrix(&s, &far);
        assert_relative_eq!(m, DMatrix::identity(2, 2), epsilon = 1e-300);

        let near = ControlPointSet::new(vec![[0.0, 0.0], [0.0, 0.3]]).unwrap();
        let m = build_gram_matrix(&s, &near);
        assert_relative_eq!(m[(0, 1)], (-0.5f64).exp(), epsilon = 1e-15);
        assert_eq!(m[(0, 1)], m[(1, 0)]);
    }

    #[test]
    fn default_lattices_give_positive_definite_grams() {
        for (per_axis, extent, bw) in [(6, 1.0, 0.3), (15, 1.5, 0.12)] {
            let pts = ControlPointSet::square_lattice(per_axis, extent).unwrap();
            let m = build_gram_matrix(&KernelSpec::gaussian(bw).unwrap(), &pts);
            assert_eq!(m.nrows(), per_axis * per_axis);
            for i in 0..m.nrows() {
                assert_eq!(m[(i, i)], 1.0);
            }
            assert_eq!(m, m.transpose());
            let min = m.symmetric_eigenvalues().min();
            assert!(min > 0.0, "min eigenvalue {min}");
        }
    }

    #[test]
    fn duplicate_points_rejected() {
        assert!(ControlPointSet::new(vec![[0.0, 0.0], [0.0, 0.0]]).is_err());
        assert!(ControlPointSet::new(vec![]).is_err());
    }

    #[test]
    fn lattice_layout() {
        let l = ControlPointSet::square_lattice(3, 1.0).unwrap();
        assert_eq!(
            l.points(),
            &[
                [-1.0, -1.0],
                [0.0, -1.0],
                [1.0, -1.0],
                [-1.0, 0.0],
                [0.0, 0.0],
                [1.0, 0.0],
                [-1.0, 1.0],
                [0.0, 1.0],
                [1.0, 1.0]
            ]
        );
        assert_eq!(ControlPointSet::square_lattice(1, 1.0).unwrap().points(), &[[0.0, 0.0]]);
    }

    #[test]
    fn grid_coordinates_inside_domain() {
        let g = PixelGrid::new(16, 16).unwrap();
        assert_eq!(g.len(), 256);
        assert!(g.coords().iter().all(|v| v[0].abs() < 1.0 && v[1].abs() < 1.0));
        assert_eq!(g.coords()[0], [-1.0 + 1.0 / 16.0, -1.0 + 1.0 / 16.0]);
        assert_eq!(g.coords()[1][1], g.coords()[0][1]);
        assert!(PixelGrid::new(0, 3).is_err());
    }

    #[test]
    fn deformation_zero_and_control_point() {
        let pts = ControlPointSet::new(vec![[0.3, -0.2]]).unwrap();
        let s = KernelSpec::gaussian(0.3).unwrap();
        assert_eq!(eval_deformation(&[0.0, 0.0], &pts, &s, [0.5, 0.5]).unwrap(), [0.0, 0.0]);
        assert_eq!(eval_deformation(&[1.0, 0.0], &pts, &s, [0.3, -0.2]).unwrap(), [1.0, 0.0]);
        assert!(eval_deformation(&[1.0], &pts, &s, [0.0, 0.0]).is_err());
    }

    #[test]
    fn template_zero_and_control_point() {
        let pts = ControlPointSet::new(vec![[0.1, 0.1]]).unwrap();
        let s = KernelSpec::gaussian(0.12).unwrap();
        assert_eq!(eval_template(&[2.0], &pts, &s, [0.1, 0.1]).unwrap(), 2.0);
        assert_eq!(eval_template(&[0.0], &pts, &s, [0.7, 0.1]).unwrap(), 0.0);
        assert!(eval_template(&[1.0, 2.0], &pts, &s, [0.0, 0.0]).is_err());
    }

    #[test]
    fn undeformed_design_matrix_matches_kernel() {
        for lattice in [true, false] {
            let g = small_geometry(lattice);
            let m = g.deformed_design_matrix(&vec![0.0; g.beta_len()]).unwrap();
            for (u, v) in g.grid().coords().iter().enumerate() {
                for (j, p) in g.photometric().points().iter().enumerate() {
                    assert_relative_eq!(
                        m[(u, j)],
                        kernel_eval(g.phot_kernel(), *v, *p),
                        max_relative = 1e-13
                    );
                }
            }
        }
    }

    #[test]
    fn design_row_hits_one_at_control_point() {
        let g = small_geometry(true);
        let target = g.photometric().points()[5];
        let mut ws = g.workspace();
        let mut row = vec![0.0; g.k_p()];
        g.design_row(target, &mut row, &mut ws);
        assert_eq!(row[5], 1.0);
        assert!(row.iter().all(|&x| x > 0.0 && x <= 1.0));
    }

    #[test]
    fn design_matrix_composes_deformation_and_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for lattice in [true, false] {
            let g = small_geometry(lattice);
            let beta: Vec<f64> = (0..g.beta_len()).map(|_| rng.random_range(-0.3..0.3)).collect();
            let m = g.deformed_design_matrix(&beta).unwrap();
            for (u, v) in g.grid().coords().iter().enumerate() {
                let z = eval_deformation(&beta, g.geometric(), g.geom_kernel(), *v).unwrap();
                let w = [v[0] - z[0], v[1] - z[1]];
                for (j, p) in g.photometric().points().iter().enumerate() {
                    assert_relative_eq!(m[(u, j)], kernel_eval(g.phot_kernel(), w, *p), max_relative = 1e-12);
                    assert!(m[(u, j)] > 0.0 && m[(u, j)] <= 1.0);
                }
            }
        }
    }

    #[test]
    fn render_equals_design_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = small_geometry(true);
        let alpha: Vec<f64> = (0..g.k_p()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let beta: Vec<f64> = (0..g.beta_len()).map(|_| rng.random_range(-0.2..0.2)).collect();
        let img = g.render(&alpha, &beta).unwrap();
        let prod = g.deformed_design_matrix(&beta).unwrap() * DVector::from_column_slice(&alpha);
        assert_relative_eq!(img, prod, max_relative = 1e-12, epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn kernel_symmetric(a in -2.0..2.0f64, b in -2.0..2.0f64, c in -2.0..2.0f64, d in -2.0..2.0f64, h in 0.01..3.0f64) {
            let s = KernelSpec::gaussian(h).unwrap();
            let k = kernel_eval(&s, [a, b], [c, d]);
            prop_assert_eq!(k, kernel_eval(&s, [c, d], [a, b]));
            prop_assert!((0.0..=1.0).contains(&k));
        }

        #[test]
        fn deformation_bounded_and_antisymmetric(
            beta in proptest::collection::vec(-2.0..2.0f64, 18),
            x in -1.0..1.0f64, y in -1.0..1.0f64,
        ) {
            let pts = ControlPointSet::square_lattice(3, 1.0).unwrap();
            let s = KernelSpec::gaussian(0.3).unwrap();
            let z = eval_deformation(&beta, &pts, &s, [x, y]).unwrap();
            let neg: Vec<f64> = beta.iter().map(|b| -b).collect();
            let zn = eval_deformation(&neg, &pts, &s, [x, y]).unwrap();
            prop_assert_eq!(zn, [-z[0], -z[1]]);
            let l1: f64 = beta.iter().map(|b| b.abs()).sum();
            prop_assert!((z[0] * z[0] + z[1] * z[1]).sqrt() <= l1 + 1e-12);
        }

        #[test]
        fn evaluations_are_linear(
            a1 in proptest::collection::vec(-1.0..1.0f64, 16),
            a2 in proptest::collection::vec(-1.0..1.0f64, 16),
            b1 in proptest::collection::vec(-1.0..1.0f64, 18),
            b2 in proptest::collection::vec(-1.0..1.0f64, 18),
            s in -3.0..3.0f64, t in -3.0..3.0f64,
            x in -1.2..1.2f64, y in -1.2..1.2f64,
        ) {
            let g = small_geometry(true);
            let mix = |u: &[f64], w: &[f64]| u.iter().zip(w).map(|(p, q)| s * p + t * q).collect::<Vec<_>>();
            let lhs = g.eval_template(&mix(&a1, &a2), [x, y]).unwrap();
            let rhs = s * g.eval_template(&a1, [x, y]).unwrap() + t * g.eval_template(&a2, [x, y]).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())));
            let zl = g.eval_deformation(&mix(&b1, &b2), [x, y]).unwrap();
            let z1 = g.eval_deformation(&b1, [x, y]).unwrap();
            let z2 = g.eval_deformation(&b2, [x, y]).unwrap();
            for c in 0..2 {
                let r = s * z1[c] + t * z2[c];
                prop_assert!((zl[c] - r).abs() <= 1e-12 * (1.0 + r.abs()));
            }
        }
    }
}
