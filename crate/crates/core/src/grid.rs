//! Function-space algebra on a uniform midpoint grid of `[0, 1]`.
//!
//! Every curve, surface and operator in the crate lives on a [`Grid`] of `G`
//! midpoints `t_g = (g - 1/2)/G`. Integrals are midpoint-rule sums with the
//! uniform weight `1/G`, so a kernel `S(t, s)` acts on a curve `f` as the
//! scaled matrix-vector product `(1/G) S f`.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LrcovError, Result};

/// Largest grid for which the quartic covariance tensor is materialized.
pub const MAX_QUARTIC_GRID: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    size: usize,
}

impl Grid {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(LrcovError::Input("grid must have at least one point".into()));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Quadrature weight of every point.
    pub fn weight(&self) -> f64 {
        1.0 / self.size as f64
    }

    pub fn point(&self, g: usize) -> f64 {
        (g as f64 + 0.5) / self.size as f64
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.size).map(|g| self.point(g)).collect()
    }

    pub fn curve_from_fn(&self, f: impl Fn(f64) -> f64) -> Curve {
        Curve(DVector::from_iterator(self.size, self.points().into_iter().map(f)))
    }

    pub fn surface_from_fn(&self, f: impl Fn(f64, f64) -> f64) -> Surface {
        let pts = self.points();
        Surface(DMatrix::from_fn(self.size, self.size, |i, j| f(pts[i], pts[j])))
    }

    pub fn zero_surface(&self) -> Surface {
        Surface::zeros(self.size)
    }
}

/// A function on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve(pub DVector<f64>);

impl Curve {
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LrcovError::Input("curve contains non-finite values".into()));
        }
        Ok(Self(DVector::from_vec(values)))
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self(DVector::from_element(grid.size(), value))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn norm(&self) -> f64 {
        inner_product(self, self).map(f64::sqrt).unwrap_or(0.0)
    }

    pub fn scale(&self, alpha: f64) -> Curve {
        Curve(&self.0 * alpha)
    }

    /// Rank-one surface `f(t) g(s)`.
    pub fn outer(&self, other: &Curve) -> Surface {
        Surface(&self.0 * other.0.transpose())
    }
}

/// A bivariate kernel on `Grid x Grid`; rows index `t`, columns index `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface(pub DMatrix<f64>);

impl Surface {
    pub fn zeros(size: usize) -> Self {
        Self(DMatrix::zeros(size, size))
    }

    pub fn constant(size: usize, value: f64) -> Self {
        Self(DMatrix::from_element(size, size, value))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let g = rows.len();
        if g == 0 {
            return Err(LrcovError::Input("surface must be non-empty".into()));
        }
        for r in rows {
            if r.len() != g {
                return Err(LrcovError::Dimension { expected: g, found: r.len() });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(LrcovError::Input("surface contains non-finite values".into()));
            }
        }
        Ok(Self(DMatrix::from_fn(g, g, |i, j| rows[i][j])))
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, t: usize, s: usize) -> f64 {
        self.0[(t, s)]
    }

    pub fn transpose(&self) -> Surface {
        Surface(self.0.transpose())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest asymmetry `max |S(t,s) - S(s,t)|`.
    pub fn asymmetry(&self) -> f64 {
        let g = self.size();
        let mut worst = 0.0_f64;
        for i in 0..g {
            for j in (i + 1)..g {
                worst = worst.max((self.0[(i, j)] - self.0[(j, i)]).abs());
            }
        }
        worst
    }

    /// Symmetric within `rel_tol * max|S|`.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        self.asymmetry() <= rel_tol * self.max_abs()
    }

    /// `∬ S(t, s) dt ds`.
    pub fn integral(&self) -> f64 {
        let g = self.size() as f64;
        self.0.sum() / (g * g)
    }

    /// `∬ S(t, s) f(t, s) dt ds`.
    pub fn integral_against(&self, f: &Surface) -> Result<f64> {
        check_dims(self.size(), f.size())?;
        let g = self.size() as f64;
        Ok(self.0.dot(&f.0) / (g * g))
    }

    /// `∬ S(t, s) u(t) v(s) dt ds`.
    pub fn bilinear(&self, u: &Curve, v: &Curve) -> Result<f64> {
        check_dims(self.size(), u.len())?;
        check_dims(self.size(), v.len())?;
        let g = self.size() as f64;
        Ok(u.0.dot(&(&self.0 * &v.0)) / (g * g))
    }

    pub fn scale(&self, alpha: f64) -> Surface {
        Surface(&self.0 * alpha)
    }

    pub fn sub(&self, other: &Surface) -> Surface {
        Surface(&self.0 - &other.0)
    }

    pub fn add(&self, other: &Surface) -> Surface {
        Surface(&self.0 + &other.0)
    }
}

/// The fourth-order kernel `L(t, s, t', s')`, stored densely only for small grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Quartic {
    size: usize,
    values: Vec<f64>,
}

impl Quartic {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> Result<Self> {
        if size > MAX_QUARTIC_GRID {
            return Err(LrcovError::Unsupported(format!(
                "quartic tensor refused for G = {size} > {MAX_QUARTIC_GRID}; use the contracted forms"
            )));
        }
        let mut values = Vec::with_capacity(size.pow(4));
        for a in 0..size {
            for b in 0..size {
                for c in 0..size {
                    for d in 0..size {
                        values.push(f(a, b, c, d));
                    }
                }
            }
        }
        Ok(Self { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, t: usize, s: usize, tp: usize, sp: usize) -> f64 {
        let g = self.size;
        self.values[((t * g + s) * g + tp) * g + sp]
    }

    /// `∬∬ L(t,s,t',s') f(t,s) f(t',s')`, evaluated by brute-force summation.
    pub fn contract(&self, f: &Surface) -> Result<f64> {
        check_dims(self.size, f.size())?;
        let g = self.size;
        let mut acc = 0.0;
        for t in 0..g {
            for s in 0..g {
                let fts = f.get(t, s);
                for tp in 0..g {
                    for sp in 0..g {
                        acc += self.get(t, s, tp, sp) * fts * f.get(tp, sp);
                    }
                }
            }
        }
        Ok(acc / (g as f64).powi(4))
    }
}

/// N observed curves stored row-wise: row `j` is `X_j` on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSample {
    data: DMatrix<f64>,
}

impl CurveSample {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(LrcovError::Input("sample must contain at least one curve and one grid point".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LrcovError::Input("sample contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let g = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != g) {
            return Err(LrcovError::Dimension { expected: g, found: bad.len() });
        }
        Self::new(DMatrix::from_fn(n, g, |i, j| rows[i][j]))
    }

    pub fn n_obs(&self) -> usize {
        self.data.nrows()
    }

    pub fn grid(&self) -> Grid {
        Grid { size: self.data.ncols() }
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn curve(&self, j: usize) -> Curve {
        Curve(self.data.row(j).transpose())
    }

    pub fn mean_curve(&self) -> Curve {
        Curve(self.data.row_mean().transpose())
    }

    /// Copy with the sample mean curve subtracted from every row.
    pub fn centered(&self) -> DMatrix<f64> {
        let mean = self.data.row_mean();
        let mut out = self.data.clone();
        for mut row in out.row_iter_mut() {
            row -= &mean;
        }
        out
    }
}

fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(LrcovError::Dimension { expected, found });
    }
    Ok(())
}

/// `⟨f, g⟩ = (1/G) Σ f_g g_g`.
pub fn inner_product(f: &Curve, g: &Curve) -> Result<f64> {
    check_dims(f.len(), g.len())?;
    Ok(f.0.dot(&g.0) / f.len() as f64)
}

/// `‖S‖ = sqrt((1/G²) Σ S²)`.
pub fn l2_norm_surface(s: &Surface) -> f64 {
    let g = s.size() as f64;
    s.0.norm() / g
}

/// Right integration `(S f)(t) = ∫ S(t, s) f(s) ds`.
pub fn apply_operator(s: &Surface, f: &Curve) -> Result<Curve> {
    check_dims(s.size(), f.len())?;
    Ok(Curve(&s.0 * &f.0 / s.size() as f64))
}

/// First `count` functions of the trigonometric basis `1, √2 cos 2πkt, √2 sin 2πkt, ...`.
pub fn fourier_basis(grid: Grid, count: usize) -> Result<Vec<Curve>> {
    if count == 0 {
        return Err(LrcovError::Input("basis size must be at least 1".into()));
    }
    if count > grid.size() {
        return Err(LrcovError::Input(format!(
            "basis of {count} functions is under-resolved on a grid of {} points",
            grid.size()
        )));
    }
    Ok((1..=count)
        .map(|j| {
            let k = (j / 2) as f64;
            match j {
                1 => grid.curve_from_fn(|_| 1.0),
                _ if j % 2 == 0 => grid.curve_from_fn(|t| SQRT_2 * (2.0 * PI * k * t).cos()),
                _ => grid.curve_from_fn(|t| SQRT_2 * (2.0 * PI * k * t).sin()),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid(g: usize) -> Grid {
        Grid::new(g).unwrap()
    }

    #[test]
    fn grid_points_are_midpoints() {
        let g = grid(4);
        assert_eq!(g.points(), vec![0.125, 0.375, 0.625, 0.875]);
        assert!(Grid::new(0).is_err());
    }

    #[test]
    fn inner_product_examples() {
        let ones = Curve::constant(grid(10), 1.0);
        assert_abs_diff_eq!(inner_product(&ones, &ones).unwrap(), 1.0, epsilon = 1e-15);
        let two = Curve::constant(grid(4), 2.0);
        let three = Curve::constant(grid(4), 3.0);
        assert_abs_diff_eq!(inner_product(&two, &three).unwrap(), 6.0, epsilon = 1e-15);
        let f = Curve::from_vec(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let g = Curve::from_vec(vec![4.0, 0.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(inner_product(&f, &g).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn inner_product_length_mismatch() {
        let f = Curve::constant(grid(3), 1.0);
        let g = Curve::constant(grid(4), 1.0);
        assert!(matches!(inner_product(&f, &g), Err(LrcovError::Dimension { .. })));
    }

    #[test]
    fn surface_norm_examples() {
        assert_eq!(l2_norm_surface(&Surface::zeros(5)), 0.0);
        for g in [1, 3, 17] {
            assert_abs_diff_eq!(l2_norm_surface(&Surface::constant(g, 3.0)), 3.0, epsilon = 1e-14);
        }
        let id = Surface(DMatrix::identity(2, 2));
        assert_abs_diff_eq!(l2_norm_surface(&id), 0.5_f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn operator_examples() {
        let g = grid(32);
        let out = apply_operator(&Surface::constant(32, 1.0), &Curve::constant(g, 1.0)).unwrap();
        assert!(out.values().iter().all(|v| (v - 1.0).abs() < 1e-14));
        let f = g.curve_from_fn(|t| t * t);
        let out = apply_operator(&Surface::zeros(32), &f).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0));

        let phi = g.curve_from_fn(|t| SQRT_2 * (2.0 * PI * t).sin());
        let proj = phi.outer(&phi);
        let out = apply_operator(&proj, &phi).unwrap();
        for (a, b) in out.values().iter().zip(phi.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert!(apply_operator(&proj, &Curve::constant(grid(3), 1.0)).is_err());
    }

    #[test]
    fn fourier_basis_examples() {
        let g = grid(64);
        let one = fourier_basis(g, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].values().iter().all(|v| *v == 1.0));
        let b = fourier_basis(g, 3).unwrap();
        assert_abs_diff_eq!(inner_product(&b[1], &b[2]).unwrap(), 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(inner_product(&b[1], &b[1]).unwrap(), 1.0, epsilon = 1e-6);
        assert!(fourier_basis(grid(4), 5).is_err());
        assert!(fourier_basis(grid(4), 0).is_err());
    }

    #[test]
    fn fourier_gram_is_identity() {
        for gsize in [4, 8, 20, 64, 100] {
            let g = grid(gsize);
            let j = gsize / 4;
            let b = fourier_basis(g, j).unwrap();
            for (a, fa) in b.iter().enumerate() {
                for (c, fc) in b.iter().enumerate() {
                    let expected = if a == c { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(inner_product(fa, fc).unwrap(), expected, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn quartic_refuses_large_grids() {
        assert!(Quartic::from_fn(65, |_, _, _, _| 0.0).is_err());
        let q = Quartic::from_fn(2, |a, b, c, d| (a + 2 * b + 4 * c + 8 * d) as f64).unwrap();
        assert_eq!(q.get(1, 0, 1, 1), 13.0);
    }

    fn vec_strategy(g: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0..10.0f64, g)
    }

    proptest! {
        #[test]
        fn inner_product_symmetric_bilinear(
            (f, g, h) in (1usize..12).prop_flat_map(|n| (vec_strategy(n), vec_strategy(n), vec_strategy(n))),
            alpha in -5.0..5.0f64,
        ) {
            let (f, g, h) = (Curve::from_vec(f).unwrap(), Curve::from_vec(g).unwrap(), Curve::from_vec(h).unwrap());
            let fg = inner_product(&f, &g).unwrap();
            prop_assert!((fg - inner_product(&g, &f).unwrap()).abs() <= 1e-12 * (1.0 + fg.abs()));
            let lhs = inner_product(&Curve(&f.0 * alpha + &h.0), &g).unwrap();
            let rhs = alpha * fg + inner_product(&h, &g).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }

        #[test]
        fn operator_linear_and_self_adjoint(
            n in 1usize..10,
            seed in prop::collection::vec(-3.0..3.0f64, 100),
            alpha in -4.0..4.0f64,
            beta in -4.0..4.0f64,
        ) {
            let m = DMatrix::from_fn(n, n, |i, j| seed[(i * 7 + j * 3) % 100]);
            let s = Surface(&m + m.transpose());
            let f = Curve(DVector::from_fn(n, |i, _| seed[(i * 11 + 5) % 100]));
            let g = Curve(DVector::from_fn(n, |i, _| seed[(i * 13 + 1) % 100]));
            let combo = apply_operator(&s, &Curve(&f.0 * alpha + &g.0 * beta)).unwrap();
            let separate = apply_operator(&s, &f).unwrap().0 * alpha + apply_operator(&s, &g).unwrap().0 * beta;
            let resid = Curve(combo.0 - separate).norm();
            let bound = 1e-12 * (alpha.abs() * f.norm() + beta.abs() * g.norm()) * s.max_abs() * n as f64;
            prop_assert!(resid <= bound + 1e-300);

            let sf_g = inner_product(&apply_operator(&s, &f).unwrap(), &g).unwrap();
            let f_sg = inner_product(&f, &apply_operator(&s, &g).unwrap()).unwrap();
            prop_assert!((sf_g - f_sg).abs() <= 1e-10 * (1.0 + sf_g.abs()));
        }
    }
}
