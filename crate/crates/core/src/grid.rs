//! Discrete calculus on the flat torus `[0, lx) x [0, ly)` carrying a variable metric.
//!
//! Node `(i, j)` sits at `(i * hx, j * hy)` and is stored at index `j * nx + i`,
//! so `x1` is the fast axis. All difference stencils wrap periodically.

use crate::error::{Error, Result};
use crate::linalg::Sym2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

impl GridSpec {
    pub const MIN_NODES: usize = 8;

    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx < Self::MIN_NODES || ny < Self::MIN_NODES {
            return Err(Error::InvalidGrid(format!(
                "need at least {} nodes per axis, got {nx} x {ny}",
                Self::MIN_NODES
            )));
        }
        if !(lx.is_finite() && lx > 0.0 && ly.is_finite() && ly > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "periods must be positive, got {lx} x {ly}"
            )));
        }
        Ok(GridSpec { nx, ny, lx, ly })
    }

    /// Square `n x n` grid on the `2 pi` torus.
    pub fn torus(n: usize) -> Result<Self> {
        let l = std::f64::consts::TAU;
        GridSpec::new(n, n, l, l)
    }

    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> f64 {
        self.hx() * self.hy()
    }

    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Index of node `(i, j)` after periodic wrapping of both coordinates.
    #[inline]
    pub fn wrap(&self, i: isize, j: isize) -> usize {
        let i = i.rem_euclid(self.nx as isize) as usize;
        let j = j.rem_euclid(self.ny as isize) as usize;
        self.idx(i, j)
    }

    #[inline]
    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    #[inline]
    pub fn coords(&self, k: usize) -> (f64, f64) {
        let (i, j) = self.ij(k);
        (i as f64 * self.hx(), j as f64 * self.hy())
    }

    pub fn check_same(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "{}x{} [{} x {}] vs {}x{} [{} x {}]",
                self.nx, self.ny, self.lx, self.ly, other.nx, other.ny, other.lx, other.ly
            )));
        }
        Ok(())
    }

    /// Signed periodic offset `b - a` along x1 wrapped to `[-lx/2, lx/2)`.
    pub fn wrap_dx(&self, d: f64) -> f64 {
        wrap_offset(d, self.lx)
    }

    pub fn wrap_dy(&self, d: f64) -> f64 {
        wrap_offset(d, self.ly)
    }
}

pub(crate) fn wrap_offset(d: f64, period: f64) -> f64 {
    (d + 0.5 * period).rem_euclid(period) - 0.5 * period
}

fn check_len(grid: &GridSpec, got: usize) -> Result<()> {
    if grid.len() != got {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            got,
        });
    }
    Ok(())
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        check_len(&grid, values.len())?;
        check_finite("scalar", &values)?;
        Ok(ScalarField { grid, values })
    }

    pub fn constant(grid: GridSpec, c: f64) -> Self {
        ScalarField {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.coords(k);
                f(x, y)
            })
            .collect();
        ScalarField { grid, values }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ScalarField {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        Ok(ScalarField {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| s * v)
    }

    /// Plain node average (not metric weighted).
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn minus_mean(&self) -> Self {
        let m = self.mean();
        self.map(|v| v - m)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> (usize, f64) {
        self.values
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |best, (k, v)| if v < best.1 { (k, v) } else { best },
            )
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Value shifted by whole node counts, `out(i, j) = self(i + di, j + dj)`.
    pub fn shifted(&self, di: isize, dj: isize) -> Self {
        let g = self.grid;
        let values = (0..g.len())
            .map(|k| {
                let (i, j) = g.ij(k);
                self.values[g.wrap(i as isize + di, j as isize + dj)]
            })
            .collect();
        ScalarField { grid: g, values }
    }
}

/// One-form with components `(w1, w2)` in the chart basis `dx1, dx2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovectorField {
    pub grid: GridSpec,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
}

/// Tangent vector field with contravariant components.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: GridSpec,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
}

macro_rules! two_component_field {
    ($ty:ident) => {
        impl $ty {
            pub fn new(grid: GridSpec, c1: Vec<f64>, c2: Vec<f64>) -> Result<Self> {
                check_len(&grid, c1.len())?;
                check_len(&grid, c2.len())?;
                check_finite(stringify!($ty), &c1)?;
                check_finite(stringify!($ty), &c2)?;
                Ok($ty { grid, c1, c2 })
            }

            pub fn zeros(grid: GridSpec) -> Self {
                $ty {
                    grid,
                    c1: vec![0.0; grid.len()],
                    c2: vec![0.0; grid.len()],
                }
            }

            pub fn constant(grid: GridSpec, v: [f64; 2]) -> Self {
                $ty {
                    grid,
                    c1: vec![v[0]; grid.len()],
                    c2: vec![v[1]; grid.len()],
                }
            }

            pub fn from_fn(grid: GridSpec, f: impl Fn(f64, f64) -> [f64; 2]) -> Self {
                let mut out = Self::zeros(grid);
                for k in 0..grid.len() {
                    let (x, y) = grid.coords(k);
                    let v = f(x, y);
                    out.c1[k] = v[0];
                    out.c2[k] = v[1];
                }
                out
            }

            #[inline]
            pub fn at(&self, k: usize) -> [f64; 2] {
                [self.c1[k], self.c2[k]]
            }

            #[inline]
            pub fn set(&mut self, k: usize, v: [f64; 2]) {
                self.c1[k] = v[0];
                self.c2[k] = v[1];
            }

            pub fn scale(&self, s: f64) -> Self {
                $ty {
                    grid: self.grid,
                    c1: self.c1.iter().map(|v| s * v).collect(),
                    c2: self.c2.iter().map(|v| s * v).collect(),
                }
            }

            /// Pointwise Euclidean (chart) norm.
            pub fn norm_field(&self) -> ScalarField {
                ScalarField {
                    grid: self.grid,
                    values: self
                        .c1
                        .iter()
                        .zip(&self.c2)
                        .map(|(a, b)| a.hypot(*b))
                        .collect(),
                }
            }

            pub fn max_abs(&self) -> f64 {
                self.c1
                    .iter()
                    .chain(&self.c2)
                    .fold(0.0, |m, v| m.max(v.abs()))
            }
        }
    };
}

two_component_field!(CovectorField);
two_component_field!(VectorField);

/// Symmetric positive-definite metric tensor per node.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricField {
    pub grid: GridSpec,
    pub g11: Vec<f64>,
    pub g12: Vec<f64>,
    pub g22: Vec<f64>,
}

impl MetricField {
    /// Builds a metric and checks pointwise positive-definiteness.
    pub fn new(grid: GridSpec, g11: Vec<f64>, g12: Vec<f64>, g22: Vec<f64>) -> Result<Self> {
        for v in [&g11, &g12, &g22] {
            check_len(&grid, v.len())?;
            check_finite("metric", v)?;
        }
        let m = MetricField {
            grid,
            g11,
            g12,
            g22,
        };
        m.check_spd()?;
        Ok(m)
    }

    /// Builds a symmetric field without the definiteness check (used for
    /// intermediate tensors and masked reconstructions).
    pub fn from_entries_unchecked(grid: GridSpec, entries: Vec<Sym2>) -> Self {
        MetricField {
            grid,
            g11: entries.iter().map(|s| s.a11).collect(),
            g12: entries.iter().map(|s| s.a12).collect(),
            g22: entries.iter().map(|s| s.a22).collect(),
        }
    }

    pub fn constant(grid: GridSpec, s: Sym2) -> Self {
        MetricField {
            grid,
            g11: vec![s.a11; grid.len()],
            g12: vec![s.a12; grid.len()],
            g22: vec![s.a22; grid.len()],
        }
    }

    pub fn identity(grid: GridSpec) -> Self {
        Self::constant(grid, Sym2::IDENTITY)
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(f64, f64) -> Sym2) -> Self {
        let entries = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.coords(k);
                f(x, y)
            })
            .collect();
        Self::from_entries_unchecked(grid, entries)
    }

    #[inline]
    pub fn at(&self, k: usize) -> Sym2 {
        Sym2::new(self.g11[k], self.g12[k], self.g22[k])
    }

    #[inline]
    pub fn set(&mut self, k: usize, s: Sym2) {
        self.g11[k] = s.a11;
        self.g12[k] = s.a12;
        self.g22[k] = s.a22;
    }

    pub fn scale(&self, c: f64) -> Self {
        MetricField {
            grid: self.grid,
            g11: self.g11.iter().map(|v| c * v).collect(),
            g12: self.g12.iter().map(|v| c * v).collect(),
            g22: self.g22.iter().map(|v| c * v).collect(),
        }
    }

    pub fn check_spd(&self) -> Result<()> {
        for k in 0..self.grid.len() {
            let s = self.at(k);
            if !s.is_positive_definite() {
                return Err(Error::SingularMetric {
                    node: k,
                    det: s.det(),
                });
            }
        }
        Ok(())
    }

    pub fn det_field(&self) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: (0..self.grid.len()).map(|k| self.at(k).det()).collect(),
        }
    }

    /// Pointwise inverse. Fails on the first node that is not positive definite.
    pub fn inverse(&self) -> Result<MetricField> {
        let entries = (0..self.grid.len())
            .map(|k| inverse_at(self, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_entries_unchecked(self.grid, entries))
    }
}

fn inverse_at(g: &MetricField, k: usize) -> Result<Sym2> {
    let s = g.at(k);
    if !s.is_positive_definite() {
        return Err(Error::SingularMetric {
            node: k,
            det: s.det(),
        });
    }
    s.inverse().ok_or(Error::SingularMetric {
        node: k,
        det: s.det(),
    })
}

/// Central difference along x1 of a raw nodal array.
pub(crate) fn d1(grid: &GridSpec, u: &[f64], out: &mut [f64]) {
    let (nx, ny) = (grid.nx, grid.ny);
    let s = 0.5 / grid.hx();
    for j in 0..ny {
        let row = j * nx;
        for i in 0..nx {
            let ip = if i + 1 == nx { 0 } else { i + 1 };
            let im = if i == 0 { nx - 1 } else { i - 1 };
            out[row + i] = s * (u[row + ip] - u[row + im]);
        }
    }
}

/// Central difference along x2 of a raw nodal array.
pub(crate) fn d2(grid: &GridSpec, u: &[f64], out: &mut [f64]) {
    let (nx, ny) = (grid.nx, grid.ny);
    let s = 0.5 / grid.hy();
    for j in 0..ny {
        let jp = if j + 1 == ny { 0 } else { j + 1 };
        let jm = if j == 0 { ny - 1 } else { j - 1 };
        for i in 0..nx {
            out[j * nx + i] = s * (u[jp * nx + i] - u[jm * nx + i]);
        }
    }
}

/// Second-order central gradient `(d1 u, d2 u)`.
pub fn grad(u: &ScalarField) -> CovectorField {
    let g = u.grid;
    let mut out = CovectorField::zeros(g);
    d1(&g, &u.values, &mut out.c1);
    d2(&g, &u.values, &mut out.c2);
    out
}

/// Raises the index: `g^{-1} w`.
pub fn sharp(g: &MetricField, w: &CovectorField) -> Result<VectorField> {
    g.grid.check_same(&w.grid)?;
    let mut out = VectorField::zeros(g.grid);
    for k in 0..g.grid.len() {
        let gi = inverse_at(g, k)?;
        out.set(k, gi.mul_vec(w.at(k)));
    }
    Ok(out)
}

/// Lowers the index: `g v`.
pub fn flat(g: &MetricField, v: &VectorField) -> Result<CovectorField> {
    g.grid.check_same(&v.grid)?;
    let mut out = CovectorField::zeros(g.grid);
    for k in 0..g.grid.len() {
        out.set(k, g.at(k).mul_vec(v.at(k)));
    }
    Ok(out)
}

/// Pointwise `w1^T g^{-1} w2`.
pub fn metric_dot(g: &MetricField, w1: &CovectorField, w2: &CovectorField) -> Result<ScalarField> {
    g.grid.check_same(&w1.grid)?;
    g.grid.check_same(&w2.grid)?;
    let mut values = vec![0.0; g.grid.len()];
    for (k, out) in values.iter_mut().enumerate() {
        let v = inverse_at(g, k)?.mul_vec(w2.at(k));
        let a = w1.at(k);
        *out = a[0] * v[0] + a[1] * v[1];
    }
    Ok(ScalarField {
        grid: g.grid,
        values,
    })
}

/// `sqrt(det g)`, the density of the Riemannian volume form.
pub fn volume_density(g: &MetricField) -> Result<ScalarField> {
    let mut values = vec![0.0; g.grid.len()];
    for (k, out) in values.iter_mut().enumerate() {
        let s = g.at(k);
        if !s.is_positive_definite() {
            return Err(Error::SingularMetric {
                node: k,
                det: s.det(),
            });
        }
        *out = s.det().sqrt();
    }
    Ok(ScalarField {
        grid: g.grid,
        values,
    })
}

/// `int u dV_g` by the periodic trapezoid rule.
pub fn integrate(u: &ScalarField, g: &MetricField) -> Result<f64> {
    u.grid.check_same(&g.grid)?;
    let vol = volume_density(g)?;
    let s: f64 = u.values.iter().zip(&vol.values).map(|(a, b)| a * b).sum();
    Ok(s * u.grid.cell_area())
}

/// Coefficient of `dx1 ^ dx2` in `dw`, i.e. `d1 w2 - d2 w1`.
pub fn exterior_derivative(w: &CovectorField) -> ScalarField {
    let g = w.grid;
    let mut a = vec![0.0; g.len()];
    let mut b = vec![0.0; g.len()];
    d1(&g, &w.c2, &mut a);
    d2(&g, &w.c1, &mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x -= y;
    }
    ScalarField { grid: g, values: a }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{PI, TAU};

    fn torus(n: usize) -> GridSpec {
        GridSpec::torus(n).unwrap()
    }

    fn max_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn grid_rejects_small_or_degenerate_specs() {
        assert!(GridSpec::new(4, 16, 1.0, 1.0).is_err());
        assert!(GridSpec::new(16, 16, 0.0, 1.0).is_err());
        assert!(GridSpec::new(16, 16, 1.0, f64::NAN).is_err());
        let g = GridSpec::new(16, 32, 2.0, 4.0).unwrap();
        assert_eq!(g.len(), 512);
        assert_eq!(g.wrap(-1, 32), g.idx(15, 0));
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let u = ScalarField::constant(torus(16), 5.0);
        let w = grad(&u);
        assert_eq!(w.max_abs(), 0.0);
    }

    #[test]
    fn grad_matches_analytic_derivatives() {
        let g = torus(128);
        let h = TAU / 128.0;
        let u = ScalarField::from_fn(g, |x, _| x.sin());
        let w = grad(&u);
        let exact = ScalarField::from_fn(g, |x, _| x.cos());
        assert!(max_err(&w.c1, &exact.values) <= h * h);
        assert_eq!(w.c2.iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);

        let u = ScalarField::from_fn(g, |x, y| (x + y).sin());
        let w = grad(&u);
        let exact = ScalarField::from_fn(g, |x, y| (x + y).cos());
        assert!(max_err(&w.c1, &exact.values) <= h * h);
        assert!(max_err(&w.c2, &exact.values) <= h * h);
    }

    #[test]
    fn sharp_examples() {
        let g = torus(8);
        let w = CovectorField::constant(g, [0.3, -1.2]);
        let v = sharp(&MetricField::identity(g), &w).unwrap();
        assert_eq!(v.at(3), [0.3, -1.2]);

        let w = CovectorField::constant(g, [1.0, 0.0]);
        let v = sharp(&MetricField::constant(g, Sym2::scaled_identity(2.0)), &w).unwrap();
        assert_eq!(v.at(0), [0.5, 0.0]);

        let v = sharp(&MetricField::constant(g, Sym2::new(2.0, 1.0, 1.0)), &w).unwrap();
        assert_eq!(v.at(5), [1.0, -1.0]);
    }

    #[test]
    fn sharp_rejects_singular_metric() {
        let g = torus(8);
        let mut m = MetricField::identity(g);
        m.set(7, Sym2::new(1.0, 1.0, 1.0));
        let w = CovectorField::constant(g, [1.0, 0.0]);
        assert!(matches!(
            sharp(&m, &w),
            Err(Error::SingularMetric { node: 7, .. })
        ));
        assert!(MetricField::new(g, m.g11.clone(), m.g12.clone(), m.g22.clone()).is_err());
    }

    #[test]
    fn metric_dot_examples() {
        let g = torus(8);
        let e1 = CovectorField::constant(g, [1.0, 0.0]);
        let e2 = CovectorField::constant(g, [0.0, 1.0]);
        let id = MetricField::identity(g);
        assert_eq!(metric_dot(&id, &e1, &e1).unwrap().values[0], 1.0);
        assert_eq!(metric_dot(&id, &e1, &e2).unwrap().values[0], 0.0);
        let four = MetricField::constant(g, Sym2::scaled_identity(4.0));
        assert_eq!(metric_dot(&four, &e1, &e1).unwrap().values[0], 0.25);
    }

    #[test]
    fn volume_density_examples() {
        let g = torus(32);
        assert_eq!(
            volume_density(&MetricField::identity(g)).unwrap().values[0],
            1.0
        );
        let c = MetricField::constant(g, Sym2::scaled_identity(3.0));
        assert!((volume_density(&c).unwrap().values[9] - 3.0).abs() < 1e-15);
        let conf = MetricField::from_fn(g, |x, _| Sym2::scaled_identity((0.2 * x.sin()).exp()));
        let vol = volume_density(&conf).unwrap();
        for k in 0..g.len() {
            let (x, _) = g.coords(k);
            assert!((vol.values[k] - (0.2 * x.sin()).exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn integrate_examples() {
        let g = torus(64);
        let one = ScalarField::constant(g, 1.0);
        let id = MetricField::identity(g);
        assert!((integrate(&one, &id).unwrap() - 4.0 * PI * PI).abs() < 1e-12);
        let s = ScalarField::from_fn(g, |x, _| x.sin());
        assert!(integrate(&s, &id).unwrap().abs() < 1e-12);
        let four = MetricField::constant(g, Sym2::scaled_identity(4.0));
        assert!((integrate(&one, &four).unwrap() - 16.0 * PI * PI).abs() < 1e-10);
        let other = ScalarField::constant(torus(32), 1.0);
        assert!(matches!(
            integrate(&other, &id),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn integrate_conformal_area_is_spectrally_accurate() {
        // area of e^{2 lam} I with lam = 0.1 sin x: 2 pi * int_0^{2pi} e^{0.2 sin x} dx = 4 pi^2 I0(0.2)
        let g = torus(64);
        let m = MetricField::from_fn(g, |x, _| Sym2::scaled_identity((0.2 * x.sin()).exp()));
        let i0 = bessel_i0(0.2);
        let area = integrate(&ScalarField::constant(g, 1.0), &m).unwrap();
        assert!((area - 4.0 * PI * PI * i0).abs() < 1e-10, "{area}");
    }

    fn bessel_i0(x: f64) -> f64 {
        // power series, converges fast for small x
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..30 {
            term *= (x / 2.0) * (x / 2.0) / (k as f64 * k as f64);
            sum += term;
        }
        sum
    }

    #[test]
    fn exterior_derivative_examples() {
        let g = torus(64);
        assert_eq!(exterior_derivative(&CovectorField::zeros(g)).max_abs(), 0.0);
        let w = CovectorField::from_fn(g, |x, y| [-y.sin(), x.sin()]);
        let dw = exterior_derivative(&w);
        let exact = ScalarField::from_fn(g, |x, y| x.cos() + y.cos());
        let h = TAU / 64.0;
        assert!(max_err(&dw.values, &exact.values) <= 2.0 * h * h / 6.0 * 1.01);
    }

    #[test]
    fn exterior_derivative_of_gradient_vanishes() {
        let g = GridSpec::new(24, 20, 3.0, 5.0).unwrap();
        let u = ScalarField::from_fn(g, |x, y| (x * 2.1).sin() * (y * 1.3).cos() + 0.1 * x);
        let dw = exterior_derivative(&grad(&u));
        assert!(dw.max_abs() < 1e-12, "{}", dw.max_abs());
    }

    #[test]
    fn second_order_convergence_of_stencils() {
        let err = |n: usize| {
            let g = torus(n);
            let u = ScalarField::from_fn(g, |x, y| (x + 2.0 * y).sin());
            let w = grad(&u);
            let ex = ScalarField::from_fn(g, |x, y| (x + 2.0 * y).cos());
            let w2 = CovectorField::from_fn(g, |x, y| [-(2.0 * y).sin(), x.sin()]);
            let dw = exterior_derivative(&w2);
            let ex2 = ScalarField::from_fn(g, |x, y| x.cos() + 2.0 * (2.0 * y).cos());
            (max_err(&w.c1, &ex.values), max_err(&dw.values, &ex2.values))
        };
        let (a1, b1) = err(32);
        let (a2, b2) = err(64);
        for r in [a1 / a2, b1 / b2] {
            assert!((3.2..=4.8).contains(&r), "ratio {r}");
        }
    }

    #[test]
    fn musical_round_trip() {
        let g = torus(16);
        let m = MetricField::from_fn(g, |x, y| {
            Sym2::new(2.0 + x.sin(), 0.3 * (x + y).cos(), 1.5 + 0.5 * y.cos())
        });
        let w = CovectorField::from_fn(g, |x, y| [x.cos() + y, y.sin() - 2.0]);
        let back = flat(&m, &sharp(&m, &w).unwrap()).unwrap();
        assert!(max_err(&back.c1, &w.c1) < 1e-12 && max_err(&back.c2, &w.c2) < 1e-12);
    }

    #[test]
    fn operators_commute_with_periodic_shift() {
        let g = torus(16);
        let u = ScalarField::from_fn(g, |x, y| (x + 0.3).sin() * (2.0 * y).cos() + 0.2 * y.sin());
        let s = u.shifted(5, -3);
        let gu = grad(&u);
        let gs = grad(&s);
        let shift_back = |c: &Vec<f64>| {
            ScalarField {
                grid: g,
                values: c.clone(),
            }
            .shifted(5, -3)
            .values
        };
        assert_eq!(shift_back(&gu.c1), gs.c1);
        assert_eq!(shift_back(&gu.c2), gs.c2);
        let full = u.shifted(16, 16);
        assert_eq!(full, u);
    }
}
