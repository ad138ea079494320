//! The linearized transport equation `Lap_g phi + <grad log h, grad phi>_g = f1/h`
//! in its weighted divergence form `d_i(a^{ij} d_j phi) = sqrt(det g) h (f1/h)`
//! with `a = sqrt(det g) h g^{-1}`, solved on the mean-zero subspace.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cg::{dot, project_mean_zero, projected_cg};
use crate::error::{Error, Result};
use crate::grid::{integrate, GridSpec, MetricField, ScalarField};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Relative residual target for conjugate gradients.
    pub tol_cg: f64,
    /// Largest accepted `|int f1 dV_g|`.
    pub tol_compat: f64,
    /// Iteration cap; `None` means `50 * max(nx, ny)`.
    pub max_iter: Option<usize>,
    /// Jacobi (diagonal) preconditioning.
    pub diagonal_precond: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol_cg: 1e-10,
            tol_compat: 1e-8,
            max_iter: None,
            diagonal_precond: false,
        }
    }
}

impl SolverConfig {
    pub fn max_iter_for(&self, grid: &GridSpec) -> usize {
        self.max_iter.unwrap_or(50 * grid.nx.max(grid.ny))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub compatibility_defect: f64,
}

impl fmt::Display for SolveReport {
    /// Flat `key=value` block.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "iterations={}", self.iterations)?;
        writeln!(f, "relative_residual={:e}", self.relative_residual)?;
        writeln!(f, "compatibility_defect={:e}", self.compatibility_defect)
    }
}

/// Matrix-free `u -> -D_i(a^{ij} D_j u)` on the periodic grid.
///
/// Diagonal terms use the compact flux stencil with face-averaged coefficients;
/// the mixed terms use `D1(a12 D2 u) + D2(a12 D1 u)` with central differences.
/// Both pieces are symmetric and annihilate constants.
#[derive(Debug, Clone)]
pub struct DivFormOperator {
    pub grid: GridSpec,
    pub a11: Vec<f64>,
    pub a12: Vec<f64>,
    pub a22: Vec<f64>,
    /// `a11` averaged onto the face between node `k` and its `+x1` neighbour.
    face_x: Vec<f64>,
    face_y: Vec<f64>,
}

impl DivFormOperator {
    /// `a = sqrt(det g) h g^{-1}`.
    pub fn assemble(g: &MetricField, h: &ScalarField) -> Result<Self> {
        g.grid.check_same(&h.grid)?;
        let (node, min) = h.min();
        if min <= 0.0 {
            return Err(Error::NonpositiveDensity { node, min });
        }
        let n = g.grid.len();
        let (mut a11, mut a12, mut a22) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for k in 0..n {
            let s = g.at(k);
            if !s.is_positive_definite() {
                return Err(Error::SingularMetric {
                    node: k,
                    det: s.det(),
                });
            }
            let d = s.det();
            let w = d.sqrt() * h.values[k] / d;
            a11[k] = w * s.a22;
            a12[k] = -w * s.a12;
            a22[k] = w * s.a11;
        }
        Ok(Self::from_coefficients(g.grid, a11, a12, a22))
    }

    pub fn from_coefficients(grid: GridSpec, a11: Vec<f64>, a12: Vec<f64>, a22: Vec<f64>) -> Self {
        let mut face_x = vec![0.0; grid.len()];
        let mut face_y = vec![0.0; grid.len()];
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let k = grid.idx(i, j);
                face_x[k] = 0.5 * (a11[k] + a11[grid.wrap(i as isize + 1, j as isize)]);
                face_y[k] = 0.5 * (a22[k] + a22[grid.wrap(i as isize, j as isize + 1)]);
            }
        }
        DivFormOperator {
            grid,
            a11,
            a12,
            a22,
            face_x,
            face_y,
        }
    }

    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        let (nx, ny) = (g.nx, g.ny);
        let (hx, hy) = (g.hx(), g.hy());
        let (ix2, iy2, ixy) = (1.0 / (hx * hx), 1.0 / (hy * hy), 0.25 / (hx * hy));

        // t1 = a12 * D2c u, t2 = a12 * D1c u (without the 1/2h factors)
        let mut t1 = vec![0.0; g.len()];
        let mut t2 = vec![0.0; g.len()];
        for j in 0..ny {
            let jp = if j + 1 == ny { 0 } else { j + 1 };
            let jm = if j == 0 { ny - 1 } else { j - 1 };
            for i in 0..nx {
                let ip = if i + 1 == nx { 0 } else { i + 1 };
                let im = if i == 0 { nx - 1 } else { i - 1 };
                let k = j * nx + i;
                t1[k] = self.a12[k] * (u[jp * nx + i] - u[jm * nx + i]);
                t2[k] = self.a12[k] * (u[j * nx + ip] - u[j * nx + im]);
            }
        }
        for j in 0..ny {
            let jp = if j + 1 == ny { 0 } else { j + 1 };
            let jm = if j == 0 { ny - 1 } else { j - 1 };
            for i in 0..nx {
                let ip = if i + 1 == nx { 0 } else { i + 1 };
                let im = if i == 0 { nx - 1 } else { i - 1 };
                let k = j * nx + i;
                let (kxp, kxm, kyp, kym) = (j * nx + ip, j * nx + im, jp * nx + i, jm * nx + i);
                let uk = u[k];
                let xx = self.face_x[k] * (u[kxp] - uk) - self.face_x[kxm] * (uk - u[kxm]);
                let yy = self.face_y[k] * (u[kyp] - uk) - self.face_y[kym] * (uk - u[kym]);
                let cross = (t1[kxp] - t1[kxm]) + (t2[kyp] - t2[kym]);
                out[k] = -(xx * ix2 + yy * iy2 + cross * ixy);
            }
        }
    }

    pub fn apply_field(&self, u: &ScalarField) -> ScalarField {
        let mut out = vec![0.0; self.grid.len()];
        self.apply(&u.values, &mut out);
        ScalarField {
            grid: self.grid,
            values: out,
        }
    }

    /// Diagonal of the stencil (mixed terms do not touch it).
    pub fn diagonal(&self) -> Vec<f64> {
        let g = &self.grid;
        let (ix2, iy2) = (1.0 / (g.hx() * g.hx()), 1.0 / (g.hy() * g.hy()));
        (0..g.len())
            .map(|k| {
                let (i, j) = g.ij(k);
                let kxm = g.wrap(i as isize - 1, j as isize);
                let kym = g.wrap(i as isize, j as isize - 1);
                (self.face_x[k] + self.face_x[kxm]) * ix2
                    + (self.face_y[k] + self.face_y[kym]) * iy2
            })
            .collect()
    }
}

/// `|int f1 dV_g|` where `f1 = (f1/h) * h`.
pub fn check_compatibility(
    f1_over_h: &ScalarField,
    h: &ScalarField,
    g: &MetricField,
) -> Result<f64> {
    let f1 = f1_over_h.zip_map(h, |a, b| a * b)?;
    Ok(integrate(&f1, g)?.abs())
}

/// Solves the linearized equation for the mean-zero potential `phi`.
///
/// On hitting the iteration cap the best iterate is returned inside
/// [`Error::MaxIterationsExceeded`].
pub fn solve(
    op: &DivFormOperator,
    f1_over_h: &ScalarField,
    h: &ScalarField,
    g: &MetricField,
    cfg: &SolverConfig,
) -> Result<(ScalarField, SolveReport)> {
    op.grid.check_same(&f1_over_h.grid)?;
    let defect = check_compatibility(f1_over_h, h, g)?;
    if defect > cfg.tol_compat {
        return Err(Error::CompatibilityViolated {
            defect,
            tol: cfg.tol_compat,
        });
    }
    let grid = op.grid;
    let rhs: Vec<f64> = (0..grid.len())
        .map(|k| -g.at(k).det().sqrt() * h.values[k] * f1_over_h.values[k])
        .collect();
    let diag = cfg.diagonal_precond.then(|| op.diagonal());
    let out = projected_cg(
        |u, o| op.apply(u, o),
        project_mean_zero,
        diag.as_deref(),
        &rhs,
        None,
        cfg.tol_cg,
        cfg.max_iter_for(&grid),
    );
    let report = SolveReport {
        iterations: out.iterations,
        relative_residual: out.rel_residual,
        compatibility_defect: defect,
    };
    let phi = ScalarField {
        grid,
        values: out.x,
    };
    if !out.converged {
        return Err(Error::MaxIterationsExceeded {
            best: Box::new(phi),
            report,
        });
    }
    Ok((phi, report))
}

/// Runs CG on `op u = 0` from a random mean-zero start of unit norm and returns
/// the norm of the final iterate. A value near zero certifies that the kernel
/// of the operator contains nothing beyond the constants.
pub fn null_space_test(op: &DivFormOperator, tol: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u0: Vec<f64> = (0..op.grid.len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    project_mean_zero(&mut u0);
    let n0 = dot(&u0, &u0).sqrt();
    u0.iter_mut().for_each(|v| *v /= n0);
    let zero = vec![0.0; u0.len()];
    let max_iter = 50 * op.grid.nx.max(op.grid.ny);
    let out = projected_cg(
        |u, o| op.apply(u, o),
        project_mean_zero,
        None,
        &zero,
        Some(u0),
        tol,
        max_iter,
    );
    dot(&out.x, &out.x).sqrt()
}

/// `int (h Lap_g phi + <grad h, grad phi>_g) dV_g`, evaluated through the
/// divergence form so that it reduces to the sum of `-op phi` times the cell area.
pub fn integration_by_parts_defect(op: &DivFormOperator, phi: &ScalarField) -> f64 {
    let lphi = op.apply_field(phi);
    -lphi.values.iter().sum::<f64>() * op.grid.cell_area()
}
