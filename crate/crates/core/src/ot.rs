//! Entropic optimal transport on constant-metric tori, used to check the
//! transport-side identities: the first-order map `id + eps (grad phi)^sharp`,
//! invariance of the map under `g -> c0 g`, and the cost Hessian on the diagonal.
//!
//! The cost `c = c0/2 |x - y|^2` (wrapped) separates over the two axes, so the
//! Gibbs kernel is applied one axis at a time and the plan is never formed.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::elliptic::{solve, DivFormOperator, SolverConfig};
use crate::error::{Error, Result};
use crate::grid::{grad, sharp, GridSpec, MetricField, ScalarField, VectorField};
use crate::linalg::Sym2;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    pub grid: GridSpec,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(grid: GridSpec, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig(
                "measure weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "measure weights sum to {total}, not 1"
            )));
        }
        Ok(DiscreteMeasure { grid, weights })
    }

    /// Normalizes a non-negative density to a probability vector.
    pub fn from_density(density: &ScalarField) -> Result<Self> {
        let total: f64 = density.values.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidConfig("density has no mass".into()));
        }
        Self::new(
            density.grid,
            density.values.iter().map(|v| v / total).collect(),
        )
    }

    pub fn uniform(grid: GridSpec) -> Self {
        DiscreteMeasure {
            grid,
            weights: vec![1.0 / grid.len() as f64; grid.len()],
        }
    }
}

/// `c(x, y) = c0/2 d(x, y)^2` for `g = c0 I`, distances taken across the wrap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WrappedSqDistance {
    pub grid: GridSpec,
    pub c0: f64,
}

impl WrappedSqDistance {
    pub fn new(grid: GridSpec, c0: f64) -> Result<Self> {
        if !(c0 > 0.0 && c0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "cost scale c0 must be positive, got {c0}"
            )));
        }
        Ok(WrappedSqDistance { grid, c0 })
    }

    pub fn cost(&self, x: [f64; 2], y: [f64; 2]) -> f64 {
        let dx = self.grid.wrap_dx(x[0] - y[0]);
        let dy = self.grid.wrap_dy(x[1] - y[1]);
        0.5 * self.c0 * (dx * dx + dy * dy)
    }

    /// `n x n` table of the one-axis cost divided by `reg`, row = source index.
    fn axis_table(&self, axis: usize, reg: f64) -> Vec<f64> {
        let (n, h) = if axis == 0 {
            (self.grid.nx, self.grid.hx())
        } else {
            (self.grid.ny, self.grid.hy())
        };
        let mut t = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                let d = if axis == 0 {
                    self.grid.wrap_dx((a as f64 - b as f64) * h)
                } else {
                    self.grid.wrap_dy((a as f64 - b as f64) * h)
                };
                // c0 / reg first, so scaling both by a power of two gives the same table
                t[a * n + b] = 0.5 * (self.c0 / reg) * (d * d);
            }
        }
        t
    }
}

fn hessian_at(f: impl Fn(f64, f64) -> f64, x: [f64; 2], step: f64) -> [[f64; 2]; 2] {
    let e = |i: usize| if i == 0 { [step, 0.0] } else { [0.0, step] };
    let mut h = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let (a, b) = (e(i), e(j));
            let v = |s: f64, t: f64| f(x[0] + s * a[0] + t * b[0], x[1] + s * a[1] + t * b[1]);
            h[i][j] =
                (v(1.0, 1.0) - v(1.0, -1.0) - v(-1.0, 1.0) + v(-1.0, -1.0)) / (4.0 * step * step);
        }
    }
    h
}

fn frob(m: [[f64; 2]; 2]) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

const HESSIAN_STEP: f64 = 1e-3;

/// `|Hess_x c(., y)|_{x=y} - c0 I|_F` by central differences at an interior point.
pub fn cost_hessian_check(grid: &GridSpec, c0: f64) -> Result<f64> {
    let c = WrappedSqDistance::new(*grid, c0)?;
    let y = [0.3 * grid.lx, 0.6 * grid.ly];
    let h = hessian_at(|a, b| c.cost([a, b], y), y, HESSIAN_STEP);
    Ok(frob([[h[0][0] - c0, h[0][1]], [h[1][0], h[1][1] - c0]]))
}

/// `|d_x d_y c(x, y)|_{x=y} + c0 I|_F`.
pub fn cost_cross_hessian_check(grid: &GridSpec, c0: f64) -> Result<f64> {
    let c = WrappedSqDistance::new(*grid, c0)?;
    let p = [0.3 * grid.lx, 0.6 * grid.ly];
    let s = HESSIAN_STEP;
    let mut m = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let shift = |q: [f64; 2], k: usize, t: f64| {
                let mut q = q;
                q[k] += t * s;
                q
            };
            let v = |a: f64, b: f64| c.cost(shift(p, i, a), shift(p, j, b));
            m[i][j] = (v(1.0, 1.0) - v(1.0, -1.0) - v(-1.0, 1.0) + v(-1.0, -1.0)) / (4.0 * s * s);
        }
    }
    Ok(frob([[m[0][0] + c0, m[0][1]], [m[1][0], m[1][1] + c0]]))
}

/// `out[x] = LSE_y (v[y] - C(x, y) / reg)` with the separable cost tables.
fn lse_apply(grid: &GridSpec, t1: &[f64], t2: &[f64], v: &[f64]) -> Vec<f64> {
    let (nx, ny) = (grid.nx, grid.ny);
    // stage one: a[y2 * nx + x1] = LSE_{y1} (v[y2, y1] - t1[x1, y1])
    let mut a = vec![0.0; nx * ny];
    a.par_chunks_mut(nx).enumerate().for_each(|(y2, row)| {
        let vr = &v[y2 * nx..(y2 + 1) * nx];
        for (x1, out) in row.iter_mut().enumerate() {
            let t = &t1[x1 * nx..(x1 + 1) * nx];
            *out = lse(vr.iter().zip(t).map(|(p, q)| p - q));
        }
    });
    // stage two: out[x2 * nx + x1] = LSE_{y2} (a[y2, x1] - t2[x2, y2])
    let mut out = vec![0.0; nx * ny];
    out.par_chunks_mut(nx).enumerate().for_each(|(x2, row)| {
        let t = &t2[x2 * ny..(x2 + 1) * ny];
        for (x1, o) in row.iter_mut().enumerate() {
            *o = lse((0..ny).map(|y2| a[y2 * nx + x1] - t[y2]));
        }
    });
    out
}

fn lse(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Entropic plan `P(x, y) = exp((f(x) + g(y) - c(x, y)) / reg)`, kept as its
/// dual potentials.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub cost: WrappedSqDistance,
    pub reg: f64,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub iterations: usize,
    /// L1 defect of the source marginal at exit.
    pub defect: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub reg: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            reg: 0.01,
            max_iter: 20000,
            tol: 1e-10,
        }
    }
}

/// Log-domain Sinkhorn. The target marginal is exact after every sweep; the
/// source marginal defect is checked every few sweeps.
pub fn sinkhorn(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &WrappedSqDistance,
    cfg: &SinkhornConfig,
) -> Result<Coupling> {
    let grid = cost.grid;
    grid.check_same(&mu.grid)?;
    grid.check_same(&nu.grid)?;
    if !(cfg.reg > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "entropic regularization must be positive, got {}",
            cfg.reg
        )));
    }
    if mu.weights.iter().chain(&nu.weights).any(|&w| w <= 0.0) {
        return Err(Error::InvalidConfig(
            "sinkhorn needs strictly positive weights".into(),
        ));
    }
    let r = cfg.reg;
    let t1 = cost.axis_table(0, r);
    let t2 = cost.axis_table(1, r);
    let lmu: Vec<f64> = mu.weights.iter().map(|w| w.ln()).collect();
    let lnu: Vec<f64> = nu.weights.iter().map(|w| w.ln()).collect();
    let n = grid.len();
    // potentials are stored divided by reg
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut defect = f64::INFINITY;
    let mut it = 0;
    while it < cfg.max_iter {
        it += 1;
        let a = lse_apply(&grid, &t1, &t2, &g);
        for k in 0..n {
            f[k] = lmu[k] - a[k];
        }
        let b = lse_apply(&grid, &t1, &t2, &f);
        for k in 0..n {
            g[k] = lnu[k] - b[k];
        }
        if it % 10 == 0 || it == cfg.max_iter {
            let a = lse_apply(&grid, &t1, &t2, &g);
            defect = (0..n)
                .map(|k| ((f[k] + a[k]).exp() - mu.weights[k]).abs())
                .sum();
            if defect <= cfg.tol {
                break;
            }
        }
    }
    if !(defect <= cfg.tol) {
        return Err(Error::NotConverged {
            defect,
            iterations: it,
        });
    }
    Ok(Coupling {
        cost: *cost,
        reg: r,
        f: f.iter().map(|v| v * r).collect(),
        g: g.iter().map(|v| v * r).collect(),
        iterations: it,
        defect,
    })
}

/// Per source node, the circular mean of the target offsets along each axis
/// under the conditional plan, `L / 2 pi * atan2(E sin, E cos)`. Values lie in
/// `[-L/2, L/2]`.
pub fn barycentric_map(coupling: &Coupling) -> VectorField {
    let c = &coupling.cost;
    let grid = c.grid;
    let r = coupling.reg;
    let t1 = c.axis_table(0, r);
    let t2 = c.axis_table(1, r);
    let g: Vec<f64> = coupling.g.iter().map(|v| v / r).collect();
    let (nx, ny) = (grid.nx, grid.ny);
    let axis = |along_x: bool| -> Vec<f64> {
        // marginalize the other axis: b[x_other][y_along]
        let (na, no) = if along_x { (nx, ny) } else { (ny, nx) };
        let (ta, to) = if along_x { (&t1, &t2) } else { (&t2, &t1) };
        let gv = |ya: usize, yo: usize| {
            if along_x {
                g[yo * nx + ya]
            } else {
                g[ya * nx + yo]
            }
        };
        let mut b = vec![0.0; no * na];
        b.par_chunks_mut(na).enumerate().for_each(|(xo, row)| {
            let t = &to[xo * no..(xo + 1) * no];
            for (ya, out) in row.iter_mut().enumerate() {
                *out = lse((0..no).map(|yo| gv(ya, yo) - t[yo]));
            }
        });
        let (sn, cs): (Vec<f64>, Vec<f64>) = (0..na)
            .map(|d| {
                let th = TAU * d as f64 / na as f64;
                (th.sin(), th.cos())
            })
            .unzip();
        let len = if along_x { grid.lx } else { grid.ly };
        let mut out = vec![0.0; grid.len()];
        out.par_iter_mut().enumerate().for_each(|(k, o)| {
            let (i, j) = grid.ij(k);
            let (xa, xo) = if along_x { (i, j) } else { (j, i) };
            let w: Vec<f64> = (0..na)
                .map(|ya| b[xo * na + ya] - ta[xa * na + ya])
                .collect();
            let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let (mut s, mut cc) = (0.0, 0.0);
            for (ya, wv) in w.iter().enumerate() {
                let e = (wv - m).exp();
                let d = (ya + na - xa) % na;
                s += e * sn[d];
                cc += e * cs[d];
            }
            *o = len / TAU * s.atan2(cc);
        });
        out
    };
    let d1 = axis(true);
    let d2 = axis(false);
    VectorField {
        grid,
        c1: d1,
        c2: d2,
    }
}

/// First-order displacement `eps g^{-1} grad phi` with `g = c0 I`, where `phi`
/// solves the linearized equation for the source `f1/h` and density `h`.
pub fn predicted_displacement(
    h: &ScalarField,
    f1_over_h: &ScalarField,
    c0: f64,
    solver: &SolverConfig,
) -> Result<VectorField> {
    let g = MetricField::constant(h.grid, Sym2::scaled_identity(c0));
    let op = DivFormOperator::assemble(&g, h)?;
    let (phi, _) = solve(&op, f1_over_h, h, &g, solver)?;
    sharp(&g, &grad(&phi))
}

fn rms_diff(a: &VectorField, b: &VectorField) -> f64 {
    let n = a.grid.len();
    let s: f64 = (0..n)
        .map(|k| (a.c1[k] - b.c1[k]).powi(2) + (a.c2[k] - b.c2[k]).powi(2))
        .sum();
    (s / n as f64).sqrt()
}

fn axpy(a: f64, x: &VectorField, y: &VectorField) -> VectorField {
    VectorField {
        grid: x.grid,
        c1: x.c1.iter().zip(&y.c1).map(|(p, q)| a * p + q).collect(),
        c2: x.c2.iter().zip(&y.c2).map(|(p, q)| a * p + q).collect(),
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizationRow {
    pub eps: f64,
    /// RMS of `(T_eps - T_0) - eps (grad phi)^sharp`.
    pub error: f64,
    /// Same without removing the `eps = 0` map.
    pub error_raw: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationReport {
    pub rows: Vec<LinearizationRow>,
    /// RMS displacement of the `eps = 0` map.
    pub floor: f64,
    pub slope: f64,
    pub slope_raw: f64,
    pub debiased: bool,
}

/// Displacement map for one pair of measures, optionally with the
/// regularization bias cancelled by `2 T(reg/2) - T(reg)`.
fn transport_map(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &WrappedSqDistance,
    cfg: &SinkhornConfig,
    debias: bool,
) -> Result<(VectorField, usize)> {
    let p = sinkhorn(mu, nu, cost, cfg)?;
    let t = barycentric_map(&p);
    if !debias {
        return Ok((t, p.iterations));
    }
    let half = SinkhornConfig {
        reg: 0.5 * cfg.reg,
        ..*cfg
    };
    let q = sinkhorn(mu, nu, cost, &half)?;
    let th = barycentric_map(&q);
    Ok((axpy(-1.0, &t, &th.scale(2.0)), p.iterations + q.iterations))
}

/// Compares entropic maps from `(1 + eps f1/h) h` to `h` against the first-order
/// prediction for each `eps`, and fits the order of the remainder after
/// removing the `eps = 0` map.
pub fn linearization_check(
    h: &ScalarField,
    f1_over_h: &ScalarField,
    eps: &[f64],
    c0: f64,
    sinkhorn_cfg: &SinkhornConfig,
    debias: bool,
) -> Result<LinearizationReport> {
    let grid = h.grid;
    grid.check_same(&f1_over_h.grid)?;
    if eps.len() < 2 || eps.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::InvalidConfig(
            "need at least two positive eps values".into(),
        ));
    }
    let cost = WrappedSqDistance::new(grid, c0)?;
    let unit = predicted_displacement(h, f1_over_h, c0, &SolverConfig::default())?;
    let reach = eps.iter().cloned().fold(0.0, f64::max) * unit.norm_field().max_abs();
    if reach >= grid.lx.min(grid.ly) / 8.0 {
        return Err(Error::Precondition(format!(
            "largest predicted displacement {reach} leaves the injectivity region"
        )));
    }
    let nu = DiscreteMeasure::from_density(h)?;
    let (t0, _) = transport_map(&nu, &nu, &cost, sinkhorn_cfg, debias)?;
    let zero = VectorField::zeros(grid);
    let floor = rms_diff(&t0, &zero);
    let mut rows = Vec::new();
    for &e in eps {
        let rho = h.zip_map(f1_over_h, |a, b| a * (1.0 + e * b))?;
        let mu = DiscreteMeasure::from_density(&rho)?;
        let (t, iterations) = transport_map(&mu, &nu, &cost, sinkhorn_cfg, debias)?;
        let pred = unit.scale(e);
        rows.push(LinearizationRow {
            eps: e,
            error: rms_diff(&axpy(-1.0, &t0, &t), &pred),
            error_raw: rms_diff(&t, &pred),
            iterations,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let slope = loglog_slope(&xs, &rows.iter().map(|r| r.error).collect::<Vec<_>>());
    let slope_raw = loglog_slope(&xs, &rows.iter().map(|r| r.error_raw).collect::<Vec<_>>());
    Ok(LinearizationReport {
        rows,
        floor,
        slope,
        slope_raw,
        debiased: debias,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingReport {
    /// `L^inf` map difference with `reg` scaled along with `c0`.
    pub matched: f64,
    /// `L^inf` map difference with `reg` held fixed, in grid cells.
    pub unmatched_cells: f64,
}

/// Runs the map for `c0` and `ratio * c0`, once with the regularization scaled
/// by the same ratio (identical kernels) and once without.
pub fn scaling_invariance_check(
    h: &ScalarField,
    f1_over_h: &ScalarField,
    eps: f64,
    c0: f64,
    ratio: f64,
    sinkhorn_cfg: &SinkhornConfig,
) -> Result<ScalingReport> {
    let grid = h.grid;
    let rho = h.zip_map(f1_over_h, |a, b| a * (1.0 + eps * b))?;
    let mu = DiscreteMeasure::from_density(&rho)?;
    let nu = DiscreteMeasure::from_density(h)?;
    let base = WrappedSqDistance::new(grid, c0)?;
    let scaled = WrappedSqDistance::new(grid, ratio * c0)?;
    let t = barycentric_map(&sinkhorn(&mu, &nu, &base, sinkhorn_cfg)?);
    let matched_cfg = SinkhornConfig {
        reg: ratio * sinkhorn_cfg.reg,
        ..*sinkhorn_cfg
    };
    let tm = barycentric_map(&sinkhorn(&mu, &nu, &scaled, &matched_cfg)?);
    let tu = barycentric_map(&sinkhorn(&mu, &nu, &scaled, sinkhorn_cfg)?);
    let linf = |a: &VectorField, b: &VectorField| {
        (0..grid.len())
            .map(|k| (a.c1[k] - b.c1[k]).abs().max((a.c2[k] - b.c2[k]).abs()))
            .fold(0.0, f64::max)
    };
    Ok(ScalingReport {
        matched: linf(&t, &tm),
        unmatched_cells: linf(&t, &tu) / grid.hx().min(grid.hy()),
    })
}

/// Test sources `f1/h` on the `2 pi` torus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OtSource {
    /// `A sin x`; the exact map is linear in `eps`.
    SinX { amplitude: f64 },
    /// `A sin x sin y`.
    SinXSinY { amplitude: f64 },
    /// `A (sin x + sin y + sin(x + y))`.
    Mix { amplitude: f64 },
}

impl OtSource {
    pub fn field(&self, grid: GridSpec) -> ScalarField {
        let (sx, sy) = (TAU / grid.lx, TAU / grid.ly);
        ScalarField::from_fn(grid, |x, y| {
            let (x, y) = (x * sx, y * sy);
            match *self {
                OtSource::SinX { amplitude } => amplitude * x.sin(),
                OtSource::SinXSinY { amplitude } => amplitude * x.sin() * y.sin(),
                OtSource::Mix { amplitude } => amplitude * (x.sin() + y.sin() + (x + y).sin()),
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            OtSource::SinX { .. } => "sinx",
            OtSource::SinXSinY { .. } => "sinxsiny",
            OtSource::Mix { .. } => "mix",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtConfig {
    pub n: usize,
    pub c0: f64,
    pub reg: f64,
    pub eps: Vec<f64>,
    pub source: OtSource,
    pub max_iter: usize,
    pub tol: f64,
    pub c0_ratio: f64,
    pub debias: bool,
}

impl Default for OtConfig {
    fn default() -> Self {
        OtConfig {
            n: 64,
            c0: 1.0,
            reg: 0.01,
            eps: vec![0.02, 0.04, 0.08],
            source: OtSource::SinXSinY { amplitude: 1.0 },
            max_iter: 20000,
            tol: 1e-10,
            c0_ratio: 4.0,
            debias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtReport {
    pub config: OtConfig,
    pub linearization: LinearizationReport,
    pub scaling: ScalingReport,
    pub hessian_error: f64,
    pub cross_hessian_error: f64,
}

/// Runs the linearization, scaling and cost-Hessian checks with uniform `h`.
pub fn validate(cfg: &OtConfig) -> Result<OtReport> {
    let grid = GridSpec::torus(cfg.n)?;
    let h = ScalarField::constant(grid, 1.0 / (grid.lx * grid.ly));
    let s = cfg.source.field(grid);
    let sk = SinkhornConfig {
        reg: cfg.reg,
        max_iter: cfg.max_iter,
        tol: cfg.tol,
    };
    let linearization = linearization_check(&h, &s, &cfg.eps, cfg.c0, &sk, cfg.debias)?;
    let mid = cfg.eps[cfg.eps.len() / 2];
    let scaling = scaling_invariance_check(&h, &s, mid, cfg.c0, cfg.c0_ratio, &sk)?;
    Ok(OtReport {
        config: cfg.clone(),
        linearization,
        scaling,
        hessian_error: cost_hessian_check(&grid, cfg.c0)?,
        cross_hessian_error: cost_cross_hessian_check(&grid, cfg.c0)?,
    })
}

impl OtReport {
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let l = &self.linearization;
        let mut s = String::new();
        let _ = writeln!(s, "grid={}x{}", c.n, c.n);
        let _ = writeln!(s, "c0={}", c.c0);
        let _ = writeln!(s, "reg={}", c.reg);
        let _ = writeln!(s, "source={}", c.source.name());
        let _ = writeln!(s, "debiased={}", l.debiased);
        let _ = writeln!(s, "floor={:e}", l.floor);
        for r in &l.rows {
            let _ = writeln!(
                s,
                "eps.{}=error:{:e} error_raw:{:e} iterations:{}",
                r.eps, r.error, r.error_raw, r.iterations
            );
        }
        let _ = writeln!(s, "slope={:.4}", l.slope);
        let _ = writeln!(s, "slope_raw={:.4}", l.slope_raw);
        let _ = writeln!(s, "scaling_matched_linf={:e}", self.scaling.matched);
        let _ = writeln!(
            s,
            "scaling_unmatched_cells={:.4}",
            self.scaling.unmatched_cells
        );
        let _ = writeln!(s, "hessian_error={:e}", self.hessian_error);
        let _ = writeln!(s, "cross_hessian_error={:e}", self.cross_hessian_error);
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("eps,error,error_raw\n");
        for r in &self.linearization.rows {
            let _ = writeln!(s, "{:e},{:e},{:e}", r.eps, r.error, r.error_raw);
        }
        s
    }
}
