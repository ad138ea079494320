//! Probe solutions: dipole sources that vanish away from two small disks, the
//! dictionary of their potentials, the patch cover, and per-patch selection of
//! an admissible frame plus extra solutions.

use rayon::prelude::*;

use crate::elliptic::{solve, DivFormOperator, SolveReport, SolverConfig};
use crate::error::{Error, Result};
use crate::grid::{integrate, GridSpec, MetricField, ScalarField, VectorField};
use crate::reconstruction::{span_rows, Window};

/// Bumps are cut off at this many widths.
pub const SUPPORT_WIDTHS: f64 = 4.0;

/// Pole positions and width of a dipole source; enough to recompute where the
/// source is silent without access to the metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DipolePlacement {
    pub plus: [f64; 2],
    pub minus: [f64; 2],
    pub width: f64,
}

impl DipolePlacement {
    fn radius(&self) -> f64 {
        SUPPORT_WIDTHS * self.width
    }

    fn dist2(grid: &GridSpec, p: [f64; 2], x: f64, y: f64) -> f64 {
        let dx = grid.wrap_dx(x - p[0]);
        let dy = grid.wrap_dy(y - p[1]);
        dx * dx + dy * dy
    }

    /// True when the node lies outside both bump supports.
    pub fn is_quiet_at(&self, grid: &GridSpec, k: usize) -> bool {
        let (x, y) = grid.coords(k);
        let r2 = self.radius() * self.radius();
        Self::dist2(grid, self.plus, x, y) >= r2 && Self::dist2(grid, self.minus, x, y) >= r2
    }

    pub fn quiet_mask(&self, grid: &GridSpec) -> Vec<bool> {
        (0..grid.len()).map(|k| self.is_quiet_at(grid, k)).collect()
    }

    pub fn quiet_on(&self, grid: &GridSpec, patch: &Patch) -> bool {
        patch
            .nodes(grid)
            .into_iter()
            .all(|k| self.is_quiet_at(grid, k))
    }
}

#[derive(Debug, Clone)]
pub struct ProbeSource {
    pub id: String,
    pub placement: DipolePlacement,
    /// `f1 / h`, with `int f1 dV_g = 0`.
    pub field: ScalarField,
}

/// Truncated Gaussian `max(exp(-r^2 / 2 w^2) - exp(-8), 0)`, which is exactly
/// zero from radius `4 w` on.
fn bump(grid: &GridSpec, center: [f64; 2], width: f64) -> ScalarField {
    let cut = (-0.5 * SUPPORT_WIDTHS * SUPPORT_WIDTHS).exp();
    let mut values = vec![0.0; grid.len()];
    for (k, v) in values.iter_mut().enumerate() {
        let (x, y) = grid.coords(k);
        let r2 = DipolePlacement::dist2(grid, center, x, y);
        *v = ((-0.5 * r2 / (width * width)).exp() - cut).max(0.0);
    }
    ScalarField {
        grid: *grid,
        values,
    }
}

/// `f1/h = G+ / int(G+ h dV_g) - G- / int(G- h dV_g)`. Each bump carries unit
/// `h dV_g` mass, so the source is balanced and swapping the poles negates it.
pub fn make_dipole_source(
    g: &MetricField,
    h: &ScalarField,
    id: &str,
    plus: [f64; 2],
    minus: [f64; 2],
    width: f64,
) -> Result<ProbeSource> {
    let grid = g.grid;
    grid.check_same(&h.grid)?;
    let placement = DipolePlacement { plus, minus, width };
    let sep2 = DipolePlacement::dist2(&grid, plus, minus[0], minus[1]);
    if sep2 <= (1e-12 * grid.lx.max(grid.ly)).powi(2) {
        return Err(Error::DegenerateDipole(format!(
            "poles of `{id}` coincide at ({}, {})",
            plus[0], plus[1]
        )));
    }
    let spacing = grid.hx().max(grid.hy());
    if !(width >= 2.0 * spacing) {
        return Err(Error::InvalidConfig(format!(
            "dipole width {width} is below two grid spacings ({})",
            2.0 * spacing
        )));
    }
    if placement.radius() >= 0.5 * grid.lx.min(grid.ly) {
        return Err(Error::InvalidConfig(format!(
            "dipole support radius {} does not fit in half a period",
            placement.radius()
        )));
    }
    let bp = bump(&grid, plus, width);
    let bm = bump(&grid, minus, width);
    let mp = integrate(&bp.zip_map(h, |a, b| a * b)?, g)?;
    let mm = integrate(&bm.zip_map(h, |a, b| a * b)?, g)?;
    let field = bp.zip_map(&bm, |a, b| a / mp - b / mm)?;
    Ok(ProbeSource {
        id: id.to_string(),
        placement,
        field,
    })
}

/// Rectangular window `[i0, i0 + nx) x [j0, j0 + ny)` of node indices, wrapped
/// periodically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub index: usize,
    pub i0: isize,
    pub j0: isize,
    pub nx: usize,
    pub ny: usize,
    /// Nodes this close to the patch edge never contribute to the blend.
    pub margin: usize,
}

impl Patch {
    pub const MIN_SIDE: usize = 16;

    #[inline]
    pub fn node(&self, grid: &GridSpec, a: usize, b: usize) -> usize {
        grid.wrap(self.i0 + a as isize, self.j0 + b as isize)
    }

    /// Global indices in local order (`a` fastest).
    pub fn nodes(&self, grid: &GridSpec) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nx * self.ny);
        for b in 0..self.ny {
            for a in 0..self.nx {
                out.push(self.node(grid, a, b));
            }
        }
        out
    }

    pub fn window(&self, grid: &GridSpec) -> Window {
        Window {
            nx: self.nx,
            ny: self.ny,
            hx: grid.hx(),
            hy: grid.hy(),
        }
    }

    pub fn in_interior(&self, a: usize, b: usize) -> bool {
        a >= self.margin
            && b >= self.margin
            && a + self.margin < self.nx
            && b + self.margin < self.ny
    }

    /// Raised-cosine bump, positive on the whole patch and vanishing just outside.
    pub fn blend_weight(&self, a: usize, b: usize) -> f64 {
        let s = |t: usize, n: usize| {
            (std::f64::consts::PI * (t as f64 + 0.5) / n as f64)
                .sin()
                .powi(2)
        };
        s(a, self.nx) * s(b, self.ny)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchCover {
    pub grid: GridSpec,
    pub patches: Vec<Patch>,
}

impl PatchCover {
    /// `per_axis^2` patches of side `side_fraction * L`, centred on a uniform lattice.
    pub fn uniform(
        grid: GridSpec,
        per_axis: usize,
        side_fraction: f64,
        margin: usize,
    ) -> Result<Self> {
        if per_axis == 0 || !(side_fraction > 0.0 && side_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "patch cover needs per_axis >= 1 and side fraction in (0, 1], got {per_axis} and {side_fraction}"
            )));
        }
        let sx = (side_fraction * grid.nx as f64).round() as usize;
        let sy = (side_fraction * grid.ny as f64).round() as usize;
        if sx < Patch::MIN_SIDE || sy < Patch::MIN_SIDE {
            return Err(Error::InvalidConfig(format!(
                "patches of {sx} x {sy} nodes are below the {0} x {0} minimum",
                Patch::MIN_SIDE
            )));
        }
        let stride_x = grid.nx as f64 / per_axis as f64;
        let stride_y = grid.ny as f64 / per_axis as f64;
        if stride_x > 0.5 * sx as f64 + 1e-9 || stride_y > 0.5 * sy as f64 + 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "patch stride {stride_x:.1} x {stride_y:.1} leaves less than half-width overlap"
            )));
        }
        if 2 * margin + 3 > sx.min(sy) {
            return Err(Error::InvalidConfig(format!(
                "margin {margin} leaves no patch interior"
            )));
        }
        let mut patches = Vec::with_capacity(per_axis * per_axis);
        for pj in 0..per_axis {
            for pi in 0..per_axis {
                patches.push(Patch {
                    index: patches.len(),
                    i0: (pi as f64 * stride_x).round() as isize - (sx / 2) as isize,
                    j0: (pj as f64 * stride_y).round() as isize - (sy / 2) as isize,
                    nx: sx,
                    ny: sy,
                    margin,
                });
            }
        }
        Ok(PatchCover { grid, patches })
    }

    /// Eight patches per axis of side `L/4`, margin 3.
    pub fn default_for(grid: GridSpec) -> Result<Self> {
        Self::uniform(grid, 8, 0.25, 3)
    }
}

/// Dipole placements: every centre is combined with every orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutConfig {
    pub centers: Vec<[f64; 2]>,
    /// Pole axis directions; normalized on use.
    pub orientations: Vec<[f64; 2]>,
    /// Distance from the centre to each pole.
    pub half_separation: f64,
    pub width: f64,
}

impl LayoutConfig {
    /// Eight staggered centres, four orientations 45 degrees apart. Lengths are
    /// `0.5` and `0.25` on the `2 pi` torus and scale with the shorter period.
    pub fn canonical(grid: &GridSpec) -> Self {
        let (lx, ly) = (grid.lx, grid.ly);
        let mut centers = Vec::new();
        for i in 0..4 {
            for j in 0..2 {
                let x = (i as f64 + 0.5) * lx / 4.0;
                let y = (j as f64 + 0.5) * ly / 2.0 + (i % 2) as f64 * ly / 4.0;
                centers.push([x, y.rem_euclid(ly)]);
            }
        }
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let unit = grid.lx.min(grid.ly) / std::f64::consts::TAU;
        LayoutConfig {
            centers,
            orientations: vec![[1.0, 0.0], [0.0, 1.0], [r, r], [r, -r]],
            half_separation: 0.5 * unit,
            width: 0.25 * unit,
        }
    }

    pub fn placements(&self) -> Result<Vec<(String, DipolePlacement)>> {
        let mut out = Vec::new();
        for (ci, c) in self.centers.iter().enumerate() {
            for (oi, o) in self.orientations.iter().enumerate() {
                let norm = o[0].hypot(o[1]);
                if !(norm > 0.0 && norm.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "orientation {oi} has zero length"
                    )));
                }
                let d = [
                    self.half_separation * o[0] / norm,
                    self.half_separation * o[1] / norm,
                ];
                out.push((
                    format!("c{ci}o{oi}"),
                    DipolePlacement {
                        plus: [c[0] + d[0], c[1] + d[1]],
                        minus: [c[0] - d[0], c[1] - d[1]],
                        width: self.width,
                    },
                ));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct ProbeEntry {
    pub source: ProbeSource,
    pub phi: ScalarField,
    pub report: SolveReport,
}

#[derive(Debug, Clone)]
pub struct ProbeDictionary {
    pub entries: Vec<ProbeEntry>,
}

/// Builds every source of the layout and solves for its potential under the
/// true `g` and `h`. Output order follows the layout and does not depend on
/// thread scheduling.
pub fn build_dictionary(
    g: &MetricField,
    h: &ScalarField,
    layout: &LayoutConfig,
    cfg: &SolverConfig,
) -> Result<ProbeDictionary> {
    let placements = layout.placements()?;
    if placements.is_empty() {
        return Err(Error::InvalidConfig("probe layout is empty".into()));
    }
    let op = DivFormOperator::assemble(g, h)?;
    let entries = placements
        .par_iter()
        .map(|(id, p)| {
            let with_id = |e: Error| Error::Probe {
                id: id.clone(),
                source: Box::new(e),
            };
            let source = make_dipole_source(g, h, id, p.plus, p.minus, p.width).map_err(with_id)?;
            let (phi, report) = solve(&op, &source.field, h, g, cfg).map_err(with_id)?;
            Ok(ProbeEntry {
                source,
                phi,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeDictionary { entries })
}

fn det2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// `min |H1|^2 |H2|^2 - (H1 . H2)^2` over the patch, with coordinate dot products.
pub fn pair_independence(h1: &VectorField, h2: &VectorField, patch: &Patch) -> f64 {
    let grid = h1.grid;
    patch
        .nodes(&grid)
        .into_iter()
        .map(|k| {
            let (a, b) = (h1.at(k), h2.at(k));
            let aa = a[0] * a[0] + a[1] * a[1];
            let bb = b[0] * b[0] + b[1] * b[1];
            let ab = a[0] * b[0] + a[1] * b[1];
            (aa * bb - ab * ab).max(0.0)
        })
        .fold(f64::INFINITY, f64::min)
}

/// `min |det[H1 H2]|` over the patch.
pub fn frame_determinant(h1: &VectorField, h2: &VectorField, patch: &Patch) -> f64 {
    let grid = h1.grid;
    patch
        .nodes(&grid)
        .into_iter()
        .map(|k| det2(h1.at(k), h2.at(k)).abs())
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    /// Number of extra solutions beyond the frame.
    pub extras: usize,
    /// Admissibility threshold relative to the median `|H|^2` on the patch.
    pub eps_rel: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            extras: 4,
            eps_rel: 1e-3,
        }
    }
}

/// Chosen probe indices for one patch and the margins they achieved.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub patch: usize,
    pub frame: [usize; 2],
    pub extras: Vec<usize>,
    /// `min |det[H1 H2]|` on the patch.
    pub frame_margin: f64,
    /// `min |H1|^2 |H2|^2 - (H1 . H2)^2` on the patch.
    pub pair_margin: f64,
    /// The threshold both margins were checked against.
    pub eps_adm: f64,
    /// 10th percentile over the patch of the span conditioning of the extras.
    pub span_score: f64,
}

fn local(field: &VectorField, nodes: &[usize]) -> Vec<[f64; 2]> {
    nodes.iter().map(|&k| field.at(k)).collect()
}

fn rms(v: &[[f64; 2]]) -> f64 {
    (v.iter().map(|a| a[0] * a[0] + a[1] * a[1]).sum::<f64>() / v.len() as f64).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v[((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)]
}

/// `sigma_mid / sigma_max` of the rows stacked at one node (`sigma_min / sigma_max`
/// for two rows).
fn conditioning(rows: &[[f64; 3]]) -> f64 {
    let mut g = [[0.0; 3]; 3];
    for r in rows {
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] += r[i] * r[j];
            }
        }
    }
    let (ev, _) = crate::linalg::sym3_eigen(g);
    if ev[2] <= 0.0 {
        return 0.0;
    }
    (ev[1].max(0.0) / ev[2]).sqrt()
}

/// Picks a frame pair and `cfg.extras` extra probes among those whose sources
/// are silent on the patch.
///
/// The frame maximizes the scale-free margin `min |det[Ha Hb]| / (rms_a rms_b)`.
/// Extras start from the pair whose span matrices are best conditioned in the
/// 10th percentile over the patch and are then added greedily by the same score.
/// Placements that repeat an earlier one are ignored.
pub fn select_probes(
    fields: &[&VectorField],
    placements: &[DipolePlacement],
    patch: &Patch,
    cfg: &SelectionConfig,
) -> Result<Selection> {
    if cfg.extras == 0 {
        return Err(Error::InvalidConfig(
            "at least one extra solution is required beyond the frame".into(),
        ));
    }
    if fields.len() != placements.len() {
        return Err(Error::LengthMismatch {
            expected: fields.len(),
            got: placements.len(),
        });
    }
    let no_tuple = |reason: String| Error::NoAdmissibleTuple {
        patch: patch.index,
        reason,
    };
    let Some(first) = fields.first() else {
        return Err(no_tuple("empty dictionary".into()));
    };
    let grid = first.grid;
    for f in fields {
        grid.check_same(&f.grid)?;
    }
    let nodes = patch.nodes(&grid);

    let mut quiet: Vec<usize> = Vec::new();
    for (i, p) in placements.iter().enumerate() {
        if placements[..i].contains(p) {
            continue;
        }
        if p.quiet_on(&grid, patch) {
            quiet.push(i);
        }
    }
    if quiet.len() < 2 + cfg.extras {
        return Err(no_tuple(format!(
            "{} probes are silent on the patch, need {}",
            quiet.len(),
            2 + cfg.extras
        )));
    }

    let hs: Vec<Vec<[f64; 2]>> = quiet.iter().map(|&i| local(fields[i], &nodes)).collect();
    let scales: Vec<f64> = hs.iter().map(|h| rms(h)).collect();

    let mut best: Option<(f64, usize, usize, f64)> = None;
    for a in 0..quiet.len() {
        for b in a + 1..quiet.len() {
            if scales[a] == 0.0 || scales[b] == 0.0 {
                continue;
            }
            let d = hs[a]
                .iter()
                .zip(&hs[b])
                .map(|(x, y)| det2(*x, *y).abs())
                .fold(f64::INFINITY, f64::min);
            let score = d / (scales[a] * scales[b]);
            if best.is_none_or(|(s, ..)| score > s) {
                best = Some((score, a, b, d));
            }
        }
    }
    let Some((_, fa, fb, frame_margin)) = best else {
        return Err(no_tuple("all silent probes have vanishing data".into()));
    };
    let sq_median = |h: &[[f64; 2]]| median(h.iter().map(|v| v[0] * v[0] + v[1] * v[1]).collect());
    let eps_adm = cfg.eps_rel * (sq_median(&hs[fa]) * sq_median(&hs[fb])).sqrt();
    if !(frame_margin >= eps_adm) || frame_margin == 0.0 {
        return Err(no_tuple(format!(
            "best frame determinant {frame_margin:e} is below {eps_adm:e}"
        )));
    }
    let pair_margin = pair_independence(fields[quiet[fa]], fields[quiet[fb]], patch);

    let window = patch.window(&grid);
    let mut rows: Vec<(usize, Vec<[f64; 3]>, Vec<bool>)> = Vec::new();
    for c in 0..quiet.len() {
        if c == fa || c == fb {
            continue;
        }
        let (mut r, mask) = span_rows(&window, &hs[fa], &hs[fb], &hs[c]);
        let n_valid = mask.iter().filter(|&&v| v).count();
        if n_valid == 0 {
            continue;
        }
        let s = (r
            .iter()
            .zip(&mask)
            .filter(|(_, &v)| v)
            .map(|(x, _)| x.iter().map(|t| t * t).sum::<f64>())
            .sum::<f64>()
            / n_valid as f64)
            .sqrt();
        if !(s > 0.0 && s.is_finite()) {
            continue;
        }
        r.iter_mut()
            .for_each(|x| x.iter_mut().for_each(|t| *t /= s));
        rows.push((c, r, mask));
    }
    if rows.len() < cfg.extras {
        return Err(no_tuple(format!(
            "only {} extra probes give a non-trivial span",
            rows.len()
        )));
    }
    let score = |set: &[usize]| {
        let mut per_node = Vec::with_capacity(nodes.len());
        let mut stack = Vec::with_capacity(set.len());
        for k in 0..nodes.len() {
            if set.iter().all(|&s| rows[s].2[k]) {
                stack.clear();
                stack.extend(set.iter().map(|&s| rows[s].1[k]));
                per_node.push(conditioning(&stack));
            }
        }
        percentile(per_node, 0.1)
    };
    let mut chosen: Vec<usize>;
    let mut span_score;
    if cfg.extras == 1 {
        chosen = vec![0];
        span_score = 0.0;
    } else {
        let mut best_pair = (f64::NEG_INFINITY, 0, 1);
        for a in 0..rows.len() {
            for b in a + 1..rows.len() {
                let s = score(&[a, b]);
                if s > best_pair.0 {
                    best_pair = (s, a, b);
                }
            }
        }
        chosen = vec![best_pair.1, best_pair.2];
        span_score = best_pair.0;
        while chosen.len() < cfg.extras {
            let mut next = (f64::NEG_INFINITY, usize::MAX);
            for c in 0..rows.len() {
                if chosen.contains(&c) {
                    continue;
                }
                let mut trial = chosen.clone();
                trial.push(c);
                let s = score(&trial);
                if s > next.0 {
                    next = (s, c);
                }
            }
            chosen.push(next.1);
            span_score = next.0;
        }
    }
    Ok(Selection {
        patch: patch.index,
        frame: [quiet[fa], quiet[fb]],
        extras: chosen.into_iter().map(|c| quiet[rows[c].0]).collect(),
        frame_margin,
        pair_margin,
        eps_adm,
        span_score,
    })
}
