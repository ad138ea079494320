//! Scenario files: a line-based `section.key = value` format describing the
//! grid, the true metric and density, the probe layout, the patch cover and
//! every tolerance, plus synthesis of the ground-truth fields from it.
//!
//! ```text
//! # conformal metric on the 2 pi torus
//! scenario.name = conformal
//! grid.n = 128
//! metric.family = conformal
//! metric.amplitude = 0.15
//! ```

use std::collections::HashSet;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use crate::elliptic::SolverConfig;
use crate::error::{Error, Result};
use crate::gfld::RawField;
use crate::grid::{integrate, GridSpec, MetricField, ScalarField};
use crate::linalg::Sym2;
use crate::measurements::{config_hash, MeasurementSet};
use crate::ot::{OtConfig, OtSource};
use crate::probes::{build_dictionary, LayoutConfig, PatchCover, ProbeDictionary};
use crate::reconstruction::{BetaPath, IntegrationConfig, ReconConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum MetricFamily {
    Constant {
        c0: f64,
    },
    /// `e^{2 lambda} I`, `lambda = A sin(k1 x) sin(k2 y)`.
    Conformal {
        amplitude: f64,
        k1: f64,
        k2: f64,
    },
    /// `diag(e^m, e^-m)`, `m = A sin(k2 y)`.
    Anisotropic {
        amplitude: f64,
        k2: f64,
    },
    /// Three-component field file; relative paths resolve against the scenario file.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DensityFamily {
    Uniform,
    /// Proportional to `1 + A sin(k y)`.
    Sine {
        amplitude: f64,
        k: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub grid: GridSpec,
    pub metric: MetricFamily,
    /// Multiplies the whole metric; the reconstruction cannot see it.
    pub metric_scale: f64,
    pub density: DensityFamily,
    /// Number of canonical dipole centres used, 1 to 8.
    pub probe_centers: usize,
    /// Dipole axis angles in degrees.
    pub probe_angles: Vec<f64>,
    /// Pole offset and bump width on the `2 pi` torus; scaled with the shorter period.
    pub probe_half_separation: f64,
    pub probe_width: f64,
    pub patches_per_axis: usize,
    pub patch_side_fraction: f64,
    pub patch_margin: usize,
    pub solver: SolverConfig,
    pub recon: ReconConfig,
    pub min_coverage: f64,
    pub noise: f64,
    pub seed: u64,
    pub ot: OtConfig,
    /// SHA-256 of the file text.
    pub hash: String,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "default".into(),
            grid: GridSpec::torus(128).expect("valid default grid"),
            metric: MetricFamily::Conformal {
                amplitude: 0.15,
                k1: 1.0,
                k2: 1.0,
            },
            metric_scale: 1.0,
            density: DensityFamily::Uniform,
            probe_centers: 8,
            probe_angles: vec![0.0, 90.0, 45.0, -45.0],
            probe_half_separation: 0.5,
            probe_width: 0.25,
            patches_per_axis: 8,
            patch_side_fraction: 0.25,
            patch_margin: 3,
            solver: SolverConfig::default(),
            recon: ReconConfig::default(),
            min_coverage: 0.7,
            noise: 0.0,
            seed: 0,
            ot: OtConfig::default(),
            hash: config_hash(""),
        }
    }
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Config {
            line: self.line,
            key: self.key.to_string(),
            message: message.into(),
        }
    }

    fn f64(&self) -> Result<f64> {
        match self.value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.err(format!("`{}` is not a finite number", self.value))),
        }
    }

    fn positive(&self) -> Result<f64> {
        let v = self.f64()?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.err(format!("must be positive, got {v}")))
        }
    }

    fn in_range(&self, lo: f64, hi: f64) -> Result<f64> {
        let v = self.f64()?;
        if (lo..=hi).contains(&v) {
            Ok(v)
        } else {
            Err(self.err(format!("must lie in [{lo}, {hi}], got {v}")))
        }
    }

    fn usize_in(&self, lo: usize, hi: usize) -> Result<usize> {
        match self.value.parse::<usize>() {
            Ok(v) if (lo..=hi).contains(&v) => Ok(v),
            Ok(v) => Err(self.err(format!("must lie in [{lo}, {hi}], got {v}"))),
            Err(_) => Err(self.err(format!("`{}` is not a non-negative integer", self.value))),
        }
    }

    fn bool(&self) -> Result<bool> {
        match self.value {
            "true" | "yes" | "on" => Ok(true),
            "false" | "no" | "off" => Ok(false),
            v => Err(self.err(format!("`{v}` is not a boolean"))),
        }
    }

    fn list(&self) -> Result<Vec<f64>> {
        self.value
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| self.err(format!("`{}` is not a finite number", t.trim())))
            })
            .collect()
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_in(text, Path::new("."))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_in(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses and validates everything before returning; `base` anchors
    /// relative file paths.
    pub fn parse_in(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: i + 1,
                    key: line.to_string(),
                    message: "expected `section.key = value`".into(),
                });
            };
            let e = Entry {
                line: i + 1,
                key: key.trim(),
                value: value.trim(),
            };
            if !seen.insert(e.key) {
                return Err(e.err("duplicate key"));
            }
            entries.push(e);
        }

        let mut c = ScenarioConfig {
            hash: config_hash(text),
            ..Default::default()
        };
        let (mut nx, mut ny) = (c.grid.nx, c.grid.ny);
        let (mut lx, mut ly) = (c.grid.lx, c.grid.ly);
        let mut family = "conformal";
        let mut family_at = None;
        let (mut amplitude, mut k1, mut k2, mut c0) = (0.15, 1.0, 1.0, 1.0);
        let mut file = None;
        let mut density = "uniform";
        let (mut d_amp, mut d_k) = (0.3, 1.0);
        let mut ot_source = "sinxsiny";
        let mut ot_amp = None;
        for e in &entries {
            match e.key {
                "scenario.name" => {
                    if e.value.is_empty() || e.value.contains(['/', '\\']) {
                        return Err(e.err("name must be non-empty and contain no path separators"));
                    }
                    c.name = e.value.to_string();
                }
                "grid.n" => {
                    nx = e.usize_in(8, 4096)?;
                    ny = nx;
                }
                "grid.nx" => nx = e.usize_in(8, 4096)?,
                "grid.ny" => ny = e.usize_in(8, 4096)?,
                "grid.lx" => lx = e.positive()?,
                "grid.ly" => ly = e.positive()?,
                "metric.family" => {
                    if !["constant", "conformal", "anisotropic", "file"].contains(&e.value) {
                        return Err(e.err(format!(
                            "unknown family `{}` (constant, conformal, anisotropic, file)",
                            e.value
                        )));
                    }
                    family = e.value;
                    family_at = Some(e);
                }
                "metric.c0" => c0 = e.positive()?,
                "metric.amplitude" => amplitude = e.in_range(-5.0, 5.0)?,
                "metric.k1" => k1 = e.f64()?,
                "metric.k2" => k2 = e.f64()?,
                "metric.file" => file = Some(base.join(e.value)),
                "metric.scale" => c.metric_scale = e.positive()?,
                "density.family" => {
                    if !["uniform", "sine"].contains(&e.value) {
                        return Err(e.err(format!("unknown density `{}` (uniform, sine)", e.value)));
                    }
                    density = e.value;
                }
                "density.amplitude" => d_amp = e.in_range(-0.95, 0.95)?,
                "density.k" => d_k = e.f64()?,
                "probes.centers" => c.probe_centers = e.usize_in(1, 8)?,
                "probes.angles" => {
                    c.probe_angles = e.list()?;
                    if c.probe_angles.is_empty() {
                        return Err(e.err("at least one angle is required"));
                    }
                }
                "probes.half_separation" => c.probe_half_separation = e.positive()?,
                "probes.width" => c.probe_width = e.positive()?,
                "patches.per_axis" => c.patches_per_axis = e.usize_in(1, 64)?,
                "patches.side_fraction" => c.patch_side_fraction = e.in_range(0.01, 1.0)?,
                "patches.margin" => c.patch_margin = e.usize_in(0, 64)?,
                "solver.tol" => c.solver.tol_cg = e.in_range(1e-16, 1e-2)?,
                "solver.tol_compat" => c.solver.tol_compat = e.positive()?,
                "solver.max_iter" => c.solver.max_iter = Some(e.usize_in(1, usize::MAX)?),
                "solver.diagonal_precond" => c.solver.diagonal_precond = e.bool()?,
                "recon.extras" => c.recon.selection.extras = e.usize_in(1, 64)?,
                "recon.eps_rel" => c.recon.selection.eps_rel = e.in_range(0.0, 1.0)?,
                "recon.gap_min" => c.recon.gap_min = e.in_range(1.0, 1e12)?,
                "recon.det_floor" => c.recon.det_floor = e.in_range(0.0, 1.0)?,
                "recon.beta_path" => {
                    c.recon.beta_path = match e.value {
                        "pairing" => BetaPath::Pairing,
                        "wedge" => BetaPath::Wedge,
                        v => return Err(e.err(format!("unknown path `{v}` (pairing, wedge)"))),
                    }
                }
                "recon.smooth_mu" => c.recon.smooth_mu = e.bool()?,
                "recon.smooth_passes" => c.recon.smooth_passes = e.usize_in(1, 1000)?,
                "recon.min_coverage" => c.min_coverage = e.in_range(0.0, 1.0)?,
                "recon.integration_tol" => {
                    c.recon.integration = IntegrationConfig {
                        tol: e.in_range(1e-16, 1e-2)?,
                        ..c.recon.integration
                    }
                }
                "noise.sigma" => c.noise = e.in_range(0.0, 1.0)?,
                "run.seed" => {
                    c.seed = e.value.parse().map_err(|_| {
                        e.err(format!("`{}` is not a non-negative integer", e.value))
                    })?
                }
                "ot.n" => c.ot.n = e.usize_in(8, 256)?,
                "ot.reg" => c.ot.reg = e.in_range(1e-6, 10.0)?,
                "ot.eps" => {
                    let eps = e.list()?;
                    if eps.len() < 2 || eps.iter().any(|&x| x <= 0.0) {
                        return Err(e.err("need at least two positive values"));
                    }
                    c.ot.eps = eps;
                }
                "ot.source" => {
                    if !["sinx", "sinxsiny", "mix"].contains(&e.value) {
                        return Err(e.err(format!(
                            "unknown source `{}` (sinx, sinxsiny, mix)",
                            e.value
                        )));
                    }
                    ot_source = e.value;
                }
                "ot.amplitude" => ot_amp = Some(e.in_range(-2.0, 2.0)?),
                "ot.max_iter" => c.ot.max_iter = e.usize_in(1, usize::MAX)?,
                "ot.tol" => c.ot.tol = e.in_range(1e-14, 1e-2)?,
                "ot.c0_ratio" => c.ot.c0_ratio = e.positive()?,
                "ot.debias" => c.ot.debias = e.bool()?,
                _ => return Err(e.err("unknown key")),
            }
        }

        c.grid = GridSpec::new(nx, ny, lx, ly).map_err(|err| Error::Config {
            line: 0,
            key: "grid".into(),
            message: err.to_string(),
        })?;
        c.metric = match family {
            "constant" => MetricFamily::Constant { c0 },
            "conformal" => MetricFamily::Conformal { amplitude, k1, k2 },
            "anisotropic" => MetricFamily::Anisotropic { amplitude, k2 },
            _ => MetricFamily::File(file.ok_or_else(|| {
                family_at
                    .expect("file family comes from an entry")
                    .err("metric.file is required for the file family")
            })?),
        };
        c.density = match density {
            "sine" => DensityFamily::Sine {
                amplitude: d_amp,
                k: d_k,
            },
            _ => DensityFamily::Uniform,
        };
        c.ot.c0 = match c.metric {
            MetricFamily::Constant { c0 } => c0 * c.metric_scale,
            _ => c.metric_scale,
        };
        c.ot.source = match ot_source {
            "sinx" => OtSource::SinX {
                amplitude: ot_amp.unwrap_or(0.5),
            },
            "mix" => OtSource::Mix {
                amplitude: ot_amp.unwrap_or(0.5),
            },
            _ => OtSource::SinXSinY {
                amplitude: ot_amp.unwrap_or(1.0),
            },
        };
        // fail now rather than mid-pipeline
        c.patch_cover()?;
        c.layout().placements()?;
        Ok(c)
    }

    pub fn is_constant_metric(&self) -> bool {
        matches!(self.metric, MetricFamily::Constant { .. })
    }

    pub fn metric(&self) -> Result<MetricField> {
        let grid = self.grid;
        let g = match &self.metric {
            MetricFamily::Constant { c0 } => {
                MetricField::constant(grid, Sym2::scaled_identity(*c0))
            }
            MetricFamily::Conformal { amplitude, k1, k2 } => MetricField::from_fn(grid, |x, y| {
                Sym2::scaled_identity((2.0 * amplitude * (k1 * x).sin() * (k2 * y).sin()).exp())
            }),
            MetricFamily::Anisotropic { amplitude, k2 } => MetricField::from_fn(grid, |_, y| {
                let m = amplitude * (k2 * y).sin();
                Sym2::new(m.exp(), 0.0, (-m).exp())
            }),
            MetricFamily::File(path) => {
                let g = MetricField::from_raw(RawField::read(path)?)?;
                if g.grid.nx != grid.nx || g.grid.ny != grid.ny {
                    return Err(Error::GridMismatch(format!(
                        "{} is {}x{}, scenario grid is {}x{}",
                        path.display(),
                        g.grid.nx,
                        g.grid.ny,
                        grid.nx,
                        grid.ny
                    )));
                }
                g
            }
        };
        Ok(g.scale(self.metric_scale))
    }

    /// Strictly positive density with `int h dV_g = 1`.
    pub fn density(&self, g: &MetricField) -> Result<ScalarField> {
        let raw = match self.density {
            DensityFamily::Uniform => ScalarField::constant(self.grid, 1.0),
            DensityFamily::Sine { amplitude, k } => {
                ScalarField::from_fn(self.grid, |_, y| 1.0 + amplitude * (k * y).sin())
            }
        };
        let mass = integrate(&raw, g)?;
        Ok(raw.scale(1.0 / mass))
    }

    pub fn layout(&self) -> LayoutConfig {
        let mut layout = LayoutConfig::canonical(&self.grid);
        let unit = self.grid.lx.min(self.grid.ly) / TAU;
        layout.centers.truncate(self.probe_centers);
        layout.orientations = self
            .probe_angles
            .iter()
            .map(|a| {
                let t = a.to_radians();
                [t.cos(), t.sin()]
            })
            .collect();
        layout.half_separation = self.probe_half_separation * unit;
        layout.width = self.probe_width * unit;
        layout
    }

    pub fn patch_cover(&self) -> Result<PatchCover> {
        PatchCover::uniform(
            self.grid,
            self.patches_per_axis,
            self.patch_side_fraction,
            self.patch_margin,
        )
    }
}

/// Ground truth of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub g: MetricField,
    pub h: ScalarField,
}

impl Truth {
    pub fn synthesize(cfg: &ScenarioConfig) -> Result<Self> {
        let g = cfg.metric()?;
        let h = cfg.density(&g)?;
        Ok(Truth { g, h })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.g.to_raw("g_true")?.write(dir.join("g_true.gfld"))?;
        self.h.to_raw("h")?.write(dir.join("h.gfld"))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let g = MetricField::from_raw(RawField::read(dir.join("g_true.gfld"))?)?;
        let h = ScalarField::from_raw(RawField::read(dir.join("h.gfld"))?)?;
        g.grid.check_same(&h.grid)?;
        Ok(Truth { g, h })
    }
}

/// Solves every probe under the true fields and records `H`, adding noise
/// when the scenario asks for it. The dictionary keeps the potentials.
pub fn simulate(cfg: &ScenarioConfig, truth: &Truth) -> Result<(MeasurementSet, ProbeDictionary)> {
    let dict = build_dictionary(&truth.g, &truth.h, &cfg.layout(), &cfg.solver)?;
    let ms = MeasurementSet::from_dictionary(&truth.g, &dict, &cfg.hash)?;
    let ms = if cfg.noise > 0.0 {
        ms.add_noise(cfg.noise, cfg.seed)?
    } else {
        ms
    };
    Ok((ms, dict))
}
