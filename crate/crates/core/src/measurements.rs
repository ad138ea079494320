//! The internal data `H = g^{-1} grad phi` for every probe, with optional noise
//! and a directory format (manifest plus one field file per probe).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gfld::RawField;
use crate::grid::{grad, sharp, GridSpec, MetricField, ScalarField, VectorField};
use crate::probes::{DipolePlacement, ProbeDictionary};

const MANIFEST: &str = "manifest.txt";
const MAGIC: &str = "otmetric-measurements 1";

/// `sharp(g, grad(phi))`.
pub fn measure(g: &MetricField, phi: &ScalarField) -> Result<VectorField> {
    g.grid.check_same(&phi.grid)?;
    sharp(g, &grad(phi))
}

/// Hex SHA-256 of a configuration text, used as provenance tag.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub id: String,
    pub placement: DipolePlacement,
    pub h: VectorField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub grid: GridSpec,
    pub probes: Vec<Measurement>,
    pub config_hash: String,
    /// Seed of the last noise draw; zero when no noise was added.
    pub seed: u64,
    pub noise: f64,
}

impl MeasurementSet {
    pub fn from_dictionary(
        g: &MetricField,
        dict: &ProbeDictionary,
        config_hash: &str,
    ) -> Result<Self> {
        let probes = dict
            .entries
            .iter()
            .map(|e| {
                Ok(Measurement {
                    id: e.source.id.clone(),
                    placement: e.source.placement,
                    h: measure(g, &e.phi)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MeasurementSet {
            grid: g.grid,
            probes,
            config_hash: config_hash.to_string(),
            seed: 0,
            noise: 0.0,
        })
    }

    pub fn fields(&self) -> Vec<&VectorField> {
        self.probes.iter().map(|p| &p.h).collect()
    }

    pub fn placements(&self) -> Vec<DipolePlacement> {
        self.probes.iter().map(|p| p.placement).collect()
    }

    /// Adds i.i.d. centred Gaussian noise of standard deviation
    /// `sigma * rms|H|` (per probe) to every component.
    pub fn add_noise(&self, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise level {sigma} must be >= 0"
            )));
        }
        let mut out = self.clone();
        if sigma == 0.0 {
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut out.probes {
            let n = p.h.grid.len() as f64;
            let ms: f64 =
                p.h.c1
                    .iter()
                    .zip(&p.h.c2)
                    .map(|(a, b)| a * a + b * b)
                    .sum::<f64>()
                    / n;
            let std = sigma * ms.sqrt();
            for v in p.h.c1.iter_mut().chain(p.h.c2.iter_mut()) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += std * z;
            }
        }
        out.seed = seed;
        out.noise = sigma;
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let g = &self.grid;
        let mut m = String::new();
        let _ = writeln!(m, "{MAGIC}");
        let _ = writeln!(m, "grid {} {} {:?} {:?}", g.nx, g.ny, g.lx, g.ly);
        let _ = writeln!(m, "config_hash {}", self.config_hash);
        let _ = writeln!(m, "seed {}", self.seed);
        let _ = writeln!(m, "noise {:?}", self.noise);
        let _ = writeln!(m, "probes {}", self.probes.len());
        for p in &self.probes {
            let file = format!("{}.gfld", p.id);
            let pl = &p.placement;
            let _ = writeln!(
                m,
                "probe {} {:?} {:?} {:?} {:?} {:?} {file}",
                p.id, pl.plus[0], pl.plus[1], pl.minus[0], pl.minus[1], pl.width
            );
            p.h.to_raw(&p.id)?.write(dir.join(&file))?;
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, m).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |msg: String| Error::format(&path, msg);
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("bad manifest magic".into()));
        }
        let mut field = |key: &str| -> Result<Vec<String>> {
            let line = lines
                .next()
                .ok_or_else(|| bad(format!("missing `{key}` line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(format!("expected `{key}`, found `{line}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("bad number `{s}`")))
        };
        let int = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| bad(format!("bad integer `{s}`")))
        };

        let gl = field("grid")?;
        if gl.len() != 4 {
            return Err(bad("grid line needs nx ny lx ly".into()));
        }
        let grid = GridSpec::new(
            int(&gl[0])? as usize,
            int(&gl[1])? as usize,
            num(&gl[2])?,
            num(&gl[3])?,
        )
        .map_err(|e| bad(e.to_string()))?;
        let config_hash = field("config_hash")?.first().cloned().unwrap_or_default();
        let seed = int(field("seed")?.first().map(String::as_str).unwrap_or(""))?;
        let noise = num(field("noise")?.first().map(String::as_str).unwrap_or(""))?;
        let count = int(field("probes")?.first().map(String::as_str).unwrap_or(""))? as usize;
        let mut probes = Vec::with_capacity(count);
        for _ in 0..count {
            let p = field("probe")?;
            if p.len() != 7 {
                return Err(bad(format!(
                    "probe line has {} fields, expected 7",
                    p.len()
                )));
            }
            let placement = DipolePlacement {
                plus: [num(&p[1])?, num(&p[2])?],
                minus: [num(&p[3])?, num(&p[4])?],
                width: num(&p[5])?,
            };
            let raw = RawField::read(dir.join(&p[6]))?;
            if raw.grid != grid {
                return Err(Error::format(
                    dir.join(&p[6]),
                    "field grid does not match the manifest",
                ));
            }
            let h = VectorField::from_raw(raw)
                .map_err(|e| Error::format(dir.join(&p[6]), e.to_string()))?;
            probes.push(Measurement {
                id: p[0].clone(),
                placement,
                h,
            });
        }
        Ok(MeasurementSet {
            grid,
            probes,
            config_hash,
            seed,
            noise,
        })
    }
}
