//! `gfld 1` field files: one ASCII header line
//! `gfld 1 <nx> <ny> <lx> <ly> <ncomp> <name>\n` followed by little-endian
//! f64 values, component-major and then in node order (`x1` fastest).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{CovectorField, GridSpec, MetricField, ScalarField, VectorField};

const MAGIC: &str = "gfld";
const VERSION: &str = "1";
const MAX_HEADER: usize = 512;

/// Component-major field payload with a name, independent of its geometric meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct RawField {
    pub grid: GridSpec,
    pub name: String,
    pub comps: Vec<Vec<f64>>,
}

impl RawField {
    pub fn new(grid: GridSpec, name: &str, comps: Vec<Vec<f64>>) -> Result<Self> {
        if name.is_empty() || name.chars().any(|c| c.is_whitespace()) {
            return Err(Error::InvalidConfig(format!(
                "field name `{name}` must be non-empty and contain no whitespace"
            )));
        }
        if comps.is_empty() {
            return Err(Error::InvalidConfig("field has no components".into()));
        }
        for c in &comps {
            if c.len() != grid.len() {
                return Err(Error::LengthMismatch {
                    expected: grid.len(),
                    got: c.len(),
                });
            }
        }
        Ok(RawField {
            grid,
            name: name.to_string(),
            comps,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let g = &self.grid;
        let header = format!(
            "{MAGIC} {VERSION} {} {} {:?} {:?} {} {}\n",
            g.nx,
            g.ny,
            g.lx,
            g.ly,
            self.comps.len(),
            self.name
        );
        let mut out = Vec::with_capacity(header.len() + 8 * g.len() * self.comps.len());
        out.extend_from_slice(header.as_bytes());
        for c in &self.comps {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let nl = bytes
            .iter()
            .take(MAX_HEADER)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::format(path, "header is not utf-8"))?;
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 8 || parts[0] != MAGIC {
            return Err(Error::format(path, "bad magic or header arity"));
        }
        if parts[1] != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported version {}", parts[1]),
            ));
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad {what} `{s}`")))
        };
        let parse_f64 = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::format(path, format!("bad {what} `{s}`")))
        };
        let nx = parse_usize(parts[2], "nx")?;
        let ny = parse_usize(parts[3], "ny")?;
        let lx = parse_f64(parts[4], "lx")?;
        let ly = parse_f64(parts[5], "ly")?;
        let ncomp = parse_usize(parts[6], "ncomp")?;
        let grid = GridSpec::new(nx, ny, lx, ly).map_err(|e| Error::format(path, e.to_string()))?;
        if ncomp == 0 {
            return Err(Error::format(path, "zero components"));
        }
        let body = &bytes[nl + 1..];
        let expected = 8 * grid.len() * ncomp;
        if body.len() != expected {
            return Err(Error::format(
                path,
                format!("payload has {} bytes, expected {expected}", body.len()),
            ));
        }
        let mut comps = Vec::with_capacity(ncomp);
        for c in 0..ncomp {
            let chunk = &body[c * 8 * grid.len()..(c + 1) * 8 * grid.len()];
            comps.push(
                chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect(),
            );
        }
        Ok(RawField {
            grid,
            name: parts[7].to_string(),
            comps,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn expect_comps(&self, n: usize) -> Result<()> {
        if self.comps.len() != n {
            return Err(Error::Format {
                path: self.name.clone().into(),
                message: format!("expected {n} components, found {}", self.comps.len()),
            });
        }
        Ok(())
    }
}

impl ScalarField {
    pub fn to_raw(&self, name: &str) -> Result<RawField> {
        RawField::new(self.grid, name, vec![self.values.clone()])
    }

    pub fn from_raw(raw: RawField) -> Result<Self> {
        raw.expect_comps(1)?;
        let mut c = raw.comps;
        ScalarField::new(raw.grid, c.remove(0))
    }
}

impl VectorField {
    pub fn to_raw(&self, name: &str) -> Result<RawField> {
        RawField::new(self.grid, name, vec![self.c1.clone(), self.c2.clone()])
    }

    pub fn from_raw(raw: RawField) -> Result<Self> {
        raw.expect_comps(2)?;
        let mut c = raw.comps;
        let c2 = c.pop().unwrap();
        let c1 = c.pop().unwrap();
        VectorField::new(raw.grid, c1, c2)
    }
}

impl CovectorField {
    pub fn to_raw(&self, name: &str) -> Result<RawField> {
        RawField::new(self.grid, name, vec![self.c1.clone(), self.c2.clone()])
    }

    pub fn from_raw(raw: RawField) -> Result<Self> {
        raw.expect_comps(2)?;
        let mut c = raw.comps;
        let c2 = c.pop().unwrap();
        let c1 = c.pop().unwrap();
        CovectorField::new(raw.grid, c1, c2)
    }
}

impl MetricField {
    pub fn to_raw(&self, name: &str) -> Result<RawField> {
        RawField::new(
            self.grid,
            name,
            vec![self.g11.clone(), self.g12.clone(), self.g22.clone()],
        )
    }

    /// Reads a metric and checks positive-definiteness.
    pub fn from_raw(raw: RawField) -> Result<Self> {
        raw.expect_comps(3)?;
        let mut c = raw.comps;
        let g22 = c.pop().unwrap();
        let g12 = c.pop().unwrap();
        let g11 = c.pop().unwrap();
        MetricField::new(raw.grid, g11, g12, g22)
    }
}

/// Writes a boolean mask as a one-component 0/1 field.
pub fn mask_to_raw(grid: GridSpec, mask: &[bool], name: &str) -> Result<RawField> {
    RawField::new(
        grid,
        name,
        vec![mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()],
    )
}
