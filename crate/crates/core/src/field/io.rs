//! Field serialization: flat little-endian `f64` payload plus a JSON sidecar.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FieldError, GridSpec, Result, ScalarField, Variable};

/// Sidecar header written next to every `.bin` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct FieldHeader {
    pub h: usize,
    pub w: usize,
    #[serde(rename = "variable")]
    pub variable: String,
    #[serde(rename = "unit")]
    pub unit: String,
    #[serde(rename = "lx", default = "default_length")]
    pub lx: f64,
    #[serde(rename = "ly", default = "default_length")]
    pub ly: f64,
}

fn default_length() -> f64 {
    std::f64::consts::TAU
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `path` (binary, row-major LE f64) and `path.json`'s sibling header.
pub fn write_field(path: &Path, f: &ScalarField) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for v in f.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    let header = FieldHeader {
        h: f.grid.height,
        w: f.grid.width,
        variable: f.variable.name.clone(),
        unit: f.variable.unit.clone(),
        lx: f.grid.lx,
        ly: f.grid.ly,
    };
    std::fs::write(sidecar(path), serde_json::to_string_pretty(&header)? + "\n")?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<ScalarField> {
    let header: FieldHeader = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
    let grid = GridSpec::new(header.h, header.w, header.lx, header.ly)?;
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != grid.len() * 8 {
        return Err(FieldError::ShapeMismatch {
            expected: grid.len(),
            actual: bytes.len() / 8,
        });
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ScalarField::new(grid, Variable::new(header.variable, header.unit), values)
}

/// CSV with columns `row,col,x,y,value` for plotting tools.
pub fn write_field_csv(path: &Path, f: &ScalarField) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "row,col,x,y,{}", f.name())?;
    for i in 0..f.grid.height {
        for j in 0..f.grid.width {
            writeln!(
                out,
                "{i},{j},{},{},{}",
                f.grid.x(j),
                f.grid.y(i),
                f.at(i, j)
            )?;
        }
    }
    out.flush()?;
    Ok(())
}
