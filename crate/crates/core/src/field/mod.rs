//! Gridded physical fields on a doubly periodic domain.
//!
//! Everything the rest of the crate exchanges is built from these types: a
//! [`GridSpec`] describing the torus, [`ScalarField`] channels carrying a
//! variable name and unit, [`VectorField`] velocity pairs and the multi-channel
//! [`FlowState`]. Values are stored row-major: row `i` is the `y` direction,
//! column `j` the `x` direction.

mod io;
mod spectral;
mod units;

pub use io::{read_field, write_field, write_field_csv, FieldHeader};
pub use spectral::{
    divergence, enstrophy, kinetic_energy, signed_mode as signed_mode_index, spectral_index,
    strain_magnitude, velocity_from_vorticity, vorticity, SpectralGrid,
};
pub use units::{convert_units, UnitConversion};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VORTICITY: &str = "vorticity";
pub const VELOCITY_U: &str = "u";
pub const VELOCITY_V: &str = "v";
pub const FORCING: &str = "forcing";

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("shape mismatch: expected {expected} values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("grids differ between operands")]
    GridMismatch,
    #[error("non-finite value in `{variable}` at cell {index}")]
    NonFinite { variable: String, index: usize },
    #[error("unsupported unit conversion {from} -> {to}")]
    UnsupportedConversion { from: String, to: String },
    #[error("missing channel `{0}`")]
    MissingChannel(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FieldError>;

/// Doubly periodic rectangular grid. Both sides must be even and at least 8
/// cells so the spectral transforms have a well defined Nyquist row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub lx: f64,
    pub ly: f64,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, lx: f64, ly: f64) -> Result<Self> {
        let grid = Self {
            height,
            width,
            lx,
            ly,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Square `n x n` grid on `[0, 2pi)^2`.
    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n, std::f64::consts::TAU, std::f64::consts::TAU)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("height", self.height), ("width", self.width)] {
            if n < 8 || n % 2 != 0 {
                return Err(FieldError::InvalidGrid(format!(
                    "{name} must be even and >= 8, got {n}"
                )));
            }
        }
        if !(self.lx > 0.0 && self.lx.is_finite() && self.ly > 0.0 && self.ly.is_finite()) {
            return Err(FieldError::InvalidGrid(format!(
                "domain lengths must be positive, got ({}, {})",
                self.lx, self.ly
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.width as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / self.height as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    /// Physical `x` coordinate of column `j`.
    pub fn x(&self, j: usize) -> f64 {
        j as f64 * self.dx()
    }

    /// Physical `y` coordinate of row `i`.
    pub fn y(&self, i: usize) -> f64 {
        i as f64 * self.dy()
    }
}

/// Name and unit of a physical variable, e.g. `vorticity [1/s]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub unit: String,
}

impl Variable {
    pub fn new(name: impl Into<String>, unit: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            unit: unit.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    pub grid: GridSpec,
    pub variable: Variable,
    values: Vec<f64>,
}

impl ScalarField {
    /// Wraps row-major values. Only the shape is checked here; operators that
    /// need finite input call [`ScalarField::ensure_finite`].
    pub fn new(grid: GridSpec, variable: Variable, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(FieldError::ShapeMismatch {
                expected: grid.len(),
                actual: values.len(),
            });
        }
        Ok(Self {
            grid,
            variable,
            values,
        })
    }

    pub fn zeros(grid: GridSpec, variable: Variable) -> Self {
        Self {
            grid,
            variable,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: GridSpec, variable: Variable, value: f64) -> Self {
        Self {
            grid,
            variable,
            values: vec![value; grid.len()],
        }
    }

    /// Samples `f(x, y)` at every cell.
    pub fn from_fn(grid: GridSpec, variable: Variable, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..grid.height {
            let y = grid.y(i);
            for j in 0..grid.width {
                values.push(f(grid.x(j), y));
            }
        }
        Self {
            grid,
            variable,
            values,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.width + col]
    }

    pub fn name(&self) -> &str {
        &self.variable.name
    }

    pub fn unit(&self) -> &str {
        &self.variable.unit
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(FieldError::NonFinite {
                variable: self.variable.name.clone(),
                index,
            }),
            None => Ok(()),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            variable: self.variable.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `a * self + b * other`, keeping this field's variable metadata.
    pub fn axpby(&self, a: f64, other: &ScalarField, b: f64) -> Result<Self> {
        if self.grid != other.grid {
            return Err(FieldError::GridMismatch);
        }
        Ok(Self {
            grid: self.grid,
            variable: self.variable.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    /// Periodic shift by whole cells: `out[i][j] = self[i - di][j - dj]`.
    pub fn roll(&self, di: isize, dj: isize) -> Self {
        let (h, w) = (self.grid.height as isize, self.grid.width as isize);
        let mut values = vec![0.0; self.values.len()];
        for i in 0..h {
            for j in 0..w {
                let si = (i - di).rem_euclid(h);
                let sj = (j - dj).rem_euclid(w);
                values[(i * w + j) as usize] = self.values[(si * w + sj) as usize];
            }
        }
        Self {
            grid: self.grid,
            variable: self.variable.clone(),
            values,
        }
    }

    pub fn stats(&self) -> FieldStats {
        field_stats(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorField {
    pub grid: GridSpec,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl VectorField {
    pub fn new(grid: GridSpec, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        for comp in [&u, &v] {
            if comp.len() != grid.len() {
                return Err(FieldError::ShapeMismatch {
                    expected: grid.len(),
                    actual: comp.len(),
                });
            }
        }
        Ok(Self { grid, u, v })
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let mut u = Vec::with_capacity(grid.len());
        let mut v = Vec::with_capacity(grid.len());
        for i in 0..grid.height {
            for j in 0..grid.width {
                let (a, b) = f(grid.x(j), grid.y(i));
                u.push(a);
                v.push(b);
            }
        }
        Self { grid, u, v }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            u: vec![0.0; grid.len()],
            v: vec![0.0; grid.len()],
        }
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (name, comp) in [(VELOCITY_U, &self.u), (VELOCITY_V, &self.v)] {
            if let Some(index) = comp.iter().position(|x| !x.is_finite()) {
                return Err(FieldError::NonFinite {
                    variable: name.to_string(),
                    index,
                });
            }
        }
        Ok(())
    }

    pub fn speed(&self) -> ScalarField {
        let values = self
            .u
            .iter()
            .zip(&self.v)
            .map(|(a, b)| a.hypot(*b))
            .collect();
        ScalarField {
            grid: self.grid,
            variable: Variable::new("speed", "m/s"),
            values,
        }
    }

    /// Splits into `u` and `v` scalar channels with the given unit.
    pub fn into_channels(self, unit: &str) -> (ScalarField, ScalarField) {
        (
            ScalarField {
                grid: self.grid,
                variable: Variable::new(VELOCITY_U, unit),
                values: self.u,
            },
            ScalarField {
                grid: self.grid,
                variable: Variable::new(VELOCITY_V, unit),
                values: self.v,
            },
        )
    }
}

/// Summary statistics in the field's own unit. `std` is the population form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub std: f64,
}

pub fn field_stats(f: &ScalarField) -> FieldStats {
    let n = f.values.len() as f64;
    let mean = f.values.iter().sum::<f64>() / n;
    let (min, max) = f
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let var = f.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    // Summation error can push the mean a few ulps outside [min, max] for
    // constant fields.
    FieldStats {
        mean: mean.clamp(min, max),
        min,
        max,
        std: var.sqrt(),
    }
}

/// Multi-channel state `x` exchanged between the simulator, critic, projector
/// and report. Channel order is preserved; names are unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub grid: GridSpec,
    pub time: f64,
    pub channels: Vec<ScalarField>,
}

impl FlowState {
    pub fn new(grid: GridSpec, time: f64) -> Self {
        Self {
            grid,
            time,
            channels: Vec::new(),
        }
    }

    /// State holding a vorticity channel and the velocity derived from it.
    pub fn from_vorticity(omega: ScalarField, time: f64) -> Result<Self> {
        let velocity = velocity_from_vorticity(&omega)?;
        let grid = omega.grid;
        let (u, v) = velocity.into_channels("m/s");
        let mut state = Self::new(grid, time);
        state.channels = vec![omega, u, v];
        Ok(state)
    }

    pub fn with_channel(mut self, field: ScalarField) -> Result<Self> {
        self.insert(field)?;
        Ok(self)
    }

    /// Inserts or replaces the channel with the same variable name.
    pub fn insert(&mut self, field: ScalarField) -> Result<()> {
        if field.grid != self.grid {
            return Err(FieldError::GridMismatch);
        }
        match self
            .channels
            .iter_mut()
            .find(|c| c.variable.name == field.variable.name)
        {
            Some(slot) => *slot = field,
            None => self.channels.push(field),
        }
        Ok(())
    }

    pub fn channel(&self, name: &str) -> Option<&ScalarField> {
        self.channels.iter().find(|c| c.variable.name == name)
    }

    pub fn channel_mut(&mut self, name: &str) -> Option<&mut ScalarField> {
        self.channels.iter_mut().find(|c| c.variable.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&ScalarField> {
        self.channel(name)
            .ok_or_else(|| FieldError::MissingChannel(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<ScalarField> {
        let idx = self.channels.iter().position(|c| c.variable.name == name)?;
        Some(self.channels.remove(idx))
    }

    /// Velocity carried explicitly as `u`/`v` channels, if both are present.
    pub fn velocity(&self) -> Option<VectorField> {
        let u = self.channel(VELOCITY_U)?;
        let v = self.channel(VELOCITY_V)?;
        Some(VectorField {
            grid: self.grid,
            u: u.values.clone(),
            v: v.values.clone(),
        })
    }

    /// Vorticity channel, or the curl of the velocity channels.
    pub fn vorticity_field(&self) -> Result<ScalarField> {
        if let Some(w) = self.channel(VORTICITY) {
            return Ok(w.clone());
        }
        match self.velocity() {
            Some(vel) => vorticity(&vel),
            None => Err(FieldError::MissingChannel(VORTICITY.to_string())),
        }
    }

    pub fn channel_names(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.name()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.channels
            .iter()
            .all(|c| c.values.iter().all(|v| v.is_finite()))
    }
}
