//! Unit metadata conversion. Only the affine pairs the reports need are
//! supported; anything else is an explicit error.

use super::{FieldError, Result, ScalarField, Variable};

/// `target = scale * source + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitConversion {
    pub scale: f64,
    pub offset: f64,
}

impl UnitConversion {
    pub const IDENTITY: Self = Self {
        scale: 1.0,
        offset: 0.0,
    };

    /// Looks up the conversion from `from` to `to`.
    pub fn between(from: &str, to: &str) -> Result<Self> {
        let (a, b) = (canonical(from), canonical(to));
        let conv = match (a, b) {
            _ if a == b => Self::IDENTITY,
            ("K", "degC") => Self {
                scale: 1.0,
                offset: -273.15,
            },
            ("degC", "K") => Self {
                scale: 1.0,
                offset: 273.15,
            },
            ("Pa", "hPa") => Self {
                scale: 0.01,
                offset: 0.0,
            },
            ("hPa", "Pa") => Self {
                scale: 100.0,
                offset: 0.0,
            },
            _ => {
                return Err(FieldError::UnsupportedConversion {
                    from: from.to_string(),
                    to: to.to_string(),
                })
            }
        };
        Ok(conv)
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn value(&self, x: f64) -> f64 {
        if self.is_identity() {
            x
        } else {
            self.scale * x + self.offset
        }
    }

    /// Converts a spread (std, RMSE): offsets cancel.
    pub fn spread(&self, x: f64) -> f64 {
        x * self.scale.abs()
    }
}

fn canonical(unit: &str) -> &str {
    match unit.trim() {
        "°C" | "degC" | "C" | "celsius" => "degC",
        "K" | "kelvin" => "K",
        other => other,
    }
}

/// Converts a field into `target` units. Identity conversions return a
/// bit-identical copy.
pub fn convert_units(f: &ScalarField, target: &str) -> Result<ScalarField> {
    let conv = UnitConversion::between(f.unit(), target)?;
    let mut out = if conv.is_identity() {
        f.clone()
    } else {
        f.map(|x| conv.value(x))
    };
    out.variable = Variable::new(f.name(), target);
    Ok(out)
}
