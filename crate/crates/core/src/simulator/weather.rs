//! Two-channel toy "weather" diagnostics derived from a flow state, used by
//! report demos: significant wave height from kinetic energy density and a
//! sea-level pressure anomaly from the streamfunction (cyclonic = low).

use serde::{Deserialize, Serialize};

use crate::field::{FlowState, Result, ScalarField, SpectralGrid, Variable};

pub const WAVE_HEIGHT: &str = "wave_height";
pub const PRESSURE: &str = "pressure";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherDiagnostics {
    /// Wave height at rest, metres.
    pub base_wave_height: f64,
    /// Metres per unit squared speed.
    pub wave_gain: f64,
    /// Pascals.
    pub base_pressure: f64,
    /// Pascals per unit streamfunction.
    pub pressure_gain: f64,
}

impl Default for WeatherDiagnostics {
    fn default() -> Self {
        Self {
            base_wave_height: 2.0,
            wave_gain: 3.0,
            base_pressure: 101_325.0,
            pressure_gain: 800.0,
        }
    }
}

impl WeatherDiagnostics {
    /// Returns `state` with `wave_height [m]` and `pressure [Pa]` channels
    /// added.
    pub fn apply(&self, state: &FlowState) -> Result<FlowState> {
        let omega = state.vorticity_field()?;
        omega.ensure_finite()?;
        let spec = SpectralGrid::new(state.grid)?;
        let omega_hat = spec.forward(omega.values());
        let (u_hat, v_hat) = spec.velocity_spectra(&omega_hat);
        let u = spec.inverse_real(u_hat);
        let v = spec.inverse_real(v_hat);
        let psi_hat = omega_hat
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let k2 = spec.k_squared(i);
                if k2 == 0.0 {
                    Default::default()
                } else {
                    c / k2
                }
            })
            .collect();
        let psi = spec.inverse_real(psi_hat);
        let wave = u
            .iter()
            .zip(&v)
            .map(|(a, b)| self.base_wave_height + self.wave_gain * (a * a + b * b))
            .collect();
        let pressure = psi
            .iter()
            .map(|p| self.base_pressure - self.pressure_gain * p)
            .collect();
        let mut out = state.clone();
        out.insert(ScalarField::new(state.grid, Variable::new(WAVE_HEIGHT, "m"), wave)?)?;
        out.insert(ScalarField::new(state.grid, Variable::new(PRESSURE, "Pa"), pressure)?)?;
        Ok(out)
    }
}
