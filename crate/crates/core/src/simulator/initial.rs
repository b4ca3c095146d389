//! Analytic and seeded initial conditions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::periodic_delta;
use crate::field::{FlowState, GridSpec, Result, ScalarField, Variable, VORTICITY};

fn omega_var() -> Variable {
    Variable::new(VORTICITY, "1/s")
}

/// Taylor-Green vorticity `2 A sin(kx x) sin(ky y)`; on `[0, 2pi)^2` the
/// velocity is `A (sin x cos y, -cos x sin y)`.
pub fn taylor_green_vorticity(grid: GridSpec, amplitude: f64) -> ScalarField {
    let kx = std::f64::consts::TAU / grid.lx;
    let ky = std::f64::consts::TAU / grid.ly;
    ScalarField::from_fn(grid, omega_var(), |x, y| {
        2.0 * amplitude * (kx * x).sin() * (ky * y).sin()
    })
}

pub fn taylor_green(grid: GridSpec, amplitude: f64) -> Result<FlowState> {
    FlowState::from_vorticity(taylor_green_vorticity(grid, amplitude), 0.0)
}

/// Random band-limited vorticity: Gaussian coefficients on every mode with
/// `0 < max(|mx|, |my|) <= max_mode`, rescaled to RMS `amplitude`.
pub fn random_vorticity(grid: GridSpec, seed: u64, amplitude: f64, max_mode: i64) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut modes = Vec::new();
    for my in 0..=max_mode {
        for mx in -max_mode..=max_mode {
            if my == 0 && mx <= 0 {
                continue;
            }
            let k = ((mx * mx + my * my) as f64).sqrt();
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            modes.push((mx as f64, my as f64, a / k, b / k));
        }
    }
    let kx = std::f64::consts::TAU / grid.lx;
    let ky = std::f64::consts::TAU / grid.ly;
    let raw = ScalarField::from_fn(grid, omega_var(), |x, y| {
        modes
            .iter()
            .map(|(mx, my, a, b)| {
                let phase = mx * kx * x + my * ky * y;
                a * phase.cos() + b * phase.sin()
            })
            .sum()
    });
    let rms = (raw.values().iter().map(|v| v * v).sum::<f64>() / grid.len() as f64).sqrt();
    let scale = if rms > 0.0 { amplitude / rms } else { 0.0 };
    raw.map(|v| v * scale)
}

pub fn random_smooth(grid: GridSpec, seed: u64, amplitude: f64, max_mode: i64) -> Result<FlowState> {
    FlowState::from_vorticity(random_vorticity(grid, seed, amplitude, max_mode), 0.0)
}

/// Gaussian vortex `A exp(-r^2 / (2 sigma^2))` centred at `(cx, cy)` using the
/// periodic distance.
pub fn gaussian_vortex(grid: GridSpec, cx: f64, cy: f64, sigma: f64, amplitude: f64) -> ScalarField {
    ScalarField::from_fn(grid, omega_var(), |x, y| {
        let dx = periodic_delta(x - cx, grid.lx);
        let dy = periodic_delta(y - cy, grid.ly);
        amplitude * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    })
}

/// Counter-rotating pair placed at a quarter and three quarters of the width.
pub fn vortex_pair(grid: GridSpec, sigma: f64, amplitude: f64) -> Result<FlowState> {
    let a = gaussian_vortex(grid, 0.25 * grid.lx, 0.5 * grid.ly, sigma, amplitude);
    let b = gaussian_vortex(grid, 0.75 * grid.lx, 0.5 * grid.ly, sigma, -amplitude);
    FlowState::from_vorticity(a.axpby(1.0, &b, 1.0)?, 0.0)
}
