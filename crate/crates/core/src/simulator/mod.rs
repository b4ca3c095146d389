//! Latent flow simulator and perturbative ensembles.
//!
//! The latent space is the truncated Fourier spectrum of vorticity: the lowest
//! `M x M` modes (`|m| < M/2` on both axes) under the orthonormal DFT scaling,
//! so Parseval holds between the decoded field and the latent coefficients.
//! [`propagate`] advances a latent state with a pseudo-spectral vorticity-form
//! Navier-Stokes integrator (RK4, optional 2/3-rule dealiasing) run on the
//! full grid, truncating back to the latent window at the end of each call.

mod ensemble;
pub mod initial;
pub mod weather;

pub use ensemble::{
    ensemble_rollout, ensemble_rollout_with_seeds, ensemble_spread, member_seed, EnsembleForecast,
    EnsembleSpec,
};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{
    spectral_index, FieldError, FlowState, GridSpec, ScalarField, SpectralGrid, Variable, FORCING,
    VORTICITY,
};

/// Advective CFL bound `dt * (max|u|/dx + max|v|/dy)` for RK4.
pub const CFL_MAX: f64 = 1.0;
/// Diffusive bound `nu * dt * max|k|^2`, inside the RK4 real-axis stability
/// interval of about 2.78.
pub const DIFFUSIVE_MAX: f64 = 2.5;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("latent truncation {modes} invalid for {height}x{width} grid (need even, 4 <= M <= min(H, W))")]
    Truncation {
        modes: usize,
        height: usize,
        width: usize,
    },
    #[error("CFL bound violated: {what} = {value:.4e} exceeds {limit}")]
    Cfl {
        what: &'static str,
        value: f64,
        limit: f64,
    },
    #[error("solution diverged at step {step} (non-finite mode)")]
    Diverged { step: usize },
    #[error("ensemble member {member} failed: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<SimError>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Analytic vorticity source added to the right-hand side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Forcing {
    #[default]
    None,
    /// `amplitude * cos(wavenumber * y)`.
    Kolmogorov { amplitude: f64, wavenumber: f64 },
    /// `amplitude * exp(-r^2 / (2 radius^2))` around `(x, y)`, periodic
    /// distance.
    GaussianBump {
        amplitude: f64,
        x: f64,
        y: f64,
        radius: f64,
    },
}

impl Forcing {
    pub fn field(&self, grid: GridSpec) -> Option<ScalarField> {
        let var = Variable::new(FORCING, "1/s^2");
        match *self {
            Forcing::None => None,
            Forcing::Kolmogorov {
                amplitude,
                wavenumber,
            } => Some(ScalarField::from_fn(grid, var, |_, y| {
                amplitude * (wavenumber * y).cos()
            })),
            Forcing::GaussianBump {
                amplitude,
                x: cx,
                y: cy,
                radius,
            } => Some(ScalarField::from_fn(grid, var, |x, y| {
                let dx = periodic_delta(x - cx, grid.lx);
                let dy = periodic_delta(y - cy, grid.ly);
                amplitude * (-(dx * dx + dy * dy) / (2.0 * radius * radius)).exp()
            })),
        }
    }
}

/// Separation `d` wrapped into `[-length/2, length/2]`.
pub fn periodic_delta(d: f64, length: f64) -> f64 {
    d - length * (d / length).round()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorConfig {
    /// Kinematic viscosity (nondimensional, >= 0).
    pub viscosity: f64,
    pub dt: f64,
    /// Solver steps per output (the lead time of one propagate call).
    pub steps_per_output: usize,
    pub dealias: bool,
    pub forcing: Forcing,
    pub seed: u64,
    /// Latent truncation `M`; `None` means `H/2`.
    pub latent_modes: Option<usize>,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            viscosity: 1e-2,
            dt: 1e-3,
            steps_per_output: 10,
            dealias: true,
            forcing: Forcing::None,
            seed: 0,
            latent_modes: None,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.viscosity >= 0.0 && self.viscosity.is_finite()) {
            return Err(SimError::Config(format!("viscosity must be >= 0, got {}", self.viscosity)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::Config(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.steps_per_output == 0 {
            return Err(SimError::Config("steps_per_output must be >= 1".into()));
        }
        Ok(())
    }

    pub fn modes_for(&self, grid: GridSpec) -> usize {
        self.latent_modes.unwrap_or(grid.height.min(grid.width) / 2)
    }
}

/// Compressed state: truncated orthonormal vorticity spectrum plus the static
/// forcing field carried alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub grid: GridSpec,
    pub modes: usize,
    pub time: f64,
    /// `modes x modes`, row-major, FFT ordering on both axes.
    pub coeffs: Vec<Complex64>,
    pub forcing: Option<Vec<f64>>,
}

impl LatentState {
    fn signed(&self, a: usize) -> i64 {
        crate::field::signed_mode_index(a, self.modes)
    }

    /// Whether latent index `(a, b)` lies inside the retained window.
    pub fn retained(&self, a: usize, b: usize) -> bool {
        let half = (self.modes / 2) as i64;
        self.signed(a).abs() < half && self.signed(b).abs() < half
    }

    /// Real degrees of freedom perturbed by [`perturb_latent`]: every retained
    /// mode except the mean, counted over Hermitian pairs.
    pub fn real_dof(&self) -> usize {
        (self.modes - 1).pow(2) - 1
    }

    pub fn squared_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    fn check(&self) -> Result<()> {
        check_modes(self.grid, self.modes)
    }
}

fn check_modes(grid: GridSpec, modes: usize) -> Result<()> {
    if modes < 4 || !modes.is_multiple_of(2) || modes > grid.height.min(grid.width) {
        return Err(SimError::Truncation {
            modes,
            height: grid.height,
            width: grid.width,
        });
    }
    Ok(())
}

/// Maps latent `(row, col)` to the full-grid spectral index.
fn full_index(grid: GridSpec, modes: usize, a: usize, b: usize) -> usize {
    let sy = crate::field::signed_mode_index(a, modes);
    let sx = crate::field::signed_mode_index(b, modes);
    spectral_index(grid, sy, sx)
}

/// Projects a state onto the latent window. The vorticity channel is used when
/// present, otherwise the curl of the velocity channels.
pub fn encode(x: &FlowState, modes: usize) -> Result<LatentState> {
    check_modes(x.grid, modes)?;
    let omega = x.vorticity_field()?;
    omega.ensure_finite()?;
    let spec = SpectralGrid::new(x.grid)?;
    let full = spec.forward(omega.values());
    let norm = 1.0 / (x.grid.len() as f64).sqrt();
    let mut coeffs = vec![Complex64::default(); modes * modes];
    let mut z = LatentState {
        grid: x.grid,
        modes,
        time: x.time,
        coeffs: Vec::new(),
        forcing: None,
    };
    for a in 0..modes {
        for b in 0..modes {
            if z.retained(a, b) {
                coeffs[a * modes + b] = full[full_index(x.grid, modes, a, b)] * norm;
            }
        }
    }
    z.coeffs = coeffs;
    z.forcing = match x.channel(FORCING) {
        Some(f) => {
            f.ensure_finite()?;
            Some(f.values().to_vec())
        }
        None => None,
    };
    Ok(z)
}

fn latent_to_full(z: &LatentState) -> Vec<Complex64> {
    let mut full = vec![Complex64::default(); z.grid.len()];
    let scale = (z.grid.len() as f64).sqrt();
    for a in 0..z.modes {
        for b in 0..z.modes {
            if z.retained(a, b) {
                full[full_index(z.grid, z.modes, a, b)] = z.coeffs[a * z.modes + b] * scale;
            }
        }
    }
    full
}

fn full_to_latent(grid: GridSpec, modes: usize, full: &[Complex64]) -> Vec<Complex64> {
    let norm = 1.0 / (grid.len() as f64).sqrt();
    let probe = LatentState {
        grid,
        modes,
        time: 0.0,
        coeffs: Vec::new(),
        forcing: None,
    };
    let mut coeffs = vec![Complex64::default(); modes * modes];
    for a in 0..modes {
        for b in 0..modes {
            if probe.retained(a, b) {
                coeffs[a * modes + b] = full[full_index(grid, modes, a, b)] * norm;
            }
        }
    }
    coeffs
}

/// Reconstructs vorticity, the divergence-free velocity it implies and, when
/// carried, the forcing channel.
pub fn decode(z: &LatentState) -> Result<FlowState> {
    z.check()?;
    let spec = SpectralGrid::new(z.grid)?;
    decode_with(&spec, z)
}

fn decode_with(spec: &SpectralGrid, z: &LatentState) -> Result<FlowState> {
    let omega_hat = latent_to_full(z);
    let (u_hat, v_hat) = spec.velocity_spectra(&omega_hat);
    let grid = z.grid;
    let mut state = FlowState::new(grid, z.time);
    state.channels = vec![
        ScalarField::new(grid, Variable::new(VORTICITY, "1/s"), spec.inverse_real(omega_hat))?,
        ScalarField::new(grid, Variable::new("u", "m/s"), spec.inverse_real(u_hat))?,
        ScalarField::new(grid, Variable::new("v", "m/s"), spec.inverse_real(v_hat))?,
    ];
    if let Some(f) = &z.forcing {
        state
            .channels
            .push(ScalarField::new(grid, Variable::new(FORCING, "1/s^2"), f.clone())?);
    }
    Ok(state)
}

/// `z + lambda * xi` with `xi` a Hermitian-symmetrized complex standard normal
/// draw on every retained non-mean mode (`E|xi_k|^2 = 1`). Deterministic in
/// `seed`; `lambda = 0` returns the input unchanged.
pub fn perturb_latent(z: &LatentState, lambda: f64, seed: u64) -> Result<LatentState> {
    z.check()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(SimError::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let mut out = z.clone();
    if lambda == 0.0 {
        return Ok(out);
    }
    let m = z.modes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid normal");
    for a in 0..m {
        for b in 0..m {
            if !z.retained(a, b) {
                continue;
            }
            let (sy, sx) = (z.signed(a), z.signed(b));
            // One draw per Hermitian pair, taken at the canonical member.
            if !(sy > 0 || (sy == 0 && sx > 0)) {
                continue;
            }
            let xi = Complex64::new(half.sample(&mut rng), half.sample(&mut rng)) * lambda;
            let ca = (-sy).rem_euclid(m as i64) as usize;
            let cb = (-sx).rem_euclid(m as i64) as usize;
            out.coeffs[a * m + b] += xi;
            out.coeffs[ca * m + cb] += xi.conj();
        }
    }
    Ok(out)
}

/// Full-grid pseudo-spectral integrator shared by every propagate call on a
/// given grid.
pub struct Propagator {
    spec: SpectralGrid,
    cfg: SimulatorConfig,
    mask: Vec<bool>,
    analytic_forcing: Option<Vec<Complex64>>,
}

impl Propagator {
    pub fn new(grid: GridSpec, cfg: &SimulatorConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = SpectralGrid::new(grid)?;
        let (h, w) = (grid.height as i64, grid.width as i64);
        let mask = (0..grid.len())
            .map(|idx| {
                if !cfg.dealias {
                    return true;
                }
                let sy = crate::field::signed_mode_index(idx / grid.width, grid.height);
                let sx = crate::field::signed_mode_index(idx % grid.width, grid.width);
                3 * sy.abs() < h && 3 * sx.abs() < w
            })
            .collect();
        let analytic_forcing = cfg.forcing.field(grid).map(|f| spec.forward(f.values()));
        Ok(Self {
            spec,
            cfg: cfg.clone(),
            mask,
            analytic_forcing,
        })
    }

    pub fn spectral(&self) -> &SpectralGrid {
        &self.spec
    }

    fn forcing_hat(&self, z: &LatentState) -> Option<Vec<Complex64>> {
        let carried = z.forcing.as_ref().map(|f| self.spec.forward(f));
        match (carried, &self.analytic_forcing) {
            (None, None) => None,
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b.clone()),
            (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| x + y).collect()),
        }
    }

    fn rhs(&self, omega: &[Complex64], forcing: Option<&[Complex64]>) -> Vec<Complex64> {
        let spec = &self.spec;
        let (u_hat, v_hat) = spec.velocity_spectra(omega);
        let u = spec.inverse_real(u_hat);
        let v = spec.inverse_real(v_hat);
        let wx = spec.inverse_real(spec.ddx(omega));
        let wy = spec.inverse_real(spec.ddy(omega));
        let advection: Vec<f64> = (0..u.len())
            .map(|k| -(u[k] * wx[k] + v[k] * wy[k]))
            .collect();
        let mut out = spec.forward(&advection);
        let nu = self.cfg.viscosity;
        for (idx, o) in out.iter_mut().enumerate() {
            if !self.mask[idx] {
                *o = Complex64::default();
                continue;
            }
            *o -= omega[idx] * (nu * spec.k_squared(idx));
            if let Some(f) = forcing {
                *o += f[idx];
            }
        }
        out
    }

    fn check_cfl(&self, omega: &[Complex64]) -> Result<()> {
        let grid = self.spec.grid();
        let (u_hat, v_hat) = self.spec.velocity_spectra(omega);
        let umax = self.spec.inverse_real(u_hat).iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let vmax = self.spec.inverse_real(v_hat).iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let dt = self.cfg.dt;
        let advective = dt * (umax / grid.dx() + vmax / grid.dy());
        if advective > CFL_MAX {
            return Err(SimError::Cfl {
                what: "dt*(|u|/dx+|v|/dy)",
                value: advective,
                limit: CFL_MAX,
            });
        }
        let k2max = (0..grid.len())
            .filter(|&i| self.mask[i])
            .map(|i| self.spec.k_squared(i))
            .fold(0.0, f64::max);
        let diffusive = self.cfg.viscosity * dt * k2max;
        if diffusive > DIFFUSIVE_MAX {
            return Err(SimError::Cfl {
                what: "nu*dt*|k|^2",
                value: diffusive,
                limit: DIFFUSIVE_MAX,
            });
        }
        Ok(())
    }

    /// Advances `z` by `steps` solver steps. Zero steps is the identity.
    pub fn advance(&self, z: &LatentState, steps: usize) -> Result<LatentState> {
        z.check()?;
        if z.grid != self.spec.grid() {
            return Err(FieldError::GridMismatch.into());
        }
        if steps == 0 {
            return Ok(z.clone());
        }
        let mut omega = latent_to_full(z);
        self.check_cfl(&omega)?;
        let forcing = self.forcing_hat(z);
        let forcing = forcing.as_deref();
        let dt = self.cfg.dt;
        let stage = |base: &[Complex64], k: &[Complex64], h: f64| -> Vec<Complex64> {
            base.iter().zip(k).map(|(a, b)| a + b * h).collect()
        };
        for step in 1..=steps {
            let k1 = self.rhs(&omega, forcing);
            let k2 = self.rhs(&stage(&omega, &k1, 0.5 * dt), forcing);
            let k3 = self.rhs(&stage(&omega, &k2, 0.5 * dt), forcing);
            let k4 = self.rhs(&stage(&omega, &k3, dt), forcing);
            let mut finite = true;
            for i in 0..omega.len() {
                omega[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (dt / 6.0);
                finite &= omega[i].re.is_finite() && omega[i].im.is_finite();
            }
            if !finite {
                return Err(SimError::Diverged { step });
            }
        }
        Ok(LatentState {
            grid: z.grid,
            modes: z.modes,
            time: z.time + steps as f64 * dt,
            coeffs: full_to_latent(z.grid, z.modes, &omega),
            forcing: z.forcing.clone(),
        })
    }

    pub fn decode(&self, z: &LatentState) -> Result<FlowState> {
        decode_with(&self.spec, z)
    }
}

/// Advances `z` by `steps` solver steps under `cfg`.
pub fn propagate(z: &LatentState, steps: usize, cfg: &SimulatorConfig) -> Result<LatentState> {
    Propagator::new(z.grid, cfg)?.advance(z, steps)
}

/// Deterministic recursive rollout: the initial state (after the latent
/// round trip) followed by `outputs` states, each `cfg.steps_per_output`
/// solver steps after the previous one.
pub fn rollout(x_init: &FlowState, outputs: usize, cfg: &SimulatorConfig) -> Result<Vec<FlowState>> {
    let prop = Propagator::new(x_init.grid, cfg)?;
    let z0 = encode(x_init, cfg.modes_for(x_init.grid))?;
    trajectory(&prop, z0, outputs)
}

pub(crate) fn trajectory(prop: &Propagator, z0: LatentState, outputs: usize) -> Result<Vec<FlowState>> {
    let mut states = Vec::with_capacity(outputs + 1);
    states.push(prop.decode(&z0)?);
    let mut z = z0;
    for _ in 0..outputs {
        z = prop.advance(&z, prop.cfg.steps_per_output)?;
        states.push(prop.decode(&z)?);
    }
    Ok(states)
}
