//! FFT-based derivative operators on the periodic grid.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{FieldError, GridSpec, Result, ScalarField, Variable, VectorField, VORTICITY};

/// Cached transforms and wavenumbers for one grid.
///
/// Spectra are stored row-major in FFT order (index `m` maps to wavenumber
/// `m` for `m < n/2` and `m - n` above). The Nyquist wavenumber is dropped
/// from first derivatives so that derivatives of real fields stay real.
#[derive(Clone)]
pub struct SpectralGrid {
    grid: GridSpec,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    kx: Vec<f64>,
    ky: Vec<f64>,
    kx_d: Vec<f64>,
    ky_d: Vec<f64>,
}

impl std::fmt::Debug for SpectralGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralGrid").field("grid", &self.grid).finish()
    }
}

/// Signed integer wavenumber of FFT index `m` on an `n`-point axis.
pub fn signed_mode(m: usize, n: usize) -> i64 {
    if m <= n / 2 {
        m as i64
    } else {
        m as i64 - n as i64
    }
}

/// Spectral index of signed wavenumber pair `(sy, sx)` on `grid`.
pub fn spectral_index(grid: GridSpec, sy: i64, sx: i64) -> usize {
    let row = sy.rem_euclid(grid.height as i64) as usize;
    let col = sx.rem_euclid(grid.width as i64) as usize;
    row * grid.width + col
}

fn wavenumbers(n: usize, length: f64) -> (Vec<f64>, Vec<f64>) {
    let base = std::f64::consts::TAU / length;
    let k: Vec<f64> = (0..n).map(|m| base * signed_mode(m, n) as f64).collect();
    let mut kd = k.clone();
    kd[n / 2] = 0.0;
    (k, kd)
}

impl SpectralGrid {
    pub fn new(grid: GridSpec) -> Result<Self> {
        grid.validate()?;
        let mut planner = FftPlanner::new();
        let (kx, kx_d) = wavenumbers(grid.width, grid.lx);
        let (ky, ky_d) = wavenumbers(grid.height, grid.ly);
        Ok(Self {
            grid,
            row_fwd: planner.plan_fft_forward(grid.width),
            row_inv: planner.plan_fft_inverse(grid.width),
            col_fwd: planner.plan_fft_forward(grid.height),
            col_inv: planner.plan_fft_inverse(grid.height),
            kx,
            ky,
            kx_d,
            ky_d,
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    /// Full wavenumbers (Nyquist kept), indexed by column.
    pub fn kx(&self) -> &[f64] {
        &self.kx
    }

    /// Full wavenumbers (Nyquist kept), indexed by row.
    pub fn ky(&self) -> &[f64] {
        &self.ky
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.grid.height, self.grid.width);
        debug_assert_eq!(data.len(), h * w);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(data);
        let mut columns = vec![Complex64::default(); h * w];
        for i in 0..h {
            for j in 0..w {
                columns[j * h + i] = data[i * w + j];
            }
        }
        col.process(&mut columns);
        for j in 0..w {
            for i in 0..h {
                data[i * w + j] = columns[j * h + i];
            }
        }
    }

    /// Unnormalized forward transform of a real field.
    pub fn forward(&self, values: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut data, false);
        data
    }

    /// Inverse transform (normalized by `1/(HW)`) keeping the real part.
    pub fn inverse_real(&self, mut spectrum: Vec<Complex64>) -> Vec<f64> {
        self.transform(&mut spectrum, true);
        let scale = 1.0 / self.grid.len() as f64;
        spectrum.into_iter().map(|c| c.re * scale).collect()
    }

    pub fn ddx(&self, spectrum: &[Complex64]) -> Vec<Complex64> {
        let w = self.grid.width;
        spectrum
            .iter()
            .enumerate()
            .map(|(idx, c)| c * Complex64::new(0.0, self.kx_d[idx % w]))
            .collect()
    }

    pub fn ddy(&self, spectrum: &[Complex64]) -> Vec<Complex64> {
        let w = self.grid.width;
        spectrum
            .iter()
            .enumerate()
            .map(|(idx, c)| c * Complex64::new(0.0, self.ky_d[idx / w]))
            .collect()
    }

    /// `|k|^2` at each spectral index.
    pub fn k_squared(&self, idx: usize) -> f64 {
        let w = self.grid.width;
        let (kx, ky) = (self.kx[idx % w], self.ky[idx / w]);
        kx * kx + ky * ky
    }

    /// Streamfunction velocity `(d psi/dy, -d psi/dx)` with `lap psi = -omega`,
    /// working entirely from the vorticity spectrum. The mean mode is dropped.
    pub fn velocity_spectra(&self, omega_hat: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let psi: Vec<Complex64> = omega_hat
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                let k2 = self.k_squared(idx);
                if k2 == 0.0 {
                    Complex64::default()
                } else {
                    c / k2
                }
            })
            .collect();
        let u = self.ddy(&psi);
        let v = self.ddx(&psi).into_iter().map(|c| -c).collect();
        (u, v)
    }

    pub fn divergence(&self, f: &VectorField) -> Vec<f64> {
        let ux = self.ddx(&self.forward(&f.u));
        let vy = self.ddy(&self.forward(&f.v));
        self.inverse_real(ux.into_iter().zip(vy).map(|(a, b)| a + b).collect())
    }

    pub fn curl(&self, f: &VectorField) -> Vec<f64> {
        let vx = self.ddx(&self.forward(&f.v));
        let uy = self.ddy(&self.forward(&f.u));
        self.inverse_real(vx.into_iter().zip(uy).map(|(a, b)| a - b).collect())
    }
}

fn check_vector(f: &VectorField) -> Result<()> {
    f.grid.validate()?;
    if f.u.len() != f.grid.len() || f.v.len() != f.grid.len() {
        return Err(FieldError::ShapeMismatch {
            expected: f.grid.len(),
            actual: f.u.len().min(f.v.len()),
        });
    }
    f.ensure_finite()
}

/// Spectral `du/dx + dv/dy`.
pub fn divergence(f: &VectorField) -> Result<ScalarField> {
    check_vector(f)?;
    let spec = SpectralGrid::new(f.grid)?;
    ScalarField::new(f.grid, Variable::new("divergence", "1/s"), spec.divergence(f))
}

/// Spectral `dv/dx - du/dy`.
pub fn vorticity(f: &VectorField) -> Result<ScalarField> {
    check_vector(f)?;
    let spec = SpectralGrid::new(f.grid)?;
    ScalarField::new(f.grid, Variable::new(VORTICITY, "1/s"), spec.curl(f))
}

/// Divergence-free velocity whose curl reproduces `omega` up to its mean.
pub fn velocity_from_vorticity(omega: &ScalarField) -> Result<VectorField> {
    omega.ensure_finite()?;
    let spec = SpectralGrid::new(omega.grid)?;
    let (u_hat, v_hat) = spec.velocity_spectra(&spec.forward(omega.values()));
    VectorField::new(omega.grid, spec.inverse_real(u_hat), spec.inverse_real(v_hat))
}

/// Rate-of-strain magnitude `sqrt((u_x - v_y)^2 + (v_x + u_y)^2)`.
pub fn strain_magnitude(f: &VectorField) -> Result<ScalarField> {
    check_vector(f)?;
    let spec = SpectralGrid::new(f.grid)?;
    let u_hat = spec.forward(&f.u);
    let v_hat = spec.forward(&f.v);
    let ux = spec.inverse_real(spec.ddx(&u_hat));
    let uy = spec.inverse_real(spec.ddy(&u_hat));
    let vx = spec.inverse_real(spec.ddx(&v_hat));
    let vy = spec.inverse_real(spec.ddy(&v_hat));
    let values = (0..f.grid.len())
        .map(|k| (ux[k] - vy[k]).hypot(vx[k] + uy[k]))
        .collect();
    ScalarField::new(f.grid, Variable::new("strain", "1/s"), values)
}

/// `1/2 * sum(u^2 + v^2) * cell area`.
pub fn kinetic_energy(f: &VectorField) -> f64 {
    let sum: f64 = f.u.iter().zip(&f.v).map(|(a, b)| a * a + b * b).sum();
    0.5 * sum * f.grid.cell_area()
}

/// `1/2 * sum(omega^2) * cell area`.
pub fn enstrophy(omega: &ScalarField) -> f64 {
    let sum: f64 = omega.values().iter().map(|w| w * w).sum();
    0.5 * sum * omega.grid.cell_area()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g64() -> GridSpec {
        GridSpec::square(64).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    /// Random band-limited field: a handful of low Fourier modes.
    pub(crate) fn smooth_field(grid: GridSpec, seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes: Vec<(f64, f64, f64, f64)> = (0..12)
            .map(|_| {
                (
                    rng.random_range(-6..=6) as f64,
                    rng.random_range(-6..=6) as f64,
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        ScalarField::from_fn(grid, Variable::new(VORTICITY, "1/s"), |x, y| {
            modes
                .iter()
                .map(|(a, b, amp, ph)| amp * (a * x + b * y + ph).cos())
                .sum()
        })
    }

    #[test]
    fn zero_field_has_zero_divergence_and_curl() {
        let f = VectorField::zeros(g64());
        assert!(divergence(&f).unwrap().max_abs() == 0.0);
        assert!(vorticity(&f).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn y_only_flow_is_divergence_free() {
        let f = VectorField::from_fn(g64(), |_, y| (y.sin(), 0.0));
        assert!(divergence(&f).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn divergence_of_sin_x_is_cos_x() {
        let g = g64();
        let f = VectorField::from_fn(g, |x, _| (x.sin(), 0.0));
        let d = divergence(&f).unwrap();
        let expect = ScalarField::from_fn(g, Variable::new("d", "1/s"), |x, _| x.cos());
        assert!(max_abs_diff(d.values(), expect.values()) < 1e-10);
    }

    #[test]
    fn curl_of_taylor_green_velocity() {
        let g = g64();
        let f = VectorField::from_fn(g, |x, y| (x.sin() * y.cos(), -x.cos() * y.sin()));
        let w = vorticity(&f).unwrap();
        let expect = ScalarField::from_fn(g, Variable::new("w", "1/s"), |x, y| {
            2.0 * x.sin() * y.sin()
        });
        assert!(max_abs_diff(w.values(), expect.values()) < 1e-10);
    }

    #[test]
    fn rigid_rotation_has_vorticity_two_in_interior() {
        // u = (-(y - c), x - c) is not periodic, so it is windowed by a smooth
        // bump whose plateau covers the interior; there the curl is 2.
        let n = 128;
        let g = GridSpec::square(n).unwrap();
        let c = std::f64::consts::PI;
        let bump = |s: f64| (-((s - c) / 1.6).powi(8)).exp();
        let f = VectorField::from_fn(g, |x, y| {
            let b = bump(x) * bump(y);
            (-(y - c) * b, (x - c) * b)
        });
        let w = vorticity(&f).unwrap();
        // Independent finite-difference curl on the same samples.
        let h = g.dx();
        let (mut worst_spec, mut worst_fd) = (0.0_f64, 0.0_f64);
        for i in (n / 2 - 6)..(n / 2 + 6) {
            for j in (n / 2 - 6)..(n / 2 + 6) {
                let dvdx = (f.v[i * n + j + 1] - f.v[i * n + j - 1]) / (2.0 * h);
                let dudy = (f.u[(i + 1) * n + j] - f.u[(i - 1) * n + j]) / (2.0 * h);
                worst_fd = worst_fd.max((dvdx - dudy - 2.0).abs());
                worst_spec = worst_spec.max((w.at(i, j) - 2.0).abs());
            }
        }
        assert!(worst_fd < 1e-3, "fd oracle drifted: {worst_fd}");
        assert!(worst_spec < 1e-3, "spectral curl off by {worst_spec}");
    }

    #[test]
    fn velocity_inversion_round_trips_taylor_green() {
        let g = g64();
        let omega = ScalarField::from_fn(g, Variable::new(VORTICITY, "1/s"), |x, y| {
            2.0 * x.sin() * y.sin()
        });
        let vel = velocity_from_vorticity(&omega).unwrap();
        let expect_u: Vec<f64> = VectorField::from_fn(g, |x, y| (x.sin() * y.cos(), 0.0)).u;
        assert!(max_abs_diff(&vel.u, &expect_u) < 1e-12);
        let back = vorticity(&vel).unwrap();
        assert!(max_abs_diff(back.values(), omega.values()) < 1e-10);
    }

    #[test]
    fn zero_vorticity_gives_zero_velocity() {
        let g = g64();
        let vel = velocity_from_vorticity(&ScalarField::zeros(g, Variable::new(VORTICITY, "1/s")))
            .unwrap();
        assert!(vel.u.iter().chain(&vel.v).all(|&x| x == 0.0));
    }

    #[test]
    fn inversion_is_divergence_free_for_random_fields() {
        let g = g64();
        for seed in 0..10 {
            let omega = smooth_field(g, seed);
            let vel = velocity_from_vorticity(&omega).unwrap();
            assert!(divergence(&vel).unwrap().max_abs() < 1e-10);
            let back = vorticity(&vel).unwrap();
            let mean = omega.mean();
            let err = back
                .values()
                .iter()
                .zip(omega.values())
                .fold(0.0_f64, |m, (b, w)| m.max((b - (w - mean)).abs()));
            assert!(err < 1e-10, "seed {seed}: {err}");
        }
    }

    #[test]
    fn operators_are_linear() {
        let g = GridSpec::square(32).unwrap();
        let f = velocity_from_vorticity(&smooth_field(g, 1)).unwrap();
        let h = VectorField::from_fn(g, |x, y| ((2.0 * x).cos() * y.sin(), (x + y).sin()));
        let (a, b) = (1.7, -0.3);
        let combo = VectorField::new(
            g,
            f.u.iter().zip(&h.u).map(|(p, q)| a * p + b * q).collect(),
            f.v.iter().zip(&h.v).map(|(p, q)| a * p + b * q).collect(),
        )
        .unwrap();
        for op in [divergence, vorticity] {
            let lhs = op(&combo).unwrap();
            let rhs = op(&f).unwrap().axpby(a, &op(&h).unwrap(), b).unwrap();
            assert!(max_abs_diff(lhs.values(), rhs.values()) < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut f = VectorField::zeros(g64());
        f.u[5] = f64::NAN;
        assert!(matches!(divergence(&f), Err(FieldError::NonFinite { index: 5, .. })));
    }

    #[test]
    fn energy_and_enstrophy_of_taylor_green() {
        let g = g64();
        let vel = VectorField::from_fn(g, |x, y| (x.sin() * y.cos(), -x.cos() * y.sin()));
        // 1/2 * integral of sin^2 x cos^2 y + cos^2 x sin^2 y = 1/2 * 2 * pi^2
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((kinetic_energy(&vel) - pi2).abs() < 1e-10);
        let w = vorticity(&vel).unwrap();
        assert!((enstrophy(&w) - 2.0 * pi2).abs() < 1e-9);
    }
}
