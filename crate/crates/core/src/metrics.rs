//! RMSE, SSIM and PSNR between fields and along rollouts.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) with the usual constants
//! `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`. The window wraps around the periodic
//! domain, so every cell contributes a local SSIM value.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FlowState, ScalarField};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("trajectory lengths differ: {pred} predicted vs {reference} reference")]
    LengthMismatch { pred: usize, reference: usize },
    #[error("empty trajectory")]
    Empty,
    #[error("data range must be positive and finite, got {0}")]
    DataRange(f64),
    #[error("missing channel `{channel}` at step {step}")]
    MissingChannel { channel: String, step: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// PSNR in decibels; identical inputs give [`Decibels::Infinite`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Decibels {
    Finite(f64),
    #[serde(with = "infinite_tag")]
    Infinite,
}

mod infinite_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("inf")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "inf" {
            Ok(())
        } else {
            Err(serde::de::Error::custom("expected \"inf\""))
        }
    }
}

impl Decibels {
    pub fn value(&self) -> f64 {
        match self {
            Decibels::Finite(v) => *v,
            Decibels::Infinite => f64::INFINITY,
        }
    }

    fn from_mse(mse: f64, range: f64) -> Self {
        if mse == 0.0 {
            Decibels::Infinite
        } else {
            Decibels::Finite(10.0 * (range * range / mse).log10())
        }
    }
}

impl fmt::Display for Decibels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decibels::Finite(v) => write!(f, "{v}"),
            Decibels::Infinite => f.write_str("inf"),
        }
    }
}

fn same_grid(a: &ScalarField, b: &ScalarField) -> Result<()> {
    if a.grid != b.grid {
        return Err(MetricError::GridMismatch);
    }
    Ok(())
}

fn check_range(range: f64) -> Result<()> {
    if range > 0.0 && range.is_finite() {
        Ok(())
    } else {
        Err(MetricError::DataRange(range))
    }
}

pub fn mse(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    same_grid(a, b)?;
    let n = a.values().len() as f64;
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n)
}

pub fn rmse(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

pub fn psnr(a: &ScalarField, b: &ScalarField, range: f64) -> Result<Decibels> {
    check_range(range)?;
    Ok(Decibels::from_mse(mse(a, b)?, range))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Separable periodic Gaussian blur.
fn blur(values: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; values.len()];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| {
                    let jj = (j as isize + t as isize - r).rem_euclid(w as isize) as usize;
                    k * values[i * w + jj]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; values.len()];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| {
                    let ii = (i as isize + t as isize - r).rem_euclid(h as isize) as usize;
                    k * tmp[ii * w + j]
                })
                .sum();
        }
    }
    out
}

/// Mean structural similarity of `a` and `b` for data range `range`.
pub fn ssim(a: &ScalarField, b: &ScalarField, range: f64) -> Result<f64> {
    same_grid(a, b)?;
    check_range(range)?;
    let (h, w) = (a.grid.height, a.grid.width);
    let k = gaussian_window();
    let (x, y) = (a.values(), b.values());
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(s, t)| s * t).collect() };
    let mu_x = blur(x, h, w, &k);
    let mu_y = blur(y, h, w, &k);
    let xx = blur(&prod(x, x), h, w, &k);
    let yy = blur(&prod(y, y), h, w, &k);
    let xy = blur(&prod(x, y), h, w, &k);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let total: f64 = (0..x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok((total / x.len() as f64).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub rmse: f64,
    pub ssim: f64,
    pub psnr: Decibels,
}

/// Aggregate and per-step metrics of a rollout against a reference.
///
/// The aggregate RMSE and PSNR are computed from the step-averaged MSE, so
/// `psnr = 10 log10(L^2 / rmse^2)` holds for them as well; SSIM is averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub channel: String,
    pub data_range: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub psnr: Decibels,
    pub steps: Vec<StepMetrics>,
}

impl MetricReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "step,rmse,ssim,psnr")?;
        for s in &self.steps {
            writeln!(out, "{},{},{},{}", s.step, s.rmse, s.ssim, s.psnr)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("metric report serializes");
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// Reference min/max range over a trajectory channel. A constant reference
/// falls back to 1 so PSNR/SSIM stay defined.
pub fn reference_range(reference: &[FlowState], channel: &str) -> Result<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (step, s) in reference.iter().enumerate() {
        let f = s.channel(channel).ok_or_else(|| MetricError::MissingChannel {
            channel: channel.to_string(),
            step,
        })?;
        for &v in f.values() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let range = hi - lo;
    Ok(if range > 0.0 && range.is_finite() { range } else { 1.0 })
}

pub fn evaluate_rollout(
    pred: &[FlowState],
    reference: &[FlowState],
    channel: &str,
    data_range: Option<f64>,
) -> Result<MetricReport> {
    if pred.len() != reference.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            reference: reference.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    let range = match data_range {
        Some(r) => {
            check_range(r)?;
            r
        }
        None => reference_range(reference, channel)?,
    };
    let fetch = |states: &[FlowState], step: usize| -> Result<ScalarField> {
        states[step]
            .channel(channel)
            .cloned()
            .ok_or_else(|| MetricError::MissingChannel {
                channel: channel.to_string(),
                step,
            })
    };
    let mut steps = Vec::with_capacity(pred.len());
    let mut mse_sum = 0.0;
    let mut ssim_sum = 0.0;
    for step in 0..pred.len() {
        let (p, r) = (fetch(pred, step)?, fetch(reference, step)?);
        let m = mse(&p, &r)?;
        let s = ssim(&p, &r, range)?;
        mse_sum += m;
        ssim_sum += s;
        steps.push(StepMetrics {
            step,
            rmse: m.sqrt(),
            ssim: s,
            psnr: Decibels::from_mse(m, range),
        });
    }
    let n = pred.len() as f64;
    let mse_mean = mse_sum / n;
    Ok(MetricReport {
        channel: channel.to_string(),
        data_range: range,
        rmse: mse_mean.sqrt(),
        ssim: ssim_sum / n,
        psnr: Decibels::from_mse(mse_mean, range),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{GridSpec, Variable};
    use proptest::prelude::*;

    fn grid() -> GridSpec {
        GridSpec::square(32).unwrap()
    }

    fn structured() -> ScalarField {
        ScalarField::from_fn(grid(), Variable::new("q", "1"), |x, y| {
            x.sin() * (2.0 * y).cos() + 0.3 * (3.0 * x + y).sin()
        })
    }

    fn checkerboard() -> ScalarField {
        let g = grid();
        let v = (0..g.len())
            .map(|k| if (k / g.width + k % g.width).is_multiple_of(2) { 1.0 } else { -1.0 })
            .collect();
        ScalarField::new(g, Variable::new("q", "1"), v).unwrap()
    }

    #[test]
    fn rmse_closed_forms() {
        let a = structured();
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let c = 0.25;
        assert!((rmse(&a, &a.map(|v| v + c)).unwrap() - c).abs() < 1e-15);
        let zero = ScalarField::zeros(grid(), Variable::new("q", "1"));
        assert_eq!(rmse(&zero, &checkerboard()).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_self_is_one() {
        let a = structured();
        assert!((ssim(&a, &a, 2.6).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_anticorrelated_field_is_negative() {
        let a = structured();
        let b = a.map(|v| -v + 5.0);
        assert!(ssim(&a, &b, 8.0).unwrap() < 0.0);
    }

    #[test]
    fn ssim_of_equal_constants_is_one() {
        let a = ScalarField::constant(grid(), Variable::new("q", "1"), 3.0);
        assert!((ssim(&a, &a.clone(), 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = structured();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), Decibels::Infinite);
        let l = 2.0;
        let b = a.map(|v| v + l);
        assert!(psnr(&a, &b, l).unwrap().value().abs() < 1e-12);
        let c = a.map(|v| v + l / 10.0);
        assert!((psnr(&a, &c, l).unwrap().value() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn bad_range_is_rejected() {
        let a = structured();
        assert!(matches!(psnr(&a, &a, 0.0), Err(MetricError::DataRange(_))));
        assert!(matches!(ssim(&a, &a, f64::NAN), Err(MetricError::DataRange(_))));
    }

    #[test]
    fn psnr_serializes_infinite_as_tag() {
        assert_eq!(serde_json::to_string(&Decibels::Infinite).unwrap(), "\"inf\"");
        let back: Decibels = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(back, Decibels::Infinite);
        let back: Decibels = serde_json::from_str("12.5").unwrap();
        assert_eq!(back, Decibels::Finite(12.5));
    }

    fn states(fields: Vec<ScalarField>) -> Vec<FlowState> {
        fields
            .into_iter()
            .enumerate()
            .map(|(t, f)| FlowState::new(f.grid, t as f64).with_channel(f).unwrap())
            .collect()
    }

    fn moving_wave(t: usize) -> ScalarField {
        ScalarField::from_fn(grid(), Variable::new("q", "1"), |x, y| {
            (x - 0.4 * t as f64).sin() * y.cos()
        })
    }

    #[test]
    fn identical_rollout_scores_perfectly() {
        let traj = states((0..4).map(moving_wave).collect());
        let r = evaluate_rollout(&traj, &traj, "q", None).unwrap();
        assert_eq!(r.rmse, 0.0);
        assert!((r.ssim - 1.0).abs() < 1e-9);
        assert_eq!(r.psnr, Decibels::Infinite);
    }

    #[test]
    fn misaligned_rollout_is_worse() {
        let reference = states((1..6).map(moving_wave).collect());
        let aligned = states((1..6).map(|t| moving_wave(t).map(|v| v + 0.01)).collect());
        let shifted = states((0..5).map(moving_wave).collect());
        let a = evaluate_rollout(&aligned, &reference, "q", None).unwrap();
        let s = evaluate_rollout(&shifted, &reference, "q", None).unwrap();
        assert!(s.rmse > a.rmse);
        assert!(s.ssim < a.ssim);
        assert!(s.psnr.value() < a.psnr.value());
    }

    #[test]
    fn single_step_aggregates_equal_step() {
        let r = evaluate_rollout(&states(vec![moving_wave(1)]), &states(vec![moving_wave(2)]), "q", None).unwrap();
        assert_eq!(r.rmse, r.steps[0].rmse);
        assert_eq!(r.ssim, r.steps[0].ssim);
        assert_eq!(r.psnr, r.steps[0].psnr);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let a = states(vec![moving_wave(0)]);
        let b = states(vec![moving_wave(0), moving_wave(1)]);
        assert!(matches!(evaluate_rollout(&a, &b, "q", None), Err(MetricError::LengthMismatch { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn metrics_are_symmetric_and_consistent(seed in 0u64..1000, shift in 0.01f64..2.0) {
            let a = structured().map(|v| v * (1.0 + seed as f64 * 1e-3));
            let b = ScalarField::from_fn(grid(), Variable::new("q", "1"), |x, y| (x + shift).cos() * y.sin());
            prop_assert!((rmse(&a, &b).unwrap() - rmse(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert!((ssim(&a, &b, 3.0).unwrap() - ssim(&b, &a, 3.0).unwrap()).abs() < 1e-12);
            let r = rmse(&a, &b).unwrap();
            let p = psnr(&a, &b, 3.0).unwrap().value();
            prop_assert!((p - 10.0 * (9.0 / (r * r)).log10()).abs() < 1e-9);
            let s = ssim(&a, &b, 3.0).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
