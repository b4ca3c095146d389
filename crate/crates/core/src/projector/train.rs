use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{alignment_grad, alignment_loss, cross_attend, Gradients, PatchEmbedder, PatchEncoding, ProjectorParams, Result};
use crate::field::{FlowState, GridSpec, ScalarField, Variable, VELOCITY_U, VELOCITY_V};
use crate::knowledge::{Embedder, HashingEmbedder};
use crate::simulator::initial::gaussian_vortex;
use crate::simulator::periodic_delta;

/// Text attached to the three synthetic classes, in class order.
pub const CLASS_DESCRIPTIONS: [&str; 3] = [
    "coherent vortex with a concentrated rotating vorticity core",
    "stagnation point where opposing streams meet and the velocity vanishes",
    "shear line separating parallel counter-flowing streams",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_queries: usize,
    pub dim: usize,
    pub d_v: usize,
    pub patch: usize,
    pub grid: usize,
    pub samples_per_class: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_queries: 4,
            dim: 16,
            d_v: 24,
            patch: 8,
            grid: 32,
            samples_per_class: 4,
            steps: 200,
            learning_rate: 1e-2,
            temperature: super::DEFAULT_TEMPERATURE,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub encoding: PatchEncoding,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean loss before each update, then once after the last one.
    pub losses: Vec<f64>,
    pub params: ProjectorParams,
    pub text: Array2<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }
}

fn saddle(grid: GridSpec, cx: f64, cy: f64, s: f64, a: f64) -> FlowState {
    // Stream function a*dx*dy*exp(-r^2/2s^2): a localised hyperbolic point.
    let envelope = move |dx: f64, dy: f64| (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
    let delta = move |x: f64, y: f64| (periodic_delta(x - cx, grid.lx), periodic_delta(y - cy, grid.ly));
    let u = ScalarField::from_fn(grid, Variable::new(VELOCITY_U, "m/s"), |x, y| {
        let (dx, dy) = delta(x, y);
        a * dx * envelope(dx, dy) * (1.0 - dy * dy / (s * s))
    });
    let v = ScalarField::from_fn(grid, Variable::new(VELOCITY_V, "m/s"), |x, y| {
        let (dx, dy) = delta(x, y);
        -a * dy * envelope(dx, dy) * (1.0 - dx * dx / (s * s))
    });
    FlowState::new(grid, 0.0)
        .with_channel(u)
        .and_then(|st| st.with_channel(v))
        .expect("same grid")
}

/// Synthetic vortex / stagnation / shear fields with randomised placement,
/// scale and sign, encoded by `embedder`.
pub fn synthetic_dataset(cfg: &TrainConfig, embedder: &PatchEmbedder) -> Result<Vec<Sample>> {
    let grid = GridSpec::square(cfg.grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut out = Vec::new();
    for _ in 0..cfg.samples_per_class {
        for class in 0..3 {
            let cx = rng.random_range(0.0..grid.lx);
            let cy = rng.random_range(0.0..grid.ly);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let amp = rng.random_range(2.0..4.0) * sign;
            let state = match class {
                0 => {
                    let sigma = rng.random_range(0.4..0.7);
                    FlowState::from_vorticity(gaussian_vortex(grid, cx, cy, sigma, amp), 0.0)?
                }
                1 => saddle(grid, cx, cy, rng.random_range(0.6..0.9), amp),
                _ => {
                    let k = rng.random_range(1..=2) as f64;
                    let across_y = rng.random_bool(0.5);
                    let w = ScalarField::from_fn(grid, Variable::new("vorticity", "1/s"), |x, y| {
                        let s = if across_y { y - cy } else { x - cx };
                        amp * (k * s).cos()
                    });
                    FlowState::from_vorticity(w, 0.0)?
                }
            };
            out.push(Sample {
                encoding: embedder.encode(&state)?,
                class,
            });
        }
    }
    Ok(out)
}

fn class_text(dim: usize, seed: u64) -> Result<Array2<f64>> {
    let e = HashingEmbedder::new(dim, seed);
    let mut text = Array2::zeros((CLASS_DESCRIPTIONS.len(), dim));
    for (i, d) in CLASS_DESCRIPTIONS.iter().enumerate() {
        let v = e.embed(d).expect("hashing embedder is infallible for dim > 0");
        text.row_mut(i).assign(&ndarray::Array1::from(v));
    }
    Ok(text)
}

fn mean_loss(params: &ProjectorParams, data: &[Sample], text: &Array2<f64>) -> Result<f64> {
    let n = params.n_queries();
    let total = data
        .par_iter()
        .map(|s| {
            let t = cross_attend(params, &s.encoding)?;
            alignment_loss(&t.h_vis, text, &vec![s.class; n], params.temperature)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(total.iter().sum::<f64>() / data.len() as f64)
}

/// Plain gradient descent on the mean alignment loss.
pub fn train_projector(cfg: &TrainConfig, data: &[Sample]) -> Result<TrainReport> {
    let mut params = ProjectorParams::init(cfg.n_queries, cfg.dim, cfg.d_v, cfg.seed);
    params.temperature = cfg.temperature;
    let text = class_text(cfg.dim, cfg.seed)?;
    let n = cfg.n_queries;
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let per_sample = data
            .par_iter()
            .map(|s| alignment_grad(&params, &s.encoding, &text, &vec![s.class; n], params.temperature))
            .collect::<Result<Vec<_>>>()?;
        let mut grad = Gradients::zeros_like(&params);
        let mut loss = 0.0;
        for (l, g) in &per_sample {
            loss += l;
            grad.add_scaled(g, 1.0 / data.len() as f64);
        }
        losses.push(loss / data.len() as f64);
        params.queries.scaled_add(-cfg.learning_rate, &grad.queries);
        params.w_k.scaled_add(-cfg.learning_rate, &grad.w_k);
        params.w_v.scaled_add(-cfg.learning_rate, &grad.w_v);
    }
    losses.push(mean_loss(&params, data, &text)?);
    Ok(TrainReport { losses, params, text })
}
