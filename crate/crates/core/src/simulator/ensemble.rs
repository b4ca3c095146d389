use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{encode, perturb_latent, trajectory, Propagator, Result, SimError, SimulatorConfig};
use crate::field::{FieldError, FlowState, ScalarField};

/// Member count, perturbation magnitude and number of outputs per member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: usize,
    pub lambda: f64,
    pub outputs: usize,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            members: 8,
            lambda: 0.03,
            outputs: 10,
        }
    }
}

/// Seed of member `k`: `splitmix64(base ^ k)`.
pub fn member_seed(base: u64, k: usize) -> u64 {
    let mut z = (base ^ k as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `K` member trajectories with their mean and population spread per output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleForecast {
    pub lambda: f64,
    pub seeds: Vec<u64>,
    /// `members[k][t]`.
    pub members: Vec<Vec<FlowState>>,
    pub mean: Vec<FlowState>,
    pub spread: Vec<FlowState>,
}

impl EnsembleForecast {
    pub fn from_members(members: Vec<Vec<FlowState>>, lambda: f64, seeds: Vec<u64>) -> Result<Self> {
        let (mean, spread) = moments(&members)?;
        Ok(Self {
            lambda,
            seeds,
            members,
            mean,
            spread,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn outputs(&self) -> usize {
        self.mean.len()
    }

    pub fn spread_of(&self, t: usize, channel: &str) -> Option<&ScalarField> {
        self.spread.get(t)?.channel(channel)
    }

    pub fn mean_of(&self, t: usize, channel: &str) -> Option<&ScalarField> {
        self.mean.get(t)?.channel(channel)
    }

    /// Cell-mean spread of `channel` pooled over every output time.
    pub fn pooled_spread(&self, channel: &str) -> f64 {
        let fields: Vec<&ScalarField> = self.spread.iter().filter_map(|s| s.channel(channel)).collect();
        if fields.is_empty() {
            return 0.0;
        }
        fields.iter().map(|f| f.mean()).sum::<f64>() / fields.len() as f64
    }
}

/// Per-channel ensemble mean and population spread
/// `sqrt(1/K * sum_k (x_k - mean)^2)` at every output time.
fn moments(members: &[Vec<FlowState>]) -> Result<(Vec<FlowState>, Vec<FlowState>)> {
    let first = members
        .first()
        .ok_or_else(|| SimError::Config("ensemble needs at least one member".into()))?;
    let k = members.len() as f64;
    let mut means = Vec::with_capacity(first.len());
    let mut spreads = Vec::with_capacity(first.len());
    for (t, template) in first.iter().enumerate() {
        let mut mean_state = FlowState::new(template.grid, template.time);
        let mut spread_state = FlowState::new(template.grid, template.time);
        for channel in &template.channels {
            let name = channel.name();
            let mut fields = Vec::with_capacity(members.len());
            for traj in members {
                let state = traj.get(t).ok_or_else(|| {
                    SimError::Config(format!("member trajectories differ in length at output {t}"))
                })?;
                fields.push(state.require(name)?.values());
            }
            let n = template.grid.len();
            if fields.iter().any(|f| f.len() != n) {
                return Err(FieldError::GridMismatch.into());
            }
            // Deviations are accumulated around the first member so identical
            // members yield an exact zero spread.
            let base = fields[0];
            let mut shift = vec![0.0; n];
            for f in &fields[1..] {
                for ((m, x), b) in shift.iter_mut().zip(f.iter()).zip(base) {
                    *m += x - b;
                }
            }
            shift.iter_mut().for_each(|m| *m /= k);
            let mut var = vec![0.0; n];
            for f in &fields {
                for (((s, x), b), m) in var.iter_mut().zip(f.iter()).zip(base).zip(&shift) {
                    *s += (x - b - m).powi(2);
                }
            }
            let mean = base.iter().zip(&shift).map(|(b, m)| b + m).collect();
            let spread = var.into_iter().map(|s| (s / k).sqrt()).collect();
            mean_state.insert(ScalarField::new(template.grid, channel.variable.clone(), mean)?)?;
            spread_state.insert(ScalarField::new(template.grid, channel.variable.clone(), spread)?)?;
        }
        means.push(mean_state);
        spreads.push(spread_state);
    }
    Ok((means, spreads))
}

/// Spread of an explicit member set (see [`EnsembleForecast::spread`]).
pub fn ensemble_spread(members: &[Vec<FlowState>]) -> Result<Vec<FlowState>> {
    Ok(moments(members)?.1)
}

/// Runs `spec.members` perturbed rollouts with seeds derived from `cfg.seed`.
pub fn ensemble_rollout(
    x_init: &FlowState,
    spec: &EnsembleSpec,
    cfg: &SimulatorConfig,
) -> Result<EnsembleForecast> {
    let seeds: Vec<u64> = (0..spec.members).map(|k| member_seed(cfg.seed, k)).collect();
    ensemble_rollout_with_seeds(x_init, &seeds, spec.lambda, spec.outputs, cfg)
}

/// Member `k` is `decode(propagate(perturb_latent(encode(x_init), lambda,
/// seeds[k])))` applied recursively for `outputs` outputs. Members run in
/// parallel; results are ordered by member index.
pub fn ensemble_rollout_with_seeds(
    x_init: &FlowState,
    seeds: &[u64],
    lambda: f64,
    outputs: usize,
    cfg: &SimulatorConfig,
) -> Result<EnsembleForecast> {
    if seeds.is_empty() {
        return Err(SimError::Config("ensemble needs at least one member".into()));
    }
    let prop = Propagator::new(x_init.grid, cfg)?;
    let z0 = encode(x_init, cfg.modes_for(x_init.grid))?;
    let members = seeds
        .par_iter()
        .enumerate()
        .map(|(member, &seed)| {
            perturb_latent(&z0, lambda, seed)
                .and_then(|z| trajectory(&prop, z, outputs))
                .map_err(|e| SimError::Member {
                    member,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    EnsembleForecast::from_members(members, lambda, seeds.to_vec())
}
