//! Counterfactual probing: do-interventions on initial conditions and the
//! causal sensitivity of the forecast to them.
//!
//! Factual and counterfactual ensembles share every member seed, so member
//! `k` of both runs sees the same latent noise draw.
//!
//! Sensitivity is the bounded signal-to-spread ratio
//! `S = D / (D + s + 1e-12)` where `D` is the mean absolute difference of the
//! ensemble-mean vorticity (counterfactual minus factual) and `s` is the mean
//! factual spread, both pooled over every output time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{vorticity, FieldError, FlowState, ScalarField, FORCING, VELOCITY_U, VELOCITY_V, VORTICITY};
use crate::simulator::{ensemble_rollout_with_seeds, member_seed, EnsembleForecast, EnsembleSpec, SimError, SimulatorConfig};

pub const SENSITIVITY_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("channel `{0}` does not enter the dynamics (use vorticity, u, v or forcing)")]
    NotDynamical(String),
    #[error("region rows {row0}..{row1}, cols {col0}..{col1} outside {height}x{width} grid")]
    Region {
        row0: usize,
        row1: usize,
        col0: usize,
        col1: usize,
        height: usize,
        width: usize,
    },
    #[error("scale factor must be finite and non-negative, got {0}")]
    Scale(f64),
    #[error("offset must be finite, got {0}")]
    Offset(f64),
    #[error("factual and counterfactual ensembles are not paired: {0}")]
    Unpaired(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    Full,
    /// Half-open cell box `[row0, row0+rows) x [col0, col0+cols)`.
    Rect {
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Operator {
    Scale(f64),
    Add(f64),
    Zero,
}

impl Operator {
    fn apply(&self, v: f64) -> f64 {
        match *self {
            Operator::Scale(c) => c * v,
            Operator::Add(d) => v + d,
            Operator::Zero => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub channel: String,
    pub region: Region,
    pub op: Operator,
    pub label: String,
}

impl Intervention {
    pub fn new(channel: &str, region: Region, op: Operator, label: &str) -> Self {
        Self {
            channel: channel.to_string(),
            region,
            op,
            label: label.to_string(),
        }
    }

    /// `scale(1)` on the full vorticity field.
    pub fn identity() -> Self {
        Self::new(VORTICITY, Region::Full, Operator::Scale(1.0), "identity")
    }

    pub fn validate(&self, x: &FlowState) -> Result<()> {
        match self.op {
            Operator::Scale(c) if !(c >= 0.0 && c.is_finite()) => return Err(ProbeError::Scale(c)),
            Operator::Add(d) if !d.is_finite() => return Err(ProbeError::Offset(d)),
            _ => {}
        }
        if x.channel(&self.channel).is_none() {
            return Err(ProbeError::UnknownChannel(self.channel.clone()));
        }
        if let Region::Rect { row0, col0, rows, cols } = self.region {
            let (h, w) = (x.grid.height, x.grid.width);
            if rows == 0 || cols == 0 || row0 + rows > h || col0 + cols > w {
                return Err(ProbeError::Region {
                    row0,
                    row1: row0 + rows,
                    col0,
                    col1: col0 + cols,
                    height: h,
                    width: w,
                });
            }
        }
        Ok(())
    }

    fn contains(&self, row: usize, col: usize) -> bool {
        match self.region {
            Region::Full => true,
            Region::Rect { row0, col0, rows, cols } => {
                (row0..row0 + rows).contains(&row) && (col0..col0 + cols).contains(&col)
            }
        }
    }
}

/// Applies the operator to the masked cells of the target channel only;
/// every other value is left bit-identical.
pub fn apply_intervention(x: &FlowState, i: &Intervention) -> Result<FlowState> {
    i.validate(x)?;
    let mut out = x.clone();
    let w = x.grid.width;
    let field = out.channel_mut(&i.channel).expect("validated channel");
    for (k, v) in field.values_mut().iter_mut().enumerate() {
        if i.contains(k / w, k % w) {
            *v = i.op.apply(*v);
        }
    }
    Ok(out)
}

/// Makes a velocity intervention visible to the vorticity-based encoder.
fn dynamical_state(x: &FlowState, channel: &str) -> Result<FlowState> {
    match channel {
        VORTICITY | FORCING => Ok(x.clone()),
        VELOCITY_U | VELOCITY_V => {
            let mut y = x.clone();
            let vel = x.velocity().expect("both velocity channels present");
            y.insert(vorticity(&vel)?)?;
            Ok(y)
        }
        other => Err(ProbeError::NotDynamical(other.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub intervention: Intervention,
    pub factual: EnsembleForecast,
    pub counterfactual: EnsembleForecast,
    /// Counterfactual minus factual ensemble-mean vorticity per output.
    pub delta: Vec<ScalarField>,
    pub mean_abs_delta: f64,
    pub factual_spread: f64,
    pub sensitivity: f64,
}

impl CounterfactualResult {
    pub fn from_forecasts(
        intervention: Intervention,
        factual: EnsembleForecast,
        counterfactual: EnsembleForecast,
    ) -> Result<Self> {
        if factual.seeds != counterfactual.seeds {
            return Err(ProbeError::Unpaired("member seeds differ".into()));
        }
        if factual.lambda != counterfactual.lambda {
            return Err(ProbeError::Unpaired("perturbation amplitudes differ".into()));
        }
        if factual.outputs() != counterfactual.outputs() {
            return Err(ProbeError::Unpaired("output counts differ".into()));
        }
        let mut delta = Vec::with_capacity(factual.outputs());
        for t in 0..factual.outputs() {
            let f = factual.mean[t].require(VORTICITY)?;
            let c = counterfactual.mean[t].require(VORTICITY)?;
            delta.push(c.axpby(1.0, f, -1.0)?);
        }
        let cells: usize = delta.iter().map(|d| d.values().len()).sum();
        let mean_abs_delta = if cells == 0 {
            0.0
        } else {
            delta.iter().flat_map(|d| d.values().iter()).map(|v| v.abs()).sum::<f64>() / cells as f64
        };
        let factual_spread = factual.pooled_spread(VORTICITY);
        Ok(Self {
            intervention,
            sensitivity: causal_sensitivity(mean_abs_delta, factual_spread),
            factual,
            counterfactual,
            delta,
            mean_abs_delta,
            factual_spread,
        })
    }
}

/// `delta / (delta + spread + eps)`, clamped into `[0, 1]`.
pub fn causal_sensitivity(mean_abs_delta: f64, spread: f64) -> f64 {
    let s = mean_abs_delta / (mean_abs_delta + spread + SENSITIVITY_EPS);
    s.clamp(0.0, 1.0)
}

/// Factual and intervened ensembles with the member seeds of `cfg.seed`.
pub fn counterfactual_rollout(
    x_init: &FlowState,
    i: &Intervention,
    spec: &EnsembleSpec,
    cfg: &SimulatorConfig,
) -> Result<CounterfactualResult> {
    let seeds: Vec<u64> = (0..spec.members).map(|k| member_seed(cfg.seed, k)).collect();
    counterfactual_rollout_with_seeds(x_init, i, &seeds, spec.lambda, spec.outputs, cfg)
}

pub fn counterfactual_rollout_with_seeds(
    x_init: &FlowState,
    i: &Intervention,
    seeds: &[u64],
    lambda: f64,
    outputs: usize,
    cfg: &SimulatorConfig,
) -> Result<CounterfactualResult> {
    let intervened = dynamical_state(&apply_intervention(x_init, i)?, &i.channel)?;
    let (factual, counterfactual) = rayon::join(
        || ensemble_rollout_with_seeds(x_init, seeds, lambda, outputs, cfg),
        || ensemble_rollout_with_seeds(&intervened, seeds, lambda, outputs, cfg),
    );
    CounterfactualResult::from_forecasts(i.clone(), factual?, counterfactual?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{GridSpec, Variable};
    use crate::simulator::initial::random_smooth;
    use crate::simulator::{decode, encode, perturb_latent, rollout, Forcing};
    use proptest::prelude::*;

    fn grid() -> GridSpec {
        GridSpec::square(32).unwrap()
    }

    fn cfg() -> SimulatorConfig {
        SimulatorConfig {
            steps_per_output: 10,
            seed: 21,
            ..SimulatorConfig::default()
        }
    }

    fn spec() -> EnsembleSpec {
        EnsembleSpec {
            members: 4,
            lambda: 0.03,
            outputs: 3,
        }
    }

    fn temperature_state() -> FlowState {
        let f = ScalarField::from_fn(grid(), Variable::new("temperature", "K"), |x, y| 280.0 + x.sin() * y.cos());
        FlowState::new(grid(), 0.0).with_channel(f).unwrap()
    }

    #[test]
    fn zero_on_full_grid_clears_the_channel() {
        let x = random_smooth(grid(), 1, 1.0, 5).unwrap();
        let i = Intervention::new(VORTICITY, Region::Full, Operator::Zero, "calm");
        let y = apply_intervention(&x, &i).unwrap();
        assert!(y.require(VORTICITY).unwrap().values().iter().all(|&v| v == 0.0));
        assert_eq!(y.channel(VELOCITY_U), x.channel(VELOCITY_U));
    }

    #[test]
    fn unit_scale_is_identity() {
        let x = random_smooth(grid(), 2, 1.0, 5).unwrap();
        assert_eq!(apply_intervention(&x, &Intervention::identity()).unwrap(), x);
    }

    #[test]
    fn box_offset_changes_exactly_the_box() {
        let x = temperature_state();
        let region = Region::Rect { row0: 3, col0: 25, rows: 10, cols: 7 };
        let i = Intervention::new("temperature", region.clone(), Operator::Add(2.0), "warm_box");
        assert!(i.validate(&x).is_ok());
        let region = Region::Rect { row0: 3, col0: 20, rows: 10, cols: 10 };
        let i = Intervention { region, ..i };
        let y = apply_intervention(&x, &i).unwrap();
        let (a, b) = (x.require("temperature").unwrap(), y.require("temperature").unwrap());
        let changed: Vec<usize> = (0..a.values().len()).filter(|&k| a.values()[k].to_bits() != b.values()[k].to_bits()).collect();
        assert_eq!(changed.len(), 100);
        for k in changed {
            assert_eq!(b.values()[k], a.values()[k] + 2.0);
            let (r, c) = (k / 32, k % 32);
            assert!((3..13).contains(&r) && (20..30).contains(&c));
        }
    }

    #[test]
    fn bad_interventions_are_rejected() {
        let x = temperature_state();
        let i = Intervention::new("salinity", Region::Full, Operator::Zero, "x");
        assert!(matches!(apply_intervention(&x, &i), Err(ProbeError::UnknownChannel(_))));
        let i = Intervention::new("temperature", Region::Rect { row0: 30, col0: 0, rows: 5, cols: 1 }, Operator::Zero, "x");
        assert!(matches!(apply_intervention(&x, &i), Err(ProbeError::Region { .. })));
        let i = Intervention::new("temperature", Region::Full, Operator::Scale(-1.0), "x");
        assert!(matches!(apply_intervention(&x, &i), Err(ProbeError::Scale(_))));
        let i = Intervention::new("temperature", Region::Full, Operator::Zero, "x");
        assert!(matches!(counterfactual_rollout(&x, &i, &spec(), &cfg()), Err(ProbeError::NotDynamical(_))));
    }

    #[test]
    fn identity_intervention_has_zero_sensitivity() {
        let x = random_smooth(grid(), 3, 1.0, 5).unwrap();
        let r = counterfactual_rollout(&x, &Intervention::identity(), &spec(), &cfg()).unwrap();
        assert!(r.delta.iter().all(|d| d.values().iter().all(|&v| v == 0.0)));
        assert_eq!(r.mean_abs_delta, 0.0);
        assert_eq!(r.sensitivity, 0.0);
        assert!(r.factual_spread > 0.0);
    }

    #[test]
    fn equal_signal_and_spread_give_one_half() {
        let g = grid();
        let base = random_smooth(g, 4, 1.0, 5).unwrap();
        let c = 0.25;
        let shifted = |s: f64| {
            let mut y = base.clone();
            for ch in &mut y.channels {
                *ch = ch.map(|v| v + s);
            }
            y
        };
        let factual = EnsembleForecast::from_members(vec![vec![shifted(-c)], vec![shifted(c)]], 0.1, vec![1, 2]).unwrap();
        let counter = EnsembleForecast::from_members(vec![vec![shifted(c)], vec![shifted(c)]], 0.1, vec![1, 2]).unwrap();
        let r = CounterfactualResult::from_forecasts(Intervention::identity(), factual, counter).unwrap();
        assert!((r.mean_abs_delta - c).abs() < 1e-12);
        assert!((r.factual_spread - c).abs() < 1e-12);
        assert!((r.sensitivity - 0.5).abs() < 1e-9);
    }

    #[test]
    fn unpaired_forecasts_are_rejected() {
        let x = vec![vec![random_smooth(grid(), 4, 1.0, 5).unwrap()]];
        let a = EnsembleForecast::from_members(x.clone(), 0.1, vec![1]).unwrap();
        let b = EnsembleForecast::from_members(x, 0.1, vec![2]).unwrap();
        assert!(matches!(
            CounterfactualResult::from_forecasts(Intervention::identity(), a, b),
            Err(ProbeError::Unpaired(_))
        ));
    }

    #[test]
    fn removing_forcing_acts_where_it_was_applied() {
        let g = grid();
        let bump = Forcing::GaussianBump { amplitude: 4.0, x: 1.5, y: 4.5, radius: 0.7 };
        let x = random_smooth(g, 5, 0.2, 4).unwrap().with_channel(bump.field(g).unwrap()).unwrap();
        let i = Intervention::new(FORCING, Region::Full, Operator::Zero, "no_forcing");
        let spec = EnsembleSpec { members: 3, lambda: 0.01, outputs: 4 };
        let r = counterfactual_rollout(&x, &i, &spec, &cfg()).unwrap();
        let last = r.delta.last().unwrap();
        assert!(r.sensitivity > 0.5, "{}", r.sensitivity);
        let near = |row: usize, col: usize| {
            let dx = crate::simulator::periodic_delta(g.x(col) - 1.5, g.lx);
            let dy = crate::simulator::periodic_delta(g.y(row) - 4.5, g.ly);
            (dx * dx + dy * dy).sqrt() < 1.4
        };
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0, 0.0, 0);
        for (k, v) in last.values().iter().enumerate() {
            if near(k / g.width, k % g.width) {
                inside += v.abs();
                n_in += 1;
            } else {
                outside += v.abs();
                n_out += 1;
            }
        }
        assert!(inside / n_in as f64 > 5.0 * outside / n_out as f64);
        // Removing a positive source lowers vorticity at the bump.
        let centre = last.values()[((4.5 / g.dy()).round() as usize) * g.width + (1.5 / g.dx()).round() as usize];
        assert!(centre < 0.0);
    }

    #[test]
    fn permuting_members_leaves_the_result_unchanged() {
        let x = random_smooth(grid(), 6, 1.0, 5).unwrap();
        let i = Intervention::new(VORTICITY, Region::Rect { row0: 4, col0: 4, rows: 8, cols: 8 }, Operator::Scale(1.5), "amplify");
        let seeds: Vec<u64> = (0..4).map(|k| member_seed(99, k)).collect();
        let permuted = vec![seeds[2], seeds[0], seeds[3], seeds[1]];
        let a = counterfactual_rollout_with_seeds(&x, &i, &seeds, 0.03, 3, &cfg()).unwrap();
        let b = counterfactual_rollout_with_seeds(&x, &i, &permuted, 0.03, 3, &cfg()).unwrap();
        for (da, db) in a.delta.iter().zip(&b.delta) {
            for (p, q) in da.values().iter().zip(db.values()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
        assert!((a.sensitivity - b.sensitivity).abs() < 1e-12);
    }

    #[test]
    fn member_zero_is_reproducible_from_its_seed() {
        let x = random_smooth(grid(), 7, 1.0, 5).unwrap();
        let i = Intervention::new(VORTICITY, Region::Full, Operator::Scale(1.2), "stronger");
        let r = counterfactual_rollout(&x, &i, &spec(), &cfg()).unwrap();
        let c = cfg();
        let modes = c.modes_for(x.grid);
        for (forecast, init) in [(&r.factual, x.clone()), (&r.counterfactual, apply_intervention(&x, &i).unwrap())] {
            let z = perturb_latent(&encode(&init, modes).unwrap(), forecast.lambda, forecast.seeds[0]).unwrap();
            let again = rollout(&decode(&z).unwrap(), spec().outputs, &c).unwrap();
            let got = forecast.members[0].last().unwrap().require(VORTICITY).unwrap();
            let want = again.last().unwrap().require(VORTICITY).unwrap();
            let err = got.axpby(1.0, want, -1.0).unwrap().max_abs();
            assert!(err < 1e-10, "{err}");
        }
        assert_eq!(r.factual.seeds, r.counterfactual.seeds);
    }

    #[test]
    fn stronger_scaling_is_more_sensitive() {
        let x = random_smooth(grid(), 8, 1.0, 5).unwrap();
        let mut last = 0.0;
        for c in [1.1, 1.5, 2.0] {
            let i = Intervention::new(VORTICITY, Region::Full, Operator::Scale(c), "scale");
            let s = counterfactual_rollout(&x, &i, &spec(), &cfg()).unwrap().sensitivity;
            assert!(s >= last, "{c}: {s} < {last}");
            last = s;
        }
    }

    #[test]
    fn velocity_interventions_reach_the_dynamics() {
        let x = random_smooth(grid(), 9, 1.0, 5).unwrap();
        let i = Intervention::new(VELOCITY_U, Region::Full, Operator::Scale(0.5), "slow_u");
        let r = counterfactual_rollout(&x, &i, &spec(), &cfg()).unwrap();
        assert!(r.mean_abs_delta > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sensitivity_is_bounded_and_monotone(d in 0.0f64..1e3, s in 0.0f64..1e3, extra in 0.0f64..10.0) {
            let a = causal_sensitivity(d, s);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(causal_sensitivity(d + extra, s) >= a);
            if d == 0.0 {
                prop_assert_eq!(a, 0.0);
            }
        }

        #[test]
        fn outside_the_mask_nothing_changes(row0 in 0usize..30, col0 in 0usize..30, rows in 1usize..3, cols in 1usize..3, c in 0.0f64..3.0) {
            let x = temperature_state();
            let i = Intervention::new("temperature", Region::Rect { row0, col0, rows, cols }, Operator::Scale(c), "s");
            let y = apply_intervention(&x, &i).unwrap();
            let (a, b) = (x.require("temperature").unwrap(), y.require("temperature").unwrap());
            for k in 0..a.values().len() {
                let (r, cc) = (k / 32, k % 32);
                if !((row0..row0 + rows).contains(&r) && (col0..col0 + cols).contains(&cc)) {
                    prop_assert_eq!(a.values()[k].to_bits(), b.values()[k].to_bits());
                }
            }
        }
    }
}
