//! Physical consistency checks on decoded states and trajectories.
//!
//! A [`ConsistencyVerdict`] lists every violated constraint; nothing exits
//! early, so reports can show the full audit.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{divergence, enstrophy, FlowState};

/// Divergence tolerance for fields supplied from outside the simulator.
pub const EXTERNAL_DIV_TOL: f64 = 1e-6;
/// Divergence tolerance for fields produced by the spectral simulator.
pub const SIMULATOR_DIV_TOL: f64 = 1e-8;
/// Relative slack on enstrophy growth between consecutive states.
pub const ENSTROPHY_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CriticError {
    #[error("div_tol must be positive and finite, got {0}")]
    DivTol(f64),
    #[error("bounds for `{variable}` need lo < hi, got [{lo}, {hi}]")]
    Bounds { variable: String, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub div_tol: f64,
    pub enstrophy_monotone: bool,
    #[serde(default)]
    pub bounds: BTreeMap<String, Bounds>,
    pub finite_required: bool,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        Self {
            div_tol: EXTERNAL_DIV_TOL,
            enstrophy_monotone: false,
            bounds: BTreeMap::new(),
            finite_required: true,
        }
    }
}

impl ConstraintSpec {
    /// Constraints for simulator output; enstrophy decay only holds unforced.
    pub fn for_simulator(forced: bool) -> Self {
        Self {
            div_tol: SIMULATOR_DIV_TOL,
            enstrophy_monotone: !forced,
            ..Self::default()
        }
    }

    pub fn with_bounds(mut self, variable: &str, lo: f64, hi: f64) -> Self {
        self.bounds.insert(variable.to_string(), Bounds { lo, hi });
        self
    }

    pub fn validate(&self) -> Result<(), CriticError> {
        if !(self.div_tol > 0.0 && self.div_tol.is_finite()) {
            return Err(CriticError::DivTol(self.div_tol));
        }
        for (variable, b) in &self.bounds {
            if !(b.lo < b.hi) {
                return Err(CriticError::Bounds {
                    variable: variable.clone(),
                    lo: b.lo,
                    hi: b.hi,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Finiteness,
    MassConservation,
    LowerBound(String),
    UpperBound(String),
    EnstrophyMonotone,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::Finiteness => f.write_str("finiteness"),
            Constraint::MassConservation => f.write_str("mass conservation (divergence-free velocity)"),
            Constraint::LowerBound(v) => write!(f, "lower bound on {v}"),
            Constraint::UpperBound(v) => write!(f, "upper bound on {v}"),
            Constraint::EnstrophyMonotone => f.write_str("enstrophy decay"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: Constraint,
    pub step: usize,
    pub measured: f64,
    pub threshold: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} violated at step {}: measured {:.4e}, threshold {:.4e}",
            self.constraint, self.step, self.measured, self.threshold
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyVerdict {
    pub passed: bool,
    pub violations: Vec<Violation>,
}

impl ConsistencyVerdict {
    pub fn from_violations(violations: Vec<Violation>) -> Self {
        Self {
            passed: violations.is_empty(),
            violations,
        }
    }

    pub fn pass() -> Self {
        Self::from_violations(Vec::new())
    }

    pub fn first_step(&self) -> Option<usize> {
        self.violations.iter().map(|v| v.step).min()
    }

    /// One line per violation.
    pub fn summary(&self) -> String {
        if self.passed {
            return "all physical constraints satisfied".to_string();
        }
        self.violations
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("verdict serializes")
    }
}

fn state_violations(x: &FlowState, spec: &ConstraintSpec, step: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let bad: usize = x
        .channels
        .iter()
        .map(|c| c.values().iter().filter(|v| !v.is_finite()).count())
        .sum();
    if spec.finite_required && bad > 0 {
        out.push(Violation {
            constraint: Constraint::Finiteness,
            step,
            measured: bad as f64,
            threshold: 0.0,
        });
    }
    if bad == 0 {
        if let Some(vel) = x.velocity() {
            if let Ok(div) = divergence(&vel) {
                let m = div.max_abs();
                if m > spec.div_tol {
                    out.push(Violation {
                        constraint: Constraint::MassConservation,
                        step,
                        measured: m,
                        threshold: spec.div_tol,
                    });
                }
            }
        }
    }
    for (name, b) in &spec.bounds {
        let Some(field) = x.channel(name) else {
            continue;
        };
        let finite = field.values().iter().copied().filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
            (l.min(v), h.max(v))
        });
        if lo < b.lo {
            out.push(Violation {
                constraint: Constraint::LowerBound(name.clone()),
                step,
                measured: lo,
                threshold: b.lo,
            });
        }
        if hi > b.hi {
            out.push(Violation {
                constraint: Constraint::UpperBound(name.clone()),
                step,
                measured: hi,
                threshold: b.hi,
            });
        }
    }
    out
}

/// Divergence, bounds and finiteness of a single state.
pub fn check_state(x: &FlowState, spec: &ConstraintSpec) -> ConsistencyVerdict {
    check_state_at(x, spec, 0)
}

/// As [`check_state`], reporting violations at `step`.
pub fn check_state_at(x: &FlowState, spec: &ConstraintSpec, step: usize) -> ConsistencyVerdict {
    ConsistencyVerdict::from_violations(state_violations(x, spec, step))
}

fn state_enstrophy(x: &FlowState) -> Option<f64> {
    if !x.is_finite() {
        return None;
    }
    x.vorticity_field().ok().map(|w| enstrophy(&w))
}

/// Per-state checks on every step plus enstrophy decay across steps.
/// Violations are ordered by step.
pub fn validate_trajectory(traj: &[FlowState], spec: &ConstraintSpec) -> ConsistencyVerdict {
    let per_state: Vec<Vec<Violation>> = traj
        .par_iter()
        .enumerate()
        .map(|(step, x)| state_violations(x, spec, step))
        .collect();
    let mut by_step: Vec<Vec<Violation>> = per_state;
    if spec.enstrophy_monotone {
        let z: Vec<Option<f64>> = traj.par_iter().map(state_enstrophy).collect();
        for k in 1..traj.len() {
            if let (Some(prev), Some(cur)) = (z[k - 1], z[k]) {
                let limit = prev + ENSTROPHY_SLACK * prev.max(1.0);
                if cur > limit {
                    by_step[k].push(Violation {
                        constraint: Constraint::EnstrophyMonotone,
                        step: k,
                        measured: cur,
                        threshold: prev,
                    });
                }
            }
        }
    }
    ConsistencyVerdict::from_violations(by_step.into_iter().flatten().collect())
}
