//! Action grammar.
//!
//! A policy reply carries exactly one fenced block opened by ```` ```action ````
//! and closed by ```` ``` ````. The block holds one JSON object tagged by its
//! `"action"` field:
//!
//! ```text
//! {"action": "retrieve", "query": "...", "partition": "phy|prot|hist", "k": 3}
//! {"action": "simulate", "request": {"mode": "ensemble", "members": 8, "lambda": 0.03, "outputs": 10}}
//! {"action": "simulate", "request": {"mode": "counterfactual", "intervention": {...}, "members": 8, "lambda": 0.03, "outputs": 10}}
//! {"action": "reason", "thought": "..."}
//! {"action": "finalize", "summary": "...", "insights": "..."}
//! ```
//!
//! Everything outside the block is kept as the rationale.

use serde::{Deserialize, Serialize};

use super::{AgentError, Result};
use crate::knowledge::Partition;
use crate::probe::Intervention;

pub const ACTION_FENCE: &str = "```action";
const CLOSE_FENCE: &str = "```";

fn default_k() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SimulationRequest {
    Ensemble {
        members: usize,
        lambda: f64,
        outputs: usize,
    },
    Counterfactual {
        intervention: Intervention,
        members: usize,
        lambda: f64,
        outputs: usize,
    },
}

impl SimulationRequest {
    fn shape(&self) -> (usize, f64, usize) {
        match *self {
            SimulationRequest::Ensemble { members, lambda, outputs }
            | SimulationRequest::Counterfactual { members, lambda, outputs, .. } => (members, lambda, outputs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ActionKind {
    Retrieve {
        query: String,
        partition: Partition,
        #[serde(default = "default_k")]
        k: usize,
    },
    Simulate {
        request: SimulationRequest,
    },
    Reason {
        thought: String,
    },
    /// Narrative text for the report; numbers in it are redacted.
    Finalize {
        summary: String,
        #[serde(default)]
        insights: String,
    },
}

impl ActionKind {
    pub fn name(&self) -> &'static str {
        match self {
            ActionKind::Retrieve { .. } => "retrieve",
            ActionKind::Simulate { .. } => "simulate",
            ActionKind::Reason { .. } => "reason",
            ActionKind::Finalize { .. } => "finalize",
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        match self {
            ActionKind::Retrieve { query, k, .. } => {
                if query.trim().is_empty() {
                    return Err("retrieve needs a non-empty query".into());
                }
                if *k == 0 {
                    return Err("retrieve needs k >= 1".into());
                }
            }
            ActionKind::Simulate { request } => {
                let (members, lambda, outputs) = request.shape();
                if members == 0 || outputs == 0 {
                    return Err("simulate needs members >= 1 and outputs >= 1".into());
                }
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(format!("simulate needs a finite lambda >= 0, got {lambda}"));
                }
            }
            ActionKind::Reason { .. } | ActionKind::Finalize { .. } => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAction {
    pub kind: ActionKind,
    pub rationale: String,
}

impl AgentAction {
    pub fn new(kind: ActionKind, rationale: &str) -> Self {
        Self {
            kind,
            rationale: rationale.to_string(),
        }
    }

    pub fn is_final(&self) -> bool {
        matches!(self.kind, ActionKind::Finalize { .. })
    }

    /// Wire form accepted by [`parse_action`].
    pub fn to_wire(&self) -> String {
        let body = serde_json::to_string(&self.kind).expect("action serializes");
        if self.rationale.is_empty() {
            format!("{ACTION_FENCE}\n{body}\n{CLOSE_FENCE}")
        } else {
            format!("{}\n\n{ACTION_FENCE}\n{body}\n{CLOSE_FENCE}", self.rationale)
        }
    }
}

fn parse_err(reason: impl Into<String>, raw: &str) -> AgentError {
    AgentError::Parse {
        reason: reason.into(),
        raw: raw.chars().take(400).collect(),
    }
}

pub fn parse_action(raw: &str) -> Result<AgentAction> {
    let opens: Vec<usize> = raw.match_indices(ACTION_FENCE).map(|(i, _)| i).collect();
    let start = match opens.as_slice() {
        [] => return Err(parse_err("no ```action block found", raw)),
        [one] => *one,
        _ => return Err(parse_err(format!("{} ```action blocks found, expected one", opens.len()), raw)),
    };
    let body_start = start + ACTION_FENCE.len();
    let close = raw[body_start..]
        .find(CLOSE_FENCE)
        .ok_or_else(|| parse_err("unterminated ```action block", raw))?;
    let body = &raw[body_start..body_start + close];
    let kind: ActionKind =
        serde_json::from_str(body.trim()).map_err(|e| parse_err(format!("invalid action JSON: {e}"), raw))?;
    kind.check().map_err(|r| parse_err(r, raw))?;
    let before = raw[..start].trim();
    let after = raw[body_start + close + CLOSE_FENCE.len()..].trim();
    let rationale = match (before.is_empty(), after.is_empty()) {
        (false, false) => format!("{before}\n{after}"),
        (false, true) => before.to_string(),
        (true, _) => after.to_string(),
    };
    Ok(AgentAction { kind, rationale })
}
