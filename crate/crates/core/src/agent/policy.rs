use serde_json::{json, Value};

use super::action::{parse_action, ActionKind, AgentAction, SimulationRequest};
use super::{AgentError, Result};
use crate::knowledge::Partition;
use crate::probe::{Intervention, Operator, Region};
use crate::remote::{RemoteEndpoint, RemoteError, ENV_API_URL, ENV_MODEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyRequest<'a> {
    pub prompt: &'a str,
    /// The previous proposal was rolled back and the prompt carries a
    /// correction.
    pub retry: bool,
}

/// Source of actions for the agent loop.
pub trait PolicyBackend: Send {
    fn id(&self) -> String;

    /// Raw completion for `req`.
    fn complete(&mut self, req: &PolicyRequest<'_>) -> Result<String>;

    /// Parsed action plus the raw completion it came from.
    fn propose(&mut self, req: &PolicyRequest<'_>) -> Result<(AgentAction, String)> {
        let raw = self.complete(req)?;
        let action = parse_action(&raw)?;
        Ok((action, raw))
    }
}

/// Replays a fixed list of completions. A retry repeats the previous
/// completion, which models a policy that keeps its plan after a rollback.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedPolicy {
    name: String,
    script: Vec<String>,
    cursor: usize,
    last: Option<String>,
}

impl ScriptedPolicy {
    pub fn from_raw(name: &str, script: Vec<String>) -> Self {
        Self {
            name: name.to_string(),
            script,
            cursor: 0,
            last: None,
        }
    }

    pub fn from_actions(name: &str, actions: &[AgentAction]) -> Self {
        Self::from_raw(name, actions.iter().map(AgentAction::to_wire).collect())
    }

    /// The reference episode: two retrievals, an ensemble forecast, a
    /// counterfactual probe of the western vortex core, a reasoning note and
    /// the final narrative. Region coordinates assume a 64 x 64 grid.
    pub fn golden() -> Self {
        let actions = [
            AgentAction::new(
                ActionKind::Retrieve {
                    query: "mass conservation divergence free velocity".into(),
                    partition: Partition::Phy,
                    k: 3,
                },
                "Start from the governing constraints before looking at the forecast.",
            ),
            AgentAction::new(
                ActionKind::Retrieve {
                    query: "wave height threshold suspend flight routes".into(),
                    partition: Partition::Prot,
                    k: 3,
                },
                "Pull the operational protocols that could turn the forecast into an alert.",
            ),
            AgentAction::new(
                ActionKind::Simulate {
                    request: SimulationRequest::Ensemble {
                        members: 8,
                        lambda: 0.03,
                        outputs: 10,
                    },
                },
                "Run a perturbed ensemble to get the forecast and its spread.",
            ),
            AgentAction::new(
                ActionKind::Simulate {
                    request: SimulationRequest::Counterfactual {
                        intervention: Intervention::new(
                            "vorticity",
                            Region::Rect {
                                row0: 24,
                                col0: 8,
                                rows: 16,
                                cols: 16,
                            },
                            Operator::Scale(1.5),
                            "amplified_core",
                        ),
                        members: 8,
                        lambda: 0.03,
                        outputs: 10,
                    },
                },
                "Probe whether strengthening the western core changes the outcome beyond the ensemble noise.",
            ),
            AgentAction::new(
                ActionKind::Reason {
                    thought: "The dipole stays coherent and the critic passed every member, so the forecast is physically admissible. The counterfactual shift is compared against the ensemble spread to judge whether the core intensity is a causal driver.".into(),
                },
                "Consolidate the evidence before writing the report.",
            ),
            AgentAction::new(
                ActionKind::Finalize {
                    summary: "A counter-rotating vortex pair drifts as a coherent dipole while viscosity slowly erodes its cores. The ensemble stays tight around the mean, so the forecast is well constrained.".into(),
                    insights: "Kinetic energy concentrated between the cores drives the wave height maximum, which is where protocol thresholds bind. Amplifying one core shifts the downstream field by more than the ensemble noise, so core intensity is a causal driver of the forecast.".into(),
                },
                "Enough evidence to conclude.",
            ),
        ];
        Self::from_actions("scripted:golden", &actions)
    }

    pub fn remaining(&self) -> usize {
        self.script.len() - self.cursor
    }
}

impl PolicyBackend for ScriptedPolicy {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn complete(&mut self, req: &PolicyRequest<'_>) -> Result<String> {
        if req.retry {
            if let Some(last) = &self.last {
                return Ok(last.clone());
            }
        }
        let next = self
            .script
            .get(self.cursor)
            .cloned()
            .ok_or(AgentError::ScriptExhausted { calls: self.cursor })?;
        self.cursor += 1;
        self.last = Some(next.clone());
        Ok(next)
    }
}

/// Chat-completion client: POSTs `{model, messages, temperature, max_tokens}`
/// and reads `choices[0].message.content`.
#[derive(Debug, Clone, PartialEq)]
pub struct RemotePolicy {
    pub endpoint: RemoteEndpoint,
    pub max_tokens: usize,
    pub temperature: f64,
}

impl RemotePolicy {
    pub fn new(endpoint: RemoteEndpoint) -> Self {
        Self {
            endpoint,
            max_tokens: 1024,
            temperature: 0.0,
        }
    }

    /// Endpoint from `FLOWLENS_API_URL` unless `url` is given.
    pub fn from_env(url: Option<&str>) -> Result<Self> {
        Ok(Self::new(RemoteEndpoint::from_env(url, ENV_API_URL, ENV_MODEL)?))
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.endpoint.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })
    }
}

impl PolicyBackend for RemotePolicy {
    fn id(&self) -> String {
        format!("remote:{}#{}", self.endpoint.url, self.endpoint.model)
    }

    fn complete(&mut self, req: &PolicyRequest<'_>) -> Result<String> {
        let resp = self.endpoint.post_json(&self.request_body(req.prompt))?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                RemoteError::Malformed {
                    url: self.endpoint.url.clone(),
                    message: "missing choices[0].message.content".into(),
                }
                .into()
            })
    }
}
