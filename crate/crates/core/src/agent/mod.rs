//! Critic-gated ReAct loop.
//!
//! Each step asks the policy for one action, executes it against the
//! knowledge store, the ensemble simulator or the counterfactual probe, and
//! runs the critic on any new simulator output. A failed verdict prunes the
//! step from the active path, records a rollback and re-prompts the policy
//! with the violation; after `r_max` rollbacks the episode fails instead.

pub mod action;
pub mod policy;
pub mod prompt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use action::{parse_action, ActionKind, AgentAction, SimulationRequest, ACTION_FENCE};
pub use policy::{PolicyBackend, PolicyRequest, RemotePolicy, ScriptedPolicy};
pub use prompt::{assemble_prompt, history_view, merge_context, ContextChunk, ELISION_MARKER};

use crate::critic::{validate_trajectory, ConsistencyVerdict, ConstraintSpec, Violation};
use crate::field::{FieldError, FlowState, GridSpec, ScalarField, FORCING, VELOCITY_U};
use crate::knowledge::{Embedder, HashingEmbedder, KnowledgeError, KnowledgeStore, Partition, ThresholdRule};
use crate::probe::{counterfactual_rollout, Intervention};
use crate::projector::{
    cross_attend, extract_topology, render_descriptors, PatchEmbedder, ProjectorError, ProjectorParams, Thresholds,
};
use crate::remote::RemoteError;
use crate::report::{
    alerts_from_stats, attach_spread, redact_numbers, render_report, summarize, AnalysisReport, Provenance,
    RenderOptions, RenderedReport, ReportError, INSUFFICIENT_DATA,
};
use crate::simulator::initial::vortex_pair;
use crate::simulator::weather::WeatherDiagnostics;
use crate::simulator::{ensemble_rollout, EnsembleForecast, EnsembleSpec, Forcing, SimulatorConfig};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("unparseable policy output ({reason}): {raw}")]
    Parse { reason: String, raw: String },
    #[error("scripted policy exhausted after {calls} completions")]
    ScriptExhausted { calls: usize },
    #[error("invalid episode config: {0}")]
    Config(String),
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

pub type Result<T> = std::result::Result<T, AgentError>;

pub const DEFAULT_SYSTEM_INSTRUCTION: &str = "You are a flow-analysis agent. Each reply must contain exactly one fenced block opened with ```action and closed with ```, holding a JSON object whose \"action\" is one of: retrieve {query, partition: phy|prot|hist, k}, simulate {request: {mode: ensemble, members, lambda, outputs} or {mode: counterfactual, intervention, members, lambda, outputs}}, reason {thought}, finalize {summary, insights}. Text outside the block is your rationale. Simulation output is checked against physical constraints; rejected steps are rolled back and you will be told why. Do not state numbers in the final narrative; the report injects computed statistics.";

/// Divergence injected into selected simulator outputs (`u += amplitude * x`),
/// used to exercise the rollback path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultPlan {
    #[default]
    None,
    /// Only the first simulate call of the episode.
    FirstSimulate { amplitude: f64 },
    EverySimulate { amplitude: f64 },
}

impl FaultPlan {
    fn amplitude(&self, call: usize) -> Option<f64> {
        match *self {
            FaultPlan::None => None,
            FaultPlan::FirstSimulate { amplitude } => (call == 0).then_some(amplitude),
            FaultPlan::EverySimulate { amplitude } => Some(amplitude),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Uncertainty threshold as a fraction of the mean field magnitude.
    pub delta: f64,
    /// Threshold at the `n`-th simulate call is `delta * delta_decay^n`.
    pub delta_decay: f64,
    pub max_steps: usize,
    pub r_max: usize,
    pub system_instruction: String,
    /// `None` uses the simulator constraints (enstrophy decay when unforced).
    pub constraints: Option<ConstraintSpec>,
    /// Character budget of the history section.
    pub history_budget: usize,
    pub fault: FaultPlan,
    pub weather: WeatherDiagnostics,
    pub render: RenderOptions,
    /// Channel the uncertainty gate looks at.
    pub gate_channel: String,
    /// Descriptors shown to the policy and in the report.
    pub max_descriptors: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            delta: 0.05,
            delta_decay: 1.0,
            max_steps: 16,
            r_max: 3,
            system_instruction: DEFAULT_SYSTEM_INSTRUCTION.to_string(),
            constraints: None,
            history_budget: 4000,
            fault: FaultPlan::None,
            weather: WeatherDiagnostics::default(),
            render: RenderOptions::weather(),
            gate_channel: "vorticity".to_string(),
            max_descriptors: 8,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(AgentError::Config("max_steps must be >= 1".into()));
        }
        if !(self.delta >= 0.0) {
            return Err(AgentError::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(self.delta_decay > 0.0 && self.delta_decay.is_finite()) {
            return Err(AgentError::Config(format!("delta_decay must be positive, got {}", self.delta_decay)));
        }
        if let Some(c) = &self.constraints {
            c.validate().map_err(|e| AgentError::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn threshold_at(&self, simulate_call: usize) -> f64 {
        self.delta * self.delta_decay.powi(simulate_call as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeInputs {
    pub title: String,
    pub initial: FlowState,
    pub sim: SimulatorConfig,
}

impl EpisodeInputs {
    /// Vortex pair (amplitude 5, core width 0.5) on a 64 x 64 torus, seed 42.
    pub fn golden() -> Self {
        let grid = GridSpec::square(64).expect("valid grid");
        Self {
            title: "Vortex pair forecast".to_string(),
            initial: vortex_pair(grid, 0.5, 5.0).expect("vortex pair"),
            sim: SimulatorConfig {
                seed: 42,
                ..SimulatorConfig::default()
            },
        }
    }

    fn forced(&self) -> bool {
        self.sim.forcing != Forcing::None || self.initial.channel(FORCING).is_some()
    }
}

/// Knowledge store, embedder and projector the agent acts with.
pub struct Toolbox {
    pub store: KnowledgeStore,
    pub embedder: Box<dyn Embedder>,
    pub patch: PatchEmbedder,
    pub projector: ProjectorParams,
    pub thresholds: Thresholds,
}

impl Toolbox {
    /// Bundled corpus with the hashing embedder and an untrained projector.
    pub fn builtin(seed: u64) -> Result<Self> {
        let embedder = HashingEmbedder::default();
        Ok(Self {
            store: KnowledgeStore::builtin(&embedder)?,
            embedder: Box::new(embedder),
            patch: PatchEmbedder::new(8, 24, seed),
            projector: ProjectorParams::init(4, 16, 24, seed),
            thresholds: Thresholds::default(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Retrieval,
    Ensemble,
    Counterfactual,
    Note,
    Final,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub call_id: String,
    pub kind: ObservationKind,
    pub text: String,
    pub data: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub id: usize,
    /// Previous step on the active path when this one was taken.
    pub parent: Option<usize>,
    /// Zero for a fresh proposal, `n` for the `n`-th retry after rollbacks.
    pub attempt: usize,
    pub call_id: String,
    pub prompt: String,
    pub raw: String,
    pub action: AgentAction,
    pub observation: Observation,
    pub verdict: Option<ConsistencyVerdict>,
    pub pruned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollbackEvent {
    /// Pruned step.
    pub at_step: usize,
    pub cause: ConsistencyVerdict,
    /// Rollbacks so far in the episode, including this one.
    pub retry: usize,
    /// Corrective observation injected into the next prompt.
    pub correction: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Running,
    Completed,
    Truncated,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub episode_id: String,
    pub config_hash: String,
    pub policy: String,
    pub r_max: usize,
    pub steps: Vec<StepRecord>,
    pub active_path: Vec<usize>,
    pub rollbacks: Vec<RollbackEvent>,
    pub status: EpisodeStatus,
}

impl ReasoningTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes") + "\n"
    }

    pub fn active_steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.active_path.iter().map(|&i| &self.steps[i])
    }

    /// No step on the active path carries a failed verdict.
    pub fn active_path_is_clean(&self) -> bool {
        self.active_steps()
            .all(|s| !s.pruned && s.verdict.as_ref().is_none_or(|v| v.passed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub call_id: String,
    pub intervention: Intervention,
    pub sensitivity: f64,
    pub mean_abs_delta: f64,
    pub factual_spread: f64,
}

/// Report narrative after number redaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Narrative {
    pub summary: String,
    pub insights: String,
}

impl Narrative {
    pub fn insufficient() -> Self {
        Self {
            summary: INSUFFICIENT_DATA.to_string(),
            insights: INSUFFICIENT_DATA.to_string(),
        }
    }

    pub fn from_text(summary: &str, insights: &str) -> Self {
        let clean = |s: &str| {
            let s = redact_numbers(s.trim());
            if s.is_empty() {
                INSUFFICIENT_DATA.to_string()
            } else {
                s
            }
        };
        Self {
            summary: clean(summary),
            insights: clean(insights),
        }
    }
}

/// Report narrative from the policy. The reply must be a finalize action; an
/// empty prompt short-circuits to the "insufficient data" stub.
pub fn narrative_sections(policy: &mut dyn PolicyBackend, prompt: &str) -> Result<Narrative> {
    if prompt.trim().is_empty() {
        return Ok(Narrative::insufficient());
    }
    let (action, raw) = policy.propose(&PolicyRequest { prompt, retry: false })?;
    match action.kind {
        ActionKind::Finalize { summary, insights } => Ok(Narrative::from_text(&summary, &insights)),
        other => Err(AgentError::Parse {
            reason: format!("expected a finalize action, got {}", other.name()),
            raw,
        }),
    }
}

/// `mean(spread) / mean(|mean|)`; zero spread gives zero.
pub fn uncertainty_ratio(spread: &ScalarField, mean: &ScalarField) -> f64 {
    let s = spread.mean();
    if s == 0.0 {
        return 0.0;
    }
    let scale = mean.values().iter().map(|v| v.abs()).sum::<f64>() / mean.values().len() as f64;
    s / scale
}

/// Recommends a counterfactual probe when the relative spread exceeds `delta`.
pub fn uncertainty_gate(spread: &ScalarField, mean: &ScalarField, delta: f64) -> bool {
    uncertainty_ratio(spread, mean) > delta
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub trace: ReasoningTrace,
    pub report: AnalysisReport,
    pub rendered: RenderedReport,
    /// Last accepted forecast with weather diagnostics, if any.
    pub forecast: Option<EnsembleForecast>,
}

impl EpisodeOutcome {
    pub fn status(&self) -> EpisodeStatus {
        self.trace.status
    }
}

#[derive(Serialize)]
struct HashInput<'a> {
    title: &'a str,
    sim: &'a SimulatorConfig,
    cfg: &'a EpisodeConfig,
    grid: GridSpec,
    initial_sha256: String,
    policy: &'a str,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn state_digest(x: &FlowState) -> String {
    let mut h = Sha256::new();
    for ch in &x.channels {
        h.update(ch.name().as_bytes());
        h.update(ch.unit().as_bytes());
        for v in ch.values() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `sha256` of the canonical JSON of everything that determines the episode.
pub fn config_hash(inputs: &EpisodeInputs, cfg: &EpisodeConfig, policy: &str) -> String {
    let input = HashInput {
        title: &inputs.title,
        sim: &inputs.sim,
        cfg,
        grid: inputs.initial.grid,
        initial_sha256: state_digest(&inputs.initial),
        policy,
    };
    sha256_hex(serde_json::to_string(&input).expect("config serializes").as_bytes())
}

/// `u += amplitude * x` on every state: a velocity with divergence
/// `amplitude` that leaves the vorticity channel untouched.
pub fn inject_divergence(states: &mut [FlowState], amplitude: f64) {
    for s in states {
        let grid = s.grid;
        if let Some(u) = s.channel_mut(VELOCITY_U) {
            for (k, v) in u.values_mut().iter_mut().enumerate() {
                *v += amplitude * grid.x(k % grid.width);
            }
        }
    }
}

enum Commit {
    Retrieved {
        chunks: Vec<ContextChunk>,
        rules: Vec<(String, ThresholdRule)>,
    },
    Forecast {
        forecast: Box<EnsembleForecast>,
        advisory: Option<String>,
    },
    Probe {
        summary: ProbeSummary,
        forecast: Box<EnsembleForecast>,
    },
    Final(Narrative),
    Nothing,
}

struct Executed {
    observation: Observation,
    verdict: Option<ConsistencyVerdict>,
    commit: Commit,
}

impl Executed {
    fn error(call_id: &str, what: &str, e: impl std::fmt::Display) -> Self {
        Self {
            observation: Observation {
                call_id: call_id.to_string(),
                kind: ObservationKind::Error,
                text: format!("{what} failed: {e}"),
                data: Value::Null,
            },
            verdict: None,
            commit: Commit::Nothing,
        }
    }
}

enum StepOutcome {
    Continue,
    Finalized,
    Failed,
}

fn flatten(text: &str, limit: usize) -> String {
    let one: String = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" | ");
    if one.chars().count() > limit {
        one.chars().take(limit).collect::<String>() + "..."
    } else {
        one
    }
}

/// One line per violated constraint with its worst measurement.
fn correction_text(step: &StepRecord, verdict: &ConsistencyVerdict) -> String {
    let mut worst: Vec<&Violation> = Vec::new();
    for v in &verdict.violations {
        match worst.iter_mut().find(|w| w.constraint == v.constraint) {
            Some(w) if v.measured > w.measured => *w = v,
            Some(_) => {}
            None => worst.push(v),
        }
    }
    let lines: Vec<String> = worst.iter().map(|v| format!("- {v}")).collect();
    format!(
        "CORRECTION: {} ({}) was rolled back because its output violates physical constraints:\n{}\nRevise the plan so the next result respects these constraints.",
        step.action.kind.name(),
        step.call_id,
        lines.join("\n")
    )
}

fn stats_lines(state: &FlowState, spread: Option<&FlowState>) -> Vec<String> {
    state
        .channels
        .iter()
        .map(|ch| {
            let s = ch.stats();
            let sp = spread
                .and_then(|x| x.channel(ch.name()))
                .map(|f| format!(", spread {:.4}", f.mean()))
                .unwrap_or_default();
            format!(
                "  {} [{}]: mean {:.4}, min {:.4}, max {:.4}, std {:.4}{}",
                ch.name(),
                ch.unit(),
                s.mean,
                s.min,
                s.max,
                s.std,
                sp
            )
        })
        .collect()
}

fn stats_json(state: &FlowState) -> Value {
    let map: serde_json::Map<String, Value> = state
        .channels
        .iter()
        .map(|ch| (ch.name().to_string(), serde_json::to_value(ch.stats()).expect("stats serialize")))
        .collect();
    Value::Object(map)
}

struct Episode<'a> {
    inputs: &'a EpisodeInputs,
    cfg: &'a EpisodeConfig,
    tools: &'a Toolbox,
    trace: ReasoningTrace,
    context: Vec<ContextChunk>,
    rules: Vec<(String, ThresholdRule)>,
    forecast: Option<EnsembleForecast>,
    probes: Vec<ProbeSummary>,
    narrative: Option<Narrative>,
    simulate_calls: usize,
    attempt: usize,
    pending_correction: Option<String>,
    pending_advisory: Option<String>,
}

impl<'a> Episode<'a> {
    fn current_state(&self) -> FlowState {
        match &self.forecast {
            Some(f) => f.mean.last().cloned().unwrap_or_else(|| self.inputs.initial.clone()),
            None => self.inputs.initial.clone(),
        }
    }

    fn descriptors(&self, state: &FlowState) -> String {
        match extract_topology(state, &self.tools.thresholds) {
            Ok(mut d) => {
                d.truncate(self.cfg.max_descriptors);
                render_descriptors(&d)
            }
            Err(e) => format!("structure extraction unavailable: {e}"),
        }
    }

    /// Rendering of the semantic tokens for the current state.
    fn visual_tokens(&self) -> String {
        let state = self.current_state();
        let mut out = vec![format!("structures at t={:.4}:", state.time), self.descriptors(&state)];
        match self
            .tools
            .patch
            .encode(&state)
            .and_then(|enc| cross_attend(&self.tools.projector, &enc))
        {
            Ok(tokens) => {
                let patches_per_row = state.grid.width / self.tools.patch.patch;
                for (k, (row, att)) in tokens.h_vis.rows().into_iter().zip(tokens.attention.rows()).enumerate() {
                    let (best, w) = att
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                    out.push(format!(
                        "token {k}: norm {:.4}, peak attention {:.4} on patch ({}, {})",
                        row.dot(&row).sqrt(),
                        w,
                        best / patches_per_row.max(1),
                        best % patches_per_row.max(1)
                    ));
                }
            }
            Err(e) => out.push(format!("visual tokens unavailable: {e}")),
        }
        if let Some(a) = &self.pending_advisory {
            out.push(a.clone());
        }
        if let Some(c) = &self.pending_correction {
            out.push(c.clone());
        }
        out.join("\n")
    }

    fn history(&self) -> Vec<String> {
        self.trace
            .active_steps()
            .map(|s| {
                format!(
                    "[{}] {}: {} -> {}",
                    s.call_id,
                    s.action.kind.name(),
                    flatten(&s.action.rationale, 160),
                    flatten(&s.observation.text, 400)
                )
            })
            .collect()
    }

    fn prompt(&self) -> String {
        assemble_prompt(
            &self.cfg.system_instruction,
            &self.context,
            &self.visual_tokens(),
            &self.history(),
            self.cfg.history_budget,
        )
    }

    fn constraints(&self, extra_forcing: bool) -> ConstraintSpec {
        self.cfg
            .constraints
            .clone()
            .unwrap_or_else(|| ConstraintSpec::for_simulator(self.inputs.forced() || extra_forcing))
    }

    fn check_members(&self, forecasts: &[&EnsembleForecast], spec: &ConstraintSpec) -> ConsistencyVerdict {
        let violations = forecasts
            .iter()
            .flat_map(|f| f.members.iter())
            .flat_map(|m| validate_trajectory(m, spec).violations)
            .collect();
        ConsistencyVerdict::from_violations(violations)
    }

    fn with_weather(&self, f: &EnsembleForecast) -> std::result::Result<EnsembleForecast, String> {
        let members = f
            .members
            .iter()
            .map(|m| m.iter().map(|s| self.cfg.weather.apply(s)).collect::<std::result::Result<Vec<_>, _>>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        EnsembleForecast::from_members(members, f.lambda, f.seeds.clone()).map_err(|e| e.to_string())
    }

    fn retrieve(&self, call_id: &str, query: &str, partition: Partition, k: usize) -> Executed {
        let r = match self.tools.store.retrieve(query, self.tools.embedder.as_ref(), k, Some(partition)) {
            Ok(r) => r,
            Err(e) => return Executed::error(call_id, "retrieve", e),
        };
        let mut chunks = Vec::new();
        let mut rules = Vec::new();
        let mut lines = vec![format!("retrieved from {}:", partition.as_str())];
        for h in &r.hits {
            let chunk = self.tools.store.get(&h.id).expect("hit ids come from the store");
            chunks.push(ContextChunk {
                id: h.id.clone(),
                partition: h.partition,
                score: h.score,
                text: chunk.text.clone(),
            });
            if let Some(rule) = &chunk.rule {
                rules.push((h.id.clone(), rule.clone()));
                lines.push(format!(
                    "  {} (score {:.4}) rule: {} {} {} {} -> {}",
                    h.id,
                    h.score,
                    rule.variable,
                    rule.op.symbol(),
                    rule.value,
                    rule.unit,
                    rule.directive
                ));
            } else {
                lines.push(format!("  {} (score {:.4})", h.id, h.score));
            }
        }
        Executed {
            observation: Observation {
                call_id: call_id.to_string(),
                kind: ObservationKind::Retrieval,
                text: lines.join("\n"),
                data: serde_json::to_value(&r).expect("retrieval serializes"),
            },
            verdict: None,
            commit: Commit::Retrieved { chunks, rules },
        }
    }

    fn rejected(&self, call_id: &str, kind: ObservationKind, what: &str, verdict: ConsistencyVerdict) -> Executed {
        Executed {
            observation: Observation {
                call_id: call_id.to_string(),
                kind,
                text: format!("{what} rejected by the critic:\n{}", verdict.summary()),
                data: json!({ "rejected": true, "violations": verdict.violations.len() }),
            },
            verdict: Some(verdict),
            commit: Commit::Nothing,
        }
    }

    fn simulate(&self, call_id: &str, request: &SimulationRequest) -> Executed {
        let call = self.simulate_calls;
        let fault = self.cfg.fault.amplitude(call);
        match request {
            SimulationRequest::Ensemble { members, lambda, outputs } => {
                let spec = EnsembleSpec {
                    members: *members,
                    lambda: *lambda,
                    outputs: *outputs,
                };
                let mut f = match ensemble_rollout(&self.inputs.initial, &spec, &self.inputs.sim) {
                    Ok(f) => f,
                    Err(e) => return Executed::error(call_id, "ensemble simulation", e),
                };
                if let Some(a) = fault {
                    f.members.iter_mut().for_each(|m| inject_divergence(m, a));
                }
                let verdict = self.check_members(&[&f], &self.constraints(false));
                if !verdict.passed {
                    return self.rejected(call_id, ObservationKind::Ensemble, "ensemble forecast", verdict);
                }
                let w = match self.with_weather(&f) {
                    Ok(w) => w,
                    Err(e) => return Executed::error(call_id, "weather diagnostics", e),
                };
                let last = w.mean.len() - 1;
                let threshold = self.cfg.threshold_at(call);
                let ch = &self.cfg.gate_channel;
                let (ratio, gate) = match (w.spread_of(last, ch), w.mean_of(last, ch)) {
                    (Some(s), Some(m)) => (uncertainty_ratio(s, m), uncertainty_gate(s, m, threshold)),
                    _ => (0.0, false),
                };
                let advisory = gate.then(|| {
                    format!(
                        "ADVISORY: ensemble spread of {ch} is {ratio:.4} of the mean magnitude, above the threshold {threshold:.4}; consider a counterfactual probe before concluding."
                    )
                });
                let mut text = vec![format!(
                    "ensemble forecast: {members} members, lambda {lambda:.4}, {outputs} outputs; critic passed"
                )];
                text.push("final ensemble mean:".into());
                text.extend(stats_lines(&w.mean[last], Some(&w.spread[last])));
                text.push(format!("uncertainty ratio {ratio:.4} vs threshold {threshold:.4}"));
                text.push("structures in the final mean:".into());
                text.push(self.descriptors(&w.mean[last]));
                if let Some(a) = &advisory {
                    text.push(a.clone());
                }
                let pooled: serde_json::Map<String, Value> = w.mean[0]
                    .channels
                    .iter()
                    .map(|c| (c.name().to_string(), json!(w.pooled_spread(c.name()))))
                    .collect();
                let data = json!({
                    "members": members,
                    "lambda": lambda,
                    "outputs": outputs,
                    "seeds": w.seeds,
                    "final_mean": stats_json(&w.mean[last]),
                    "pooled_spread": pooled,
                    "uncertainty_ratio": ratio,
                    "threshold": threshold,
                    "advisory": gate,
                });
                Executed {
                    observation: Observation {
                        call_id: call_id.to_string(),
                        kind: ObservationKind::Ensemble,
                        text: text.join("\n"),
                        data,
                    },
                    verdict: Some(verdict),
                    commit: Commit::Forecast {
                        forecast: Box::new(w),
                        advisory,
                    },
                }
            }
            SimulationRequest::Counterfactual {
                intervention,
                members,
                lambda,
                outputs,
            } => {
                let spec = EnsembleSpec {
                    members: *members,
                    lambda: *lambda,
                    outputs: *outputs,
                };
                let mut r = match counterfactual_rollout(&self.inputs.initial, intervention, &spec, &self.inputs.sim) {
                    Ok(r) => r,
                    Err(e) => return Executed::error(call_id, "counterfactual probe", e),
                };
                if let Some(a) = fault {
                    r.factual.members.iter_mut().for_each(|m| inject_divergence(m, a));
                    r.counterfactual.members.iter_mut().for_each(|m| inject_divergence(m, a));
                }
                let forced = intervention.channel == FORCING;
                let verdict = self.check_members(&[&r.factual, &r.counterfactual], &self.constraints(forced));
                if !verdict.passed {
                    return self.rejected(call_id, ObservationKind::Counterfactual, "counterfactual probe", verdict);
                }
                let w = match self.with_weather(&r.factual) {
                    Ok(w) => w,
                    Err(e) => return Executed::error(call_id, "weather diagnostics", e),
                };
                let summary = ProbeSummary {
                    call_id: call_id.to_string(),
                    intervention: intervention.clone(),
                    sensitivity: r.sensitivity,
                    mean_abs_delta: r.mean_abs_delta,
                    factual_spread: r.factual_spread,
                };
                let text = format!(
                    "counterfactual `{}` on {}: sensitivity {:.4} (mean |delta vorticity| {:.4} vs factual spread {:.4}); critic passed",
                    intervention.label, intervention.channel, r.sensitivity, r.mean_abs_delta, r.factual_spread
                );
                Executed {
                    observation: Observation {
                        call_id: call_id.to_string(),
                        kind: ObservationKind::Counterfactual,
                        text,
                        data: serde_json::to_value(&summary).expect("probe summary serializes"),
                    },
                    verdict: Some(verdict),
                    commit: Commit::Probe {
                        summary,
                        forecast: Box::new(w),
                    },
                }
            }
        }
    }

    fn execute(&self, call_id: &str, action: &AgentAction) -> Executed {
        match &action.kind {
            ActionKind::Retrieve { query, partition, k } => self.retrieve(call_id, query, *partition, *k),
            ActionKind::Simulate { request } => self.simulate(call_id, request),
            ActionKind::Reason { thought } => Executed {
                observation: Observation {
                    call_id: call_id.to_string(),
                    kind: ObservationKind::Note,
                    text: format!("noted: {}", thought.trim()),
                    data: Value::Null,
                },
                verdict: None,
                commit: Commit::Nothing,
            },
            ActionKind::Finalize { summary, insights } => Executed {
                observation: Observation {
                    call_id: call_id.to_string(),
                    kind: ObservationKind::Final,
                    text: "episode finalized".to_string(),
                    data: Value::Null,
                },
                verdict: None,
                commit: Commit::Final(Narrative::from_text(summary, insights)),
            },
        }
    }

    fn apply(&mut self, commit: Commit) {
        match commit {
            Commit::Retrieved { chunks, rules } => {
                self.context.extend(chunks);
                merge_context(&mut self.context);
                for (id, rule) in rules {
                    if !self.rules.iter().any(|(r, _)| *r == id) {
                        self.rules.push((id, rule));
                    }
                }
            }
            Commit::Forecast { forecast, advisory } => {
                self.forecast = Some(*forecast);
                self.pending_advisory = advisory;
            }
            Commit::Probe { summary, forecast } => {
                self.probes.push(summary);
                self.forecast = Some(*forecast);
            }
            Commit::Final(n) => self.narrative = Some(n),
            Commit::Nothing => {}
        }
    }

    fn react_step(&mut self, policy: &mut dyn PolicyBackend) -> Result<StepOutcome> {
        let prompt = self.prompt();
        let retry = self.pending_correction.is_some();
        let (action, raw) = policy.propose(&PolicyRequest { prompt: &prompt, retry })?;
        // Advisories are shown once.
        if !retry {
            self.pending_advisory = None;
        }
        let id = self.trace.steps.len();
        let call_id = format!("call-{:04}", id + 1);
        let is_simulate = matches!(action.kind, ActionKind::Simulate { .. });
        let executed = self.execute(&call_id, &action);
        if is_simulate {
            self.simulate_calls += 1;
        }
        let failed = executed.verdict.as_ref().is_some_and(|v| !v.passed);
        let record = StepRecord {
            id,
            parent: self.trace.active_path.last().copied(),
            attempt: self.attempt,
            call_id,
            prompt,
            raw,
            action,
            observation: executed.observation,
            verdict: executed.verdict,
            pruned: failed,
        };
        self.trace.steps.push(record);
        if failed {
            return Ok(self.rollback_on_violation(id));
        }
        self.attempt = 0;
        self.pending_correction = None;
        self.trace.active_path.push(id);
        let finalize = self.trace.steps[id].action.is_final();
        self.apply(executed.commit);
        Ok(if finalize { StepOutcome::Finalized } else { StepOutcome::Continue })
    }

    /// Prunes step `id` and either schedules a corrected retry or fails the
    /// episode once `r_max` rollbacks have been spent.
    fn rollback_on_violation(&mut self, id: usize) -> StepOutcome {
        let step = &self.trace.steps[id];
        let verdict = step.verdict.clone().expect("rollback needs a verdict");
        if self.trace.rollbacks.len() >= self.cfg.r_max {
            self.trace.status = EpisodeStatus::Failed;
            return StepOutcome::Failed;
        }
        let correction = correction_text(step, &verdict);
        self.trace.rollbacks.push(RollbackEvent {
            at_step: id,
            cause: verdict,
            retry: self.trace.rollbacks.len() + 1,
            correction: correction.clone(),
        });
        self.pending_correction = Some(correction);
        self.attempt += 1;
        StepOutcome::Continue
    }

    fn build_report(&self) -> Result<AnalysisReport> {
        let (stats, final_state) = match &self.forecast {
            Some(f) => {
                let mut s = summarize(&f.mean);
                attach_spread(&mut s, &f.spread);
                (s, f.mean.last().cloned().unwrap_or_else(|| self.inputs.initial.clone()))
            }
            None => {
                let x = self.cfg.weather.apply(&self.inputs.initial)?;
                (summarize(std::slice::from_ref(&x)), x)
            }
        };
        let alerts = alerts_from_stats(&stats, &self.rules)?;
        let narrative = self.narrative.clone().unwrap_or_else(Narrative::insufficient);
        let mut summary = narrative.summary.clone();
        match self.trace.status {
            EpisodeStatus::Completed => {}
            EpisodeStatus::Failed => summary.push_str(
                "\n\nThe episode failed: simulator output kept violating physical constraints after the allowed rollbacks, so these results are not physically validated.",
            ),
            EpisodeStatus::Truncated | EpisodeStatus::Running => {
                summary.push_str("\n\nThe episode hit its step limit before finalizing; conclusions are provisional.")
            }
        }
        let mut spatial: Vec<String> = vec![format!("Structures in the final field at t={:.4}:", final_state.time)];
        spatial.extend(self.descriptors(&final_state).lines().map(|l| format!("- {l}")));
        for p in &self.probes {
            spatial.push(format!(
                "- Counterfactual `{}`: causal sensitivity {:.4}, mean absolute vorticity shift {:.4} against ensemble spread {:.4}.",
                p.intervention.label, p.sensitivity, p.mean_abs_delta, p.factual_spread
            ));
        }
        let mut seeds = vec![self.inputs.sim.seed];
        if let Some(f) = &self.forecast {
            seeds.extend(&f.seeds);
        }
        Ok(AnalysisReport {
            title: self.inputs.title.clone(),
            executive_summary: Some(summary),
            statistics: stats,
            spatial_pattern_analysis: Some(spatial.join("\n")),
            insights_conclusion: Some(narrative.insights),
            alerts,
            rules: self.rules.clone(),
            provenance: Provenance {
                episode_id: self.trace.episode_id.clone(),
                config_hash: self.trace.config_hash.clone(),
                seeds,
                policy: self.trace.policy.clone(),
            },
        })
    }
}

/// Runs react steps until the policy finalizes, the critic exhausts the
/// rollback budget, or `max_steps` policy calls have been made.
pub fn run_episode(
    inputs: &EpisodeInputs,
    cfg: &EpisodeConfig,
    tools: &Toolbox,
    policy: &mut dyn PolicyBackend,
) -> Result<EpisodeOutcome> {
    cfg.validate()?;
    let policy_id = policy.id();
    let hash = config_hash(inputs, cfg, &policy_id);
    let mut ep = Episode {
        inputs,
        cfg,
        tools,
        trace: ReasoningTrace {
            episode_id: format!("ep-{}", &hash[..12]),
            config_hash: format!("sha256:{hash}"),
            policy: policy_id,
            r_max: cfg.r_max,
            steps: Vec::new(),
            active_path: Vec::new(),
            rollbacks: Vec::new(),
            status: EpisodeStatus::Running,
        },
        context: Vec::new(),
        rules: Vec::new(),
        forecast: None,
        probes: Vec::new(),
        narrative: None,
        simulate_calls: 0,
        attempt: 0,
        pending_correction: None,
        pending_advisory: None,
    };
    for _ in 0..cfg.max_steps {
        match ep.react_step(policy)? {
            StepOutcome::Continue => {}
            StepOutcome::Finalized => {
                ep.trace.status = EpisodeStatus::Completed;
                break;
            }
            StepOutcome::Failed => break,
        }
    }
    if ep.trace.status == EpisodeStatus::Running {
        ep.trace.status = EpisodeStatus::Truncated;
    }
    let report = ep.build_report()?;
    let rendered = render_report(&report, &cfg.render);
    Ok(EpisodeOutcome {
        trace: ep.trace,
        report,
        rendered,
        forecast: ep.forecast,
    })
}
