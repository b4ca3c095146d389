use std::fmt::Display;
use std::path::{Path, PathBuf};

use flowlens::agent::{
    run_episode, AgentError, EpisodeConfig, EpisodeInputs, EpisodeStatus, FaultPlan, PolicyBackend, RemotePolicy,
    ScriptedPolicy, Toolbox,
};
use flowlens::critic::{validate_trajectory, ConsistencyVerdict, ConstraintSpec};
use flowlens::field::{read_field, FlowState, GridSpec, ScalarField, VORTICITY};
use flowlens::knowledge::{Embedder, HashingEmbedder, KnowledgeStore, Partition, RemoteEmbedder};
use flowlens::metrics::evaluate_rollout;
use flowlens::probe::{counterfactual_rollout, Intervention, Operator, Region};
use flowlens::projector::{
    load_checkpoint, save_checkpoint, synthetic_dataset, PatchEmbedder, ProjectorParams, Thresholds,
    TrainConfig,
};
use flowlens::report::{render_report, AnalysisReport, RenderOptions};
use flowlens::simulator::initial::{random_smooth, taylor_green, vortex_pair};
use flowlens::simulator::{ensemble_rollout, rollout, EnsembleForecast, EnsembleSpec, Forcing, SimulatorConfig};
use serde_json::json;

use crate::artifacts::RunDir;
use crate::config::RunConfig;
use crate::{CliError, EvaluateArgs, Outcome, ProbeArgs, ReportArgs, RetrieveArgs};

fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn config(e: impl Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Resolved configuration: the initial state and simulator settings.
pub struct Context {
    pub cfg: RunConfig,
    pub config_path: Option<PathBuf>,
    pub initial: FlowState,
    pub sim: SimulatorConfig,
}

impl Context {
    pub fn new(cfg: RunConfig, config_path: Option<PathBuf>) -> Result<Self, CliError> {
        let grid = GridSpec::square(cfg.grid).map_err(config)?;
        let initial = match cfg.initial.as_str() {
            "taylor_green" => taylor_green(grid, cfg.amplitude),
            "vortex_pair" => vortex_pair(grid, cfg.sigma, cfg.amplitude),
            "random" => random_smooth(grid, cfg.seed, cfg.amplitude, cfg.max_mode),
            other => return Err(config(format!("unknown initial condition `{other}`"))),
        }
        .map_err(config)?;
        let forcing = match cfg.forcing.as_str() {
            "none" => Forcing::None,
            "kolmogorov" => Forcing::Kolmogorov {
                amplitude: cfg.forcing_amplitude,
                wavenumber: cfg.forcing_wavenumber,
            },
            other => return Err(config(format!("unknown forcing `{other}`"))),
        };
        let sim = SimulatorConfig {
            viscosity: cfg.viscosity,
            dt: cfg.dt,
            steps_per_output: cfg.steps_per_output,
            dealias: cfg.dealias,
            forcing,
            seed: cfg.seed,
            latent_modes: None,
        };
        sim.validate().map_err(config)?;
        if cfg.members == 0 || cfg.outputs == 0 {
            return Err(config("members and outputs must be >= 1"));
        }
        Ok(Self {
            cfg,
            config_path,
            initial,
            sim,
        })
    }

    fn run_dir(&self) -> Result<RunDir, CliError> {
        let mut run = RunDir::create(&self.cfg.out)?;
        if let Some(p) = &self.config_path {
            run.add_input(p);
        }
        Ok(run)
    }

    fn spec(&self) -> EnsembleSpec {
        EnsembleSpec {
            members: self.cfg.members,
            lambda: self.cfg.lambda,
            outputs: self.cfg.outputs,
        }
    }

    fn constraints(&self) -> ConstraintSpec {
        ConstraintSpec::for_simulator(self.sim.forcing != Forcing::None)
    }

    fn render_options(&self) -> RenderOptions {
        let mut opts = RenderOptions::default();
        opts.units.insert("pressure".into(), self.cfg.pressure_unit.clone());
        opts
    }

    fn embedder(&self) -> Result<Box<dyn Embedder>, CliError> {
        let e = &self.cfg.embedder;
        if e == "hashing" {
            return Ok(Box::new(HashingEmbedder::new(self.cfg.embed_dim, 0)));
        }
        match e.strip_prefix("remote") {
            Some("") => Ok(Box::new(RemoteEmbedder::from_env(None, self.cfg.embed_dim).map_err(config)?)),
            Some(rest) if rest.starts_with(':') => {
                Ok(Box::new(RemoteEmbedder::from_env(Some(&rest[1..]), self.cfg.embed_dim).map_err(config)?))
            }
            _ => Err(config(format!("unknown embedder `{e}`"))),
        }
    }

    fn store(&self, embedder: &dyn Embedder, run: &mut RunDir) -> Result<KnowledgeStore, CliError> {
        let mut store = KnowledgeStore::builtin(embedder).map_err(runtime)?;
        if let Some(dir) = &self.cfg.knowledge_dir {
            if !dir.is_dir() {
                return Err(config(format!("knowledge_dir {} is not a directory", dir.display())));
            }
            run.add_input(dir);
            for p in Partition::ALL {
                let sub = dir.join(p.as_str());
                if sub.is_dir() {
                    store.ingest(&sub, p, embedder).map_err(runtime)?;
                }
            }
        }
        Ok(store)
    }

    fn toolbox(&self, run: &mut RunDir) -> Result<Toolbox, CliError> {
        let embedder = self.embedder()?;
        let store = self.store(embedder.as_ref(), run)?;
        let (patch, projector) = match &self.cfg.projector {
            Some(path) => {
                run.add_input(path);
                let (h, params) = load_checkpoint(path).map_err(config)?;
                (PatchEmbedder::new(h.p, h.d_v, h.seed), params)
            }
            None => {
                let s = self.cfg.projector_seed;
                (PatchEmbedder::new(8, 24, s), ProjectorParams::init(4, 16, 24, s))
            }
        };
        Ok(Toolbox {
            store,
            embedder,
            patch,
            projector,
            thresholds: Thresholds::default(),
        })
    }

    fn policy(&self, run: &mut RunDir) -> Result<Box<dyn PolicyBackend>, CliError> {
        let p = self.cfg.policy.as_str();
        match p.split_once(':').unwrap_or((p, "")) {
            ("scripted", "golden") => Ok(Box::new(ScriptedPolicy::golden())),
            ("scripted", file) if !file.is_empty() => {
                let path = Path::new(file);
                run.add_input(path);
                let text = std::fs::read_to_string(path).map_err(|e| config(format!("{file}: {e}")))?;
                let script: Vec<String> = serde_json::from_str(&text)
                    .map_err(|e| config(format!("{file}: expected a JSON list of completions: {e}")))?;
                Ok(Box::new(ScriptedPolicy::from_raw(file, script)))
            }
            ("remote", url) => {
                let url = (!url.is_empty()).then_some(url);
                Ok(Box::new(RemotePolicy::from_env(url).map_err(config)?))
            }
            _ => Err(config(format!("unknown policy `{p}`"))),
        }
    }

    fn fault(&self) -> Result<FaultPlan, CliError> {
        let amplitude = self.cfg.fault_amplitude;
        match self.cfg.inject_fault.as_str() {
            "none" => Ok(FaultPlan::None),
            "first" => Ok(FaultPlan::FirstSimulate { amplitude }),
            "always" => Ok(FaultPlan::EverySimulate { amplitude }),
            other => Err(config(format!("inject_fault must be none, first or always, got `{other}`"))),
        }
    }

    fn finish(&self, run: RunDir, command: &str, seeds: &[u64], outcome: Outcome) -> Result<Outcome, CliError> {
        let status = match outcome {
            Outcome::Ok => "ok",
            Outcome::PhysicsFailure => "physics_failure",
        };
        let manifest = run.finish(command, &self.cfg, seeds, status, outcome.code())?;
        eprintln!("wrote {}", manifest.display());
        Ok(outcome)
    }
}

fn outcome_of(verdict: &ConsistencyVerdict) -> Outcome {
    if verdict.passed {
        Outcome::Ok
    } else {
        Outcome::PhysicsFailure
    }
}

fn write_states(run: &mut RunDir, dir: &str, states: &[FlowState]) -> Result<(), CliError> {
    for (t, s) in states.iter().enumerate() {
        for ch in &s.channels {
            run.field(dir, t, ch)?;
        }
    }
    Ok(())
}

fn plot(ctx: &Context, run: &mut RunDir, rel: &str, f: Option<&ScalarField>, diverging: bool) -> Result<(), CliError> {
    match f {
        Some(f) if ctx.cfg.png => run.png(rel, f, diverging),
        _ => Ok(()),
    }
}

/// Worst verdict over all members of an ensemble.
fn ensemble_verdict(f: &EnsembleForecast, spec: &ConstraintSpec) -> ConsistencyVerdict {
    let violations = f
        .members
        .iter()
        .flat_map(|m| validate_trajectory(m, spec).violations)
        .collect();
    ConsistencyVerdict::from_violations(violations)
}

fn report_failure(verdict: &ConsistencyVerdict) {
    if !verdict.passed {
        eprintln!("physics check failed: {}", verdict.summary());
    }
}

pub fn simulate(ctx: &Context) -> Result<Outcome, CliError> {
    let mut run = ctx.run_dir()?;
    let traj = rollout(&ctx.initial, ctx.cfg.outputs, &ctx.sim).map_err(runtime)?;
    let verdict = validate_trajectory(&traj, &ctx.constraints());
    write_states(&mut run, "fields", &traj)?;
    plot(ctx, &mut run, "plots/vorticity_initial.png", traj[0].channel(VORTICITY), true)?;
    plot(ctx, &mut run, "plots/vorticity_final.png", traj.last().and_then(|s| s.channel(VORTICITY)), true)?;
    run.text("verdict.json", &(verdict.to_json() + "\n"))?;
    report_failure(&verdict);
    ctx.finish(run, "simulate", &[ctx.cfg.seed], outcome_of(&verdict))
}

pub fn ensemble(ctx: &Context) -> Result<Outcome, CliError> {
    let mut run = ctx.run_dir()?;
    let f = ensemble_rollout(&ctx.initial, &ctx.spec(), &ctx.sim).map_err(runtime)?;
    let verdict = ensemble_verdict(&f, &ctx.constraints());
    write_states(&mut run, "mean", &f.mean)?;
    write_states(&mut run, "spread", &f.spread)?;
    let last = f.mean.len() - 1;
    plot(ctx, &mut run, "plots/mean_vorticity_final.png", f.mean_of(last, VORTICITY), true)?;
    plot(ctx, &mut run, "plots/spread_vorticity_final.png", f.spread_of(last, VORTICITY), false)?;
    let ratios: Vec<f64> = (0..f.mean.len())
        .map(|t| match (f.spread_of(t, VORTICITY), f.mean_of(t, VORTICITY)) {
            (Some(s), Some(m)) => flowlens::agent::uncertainty_ratio(s, m),
            _ => f64::NAN,
        })
        .collect();
    let summary = json!({
        "members": f.len(),
        "lambda": f.lambda,
        "outputs": ctx.cfg.outputs,
        "seeds": f.seeds,
        "pooled_spread_vorticity": f.pooled_spread(VORTICITY),
        "uncertainty_ratio": ratios,
        "verdict": verdict,
    });
    run.json("summary.json", &summary)?;
    report_failure(&verdict);
    let seeds = f.seeds.clone();
    ctx.finish(run, "ensemble", &seeds, outcome_of(&verdict))
}

fn parse_region(s: &str) -> Result<Region, CliError> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("--region `{s}`: {e}")))?;
    match parts[..] {
        [row0, col0, rows, cols] => Ok(Region::Rect { row0, col0, rows, cols }),
        _ => Err(CliError::Usage(format!("--region expects row0,col0,rows,cols, got `{s}`"))),
    }
}

pub fn probe(ctx: &Context, a: &ProbeArgs) -> Result<Outcome, CliError> {
    let region = a.region.as_deref().map(parse_region).transpose()?.unwrap_or(Region::Full);
    let op = match (a.scale, a.add, a.zero) {
        (Some(c), _, _) => Operator::Scale(c),
        (_, Some(d), _) => Operator::Add(d),
        (_, _, true) => Operator::Zero,
        _ => return Err(CliError::Usage("probe needs one of --scale, --add or --zero".into())),
    };
    let intervention = Intervention::new(&a.channel, region, op, &a.label);
    intervention.validate(&ctx.initial).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut run = ctx.run_dir()?;
    let r = counterfactual_rollout(&ctx.initial, &intervention, &ctx.spec(), &ctx.sim).map_err(runtime)?;
    let spec = ctx.constraints();
    let verdict = ConsistencyVerdict::from_violations(
        ensemble_verdict(&r.factual, &spec)
            .violations
            .into_iter()
            .chain(ensemble_verdict(&r.counterfactual, &spec).violations)
            .collect(),
    );
    for (t, d) in r.delta.iter().enumerate() {
        run.field("delta", t, d)?;
    }
    plot(ctx, &mut run, "plots/delta_vorticity_final.png", r.delta.last(), true)?;
    run.json(
        "probe.json",
        &json!({
            "intervention": r.intervention,
            "mean_abs_delta": r.mean_abs_delta,
            "factual_spread": r.factual_spread,
            "sensitivity": r.sensitivity,
            "members": r.factual.len(),
            "lambda": r.factual.lambda,
            "seeds": r.factual.seeds,
            "verdict": verdict,
        }),
    )?;
    println!(
        "{}: mean |delta| {:.4}, spread {:.4}, sensitivity {:.4}",
        a.label, r.mean_abs_delta, r.factual_spread, r.sensitivity
    );
    report_failure(&verdict);
    let seeds = r.factual.seeds.clone();
    ctx.finish(run, "probe", &seeds, outcome_of(&verdict))
}

pub fn retrieve(ctx: &Context, a: &RetrieveArgs) -> Result<Outcome, CliError> {
    let partition = a
        .partition
        .as_deref()
        .map(str::parse::<Partition>)
        .transpose()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if a.k == 0 {
        return Err(CliError::Usage("--k must be >= 1".into()));
    }
    let mut run = ctx.run_dir()?;
    let embedder = ctx.embedder()?;
    let store = ctx.store(embedder.as_ref(), &mut run)?;
    let result = store.retrieve(&a.query, embedder.as_ref(), a.k, partition).map_err(runtime)?;
    let hits: Vec<_> = result
        .hits
        .iter()
        .map(|h| {
            let chunk = store.get(&h.id);
            json!({
                "id": h.id,
                "partition": h.partition,
                "score": h.score,
                "text": chunk.map(|c| c.text.as_str()),
                "rule": chunk.and_then(|c| c.rule.as_ref()),
            })
        })
        .collect();
    for h in &result.hits {
        println!("{:.4}\t{}\t{}", h.score, h.partition, h.id);
    }
    run.json(
        "retrieval.json",
        &json!({
            "query": result.query,
            "partition": result.partition,
            "k": a.k,
            "embedder": store.embedder_id(),
            "hits": hits,
        }),
    )?;
    ctx.finish(run, "retrieve", &[], Outcome::Ok)
}

pub fn agent_run(ctx: &Context) -> Result<Outcome, CliError> {
    let mut run = ctx.run_dir()?;
    let tools = ctx.toolbox(&mut run)?;
    let mut policy = ctx.policy(&mut run)?;
    let inputs = EpisodeInputs {
        title: ctx.cfg.title.clone(),
        initial: ctx.initial.clone(),
        sim: ctx.sim.clone(),
    };
    let cfg = EpisodeConfig {
        delta: ctx.cfg.delta,
        delta_decay: ctx.cfg.delta_decay,
        max_steps: ctx.cfg.max_steps,
        r_max: ctx.cfg.r_max,
        history_budget: ctx.cfg.history_budget,
        fault: ctx.fault()?,
        render: ctx.render_options(),
        ..EpisodeConfig::default()
    };
    let out = run_episode(&inputs, &cfg, &tools, policy.as_mut()).map_err(|e| match e {
        AgentError::Config(_) => config(e),
        other => runtime(other),
    })?;
    run.text("trace.json", &out.trace.to_json())?;
    run.text("report.md", &out.rendered.markdown)?;
    run.text("report.json", &out.rendered.sidecar)?;
    let mut seeds = vec![ctx.cfg.seed];
    if let Some(f) = &out.forecast {
        let last = f.mean.len() - 1;
        plot(ctx, &mut run, "plots/mean_vorticity_final.png", f.mean_of(last, VORTICITY), true)?;
        plot(ctx, &mut run, "plots/spread_vorticity_final.png", f.spread_of(last, VORTICITY), false)?;
        plot(ctx, &mut run, "plots/mean_wave_height_final.png", f.mean_of(last, "wave_height"), false)?;
        seeds.extend(&f.seeds);
    }
    let status = out.status();
    eprintln!(
        "episode {}: {:?}, {} steps, {} rollbacks",
        out.trace.episode_id,
        status,
        out.trace.steps.len(),
        out.trace.rollbacks.len()
    );
    let outcome = if status == EpisodeStatus::Failed {
        Outcome::PhysicsFailure
    } else {
        Outcome::Ok
    };
    ctx.finish(run, "agent-run", &seeds, outcome)
}

pub fn report(ctx: &Context, a: &ReportArgs) -> Result<Outcome, CliError> {
    let text = std::fs::read_to_string(&a.from).map_err(|e| config(format!("{}: {e}", a.from.display())))?;
    let report: AnalysisReport =
        serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", a.from.display())))?;
    let mut run = ctx.run_dir()?;
    run.add_input(&a.from);
    let rendered = render_report(&report, &ctx.render_options());
    run.text("report.md", &rendered.markdown)?;
    ctx.finish(run, "report", &report.provenance.seeds, Outcome::Ok)
}

/// `step_NNNN_<channel>.bin` files of `dir` in step order.
fn read_steps(dir: &Path, channel: &str) -> Result<Vec<FlowState>, CliError> {
    let suffix = format!("_{channel}.bin");
    let entries = std::fs::read_dir(dir).map_err(|e| config(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("step_") && n.ends_with(&suffix))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(config(format!("no step_*{suffix} files in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let f = read_field(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
            FlowState::new(f.grid, 0.0).with_channel(f).map_err(runtime)
        })
        .collect()
}

pub fn evaluate(ctx: &Context, a: &EvaluateArgs) -> Result<Outcome, CliError> {
    let pred = read_steps(&a.pred, &a.channel)?;
    let reference = read_steps(&a.reference, &a.channel)?;
    let mut run = ctx.run_dir()?;
    run.add_input(&a.pred);
    run.add_input(&a.reference);
    let m = evaluate_rollout(&pred, &reference, &a.channel, a.data_range).map_err(runtime)?;
    let csv = run.root().join("metrics.csv");
    m.write_csv(&csv).map_err(runtime)?;
    run.record("metrics.csv");
    m.write_json(&run.root().join("metrics.json")).map_err(runtime)?;
    run.record("metrics.json");
    println!("rmse {:.4}  ssim {:.4}  psnr {}", m.rmse, m.ssim, m.psnr);
    ctx.finish(run, "evaluate", &[], Outcome::Ok)
}

pub fn train_projector(ctx: &Context) -> Result<Outcome, CliError> {
    let tc = TrainConfig {
        samples_per_class: ctx.cfg.samples_per_class,
        steps: ctx.cfg.train_steps,
        learning_rate: ctx.cfg.learning_rate,
        seed: ctx.cfg.seed,
        ..TrainConfig::default()
    };
    if tc.samples_per_class == 0 || !(tc.learning_rate > 0.0) {
        return Err(config("samples_per_class must be >= 1 and learning_rate > 0"));
    }
    let mut run = ctx.run_dir()?;
    let patch = PatchEmbedder::new(tc.patch, tc.d_v, tc.seed);
    let data = synthetic_dataset(&tc, &patch).map_err(runtime)?;
    let r = flowlens::projector::train_projector(&tc, &data).map_err(runtime)?;
    save_checkpoint(&run.root().join("projector.bin"), &r.params, tc.patch, tc.seed).map_err(runtime)?;
    run.record("projector.bin");
    run.record("projector.json");
    let mut csv = String::from("step,loss\n");
    for (i, l) in r.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    run.text("losses.csv", &csv)?;
    println!("alignment loss {:.4} -> {:.4}", r.initial_loss(), r.final_loss());
    ctx.finish(run, "train-projector", &[tc.seed], Outcome::Ok)
}
