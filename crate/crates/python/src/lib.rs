//! Python module `flowlens`: flow states, rollouts, ensembles, the physics
//! critic, counterfactual probes, retrieval, metrics and scripted agent
//! episodes. Structured results come back as plain dicts and lists.

use flowlens::agent::{
    run_episode as run_agent, EpisodeConfig, EpisodeInputs, FaultPlan, ScriptedPolicy, Toolbox,
};
use flowlens::critic::{validate_trajectory, ConstraintSpec};
use flowlens::field::{FlowState as CoreState, GridSpec};
use flowlens::knowledge::{HashingEmbedder, KnowledgeStore, Partition};
use flowlens::metrics::evaluate_rollout;
use flowlens::probe::{counterfactual_rollout, Intervention, Operator, Region};
use flowlens::simulator::initial::{random_smooth, taylor_green, vortex_pair};
use flowlens::simulator::{ensemble_rollout, rollout as core_rollout, EnsembleSpec, Forcing, SimulatorConfig};
use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Round-trips through `json.loads` so nested results arrive as dicts.
fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Multi-channel field on a periodic grid.
#[pyclass(name = "FlowState", module = "flowlens", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyFlowState {
    inner: CoreState,
}

#[pymethods]
impl PyFlowState {
    /// `(height, width)`.
    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.grid.height, self.inner.grid.width)
    }

    #[getter]
    fn time(&self) -> f64 {
        self.inner.time
    }

    fn channel_names(&self) -> Vec<String> {
        self.inner.channel_names().into_iter().map(String::from).collect()
    }

    /// Channel values as a list of rows.
    fn channel(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
        let f = self
            .inner
            .channel(name)
            .ok_or_else(|| PyKeyError::new_err(name.to_string()))?;
        Ok(f.values().chunks(self.inner.grid.width).map(<[f64]>::to_vec).collect())
    }

    fn unit(&self, name: &str) -> PyResult<String> {
        self.inner
            .channel(name)
            .map(|f| f.unit().to_string())
            .ok_or_else(|| PyKeyError::new_err(name.to_string()))
    }

    fn is_finite(&self) -> bool {
        self.inner.is_finite()
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.shape();
        format!("FlowState({h}x{w}, t={}, channels={:?})", self.inner.time, self.channel_names())
    }
}

fn wrap(states: Vec<CoreState>) -> Vec<PyFlowState> {
    states.into_iter().map(|inner| PyFlowState { inner }).collect()
}

fn unwrap(states: &[PyRef<'_, PyFlowState>]) -> Vec<CoreState> {
    states.iter().map(|s| s.inner.clone()).collect()
}

/// Initial condition: `taylor_green`, `vortex_pair` or `random`.
#[pyfunction]
#[pyo3(signature = (kind="vortex_pair", grid=64, amplitude=5.0, sigma=0.5, seed=42, max_mode=4))]
fn initial(kind: &str, grid: usize, amplitude: f64, sigma: f64, seed: u64, max_mode: i64) -> PyResult<PyFlowState> {
    let g = GridSpec::square(grid).map_err(value_err)?;
    let inner = match kind {
        "taylor_green" => taylor_green(g, amplitude),
        "vortex_pair" => vortex_pair(g, sigma, amplitude),
        "random" => random_smooth(g, seed, amplitude, max_mode),
        other => return Err(PyValueError::new_err(format!("unknown initial condition `{other}`"))),
    }
    .map_err(value_err)?;
    Ok(PyFlowState { inner })
}

fn sim_config(viscosity: f64, dt: f64, steps_per_output: usize, seed: u64, kolmogorov: Option<(f64, f64)>) -> PyResult<SimulatorConfig> {
    let cfg = SimulatorConfig {
        viscosity,
        dt,
        steps_per_output,
        seed,
        forcing: kolmogorov.map_or(Forcing::None, |(amplitude, wavenumber)| Forcing::Kolmogorov { amplitude, wavenumber }),
        ..SimulatorConfig::default()
    };
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

/// Deterministic rollout; returns `outputs + 1` states starting with `state`.
#[pyfunction]
#[pyo3(signature = (state, outputs, viscosity=1e-2, dt=1e-3, steps_per_output=10, kolmogorov=None))]
fn rollout(
    py: Python<'_>,
    state: &PyFlowState,
    outputs: usize,
    viscosity: f64,
    dt: f64,
    steps_per_output: usize,
    kolmogorov: Option<(f64, f64)>,
) -> PyResult<Vec<PyFlowState>> {
    let cfg = sim_config(viscosity, dt, steps_per_output, 0, kolmogorov)?;
    let x = state.inner.clone();
    let traj = py.detach(|| core_rollout(&x, outputs, &cfg)).map_err(runtime_err)?;
    Ok(wrap(traj))
}

/// Perturbed ensemble. Returns `{"mean", "spread", "seeds", "lambda",
/// "pooled_spread"}` with `mean`/`spread` as lists of states.
#[pyfunction]
#[pyo3(signature = (state, members=8, lam=0.03, outputs=10, seed=42, viscosity=1e-2, dt=1e-3, steps_per_output=10))]
#[allow(clippy::too_many_arguments)]
fn ensemble<'py>(
    py: Python<'py>,
    state: &PyFlowState,
    members: usize,
    lam: f64,
    outputs: usize,
    seed: u64,
    viscosity: f64,
    dt: f64,
    steps_per_output: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = sim_config(viscosity, dt, steps_per_output, seed, None)?;
    let spec = EnsembleSpec { members, lambda: lam, outputs };
    let x = state.inner.clone();
    let f = py.detach(|| ensemble_rollout(&x, &spec, &cfg)).map_err(runtime_err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("pooled_spread", f.pooled_spread(flowlens::field::VORTICITY))?;
    out.set_item("seeds", f.seeds.clone())?;
    out.set_item("lambda", f.lambda)?;
    out.set_item("mean", wrap(f.mean))?;
    out.set_item("spread", wrap(f.spread))?;
    Ok(out.into_any())
}

/// Critic verdict for a trajectory: `{"passed", "violations"}`.
#[pyfunction]
#[pyo3(signature = (trajectory, forced=false))]
fn check<'py>(py: Python<'py>, trajectory: Vec<PyRef<'py, PyFlowState>>, forced: bool) -> PyResult<Bound<'py, PyAny>> {
    let verdict = validate_trajectory(&unwrap(&trajectory), &ConstraintSpec::for_simulator(forced));
    to_py(py, &verdict)
}

/// Counterfactual probe with exactly one of `scale`, `add` or `zero`.
/// `region` is `(row0, col0, rows, cols)`; the whole field if omitted.
#[pyfunction]
#[pyo3(signature = (state, channel="vorticity", scale=None, add=None, zero=false, region=None, label="probe", members=8, lam=0.03, outputs=10, seed=42))]
#[allow(clippy::too_many_arguments)]
fn probe<'py>(
    py: Python<'py>,
    state: &PyFlowState,
    channel: &str,
    scale: Option<f64>,
    add: Option<f64>,
    zero: bool,
    region: Option<(usize, usize, usize, usize)>,
    label: &str,
    members: usize,
    lam: f64,
    outputs: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let op = match (scale, add, zero) {
        (Some(c), None, false) => Operator::Scale(c),
        (None, Some(d), false) => Operator::Add(d),
        (None, None, true) => Operator::Zero,
        _ => return Err(PyValueError::new_err("give exactly one of scale, add or zero")),
    };
    let region = region.map_or(Region::Full, |(row0, col0, rows, cols)| Region::Rect { row0, col0, rows, cols });
    let i = Intervention::new(channel, region, op, label);
    let cfg = sim_config(1e-2, 1e-3, 10, seed, None)?;
    let spec = EnsembleSpec { members, lambda: lam, outputs };
    let x = state.inner.clone();
    let r = py.detach(|| counterfactual_rollout(&x, &i, &spec, &cfg)).map_err(value_err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("sensitivity", r.sensitivity)?;
    out.set_item("mean_abs_delta", r.mean_abs_delta)?;
    out.set_item("factual_spread", r.factual_spread)?;
    out.set_item("intervention", to_py(py, &r.intervention)?)?;
    Ok(out.into_any())
}

/// Top-`k` chunks of the bundled corpus: list of `{"id", "partition", "score", "text"}`.
#[pyfunction]
#[pyo3(signature = (query, k=3, partition=None))]
fn retrieve<'py>(py: Python<'py>, query: &str, k: usize, partition: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let part = partition.map(str::parse::<Partition>).transpose().map_err(value_err)?;
    let embedder = HashingEmbedder::default();
    let store = KnowledgeStore::builtin(&embedder).map_err(runtime_err)?;
    let r = store.retrieve(query, &embedder, k, part).map_err(value_err)?;
    let hits: Vec<serde_json::Value> = r
        .hits
        .iter()
        .map(|h| {
            serde_json::json!({
                "id": h.id,
                "partition": h.partition,
                "score": h.score,
                "text": store.get(&h.id).map(|c| c.text.clone()),
            })
        })
        .collect();
    to_py(py, &hits)
}

/// RMSE / SSIM / PSNR of `pred` against `reference` on one channel.
#[pyfunction]
#[pyo3(signature = (pred, reference, channel="vorticity", data_range=None))]
fn evaluate<'py>(
    py: Python<'py>,
    pred: Vec<PyRef<'py, PyFlowState>>,
    reference: Vec<PyRef<'py, PyFlowState>>,
    channel: &str,
    data_range: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let m = evaluate_rollout(&unwrap(&pred), &unwrap(&reference), channel, data_range).map_err(value_err)?;
    to_py(py, &m)
}

/// Scripted reference episode on the vortex pair. `fault` is `none`,
/// `first` or `always`. Returns `{"status", "trace", "report",
/// "markdown"}`.
#[pyfunction]
#[pyo3(signature = (fault="none", fault_amplitude=1.0, r_max=3))]
fn run_episode<'py>(py: Python<'py>, fault: &str, fault_amplitude: f64, r_max: usize) -> PyResult<Bound<'py, PyAny>> {
    let fault = match fault {
        "none" => FaultPlan::None,
        "first" => FaultPlan::FirstSimulate { amplitude: fault_amplitude },
        "always" => FaultPlan::EverySimulate { amplitude: fault_amplitude },
        other => return Err(PyValueError::new_err(format!("fault must be none, first or always, got `{other}`"))),
    };
    let cfg = EpisodeConfig {
        fault,
        r_max,
        ..EpisodeConfig::default()
    };
    let out = py
        .detach(|| {
            let tools = Toolbox::builtin(0)?;
            run_agent(&EpisodeInputs::golden(), &cfg, &tools, &mut ScriptedPolicy::golden())
        })
        .map_err(runtime_err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("status", to_py(py, &out.trace.status)?)?;
    d.set_item("trace", to_py(py, &out.trace)?)?;
    d.set_item("report", to_py(py, &out.report)?)?;
    d.set_item("markdown", out.rendered.markdown)?;
    Ok(d.into_any())
}

#[pymodule]
#[pyo3(name = "flowlens")]
fn flowlens_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFlowState>()?;
    m.add_function(wrap_pyfunction!(initial, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(probe, m)?)?;
    m.add_function(wrap_pyfunction!(retrieve, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_episode, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pyo3::types::PyDict;

    #[test]
    fn module_exposes_rollout_and_critic() {
        Python::initialize();
        Python::attach(|py| {
            let m = PyModule::new(py, "flowlens").unwrap();
            flowlens_module(&m).unwrap();
            let globals = PyDict::new(py);
            globals.set_item("fl", &m).unwrap();
            let code = c"x = fl.initial('taylor_green', grid=16, amplitude=1.0)\n\
traj = fl.rollout(x, 2)\n\
ok = len(traj) == 3 and fl.check(traj)['passed'] and traj[2].time > 0\n";
            py.run(code, Some(&globals), None).unwrap();
            assert!(globals.get_item("ok").unwrap().unwrap().extract::<bool>().unwrap());
            let err = py.run(c"fl.initial('nope')", Some(&globals), None).unwrap_err();
            assert!(err.is_instance_of::<PyValueError>(py));
        });
    }
}
