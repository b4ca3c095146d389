//! Run configuration: built-in defaults, then a flat TOML file, then flags.
//!
//! A file may name other files under `include` (a string or a list, paths
//! relative to the including file). Included files are applied first, in
//! order, so the including file wins. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub title: String,
    pub seed: u64,
    pub grid: usize,
    /// `taylor_green`, `vortex_pair` or `random`.
    pub initial: String,
    pub amplitude: f64,
    /// Core width of `vortex_pair`.
    pub sigma: f64,
    /// Highest mode of `random`.
    pub max_mode: i64,
    pub viscosity: f64,
    pub dt: f64,
    pub steps_per_output: usize,
    pub dealias: bool,
    /// `none` or `kolmogorov`.
    pub forcing: String,
    pub forcing_amplitude: f64,
    pub forcing_wavenumber: f64,
    pub outputs: usize,
    pub members: usize,
    pub lambda: f64,
    pub delta: f64,
    pub delta_decay: f64,
    pub max_steps: usize,
    pub r_max: usize,
    pub history_budget: usize,
    /// `scripted:golden` or `remote[:url]`.
    pub policy: String,
    /// `hashing` or `remote[:url]`.
    pub embedder: String,
    /// Extra corpus with `phy/`, `prot/` and `hist/` subdirectories.
    pub knowledge_dir: Option<PathBuf>,
    pub embed_dim: usize,
    /// Projector checkpoint from `train-projector`; untrained weights if unset.
    pub projector: Option<PathBuf>,
    /// Seed of the untrained patch embedder and projector.
    pub projector_seed: u64,
    /// `none`, `first` (first simulate call only) or `always`.
    pub inject_fault: String,
    /// Divergence of the injected velocity error.
    pub fault_amplitude: f64,
    pub pressure_unit: String,
    pub png: bool,
    pub out: PathBuf,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub samples_per_class: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            title: "Vortex pair forecast".into(),
            seed: 42,
            grid: 64,
            initial: "vortex_pair".into(),
            amplitude: 5.0,
            sigma: 0.5,
            max_mode: 4,
            viscosity: 1e-2,
            dt: 1e-3,
            steps_per_output: 10,
            dealias: true,
            forcing: "none".into(),
            forcing_amplitude: 0.1,
            forcing_wavenumber: 4.0,
            outputs: 10,
            members: 8,
            lambda: 0.03,
            delta: 0.05,
            delta_decay: 1.0,
            max_steps: 16,
            r_max: 3,
            history_budget: 4000,
            policy: "scripted:golden".into(),
            embedder: "hashing".into(),
            knowledge_dir: None,
            embed_dim: 256,
            projector: None,
            projector_seed: 0,
            inject_fault: "none".into(),
            fault_amplitude: 1.0,
            pressure_unit: "hPa".into(),
            png: true,
            out: PathBuf::from("flowlens-run"),
            train_steps: 200,
            learning_rate: 1e-2,
            samples_per_class: 4,
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `path` (if any) and its includes.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut table = Table::new();
        if let Some(p) = path {
            let mut seen = BTreeSet::new();
            merge_file(p, &mut table, &mut seen)?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {e}", path.map_or("<none>".into(), |p| p.display().to_string()))))?;
        Ok(cfg)
    }

    /// `sha256` of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge_file(path: &Path, into: &mut Table, seen: &mut BTreeSet<PathBuf>) -> Result<(), CliError> {
    let canonical = path
        .canonicalize()
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    if !seen.insert(canonical.clone()) {
        return Err(CliError::Config(format!("include cycle through {}", path.display())));
    }
    let text = std::fs::read_to_string(&canonical)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {e}", path.display())))?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(Value::String(s)) => vec![s],
        Some(Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(CliError::Config(format!("{}: include entries must be strings, got {other}", path.display()))),
            })
            .collect::<Result<_, _>>()?,
        Some(other) => {
            return Err(CliError::Config(format!("{}: include must be a string or list, got {other}", path.display())))
        }
    };
    let base = canonical.parent().unwrap_or(Path::new("."));
    for inc in includes {
        merge_file(&base.join(inc), into, seen)?;
    }
    for (k, v) in table {
        if v.is_table() {
            return Err(CliError::Config(format!("{}: nested table `{k}` not allowed (flat keys only)", path.display())));
        }
        into.insert(k, v);
    }
    seen.remove(&canonical);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn includes_apply_before_the_including_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.toml"), "grid = 32\nseed = 1\n").unwrap();
        std::fs::write(dir.path().join("run.toml"), "include = \"base.toml\"\nseed = 7\n").unwrap();
        let cfg = RunConfig::load(Some(&dir.path().join("run.toml"))).unwrap();
        assert_eq!(cfg.grid, 32);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.members, RunConfig::default().members);
    }

    #[test]
    fn unknown_keys_cycles_and_tables_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.toml");
        std::fs::write(&p, "gird = 32\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&p)), Err(CliError::Config(_))));
        std::fs::write(&p, "include = \"a.toml\"\n").unwrap();
        let err = RunConfig::load(Some(&p)).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
        std::fs::write(&p, "[sim]\ngrid = 3\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&p)), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::load(Some(&dir.path().join("missing.toml"))), Err(CliError::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
