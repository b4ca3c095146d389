use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn flowlens(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowlens"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn manifest_lists(dir: &Path, file: &str) -> bool {
    json(&dir.join("manifest.json"))["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .any(|v| v == file)
}

const SMALL: &[&str] = &["--grid", "16", "--outputs", "3", "--members", "3"];

#[test]
fn no_arguments_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_flowlens")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_flowlens")).arg("simulate").arg("--bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_flowlens")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn config_problems_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "grdi = 16\n").unwrap();
    let out = flowlens(&["simulate", "--config", bad.to_str().unwrap()], &dir.path().join("run"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grdi"));

    let cyc = dir.path().join("cycle.toml");
    std::fs::write(&cyc, "include = \"cycle.toml\"\n").unwrap();
    let out = flowlens(&["simulate", "--config", cyc.to_str().unwrap()], &dir.path().join("run"));
    assert_eq!(out.status.code(), Some(2));

    let out = flowlens(&["simulate", "--grid", "7"], &dir.path().join("run"));
    assert_eq!(out.status.code(), Some(2));
    let out = flowlens(&["agent-run", "--policy", "oracle"], &dir.path().join("run"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("base.toml"), "grid = 16\noutputs = 2\nseed = 3\n").unwrap();
    std::fs::write(dir.path().join("run.toml"), "include = \"base.toml\"\nseed = 5\n").unwrap();
    let cfg = dir.path().join("run.toml");
    let run = dir.path().join("run");
    let out = flowlens(&["simulate", "--config", cfg.to_str().unwrap(), "--outputs", "1"], &run);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = json(&run.join("manifest.json"));
    assert_eq!(m["config"]["grid"], 16);
    assert_eq!(m["config"]["seed"], 5);
    assert_eq!(m["config"]["outputs"], 1);
    assert_eq!(m["exit_code"], 0);
    assert!(m["config_hash"].as_str().unwrap().starts_with("sha256:"));
}

#[test]
fn simulate_writes_fields_plots_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowlens(&["simulate", "--grid", "16", "--outputs", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["fields/step_0002_vorticity.bin", "fields/step_0002_vorticity.json", "plots/vorticity_final.png", "verdict.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
        assert!(manifest_lists(dir.path(), f), "{f} missing from manifest");
    }
    assert_eq!(json(&dir.path().join("verdict.json"))["passed"], true);
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["status"], "ok");
}

#[test]
fn evaluate_scores_a_rollout_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert!(flowlens(&["simulate", "--grid", "16", "--outputs", "2", "--no-png"], &sim).status.success());
    let fields = sim.join("fields");
    let eval = dir.path().join("eval");
    let out = flowlens(
        &["evaluate", "--pred", fields.to_str().unwrap(), "--reference", fields.to_str().unwrap()],
        &eval,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = json(&eval.join("metrics.json"));
    assert_eq!(m["rmse"], 0.0);
    assert_eq!(m["steps"].as_array().unwrap().len(), 3);
    assert!(std::fs::read_to_string(eval.join("metrics.csv")).unwrap().starts_with("step,rmse,ssim,psnr"));
}

#[test]
fn ensemble_and_probe_write_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let ens = dir.path().join("ens");
    let mut args = vec!["ensemble"];
    args.extend(SMALL);
    assert!(flowlens(&args, &ens).status.success());
    let s = json(&ens.join("summary.json"));
    assert_eq!(s["seeds"].as_array().unwrap().len(), 3);
    assert!(s["pooled_spread_vorticity"].as_f64().unwrap() > 0.0);
    assert!(ens.join("spread/step_0003_vorticity.bin").exists());

    let probe = dir.path().join("probe");
    let mut args = vec!["probe", "--scale", "1.5", "--region", "4,4,6,6", "--label", "core"];
    args.extend(SMALL);
    let out = flowlens(&args, &probe);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let p = json(&probe.join("probe.json"));
    let s = p["sensitivity"].as_f64().unwrap();
    assert!(s > 0.0 && s < 1.0, "{s}");
    assert_eq!(p["intervention"]["label"], "core");

    let out = flowlens(&["probe", "--region", "1,2"], &probe);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn retrieve_ranks_the_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowlens(&["retrieve", "wave height threshold suspend flight routes", "--partition", "prot", "--k", "2"], dir.path());
    assert!(out.status.success());
    let r = json(&dir.path().join("retrieval.json"));
    assert_eq!(r["hits"][0]["id"], "prot-wave-height");
    assert_eq!(r["hits"][0]["rule"]["directive"], "suspend flight routes");
    assert_eq!(r["hits"].as_array().unwrap().len(), 2);
}

#[test]
fn agent_run_reproduces_the_reference_episode() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowlens(&["agent-run"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden");
    for f in ["trace.json", "report.md", "report.json"] {
        let a = std::fs::read_to_string(dir.path().join(f)).unwrap();
        let b = std::fs::read_to_string(golden.join(f)).unwrap();
        assert!(a == b, "{f} differs from the library episode");
    }
    assert!(manifest_lists(dir.path(), "plots/mean_vorticity_final.png"));

    // Re-rendering the sidecar gives the same markdown.
    let again = dir.path().join("again");
    let side = dir.path().join("report.json");
    assert!(flowlens(&["report", "--from", side.to_str().unwrap()], &again).status.success());
    assert_eq!(
        std::fs::read_to_string(again.join("report.md")).unwrap(),
        std::fs::read_to_string(dir.path().join("report.md")).unwrap()
    );
}

#[test]
fn injected_faults_roll_back_or_fail() {
    let dir = tempfile::tempdir().unwrap();
    let once = dir.path().join("once");
    let out = flowlens(&["agent-run", "--inject-fault", "first", "--no-png"], &once);
    assert_eq!(out.status.code(), Some(0));
    let t = json(&once.join("trace.json"));
    assert_eq!(t["status"], "completed");
    assert_eq!(t["rollbacks"].as_array().unwrap().len(), 1);

    let always = dir.path().join("always");
    let out = flowlens(&["agent-run", "--inject-fault", "always", "--r-max", "1", "--no-png"], &always);
    assert_eq!(out.status.code(), Some(4));
    let t = json(&always.join("trace.json"));
    assert_eq!(t["status"], "failed");
    assert_eq!(t["rollbacks"].as_array().unwrap().len(), 1);
    let m = json(&always.join("manifest.json"));
    assert_eq!(m["exit_code"], 4);
    assert!(std::fs::read_to_string(always.join("report.md")).unwrap().contains("episode failed"));
}

#[test]
fn trained_projector_checkpoint_feeds_agent_run() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    let out = flowlens(&["train-projector", "--seed", "7"], &train);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let losses = std::fs::read_to_string(train.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 201);
    let ckpt = train.join("projector.bin");
    assert!(manifest_lists(&train, "projector.json"));

    let run = dir.path().join("run");
    let out = flowlens(&["agent-run", "--projector", ckpt.to_str().unwrap(), "--no-png"], &run);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = json(&run.join("manifest.json"));
    assert!(m["inputs"].as_array().unwrap().iter().any(|v| v.as_str().unwrap().ends_with("projector.bin")));
}

#[test]
fn scripted_policy_file_drives_the_episode() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("script.json");
    let steps = [
        "look first\n```action\n{\"action\": \"retrieve\", \"query\": \"vortex merger\", \"partition\": \"hist\", \"k\": 1}\n```",
        "done\n```action\n{\"action\": \"finalize\", \"summary\": \"Two cores, 3 hours apart.\", \"insights\": \"\"}\n```",
    ];
    std::fs::write(&script, serde_json::to_string(&steps).unwrap()).unwrap();
    let policy = format!("scripted:{}", script.display());
    let run = dir.path().join("run");
    let out = flowlens(&["agent-run", "--policy", &policy, "--no-png"], &run);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = json(&run.join("trace.json"));
    assert_eq!(t["steps"].as_array().unwrap().len(), 2);
    let md = std::fs::read_to_string(run.join("report.md")).unwrap();
    assert!(md.contains("Two cores, [value] hours apart."), "{md}");
}
