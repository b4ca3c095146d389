//! Golden files for the scripted reference episode. Regenerate with
//! `FLOWLENS_UPDATE_GOLDEN=1 cargo test -p flowlens-core --test golden_episode`.

use std::fs;
use std::path::PathBuf;

use flowlens::agent::{run_episode, EpisodeConfig, EpisodeInputs, EpisodeStatus, ScriptedPolicy, Toolbox};

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn check(name: &str, actual: &str) {
    let path = golden_dir().join(name);
    if std::env::var_os("FLOWLENS_UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(golden_dir()).unwrap();
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    if expected != actual {
        let line = expected
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b)
            .map_or(expected.lines().count().min(actual.lines().count()), |i| i);
        panic!(
            "{name} differs from golden at line {}:\n  golden: {:?}\n  actual: {:?}",
            line + 1,
            expected.lines().nth(line),
            actual.lines().nth(line)
        );
    }
}

#[test]
fn golden_episode_matches_files() {
    let tools = Toolbox::builtin(0).unwrap();
    let mut policy = ScriptedPolicy::golden();
    let out = run_episode(&EpisodeInputs::golden(), &EpisodeConfig::default(), &tools, &mut policy).unwrap();
    assert_eq!(out.status(), EpisodeStatus::Completed);
    check("trace.json", &out.trace.to_json());
    check("report.md", &out.rendered.markdown);
    check("report.json", &out.rendered.sidecar);
}
