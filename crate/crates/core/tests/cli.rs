use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_demo-shaping"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small but complete config: two methods, two seeds, tiny budgets.
fn tiny_config(out: &Path) -> String {
    format!(
        r#"output_dir = "{}"
seeds = [0, 1]

[demos]
kind = "optimal"
episodes = 2
noise = 0.005

[flow]
layers = 2
hidden = 8
epochs = 3
batch_size = 64

[td3]
hidden = 16
batch_size = 32
demo_batch_size = 16
episodes_per_iter = 2
updates_per_iter = 10
total_episodes = 4
eval_every = 2
eval_episodes = 3

[bc]
hidden = 16
epochs = 5

[[methods]]
name = "shaped"
agent = "td3-shaped"
potential = "flow"

[[methods]]
name = "bc"
agent = "bc"
"#,
        out.display()
    )
}

fn strip_wall_clock(text: &str) -> Vec<serde_json::Value> {
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_clock_s");
            v
        })
        .collect()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = run(&[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    let out = run(&["frobnicate"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("Usage"));
    let out = run(&["aggregate", "--in", "x", "--out", "y", "--bogus"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn every_subcommand_has_help() {
    for args in [
        vec!["--help"],
        vec!["demos", "generate", "--help"],
        vec!["potential", "train", "--help"],
        vec!["agent", "train", "--help"],
        vec!["experiment", "run", "--help"],
        vec!["aggregate", "--help"],
    ] {
        let out = run(&args);
        assert_eq!(code(&out), 0, "{args:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{args:?}");
    }
}

#[test]
fn demos_potential_and_agent_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let demos = dir.path().join("demos.jsonl");
    let out = run(&["demos", "generate", "--episodes", "2", "--seed", "3", "--out", demos.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ds = demo_shaping::demos::DemoDataset::load(&demos).unwrap();
    assert_eq!(ds.meta.seed, 3);
    assert!(!ds.pairs.is_empty());

    let cfg = dir.path().join("small.toml");
    std::fs::write(
        &cfg,
        "[flow]\nlayers = 2\nhidden = 8\nepochs = 2\n\n[td3]\nhidden = 8\nbatch_size = 16\n\
         updates_per_iter = 5\nepisodes_per_iter = 1\ntotal_episodes = 2\neval_every = 1\neval_episodes = 2\n\n[bc]\nepochs = 3\n",
    )
    .unwrap();
    let flow = dir.path().join("flow.json");
    let out = run(&[
        "potential", "train", "--kind", "flow", "--demos", demos.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(), "--out", flow.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    demo_shaping::flow::FlowModel::load(&flow).unwrap();

    let actor = dir.path().join("actor.json");
    let curve = dir.path().join("curve.jsonl");
    let out = run(&[
        "agent", "train", "--agent", "td3-shaped", "--demos", demos.to_str().unwrap(),
        "--potential", flow.to_str().unwrap(), "--potential-kind", "flow",
        "--config", cfg.to_str().unwrap(), "--out", actor.to_str().unwrap(), "--curve", curve.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    demo_shaping::agents::ActorPolicy::load(&actor).unwrap();
    assert_eq!(std::fs::read_to_string(&curve).unwrap().lines().count(), 2);

    let out = run(&["agent", "train", "--agent", "bc", "--out", actor.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "bc without demos is a usage error");
}

#[test]
fn experiment_run_then_aggregate_gives_csv() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, tiny_config(&runs)).unwrap();
    let out = run(&["experiment", "run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for method in ["shaped", "bc"] {
        for seed in [0, 1] {
            assert!(runs.join(method).join(format!("seed-{seed}.jsonl")).is_file());
        }
    }
    assert!(runs.join("config.toml").is_file());
    assert!(runs.join("status.json").is_file());

    let csv = dir.path().join("curve.csv");
    let out = run(&["aggregate", "--in", runs.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let shaped = std::fs::read_to_string(dir.path().join("curve-shaped.csv")).unwrap();
    let mut lines = shaped.lines();
    assert_eq!(lines.next(), Some("eval_index,episodes,mean_success,std_success,mean_return,std_return"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 6);
        assert_eq!(r[0], i as f64);
        assert!((0.0..=1.0).contains(&r[2]) && r[3] >= 0.0 && r[5] >= 0.0);
    }
    let bc = std::fs::read_to_string(dir.path().join("curve-bc.csv")).unwrap();
    assert_eq!(bc.lines().count(), 2);
}

#[test]
fn runs_are_reproducible_and_replayable_from_the_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, tiny_config(&a)).unwrap();
    assert_eq!(code(&run(&["experiment", "run", "--config", cfg.to_str().unwrap(), "--seed", "1"])), 0);
    // replay from the snapshot written next to the results
    let snapshot = a.join("config.toml");
    let out = run(&["experiment", "run", "--config", snapshot.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for method in ["shaped", "bc"] {
        let ra = std::fs::read_to_string(a.join(method).join("seed-1.jsonl")).unwrap();
        let rb = std::fs::read_to_string(b.join(method).join("seed-1.jsonl")).unwrap();
        assert!(!ra.is_empty());
        assert_eq!(strip_wall_clock(&ra), strip_wall_clock(&rb), "{method}");
    }
}

#[test]
fn bc_only_config_never_needs_a_potential() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let cfg = dir.path().join("bc.toml");
    let text = format!(
        "output_dir = \"{}\"\nseeds = [4]\n\n[demos]\nepisodes = 2\n\n[bc]\nepochs = 3\n\n[[methods]]\nname = \"bc\"\nagent = \"bc\"\n",
        runs.display()
    );
    std::fs::write(&cfg, text).unwrap();
    let out = run(&["experiment", "run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let recs = std::fs::read_to_string(runs.join("bc").join("seed-4.jsonl")).unwrap();
    assert_eq!(recs.lines().count(), 1);
}

#[test]
fn invalid_config_exits_2_with_the_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seeds = []\n[[methods]]\nname = \"x\"\nagent = \"td3\"\n").unwrap();
    let out = run(&["experiment", "run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("seeds"), "{}", stderr(&out));

    std::fs::write(&cfg, "[td3]\ngama = 0.9\n[[methods]]\nname = \"x\"\nagent = \"td3\"\n").unwrap();
    let out = run(&["experiment", "run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("gama"), "{}", stderr(&out));

    std::fs::write(&cfg, "[[methods]]\nname = \"x\"\nagent = \"td3-bc\"\n").unwrap();
    let out = run(&["experiment", "run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("lambda"), "{}", stderr(&out));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["aggregate", "--in", dir.path().join("nothing").to_str().unwrap(), "--out", "x.csv"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = demo_shaping::harness::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(cfg.seeds.len(), 5, "{}", path.display());
            n += 1;
        }
    }
    assert_eq!(n, 3);
}
