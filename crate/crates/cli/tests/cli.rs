use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ragscope(args: &[&str], env_out: Option<&Path>, cwd: &Path) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ragscope"));
    c.args(args).current_dir(cwd).env("RUST_LOG", "warn");
    match env_out {
        Some(p) => c.env("RAGSCOPE_OUT", p),
        None => c.env_remove("RAGSCOPE_OUT"),
    };
    c.output().unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--entities",
    "12",
    "--relations",
    "2",
    "--objects",
    "5",
    "--layers",
    "4",
    "--heads",
    "2",
    "--d-model",
    "16",
    "--d-ff",
    "32",
    "--steps",
    "20",
    "--batch",
    "4",
];

/// A tiny trained model directory.
fn trained(dir: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["train", "--out", s(&out)];
    args.extend_from_slice(TINY);
    ok(&ragscope(&args, None, dir));
    out
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = ragscope(&["no-such-command"], None, dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = ragscope(&["flow"], None, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--weights"));
    let o = ragscope(&["kape", "--fraction", "abc"], None, dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = ragscope(&["--help"], None, dir.path());
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.bin");
    let o = ragscope(
        &["flow", "--weights", s(&missing), "--data", s(&missing)],
        None,
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.bin"));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[kape]\nfractoin = 0.1\n").unwrap();
    let o = ragscope(&["--config", s(&cfg), "gen-world"], None, dir.path());
    assert_eq!(o.status.code(), Some(1));
    std::fs::write(&cfg, "[nope]\nx = 1\n").unwrap();
    let o = ragscope(&["--config", s(&cfg), "gen-world"], None, dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    ok(&ragscope(
        &["gen-world", "--entities", "10"],
        Some(&root),
        dir.path(),
    ));
    assert!(root.join("gen-world/world.json").exists());
    ok(&ragscope(
        &["gen-world", "--entities", "10"],
        None,
        dir.path(),
    ));
    assert!(dir
        .path()
        .join("ragscope-out/gen-world/world.json")
        .exists());
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "seed = 4\n[gen-world]\nentities = 15\nrelations = 2\n",
    )
    .unwrap();
    let read = |name: &str| -> serde_json::Value {
        let p = dir.path().join(name).join("world_summary.json");
        serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
    };
    let a = dir.path().join("a");
    ok(&ragscope(
        &["--config", s(&cfg), "gen-world", "--out", s(&a)],
        None,
        dir.path(),
    ));
    let v = read("a");
    assert_eq!(v["config"]["seed"], 4);
    assert_eq!(v["config"]["params"]["entities"], 15);
    assert_eq!(v["config"]["params"]["relations"], 2);

    let b = dir.path().join("b");
    ok(&ragscope(
        &[
            "--config",
            s(&cfg),
            "--seed",
            "9",
            "gen-world",
            "--entities",
            "11",
            "--out",
            s(&b),
        ],
        None,
        dir.path(),
    ));
    let v = read("b");
    assert_eq!(v["config"]["seed"], 9);
    assert_eq!(v["config"]["params"]["entities"], 11);
    assert_eq!(v["config"]["params"]["relations"], 2);
    assert_ne!(read("a")["config_hash"], v["config_hash"]);
}

#[test]
fn pipeline_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path(), "model");
    let again = trained(dir.path(), "model2");
    assert_eq!(
        std::fs::read(model.join("loss.csv")).unwrap(),
        std::fs::read(again.join("loss.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(model.join("weights.bin")).unwrap(),
        std::fs::read(again.join("weights.bin")).unwrap()
    );

    let weights = model.join("weights.bin");
    let data = model.join("holdout.jsonl");
    let run = |sub: &str, out: &str, extra: &[&str]| {
        let out = dir.path().join(out);
        let mut args = vec![sub, "--weights", s(&weights), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&ragscope(&args, None, dir.path()));
        out
    };
    for (sub, file, extra) in [
        ("flow", "flow_profile.csv", vec!["--data", s(&data)]),
        ("eval", "eval.csv", vec!["--data", s(&data)]),
        ("logitlens", "logit_lens.csv", vec!["--data", s(&data)]),
    ] {
        let a = run(sub, &format!("{sub}1"), &extra);
        let b = run(sub, &format!("{sub}2"), &extra);
        let bytes = std::fs::read(a.join(file)).unwrap();
        assert_eq!(bytes, std::fs::read(b.join(file)).unwrap(), "{sub}");
        let header = String::from_utf8(bytes).unwrap();
        assert!(header
            .lines()
            .next()
            .unwrap()
            .ends_with("schema_version,config_hash"));
    }

    let flow = dir.path().join("flow1");
    let st = dir.path().join("stages");
    ok(&ragscope(
        &[
            "stages",
            "--profile",
            s(&flow.join("flow_profile.json")),
            "--method",
            "changepoint",
            "--out",
            s(&st),
        ],
        None,
        dir.path(),
    ));
    let rows = std::fs::read_to_string(st.join("stages.csv")).unwrap();
    assert_eq!(rows.lines().count(), 5);

    let k = run(
        "kape",
        "kape",
        &[
            "--ik-data",
            s(&model.join("trained.jsonl")),
            "--ek-data",
            s(&data),
            "--fraction",
            "0.05",
        ],
    );
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(k.join("kape_summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["config"]["params"]["fraction"], 0.05);
    let rec = &summary["records"][0];
    assert_eq!(rec["n_neurons"], 4 * 32);
    assert_eq!(rec["candidates"], 7);
    let table = std::fs::read_to_string(k.join("kape_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4 * 32);

    let g = run(
        "kape",
        "kape_generated",
        &[
            "--ik-data",
            s(&model.join("trained.jsonl")),
            "--ek-data",
            s(&data),
            "--answers",
            "generated",
        ],
    );
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(g.join("kape_summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["config"]["params"]["answers"], "generated");
    assert_ne!(
        summary["config_hash"],
        serde_json::from_str::<serde_json::Value>(
            &std::fs::read_to_string(k.join("kape_summary.json")).unwrap()
        )
        .unwrap()["config_hash"]
    );
}
