use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn varsig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_varsig"))
        .args(args)
        .current_dir(root())
        .env("VARSIG_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = varsig(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn failure(args: &[&str]) -> (i32, String) {
    let out = varsig(args);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    (out.status.code().unwrap(), err)
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_twice_gives_identical_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--system", "hologram", "--n", "4", "--seed", "7", "--out", s(d)]);
    }
    let fa = files(&a);
    assert_eq!(fa, files(&b));
    assert!(fa.iter().any(|(p, _)| p == Path::new("run_config.json")));
    let echo: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(echo["config"]["seed"], 7);
    assert_eq!(echo["config"]["system"], "hologram");
    assert_eq!(echo["config_hash"].as_str().unwrap().len(), 16);
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, r#"{"system": "video_cs", "seed": 3, "video_cs": {"n": 8}}"#).unwrap();
    let out = tmp.path().join("d");
    ok(&["synth", "--config", s(&cfg), "--seed", "4", "--n", "2", "--out", s(&out)]);
    let echo: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(echo["config"]["seed"], 4);
    assert_eq!(echo["config"]["video_cs"]["n"], 8);
    assert_eq!(echo["config"]["video_cs"]["frames"], 4);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["system"], "video_cs");
}

#[test]
fn train_retrieve_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"video_cs": {"n": 8}, "model": {"latent_dim": 4, "recurrences": 2, "enc_channels": [4, 4, 4],
            "dec_channels": [4, 4], "z_channels": 2, "lstm_hidden": 3, "batch_size": 2}}"#,
    )
    .unwrap();
    let c = s(&cfg);
    let (train, test) = (tmp.path().join("train"), tmp.path().join("test"));
    ok(&["synth", "--config", c, "--system", "video_cs", "--n", "4", "--seed", "1", "--out", s(&train)]);
    ok(&["synth", "--config", c, "--system", "video_cs", "--n", "2", "--seed", "2", "--out", s(&test)]);

    let (var, det) = (tmp.path().join("var"), tmp.path().join("det"));
    let log = ok(&[
        "train", "--config", c, "--method", "variational", "--dataset", s(&train), "--epochs", "2", "--out", s(&var),
        "--plots",
    ]);
    assert!(log.contains("epoch") || log.lines().count() >= 2);
    assert!(var.join("plots/loss_curve.png").exists());
    ok(&["train", "--config", c, "--method", "deterministic", "--dataset", s(&train), "--epochs", "1", "--out", s(&det)]);
    let curve = std::fs::read_to_string(var.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    // Resuming to a larger budget only runs the missing epoch.
    let more = tmp.path().join("more");
    ok(&["train", "--config", c, "--method", "variational", "--dataset", s(&train), "--epochs", "1", "--out", s(&more)]);
    ok(&[
        "train", "--config", c, "--method", "variational", "--dataset", s(&train), "--epochs", "2", "--out", s(&more),
        "--resume",
    ]);
    assert_eq!(std::fs::read_to_string(more.join("loss_curve.csv")).unwrap(), curve);

    let g = test.join("records/000000_g.tns");
    let r = tmp.path().join("r");
    ok(&["retrieve", "--artifact", s(&var), "--measurement", s(&g), "--instances", "10", "--out", s(&r)]);
    let tns = files(&r).into_iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "tns")).count();
    assert_eq!(tns, 10);
    let fid = std::fs::read_to_string(r.join("fidelity.csv")).unwrap();
    assert_eq!(fid.lines().count(), 11);
    assert!(fid.starts_with("instance,fidelity_db\n"));

    let rep = tmp.path().join("rep");
    let table = ok(&[
        "eval", "--methods", &format!("{},{},tv", s(&var), s(&det)), "--testset", s(&test), "--out", s(&rep),
    ]);
    assert_eq!(table.lines().count(), 4);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(rep.join("report.json")).unwrap()).unwrap();
    let methods: Vec<&str> = report["summary"].as_array().unwrap().iter().map(|m| m["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["variational", "deterministic", "tv"]);
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);
    assert!(report["config_hash"].is_string());

    let tv = tmp.path().join("tv");
    ok(&["baseline", "--config", c, "--measurement", s(&g), "--lambda", "10", "--out", s(&tv)]);
    assert!(tv.join("reconstruction.tns").exists());
    let hist = std::fs::read_to_string(tv.join("history.csv")).unwrap();
    assert!(hist.starts_with("iteration,objective,residual,tv\n"));
    let echo: serde_json::Value = serde_json::from_slice(&std::fs::read(tv.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(echo["config"]["tv"]["lambda_tv"], 10.0);

    // Training on a dataset of another system is refused.
    let (code, err) = failure(&[
        "train", "--system", "hologram", "--method", "variational", "--dataset", s(&train), "--out", s(&tmp.path().join("x")),
    ]);
    assert_eq!(code, 5);
    assert!(err.starts_with("error kind=system_mismatch code=5 message="));
}

#[test]
fn errors_are_single_lines_with_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let (usage, line) = failure(&["synth", "--bogus"]);
    assert_eq!(usage, 2);
    assert!(line.starts_with("error kind=usage code=2"));

    let (missing, line) = failure(&[
        "retrieve", "--artifact", "/no/such/dir", "--measurement", "/no/such.tns", "--out", s(tmp.path()),
    ]);
    assert_eq!(missing, 4);
    assert!(line.starts_with("error kind=missing_file"));

    let (config, _) = failure(&["synth", "--n", "2", "--out", s(&tmp.path().join("o"))]);
    assert_eq!(config, 3);

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"no_such_field": 1}"#).unwrap();
    let (code, _) = failure(&["synth", "--config", s(&bad), "--system", "video_cs", "--out", s(&tmp.path().join("p"))]);
    assert_eq!(code, 3);

    assert_eq!(
        [usage, missing, config].iter().collect::<std::collections::BTreeSet<_>>().len(),
        3
    );
}

#[test]
fn help_lists_defaults() {
    let help = ok(&["retrieve", "--help"]);
    assert!(help.contains("[default: 10]"));
    let help = ok(&["synth", "--help"]);
    assert!(help.contains("[default: 100]"));
    assert!(help.contains("--plots"));
}

#[test]
fn commands_leave_their_inputs_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"video_cs": {"n": 8}, "model": {"latent_dim": 4, "recurrences": 2, "enc_channels": [4, 4, 4],
            "dec_channels": [4, 4], "z_channels": 2, "lstm_hidden": 3, "batch_size": 2}}"#,
    )
    .unwrap();
    let c = s(&cfg);
    let data = tmp.path().join("data");
    ok(&["synth", "--config", c, "--system", "video_cs", "--n", "3", "--seed", "1", "--out", s(&data)]);
    let before = files(&data);

    let art = tmp.path().join("art");
    ok(&["train", "--config", c, "--method", "variational", "--dataset", s(&data), "--epochs", "1", "--out", s(&art)]);
    let art_before = files(&art);
    let g = data.join("records/000000_g.tns");
    ok(&["retrieve", "--artifact", s(&art), "--measurement", s(&g), "--instances", "2", "--out", s(&tmp.path().join("r"))]);
    ok(&["eval", "--methods", s(&art), "--testset", s(&data), "--out", s(&tmp.path().join("e"))]);
    ok(&["baseline", "--config", c, "--measurement", s(&g), "--out", s(&tmp.path().join("b"))]);

    assert_eq!(files(&data), before);
    assert_eq!(files(&art), art_before);
}
