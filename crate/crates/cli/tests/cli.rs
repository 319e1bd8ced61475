use std::path::Path;
use std::process::{Command, Output};

fn mixce(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixce"))
        .args(args)
        .current_dir(dir)
        .env_remove("MIXCE_SEED")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

/// World, data and a config for a small forward-KL experiment.
fn setup(dir: &Path, kind: &str) {
    ok(&mixce(
        &["world", "gen", "--vocab", "6", "--init", "random", "--zero-frac", "0.5", "--seed", "3", "-o", "w.json"],
        dir,
    ));
    ok(&mixce(
        &["data", "sample", "--world", "w.json", "--train", "200", "--valid", "50", "--max-len", "30", "--seed", "1", "-o", "data"],
        dir,
    ));
    let config = format!(
        r#"{{
  "format": "mixce-config/1",
  "name": "small",
  "train_data": "data/train.txt",
  "valid_data": "data/valid.txt",
  "world": "w.json",
  "training": {{
    "objective": {{"kind": "{kind}", "eta": 0.5}},
    "max_epochs": 2,
    "batch_size": 32,
    "hidden_dim": 8,
    "max_len": 30
  }}
}}
"#
    );
    std::fs::write(dir.join("exp.json"), config).unwrap();
}

#[test]
fn world_gen_is_deterministic_and_tight() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["world", "gen", "--vocab", "20", "--init", "random", "--zero-frac", "0.5", "--seed", "1", "-o"];
    ok(&mixce(&[&args[..], &["a.json"]].concat(), dir.path()));
    ok(&mixce(&[&args[..], &["b.json"]].concat(), dir.path()));
    let a = read(&dir.path().join("a.json"));
    assert_eq!(a, read(&dir.path().join("b.json")));
    let w = mixce::world::BigramWorld::from_json(&a).unwrap();
    assert_eq!(w.vocab_size(), 20);
    assert!(w.check_tight());
}

#[test]
fn counts_init_requires_counts_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = mixce(&["world", "gen", "--init", "counts", "-o", "w.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--counts"));
}

#[test]
fn counts_init_from_matrix_and_dataset() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), "[[0, 3, 1], [2, 0, 2], [0, 0, 0]]").unwrap();
    ok(&mixce(&["world", "gen", "--init", "counts", "--counts", "c.json", "-o", "w.json"], dir.path()));
    let w = mixce::world::BigramWorld::load(&dir.path().join("w.json")).unwrap();
    assert_eq!(w.row(0), &[0.0, 0.75, 0.25]);

    ok(&mixce(
        &["data", "sample", "--world", "w.json", "--train", "100", "--valid", "1", "-o", "d"],
        dir.path(),
    ));
    ok(&mixce(
        &["world", "gen", "--init", "counts", "--counts", "d/train.txt", "-o", "w2.json"],
        dir.path(),
    ));
    let w2 = mixce::world::BigramWorld::load(&dir.path().join("w2.json")).unwrap();
    assert_eq!(w2.vocab_size(), 3);
    assert!(w2.check_tight());
}

#[test]
fn data_sample_counts_and_empty_train() {
    let dir = tempfile::tempdir().unwrap();
    ok(&mixce(&["world", "gen", "--vocab", "8", "-o", "w.json"], dir.path()));
    ok(&mixce(
        &["data", "sample", "--world", "w.json", "--train", "37", "--valid", "5", "-o", "d"],
        dir.path(),
    ));
    assert_eq!(read(&dir.path().join("d/train.txt")).lines().count(), 37);
    assert_eq!(read(&dir.path().join("d/valid.txt")).lines().count(), 5);
    let meta: serde_json::Value = serde_json::from_str(&read(&dir.path().join("d/train.txt.meta.json"))).unwrap();
    assert_eq!(meta["count"], 37);
    assert_eq!(meta["eos_id"], 7);
    assert_eq!(meta["max_len"], 500);

    let out = mixce(
        &["data", "sample", "--world", "w.json", "--train", "0", "--valid", "2", "-o", "e"],
        dir.path(),
    );
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
    assert_eq!(read(&dir.path().join("e/train.txt")), "");
    assert!(dir.path().join("e/train.txt.meta.json").is_file());
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_mixce"));
        c.args(["world", "gen", "--vocab", "6", "-o", name]).current_dir(dir.path());
        match env {
            Some(s) => c.env("MIXCE_SEED", s),
            None => c.env_remove("MIXCE_SEED"),
        };
        ok(&c.output().unwrap());
        read(&dir.path().join(name))
    };
    let env7 = gen("a.json", Some("7"));
    ok(&mixce(&["world", "gen", "--vocab", "6", "--seed", "7", "-o", "b.json"], dir.path()));
    assert_eq!(env7, read(&dir.path().join("b.json")));
    assert_ne!(env7, gen("c.json", None));
}

#[test]
fn train_writes_deterministic_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "mixce_approx");
    let out = mixce(&["train", "--config", "exp.json"], dir.path());
    ok(&out);
    assert_eq!(String::from_utf8_lossy(&out.stderr).matches("epoch").count(), 3);
    let cell = dir.path().join("runs/small/cell-0.5-0");
    let first: Vec<String> = ["checkpoint.json", "trace.json", "metrics.json"]
        .iter()
        .map(|f| read(&cell.join(f)))
        .collect();
    let ckpt: serde_json::Value = serde_json::from_str(&first[0]).unwrap();
    assert_eq!(ckpt["format"], "mixce-ckpt/1");

    std::fs::remove_dir_all(dir.path().join("runs")).unwrap();
    ok(&mixce(&["train", "--config", "exp.json"], dir.path()));
    for (f, before) in ["checkpoint.json", "trace.json", "metrics.json"].iter().zip(&first) {
        assert_eq!(&read(&cell.join(f)), before, "{f} differs");
    }

    let ev = mixce(
        &["eval", "--world", "w.json", "--checkpoint", "runs/small/cell-0.5-0/checkpoint.json"],
        dir.path(),
    );
    ok(&ev);
    let report: serde_json::Value = serde_json::from_slice(&ev.stdout).unwrap();
    let trained: serde_json::Value = serde_json::from_str(&first[2]).unwrap();
    assert_eq!(report["avg_js"], trained["avg_js"]);
}

#[test]
fn oracle_objective_without_world_fails() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "reverse_kl");
    let text = read(&dir.path().join("exp.json")).replace("\"world\": \"w.json\",\n", "");
    std::fs::write(dir.path().join("exp.json"), text).unwrap();
    let out = mixce(&["train", "--config", "exp.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("needs the gold world"));
}

#[test]
fn config_typos_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "forward_kl");
    let text = read(&dir.path().join("exp.json")).replace("\"batch_size\"", "\"batchsize\"");
    std::fs::write(dir.path().join("exp.json"), text).unwrap();
    let out = mixce(&["train", "--config", "exp.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batchsize"));
}

#[test]
fn eval_of_the_gold_world_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "forward_kl");
    let out = mixce(
        &["eval", "--world", "w.json", "--checkpoint", "w.json", "--valid", "data/valid.txt"],
        dir.path(),
    );
    ok(&out);
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["avg_js"], 0.0);
    assert_eq!(r["avg_0s"], 0.0);
    assert!(r["perplexity"].as_f64().unwrap() > 1.0);
}

#[test]
fn report_on_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("runs")).unwrap();
    let out = mixce(&["report", "--runs", "runs"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no runs found"));
}

#[test]
fn sweep_resume_and_report() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "mixce_approx");
    let args = ["sweep", "--config", "exp.json", "--etas", "0.9,0.1", "--seeds", "2", "--jobs", "2"];
    let out = mixce(&args, dir.path());
    ok(&out);
    let root = dir.path().join("runs/small");
    for cell in ["cell-0.9-0", "cell-0.9-1", "cell-0.1-0", "cell-0.1-1"] {
        assert!(root.join(cell).join("metrics.json").is_file(), "{cell}");
    }
    let summary = read(&root.join("sweep.json"));
    let s: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(s["cells"].as_array().unwrap().len(), 4);
    assert!([0.9, 0.1].contains(&s["best_eta"].as_f64().unwrap()));

    let ckpt = read(&root.join("cell-0.9-1/checkpoint.json"));
    let again = mixce(&args, dir.path());
    ok(&again);
    assert!(String::from_utf8_lossy(&again.stderr).contains("reusing"));
    assert_eq!(read(&root.join("sweep.json")), summary);
    assert_eq!(read(&root.join("cell-0.9-1/checkpoint.json")), ckpt);

    let forced = mixce(&[&args[..], &["--force"]].concat(), dir.path());
    ok(&forced);
    assert!(!String::from_utf8_lossy(&forced.stderr).contains("reusing"));
    assert_eq!(read(&root.join("cell-0.9-1/checkpoint.json")), ckpt);

    let rep = mixce(&["report", "--runs", "runs"], dir.path());
    ok(&rep);
    let md = String::from_utf8_lossy(&rep.stdout);
    assert!(md.contains("| MixCE | small |"), "{md}");
    assert!(dir.path().join("runs/report.md").is_file());
    let json: serde_json::Value = serde_json::from_str(&read(&dir.path().join("runs/report.json"))).unwrap();
    assert_eq!(json["experiments"][0]["seeds"], 2);
}

#[test]
fn sweep_reports_failed_cells() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "generalized_js");
    let out = mixce(&["sweep", "--config", "exp.json", "--etas", "1,0.5"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAILED"), "{stdout}");
    assert!(stdout.contains("best eta 0.5"), "{stdout}");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mixce(&["train"], dir.path()).status.code(), Some(2));
    assert_eq!(mixce(&["bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(
        mixce(&["world", "gen", "--init", "sideways", "-o", "x"], dir.path()).status.code(),
        Some(2)
    );
}
