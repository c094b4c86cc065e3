use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ebmdmo_cli::{run, EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};

fn ebmdmo(args: &[&str]) -> i32 {
    let mut v = vec!["ebmdmo"];
    v.extend_from_slice(args);
    run(v)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` by relative path.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Small budgets so every command finishes in seconds.
fn quick_config(dir: &Path) -> PathBuf {
    let p = dir.join("quick.json");
    let cfg = r#"{
        "vae": {"steps": 40, "batch": 8},
        "ebm": {"train": {"steps": 2, "batch": 2, "k_data": 2, "k_vae": 1}},
        "dmo": {"train": {"steps": 2, "batch": 2, "r_train": 1}},
        "prediction": {"n": 3, "rounds": 1}
    }"#;
    fs::write(&p, cfg).unwrap();
    p
}

#[test]
fn gen_data_is_deterministic_and_validates_counts() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(ebmdmo(&["gen-data", "--task", "push-button", "--train", "6", "--test", "3", "--seed", "7", "--out", s(d)]), EXIT_OK);
    }
    assert_eq!(tree(&a), tree(&b));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["n_train"], 6);
    assert_eq!(m["n_test"], 3);
    assert_eq!(ebmdmo(&["gen-data", "--task", "reach", "--train", "0", "--out", s(&t.path().join("c"))]), EXIT_USAGE);
    assert_eq!(ebmdmo(&["gen-data", "--task", "juggle", "--out", s(&t.path().join("d"))]), EXIT_USAGE);
}

#[test]
fn config_is_validated_and_echoed() {
    let t = tempfile::tempdir().unwrap();
    let bad = t.path().join("bad.json");
    fs::write(&bad, r#"{"ebm": {"train": {"stpes": 3}}}"#).unwrap();
    let out = t.path().join("x");
    assert_eq!(ebmdmo(&["gen-data", "--config", s(&bad), "--out", s(&out)]), EXIT_USAGE);
    let missing = t.path().join("nope.json");
    assert_eq!(ebmdmo(&["gen-data", "--config", s(&missing), "--out", s(&out)]), EXIT_INPUT);
    assert_eq!(ebmdmo(&["gen-data", "--train", "4", "--test", "2", "--out", s(&out)]), EXIT_OK);
    let echo: serde_json::Value = serde_json::from_slice(&fs::read(out.join("gen-data.config.json")).unwrap()).unwrap();
    assert_eq!(echo["tool"], "ebmdmo");
    assert_eq!(echo["config"]["dataset"]["train"], 4);
    assert!(echo["version"].is_string());
}

#[test]
fn full_command_chain() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path();
    let cfg = quick_config(root);
    let c = s(&cfg);
    let data = root.join("data");
    assert_eq!(ebmdmo(&["gen-data", "--task", "reach", "--train", "10", "--test", "3", "--seed", "2", "--out", s(&data)]), EXIT_OK);

    // Training: dependencies are checked and identical seeds give identical bytes.
    let ebm_dir = root.join("ebm");
    assert_eq!(ebmdmo(&["train-ebm", "--config", c, "--data", s(&data), "--out", s(&ebm_dir)]), EXIT_INPUT);
    assert_eq!(ebmdmo(&["train-vae", "--config", c, "--data", s(&root.join("missing")), "--out", s(&root.join("v0"))]), EXIT_INPUT);
    for v in ["v1", "v2"] {
        assert_eq!(ebmdmo(&["train-vae", "--config", c, "--data", s(&data), "--out", s(&root.join(v))]), EXIT_OK);
    }
    let vae = root.join("v1/vae.ckpt");
    assert_eq!(fs::read(&vae).unwrap(), fs::read(root.join("v2/vae.ckpt")).unwrap());
    assert!(fs::read_to_string(root.join("v1/vae_log.csv")).unwrap().starts_with("step,loss,recon,kl"));
    assert_eq!(ebmdmo(&["train-ebm", "--config", c, "--data", s(&data), "--vae", s(&vae), "--out", s(&ebm_dir)]), EXIT_OK);
    let dmo_dir = root.join("dmo");
    assert_eq!(ebmdmo(&["train-dmo", "--config", c, "--data", s(&data), "--out", s(&dmo_dir)]), EXIT_INPUT);
    assert_eq!(ebmdmo(&["train-dmo", "--config", c, "--data", s(&data), "--vae", s(&vae), "--out", s(&dmo_dir)]), EXIT_OK);
    let (ebm, dmo) = (ebm_dir.join("ebm.ckpt"), dmo_dir.join("dmo.ckpt"));

    // Prediction with rendering.
    let pred = root.join("pred");
    let base = ["--data", s(&data), "--ebm", s(&ebm), "--dmo", s(&dmo), "--vae", s(&vae)];
    let mut args = vec!["predict", "--config", c, "--episode", "1", "--n", "3", "--R", "1", "--render", "--out", s(&pred)];
    args.extend_from_slice(&base);
    assert_eq!(ebmdmo(&args), EXIT_OK);
    let r: serde_json::Value = serde_json::from_slice(&fs::read(pred.join("prediction_reach_ep1_s0.json")).unwrap()).unwrap();
    assert_eq!(r["best"].as_array().unwrap().len(), 16);
    assert_eq!(r["candidates"].as_array().unwrap().len(), 3);
    let png = fs::read(pred.join("prediction_reach_ep1_s0.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
    let mut too_many = vec!["predict", "--config", c, "--n", "11", "--out", s(&pred)];
    too_many.extend_from_slice(&base);
    assert_eq!(ebmdmo(&too_many), EXIT_USAGE);

    // Evaluation rows for two optimizers, a 2x2 sweep and the cost table.
    let (eval_dir, sweep_dir) = (root.join("eval"), root.join("sweep"));
    for opt in ["dmo", "langevin"] {
        let mut a = vec!["evaluate", "--config", c, "--optimizer", opt, "--out", s(&eval_dir)];
        a.extend_from_slice(&base);
        assert_eq!(ebmdmo(&a), EXIT_OK);
        let csv = fs::read_to_string(root.join(format!("eval/eval_reach_{opt}_s0.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }
    let mut sw = vec!["sweep", "--config", c, "--n", "1,2", "--R", "0,1", "--out", s(&sweep_dir)];
    sw.extend_from_slice(&base);
    assert_eq!(ebmdmo(&sw), EXIT_OK);
    let rep: serde_json::Value = serde_json::from_slice(&fs::read(root.join("sweep/sweep_reach_dmo_s0.json")).unwrap()).unwrap();
    assert_eq!(rep["rows"].as_array().unwrap().len(), 4);
    assert_eq!(rep["metadata"]["checkpoint_hashes"].as_object().unwrap().len(), 3);
    let cost = root.join("cost");
    assert_eq!(ebmdmo(&["cost", "--ebm", s(&ebm), "--dmo", s(&dmo), "--out", s(&cost)]), EXIT_OK);
    let rows: serde_json::Value = serde_json::from_slice(&fs::read(cost.join("cost_trajectory-aligned.json")).unwrap()).unwrap();
    let ck = ebmdmo_core::checkpoint::Checkpoint::load(&ebm).unwrap();
    let brute: usize = ck.tensors.values().map(|t| t.len()).sum();
    assert_eq!(rows[0]["parameters"].as_u64().unwrap() as usize, brute);
}

#[test]
fn divergent_training_exits_with_numeric_code() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    assert_eq!(ebmdmo(&["gen-data", "--train", "8", "--test", "2", "--out", s(&data)]), EXIT_OK);
    let cfg = t.path().join("hot.json");
    fs::write(&cfg, r#"{"vae": {"steps": 200, "lr": 1e30, "batch": 4}}"#).unwrap();
    assert_eq!(ebmdmo(&["train-vae", "--config", s(&cfg), "--data", s(&data), "--out", s(&t.path().join("v"))]), EXIT_NUMERIC);
}
