use std::path::{Path, PathBuf};
use std::process::Command;

use tc2_core::rng::LabRng;
use tc2_core::trainer::{Checkpoint, TrainState};

fn tc2(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_tc2")).args(args).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const BENCH: &str = r#"{
  "seed": 3,
  "data": {"source": "benchmark", "n_per_domain": 32},
  "tasks": {"k": 2},
  "model": {"hidden": 16, "dim": 6, "proj_dim": 4},
  "tc2": {"fv_hidden": 8, "fw_hidden": 8},
  "train": {"epochs": 3, "batch_size": 16, "grouping": "domain"},
  "eval": {"n": 200}
}"#;

fn idx_u8(dims: &[u32], data: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 0x08, dims.len() as u8];
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(data);
    b
}

#[test]
fn malformed_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cases = [
        ("broken.json", "{\"seed\": 1, \"data\": "),
        ("unknown.json", r#"{"seed": 1, "data": {"source": "scm"}, "bogus": 2}"#),
        ("noseed.json", r#"{"data": {"source": "scm"}}"#),
        (
            "badkey.json",
            r#"{"seed": 1, "data": {"source": "benchmark", "c": 0.8}}"#,
        ),
        (
            "badrate.json",
            r#"{"seed": 1, "data": {"source": "benchmark"}, "train": {"beta2": -1}}"#,
        ),
    ];
    for (name, text) in cases {
        let cfg = write(dir.path(), name, text);
        for verb in ["theorem1", "train", "probe"] {
            let (code, msg) = tc2(&[verb, "--config", s(&cfg), "--out", s(&out)]);
            assert_eq!(code, 2, "{name} {verb}: {msg}");
            assert!(!out.exists(), "{name} {verb} wrote outputs");
        }
    }
    let (code, _) = tc2(&["train", "--out", s(&out)]);
    assert_eq!(code, 2);
    let (code, _) = tc2(&[
        "train",
        "--config",
        s(&dir.path().join("missing.json")),
        "--tc2",
        "maybe",
    ]);
    assert_eq!(code, 2);
    assert!(!out.exists());
}

#[test]
fn theorem1_writes_report_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "t.json",
        r#"{"seed": 0, "data": {"source": "scm", "n": 4000, "null_n": 4000, "n_seeds": 2}}"#,
    );
    let out = dir.path().join("out");
    let (code, msg) = tc2(&["theorem1", "--config", s(&cfg), "--out", s(&out)]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("theorem1.json")).unwrap()).unwrap();
    assert_eq!(code == 0, report["passed"].as_bool().unwrap(), "{msg}");
    let csv = std::fs::read_to_string(out.join("theorem1.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "c_ij,weight_norm_j");
    assert_eq!(lines.len(), 6);
    let norms: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(norms.windows(2).all(|w| w[1] >= w[0]), "{norms:?}");
    assert!(report["checks"]["monotone"].as_bool().unwrap());
    let grid = report["grid"].as_array().unwrap();
    assert_eq!(grid.len(), 5);
    for key in [
        "config",
        "weights_on_F_u_j",
        "weight_norm_j",
        "bayes_agreement",
        "n",
        "seed",
    ] {
        assert!(grid[0]["per_seed"][0].get(key).is_some(), "missing {key}");
    }
}

#[test]
fn theorem1_failed_check_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "t.json",
        r#"{"seed": 0, "data": {"source": "scm", "grid": [0.5, 0.9], "n": 2000, "null_n": 2000, "n_seeds": 1, "conflict_threshold": 100.0}}"#,
    );
    let out = dir.path().join("out");
    let (code, _) = tc2(&["theorem1", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code, 1);
    assert!(out.join("theorem1.json").exists());
    let (code, _) = tc2(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code, 2);
}

#[test]
fn train_is_deterministic_and_switchable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "b.json", BENCH);
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--config", s(&cfg), "--out", s(&out)];
        args.extend_from_slice(extra);
        let (code, msg) = tc2(&args);
        assert_eq!(code, 0, "{msg}");
        out
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    let off = run("off", &["--tc2", "off"]);
    let csv = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(csv(&a, "metrics.csv"), csv(&b, "metrics.csv"));
    assert_eq!(csv(&a, "conflict.csv"), csv(&b, "conflict.csv"));
    assert_eq!(csv(&a, "checkpoint.json"), csv(&b, "checkpoint.json"));
    let header = |d: &Path| {
        String::from_utf8(csv(d, "metrics.csv"))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(header(&a), "epoch,batch,stage,loss_name,value");
    assert_eq!(header(&a), header(&off));
    let on_text = String::from_utf8(csv(&a, "metrics.csv")).unwrap();
    let off_text = String::from_utf8(csv(&off, "metrics.csv")).unwrap();
    assert!(on_text.contains(",stage1,tc2,"));
    assert!(!off_text.contains(",stage1,"));
    assert!(off_text.contains(",diagnostics,mean_cos,"));
    let conflict = String::from_utf8(csv(&a, "conflict.csv")).unwrap();
    assert_eq!(conflict.lines().count(), 1 + 3);
    let factors = String::from_utf8(csv(&a, "factors.csv")).unwrap();
    assert!(factors.starts_with("factor,v0,"));
    assert_eq!(factors.lines().count(), 1 + 6);
    assert!(String::from_utf8(csv(&a, "weights.csv"))
        .unwrap()
        .starts_with("sample,w0,"));

    let c = run("seeded", &["--seed", "4"]);
    assert_ne!(csv(&a, "metrics.csv"), csv(&c, "metrics.csv"));
}

#[test]
fn zero_epochs_checkpoint_is_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "b.json", BENCH);
    let out = dir.path().join("out");
    let (code, msg) = tc2(&["train", "--config", s(&cfg), "--out", s(&out), "--epochs", "0"]);
    assert_eq!(code, 0, "{msg}");
    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert_eq!(ck.epoch, 0);
    let init = TrainState::init(&ck.config).unwrap();
    assert_eq!(ck.encoder, init.encoder);
    assert_eq!(ck.fv, init.fv);
    assert_eq!(ck.fw, init.fw);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics, "epoch,batch,stage,loss_name,value\n");
}

#[test]
fn divergent_run_exits_1_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let text = BENCH.replace(r#""epochs": 3,"#, r#""epochs": 20, "beta2": 1e12,"#);
    let cfg = write(dir.path(), "b.json", &text);
    let out = dir.path().join("out");
    let (code, msg) = tc2(&["train", "--config", s(&cfg), "--out", s(&out), "--tc2", "off"]);
    assert_eq!(code, 1, "{msg}");
    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert!(ck.aborted.is_some());
}

#[test]
fn probe_reports_fractions_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "b.json", BENCH);
    let out = dir.path().join("out");
    assert_eq!(tc2(&["train", "--config", s(&cfg), "--out", s(&out)]).0, 0);
    let (code, msg) = tc2(&["probe", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code, 0, "{msg}");
    let first = std::fs::read(out.join("probe.json")).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
    for key in ["top1", "knn5"] {
        let x = v[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x), "{key} = {x}");
    }
    assert_eq!(v["n_train"], 100);
    assert_eq!(v["n_test"], 100);
    assert_eq!(tc2(&["probe", "--config", s(&cfg), "--out", s(&out)]).0, 0);
    assert_eq!(std::fs::read(out.join("probe.json")).unwrap(), first);

    // an encoder for 8 inputs cannot read 6-dimensional data
    let other = write(
        dir.path(),
        "c.json",
        &BENCH.replace(r#""n_per_domain": 32"#, r#""n_per_domain": 32, "d_in": 6"#),
    );
    let ck = out.join("checkpoint.json");
    let (code, msg) = tc2(&[
        "probe",
        "--config",
        s(&other),
        "--checkpoint",
        s(&ck),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(code, 2, "{msg}");
    let (code, _) = tc2(&["probe", "--config", s(&cfg), "--out", s(&dir.path().join("nothing"))]);
    assert_eq!(code, 2);
}

#[test]
fn untrained_encoder_on_shuffled_labels_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let n = 800;
    let mut rng = LabRng::new(5);
    let pixels: Vec<u8> = (0..n * 16).map(|_| rng.below(256) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
    std::fs::write(dir.path().join("img.idx"), idx_u8(&[n as u32, 4, 4], &pixels)).unwrap();
    std::fs::write(dir.path().join("lab.idx"), idx_u8(&[n as u32], &labels)).unwrap();
    let cfg = write(
        dir.path(),
        "i.json",
        r#"{"seed": 1, "data": {"source": "idx", "images": "img.idx", "labels": "lab.idx"},
            "tasks": {"k": 2}, "model": {"hidden": 16, "dim": 8, "proj_dim": 4},
            "train": {"epochs": 0, "batch_size": 16}}"#,
    );
    let out = dir.path().join("out");
    assert_eq!(tc2(&["train", "--config", s(&cfg), "--out", s(&out)]).0, 0);
    let (code, msg) = tc2(&["probe", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code, 0, "{msg}");
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("probe.json")).unwrap()).unwrap();
    // 400 test points: one binomial standard deviation is 0.025
    for key in ["top1", "knn5"] {
        let x = v[key].as_f64().unwrap();
        assert!((x - 0.5).abs() <= 0.1, "{key} = {x}");
    }
}

#[test]
fn idx_training_runs() {
    let dir = tempfile::tempdir().unwrap();
    let n = 64;
    let mut rng = LabRng::new(2);
    let pixels: Vec<u8> = (0..n * 9).map(|_| rng.below(256) as u8).collect();
    std::fs::write(dir.path().join("img.idx"), idx_u8(&[n as u32, 3, 3], &pixels)).unwrap();
    let cfg = write(
        dir.path(),
        "i.json",
        r#"{"seed": 1, "data": {"source": "idx", "images": "img.idx", "limit": 48},
            "tasks": {"k": 2, "mode": "gssl"}, "model": {"hidden": 8, "dim": 4, "proj_dim": 2},
            "tc2": {"fv_hidden": 4, "fw_hidden": 4}, "train": {"epochs": 2, "batch_size": 16}}"#,
    );
    let out = dir.path().join("out");
    let (code, msg) = tc2(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code, 0, "{msg}");
    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert_eq!(ck.config.model.d_in, 9);
    // labels are required for probing
    assert_eq!(tc2(&["probe", "--config", s(&cfg), "--out", s(&out)]).0, 2);
}

#[test]
fn plot_is_a_pure_function_of_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write(dir.path(), "empty.csv", "epoch,batch,stage,loss_name,value\n");
    let out = dir.path().join("p");
    assert_eq!(tc2(&["plot", "--metrics", s(&empty), "--out", s(&out)]).0, 0);
    let svg = std::fs::read_to_string(out.join("conflict_epoch.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<line"));
    assert!(!svg.contains("<polyline") && !svg.contains("<circle"));
    assert!(out.join("loss.svg").exists());

    let one = write(
        dir.path(),
        "one.csv",
        "epoch,batch,stage,loss_name,value\n0,0,diagnostics,mean_cos,-0.25\n0,0,stage2,query,1.5\n",
    );
    assert_eq!(tc2(&["plot", "--metrics", s(&one), "--out", s(&out)]).0, 0);
    let svg = std::fs::read_to_string(out.join("conflict_epoch.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 1);
    let first = (svg, std::fs::read(out.join("loss.svg")).unwrap());
    assert_eq!(tc2(&["plot", "--metrics", s(&one), "--out", s(&out)]).0, 0);
    assert_eq!(
        std::fs::read_to_string(out.join("conflict_epoch.svg")).unwrap(),
        first.0
    );
    assert_eq!(std::fs::read(out.join("loss.svg")).unwrap(), first.1);

    let wrong = write(dir.path(), "conflict.csv", "epoch,task_a,task_b,cos\n0,0,1,0.5\n");
    let (code, _) = tc2(&["plot", "--metrics", s(&wrong), "--out", s(&dir.path().join("q"))]);
    assert_eq!(code, 2);
    assert!(!dir.path().join("q").exists());
}

#[test]
fn plot_reads_a_training_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "b.json", BENCH);
    let out = dir.path().join("out");
    assert_eq!(tc2(&["train", "--config", s(&cfg), "--out", s(&out)]).0, 0);
    assert_eq!(tc2(&["plot", "--out", s(&out)]).0, 0);
    let svg = std::fs::read_to_string(out.join("conflict_epoch.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    let loss = std::fs::read_to_string(out.join("loss.svg")).unwrap();
    assert_eq!(loss.matches("<polyline").count(), 5);
}
