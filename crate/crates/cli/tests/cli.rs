use std::path::Path;
use std::process::{Command, Output};

use ltfe::diffcore::{io, Tensor};
use ltfe::perturb::InjectionStrategy;
use ltfe::pipeline::TrainConfig;
use serde_json::Value;

fn ltfe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltfe")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Settings small enough for a training run in well under a second.
const SMALL: [&str; 12] = [
    "--set", "scene_size=12", "--set", "channels=3", "--set", "num_scenes=4",
    "--set", "eval_scenes=3", "--set", "epochs=1", "--set", "field_hidden=4",
];

#[test]
fn schedule_first_row() {
    let v = json(&ltfe(&["schedule"]));
    let rows = v["schedule"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[0]["t"], 1);
    assert_eq!(rows[0]["sigma"].as_f64().unwrap(), 1.2);
    assert_eq!(rows[0]["alpha"].as_f64().unwrap(), 0.2 * (-0.2f64).exp());
}

#[test]
fn exit_code_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("f.ltf");
    io::write_file(&good, &Tensor::from_fn(&[6, 6, 2], |i| (i as f64 * 0.37).sin())).unwrap();
    let nan = dir.path().join("nan.ltf");
    io::write_file(&nan, &Tensor::full(&[6, 6, 2], f64::NAN)).unwrap();
    let bad = dir.path().join("bad.ltf");
    std::fs::write(&bad, b"LTF1\x03\x06\x00").unwrap();
    let missing = dir.path().join("missing.ltf");
    let out = dir.path().join("out");

    let cases: Vec<(Vec<&str>, i32)> = vec![
        (vec!["schedule"], 0),
        (vec!["evolve", "--input", s(&good), "--out", s(&out)], 0),
        (vec!["kernels", "--input", s(&good), "--set", "channels=2"], 0),
        (vec![], 2),
        (vec!["nonsense"], 2),
        (vec!["schedule", "--bogus"], 2),
        (vec!["schedule", "--set", "bogus=1"], 2),
        (vec!["schedule", "--set", "lr"], 2),
        (vec!["schedule", "--strategy", "sideways"], 2),
        (vec!["schedule", "--infer-T", "9"], 2),
        (vec!["train", "--out", s(&out)], 2),
        (vec!["infer", "--seed", "1"], 2),
        (vec!["evolve", "--input", s(&good), "--out", s(&out), "--set", "schedule.T=0", "--infer-T", "0"], 2),
        (vec!["evolve", "--input", s(&bad), "--out", s(&out)], 2),
        (vec!["evolve", "--input", s(&missing), "--out", s(&out)], 2),
        (vec!["kernels", "--input", s(&good)], 2),
        (vec!["infer", "--seed", "1", "--input", s(&missing)], 2),
        (vec!["benchmark", "--seed", "1", "--knobs", "x"], 2),
        (vec!["evolve", "--input", s(&nan), "--out", s(&out)], 3),
    ];
    for (args, code) in cases {
        let o = ltfe(&args);
        assert_eq!(o.status.code(), Some(code), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn error_messages_name_their_cause() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.ltf");
    let o = ltfe(&["evolve", "--input", s(&missing), "--out", s(dir.path())]);
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));

    let bad = dir.path().join("bad.ltf");
    std::fs::write(&bad, b"LTF1\x02\x04\x00\x00\x00\x04\x00\x00\x00\x00").unwrap();
    let o = ltfe(&["evolve", "--input", s(&bad), "--out", s(dir.path())]);
    assert!(stderr(&o).contains("byte offset 14"), "{}", stderr(&o));
}

#[test]
fn config_echo_is_file_plus_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let file = TrainConfig { lr: 0.01, epochs: 3, channels: 4, ..Default::default() };
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, file.to_json().to_string()).unwrap();
    let v = json(&ltfe(&[
        "schedule", "--config", s(&path), "--set", "schedule.T=4", "--set", "lambda2=0.5",
        "--set", "frozen=[\"w0\"]", "--strategy", "one_shot", "--literal-eq1", "--include-positive", "--infer-T", "1",
    ]));
    let mut want = file.clone();
    want.schedule.steps = 4;
    want.lambda2 = 0.5;
    want.frozen = vec![ltfe::pipeline::ParamGroup::W0];
    want.strategy = InjectionStrategy::OneShot;
    want.literal_eq1 = true;
    want.include_positive = true;
    want.infer_steps = 1;
    assert_eq!(TrainConfig::from_json(v["config"].clone()).unwrap(), want);
    assert_eq!(v["config"], want.to_json());
    assert_eq!(v["schedule"].as_array().unwrap().len(), 4);
}

#[test]
fn evolve_writes_snapshots_and_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("f.ltf");
    let f0 = Tensor::from_fn(&[8, 8, 2], |i| (i as f64 * 0.11).cos());
    io::write_file(&input, &f0).unwrap();
    let out = dir.path().join("ev");
    let v = json(&ltfe(&["evolve", "--input", s(&input), "--out", s(&out), "--seed", "3", "--set", "schedule.T=3", "--infer-T", "1"]));
    let traj = v["trajectory"].as_array().unwrap();
    assert_eq!(traj.len(), 3);
    for (i, row) in traj.iter().enumerate() {
        let snap = io::read_file(&out.join(format!("step_{}.ltf", i + 1))).unwrap();
        assert_eq!(snap.shape(), f0.shape());
        let d = snap.zip_map(&f0, |a, b| a - b).unwrap().l2_norm();
        assert!((row["l2_from_f0"].as_f64().unwrap() - d).abs() < 1e-12);
    }
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(out.join("trajectory.json")).unwrap()).unwrap();
    assert_eq!(saved, v);
    let again = json(&ltfe(&["evolve", "--input", s(&input), "--out", s(&out), "--seed", "3", "--set", "schedule.T=3", "--infer-T", "1"]));
    assert_eq!(again, v);
}

#[test]
fn train_infer_kernels_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train", "--seed", "4", "--out", s(&out)];
    args.extend(SMALL);
    let v = json(&ltfe(&args));
    assert_eq!(v["config"]["seed"], 4);
    assert_eq!(v["accepted_steps"].as_u64().unwrap() + v["rejected_steps"].as_array().unwrap().len() as u64, 4);
    let ckpt = out.join("checkpoint.ltf");
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,step,l_cls,l_reg,l_intra,l_inter,l_align,l_total\n"));

    let inf = json(&ltfe(&["infer", "--seed", "9", "--input", s(&ckpt), "--knob", "0.5"]));
    let mut want = v["config"].clone();
    want["seed"] = 9.into();
    assert_eq!(inf["config"], want);
    let acc = inf["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(inf["scenes"].as_array().unwrap().len(), 3);
    assert_eq!(json(&ltfe(&["infer", "--seed", "9", "--input", s(&ckpt), "--knob", "0.5"])), inf);
    assert_eq!(ltfe(&["infer", "--seed", "9", "--input", s(&ckpt), "--knob", "2"]).status.code(), Some(2));

    let fmap = dir.path().join("f.ltf");
    io::write_file(&fmap, &Tensor::from_fn(&[12, 12, 3], |i| (i as f64 * 0.3).sin())).unwrap();
    let kdir = dir.path().join("k");
    let k = json(&ltfe(&["kernels", "--input", s(&fmap), "--checkpoint", s(&ckpt), "--out", s(&kdir)]));
    let rows = k["kernels"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r["tau_hat"].as_f64().unwrap())));
    assert!(rows.iter().any(|r| r["tau_hat"].as_f64().unwrap() == 1.0));
    let w = io::read_file(&kdir.join("kernel_8.ltf")).unwrap();
    assert_eq!(w.shape(), &[3, 3, 3, 3]);
    assert_eq!(w.l2_norm(), rows[7]["kernel_norm"].as_f64().unwrap());
}

#[test]
fn benchmark_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["benchmark", "--seed", "1,2", "--knobs", "", "--out", s(dir.path())];
    args.extend(SMALL);
    let v = json(&ltfe(&args));
    assert!(v["rows"].as_array().unwrap().is_empty());
    assert_eq!(std::fs::read_to_string(dir.path().join("benchmark.csv")).unwrap(), "knob,seed,ltfe_accuracy,baseline_accuracy\n");

    let mut args = vec!["benchmark", "--seed", "1,2", "--knobs", "0.3,0.6", "--out", s(dir.path())];
    args.extend(SMALL);
    let v = json(&ltfe(&args));
    assert_eq!(v["rows"].as_array().unwrap().len(), 4);
    assert_eq!(v["summary"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("benchmark.csv")).unwrap();
    for prefix in ["0.3,1,", "0.3,2,", "0.6,1,", "0.6,2,", "0.3,mean,", "0.3,std,", "0.6,mean,", "0.6,std,"] {
        assert!(csv.lines().any(|l| l.starts_with(prefix)), "{prefix} missing:\n{csv}");
    }
}

#[test]
fn gradcheck_small_config() {
    let v = json(&ltfe(&["gradcheck", "--seed", "2", "--set", "scene_size=8", "--set", "channels=2", "--set", "field_hidden=8"]));
    assert_eq!(v["passed"], true);
    assert_eq!(v["modules"].as_array().unwrap().len(), 6);
    assert_eq!(v["groups"].as_array().unwrap().len(), 6);
}
