use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
schema_version = 1
root_seed = 4
out_dir = "out"
eval_interval = 2

[dataset]
kind = "blobs"
num_classes = 3
per_class = 40
test_per_class = 20
feature_dim = 4
spread = 1.0

[partition]
kind = "dirichlet"
num_clients = 6
samples_per_client = 20

[model]
kind = "softmax-linear"
feature_dim = 4
num_classes = 3

[fed]
batch_size = 5
rounds = 6

[sweep]
alphas = [0.5]
report_goals = [3]
eta_effs = [0.1]
betas = [0.0, 0.9]

[central]
lr = 0.1
steps = 100
batch_size = 10
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn fedsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn data_partition_and_measure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");

    let o = fedsim(&["gen-data", "--config", &cfg]);
    assert!(o.status.success(), "{o:?}");
    let train = fs::read_to_string(out.join("train.csv")).unwrap();
    assert!(train.starts_with("f0,f1,f2,f3,label\n"));
    assert_eq!(train.lines().count(), 121);

    let o = fedsim(&["partition", "--config", &cfg]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("clients=6 assigned=120"));
    let part = out.join("partition.csv");
    assert!(fs::read_to_string(&part)
        .unwrap()
        .starts_with("client_id,example_index\n"));

    let built = fedsim(&["measure", "--config", &cfg]);
    let loaded = fedsim(&[
        "measure",
        "--config",
        &cfg,
        "--partition-file",
        part.to_str().unwrap(),
    ]);
    assert!(built.status.success() && loaded.status.success());
    assert_eq!(stdout(&built), stdout(&loaded));
    assert!(fs::read_to_string(out.join("non_identicalness.csv"))
        .unwrap()
        .starts_with("client_id,size,emd\n"));
}

#[test]
fn train_fed_resume_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let full = dir.path().join("full");
    let half = dir.path().join("half");
    let rest = dir.path().join("rest");
    let o = fedsim(&[
        "train-fed",
        "--config",
        &cfg,
        "--beta",
        "0.9",
        "--out-dir",
        full.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("method=FedAvgM rounds=6"));

    let o = fedsim(&[
        "train-fed",
        "--config",
        &cfg,
        "--beta",
        "0.9",
        "--rounds",
        "3",
        "--out-dir",
        half.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    let ck = half.join("checkpoint.json");
    let o = fedsim(&[
        "train-fed",
        "--config",
        &cfg,
        "--beta",
        "0.9",
        "--out-dir",
        rest.to_str().unwrap(),
        "--resume",
        ck.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(
        fs::read(full.join("params.txt")).unwrap(),
        fs::read(rest.join("params.txt")).unwrap()
    );
    let rounds = fs::read_to_string(rest.join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().nth(1).unwrap().split(',').next(), Some("4"));
}

#[test]
fn central_sweep_and_milestones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");

    let o = fedsim(&["train-central", "--config", &cfg]);
    assert!(o.status.success(), "{o:?}");
    let acc: f64 = stdout(&o)
        .trim()
        .strip_prefix("central_accuracy=")
        .unwrap()
        .parse()
        .unwrap();
    assert!(acc > 0.0 && acc <= 1.0);

    let o = fedsim(&["sweep", "--config", &cfg]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("ran 2 points (0 failed), skipped 0"));
    let summary = fs::read(out.join("summary.csv")).unwrap();
    let o = fedsim(&["sweep", "--config", &cfg]);
    assert!(stdout(&o).contains("ran 0 points (0 failed), skipped 2"));
    assert_eq!(fs::read(out.join("summary.csv")).unwrap(), summary);

    let rounds = out.join("rounds").join("a0.5_k3_e1_lr0.1_b0_fedavg_r0.csv");
    let o = fedsim(&[
        "milestones",
        "--rounds-csv",
        rounds.to_str().unwrap(),
        "--central-accuracy",
        "1.0",
        "--thresholds",
        "0,2",
    ]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(stdout(&o), "threshold,round\n0,2\n2,not reached\n");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(
        dir.path(),
        &CONFIG.replace("schema_version = 1", "schema_version = 9"),
    );
    assert_eq!(fedsim(&["sweep", "--config", &bad]).status.code(), Some(2));
    assert_eq!(
        fedsim(&["sweep", "--config", "/nonexistent/exp.toml"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(fedsim(&["bogus"]).status.code(), Some(2));

    let cfg = write_config(
        dir.path(),
        &CONFIG
            .replace("spread = 1.0", "spread = 1e200")
            .replace("lr = 0.1", "lr = 1e200"),
    );
    let o = fedsim(&[
        "train-central",
        "--config",
        &cfg,
        "--out-dir",
        dir.path().join("c").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{o:?}");
    let o = fedsim(&[
        "train-fed",
        "--config",
        &cfg,
        "--eta-eff",
        "1e200",
        "--out-dir",
        dir.path().join("f").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{o:?}");
}
