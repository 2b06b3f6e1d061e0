use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_paewc");

const TINY: &str = r#"
methods = ["sequential", "pa_ewc"]
orders = ["order_A"]
seeds = [43]
output_dir = "OUT"

[trainer]
epochs_per_task = 1
batch_size = 8
learning_rate = 3e-3
stability_batches = 2
fisher_samples = 8
probe_samples = 4

[model]
image_size = 16

[data]
n_train = 32
n_val = 16
n_test = 16
"#;

fn paewc(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("PAEWC_OUTPUT_DIR").env_remove("PAEWC_INJECT_GRAD_BUG").output().unwrap()
}

fn write_config(dir: &Path, out: &Path) -> std::path::PathBuf {
    let path = dir.join("grid.toml");
    std::fs::write(&path, TINY.replace("OUT", out.to_str().unwrap())).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_rerun_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &out);

    let first = paewc(&["run", "--config", cfg.to_str().unwrap(), "--jobs", "2"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).starts_with("2 run(s) executed, 0 skipped"));
    let run_dir = out.join("runs/pa_ewc__order_A__comprehensive__s43");
    assert!(run_dir.join("record.json").is_file());
    assert!(run_dir.join("final.ckpt").is_file());
    assert_eq!(std::fs::read_dir(run_dir.join("snapshots")).unwrap().count(), 5);
    assert_eq!(std::fs::read_dir(run_dir.join("assignments")).unwrap().count(), 5);
    assert!(paewc::experiment::run::verify_manifest(&out).unwrap().is_empty());

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("method,order,tiers,seed,checkpoint,task_position,task_id,dice,forgetting\n"));
    assert_eq!(metrics.lines().count(), 1 + 2 * 25);

    let record = std::fs::read(run_dir.join("record.json")).unwrap();
    let second = paewc(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(second.status.success());
    assert!(stdout(&second).starts_with("0 run(s) executed, 2 skipped"));
    assert_eq!(std::fs::read(run_dir.join("record.json")).unwrap(), record);

    let runs = out.to_str().unwrap();
    assert!(paewc(&["report", "--runs", runs]).status.success());
    let table3 = std::fs::read(out.join("report/table3.csv")).unwrap();
    let table4 = std::fs::read(out.join("report/table4.csv")).unwrap();
    assert!(paewc(&["report", "--runs", runs]).status.success());
    assert_eq!(std::fs::read(out.join("report/table3.csv")).unwrap(), table3);
    assert_eq!(std::fs::read(out.join("report/table4.csv")).unwrap(), table4);
    assert_eq!(String::from_utf8(table3).unwrap().lines().count(), 3);
    assert_eq!(String::from_utf8(table4).unwrap().lines().count(), 1 + 2 * 4);

    assert!(paewc(&["report", "--runs", runs, "--format", "json"]).status.success());
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report/report.json")).unwrap()).unwrap();
    assert_eq!(json["table3"].as_array().unwrap().len(), 2);
}

#[test]
fn output_override_variable_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tmp.path().join("ignored"));
    let text = std::fs::read_to_string(&cfg).unwrap().replace("[\"sequential\", \"pa_ewc\"]", "[\"sequential\"]");
    std::fs::write(&cfg, text).unwrap();
    let elsewhere = tmp.path().join("elsewhere");
    let o = Command::new(BIN)
        .args(["run", "--config", cfg.to_str().unwrap()])
        .env("PAEWC_OUTPUT_DIR", &elsewhere)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(elsewhere.join("manifest.json").is_file());
    assert!(!tmp.path().join("ignored").exists());
}

#[test]
fn configuration_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tmp.path().join("out"));
    let text = std::fs::read_to_string(&cfg).unwrap().replace("batch_size", "batchsize");
    std::fs::write(&cfg, text).unwrap();
    let o = paewc(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 9"), "{}", String::from_utf8_lossy(&o.stderr));

    let blocker = tmp.path().join("a-file");
    std::fs::write(&blocker, b"").unwrap();
    let cfg = write_config(tmp.path(), &blocker.join("out"));
    let o = paewc(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not writable"));
}

#[test]
fn report_without_runs_exits_four() {
    let tmp = tempfile::tempdir().unwrap();
    let o = paewc(&["report", "--runs", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn check_passes_and_catches_an_injected_bug() {
    let o = paewc(&["check"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| !l.starts_with("FAIL")));

    let o = paewc(&["check", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));

    let o = Command::new(BIN).arg("check").env("PAEWC_INJECT_GRAD_BUG", "cross_attention").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL grad:cross_attention"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grad:cross_attention"));
}

#[test]
fn gen_tasks_writes_every_task() {
    let tmp = tempfile::tempdir().unwrap();
    let o = paewc(&["gen-tasks", "--out", tmp.path().to_str().unwrap(), "--seed", "43"]);
    assert!(o.status.success());
    let dirs: Vec<_> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(dirs.len(), 5);
    assert!(dirs.iter().all(|d| Path::new(d).is_dir()));
}
