use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[schedule]
steps = 20
kind = "linear"
beta_start = 0.001
beta_end = 0.2

[unet]
input_dim = 2
feature_dims = [2, 4, 8]
time_embed_dim = 8

[data]
samples = 256
seed = 3

[pretrain]
epochs = 2
batch_size = 64
learning_rate = 0.001
optimizer = "adam"
seed = 0

[finetune]
epochs = 3
batch_size = 16
learning_rate = 0.001
optimizer = "adam"
seed = 0

[steering]
mode = "EMD"
target = 1
n_labeled = 12

[sweep]
modes = ["E", "M"]
n_labeled = [12]
seeds = [0]
checkpoints = [1, 3]

[eval]
samples = 40

[eval.sampler]
kind = "ddim"
steps = 5
"#;

fn steerlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steerlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("STEERLAB_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn manifest(dir: &Path, tag: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join(format!("manifest-{tag}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn oracle_check_reports_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = steerlab(dir.path(), &["oracle-check", "--out", "o"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.contains("441 points")).count(), 3);
    let worst: f64 = out.lines().last().unwrap().split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(worst <= 1e-8);
    assert_eq!(manifest(&dir.path().join("o"), "oracle-check")["command"], "oracle-check");
}

#[test]
fn oracle_check_fails_an_impossible_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = steerlab(dir.path(), &["oracle-check", "--tolerance", "1e-300", "--out", "o"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("exceeds tolerance"));
}

#[test]
fn encode_layout_golden() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("boxes.txt"), "# label x0 y0 x1 y1\n3 0 0 2 2\n5 1 1 3 3\n").unwrap();
    let o = steerlab(dir.path(), &["encode-layout", "--boxes", "boxes.txt", "--height", "3", "--width", "3", "--out", "o"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "3/1 3/1 0/0\n3/1 8/2 5/1\n0/0 5/1 5/1\n");

    let o = steerlab(dir.path(), &["encode-layout", "--boxes", "boxes.txt", "--height", "2", "--width", "2", "--format", "json", "--out", "o"]);
    assert_eq!(o.status.code(), Some(1), "box outside a 2x2 grid");
    let o = steerlab(dir.path(), &["encode-layout", "--boxes", "boxes.txt", "--height", "3", "--width", "4", "--format", "json", "--out", "o"]);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!((v["height"].as_u64(), v["width"].as_u64()), (Some(3), Some(4)));
    assert_eq!(v["cells"].as_array().unwrap().len(), 24);
}

#[test]
fn sweep_dry_run_lists_the_default_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = steerlab(dir.path(), &["sweep", "--dry-run"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("45 cells, 45 records"));
    assert_eq!(lines.next(), Some("ALL-n12-s0-e2500"));
    assert_eq!(out.lines().last(), Some("M-n12-s4-e2500"));
    assert!(!dir.path().join("runs").exists(), "dry run writes nothing");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(steerlab(dir.path(), &["sweep", "--bogus"]).status.code(), Some(2));
    assert_eq!(steerlab(dir.path(), &["finetune", "--mode", "XYZ"]).status.code(), Some(2));
    assert_eq!(steerlab(dir.path(), &[]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = steerlab(dir.path(), &["finetune", "--out", "nowhere"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run `pretrain` first"), "{}", stderr(&o));
    let o = steerlab(dir.path(), &["--config", "absent.toml", "oracle-check"]);
    assert_eq!(o.status.code(), Some(1));
    std::fs::write(dir.path().join("bad.toml"), "[steering]\ntarget = 9\n").unwrap();
    let o = steerlab(dir.path(), &["--config", "bad.toml", "oracle-check"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("target ring 9"));
}

#[test]
fn accelerator_falls_back_to_cpu() {
    let dir = tempfile::tempdir().unwrap();
    let o = steerlab(dir.path(), &["--device", "accelerator", "sweep", "--dry-run"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("running on the CPU"));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_steerlab"))
        .args(["oracle-check"])
        .current_dir(dir.path())
        .env("STEERLAB_OUT", "from-env")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("from-env/manifest-oracle-check.json").exists());
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tiny_dir();
    let d = dir.path();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", "tiny.toml", "--out", "out"];
        full.extend_from_slice(args);
        let o = steerlab(d, &full);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        o
    };
    let out = d.join("out");

    run(&["pretrain", "--checkpoint-every", "1"]);
    for f in ["backbone.json", "backbone-e1.json", "backbone-e2.json", "backbone_data.txt", "loss.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let m = manifest(&out, "backbone");
    assert_eq!(m["command"], "pretrain");
    assert_eq!(m["config"]["pretrain"]["epochs"], 2);
    let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("run_id,epoch,loss"));
    assert_eq!(loss.lines().filter(|l| l.starts_with("pretrain-backbone-s0,")).count(), 2);

    run(&["finetune", "--mode", "E-D"]);
    assert!(out.join("steering-E-D.json").exists());
    assert!(out.join("labeled_n12_s0.txt").exists());
    let m = manifest(&out, "finetune-E-D");
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);

    run(&["sample", "--module", "out/steering-E-D.json", "-n", "30"]);
    let csv = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("x,y,ring"));
    assert_eq!(csv.lines().count(), 31);
    assert!(out.join("samples.svg").exists());

    let o = run(&["evaluate", "--samples", "out/samples.csv"]);
    let report: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(report["samples"], 30);
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(out.join("evaluation.json").exists());

    let o = run(&["sweep"]);
    assert!(stdout(&o).starts_with("n=12 epoch=3"), "{}", stdout(&o));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("run_id,mode,n_labeled,epoch,seed,target,accuracy,precision,band,wall_time_s")
    );
    let ids: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids.len(), 4);
    for id in ["E-n12-s0-e1", "E-n12-s0-e3", "M-n12-s0-e1", "M-n12-s0-e3"] {
        assert!(ids.contains(&id), "{id}");
    }
    assert!(out.join("plots/accuracy_vs_epoch_n12.svg").exists());

    // a second sweep finds everything done and appends nothing
    run(&["sweep"]);
    assert_eq!(std::fs::read_to_string(out.join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn seed_flag_overrides_every_seed() {
    let dir = tiny_dir();
    let o = steerlab(dir.path(), &["--config", "tiny.toml", "--out", "out", "--seed", "9", "pretrain", "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = manifest(&dir.path().join("out"), "backbone");
    assert_eq!(m["seed"], 9);
    for key in ["data", "pretrain", "finetune"] {
        assert_eq!(m["config"][key]["seed"], 9, "{key}");
    }
    assert_eq!(m["config"]["sweep"]["seeds"], serde_json::json!([9]));
    assert_eq!(m["config"]["pretrain"]["epochs"], 1);
}

#[test]
fn scratch_arm_trains_a_conditional_model() {
    let dir = tiny_dir();
    let text = TINY.replace("time_embed_dim = 8", "time_embed_dim = 8\ncondition_dim = 2");
    std::fs::write(dir.path().join("tiny.toml"), text).unwrap();
    let o = steerlab(dir.path(), &["--config", "tiny.toml", "--out", "out", "pretrain", "--scratch"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("out/scratch.json").exists());
    let o = steerlab(dir.path(), &["--config", "tiny.toml", "--out", "out", "sample", "--backbone", "out/scratch.json", "-n", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}
