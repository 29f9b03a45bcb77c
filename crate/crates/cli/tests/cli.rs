use std::path::Path;
use std::process::Command;

use mergelab_cli::io::{sha256_hex, Manifest, MANIFEST};

const TINY: &str = r#"
seed = 7
precision = 32

[data]
n_train = 96
n_test = 64
class_count = 3
input_dim = 4
cluster_std = 0.5

[arch]
kind = "mlp_norm"
hidden = [12]

[train]
eta = [0.05, 0.2]
batch_size = [16, 32]
weight_decay = [5e-4]
replicates = 2
epochs = 3
decay_epochs = 1

[bifurcation]
stable_epochs = 4
checkpoint_interval = 2
decay_epochs = 1
curve_points = 5

[analysis]
ta_points = 4
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mergelab"))
}

fn write_plan(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("plan.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn manifest(dir: &Path) -> Manifest {
    toml::from_str(&std::fs::read_to_string(dir.join(MANIFEST)).unwrap()).unwrap()
}

#[test]
fn sweep_emits_one_row_per_merge_event_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = write_plan(tmp.path(), TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (dir, workers) in [(&a, "1"), (&b, "0")] {
        let (code, err) = run(&["sweep", "--plan", plan.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--workers", workers]);
        assert_eq!(code, 0, "{err}");
    }
    let merges = std::fs::read_to_string(a.join("merges.csv")).unwrap();
    // 2 η × 2 B × 2 replicates, 2 checkpoints each.
    assert_eq!(merges.lines().count(), 1 + 16);
    assert!(merges.starts_with(
        "config_id,eta,batch_size,momentum,weight_decay,augment,s_tilde,checkpoint_epoch,alpha,loss_merged,acc_merged,loss_a,acc_a,loss_b,acc_b,gain_mean,gain_a,gain_b,barrier,transition,diverged\n"
    ));
    assert!(merges.lines().nth(1).unwrap().starts_with("c000-r0,0.05,16,0.9,0.0005,false,"));
    for f in ["merges.csv", "curves.csv", "task_arithmetic.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m = manifest(&a);
    assert_eq!(m.artifacts.len(), 3);
    for art in &m.artifacts {
        assert_eq!(art.sha256, sha256_hex(&std::fs::read(a.join(&art.path)).unwrap()));
    }
}

#[test]
fn report_reads_only_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY
        .replace("replicates = 2", "replicates = 1")
        .replace("curve_points = 5", "curve_points = 5\nsave_checkpoints = true");
    let plan = write_plan(tmp.path(), &text);
    let out = tmp.path().join("run");
    let (code, err) = run(&["sweep", "--plan", plan.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(out.join("checkpoints/c000-r0/trunk-e002.ckpt").exists());
    let (code, err) = run(&["report", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let read = |f: &str| std::fs::read(out.join("report").join(f)).unwrap();
    let before: Vec<Vec<u8>> = ["summary_gains.csv", "transitions.csv", "collapse.csv", "gain_vs_noise.svg"].iter().map(|f| read(f)).collect();
    std::fs::remove_dir_all(out.join("checkpoints")).unwrap();
    let (code, _) = run(&["report", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let after: Vec<Vec<u8>> = ["summary_gains.csv", "transitions.csv", "collapse.csv", "gain_vs_noise.svg"].iter().map(|f| read(f)).collect();
    assert_eq!(before, after);
    let summary = String::from_utf8(read("summary_gains.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
}

#[test]
fn unit_momentum_rejected_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = write_plan(tmp.path(), &TINY.replace("replicates = 2", "replicates = 2\nmomentum = 1.0"));
    let out = tmp.path().join("run");
    let (code, err) = run(&["sweep", "--plan", plan.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("momentum"), "{err}");
    assert!(!out.join("merges.csv").exists());
}

#[test]
fn unknown_plan_keys_are_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = write_plan(tmp.path(), &TINY.replace("[arch]", "[arch]\nwidth = 3"));
    let (code, err) = run(&["train", "--plan", plan.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("width"), "{err}");
}

#[test]
fn divergence_still_writes_marked_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY
        .replace("kind = \"mlp_norm\"", "kind = \"mlp\"")
        .replace("eta = [0.05, 0.2]", "eta = [1e6]")
        .replace("batch_size = [16, 32]", "batch_size = [16]")
        .replace("weight_decay = [5e-4]", "weight_decay = [0.0]")
        .replace("replicates = 2", "replicates = 1");
    let plan = write_plan(tmp.path(), &text);
    let out = tmp.path().join("run");
    let (code, err) = run(&["sweep", "--plan", plan.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    let merges = std::fs::read_to_string(out.join("merges.csv")).unwrap();
    assert_eq!(merges.lines().count(), 1 + 2);
    assert!(merges.lines().skip(1).all(|l| l.ends_with(",true")));
    assert_eq!(manifest(&out).diverged, vec!["c000-r0".to_string()]);
}

#[test]
fn train_then_probe_the_saved_models() {
    let tmp = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for seed in ["1", "2", "3"] {
        let plan = write_plan(tmp.path(), TINY);
        let out = tmp.path().join(format!("m{seed}"));
        let (code, err) = run(&["train", "--plan", plan.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", seed]);
        assert_eq!(code, 0, "{err}");
        let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 1 + 4);
        paths.push(out.join("model.ckpt"));
    }
    let probe = format!(
        "{TINY}\n[probe]\nmodel = \"{0}\"\nbase = \"{0}\"\nmodels = [\"{1}\", \"{2}\"]\npoints = 5\nhessian_k = 2\nhessian_samples = 32\nresolution = 4\n",
        paths[0].display(),
        paths[1].display(),
        paths[2].display()
    );
    let plan = write_plan(tmp.path(), &probe);
    for cmd in ["merge", "hessian", "slice"] {
        let out = tmp.path().join(cmd);
        let (code, err) = run(&[cmd, "--plan", plan.to_str().unwrap(), "--out", out.to_str().unwrap(), "--charts", "on"]);
        assert!(code == 0 || (cmd == "hessian" && code == 2), "{cmd}: {err}");
    }
    let curve = std::fs::read_to_string(tmp.path().join("merge/merge_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 5);
    let eig = std::fs::read_to_string(tmp.path().join("hessian/hessian.csv")).unwrap();
    assert!(eig.starts_with("rank,eigenvalue,converged,iterations\n1,"));
    let slice = std::fs::read_to_string(tmp.path().join("slice/slice.csv")).unwrap();
    assert_eq!(slice.lines().count(), 1 + 16);
    assert!(tmp.path().join("slice/slice.svg").exists());
}

#[test]
fn precision_flag_is_checked() {
    let (code, _) = run(&["train", "--plan", "x.toml", "--precision", "16"]);
    assert_eq!(code, 1);
    let (code, err) = run(&["train", "--plan", "/nonexistent/plan.toml", "--out", "/tmp/x"]);
    assert_eq!(code, 1);
    assert!(err.contains("reading plan"), "{err}");
}
