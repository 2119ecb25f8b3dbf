use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 14] = [
    "--override",
    "data.train_per_task=2",
    "--override",
    "data.eval_per_task=1",
    "--override",
    "data.suite_per_task=1",
    "--override",
    "train.total_steps=6",
    "--override",
    "train.warmup_steps=2",
    "--override",
    "train.batch_size=2",
    "--override",
    "train.checkpoint_every=3",
];

fn acot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acot"))
        .args(args)
        .env("ACOT_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn run(sub: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--out", out.to_str().unwrap()];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    acot(&args)
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run("gen-data", &a, &[]));
    ok(&run("gen-data", &b, &[]));
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 10, "{names:?}");
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn train_eval_and_resume_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&run("gen-data", &data, &[]));
    let data_arg = data.to_str().unwrap();

    let full = dir.path().join("full");
    ok(&run("train", &full, &["--data", data_arg, "--variant", "full"]));
    let metrics = std::fs::read_to_string(full.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step,l_ref,l_head,l_total,lr,grad_norm");
    assert_eq!(lines.len(), 1 + 6);
    assert!(full.join("config.json").exists());
    assert!(full.join("checkpoints/step-000003.ckpt").exists());

    let resumed = dir.path().join("resumed");
    let ck = full.join("checkpoints/step-000003.ckpt");
    ok(&run("train", &resumed, &["--data", data_arg, "--resume", ck.to_str().unwrap()]));
    assert_eq!(
        std::fs::read(full.join("final.ckpt")).unwrap(),
        std::fs::read(resumed.join("final.ckpt")).unwrap()
    );
    let tail: Vec<String> = std::fs::read_to_string(resumed.join("metrics.csv")).unwrap().lines().map(String::from).collect();
    assert_eq!(tail[1..], lines[4..].iter().map(|s| s.to_string()).collect::<Vec<_>>()[..]);

    let ev = dir.path().join("eval");
    let ck = full.join("final.ckpt");
    ok(&run("eval", &ev, &["--data", data_arg, "--checkpoint", ck.to_str().unwrap()]));
    let table = std::fs::read_to_string(ev.join("results_perturbation.csv")).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split(',').collect();
    let categories = ["camera", "robot", "language", "light", "background", "noise", "layout"];
    assert!(categories.iter().all(|c| header.contains(c)), "{header:?}");
    assert_eq!(header.len(), categories.len() + 4, "{header:?}");
}

#[test]
fn configuration_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(run("gen-data", &out, &["--override", "no.such.key=1"]).status.code(), Some(2));
    assert_eq!(run("ablate", &out, &["--grid", "nope"]).status.code(), Some(2));
    assert_eq!(run("train", &out, &["--variant", "bogus"]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"nope": 1}}"#).unwrap();
    assert_eq!(run("gen-data", &out, &["--config", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn missing_data_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let o = run("train", &dir.path().join("t"), &["--data", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn diverging_training_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&run("gen-data", &data, &[]));
    let o = run(
        "train",
        &dir.path().join("t"),
        &["--data", data.to_str().unwrap(), "--override", "train.peak_lr=1e300", "--override", "train.grad_clip_norm=1e300"],
    );
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));
}

#[test]
fn workers_env_var_must_be_a_positive_integer() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_acot"))
        .args(["gen-data", "--out", dir.path().to_str().unwrap()])
        .env("ACOT_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
