//! End-to-end checks of the command-line binary: data generation,
//! training, evaluation, rollouts, inspection, configuration plumbing,
//! environment overrides, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_uniloop"));
    // Hermetic environment: the overrides under test are set explicitly.
    c.env_remove("UNILOOP_OUT_ROOT").env_remove("UNILOOP_THREADS");
    c
}

fn run(c: &mut Command) -> (Output, String, String) {
    let out = c.output().expect("spawn uniloop");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    (out, stdout, stderr)
}

/// Split sizes small enough for second-scale runs.
const TINY_DATA: &[&str] = &[
    "--set",
    "data.train_per_task=2",
    "--set",
    "data.eval_composed=2",
    "--set",
    "data.eval_unseen_per_task=1",
];

const TINY_MODEL: &[&str] = &[
    "--set",
    "model.layers=1",
    "--set",
    "model.width=32",
    "--set",
    "model.heads=2",
    "--set",
    "model.d_z=16",
    "--set",
    "gen.layers=1",
    "--set",
    "gen.heads=2",
    "--set",
    "gen.n_steps=2",
    "--set",
    "train.total_steps=3",
    "--set",
    "train.batch_size=2",
];

fn plan_hash(store: &Path) -> String {
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(store.join("manifest.json")).expect("manifest"))
            .expect("manifest json");
    manifest["plan_hash"].as_str().expect("plan_hash").to_string()
}

#[test]
fn gen_data_is_deterministic_and_guards_overwrites() {
    let tmp = tempfile::tempdir().unwrap();
    let store1 = tmp.path().join("store1");
    let store2 = tmp.path().join("store2");

    let (out, stdout, _) = run(bin().args(TINY_DATA).args(["gen-data", "--out"]).arg(&store1));
    assert!(out.status.success(), "gen-data failed: {stdout}");
    assert!(store1.join("manifest.json").is_file());
    assert!(stdout.contains("plan"), "missing plan summary: {stdout}");

    // A non-empty store is refused without --force.
    let (out, _, stderr) = run(bin().args(TINY_DATA).args(["gen-data", "--out"]).arg(&store1));
    assert_eq!(out.status.code(), Some(1), "expected refusal: {stderr}");
    assert!(stderr.contains("--force"), "refusal must point at --force: {stderr}");

    // Same plan, second directory: identical content hash.
    let (out, _, _) = run(bin().args(TINY_DATA).args(["gen-data", "--out"]).arg(&store2));
    assert!(out.status.success());
    assert_eq!(plan_hash(&store1), plan_hash(&store2), "plan hash not reproducible");

    // And --force rebuilds in place.
    let (out, _, _) =
        run(bin().args(TINY_DATA).args(["gen-data", "--force", "--out"]).arg(&store1));
    assert!(out.status.success());
    assert_eq!(plan_hash(&store1), plan_hash(&store2));
}

#[test]
fn config_errors_exit_with_user_code() {
    let tmp = tempfile::tempdir().unwrap();

    // Unknown key.
    let (out, _, stderr) = run(bin()
        .args(["--set", "nope.bogus=1", "gen-data", "--out"])
        .arg(tmp.path().join("s")));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr.contains("unknown configuration key"), "stderr: {stderr}");

    // Malformed value.
    let (out, _, stderr) = run(bin()
        .args(["--set", "train.total_steps=soon", "gen-data", "--out"])
        .arg(tmp.path().join("s2")));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr.contains("train.total_steps"), "stderr: {stderr}");

    // Invalid thread override.
    let (out, _, stderr) = run(bin().env("UNILOOP_THREADS", "many").arg("keys"));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr.contains("UNILOOP_THREADS"), "stderr: {stderr}");

    // A valid thread count is accepted (compute stays single-threaded).
    let (out, stdout, _) = run(bin().env("UNILOOP_THREADS", "4").arg("keys"));
    assert!(out.status.success());
    assert!(stdout.contains("model.width"));
}

#[test]
fn out_root_redirects_relative_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, _, _) = run(bin()
        .env("UNILOOP_OUT_ROOT", tmp.path())
        .args(TINY_DATA)
        .args(["gen-data", "--out", "nested/store"]));
    assert!(out.status.success());
    assert!(
        tmp.path().join("nested/store/manifest.json").is_file(),
        "store not created under UNILOOP_OUT_ROOT"
    );
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "train.total_steps = 5  # from file\ndata.train_per_task = 2\n")
        .unwrap();
    let store = tmp.path().join("store");
    let (out, _, _) = run(bin()
        .arg("--config")
        .arg(&cfg)
        .args(["--set", "train.total_steps=3"])
        .args(["--set", "data.eval_composed=1", "--set", "data.eval_unseen_per_task=0"])
        .args(["gen-data", "--out"])
        .arg(&store));
    assert!(out.status.success());
    let resolved = std::fs::read_to_string(store.join("run_config.txt")).expect("resolved config");
    assert!(resolved.contains("train.total_steps = 3"), "flag must beat file:\n{resolved}");
    assert!(resolved.contains("data.train_per_task = 2"), "file value must survive:\n{resolved}");
}

#[test]
fn keys_documents_every_key() {
    let (out, stdout, _) = run(bin().arg("keys"));
    assert!(out.status.success());
    for key in ["model.width", "window.horizon", "loss.lambda_video", "eval.max_steps"] {
        assert!(stdout.contains(key), "`keys` must list {key}");
    }
    assert!(stdout.contains("256"), "defaults must be shown");
}

#[test]
fn train_eval_rollout_inspect_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("store");
    let rundir = tmp.path().join("run");

    // Generate the episode store.
    let (out, _, stderr) = run(bin().args(TINY_DATA).args(["gen-data", "--out"]).arg(&store));
    assert!(out.status.success(), "gen-data: {stderr}");

    // Inspect the store and one episode directory.
    let (out, stdout, _) = run(bin().arg("inspect").arg(&store));
    assert!(out.status.success());
    assert!(stdout.contains("plan hash"), "store summary: {stdout}");
    let ep_dir = store.join("train_atomic_a").join("ep_insert_red_blue_10000");
    let (out, stdout, _) = run(bin().arg("inspect").arg(&ep_dir));
    assert!(out.status.success());
    assert!(stdout.contains("replay: bit-exact"), "episode replay check: {stdout}");

    // Train a tiny model from the store.
    let (out, stdout, stderr) = run(bin()
        .args(TINY_DATA)
        .args(TINY_MODEL)
        .args(["train", "--out"])
        .arg(&rundir)
        .arg("--data")
        .arg(&store));
    assert!(out.status.success(), "train: {stdout}\n{stderr}");
    let ckpt = rundir.join("checkpoint.bin");
    assert!(ckpt.is_file());
    let log = std::fs::read_to_string(rundir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,total,text,video,action,grad_norm,lr"));
    assert_eq!(log.lines().count(), 1 + 3, "expected one line per step");
    assert!(rundir.join("run_config.txt").is_file());

    // Inspect the checkpoint.
    let (out, stdout, _) = run(bin().arg("inspect").arg(&ckpt));
    assert!(out.status.success());
    assert!(stdout.contains("\"step\": 3"), "checkpoint summary: {stdout}");

    // Evaluate the compositional protocol with a tiny budget.
    let evaldir = tmp.path().join("eval");
    let (out, stdout, stderr) = run(bin()
        .args(TINY_DATA)
        .args(TINY_MODEL)
        .args(["--set", "eval.limit=2", "--set", "eval.k=2", "--set", "eval.max_steps=4"])
        .args(["eval", "--protocol", "compositional", "--checkpoint"])
        .arg(&ckpt)
        .arg("--out")
        .arg(&evaldir));
    assert!(out.status.success(), "eval: {stdout}\n{stderr}");
    assert!(evaldir.join("report.json").is_file());
    assert!(evaldir.join("results.csv").is_file());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(evaldir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["results"][0]["protocol"], "compositional");

    // A missing checkpoint is a user error, not a crash.
    let (out, _, stderr) = run(bin()
        .args(["eval", "--protocol", "compositional", "--checkpoint", "/nonexistent.bin", "--out"])
        .arg(tmp.path().join("eval2")));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr.contains("does not exist"), "stderr: {stderr}");

    // Closed-loop rollout with the scripted controller, dumping frames.
    let rodir = tmp.path().join("oracle_rollout");
    let (out, stdout, stderr) = run(bin()
        .args(["rollout", "--oracle", "--task", "insert_red_blue", "--seed", "3", "--dump-frames", "--out"])
        .arg(&rodir));
    assert!(out.status.success(), "rollout: {stdout}\n{stderr}");
    assert!(stdout.contains("success"), "rollout summary line: {stdout}");
    let record: serde_json::Value =
        serde_json::from_slice(&std::fs::read(rodir.join("rollout.json")).unwrap()).unwrap();
    assert_eq!(record["task_id"], "insert_red_blue");
    assert_eq!(record["success"], true, "scripted controller must solve its own task");
    assert!(rodir.join("frames/realized_000.png").is_file());
    assert!(rodir.join("frames/imagined_replan_00/imagined_00.png").is_file());

    // Rollout with the trained model exercises the learned planner path.
    let mrdir = tmp.path().join("model_rollout");
    let (out, stdout, stderr) = run(bin()
        .args(["rollout", "--task", "press_green", "--seed", "4", "--checkpoint"])
        .arg(&ckpt)
        .args(["--set", "eval.k=2", "--set", "eval.max_steps=4", "--out"])
        .arg(&mrdir));
    assert!(out.status.success(), "model rollout: {stdout}\n{stderr}");
    let record: serde_json::Value =
        serde_json::from_slice(&std::fs::read(mrdir.join("rollout.json")).unwrap()).unwrap();
    assert_eq!(record["task_id"], "press_green");
    assert!(record["replans"].as_array().map_or(0, |r| r.len()) >= 1);
}
