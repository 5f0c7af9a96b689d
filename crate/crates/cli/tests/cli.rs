use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--num-identities",
    "16",
    "--dim",
    "6",
    "--frames-per-track",
    "4",
    "--epochs",
    "2",
    "--iterations-per-epoch",
    "60",
    "--log-interval",
    "20",
    "--seed",
    "11",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqverify"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_in(sub: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    run(&args)
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn missing_output_dir_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let o = run_in("gen", &missing, &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
    assert!(!missing.exists());
}

#[test]
fn invalid_r_p_is_a_config_error_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in("train", tmp.path(), &["--r-p", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = run(&["gen", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = run_in("gen", tmp.path(), &["--set", "train.learning_rate=0.1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn non_finite_embeddings_are_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("bad.txt");
    fs::write(&data, "dim 2\np0 0 t0 0 NaN 1\np0 1 t1 0 0 1\n").unwrap();
    let o = run_in("train", tmp.path(), &["--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(&run_in("gen", tmp.path(), &[]));
    let o = run_in("train", tmp.path(), &["--lr", "1e12", "--grad-clip", "false"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(&run_in("gen", tmp.path(), &[]));
    fs::write(tmp.path().join("checkpoint.bin"), b"not a checkpoint").unwrap();
    let o = run_in("eval", tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(3));
}

fn pipeline(out: &Path) {
    assert_ok(&run_in("gen", out, &[]));
    assert_ok(&run_in("train", out, &[]));
    let o = run_in("eval", out, &["--with-baseline"]);
    assert_ok(&o);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("method,rank1,rank5,rank10,rank20,mean_images\nagent,"));
    assert!(stdout.contains("\nall_frames,"));
}

#[test]
fn pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in [
        "embeddings.txt",
        "embeddings.txt.corruption",
        "checkpoint.bin",
        "train_log.jsonl",
        "summary.csv",
        "cmc.csv",
        "images_hist.csv",
        "per_query.csv",
    ] {
        let x = fs::read(a.path().join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        let y = fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
    }
    assert!(a.path().join("resolved_config.toml").exists());
}

#[test]
fn workers_do_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    pipeline(tmp.path());
    let one = fs::read(tmp.path().join("per_query.csv")).unwrap();
    assert_ok(&run_in("eval", tmp.path(), &["--workers", "3"]));
    assert_eq!(one, fs::read(tmp.path().join("per_query.csv")).unwrap());
}

#[test]
fn resumed_training_continues_from_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(&run_in("gen", tmp.path(), &[]));
    assert_ok(&run_in("train", tmp.path(), &["--epochs", "1"]));
    let o = run_in("train", tmp.path(), &["--epochs", "2", "--resume"]);
    assert_ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("after 2 epochs"));
    let log = fs::read_to_string(tmp.path().join("train_log.jsonl")).unwrap();
    assert!(log.lines().any(|l| l.contains("\"epoch\":0")));
    assert!(log.lines().any(|l| l.contains("\"epoch\":1")));
}

#[test]
fn sweep_writes_table_and_skips_finished_settings() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(&run_in("gen", tmp.path(), &[]));
    let args = ["--sweep-r-p", "-0.2,0.2", "--sweep-t-max", "4", "--epochs", "1"];
    let o = run_in("sweep", tmp.path(), &args);
    assert_ok(&o);
    let table = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "r_p,t_max,rank1,rank5,rank10,rank20,mean_images");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("-0.2,4,"));
    assert!(tmp.path().join("rp0.2_tmax4/images_hist.csv").exists());

    // A second run reuses the results instead of retraining.
    let ckpt = tmp.path().join("rp0.2_tmax4/checkpoint.bin");
    let before = fs::metadata(&ckpt).unwrap().modified().unwrap();
    let o = run_in("sweep", tmp.path(), &args);
    assert_ok(&o);
    assert_eq!(fs::metadata(&ckpt).unwrap().modified().unwrap(), before);
    assert_eq!(fs::read_to_string(tmp.path().join("sweep.csv")).unwrap(), table);
}
