use std::fs;
use std::path::Path;

use seqverify::commands::{self, cmd_eval, cmd_gen, cmd_sweep, cmd_train};
use seqverify::config::RunConfig;
use seqverify::qnet::load_checkpoint;
use seqverify::Error;

fn small(out: &Path, extra: &[(&str, &str)]) -> RunConfig {
    let out = out.to_str().unwrap().to_string();
    let mut kv: Vec<(&str, &str)> = vec![
        ("out", &out),
        ("seed", "3"),
        ("synth.num_identities", "12"),
        ("synth.dim", "5"),
        ("synth.frames_per_track", "4"),
        ("train.epochs", "2"),
        ("train.iterations_per_epoch", "40"),
        ("train.log_interval", "10"),
    ];
    kv.extend_from_slice(extra);
    RunConfig::default()
        .with_overrides(kv)
        .unwrap()
        .resolve()
        .unwrap()
}

#[test]
fn gen_summary_matches_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path(), &[]);
    let s = cmd_gen(&cfg).unwrap();
    let text = fs::read_to_string(tmp.path().join(commands::EMBEDDINGS_FILE)).unwrap();
    let records: Vec<&str> = text
        .lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#') && !l.starts_with("dim") && !l.starts_with('@'))
        .collect();
    assert_eq!(records.len(), s.frames);
    let mut tracks: Vec<&str> = records.iter().map(|l| l.split_whitespace().nth(2).unwrap()).collect();
    tracks.sort_unstable();
    tracks.dedup();
    assert_eq!(tracks.len(), s.tracks);
    assert_eq!(s.identities, 12);
    assert_eq!(s.tracks, 24);
    assert!(tmp.path().join("resolved_config.toml").exists());
    // the persisted config reproduces this run
    let back = RunConfig::load(&tmp.path().join("resolved_config.toml")).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn gen_does_not_create_missing_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("a/b");
    let err = cmd_gen(&small(&missing, &[])).unwrap_err();
    assert!(matches!(&err, Error::Io { path, .. } if path == &missing));
    assert_eq!(err.exit_code(), 3);
    assert!(!missing.exists());
}

#[test]
fn resume_restores_optimizer_state() {
    let tmp = tempfile::tempdir().unwrap();
    cmd_gen(&small(tmp.path(), &[])).unwrap();
    cmd_train(&small(tmp.path(), &[("train.epochs", "1")])).unwrap();
    let (p1, prog1) = load_checkpoint(&tmp.path().join("checkpoint.bin")).unwrap();
    assert_eq!(prog1.epochs_completed, 1);
    assert!(p1.velocity.max_abs() > 0.0);

    let s = cmd_train(&small(tmp.path(), &[("resume", "true")])).unwrap();
    assert_eq!(s.epochs_completed, 2);
    let (p2, prog2) = load_checkpoint(&tmp.path().join("checkpoint.bin")).unwrap();
    assert!(prog2.updates > prog1.updates);
    assert_ne!(p1, p2);

    // resuming a finished run changes nothing
    let again = cmd_train(&small(tmp.path(), &[("resume", "true")])).unwrap();
    assert_eq!(again.updates, prog2.updates);
    assert_eq!(load_checkpoint(&tmp.path().join("checkpoint.bin")).unwrap().0, p2);
}

#[test]
fn invalid_r_p_fails_before_touching_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        out: tmp.path().to_path_buf(),
        ..RunConfig::default()
    };
    let mut bad = cfg.clone();
    bad.episode.r_p = 2.0;
    let err = cmd_train(&bad).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)));
    assert_eq!(err.exit_code(), 2);
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn eval_reports_agent_and_baseline_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path(), &[("eval.with_baseline", "true")]);
    cmd_gen(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    let r = cmd_eval(&cfg).unwrap();
    let table = fs::read_to_string(tmp.path().join(commands::SUMMARY_FILE)).unwrap();
    assert_eq!(table, r.table());
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("agent,"));
    assert!(lines[2].starts_with("all_frames,"));
    for l in &lines[1..] {
        let images = l.rsplit(',').next().unwrap();
        assert_eq!(images.split('.').nth(1).unwrap().len(), 3, "{l}");
    }
    // the baseline consumes every frame of both tracks
    assert_eq!(r.baseline.unwrap().mean_images, 8.0);
    let per_query = fs::read_to_string(tmp.path().join(commands::PER_QUERY_FILE)).unwrap();
    assert_eq!(per_query.lines().count(), r.ranking.queries.len() + 1);
}

#[test]
fn sweep_has_one_row_and_histogram_per_setting() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(
        tmp.path(),
        &[
            ("sweep.r_p", "-0.2,-0.1,0,0.1,0.2"),
            ("train.epochs", "1"),
        ],
    );
    cmd_gen(&cfg).unwrap();
    let mut seen = 0;
    let rows = cmd_sweep(&cfg, |_| seen += 1).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(seen, 5);
    let table = fs::read_to_string(tmp.path().join(commands::SWEEP_FILE)).unwrap();
    assert_eq!(table.lines().count(), 6);
    for r in &rows {
        let dir = tmp.path().join(commands::setting_dir_name(r.r_p, r.t_max));
        assert!(dir.join(commands::HISTOGRAM_FILE).exists());
        assert!(!r.reused);
    }

    // Simulate an interruption: drop one result and rerun.
    let victim = tmp.path().join(commands::setting_dir_name(0.1, 8));
    fs::remove_file(victim.join(commands::SETTING_RESULT_FILE)).unwrap();
    let rows2 = cmd_sweep(&cfg, |_| {}).unwrap();
    let recomputed: Vec<f64> = rows2.iter().filter(|r| !r.reused).map(|r| r.r_p).collect();
    assert_eq!(recomputed, vec![0.1]);
    assert_eq!(fs::read_to_string(tmp.path().join(commands::SWEEP_FILE)).unwrap(), table);
}
