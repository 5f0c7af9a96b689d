//! The four pipeline stages behind the command-line tool.
//!
//! Every command writes only inside `cfg.out`, which must already exist, and
//! records the resolved configuration there.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::embedding::{make_split, Dataset};
use crate::env::EpisodeConfig;
use crate::error::{Error, Result};
use crate::eval::{self, CmcCurve, RankingResult};
use crate::format;
use crate::qnet::{self, input_dim_for};
use crate::synth;
use crate::train::{Trainer, TrainingLog};

pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CMC_FILE: &str = "cmc.csv";
pub const HISTOGRAM_FILE: &str = "images_hist.csv";
pub const PER_QUERY_FILE: &str = "per_query.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SETTING_RESULT_FILE: &str = "result.csv";

fn ensure_out_dir(out: &Path) -> Result<()> {
    if out.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            out,
            io::Error::new(io::ErrorKind::NotFound, "output directory does not exist"),
        ))
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Load the configured embedding file and split it unless it carries a split.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = format::load_embeddings(&cfg.data_path())?;
    if ds.split.is_some() {
        Ok(ds)
    } else {
        make_split(&ds, cfg.split.rule(), cfg.split.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub path: PathBuf,
    pub identities: usize,
    pub tracks: usize,
    pub frames: usize,
    pub dim: usize,
    pub corruption_rate: f64,
    pub separation: f64,
}

impl fmt::Display for GenSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "wrote {}: {} identities, {} tracks, {} frames, dim {}, corruption rate {:.4}, separation {:.4}",
            self.path.display(),
            self.identities,
            self.tracks,
            self.frames,
            self.dim,
            self.corruption_rate,
            self.separation
        )
    }
}

/// Generate a synthetic embedding corpus into `<out>/embeddings.txt`.
pub fn cmd_gen(cfg: &RunConfig) -> Result<GenSummary> {
    cfg.validate()?;
    ensure_out_dir(&cfg.out)?;
    let ds = synth::generate(&cfg.synth)?;
    let path = cfg.out.join(EMBEDDINGS_FILE);
    format::save_embeddings(&ds, &path)?;
    cfg.persist()?;
    Ok(GenSummary {
        path,
        identities: ds.identities().len(),
        tracks: ds.tracks.len(),
        frames: ds.num_frames(),
        dim: ds.dim,
        corruption_rate: synth::corruption_rate(&ds)?,
        separation: synth::separation(&ds),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub epochs_completed: u32,
    pub updates: u64,
    /// Training accuracy over the last epoch run by this invocation.
    pub final_accuracy: Option<f64>,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "checkpoint {} after {} epochs ({} updates)",
            self.checkpoint.display(),
            self.epochs_completed,
            self.updates
        )?;
        if let Some(a) = self.final_accuracy {
            write!(f, ", last-epoch training accuracy {a:.4}")?;
        }
        Ok(())
    }
}

/// Train an agent, checkpointing after every epoch.
///
/// With `resume = true` and an existing checkpoint, training continues from
/// the saved weights, momentum and progress, and the log is appended to.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    ensure_out_dir(&cfg.out)?;
    let ds = load_dataset(cfg)?;
    let ckpt = cfg.checkpoint_path();
    let resuming = cfg.resume && ckpt.exists();
    let mut trainer = if resuming {
        let (params, progress) = qnet::load_checkpoint(&ckpt)?;
        Trainer::resume(&ds, cfg.train.clone(), cfg.episode, params, progress)?
    } else {
        Trainer::new(&ds, cfg.train.clone(), cfg.episode)?
    };
    cfg.persist()?;

    let log_path = cfg.out.join(TRAIN_LOG_FILE);
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resuming)
        .truncate(!resuming)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut final_accuracy = None;
    while !trainer.is_done() {
        let mut log = TrainingLog::default();
        let summary = trainer.run_epoch(&mut log)?;
        final_accuracy = Some(summary.accuracy);
        save_checkpoint_atomic(&ckpt, &trainer)?;
        log_file
            .write_all(log.to_jsonl().as_bytes())
            .map_err(|e| Error::io(&log_path, e))?;
    }
    if !ckpt.exists() {
        // Zero epochs requested: still leave the initial weights behind.
        save_checkpoint_atomic(&ckpt, &trainer)?;
    }
    let progress = trainer.progress();
    Ok(TrainSummary {
        checkpoint: ckpt,
        epochs_completed: progress.epochs_completed,
        updates: progress.updates,
        final_accuracy,
    })
}

fn save_checkpoint_atomic(path: &Path, trainer: &Trainer<'_>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    qnet::save_checkpoint(&tmp, trainer.params(), trainer.progress())?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: &'static str,
    pub cmc: CmcCurve,
    pub mean_images: f64,
}

impl MethodResult {
    pub fn csv_header() -> &'static str {
        "method,rank1,rank5,rank10,rank20,mean_images"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.3}",
            self.method,
            self.cmc.rank(1),
            self.cmc.rank(5),
            self.cmc.rank(10),
            self.cmc.rank(20),
            self.mean_images
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub agent: MethodResult,
    pub baseline: Option<MethodResult>,
    pub ranking: RankingResult,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut out = String::from(MethodResult::csv_header());
        out.push('\n');
        for m in std::iter::once(&self.agent).chain(&self.baseline) {
            out.push_str(&m.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Rank the test gallery with a trained checkpoint and write the reports.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    ensure_out_dir(&cfg.out)?;
    let ds = load_dataset(cfg)?;
    let params = qnet::load_params_for(&cfg.checkpoint_path(), input_dim_for(ds.dim))?;
    let ranking = eval::rank_all(&params, &ds, &cfg.episode, cfg.eval.seed, cfg.workers)?;
    let agent = MethodResult {
        method: "agent",
        cmc: eval::cmc(&ranking)?,
        mean_images: ranking.mean_images(),
    };
    let baseline = if cfg.eval.with_baseline {
        let b = eval::baseline_pool_rank(&ds)?;
        Some(MethodResult {
            method: "all_frames",
            cmc: eval::cmc(&b)?,
            mean_images: b.mean_images(),
        })
    } else {
        None
    };
    let report = EvalReport {
        agent,
        baseline,
        ranking,
    };
    cfg.persist()?;
    write_file(&cfg.out.join(SUMMARY_FILE), report.table())?;
    write_file(&cfg.out.join(CMC_FILE), cmc_csv(&report))?;
    write_file(
        &cfg.out.join(HISTOGRAM_FILE),
        eval::histogram_csv(&report.ranking.images_histogram()),
    )?;
    write_file(&cfg.out.join(PER_QUERY_FILE), per_query_csv(&report.ranking)?)?;
    Ok(report)
}

fn cmc_csv(report: &EvalReport) -> String {
    let mut out = String::from("rank,agent");
    if report.baseline.is_some() {
        out.push_str(",all_frames");
    }
    out.push('\n');
    for (i, v) in report.agent.cmc.hits.iter().enumerate() {
        out.push_str(&format!("{},{:.6}", i + 1, v));
        if let Some(b) = &report.baseline {
            out.push_str(&format!(",{:.6}", b.cmc.hits[i]));
        }
        out.push('\n');
    }
    out
}

fn per_query_csv(r: &RankingResult) -> Result<String> {
    let ranks = r.match_ranks()?;
    let mut out = String::from("query,identity,match_rank,mean_images\n");
    for ((q, rank), images) in r.queries.iter().zip(ranks).zip(&r.images_used) {
        let mean = images.iter().sum::<usize>() as f64 / images.len().max(1) as f64;
        out.push_str(&format!(
            "{},{},{},{:.3}\n",
            q.track_id, q.identity_id, rank, mean
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub r_p: f64,
    pub t_max: usize,
    /// The formatted result line, as written to the sweep table.
    pub line: String,
    /// Whether the row was read back from a previous run.
    pub reused: bool,
}

pub fn setting_dir_name(r_p: f64, t_max: usize) -> String {
    format!("rp{r_p}_tmax{t_max}")
}

/// Train and evaluate one agent per (r_p, t_max) setting, each in its own
/// subdirectory. Settings that already have a result are not recomputed and
/// interrupted trainings continue from their checkpoints.
pub fn cmd_sweep(cfg: &RunConfig, mut on_row: impl FnMut(&SweepRow)) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    ensure_out_dir(&cfg.out)?;
    // Fail on unreadable data before creating any setting directory.
    load_dataset(cfg)?;
    cfg.persist()?;

    let header = eval::SettingResult::csv_header();
    let mut rows = Vec::new();
    for &t_max in &cfg.sweep.t_max {
        for &r_p in &cfg.sweep.r_p {
            let dir = cfg.out.join(setting_dir_name(r_p, t_max));
            let result_path = dir.join(SETTING_RESULT_FILE);
            let row = match read_setting_result(&result_path)? {
                Some(line) => SweepRow {
                    r_p,
                    t_max,
                    line,
                    reused: true,
                },
                None => {
                    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    let sub = RunConfig {
                        out: dir.clone(),
                        data: Some(cfg.data_path()),
                        checkpoint: None,
                        resume: true,
                        episode: EpisodeConfig {
                            r_p,
                            t_max,
                            ..cfg.episode
                        },
                        eval: crate::config::EvalSection {
                            with_baseline: false,
                            ..cfg.eval.clone()
                        },
                        ..cfg.clone()
                    };
                    cmd_train(&sub)?;
                    let report = cmd_eval(&sub)?;
                    let line = eval::format_row(
                        r_p,
                        t_max,
                        &report.agent.cmc,
                        report.agent.mean_images,
                    );
                    write_file(&result_path, format!("{header}\n{line}\n"))?;
                    SweepRow {
                        r_p,
                        t_max,
                        line,
                        reused: false,
                    }
                }
            };
            on_row(&row);
            rows.push(row);
            write_file(&cfg.out.join(SWEEP_FILE), sweep_csv(&rows))?;
        }
    }
    Ok(rows)
}

fn read_setting_result(path: &Path) -> Result<Option<String>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match (lines.next(), lines.next()) {
        (Some(h), Some(row)) if h == eval::SettingResult::csv_header() => {
            Ok(Some(row.to_string()))
        }
        // Treat a damaged result as missing so the setting is recomputed.
        _ => Ok(None),
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(eval::SettingResult::csv_header());
    out.push('\n');
    for r in rows {
        out.push_str(&r.line);
        out.push('\n');
    }
    out
}
