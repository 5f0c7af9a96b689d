use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use seqverify::commands;
use seqverify::config::RunConfig;
use seqverify::Error;

/// Command-line flags and the config keys they override.
const FLAGS: &[(&str, &str)] = &[
    ("seed", "seed"),
    ("workers", "workers"),
    ("out", "out"),
    ("data", "data"),
    ("checkpoint", "checkpoint"),
    ("num-identities", "synth.num_identities"),
    ("dim", "synth.dim"),
    ("frames-per-track", "synth.frames_per_track"),
    ("noise-sigma", "synth.noise_sigma"),
    ("camera-shift-sigma", "synth.camera_shift_sigma"),
    ("corruption-prob", "synth.corruption_prob"),
    ("corruption-mode", "synth.corruption_mode"),
    ("synth-seed", "synth.seed"),
    ("train-fraction", "split.train_fraction"),
    ("split-seed", "split.seed"),
    ("t-max", "episode.t_max"),
    ("r-p", "episode.r_p"),
    ("pair-order", "episode.pair_order"),
    ("epochs", "train.epochs"),
    ("iterations-per-epoch", "train.iterations_per_epoch"),
    ("lr", "train.lr"),
    ("momentum", "train.momentum"),
    ("gamma", "train.gamma"),
    ("batch-size", "train.batch_size"),
    ("replay-capacity", "train.replay_capacity"),
    ("epsilon-start", "train.epsilon_start"),
    ("epsilon-end", "train.epsilon_end"),
    ("epsilon-anneal-epochs", "train.epsilon_anneal_epochs"),
    ("target-sync", "train.target_sync_period"),
    ("grad-clip", "train.grad_clip"),
    ("log-interval", "train.log_interval"),
    ("train-seed", "train.seed"),
    ("eval-seed", "eval.seed"),
    ("sweep-r-p", "sweep.r_p"),
    ("sweep-t-max", "sweep.t_max"),
];

/// Flags that set a boolean key to true when present.
const SWITCHES: &[(&str, &str)] = &[
    ("resume", "resume"),
    ("stats-exclusive", "episode.stats_exclusive"),
    ("with-baseline", "eval.with_baseline"),
];

fn subcommand(name: &'static str, about: &'static str) -> Command {
    let mut cmd = Command::new(name)
        .about(about)
        .args_override_self(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("TOML run configuration"),
        )
        .arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("Override any config key, e.g. --set train.lr=1e-3"),
        );
    for &(flag, key) in FLAGS {
        cmd = cmd.arg(
            Arg::new(flag)
                .long(flag)
                .value_name("VALUE")
                .allow_hyphen_values(true)
                .help(format!("Override `{key}`")),
        );
    }
    for &(flag, key) in SWITCHES {
        cmd = cmd.arg(
            Arg::new(flag)
                .long(flag)
                .action(ArgAction::SetTrue)
                .help(format!("Set `{key}` to true")),
        );
    }
    cmd
}

fn cli() -> Command {
    Command::new("seqverify")
        .about("Sequential multi-shot track verification with a deep Q-network")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(subcommand("gen", "Generate a synthetic embedding corpus"))
        .subcommand(subcommand("train", "Train an agent and write a checkpoint"))
        .subcommand(subcommand("eval", "Rank the test gallery with a checkpoint"))
        .subcommand(subcommand("sweep", "Train and evaluate over a grid of r_p and t_max"))
}

fn resolve_config(m: &ArgMatches) -> seqverify::Result<RunConfig> {
    let base = match m.get_one::<PathBuf>("config") {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    for &(flag, key) in FLAGS {
        if let Some(v) = m.get_one::<String>(flag) {
            overrides.push((key.to_string(), v.clone()));
        }
    }
    for &(flag, key) in SWITCHES {
        if m.get_flag(flag) {
            overrides.push((key.to_string(), "true".to_string()));
        }
    }
    for kv in m.get_many::<String>("set").into_iter().flatten() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        overrides.push((k.trim().to_string(), v.to_string()));
    }
    base.with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?
        .resolve()
}

fn run(name: &str, m: &ArgMatches) -> seqverify::Result<()> {
    let cfg = resolve_config(m)?;
    match name {
        "gen" => println!("{}", commands::cmd_gen(&cfg)?),
        "train" => println!("{}", commands::cmd_train(&cfg)?),
        "eval" => print!("{}", commands::cmd_eval(&cfg)?.table()),
        "sweep" => {
            println!("{}", seqverify::eval::SettingResult::csv_header());
            commands::cmd_sweep(&cfg, |row| println!("{}", row.line))?;
        }
        _ => unreachable!("clap rejects unknown subcommands"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_is_well_formed() {
        cli().debug_assert();
    }

    #[test]
    fn every_flag_maps_to_a_config_key() {
        for &(_, key) in FLAGS.iter().chain(SWITCHES) {
            let value = if SWITCHES.iter().any(|&(_, k)| k == key) || key == "train.grad_clip" {
                "true"
            } else if key.ends_with("mode") {
                "uniform-noise"
            } else if key.ends_with("order") {
                "sequential"
            } else if ["out", "data", "checkpoint"].contains(&key) {
                "x"
            } else {
                "1"
            };
            RunConfig::default()
                .with_overrides([(key, value)])
                .unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
