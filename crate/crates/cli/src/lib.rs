//! Batch front end: each subcommand reads a JSON experiment config, writes
//! its artifacts into one output directory and closes with `manifest.json`.

pub mod args;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;

use std::path::PathBuf;

use anyhow::Result;

use args::{Cli, Command, GlobalArgs};
use config::ExperimentConfig;
use manifest::{Manifest, RunDir};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "KBMEM_OUT";

/// Loads the config and applies the global flags.
pub fn resolve_config(global: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(kb) = &global.kb {
        cfg.kb = Some(kb.clone());
        cfg.synth = None;
    }
    if let Some(out) = &global.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

/// `--out`, else the config's `out`, else `$KBMEM_OUT/<command>`, else
/// `runs/<command>`.
pub fn output_dir(cfg: &ExperimentConfig, command: &str) -> PathBuf {
    if let Some(out) = &cfg.out {
        return out.clone();
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(command),
        _ => PathBuf::from("runs").join(command),
    }
}

/// Runs one command. On failure the output directory, if it was created,
/// gets a `FAILED` marker and no manifest.
pub fn run(cli: Cli) -> Result<Manifest> {
    let cfg = resolve_config(&cli.global)?;
    let out = output_dir(&cfg, cli.command.name());
    let result = match &cli.command {
        Command::Ingest(a) => commands::ingest(cfg, a, out.clone()),
        Command::Synth => commands::synth(cfg, out.clone()),
        Command::Strata => commands::strata(cfg, out.clone()),
        Command::Train(a) => commands::train(cfg, a, out.clone()),
        Command::Compare(a) => commands::compare(cfg, a, out.clone()),
        Command::Qa(a) => commands::qa(cfg, a, out.clone()),
        Command::Eval(a) => commands::eval(cfg, a, out.clone()),
        Command::Probes(a) => commands::probes(cfg, a, out.clone()),
    };
    if let Err(e) = &result {
        RunDir::mark_failed(&out, e);
    }
    result
}
