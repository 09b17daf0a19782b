//! Command-line front end for the `bigru-cnn` library.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error,
//! 5 I/O error. Failures print a single `error[<class>]: <message>` line on
//! stderr.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use bigru_cnn::{Error, ErrorClass, Result};
use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "bigru-cnn", version, about = "BiGRU-CNN clip classifier")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every command; they override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Backbone checkpoint for `train`, model checkpoint for `eval` and `predict`.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Image manifest for `pretrain`, clip manifest for `train` and `eval`.
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Worker threads (default 1, which keeps runs bit-reproducible).
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a two-class moving-blob clip dataset.
    Synth(SynthArgs),
    /// Train the VGG person classifier on still images.
    Pretrain,
    /// Train the clip classifier.
    Train,
    /// Accuracy and confusion counts of a checkpoint on a manifest.
    Eval,
    /// Class probabilities for one clip.
    Predict {
        /// Directory of frames (or a single image).
        frames: PathBuf,
    },
    /// Finite-difference check of every layer type and a reduced model.
    Gradcheck,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Frame size as HxW, e.g. 64x64.
    #[arg(long, value_name = "HxW", value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(h)?, num(w)?))
}

pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Io => 5,
    }
}

fn class_name(class: ErrorClass) -> &'static str {
    match class {
        ErrorClass::Config => "config",
        ErrorClass::Data => "data",
        ErrorClass::Numeric => "numeric",
        ErrorClass::Io => "io",
    }
}

/// Loads the config file (if any) and applies flag overrides, then
/// validates the result.
pub fn resolve_config(common: &CommonArgs, synth: Option<&SynthArgs>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(workers) = common.workers {
        cfg.workers = workers;
    }
    if let Some(s) = synth {
        if let Some(v) = s.clips {
            cfg.synth.clips = v;
        }
        if let Some(v) = s.frames {
            cfg.synth.frames = v;
        }
        if let Some((h, w)) = s.size {
            cfg.synth.height = h;
            cfg.synth.width = w;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command line, writing results to `out`.
pub fn run(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<()> {
    let synth = match &cli.command {
        Command::Synth(args) => Some(args),
        _ => None,
    };
    let cfg = resolve_config(&cli.common, synth)?;
    let common = &cli.common;
    bigru_cnn::exec::with_workers(cfg.workers, || {
        let mut out = out;
        match &cli.command {
            Command::Synth(_) => commands::synth(&cfg, &mut out),
            Command::Pretrain => commands::pretrain(&cfg, common.manifest.as_deref(), &mut out),
            Command::Train => commands::train(&cfg, common, &mut out),
            Command::Eval => commands::eval(&cfg, common, &mut out),
            Command::Predict { frames } => commands::predict(&cfg, common, frames, &mut out),
            Command::Gradcheck => commands::gradcheck(&cfg, &mut out),
        }
    })
}

/// Parses `args`, runs, reports errors and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout();
    match run(&cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = stdout.flush();
            report(&e);
            exit_code(e.class())
        }
    }
}

fn report(e: &Error) {
    let mut msg = e.to_string();
    let mut source = std::error::Error::source(e);
    while let Some(s) = source {
        let text = s.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
        source = s.source();
    }
    let class = class_name(e.class());
    let msg = msg.strip_prefix(&format!("{class} error: ")).unwrap_or(&msg);
    let line = msg.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error[{class}]: {line}");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_flag() {
        assert_eq!(parse_size("64x48"), Ok((64, 48)));
        assert!(parse_size("64").is_err());
        assert!(parse_size("ax4").is_err());
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\nworkers = 2\n[synth]\nclips = 6\n").unwrap();
        let common = CommonArgs {
            config: Some(path),
            seed: Some(9),
            ..CommonArgs::default()
        };
        let synth = SynthArgs {
            size: Some((32, 24)),
            ..SynthArgs::default()
        };
        let cfg = resolve_config(&common, Some(&synth)).unwrap();
        assert_eq!((cfg.seed, cfg.workers, cfg.synth.clips), (9, 2, 6));
        assert_eq!((cfg.synth.height, cfg.synth.width), (32, 24));
    }

    #[test]
    fn missing_config_file_is_io() {
        let common = CommonArgs {
            config: Some("/nonexistent/run.toml".into()),
            ..CommonArgs::default()
        };
        assert_eq!(resolve_config(&common, None).unwrap_err().class(), ErrorClass::Io);
    }
}
