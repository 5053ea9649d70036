//! `mvx`: generate synthetic multi-view data, train the four architectures,
//! explain individual views, and evaluate checkpoints.

pub mod commands;
pub mod config;
pub mod plot;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mvx_core::explainer::Method;
use mvx_core::mvarch::ArchKind;

pub use commands::{cmd_eval, cmd_explain, cmd_generate, cmd_train};
use config::{RunConfig, ViewSelection};

#[derive(Parser, Debug)]
#[command(name = "mvx", version, about = "Multi-view CNN training and per-view explanations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Shared {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset with defect masks.
    Generate {
        #[command(flatten)]
        shared: Shared,
    },
    /// Train one architecture and write a checkpoint plus learning curves.
    Train {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_parser = parse_arch)]
        arch: Option<ArchKind>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fit one-view heads on frozen extractors and explain sample views.
    Explain {
        #[command(flatten)]
        shared: Shared,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Dataset directory; defaults to the one recorded with the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        sample: Vec<String>,
        /// View index or `all`.
        #[arg(long)]
        view: Option<String>,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
    },
    /// Evaluate a checkpoint; adds localisation scores when masks exist.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
    },
}

fn parse_arch(s: &str) -> Result<ArchKind, String> {
    s.parse().map_err(|e: mvx_core::MvError| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: mvx_core::MvError| e.to_string())
}

fn base_config(shared: &Shared) -> Result<RunConfig> {
    let mut cfg = match &shared.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = shared.seed {
        cfg.seed = s;
    }
    if let Some(o) = &shared.out {
        cfg.output_dir = Some(o.clone());
    }
    Ok(cfg)
}

/// Applies command-line overrides and returns the resolved configuration.
pub fn resolve(command: &Command) -> Result<RunConfig> {
    let mut cfg = match command {
        Command::Generate { shared } => base_config(shared)?,
        Command::Train { shared, arch, data } => {
            let mut c = base_config(shared)?;
            if let Some(a) = arch {
                c.model.arch = *a;
            }
            if let Some(d) = data {
                c.data.path = Some(d.clone());
            }
            c
        }
        Command::Explain {
            shared,
            ckpt,
            data,
            sample,
            view,
            method,
        } => {
            let mut c = base_config(shared)?;
            if let Some(p) = ckpt {
                c.explain.checkpoint = Some(p.clone());
            }
            if let Some(d) = data {
                c.data.path = Some(d.clone());
            }
            if !sample.is_empty() {
                c.explain.samples = sample.clone();
            }
            if let Some(v) = view {
                c.explain.views = ViewSelection::parse(v)?;
            }
            if let Some(m) = method {
                c.explain.method = *m;
            }
            c
        }
        Command::Eval {
            shared,
            ckpt,
            data,
            method,
        } => {
            let mut c = base_config(shared)?;
            if let Some(p) = ckpt {
                c.eval.checkpoint = Some(p.clone());
            }
            if let Some(d) = data {
                c.data.path = Some(d.clone());
            }
            if let Some(m) = method {
                c.explain.method = *m;
            }
            c
        }
    };
    cfg.resolve_seeds();
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.command)?;
    match cli.command {
        Command::Generate { .. } => cmd_generate(&cfg),
        Command::Train { .. } => cmd_train(&cfg),
        Command::Explain { .. } => cmd_explain(&cfg),
        Command::Eval { .. } => cmd_eval(&cfg),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run(Cli::try_parse_from(args)?)
}
