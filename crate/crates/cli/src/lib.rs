//! Command-line front end: config loading and the `gen-data`, `train`,
//! `eval` and `explain` commands.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dann_core::{Error, Result};

use crate::commands::{CHECKPOINT_FILE, CONFIG_FILE};
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "dann", version, about = "Few-shot domain-adversarial training on microscopy-like images")]
pub struct Cli {
    /// JSON run config; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory (for `gen-data`, the dataset root).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config override as dotted.key=value, JSON-parsed. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic source and target domains to image folders.
    GenData,
    /// Train a model and write checkpoint, metrics and resolved config.
    Train(TrainArgs),
    /// Per-domain accuracy and confusion matrices for a checkpoint.
    Eval(EvalArgs),
    /// Grad-CAM heatmaps, t-SNE coordinates or the domain probe.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub mode: Option<String>,
    /// Single target domain (dann).
    #[arg(long, conflicts_with = "targets")]
    pub target: Option<String>,
    /// Comma-separated target domains (mdann).
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Defaults to <out>/checkpoint.adsh.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated domains; defaults to the source and configured targets.
    #[arg(long, value_delimiter = ',')]
    pub domains: Option<Vec<String>>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExplainKind {
    Gradcam,
    Tsne,
    Probe,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long, value_enum)]
    pub kind: ExplainKind,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// 2 for a bad config, 1 for anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) => 2,
        _ => 1,
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn path_override(key: &str, path: &Path) -> String {
    format!("{key}={}", json_string(&path.to_string_lossy()))
}

/// Layer defaults, the config file, `--set` overrides and finally the command flags.
fn resolve_config(cli: &Cli, out: &Path, flags: Vec<String>) -> Result<RunConfig> {
    // eval and explain pick up the run's echoed config when none is given.
    let echoed = out.join(CONFIG_FILE);
    let file = match (&cli.config, &cli.command) {
        (Some(p), _) => Some(p.clone()),
        (None, Command::Eval(_) | Command::Explain(_)) if echoed.is_file() => Some(echoed),
        _ => None,
    };
    let mut overrides = cli.overrides.clone();
    overrides.extend(flags);
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    config::load(file.as_deref(), &overrides)?.resolve()
}

pub fn run(cli: Cli) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let mut flags = Vec::new();
    match &cli.command {
        Command::GenData => {}
        Command::Train(a) => {
            if let Some(m) = &a.mode {
                flags.push(format!("train.mode={}", json_string(m)));
            }
            let targets = a.target.clone().map(|t| vec![t]).or_else(|| a.targets.clone());
            if let Some(t) = targets {
                flags.push(format!("targets={}", serde_json::to_string(&t).expect("list serializes")));
            }
            if let Some(k) = a.shots {
                flags.push(format!("shots={k}"));
            }
            if let Some(e) = a.epochs {
                flags.push(format!("train.epochs={e}"));
            }
            if let Some(d) = &a.data {
                flags.push(path_override("data_root", d));
            }
        }
        Command::Eval(EvalArgs { data, .. }) | Command::Explain(ExplainArgs { data, .. }) => {
            if let Some(d) = data {
                flags.push(path_override("data_root", d));
            }
        }
    }
    let config = resolve_config(&cli, &out, flags)?;

    match &cli.command {
        Command::GenData => {
            let root = cli.out.clone().unwrap_or_else(|| config.data_root.clone());
            let manifest = commands::gen_data(&config, &root)?;
            let images: usize = manifest.entries.iter().map(|e| e.count).sum();
            println!("wrote {images} images in {} domains to {}", manifest.spec.domains.len(), root.display());
        }
        Command::Train(_) => {
            let result = commands::train(&config, &out)?;
            let best = &result.log[result.meta.epoch];
            println!(
                "best epoch {}: val_loss {:.6} val_acc {:.4}; wrote {}",
                best.epoch,
                best.val_loss,
                best.val_acc,
                out.display()
            );
        }
        Command::Eval(a) => {
            let config = config.without_augmentation();
            let checkpoint = a.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            let domains = a.domains.clone().unwrap_or_else(|| {
                let mut d = vec![config.source_domain.clone()];
                d.extend(config.targets.iter().cloned());
                d
            });
            let rows = commands::evaluate(&config, &checkpoint, &domains, &out)?;
            println!("{:<16} {:>6} {:>9}", "domain", "n", "accuracy");
            for r in rows {
                println!("{:<16} {:>6} {:>9.4}", r.domain, r.n, r.accuracy);
            }
        }
        Command::Explain(a) => {
            let config = config.without_augmentation();
            let checkpoint = a.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            match a.kind {
                ExplainKind::Gradcam => {
                    let written = commands::explain_gradcam(&config, &checkpoint, &out)?;
                    println!("wrote {} heatmaps", written.len());
                }
                ExplainKind::Tsne => {
                    let s = commands::explain_tsne(&config, &checkpoint, &out)?;
                    println!(
                        "t-SNE over {} embeddings, KL {:.4} -> {:.4}; wrote {}",
                        s.rows,
                        s.kl_initial,
                        s.kl_final,
                        s.path.display()
                    );
                }
                ExplainKind::Probe => {
                    let p = commands::explain_probe(&config, &checkpoint, &out)?;
                    println!("domain probe accuracy {:.4} (chance {:.4}, n {})", p.accuracy, p.chance, p.n);
                }
            }
        }
    }
    Ok(())
}
