//! Command-line interface: flat `key = value` configs, argument parsing,
//! run manifests, and the command implementations behind the `rsnet` binary.

pub mod commands;
pub mod kv;
pub mod manifest;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::training::LossTraceRow;

#[derive(Parser, Debug)]
#[command(
    name = "rsnet",
    version,
    about = "Relation-aware dynamic scene graph pipeline: synthetic data, training, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic video dataset
    GenData {
        /// `key = value` config file (generator defaults apply when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for video JSON files
        #[arg(long)]
        out: PathBuf,
        /// Master seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Train on a generated dataset, writing a checkpoint
    Train {
        /// Dataset directory (from gen-data)
        #[arg(long)]
        data: PathBuf,
        /// `key = value` config file (training defaults apply when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        /// Override the config's training seed
        #[arg(long)]
        seed: Option<u64>,
        /// Warm-start from an existing checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accepted for interface symmetry; training runs serially
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Evaluate a checkpoint and compare variants
    Eval {
        /// Dataset directory (from gen-data)
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path (from train)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for reports
        #[arg(long)]
        out: PathBuf,
        /// `key = value` config file (evaluation defaults apply when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Variant to evaluate (repeatable); overrides the config's list
        #[arg(long = "variant")]
        variants: Vec<String>,
        /// Mode override: sgdet or sgcls
        #[arg(long)]
        mode: Option<String>,
        /// Ranking-cutoff override, comma-separated (e.g. 10,20,50)
        #[arg(long)]
        k: Option<String>,
        /// Accepted for interface symmetry; evaluation runs serially
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Dump every candidate pair's relation score with its label
    ScoreDump {
        /// Dataset directory (from gen-data)
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path (from train)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output JSONL file
        #[arg(long)]
        out: PathBuf,
        /// Variant to score with (must include the scoring branch)
        #[arg(long, default_value = "+rsnet+fusion")]
        variant: String,
        /// Accepted for interface symmetry; scoring runs serially
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Re-execute a recorded run from its manifest
    Rerun {
        /// manifest.json from a previous run
        manifest: PathBuf,
        /// Redirect outputs to this path instead of the recorded one
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (used by gen-data reruns)
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

fn read_config(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e)),
        None => Ok(String::new()),
    }
}

fn check_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::Config("--threads must be ≥ 1".into()));
    }
    Ok(())
}

/// Mean total loss per epoch, in epoch order.
fn epoch_means(trace: &[LossTraceRow]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for row in trace {
        match out.iter_mut().find(|(e, _, _)| *e == row.epoch) {
            Some((_, sum, n)) => {
                *sum += row.total;
                *n += 1;
            }
            None => out.push((row.epoch, row.total, 1)),
        }
    }
    out.sort_by_key(|&(e, _, _)| e);
    out.into_iter().map(|(e, sum, n)| (e, sum / n as f64)).collect()
}

/// Execute a parsed command, printing a short summary on success.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed, threads } => {
            let text = read_config(config.as_deref())?;
            let manifest = commands::cmd_gen_data(&text, &out, seed, threads)?;
            let n = kv::generator_from_kv(&manifest.config_text)?.n_videos;
            println!("generated {n} videos into {}", out.display());
        }
        Command::Train { data, config, out, seed, resume, threads } => {
            check_threads(threads)?;
            let text = read_config(config.as_deref())?;
            let outcome = commands::cmd_train(&data, &text, &out, seed, resume.as_deref())?;
            let cfg = kv::train_from_kv(&outcome.manifest.config_text)?;
            println!(
                "trained {} videos for {} epochs (seed {}); checkpoint {}",
                outcome.videos,
                cfg.train.epochs,
                cfg.train.seed,
                out.display()
            );
            let means = epoch_means(&outcome.trace);
            if let (Some(first), Some(last)) = (means.first(), means.last()) {
                println!(
                    "mean total loss: epoch {} = {:.6}, epoch {} = {:.6}",
                    first.0, first.1, last.0, last.1
                );
            }
        }
        Command::Eval { data, checkpoint, out, config, variants, mode, k, threads } => {
            check_threads(threads)?;
            let mut map = kv::parse_kv(&read_config(config.as_deref())?)?;
            if let Some(mode) = mode {
                map.insert("mode".into(), mode);
            }
            if let Some(k) = k {
                map.insert("k".into(), k);
            }
            if !variants.is_empty() {
                map.insert("variants".into(), variants.join(","));
            }
            let file = kv::eval_from_map(map)?;
            let outcome = commands::cmd_eval(&data, &checkpoint, &out, &file)?;
            for (variant, report) in &outcome.reports {
                println!("variant {}", variant.name());
                println!("{}", report.table());
            }
            println!("{}", outcome.ablation.render());
            println!("reports written to {}", out.display());
        }
        Command::ScoreDump { data, checkpoint, out, variant, threads } => {
            check_threads(threads)?;
            let variant = Variant::parse(&variant)?;
            let outcome = commands::cmd_score_dump(&data, &checkpoint, &out, variant)?;
            println!(
                "dumped {} candidate-pair scores ({}) to {}",
                outcome.records,
                variant.name(),
                out.display()
            );
        }
        Command::Rerun { manifest, out, threads } => {
            let rerun = commands::cmd_rerun(&manifest, out.as_deref(), threads)?;
            let mut outputs: Vec<&String> = rerun.outputs.values().collect();
            outputs.sort();
            println!("reran {}; outputs: {}", rerun.command, {
                let joined: Vec<&str> = outputs.iter().map(|s| s.as_str()).collect();
                joined.join(", ")
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_every_subcommand() {
        use clap::Parser;
        let cli = Cli::parse_from(["rsnet", "gen-data", "--out", "d", "--seed", "7"]);
        match cli.command {
            Command::GenData { seed: 7, threads: 1, config: None, .. } => {}
            other => panic!("unexpected parse: {other:?}"),
        }
        let cli = Cli::parse_from([
            "rsnet", "eval", "--data", "d", "--checkpoint", "c", "--out", "o", "--variant",
            "baseline", "--variant", "+rsnet", "--k", "5,10",
        ]);
        match cli.command {
            Command::Eval { variants, k: Some(k), mode: None, .. } => {
                assert_eq!(variants, ["baseline", "+rsnet"]);
                assert_eq!(k, "5,10");
            }
            other => panic!("unexpected parse: {other:?}"),
        }
        let cli = Cli::parse_from(["rsnet", "rerun", "m.json", "--out", "elsewhere"]);
        match cli.command {
            Command::Rerun { out: Some(_), threads: 1, .. } => {}
            other => panic!("unexpected parse: {other:?}"),
        }
    }

    #[test]
    fn epoch_means_average_within_each_epoch() {
        let row = |epoch, video, total| LossTraceRow {
            epoch,
            video,
            l_od: 0.0,
            l_rel: 0.0,
            l_rsn: 0.0,
            total,
        };
        let means = epoch_means(&[row(0, 0, 2.0), row(0, 1, 4.0), row(1, 0, 1.0)]);
        assert_eq!(means, vec![(0, 3.0), (1, 1.0)]);
        assert!(epoch_means(&[]).is_empty());
    }
}
