use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use blurret::config::Config;
use blurret::dataset::{build_dataset, DatasetManifest, Split};
use blurret::model::Checkpoint;
use blurret::retrieval::{evaluate, evaluate_with_matrix, ApNorm, Cutoff, DescriptorStore};
use blurret::train::{embed_split, train};
use blurret::{Error, Result};

#[derive(Parser)]
#[command(name = "blurret", version, about = "Blur-robust instance retrieval toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (images + manifest.jsonl).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the manifest's training split.
    Train {
        /// Dataset directory or manifest file.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write descriptors of one manifest split.
    Embed {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val, test-query, test-database or distractor
        #[arg(long)]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate query descriptors against a database; prints the JSON report.
    Eval {
        #[arg(long)]
        queries: PathBuf,
        /// Database descriptor files; several are concatenated (e.g. with distractors).
        #[arg(long, num_args = 1.., required = true)]
        database: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `all` or a rank cutoff such as `100`.
        #[arg(long)]
        cutoff: Option<String>,
        #[arg(long)]
        per_bl_matrix: bool,
        /// Divide truncated AP by the number of positives instead of min(positives, cutoff).
        #[arg(long)]
        plain_ap_denominator: bool,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Blur-level histogram per split.
    BlurStats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    path.map_or_else(|| Ok(Config::default()), Config::load)
}

fn write_json(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(path) = out {
        std::fs::write(path, &text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    emit(&format!("{text}\n"))
}

/// Writes to stdout; a closed pipe (`blurret blur-stats | head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn concat_stores(paths: &[PathBuf]) -> Result<DescriptorStore> {
    let mut stores = paths.iter().map(|p| DescriptorStore::read(p));
    let mut out = stores.next().ok_or(Error::EmptyIndex)??;
    for s in stores {
        let s = s?;
        for i in 0..s.len() {
            out.push(s.ids()[i], s.object_ids()[i], s.bls()[i], &s.vector(i))?;
        }
    }
    Ok(out)
}

fn blur_stats(manifest: &DatasetManifest, json: bool) -> Result<()> {
    let hist = manifest.blur_histogram();
    let max_bl = hist.values().flat_map(|h| h.keys()).copied().max().unwrap_or(1).max(6);
    if json {
        let splits: serde_json::Map<String, serde_json::Value> = hist
            .iter()
            .map(|(s, h)| {
                let levels: serde_json::Map<String, serde_json::Value> =
                    h.iter().map(|(b, n)| (b.to_string(), (*n).into())).collect();
                (s.to_string(), levels.into())
            })
            .collect();
        return write_json(
            &serde_json::json!({"total": manifest.records.len(), "splits": splits}),
            None,
        );
    }
    let mut t = format!("{:<14}", "split");
    for b in 1..=max_bl {
        t += &format!("{:>7}", format!("BL{b}"));
    }
    t += &format!("{:>8}\n", "total");
    for (split, h) in &hist {
        t += &format!("{:<14}", split.as_str());
        for b in 1..=max_bl {
            t += &format!("{:>7}", h.get(&b).copied().unwrap_or(0));
        }
        t += &format!("{:>8}\n", h.values().sum::<usize>());
    }
    t += &format!("{:<14}{:>width$}\n", "all", manifest.records.len(), width = 7 * max_bl as usize + 8);
    emit(&t)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let cfg = load_config(config.as_deref())?;
            let manifest = build_dataset(&cfg.dataset, seed, &out)?;
            eprintln!("wrote {} records to {}", manifest.records.len(), out.display());
        }
        Command::Train {
            manifest,
            config,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let manifest = DatasetManifest::load(&manifest)?;
            let outcome = train(&manifest, &cfg.train, seed, &out)?;
            if let Some(last) = outcome.log.last() {
                eprintln!("trained {} steps, final L_joint {:.6}", outcome.log.len(), last.joint);
            }
        }
        Command::Embed {
            manifest,
            checkpoint,
            split,
            out,
        } => {
            let split: Split = split.parse()?;
            let manifest = DatasetManifest::load(&manifest)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let store = embed_split(&ck.model, &manifest, split)?;
            store.write(&out)?;
            eprintln!("wrote {} descriptors to {}", store.len(), out.display());
        }
        Command::Eval {
            queries,
            database,
            config,
            cutoff,
            per_bl_matrix,
            plain_ap_denominator,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let cutoff: Cutoff = match cutoff {
                Some(c) => c.parse()?,
                None => cfg.eval.cutoff()?,
            };
            let norm = if plain_ap_denominator {
                ApNorm::Positives
            } else {
                ApNorm::Truncated
            };
            let q = DescriptorStore::read(&queries)?;
            let db = concat_stores(&database)?;
            let report = if per_bl_matrix || cfg.eval.per_bl_matrix {
                let (report, matrix) = evaluate_with_matrix(&q, &db, cutoff, norm)?;
                for (d, qb) in matrix.absent() {
                    eprintln!("warning: matrix cell (D={d}, Q={qb}) has no data, excluded from range/std");
                }
                report
            } else {
                evaluate(&q, &db, cutoff, norm)?
            };
            if report.skipped_queries > 0 {
                eprintln!("warning: {} queries have no database positive and were skipped", report.skipped_queries);
            }
            write_json(&serde_json::to_value(&report)?, out.as_deref())?;
        }
        Command::BlurStats { manifest, json } => {
            blur_stats(&DatasetManifest::load(&manifest)?, json)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let doc = serde_json::json!({"error": "usage", "message": e.to_string().trim_end()});
            eprintln!("{doc}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let doc = serde_json::json!({"error": e.kind(), "message": e.to_string()});
            eprintln!("{doc}");
            ExitCode::from(2)
        }
    }
}
