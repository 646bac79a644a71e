//! `l2o-ra`: dataset generation, training, evaluation, sweeps and plots.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
//! 3 sweep finished with failed points.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use l2o_core::channel::{build_dataset, load_dataset, save_dataset};
use l2o_core::experiment::{self, ResultRow, BASELINE_ARCH, BASELINE_METHOD};
use l2o_core::trainer::{self, Metrics};
use l2o_core::{report, Axis, Checkpoint, Error, GenConfig, Method, SweepConfig, TrainConfig};
use serde::de::DeserializeOwned;

const SEED_ENV: &str = "L2O_RA_SEED";

#[derive(Parser)]
#[command(name = "l2o-ra", version, about = "Constrained learning-to-optimize benchmark for QoS-aware WSR beamforming")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a screened dataset.
    Gen {
        /// Generation config (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset's training split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Training config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path; the best-epoch checkpoint and history CSV are
        /// written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Also evaluate the WMMSE baseline.
        #[arg(long)]
        with_baseline: bool,
        /// Results CSV to append to.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Axis label for the emitted rows.
        #[arg(long, default_value = "snr")]
        axis: String,
        /// Per-sample outputs and reports (JSON).
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Run a scenario sweep and plot it.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grid points run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Render SVG plots from a results CSV.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Output directory; defaults to the CSV's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure with its exit code.
struct Fail {
    code: u8,
    msg: String,
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidParam(_) | Error::Json(_) | Error::Parse { .. } => 2,
            _ => 1,
        };
        Fail { code, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Fail {
    Fail { code: 2, msg: msg.into() }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, Fail> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn seed_override() -> Result<Option<u64>, Fail> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| usage(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = stem.strip_suffix(".ckpt").unwrap_or(&stem).to_string();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn context_cache(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".hop.json");
    PathBuf::from(s)
}

fn cmd_gen(config: Option<&Path>, out: &Path) -> Result<(), Fail> {
    let mut cfg: GenConfig = match config {
        Some(p) => read_config(p)?,
        None => GenConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        cfg.master_seed = seed;
    }
    let ds = build_dataset(&cfg)?;
    save_dataset(&ds, out)?;
    println!(
        "wrote {} samples (split {}) to {}; discards {}; fingerprint {}",
        ds.samples.len(),
        ds.header.split_index,
        out.display(),
        ds.header.discards,
        ds.header.fingerprint
    );
    Ok(())
}

fn cmd_train(dataset: &Path, config: &Path, out: &Path) -> Result<(), Fail> {
    let mut cfg: TrainConfig = read_config(config)?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let ds = load_dataset(dataset)?;
    let contexts = if cfg.method == Method::Hop {
        Some(trainer::hop_contexts(&ds, &ds.samples, cfg.hop_delta, Some(&context_cache(dataset)))?)
    } else {
        None
    };
    let res = trainer::train(&ds, &cfg, contexts.as_ref())?;
    let config_json = serde_json::to_value(&cfg).map_err(Error::from)?;
    let ck = Checkpoint { arch: cfg.arch, config: config_json, seed: cfg.seed, step: res.steps, model: res.model.clone() };
    ck.save(out)?;
    let best = Checkpoint { model: res.best.clone(), step: res.best_epoch as u64, ..ck };
    best.save(&sibling(out, ".best.ckpt.json"))?;
    let hist = sibling(out, ".history.csv");
    std::fs::write(&hist, res.history.to_csv()).map_err(Error::from)?;
    if let Some(last) = res.history.epochs.last() {
        println!("epoch {}: loss {:.4} wsr {:.4} violation {:.3e}", last.epoch, last.loss, last.wsr, last.violation);
    }
    println!("checkpoint {} (best epoch {}), history {}", out.display(), res.best_epoch, hist.display());
    Ok(())
}

fn print_row(r: &ResultRow) {
    println!(
        "{:<8} {:<8} wsr {:>8.4} bps/Hz  violation_rate {:.4}  mean_worst_g {:>10.3e}  infer {:.3} ms",
        r.arch, r.method, r.mean_wsr_bps_hz, r.violation_rate, r.mean_worst_g, r.infer_ms
    );
}

fn append_rows(path: &Path, rows: &[ResultRow]) -> Result<(), Fail> {
    let mut all = if path.exists() && std::fs::metadata(path).map_err(Error::from)?.len() > 0 {
        experiment::read_results(path)?
    } else {
        Vec::new()
    };
    all.extend_from_slice(rows);
    experiment::write_results(path, &all)?;
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    with_baseline: bool,
    results: Option<&Path>,
    axis: &str,
    samples: Option<&Path>,
) -> Result<(), Fail> {
    let axis: Axis = axis.parse()?;
    let ck = Checkpoint::load(checkpoint)?;
    let cfg: TrainConfig = serde_json::from_value(ck.config.clone()).map_err(Error::from)?;
    let ds = load_dataset(dataset)?;
    let value = match axis {
        Axis::Snr => ds.header.snr_db,
        Axis::Nakagami => ds.header.m,
    };
    let contexts = if cfg.method == Method::Hop {
        Some(trainer::hop_contexts(&ds, ds.test(), cfg.hop_delta, Some(&context_cache(dataset)))?)
    } else {
        None
    };
    let m = trainer::evaluate(&ck.model, &ds, &cfg.loss_config(), contexts.as_ref())?;
    let mut rows = vec![ResultRow::from_metrics(axis, value, cfg.arch.name(), cfg.method.name(), &m, Some(ck.seed))];
    let mut dump: Vec<(&str, &Metrics)> = vec![("model", &m)];
    let base;
    if with_baseline {
        base = trainer::evaluate_baseline(&ds)?;
        rows.push(ResultRow::from_metrics(axis, value, BASELINE_ARCH, BASELINE_METHOD, &base, None));
        dump.push(("baseline", &base));
    }
    for r in &rows {
        print_row(r);
    }
    if let Some(p) = samples {
        let map: serde_json::Map<String, serde_json::Value> = dump
            .into_iter()
            .map(|(k, m)| Ok((k.to_string(), serde_json::to_value(&m.samples)?)))
            .collect::<Result<_, serde_json::Error>>()
            .map_err(Error::from)?;
        std::fs::write(p, serde_json::Value::Object(map).to_string()).map_err(Error::from)?;
    }
    if let Some(p) = results {
        append_rows(p, &rows)?;
    }
    Ok(())
}

fn write_plots(rows: &[ResultRow], dir: &Path) -> Result<(), Fail> {
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    for (name, svg) in report::render_all(rows)? {
        let p = dir.join(name);
        std::fs::write(&p, svg).map_err(Error::from)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_sweep(config: &Path, out: &Path, jobs: usize) -> Result<(), Fail> {
    let mut cfg: SweepConfig = read_config(config)?;
    if let Some(seed) = seed_override()? {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    let log = |s: &str| eprintln!("{s}");
    let outcome = experiment::run_sweep(&cfg, out, jobs, &log)?;
    if !outcome.rows.is_empty() {
        println!("wrote {}", outcome.results_path.display());
        write_plots(&outcome.rows, out)?;
    }
    if !outcome.failures.is_empty() {
        let list: Vec<String> = outcome.failures.iter().map(|(v, e)| format!("{}={v}: {e}", cfg.axis.name())).collect();
        return Err(Fail { code: 3, msg: format!("{} of {} points failed:\n{}", list.len(), cfg.grid.len(), list.join("\n")) });
    }
    Ok(())
}

fn cmd_report(results: &Path, out: Option<&Path>) -> Result<(), Fail> {
    let rows = experiment::read_results(results)?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => results.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    write_plots(&rows, &dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.cmd {
        Cmd::Gen { config, out } => cmd_gen(config.as_deref(), out),
        Cmd::Train { dataset, config, out } => cmd_train(dataset, config, out),
        Cmd::Eval { checkpoint, dataset, with_baseline, results, axis, samples } => {
            cmd_eval(checkpoint, dataset, *with_baseline, results.as_deref(), axis, samples.as_deref())
        }
        Cmd::Sweep { config, out, jobs } => cmd_sweep(config, out, *jobs),
        Cmd::Report { results, out } => cmd_report(results, out.as_deref()),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
