//! Experiment harness: preservation-set construction, the three-mode
//! compression runs, comparisons, hyperparameter sweeps, and checkpoint
//! inspection (histograms, size reports).
//!
//! Exit codes: 0 success, 2 config error, 3 divergence.

use clap::{Parser, Subcommand};
use sdsc_core::checkpoint::{load_checkpoint, save_checkpoint};
use sdsc_core::compress::{metrics_to_csv, MetricsRecord, Mode, Trainer};
use sdsc_core::config::{load_data, RunConfig};
use sdsc_core::error::Error;
use sdsc_core::models::{Model, ModelSpec};
use sdsc_core::preserve::Provenance;
use sdsc_core::report;
use sdsc_core::tensor::Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sdsc", about = "Safety-driven self-compression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the preservation set (runs the warm-up epoch if needed) and
    /// write it as a text file.
    Preserve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train one model in the selected mode; writes checkpoint, metrics CSV,
    /// and the effective config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// baseline | unsafe | safe (overrides the config).
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run all three modes on one config and emit the comparison table.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Cartesian-product runs over the given axes; per-cell and mean rows.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Repeatable: --axis batch_size=16,32 --axis learning_rate=1e-3,1e-2
        /// Axes: batch_size, learning_rate, b0, n_layers.
        #[arg(long = "axis")]
        axes: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Histogram of quantized weight values from a checkpoint.
    Hist {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV path (default: hist.csv next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer size report for a checkpoint.
    SizeReport {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::from(0),
        Err(e) => {
            eprintln!("error: {}", e);
            let code = match &e {
                Error::Config(_) | Error::Json(_) => 2,
                Error::Diverged { .. } => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Preserve {
            config,
            seed,
            out_dir,
        } => cmd_preserve(&config, seed, out_dir),
        Command::Train {
            config,
            mode,
            seed,
            out_dir,
        } => cmd_train(&config, mode, seed, out_dir).map(|_| ()),
        Command::Compare {
            config,
            seed,
            out_dir,
        } => cmd_compare(&config, seed, out_dir),
        Command::Sweep {
            config,
            axes,
            seed,
            out_dir,
        } => cmd_sweep(&config, &axes, seed, out_dir),
        Command::Hist { checkpoint, out } => cmd_hist(&checkpoint, out),
        Command::SizeReport { checkpoint } => cmd_size_report(&checkpoint),
    }
}

fn load_config(path: &Path, mode: Option<String>, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(m) = mode {
        cfg.mode = match m.as_str() {
            "baseline" => Mode::Baseline,
            "unsafe" => Mode::Unsafe,
            "safe" => Mode::Safe,
            other => return Err(Error::Config(format!("unknown mode {}", other))),
        };
    }
    if let Some(s) = seed {
        cfg.compress.seed = s;
    }
    Ok(cfg)
}

fn resolve_out_dir(cfg: &RunConfig, flag: Option<PathBuf>, default: &str) -> PathBuf {
    flag.or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(default))
}

struct TrainOutputs {
    final_metric: f64,
    q_bits: f64,
    model_bytes: f64,
    classifier: bool,
}

/// Runs one training job and writes checkpoint + metrics + effective config.
/// Divergence still flushes everything gathered so far before the error
/// propagates with exit code 3.
fn cmd_train(
    config: &Path,
    mode: Option<String>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
) -> Result<TrainOutputs, Error> {
    let cfg = load_config(config, mode, seed)?;
    let dir = resolve_out_dir(&cfg, out_dir, "runs/train");
    run_one(&cfg, &dir, true)
}

fn run_one(cfg: &RunConfig, dir: &Path, verbose: bool) -> Result<TrainOutputs, Error> {
    std::fs::create_dir_all(dir)?;
    let (train, test) = load_data(&cfg.data, &cfg.model, cfg.compress.seed)?;
    let mut rng = Rng::new(cfg.compress.seed);
    let model = Model::build(&cfg.model, cfg.compress.b0, &mut rng)?;
    let mut trainer = Trainer::new(model, train, test, cfg.mode, cfg.compress.clone())?;

    let result = trainer.run();
    // Flush metrics regardless of divergence.
    std::fs::write(dir.join("metrics.csv"), metrics_to_csv(&trainer.metrics))?;
    let effective = cfg.effective(trainer.gamma_effective(), dir);
    std::fs::write(dir.join("effective_config.json"), effective.to_json_pretty())?;
    result?;

    save_checkpoint(
        &trainer.model,
        cfg.compress.seed,
        trainer.step_index(),
        cfg.mode,
        &dir.join("checkpoint.sdsc"),
    )?;
    if let Some(pset) = &trainer.pset {
        std::fs::write(dir.join("preservation.txt"), pset.to_text())?;
    }

    let last = trainer.metrics.last().cloned().unwrap_or(MetricsRecord {
        step: 0,
        train_loss: f32::NAN,
        l1_term: 0.0,
        size_term: 0.0,
        preservation_loss: f32::NAN,
        test_metric: f64::NAN,
        q_bits: trainer.model.average_q(),
        model_bytes: trainer.model.report_bytes(cfg.mode.quantized()),
        pruned_count: 0,
        restored_count: 0,
        wall_ms: 0,
    });
    let out = TrainOutputs {
        final_metric: last.test_metric,
        q_bits: last.q_bits,
        model_bytes: last.model_bytes,
        classifier: matches!(cfg.model, ModelSpec::Cnn(_)),
    };
    if verbose {
        let name = if out.classifier {
            "test accuracy"
        } else {
            "test loss"
        };
        println!(
            "mode={} {}={:.3} Q={:.1} bits model_bytes={:.0} ({} evals, outputs in {})",
            cfg.mode.as_str(),
            name,
            out.final_metric,
            out.q_bits,
            out.model_bytes,
            trainer.metrics.len(),
            dir.display()
        );
    }
    Ok(out)
}

fn cmd_preserve(config: &Path, seed: Option<u64>, out_dir: Option<PathBuf>) -> Result<(), Error> {
    let mut cfg = load_config(config, None, seed)?;
    let dir = resolve_out_dir(&cfg, out_dir, "runs/preserve");
    std::fs::create_dir_all(&dir)?;
    // One warm-up epoch in safe mode builds the set at the epoch boundary.
    cfg.mode = Mode::Safe;
    cfg.compress.epochs = 1;
    let (train, test) = load_data(&cfg.data, &cfg.model, cfg.compress.seed)?;
    let mut rng = Rng::new(cfg.compress.seed);
    let model = Model::build(&cfg.model, cfg.compress.b0, &mut rng)?;
    let mut trainer = Trainer::new(model, train, test, cfg.mode, cfg.compress.clone())?;
    trainer.run()?;
    let pset = trainer.pset.as_ref().expect("warm-up builds the set");
    let path = dir.join("preservation.txt");
    std::fs::write(&path, pset.to_text())?;
    println!(
        "preservation set: {} samples (saliency {}, uncertainty {}, diversity {}) -> {}",
        pset.len(),
        pset.count(Provenance::Saliency),
        pset.count(Provenance::Uncertainty),
        pset.count(Provenance::Diversity),
        path.display()
    );
    Ok(())
}

fn cmd_compare(config: &Path, seed: Option<u64>, out_dir: Option<PathBuf>) -> Result<(), Error> {
    let cfg = load_config(config, None, seed)?;
    let dir = resolve_out_dir(&cfg, out_dir, "runs/compare");
    std::fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    let mut baseline_bytes = None;
    let mut classifier = true;
    for mode in [Mode::Baseline, Mode::Unsafe, Mode::Safe] {
        let mut mcfg = cfg.clone();
        mcfg.mode = mode;
        let sub = dir.join(mode.as_str());
        let out = run_one(&mcfg, &sub, true)?;
        classifier = out.classifier;
        if mode == Mode::Baseline {
            baseline_bytes = Some(out.model_bytes);
        }
        rows.push(report::CompareRow {
            mode,
            test_metric: out.final_metric,
            model_bytes: out.model_bytes,
            bytes_ratio: out.model_bytes / baseline_bytes.unwrap_or(out.model_bytes),
        });
    }
    let table = report::compare_table(&rows, classifier);
    print!("\n{}", table);
    std::fs::write(dir.join("compare.txt"), &table)?;
    std::fs::write(dir.join("compare.csv"), report::compare_csv(&rows))?;
    Ok(())
}

// ── Sweep ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct SweepCell {
    index: usize,
    batch_size: Option<usize>,
    learning_rate: Option<f32>,
    b0: Option<f32>,
    n_layers: Option<usize>,
}

fn parse_axes(axes: &[String]) -> Result<Vec<(String, Vec<String>)>, Error> {
    let mut out = Vec::new();
    for a in axes {
        let (key, vals) = a.split_once('=').ok_or_else(|| {
            Error::Config(format!("axis must look like key=v1,v2 (got {})", a))
        })?;
        if !["batch_size", "learning_rate", "b0", "n_layers"].contains(&key) {
            return Err(Error::Config(format!(
                "unknown sweep axis {} (allowed: batch_size, learning_rate, b0, n_layers)",
                key
            )));
        }
        let vals: Vec<String> = vals.split(',').map(|s| s.trim().to_string()).collect();
        if vals.is_empty() {
            return Err(Error::Config(format!("axis {} has no values", key)));
        }
        out.push((key.to_string(), vals));
    }
    Ok(out)
}

fn build_cells(axes: &[(String, Vec<String>)]) -> Result<Vec<SweepCell>, Error> {
    let mut cells = vec![SweepCell {
        index: 0,
        batch_size: None,
        learning_rate: None,
        b0: None,
        n_layers: None,
    }];
    for (key, vals) in axes {
        let mut next = Vec::new();
        for cell in &cells {
            for v in vals {
                let mut c = cell.clone();
                match key.as_str() {
                    "batch_size" => {
                        c.batch_size = Some(v.parse().map_err(|_| {
                            Error::Config(format!("bad batch_size value {}", v))
                        })?)
                    }
                    "learning_rate" => {
                        c.learning_rate = Some(v.parse().map_err(|_| {
                            Error::Config(format!("bad learning_rate value {}", v))
                        })?)
                    }
                    "b0" => {
                        c.b0 = Some(
                            v.parse()
                                .map_err(|_| Error::Config(format!("bad b0 value {}", v)))?,
                        )
                    }
                    "n_layers" => {
                        c.n_layers = Some(
                            v.parse()
                                .map_err(|_| Error::Config(format!("bad n_layers value {}", v)))?,
                        )
                    }
                    _ => unreachable!(),
                }
                next.push(c);
            }
        }
        cells = next;
    }
    for (i, c) in cells.iter_mut().enumerate() {
        c.index = i;
    }
    Ok(cells)
}

fn cell_config(base: &RunConfig, cell: &SweepCell) -> Result<RunConfig, Error> {
    let mut cfg = base.clone();
    if let Some(b) = cell.batch_size {
        cfg.compress.batch_size = b;
    }
    if let Some(lr) = cell.learning_rate {
        cfg.compress.learning_rate = lr;
    }
    if let Some(b0) = cell.b0 {
        cfg.compress.b0 = b0;
    }
    if let Some(n) = cell.n_layers {
        match &mut cfg.model {
            ModelSpec::Cnn(s) => {
                if n == 0 {
                    return Err(Error::Config("n_layers must be >= 1".into()));
                }
                let last = *s.channels.last().unwrap();
                s.channels.resize(n, last);
                s.validate()
                    .map_err(|e| Error::Config(format!("n_layers={}: {}", n, e)))?;
            }
            ModelSpec::Decoder(s) => {
                s.n_blocks = n.max(1);
            }
        }
    }
    // seed = base seed + cell index, so cells are independent and reproducible
    cfg.compress.seed = base.compress.seed + cell.index as u64;
    Ok(cfg)
}

const SWEEP_HEADER: &str =
    "cell,batch_size,learning_rate,b0,n_layers,seed,test_metric,q_bits,model_bytes";

fn cmd_sweep(
    config: &Path,
    axes: &[String],
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
) -> Result<(), Error> {
    let base = load_config(config, None, seed)?;
    let dir = resolve_out_dir(&base, out_dir, "runs/sweep");
    std::fs::create_dir_all(&dir)?;
    let axes = parse_axes(axes)?;
    let cells = build_cells(&axes)?;

    let threads: usize = std::env::var("SDSC_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
        .max(1);

    let configs: Vec<(usize, RunConfig)> = cells
        .iter()
        .map(|c| Ok((c.index, cell_config(&base, c)?)))
        .collect::<Result<_, Error>>()?;

    let mut results: Vec<Option<TrainOutputs>> = Vec::new();
    results.resize_with(cells.len(), || None);
    let dir_ref = &dir;
    std::thread::scope(|scope| -> Result<(), Error> {
        let mut handles = Vec::new();
        for chunk in configs.chunks(configs.len().div_ceil(threads)) {
            let chunk = chunk.to_vec();
            handles.push(scope.spawn(move || -> Result<Vec<(usize, TrainOutputs)>, Error> {
                let mut out = Vec::new();
                for (idx, cfg) in chunk {
                    let sub = dir_ref.join(format!("cell{:03}", idx));
                    let r = run_one(&cfg, &sub, false)?;
                    out.push((idx, r));
                }
                Ok(out)
            }));
        }
        for h in handles {
            for (idx, r) in h.join().expect("sweep worker panicked")? {
                results[idx] = Some(r);
            }
        }
        Ok(())
    })?;

    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    let mut sums = (0.0f64, 0.0f64, 0.0f64);
    for (cell, cfg) in cells.iter().zip(configs.iter().map(|(_, c)| c)) {
        let r = results[cell.index].as_ref().unwrap();
        let n_layers = match &cfg.model {
            ModelSpec::Cnn(s) => s.channels.len(),
            ModelSpec::Decoder(s) => s.n_blocks,
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            cell.index,
            cfg.compress.batch_size,
            cfg.compress.learning_rate,
            cfg.compress.b0,
            n_layers,
            cfg.compress.seed,
            r.final_metric,
            r.q_bits,
            r.model_bytes
        ));
        sums.0 += r.final_metric;
        sums.1 += r.q_bits;
        sums.2 += r.model_bytes;
    }
    let n = cells.len() as f64;
    csv.push_str(&format!(
        "mean,,,,,,{},{},{}\n",
        sums.0 / n,
        sums.1 / n,
        sums.2 / n
    ));
    std::fs::write(dir.join("sweep.csv"), &csv)?;
    println!("{} cells -> {}", cells.len(), dir.join("sweep.csv").display());
    Ok(())
}

fn cmd_hist(checkpoint: &Path, out: Option<PathBuf>) -> Result<(), Error> {
    let loaded = load_checkpoint(checkpoint)?;
    let values = loaded.model.quantized_weight_values();
    let rows = report::weight_histogram(&values);
    let csv = report::histogram_csv(&rows);
    let out = out.unwrap_or_else(|| {
        checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("hist.csv")
    });
    std::fs::write(&out, csv)?;
    println!(
        "{} quantized weights -> {} bins -> {}",
        values.len(),
        rows.len(),
        out.display()
    );
    Ok(())
}

fn cmd_size_report(checkpoint: &Path) -> Result<(), Error> {
    let loaded = load_checkpoint(checkpoint)?;
    print!(
        "{}",
        report::size_report(&loaded.model, loaded.mode.quantized())
    );
    Ok(())
}
