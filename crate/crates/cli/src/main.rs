//! `chartloc` command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data or config error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use chartloc::config::{load_config, BaselineConfig, EvaluateConfig, ExperimentSpec, SimulateConfig};
use chartloc::eval::{evaluate, TrajectoryEstimate};
use chartloc::experiment::{rerun_cell, run_experiment};
use chartloc::io::{self, DatasetFile, FileDigest, FrameFile, Manifest};
use chartloc::nlos::{build_masks, MaskPolicy};
use chartloc::pipeline::{preprocess_dataset, Mode, PipelineConfig};
use chartloc::pso::solve_trajectory;
use chartloc::trainer::{predict_frames, smooth, train, TrainConfig, TrainMode, TrainingDataset};
use chartloc::{EmbeddingModel, Error, Result};

#[derive(Parser)]
#[command(name = "chartloc", version, about = "TDoA channel charting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set r_los=0.5` or `--set scenario.noise_floor_db=-20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PreprocessMode {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigKind {
    Simulate,
    Preprocess,
    Train,
    Baseline,
    Evaluate,
    Experiment,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write a CIR dataset.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a dataset into normalized, truncated training frames.
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        mode: PreprocessMode,
        /// Normalization constant from the training set (required in test mode).
        #[arg(long)]
        alpha_norm: Option<f64>,
    },
    /// Train the embedding network.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed frames with a trained model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame PSO TDoA positioning.
    Baseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trajectory CSV against ground truth.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        estimate: PathBuf,
        /// Dataset whose truth section is the reference.
        #[arg(long, conflicts_with = "truth", required_unless_present = "truth")]
        dataset: Option<PathBuf>,
        /// Trajectory CSV with the true positions, row-aligned with the estimate.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the error CDF here.
        #[arg(long)]
        cdf: Option<PathBuf>,
    },
    /// Run a grid of experiment cells.
    Experiment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run one experiment cell from its manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default config of a command as JSON.
    Config {
        #[arg(value_enum)]
        kind: ConfigKind,
    },
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn digests(paths: &[&Path]) -> Result<Vec<FileDigest>> {
    paths.iter().map(|p| FileDigest::of(p)).collect()
}

fn load<T: Serialize + serde::de::DeserializeOwned + Default>(cfg: &ConfigArgs) -> Result<(T, Value)> {
    load_config(cfg.config.as_deref(), &cfg.overrides)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn simulate(cfg: &ConfigArgs, out: &Path) -> Result<()> {
    let (config, value): (SimulateConfig, _) = load(cfg)?;
    let sim = config.run()?;
    let file = DatasetFile {
        scenario: config.scenario.clone(),
        truth: Some(sim.trajectory.positions.clone()),
        dataset: sim.dataset,
        displacements: sim.displacements,
    };
    io::write_dataset(out, &file)?;
    let mut manifest = Manifest::new("simulate", value);
    manifest.seeds = vec![("simulate".into(), config.seed)];
    manifest.outputs = digests(&[out])?;
    manifest.write(&manifest_path(out))?;
    let los = file.dataset.los_labels.iter().filter(|&&b| b).count() as f64 / file.dataset.los_labels.len().max(1) as f64;
    println!(
        "wrote {} frames x {} TRPs to {} (LoS fraction {los:.3}, {} displacement pairs)",
        file.dataset.len(),
        file.scenario.num_trps(),
        out.display(),
        file.displacements.as_ref().map_or(0, |d| d.pairs.len())
    );
    Ok(())
}

fn preprocess(cfg: &ConfigArgs, dataset: &Path, out: &Path, mode: PreprocessMode, alpha: Option<f64>) -> Result<()> {
    let (config, value): (PipelineConfig, _) = load(cfg)?;
    let mode = match (mode, alpha) {
        (PreprocessMode::Train, None) => Mode::Train,
        (PreprocessMode::Train, Some(_)) => {
            return Err(Error::Config("--alpha-norm is only accepted in test mode".into()));
        }
        (PreprocessMode::Test, Some(alpha_norm)) => Mode::Test { alpha_norm },
        (PreprocessMode::Test, None) => {
            return Err(Error::Config(
                "test-mode preprocessing needs --alpha-norm from the training set".into(),
            ));
        }
    };
    let file = io::read_dataset(dataset)?;
    let pre = preprocess_dataset(&file.dataset, &file.scenario, &config, mode)?;
    io::write_frames(out, &FrameFile { alpha_norm: pre.alpha_norm, frames: pre.frames.clone() })?;
    let report_path = out.with_extension("report.json");
    io::write_json(&report_path, &pre.report)?;
    let mut manifest = Manifest::new("preprocess", value);
    manifest.alpha_norm = Some(pre.alpha_norm);
    manifest.inputs = digests(&[dataset])?;
    manifest.outputs = digests(&[out, &report_path])?;
    manifest.write(&manifest_path(out))?;
    println!(
        "kept {} of {} frames, alpha_norm {:.6e}, {} truncation violations",
        pre.frames.len(),
        file.dataset.len(),
        pre.alpha_norm,
        pre.report.truncation_violations.len()
    );
    Ok(())
}

fn train_cmd(cfg: &ConfigArgs, dataset: &Path, frames: &Path, out: &Path) -> Result<()> {
    let (config, value): (TrainConfig, _) = load(cfg)?;
    let data = io::read_dataset(dataset)?;
    let ff = io::read_frames(frames)?;
    let set = TrainingDataset::from_frames(
        ff.frames,
        &data.scenario,
        config.mask,
        Some(&data.dataset.los_labels),
        data.displacements,
    )?;
    let outcome = train::<f32>(&set, &config)?;
    io::write_model(out, &outcome.model)?;
    let history_path = out.with_extension("history.csv");
    io::write_history_csv(&history_path, &outcome.history)?;
    let mut manifest = Manifest::new("train", value);
    manifest.seeds = vec![("train".into(), config.rng_seed)];
    manifest.alpha_norm = Some(ff.alpha_norm);
    manifest.lambda = match config.mask {
        MaskPolicy::Threshold(l) => Some(l),
        _ => None,
    };
    manifest.beta = (config.mode == TrainMode::TdoaPlusDisplacement).then_some(config.beta);
    manifest.inputs = digests(&[dataset, frames])?;
    manifest.outputs = digests(&[out, &history_path])?;
    manifest.write(&manifest_path(out))?;
    let (first, last) = (outcome.history[0], outcome.history[outcome.history.len() - 1]);
    println!("trained {} epochs, loss {:.4} -> {:.4} m", last.epoch, first.total, last.total);
    Ok(())
}

fn predict_cmd(model_path: &Path, frames: &Path, out: &Path) -> Result<()> {
    let model: EmbeddingModel = io::read_model(model_path)?;
    let ff = io::read_frames(frames)?;
    let estimate = predict_frames(&model, &ff.frames)?;
    io::write_trajectory_csv(out, &estimate)?;
    let mut manifest = Manifest::new("predict", Value::Null);
    manifest.alpha_norm = Some(ff.alpha_norm);
    manifest.inputs = digests(&[model_path, frames])?;
    manifest.outputs = digests(&[out])?;
    manifest.write(&manifest_path(out))?;
    println!("embedded {} frames", estimate.len());
    Ok(())
}

fn baseline(cfg: &ConfigArgs, dataset: &Path, frames: &Path, out: &Path) -> Result<()> {
    let (config, value): (BaselineConfig, _) = load(cfg)?;
    let data = io::read_dataset(dataset)?;
    let ff = io::read_frames(frames)?;
    let layout = data.scenario.tdoa_layout();
    let masks = build_masks(&ff.frames, config.mask, &layout, Some(&data.dataset.los_labels))?;
    let estimate = solve_trajectory(&ff.frames, &masks, &data.scenario, &config.pso)?;
    io::write_trajectory_csv(out, &estimate)?;
    let mut manifest = Manifest::new("baseline", value);
    manifest.seeds = vec![("pso".into(), config.pso.rng_seed)];
    manifest.alpha_norm = Some(ff.alpha_norm);
    if let MaskPolicy::Threshold(l) = config.mask {
        manifest.lambda = Some(l);
    }
    manifest.inputs = digests(&[dataset, frames])?;
    manifest.outputs = digests(&[out])?;
    manifest.write(&manifest_path(out))?;
    println!("solved {} frames, {} gaps", estimate.len(), estimate.gaps());
    Ok(())
}

fn evaluate_cmd(
    cfg: &ConfigArgs,
    estimate_path: &Path,
    dataset: Option<&Path>,
    truth_path: Option<&Path>,
    out: &Path,
    cdf: Option<&Path>,
) -> Result<()> {
    let (config, value): (EvaluateConfig, _) = load(cfg)?;
    let (ts, ps) = io::read_trajectory_csv(estimate_path)?;
    let (estimate, truth, input): (TrajectoryEstimate, Vec<_>, &Path) = match (dataset, truth_path) {
        (Some(d), _) => {
            let file = io::read_dataset(d)?;
            let truth = file
                .truth
                .ok_or_else(|| Error::InvalidInput(format!("{} has no truth section", d.display())))?;
            (io::match_timestamps(ts, ps, &file.dataset.timestamps)?, truth, d)
        }
        (None, Some(t)) => {
            let (tt, tp) = io::read_trajectory_csv(t)?;
            if tt.len() != ts.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} truth rows", ts.len()),
                    got: format!("{}", tt.len()),
                });
            }
            if tt.iter().zip(&ts).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(Error::InvalidInput("estimate and truth timestamps differ".into()));
            }
            let truth = tp
                .into_iter()
                .enumerate()
                .map(|(i, p)| p.ok_or_else(|| Error::InvalidInput(format!("truth row {} is a gap", i + 1))))
                .collect::<Result<Vec<_>>>()?;
            let n = ts.len();
            (TrajectoryEstimate { timestamps: ts, source_index: (0..n).collect(), positions: ps }, truth, t)
        }
        (None, None) => return Err(Error::Config("evaluate needs --dataset or --truth".into())),
    };
    let estimate = match config.smoothing_window {
        Some(w) => smooth(&estimate, w)?,
        None => estimate,
    };
    let report = evaluate(&estimate, &truth, &config.eval)?;
    io::write_json(out, &report)?;
    let mut outputs = vec![out];
    if let Some(c) = cdf {
        io::write_cdf_csv(c, &report.cdf)?;
        outputs.push(c);
    }
    let mut manifest = Manifest::new("evaluate", value);
    manifest.inputs = digests(&[estimate_path, input])?;
    manifest.outputs = digests(&outputs)?;
    manifest.write(&manifest_path(out))?;
    println!(
        "CE90 {:.3} m, MAE {:.3} m, CT {:.4}, TW {:.4}, KS {:.4} over {} frames",
        report.ce90_m, report.mae_m, report.ct, report.tw, report.ks, report.frames
    );
    Ok(())
}

fn experiment(cfg: &ConfigArgs, out: &Path) -> Result<()> {
    let (spec, _): (ExperimentSpec, _) = load(cfg)?;
    // run_experiment writes the top-level manifest itself
    let report = run_experiment(&spec, out)?;
    let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
    println!("{} cells, {failed} failed", report.cells.len());
    for r in report.table.iter().chain(&report.baselines) {
        println!(
            "r_los {:>5} {:<17} CE90 {:7.3} m  smoothed {:>7}  CT {:.4}  TW {:.4}  KS {:.4}",
            r.r_los,
            r.method.name(),
            r.ce90_m,
            r.smoothed_ce90_m.map_or("-".into(), |v| format!("{v:.3}")),
            r.ct,
            r.tw,
            r.ks
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { cfg, out } => simulate(&cfg, &out),
        Command::Preprocess { cfg, dataset, out, mode, alpha_norm } => preprocess(&cfg, &dataset, &out, mode, alpha_norm),
        Command::Train { cfg, dataset, frames, out } => train_cmd(&cfg, &dataset, &frames, &out),
        Command::Predict { model, frames, out } => predict_cmd(&model, &frames, &out),
        Command::Baseline { cfg, dataset, frames, out } => baseline(&cfg, &dataset, &frames, &out),
        Command::Evaluate { cfg, estimate, dataset, truth, out, cdf } => {
            evaluate_cmd(&cfg, &estimate, dataset.as_deref(), truth.as_deref(), &out, cdf.as_deref())
        }
        Command::Experiment { cfg, out } => experiment(&cfg, &out),
        Command::Rerun { manifest, out } => {
            let m = rerun_cell(&manifest, &out)?;
            println!("CE90 {:.3} m, MAE {:.3} m", m.raw.ce90_m, m.raw.mae_m);
            Ok(())
        }
        Command::Config { kind } => match kind {
            ConfigKind::Simulate => print_json(&SimulateConfig::default()),
            ConfigKind::Preprocess => print_json(&PipelineConfig::default()),
            ConfigKind::Train => print_json(&TrainConfig::default()),
            ConfigKind::Baseline => print_json(&BaselineConfig::default()),
            ConfigKind::Evaluate => print_json(&EvaluateConfig::default()),
            ConfigKind::Experiment => print_json(&ExperimentSpec::default()),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
