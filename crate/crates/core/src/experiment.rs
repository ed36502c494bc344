//! Experiment runner: a grid of (method, LoS ratio, mask threshold, seed)
//! cells, each simulated, trained or solved, scored, and written to its own
//! directory with a manifest that suffices to re-run it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentSpec, Method, SimulateConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, MetricsReport, TrajectoryEstimate};
use crate::geometry::Point2;
use crate::io::{self, FileDigest, Manifest};
use crate::nlos::{build_masks, mask_accuracy, MaskPolicy};
use crate::pipeline::{preprocess_dataset, Mode, PipelineConfig, Preprocessed};
use crate::pso::{solve_trajectory, PsoParams};
use crate::scenario::{DisplacementSet, Scenario};
use crate::trainer::{predict_frames, smooth, train, LossRecord, TrainConfig, TrainMode, TrainingDataset};

/// Everything needed to reproduce one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub method: Method,
    pub seed: u64,
    pub lambda: Option<f64>,
    pub simulate: SimulateConfig,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub pso: PsoParams,
    pub eval: EvalConfig,
    pub smoothing_window: Option<usize>,
}

impl CellConfig {
    /// Directory name, unique within an experiment.
    pub fn id(&self) -> String {
        let lambda = self.lambda.map_or("none".to_string(), |l| format!("{l}"));
        format!("{}_r{}_l{}_s{}", self.method.name(), self.simulate.r_los, lambda, self.seed)
    }

    fn mask_policy(&self) -> MaskPolicy {
        match self.lambda {
            Some(l) => MaskPolicy::Threshold(l),
            None => MaskPolicy::None,
        }
    }
}

/// Cells of a spec in a fixed order: ratio, seed, lambda, method.
/// Methods that ignore the mask threshold appear once per (ratio, seed).
pub fn cell_configs(spec: &ExperimentSpec) -> Vec<CellConfig> {
    let mut cells = Vec::new();
    for &r_los in &spec.r_los {
        for &seed in &spec.seeds {
            let simulate = SimulateConfig { r_los, seed, ..spec.simulate.clone() };
            let lambdas: Vec<Option<f64>> = spec.lambdas.iter().map(|&l| Some(l)).collect();
            for &method in &spec.methods {
                let options = if method.uses_lambda() { lambdas.clone() } else { vec![None] };
                for lambda in options {
                    let mut train = spec.train.clone();
                    train.rng_seed = seed;
                    train.beta = spec.beta;
                    train.mode = match method {
                        Method::CcTdoaDisp => TrainMode::TdoaPlusDisplacement,
                        _ => TrainMode::TdoaOnly,
                    };
                    train.mask = lambda.map_or(MaskPolicy::None, MaskPolicy::Threshold);
                    cells.push(CellConfig {
                        method,
                        seed,
                        lambda,
                        simulate: simulate.clone(),
                        pipeline: spec.pipeline.clone(),
                        train,
                        pso: PsoParams { rng_seed: seed, ..spec.pso.clone() },
                        eval: spec.eval.clone(),
                        smoothing_window: if method.is_chart() { spec.smoothing_window } else { None },
                    });
                }
            }
        }
    }
    cells
}

/// Simulated and preprocessed data shared by all cells with the same
/// simulation config.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub scenario: Scenario,
    pub truth: Vec<Point2>,
    pub los_labels: Array2<bool>,
    pub displacements: Option<DisplacementSet>,
    pub preprocessed: Preprocessed,
}

pub fn prepare(simulate: &SimulateConfig, pipeline: &PipelineConfig) -> Result<PreparedData> {
    let sim = simulate.run()?;
    let preprocessed = preprocess_dataset(&sim.dataset, &simulate.scenario, pipeline, Mode::Train)?;
    Ok(PreparedData {
        scenario: simulate.scenario.clone(),
        truth: sim.trajectory.positions,
        los_labels: sim.dataset.los_labels,
        displacements: sim.displacements,
        preprocessed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub method: Method,
    pub r_los: f64,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub alpha_norm: f64,
    /// Agreement of the per-TRP LoS indicators with the labels (masked methods).
    pub mask_accuracy: Option<f64>,
    pub raw: MetricsReport,
    pub smoothed: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub metrics: CellMetrics,
    pub estimate: TrajectoryEstimate,
    pub history: Option<Vec<LossRecord>>,
}

pub fn run_cell(cell: &CellConfig, data: &PreparedData) -> Result<CellResult> {
    let frames = &data.preprocessed.frames;
    let layout = data.scenario.tdoa_layout();
    let policy = cell.mask_policy();
    let masks = build_masks(frames, policy, &layout, Some(&data.los_labels))?;
    let accuracy = cell.lambda.map(|_| mask_accuracy(frames, &masks, &data.los_labels));
    let (estimate, history) = if cell.method.is_chart() {
        let set = TrainingDataset::new(frames.clone(), masks, &data.scenario, data.displacements.clone())?;
        let outcome = train::<f32>(&set, &cell.train)?;
        (predict_frames(&outcome.model, frames)?, Some(outcome.history))
    } else {
        (solve_trajectory(frames, &masks, &data.scenario, &cell.pso)?, None)
    };
    let raw = evaluate(&estimate, &data.truth, &cell.eval)?;
    let smoothed = cell
        .smoothing_window
        .map(|w| evaluate(&smooth(&estimate, w)?, &data.truth, &cell.eval))
        .transpose()?;
    Ok(CellResult {
        metrics: CellMetrics {
            method: cell.method,
            r_los: cell.simulate.r_los,
            lambda: cell.lambda,
            seed: cell.seed,
            alpha_norm: data.preprocessed.alpha_norm,
            mask_accuracy: accuracy,
            raw,
            smoothed,
        },
        estimate,
        history,
    })
}

fn cell_manifest(cell: &CellConfig) -> Result<Manifest> {
    let mut manifest = Manifest::new("experiment-cell", serde_json::to_value(cell)?);
    manifest.seeds = vec![("simulate".into(), cell.simulate.seed), ("train".into(), cell.train.rng_seed), ("pso".into(), cell.pso.rng_seed)];
    manifest.lambda = cell.lambda;
    manifest.beta = (cell.method == Method::CcTdoaDisp).then_some(cell.train.beta);
    Ok(manifest)
}

/// Writes a cell's artifacts and manifest into `dir`.
pub fn write_cell(dir: &Path, cell: &CellConfig, result: &CellResult) -> Result<()> {
    let metrics_path = dir.join("metrics.json");
    let cdf_path = dir.join("cdf.csv");
    let traj_path = dir.join("trajectory.csv");
    io::write_json(&metrics_path, &result.metrics)?;
    io::write_cdf_csv(&cdf_path, &result.metrics.raw.cdf)?;
    io::write_trajectory_csv(&traj_path, &result.estimate)?;
    let mut outputs = vec![metrics_path, cdf_path, traj_path];
    if let Some(h) = &result.history {
        let p = dir.join("history.csv");
        io::write_history_csv(&p, h)?;
        outputs.push(p);
    }
    let mut manifest = cell_manifest(cell)?;
    manifest.alpha_norm = Some(result.metrics.alpha_norm);
    manifest.outputs = outputs
        .iter()
        .map(|p| Ok(FileDigest { path: p.file_name().unwrap().into(), sha256: io::sha256_file(p)? }))
        .collect::<Result<_>>()?;
    manifest.write(&dir.join("manifest.json"))
}

/// Re-runs a cell from its manifest alone, writing the artifacts to `out_dir`.
pub fn rerun_cell(manifest_path: &Path, out_dir: &Path) -> Result<CellMetrics> {
    let manifest = Manifest::read(manifest_path)?;
    let cell: CellConfig = serde_json::from_value(manifest.config).map_err(|e| Error::Config(e.to_string()))?;
    let data = prepare(&cell.simulate, &cell.pipeline)?;
    let result = run_cell(&cell, &data)?;
    write_cell(out_dir, &cell, &result)?;
    Ok(result.metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub id: String,
    pub method: Method,
    pub r_los: f64,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub error: Option<String>,
}

/// Mean metrics over the seeds of one (ratio, lambda, method) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub r_los: f64,
    pub lambda: Option<f64>,
    pub method: Method,
    pub runs: usize,
    pub ct: f64,
    pub tw: f64,
    pub ks: f64,
    pub ce90_m: f64,
    pub mae_m: f64,
    pub smoothed_ce90_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cells: Vec<CellStatus>,
    /// Chart TDoA vs TDoA+displacement, two rows per (ratio, lambda).
    pub table: Vec<AggregateRow>,
    /// Remaining methods.
    pub baselines: Vec<AggregateRow>,
    #[serde(skip)]
    pub metrics: Vec<Option<CellMetrics>>,
}

impl ExperimentReport {
    /// Metrics of successful cells matching a predicate.
    pub fn select(&self, keep: impl Fn(&CellMetrics) -> bool) -> Vec<&CellMetrics> {
        self.metrics.iter().flatten().filter(|m| keep(m)).collect()
    }
}

fn aggregate(metrics: &[&CellMetrics]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(usize, usize, Method), Vec<&CellMetrics>> = BTreeMap::new();
    let mut ratio_order: Vec<u64> = Vec::new();
    let mut lambda_order: Vec<Option<u64>> = Vec::new();
    for m in metrics {
        let r = m.r_los.to_bits();
        let l = m.lambda.map(f64::to_bits);
        let ri = ratio_order.iter().position(|&x| x == r).unwrap_or_else(|| {
            ratio_order.push(r);
            ratio_order.len() - 1
        });
        let li = lambda_order.iter().position(|&x| x == l).unwrap_or_else(|| {
            lambda_order.push(l);
            lambda_order.len() - 1
        });
        groups.entry((ri, li, m.method)).or_default().push(m);
    }
    groups
        .into_values()
        .map(|g| {
            let n = g.len() as f64;
            let mean = |f: &dyn Fn(&CellMetrics) -> f64| g.iter().map(|m| f(m)).sum::<f64>() / n;
            let smoothed: Option<Vec<f64>> = g.iter().map(|m| m.smoothed.as_ref().map(|s| s.ce90_m)).collect();
            AggregateRow {
                r_los: g[0].r_los,
                lambda: g[0].lambda,
                method: g[0].method,
                runs: g.len(),
                ct: mean(&|m| m.raw.ct),
                tw: mean(&|m| m.raw.tw),
                ks: mean(&|m| m.raw.ks),
                ce90_m: mean(&|m| m.raw.ce90_m),
                mae_m: mean(&|m| m.raw.mae_m),
                smoothed_ce90_m: smoothed.map(|s| s.iter().sum::<f64>() / n),
            }
        })
        .collect()
}

fn write_table(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let err = |e: csv::Error| Error::invalid(e.to_string());
        w.write_record(["r_los", "lambda", "method", "runs", "ct", "tw", "ks", "ce90_m", "mae_m", "smoothed_ce90_m"])
            .map_err(err)?;
        for r in rows {
            w.serialize((r.r_los, r.lambda, r.method.name(), r.runs, r.ct, r.tw, r.ks, r.ce90_m, r.mae_m, r.smoothed_ce90_m))
                .map_err(err)?;
        }
        w.flush()?;
    }
    io::atomic_write(path, &buf)
}

/// Runs every cell, writing `cells/<id>/...`, `aggregate.json`,
/// `table.csv` and `baselines.csv` under `out_dir`. Failed cells are
/// recorded and the aggregate is still written.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path) -> Result<ExperimentReport> {
    spec.validate()?;
    let cells = cell_configs(spec);
    let mut statuses = Vec::with_capacity(cells.len());
    let mut metrics = Vec::with_capacity(cells.len());
    let mut cache: Option<(SimulateConfig, Result<PreparedData>)> = None;
    for cell in &cells {
        if cache.as_ref().is_none_or(|(s, _)| *s != cell.simulate) {
            cache = Some((cell.simulate.clone(), prepare(&cell.simulate, &cell.pipeline)));
        }
        let data = &cache.as_ref().unwrap().1;
        let dir: PathBuf = out_dir.join("cells").join(cell.id());
        let outcome = match data {
            Ok(d) => run_cell(cell, d).and_then(|r| write_cell(&dir, cell, &r).map(|_| r.metrics)),
            Err(e) => Err(Error::invalid(format!("data preparation failed: {e}"))),
        };
        let error = outcome.as_ref().err().map(|e| e.to_string());
        if let Some(e) = &error {
            // the manifest still allows the failure to be reproduced
            cell_manifest(cell)?.write(&dir.join("manifest.json"))?;
            io::write_json(&dir.join("error.json"), &serde_json::json!({ "error": e }))?;
        }
        statuses.push(CellStatus {
            id: cell.id(),
            method: cell.method,
            r_los: cell.simulate.r_los,
            lambda: cell.lambda,
            seed: cell.seed,
            error,
        });
        metrics.push(outcome.ok());
    }
    let ok: Vec<&CellMetrics> = metrics.iter().flatten().collect();
    let rows = aggregate(&ok);
    let (table, baselines): (Vec<_>, Vec<_>) =
        rows.into_iter().partition(|r| matches!(r.method, Method::CcTdoa | Method::CcTdoaDisp));
    let report = ExperimentReport { cells: statuses, table, baselines, metrics };
    io::write_json(&out_dir.join("aggregate.json"), &report)?;
    write_table(&out_dir.join("table.csv"), &report.table)?;
    write_table(&out_dir.join("baselines.csv"), &report.baselines)?;
    let mut manifest = Manifest::new("experiment", serde_json::to_value(spec)?);
    manifest.seeds = spec.seeds.iter().map(|&s| ("seed".to_string(), s)).collect();
    manifest.beta = Some(spec.beta);
    manifest.outputs = ["aggregate.json", "table.csv", "baselines.csv"]
        .iter()
        .map(|f| Ok(FileDigest { path: f.into(), sha256: io::sha256_file(&out_dir.join(f))? }))
        .collect::<Result<_>>()?;
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(report)
}
