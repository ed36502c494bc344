//! CIR preprocessing: centering, peak detection, outlier filtering, per-RU
//! alignment, TDoA extraction, truncation and global normalization.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView1};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::dist3;
use crate::scenario::{CirDataset, Scenario, SignalDomain, TdoaLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Number of leading CIR samples kept after alignment (`C`).
    pub truncation: usize,
    /// Slack added to the geometric ToA/TDoA bounds, in samples.
    pub guard_margin_samples: f64,
    /// Sub-sample peak refinement for the TDoA values.
    pub refine_subsample: bool,
    /// Turn truncation violations into errors instead of report entries.
    pub fail_on_truncation: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            truncation: 100,
            guard_margin_samples: 5.0,
            refine_subsample: false,
            fail_on_truncation: false,
        }
    }
}

/// Inverse DFT plus half-length rotation, unitary scaling.
pub struct CenteredIdft {
    len: usize,
    plan: Arc<dyn Fft<f64>>,
}

impl CenteredIdft {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("CFR length must be positive"));
        }
        let plan = FftPlanner::new().plan_fft_inverse(len);
        Ok(Self { len, plan })
    }

    pub fn apply(&self, cfr: &[Complex64]) -> Result<Vec<Complex64>> {
        if cfr.len() != self.len {
            return Err(Error::ShapeMismatch {
                expected: format!("{} subcarriers", self.len),
                got: format!("{}", cfr.len()),
            });
        }
        let mut buf = cfr.to_vec();
        self.plan.process(&mut buf);
        let scale = 1.0 / (self.len as f64).sqrt();
        let half = self.len / 2;
        let mut out = vec![Complex64::default(); self.len];
        for (i, v) in buf.into_iter().enumerate() {
            out[(i + half) % self.len] = v * scale;
        }
        Ok(out)
    }
}

/// IDFT of a CFR with the zero-delay component moved to index `N/2`.
pub fn cfr_to_centered_cir(cfr: &[Complex64]) -> Result<Vec<Complex64>> {
    CenteredIdft::new(cfr.len())?.apply(cfr)
}

/// Index of the largest magnitude, lowest index on ties; `None` for an
/// all-zero (or empty) vector.
pub fn detect_peak(cir: &[Complex64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in cir.iter().enumerate() {
        let p = v.norm_sqr();
        if p > 0.0 && best.map_or(true, |(_, b)| p > b) {
            best = Some((i, p));
        }
    }
    best.map(|(i, _)| i)
}

const REFINE_UPSAMPLE: usize = 8;
const REFINE_KERNEL_HALF_WIDTH: isize = 16;

fn interpolate_at(cir: &[Complex64], x: f64) -> Complex64 {
    let center = x.round() as isize;
    let n = cir.len() as isize;
    let mut acc = Complex64::default();
    for k in (center - REFINE_KERNEL_HALF_WIDTH).max(0)..=(center + REFINE_KERNEL_HALF_WIDTH).min(n - 1) {
        let d = x - k as f64;
        let l = REFINE_KERNEL_HALF_WIDTH as f64;
        if d.abs() >= l {
            continue;
        }
        let arg = std::f64::consts::PI * d;
        let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
        let w = 0.5 + 0.5 * (std::f64::consts::PI * d / l).cos();
        acc += cir[k as usize] * (sinc * w);
    }
    acc
}

/// Sub-sample peak position: band-limited interpolation onto an 8x grid
/// within one sample of `peak`, then a 3-point parabolic fit on that grid.
pub fn refine_peak(cir: &[Complex64], peak: usize) -> f64 {
    let u = REFINE_UPSAMPLE as isize;
    let grid: Vec<f64> = (-u..=u)
        .map(|k| interpolate_at(cir, peak as f64 + k as f64 / u as f64).norm())
        .collect();
    let (j, _) = grid
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    let base = peak as f64 + (j as isize - u) as f64 / u as f64;
    if j == 0 || j + 1 == grid.len() {
        return base;
    }
    let (a, b, c) = (grid[j - 1], grid[j], grid[j + 1]);
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-300 {
        return base;
    }
    let delta = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
    base + delta / u as f64
}

/// Peak indices and validity of every `(TRP, frame)` cell, `M x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakTable {
    pub peak_index: Array2<usize>,
    /// Peak positions in samples; equals `peak_index` unless refined.
    pub position: Array2<f64>,
    pub valid: Array2<bool>,
}

impl PeakTable {
    pub fn num_frames(&self) -> usize {
        self.peak_index.ncols()
    }

    /// Builds a table from integer peaks; `None` marks "no peak".
    pub fn from_indices(m: usize, columns: &[Vec<Option<usize>>]) -> Self {
        let t = columns.len();
        let mut table = Self {
            peak_index: Array2::zeros((m, t)),
            position: Array2::zeros((m, t)),
            valid: Array2::from_elem((m, t), false),
        };
        for (f, col) in columns.iter().enumerate() {
            for (trp, p) in col.iter().enumerate() {
                if let Some(i) = p {
                    table.peak_index[[trp, f]] = *i;
                    table.position[[trp, f]] = *i as f64;
                    table.valid[[trp, f]] = true;
                }
            }
        }
        table
    }
}

/// Geometric bounds used by [`filter_outliers`].
#[derive(Debug, Clone, Copy)]
pub struct OutlierBounds {
    /// Index of zero propagation delay in the CIR vectors.
    pub zero_delay_index: f64,
    pub guard_margin_samples: f64,
}

/// Invalidates cells whose implied range or intra-RU TDoA is geometrically
/// impossible. Pairwise conflicts are resolved by repeatedly dropping the
/// cell involved in most violations (ties: the later peak).
pub fn filter_outliers(peaks: &PeakTable, scenario: &Scenario, bounds: OutlierBounds) -> PeakTable {
    let mut out = peaks.clone();
    let mps = scenario.meters_per_sample();
    let margin_m = bounds.guard_margin_samples * mps;
    let max_range: Vec<f64> = scenario
        .trp_positions
        .iter()
        .map(|x| scenario.bounds.max_range_from(*x, scenario.ue_height_m))
        .collect();
    let rus: Vec<Vec<usize>> = (0..scenario.num_rus()).map(|k| scenario.trps_of_ru(k)).collect();

    for t in 0..peaks.num_frames() {
        for m in 0..scenario.num_trps() {
            if !out.valid[[m, t]] {
                continue;
            }
            let range = (out.position[[m, t]] - bounds.zero_delay_index) * mps;
            if range > max_range[m] + margin_m || range < -margin_m {
                out.valid[[m, t]] = false;
            }
        }
        for trps in &rus {
            loop {
                let mut violations = vec![0usize; trps.len()];
                for (a_i, &a) in trps.iter().enumerate() {
                    for (b_i, &b) in trps.iter().enumerate().skip(a_i + 1) {
                        if !(out.valid[[a, t]] && out.valid[[b, t]]) {
                            continue;
                        }
                        let tdoa_m = (out.position[[a, t]] - out.position[[b, t]]).abs() * mps;
                        let bound = dist3(scenario.trp_positions[a], scenario.trp_positions[b]);
                        if tdoa_m > bound + margin_m {
                            violations[a_i] += 1;
                            violations[b_i] += 1;
                        }
                    }
                }
                let worst = (0..trps.len())
                    .filter(|&i| violations[i] > 0)
                    .max_by(|&i, &j| {
                        violations[i].cmp(&violations[j]).then(
                            out.position[[trps[i], t]]
                                .total_cmp(&out.position[[trps[j], t]]),
                        )
                    });
                match worst {
                    Some(i) => out.valid[[trps[i], t]] = false,
                    None => break,
                }
            }
        }
    }
    out
}

/// Result of aligning one RU at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedRu {
    /// Shift offset: earliest valid peak of the RU.
    pub eta: usize,
    /// Left-shifted rows of the RU's TRPs, in `trps` order, zero-filled tail.
    pub rows: Array2<Complex64>,
}

/// Shifts every row of the RU left by its earliest valid peak.
/// Returns `None` when the RU has no valid peak (unusable at this timestep).
pub fn align_ru(
    rows: &Array2<Complex64>,
    peak_index: ArrayView1<usize>,
    valid: ArrayView1<bool>,
    trps: &[usize],
) -> Option<AlignedRu> {
    let eta = trps
        .iter()
        .filter(|&&m| valid[m])
        .map(|&m| peak_index[m])
        .min()?;
    let n = rows.ncols();
    let mut out = Array2::zeros((trps.len(), n));
    for (r, &m) in trps.iter().enumerate() {
        out.slice_mut(s![r, ..n - eta])
            .assign(&rows.slice(s![m, eta..]));
    }
    Some(AlignedRu { eta, rows: out })
}

/// TDoA values (samples) and their validity, in [`TdoaLayout`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdoaVector {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl TdoaVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_meters(&self, meters_per_sample: f64) -> Vec<f64> {
        self.values.iter().map(|v| v * meters_per_sample).collect()
    }
}

/// Per-RU TDoAs: peak position of each TRP minus that of its RU reference.
pub fn compute_tdoa(position: ArrayView1<f64>, valid: ArrayView1<bool>, layout: &TdoaLayout) -> TdoaVector {
    let mut values = Vec::with_capacity(layout.len());
    let mut ok = Vec::with_capacity(layout.len());
    for e in &layout.entries {
        let v = valid[e.trp] && valid[e.reference];
        values.push(if v {
            position[e.trp] - position[e.reference]
        } else {
            0.0
        });
        ok.push(v);
    }
    TdoaVector { values, valid: ok }
}

/// Magnitude of the first `c` samples of every frame divided by `alpha_norm`.
/// Without `alpha_norm` it is computed as the largest retained magnitude of
/// the input set and returned for reuse.
pub fn normalize_truncate(
    shifted: &[Array2<Complex64>],
    c: usize,
    alpha_norm: Option<f64>,
) -> Result<(Vec<Array2<f64>>, f64)> {
    if let Some(n) = shifted.first().map(|f| f.ncols()) {
        if c > n {
            return Err(Error::invalid(format!("truncation C={c} exceeds N_fft={n}")));
        }
    }
    if c == 0 {
        return Err(Error::invalid("truncation C must be positive"));
    }
    let mags: Vec<Array2<f64>> = shifted
        .iter()
        .map(|f| f.slice(s![.., ..c]).mapv(|v| v.norm()))
        .collect();
    let alpha = match alpha_norm {
        Some(a) if a > 0.0 && a.is_finite() => a,
        Some(a) => return Err(Error::invalid(format!("alpha_norm must be positive, got {a}"))),
        None => {
            let a = mags
                .iter()
                .flat_map(|m| m.iter().copied())
                .fold(0.0, f64::max);
            if !(a > 0.0) {
                return Err(Error::invalid("training set has no nonzero CIR sample"));
            }
            a
        }
    };
    let inv = 1.0 / alpha;
    Ok((mags.into_iter().map(|m| m * inv).collect(), alpha))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedFrame {
    /// Normalized magnitudes, `M x C`.
    pub h_norm: Array2<f64>,
    pub tdoa: TdoaVector,
    pub timestamp: f64,
    /// Index of the frame in the source dataset.
    pub source_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Train,
    Test { alpha_norm: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub alpha_norm: f64,
    pub dropped_frames: Vec<usize>,
    /// Fraction of frames with a valid peak, per TRP.
    pub trp_validity_rate: Vec<f64>,
    /// `(frame, ru)` pairs without any valid peak in frames that were kept.
    pub unusable_ru: Vec<(usize, usize)>,
    /// `(frame, trp)` valid rows whose aligned peak falls outside `[0, C)`.
    pub truncation_violations: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub frames: Vec<PreprocessedFrame>,
    pub alpha_norm: f64,
    pub report: PreprocessReport,
    pub peaks: PeakTable,
}

fn zero_delay_index(domain: SignalDomain, n_fft: usize) -> f64 {
    match domain {
        SignalDomain::Cir => 0.0,
        SignalDomain::Cfr => (n_fft / 2) as f64,
    }
}

/// Time-domain rows of every frame (centered CIR when the dataset holds CFRs).
pub fn time_domain_rows(dataset: &CirDataset) -> Result<Vec<Array2<Complex64>>> {
    match dataset.domain {
        SignalDomain::Cir => Ok(dataset.frames.iter().map(|f| f.rows.clone()).collect()),
        SignalDomain::Cfr => {
            let n = dataset.frames.first().map_or(1, |f| f.rows.ncols());
            let idft = CenteredIdft::new(n)?;
            dataset
                .frames
                .par_iter()
                .map(|f| {
                    let mut out = Array2::zeros(f.rows.dim());
                    for (m, row) in f.rows.outer_iter().enumerate() {
                        let cir = idft.apply(&row.to_vec())?;
                        out.row_mut(m).assign(&ArrayView1::from(&cir));
                    }
                    Ok(out)
                })
                .collect()
        }
    }
}

/// Full preprocessing chain. Frames where every RU is unusable are dropped.
pub fn preprocess_dataset(
    dataset: &CirDataset,
    scenario: &Scenario,
    config: &PipelineConfig,
    mode: Mode,
) -> Result<Preprocessed> {
    scenario.validate()?;
    dataset.validate()?;
    if dataset.num_trps() != scenario.num_trps() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} TRPs", scenario.num_trps()),
            got: format!("{}", dataset.num_trps()),
        });
    }
    if config.truncation > scenario.n_fft {
        return Err(Error::invalid(format!(
            "truncation C={} exceeds N_fft={}",
            config.truncation, scenario.n_fft
        )));
    }
    let m = scenario.num_trps();
    let rows = time_domain_rows(dataset)?;

    let columns: Vec<Vec<Option<usize>>> = rows
        .iter()
        .map(|f| {
            f.outer_iter()
                .map(|r| detect_peak(r.as_slice().expect("standard layout")))
                .collect()
        })
        .collect();
    let mut peaks = PeakTable::from_indices(m, &columns);
    if config.refine_subsample {
        for (t, f) in rows.iter().enumerate() {
            for trp in 0..m {
                if peaks.valid[[trp, t]] {
                    let row = f.row(trp);
                    peaks.position[[trp, t]] =
                        refine_peak(row.as_slice().unwrap(), peaks.peak_index[[trp, t]]);
                }
            }
        }
    }
    let peaks = filter_outliers(
        &peaks,
        scenario,
        OutlierBounds {
            zero_delay_index: zero_delay_index(dataset.domain, scenario.n_fft),
            guard_margin_samples: config.guard_margin_samples,
        },
    );

    let layout = scenario.tdoa_layout();
    let rus: Vec<Vec<usize>> = (0..scenario.num_rus()).map(|k| scenario.trps_of_ru(k)).collect();
    let c = config.truncation;

    let mut kept = Vec::new();
    let mut shifted_frames = Vec::new();
    let mut dropped = Vec::new();
    let mut unusable = Vec::new();
    let mut violations = Vec::new();
    for (t, f) in rows.iter().enumerate() {
        let idx = peaks.peak_index.column(t);
        let valid = peaks.valid.column(t);
        let mut shifted = Array2::<Complex64>::zeros(f.dim());
        let mut any = false;
        let mut bad_rus = Vec::new();
        for (k, trps) in rus.iter().enumerate() {
            match align_ru(f, idx, valid, trps) {
                Some(aligned) => {
                    any = true;
                    for (r, &trp) in trps.iter().enumerate() {
                        shifted.row_mut(trp).assign(&aligned.rows.row(r));
                        if valid[trp] && idx[trp] - aligned.eta >= c {
                            violations.push((t, trp));
                        }
                    }
                }
                None => bad_rus.push((t, k)),
            }
        }
        if !any {
            dropped.push(t);
            continue;
        }
        unusable.extend(bad_rus);
        kept.push(t);
        shifted_frames.push(shifted);
    }
    if config.fail_on_truncation {
        if let Some(&(frame, trp)) = violations.first() {
            return Err(Error::Truncation { frame, trp, c });
        }
    }

    let alpha_in = match mode {
        Mode::Train => None,
        Mode::Test { alpha_norm } => Some(alpha_norm),
    };
    let (h_norm, alpha_norm) = normalize_truncate(&shifted_frames, c, alpha_in)?;

    let frames = kept
        .iter()
        .zip(h_norm)
        .map(|(&t, h)| PreprocessedFrame {
            h_norm: h,
            tdoa: compute_tdoa(peaks.position.column(t), peaks.valid.column(t), &layout),
            timestamp: dataset.timestamps[t],
            source_index: t,
        })
        .collect();

    let total = dataset.len().max(1) as f64;
    let trp_validity_rate = (0..m)
        .map(|trp| peaks.valid.row(trp).iter().filter(|&&v| v).count() as f64 / total)
        .collect();

    Ok(Preprocessed {
        frames,
        alpha_norm,
        report: PreprocessReport {
            alpha_norm,
            dropped_frames: dropped,
            trp_validity_rate,
            unusable_ru: unusable,
            truncation_violations: violations,
        },
        peaks,
    })
}
