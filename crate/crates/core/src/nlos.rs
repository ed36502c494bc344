//! Peak-threshold LoS classification and per-TDoA masking vectors.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::PreprocessedFrame;
use crate::scenario::TdoaLayout;

/// Fallback threshold when the peak histogram has no usable valley.
pub const DEFAULT_LAMBDA: f64 = 0.2;

/// `true` iff the largest value of the row exceeds `lambda` strictly.
pub fn los_indicator(row: ArrayView1<f64>, lambda: f64) -> bool {
    row.iter().any(|&v| v > lambda)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskVector {
    /// Per-TRP LoS indicators.
    pub mu: Vec<bool>,
    /// Per-TDoA weights in [`TdoaLayout`] order.
    pub nu: Vec<bool>,
}

impl MaskVector {
    pub fn retained(&self) -> usize {
        self.nu.iter().filter(|&&v| v).count()
    }
}

/// Combines per-TRP indicators into TDoA weights. Entries whose TDoA was
/// invalidated upstream are forced to zero.
pub fn mask_from_mu(mu: Vec<bool>, tdoa_valid: &[bool], layout: &TdoaLayout) -> MaskVector {
    let nu = layout
        .entries
        .iter()
        .zip(tdoa_valid)
        .map(|(e, &ok)| ok && mu[e.trp] && mu[e.reference])
        .collect();
    MaskVector { mu, nu }
}

pub fn mask_vector(frame: &PreprocessedFrame, lambda: f64, layout: &TdoaLayout) -> MaskVector {
    let mu = frame
        .h_norm
        .outer_iter()
        .map(|r| los_indicator(r, lambda))
        .collect();
    mask_from_mu(mu, &frame.tdoa.valid, layout)
}

/// How masks are assigned to training frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "lambda")]
pub enum MaskPolicy {
    /// Peak thresholding with the given `lambda`.
    Threshold(f64),
    /// No masking: every TDoA that survived outlier filtering is used.
    None,
    /// Ground-truth LoS labels.
    Oracle,
}

/// Masks for every frame. `los_labels` (`M x T_source`) is required for
/// [`MaskPolicy::Oracle`].
pub fn build_masks(
    frames: &[PreprocessedFrame],
    policy: MaskPolicy,
    layout: &TdoaLayout,
    los_labels: Option<&Array2<bool>>,
) -> Result<Vec<MaskVector>> {
    match policy {
        MaskPolicy::Threshold(lambda) => {
            if !(lambda > 0.0 && lambda < 1.0) {
                return Err(Error::invalid(format!("lambda {lambda} outside (0, 1)")));
            }
            Ok(frames.iter().map(|f| mask_vector(f, lambda, layout)).collect())
        }
        MaskPolicy::None => Ok(frames
            .iter()
            .map(|f| mask_from_mu(vec![true; f.h_norm.nrows()], &f.tdoa.valid, layout))
            .collect()),
        MaskPolicy::Oracle => {
            let labels = los_labels
                .ok_or_else(|| Error::invalid("oracle masks need ground-truth LoS labels"))?;
            frames
                .iter()
                .map(|f| {
                    if f.source_index >= labels.ncols() {
                        return Err(Error::invalid(format!(
                            "no LoS label for frame {}",
                            f.source_index
                        )));
                    }
                    let mu = labels.column(f.source_index).to_vec();
                    Ok(mask_from_mu(mu, &f.tdoa.valid, layout))
                })
                .collect()
        }
    }
}

/// Fraction of `(TRP, frame)` cells where `mu` agrees with the labels.
pub fn mask_accuracy(frames: &[PreprocessedFrame], masks: &[MaskVector], los_labels: &Array2<bool>) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (f, m) in frames.iter().zip(masks) {
        for (trp, &mu) in m.mu.iter().enumerate() {
            total += 1;
            if mu == los_labels[[trp, f.source_index]] {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return 0.0;
    }
    hits as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSuggestion {
    pub lambda: f64,
    /// Set when no valley was found and [`DEFAULT_LAMBDA`] was returned.
    pub fallback: bool,
}

const HIST_BINS: usize = 64;

/// Threshold at the deepest valley between the two dominant modes of the
/// per-row peak histogram (64 bins on `[0, 1]`, 3-bin smoothing).
pub fn suggest_lambda(frames: &[PreprocessedFrame]) -> Result<LambdaSuggestion> {
    let peaks: Vec<f64> = frames
        .iter()
        .flat_map(|f| f.h_norm.outer_iter().map(|r| r.fold(0.0f64, |a, &b| a.max(b))).collect::<Vec<_>>())
        .collect();
    if peaks.len() < 100 {
        return Err(Error::invalid(format!(
            "need at least 100 CIR rows to suggest lambda, got {}",
            peaks.len()
        )));
    }
    Ok(suggest_lambda_from_peaks(&peaks))
}

pub fn suggest_lambda_from_peaks(peaks: &[f64]) -> LambdaSuggestion {
    let fallback = LambdaSuggestion { lambda: DEFAULT_LAMBDA, fallback: true };
    let mut hist = [0usize; HIST_BINS];
    for &p in peaks {
        let b = ((p.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        hist[b] += 1;
    }
    let smooth: Vec<f64> = (0..HIST_BINS)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(HIST_BINS - 1);
            (lo..=hi).map(|j| hist[j] as f64).sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    // plateau-aware local maxima: strictly above the left neighbour run and
    // at least the right neighbour
    let mut modes: Vec<usize> = (0..HIST_BINS)
        .filter(|&i| {
            let left = if i == 0 { -1.0 } else { smooth[i - 1] };
            let right = if i + 1 == HIST_BINS { -1.0 } else { smooth[i + 1] };
            smooth[i] > 0.0 && smooth[i] > left && smooth[i] >= right
        })
        .collect();
    if modes.len() < 2 {
        return fallback;
    }
    modes.sort_by(|&a, &b| smooth[b].total_cmp(&smooth[a]).then(a.cmp(&b)));
    let (a, b) = (modes[0].min(modes[1]), modes[0].max(modes[1]));
    let min = (a..=b).map(|i| smooth[i]).fold(f64::INFINITY, f64::min);
    if min >= smooth[a].min(smooth[b]) {
        return fallback;
    }
    let valley: Vec<usize> = (a..=b).filter(|&i| smooth[i] == min).collect();
    let mid = valley[valley.len() / 2];
    LambdaSuggestion {
        lambda: (mid as f64 + 0.5) / HIST_BINS as f64,
        fallback: false,
    }
}
