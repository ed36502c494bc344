//! Chart quality (CT, TW, KS) and localization error statistics.

pub mod affine;
pub mod neighbors;

use serde::{Deserialize, Serialize};

pub use affine::{apply_affine, fit_affine, AffineFit, AffineTransform};
pub use neighbors::{continuity, default_k, trustworthiness};

use crate::error::{Error, Result};
use crate::geometry::Point2;

/// Per-frame position estimates; `None` marks a gap (no estimate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEstimate {
    pub timestamps: Vec<f64>,
    /// Index of each estimate's frame in the source dataset.
    pub source_index: Vec<usize>,
    pub positions: Vec<Option<Point2>>,
}

impl TrajectoryEstimate {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn gaps(&self) -> usize {
        self.positions.iter().filter(|p| p.is_none()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StressVariant {
    /// Embedding distances rescaled by the least-squares optimal factor.
    ScaleOptimal,
    Raw,
}

/// Stress-1 between pairwise distances of truth and embedding.
pub fn kruskal_stress(truth: &[Vec<f64>], embedding: &[Vec<f64>], variant: StressVariant) -> Result<f64> {
    let n = truth.len();
    if n != embedding.len() {
        return Err(Error::ShapeMismatch { expected: format!("{n} embeddings"), got: format!("{}", embedding.len()) });
    }
    if n < 2 {
        return Err(Error::invalid("stress needs at least two points"));
    }
    let dist = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((dist(&truth[i], &truth[j]), dist(&embedding[i], &embedding[j])));
        }
    }
    let dd: f64 = pairs.iter().map(|(d, _)| d * d).sum();
    if dd == 0.0 {
        return Err(Error::invalid("all true points coincide"));
    }
    let s = match variant {
        StressVariant::Raw => 1.0,
        StressVariant::ScaleOptimal => {
            let ee: f64 = pairs.iter().map(|(_, e)| e * e).sum();
            if ee == 0.0 {
                0.0
            } else {
                pairs.iter().map(|(d, e)| d * e).sum::<f64>() / ee
            }
        }
    };
    let num: f64 = pairs.iter().map(|(d, e)| (s * e - d).powi(2)).sum();
    Ok((num / dd).sqrt())
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mae_m: f64,
    pub ce90_m: f64,
    /// `(error, fraction of errors <= error)`, sorted.
    pub cdf: Vec<(f64, f64)>,
    pub count: usize,
}

/// How estimates are mapped before comparing with the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "transform")]
pub enum Alignment {
    None,
    Affine(AffineTransform),
}

fn align_point(p: Point2, alignment: &Alignment) -> Point2 {
    match alignment {
        Alignment::None => p,
        Alignment::Affine(t) => {
            let q = t.apply_point([p[0], p[1], 0.0]);
            [q[0], q[1]]
        }
    }
}

/// Euclidean 2D error statistics over the frames that have an estimate.
pub fn error_stats(estimates: &[Option<Point2>], truth: &[Point2], alignment: &Alignment) -> Result<ErrorStats> {
    if estimates.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} estimates", truth.len()),
            got: format!("{}", estimates.len()),
        });
    }
    let mut errors: Vec<f64> = estimates
        .iter()
        .zip(truth)
        .filter_map(|(e, t)| {
            e.map(|e| {
                let e = align_point(e, alignment);
                ((e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2)).sqrt()
            })
        })
        .collect();
    if errors.is_empty() {
        return Err(Error::invalid("no frame has both an estimate and a true position"));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::invalid("non-finite position estimate"));
    }
    errors.sort_by(f64::total_cmp);
    let n = errors.len();
    Ok(ErrorStats {
        mae_m: errors.iter().sum::<f64>() / n as f64,
        ce90_m: quantile_sorted(&errors, 0.9),
        cdf: errors.iter().enumerate().map(|(i, &e)| (e, (i + 1) as f64 / n as f64)).collect(),
        count: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Neighbourhood size for CT/TW; `None` uses [`default_k`].
    pub k_neighbors: Option<usize>,
    pub stress: StressVariant,
    pub alignment: Alignment,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k_neighbors: None, stress: StressVariant::ScaleOptimal, alignment: Alignment::None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ct: f64,
    pub tw: f64,
    pub ks: f64,
    pub ce90_m: f64,
    pub mae_m: f64,
    pub k_neighbors: usize,
    /// Frames that were scored.
    pub frames: usize,
    /// Frames without an estimate.
    pub gaps: usize,
    pub cdf: Vec<(f64, f64)>,
}

/// All metrics of an estimate against the positions of its source frames.
pub fn evaluate(estimate: &TrajectoryEstimate, truth: &[Point2], config: &EvalConfig) -> Result<MetricsReport> {
    let truth_sel: Vec<Point2> = estimate
        .source_index
        .iter()
        .map(|&i| truth.get(i).copied().ok_or_else(|| Error::invalid(format!("no true position for frame {i}"))))
        .collect::<Result<_>>()?;
    let stats = error_stats(&estimate.positions, &truth_sel, &config.alignment)?;
    let (t, e): (Vec<Vec<f64>>, Vec<Vec<f64>>) = estimate
        .positions
        .iter()
        .zip(&truth_sel)
        .filter_map(|(p, t)| p.map(|p| (t.to_vec(), align_point(p, &config.alignment).to_vec())))
        .unzip();
    let k = config.k_neighbors.unwrap_or_else(|| default_k(t.len()));
    Ok(MetricsReport {
        ct: continuity(&t, &e, k)?,
        tw: trustworthiness(&t, &e, k)?,
        ks: kruskal_stress(&t, &e, config.stress)?,
        ce90_m: stats.ce90_m,
        mae_m: stats.mae_m,
        k_neighbors: k,
        frames: stats.count,
        gaps: estimate.gaps(),
        cdf: stats.cdf,
    })
}
