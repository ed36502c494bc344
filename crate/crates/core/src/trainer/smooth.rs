//! Centered moving-average smoothing of estimated trajectories.

use crate::error::{Error, Result};
use crate::eval::TrajectoryEstimate;

/// Tap weights of a centered window of nominal length `window`. Even
/// lengths use `window + 1` taps with half weight on both ends, so the
/// filter stays symmetric.
fn taps(window: usize) -> Vec<f64> {
    if window % 2 == 1 {
        vec![1.0; window]
    } else {
        let mut w = vec![1.0; window + 1];
        w[0] = 0.5;
        w[window] = 0.5;
        w
    }
}

/// Smooths every coordinate with a centered moving average. Near the ends
/// the window is truncated and renormalized; gap entries are skipped and
/// stay gaps.
pub fn smooth(track: &TrajectoryEstimate, window: usize) -> Result<TrajectoryEstimate> {
    if window == 0 {
        return Err(Error::invalid("smoothing window must be at least 1"));
    }
    let present: Vec<usize> = (0..track.len()).filter(|&i| track.positions[i].is_some()).collect();
    let pts: Vec<[f64; 2]> = present.iter().map(|&i| track.positions[i].unwrap()).collect();
    let w = taps(window);
    let half = (w.len() / 2) as isize;
    let n = pts.len() as isize;
    let mut out = track.clone();
    for (k, &i) in present.iter().enumerate() {
        let mut acc = [0.0, 0.0];
        let mut norm = 0.0;
        for (o, &wt) in w.iter().enumerate() {
            let j = k as isize + o as isize - half;
            if j < 0 || j >= n {
                continue;
            }
            acc[0] += wt * pts[j as usize][0];
            acc[1] += wt * pts[j as usize][1];
            norm += wt;
        }
        out.positions[i] = Some([acc[0] / norm, acc[1] / norm]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(points: Vec<Option<[f64; 2]>>) -> TrajectoryEstimate {
        TrajectoryEstimate {
            timestamps: (0..points.len()).map(|i| i as f64).collect(),
            source_index: (0..points.len()).collect(),
            positions: points,
        }
    }

    #[test]
    fn window_one_is_identity() {
        let t = track((0..7).map(|i| Some([i as f64 * 1.3, (i * i) as f64])).collect());
        assert_eq!(smooth(&t, 1).unwrap(), t);
    }

    #[test]
    fn constant_is_unchanged() {
        let t = track(vec![Some([2.0, -1.0]); 15]);
        for w in [2, 3, 10] {
            let s = smooth(&t, w).unwrap();
            for p in &s.positions {
                let p = p.unwrap();
                assert!((p[0] - 2.0).abs() < 1e-12 && (p[1] + 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ramp_unchanged_in_interior() {
        let t = track((0..30).map(|i| Some([0.5 * i as f64, 3.0 - 0.25 * i as f64])).collect());
        for w in [3, 5, 10] {
            let s = smooth(&t, w).unwrap();
            let half = (w / 2) as usize;
            for i in half..30 - half {
                let (a, b) = (s.positions[i].unwrap(), t.positions[i].unwrap());
                assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12, "w {w} i {i}");
            }
        }
    }

    #[test]
    fn gaps_are_kept_and_skipped() {
        let t = track(vec![Some([0.0, 0.0]), None, Some([2.0, 0.0]), Some([4.0, 0.0])]);
        let s = smooth(&t, 3).unwrap();
        assert!(s.positions[1].is_none());
        assert_eq!(s.positions[2], Some([2.0, 0.0]));
    }

    #[test]
    fn zero_window_rejected() {
        assert!(smooth(&track(vec![]), 0).is_err());
    }
}
