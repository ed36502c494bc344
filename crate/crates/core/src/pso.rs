//! TDoA multilateration baseline solved with global-best particle swarm
//! optimization.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::TrajectoryEstimate;
use crate::geometry::{dist3, Bounds, Point2, Point3};
use crate::nlos::MaskVector;
use crate::pipeline::{PreprocessedFrame, TdoaVector};
use crate::rng::{derive_seed, stream_rng};
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsoParams {
    pub swarm_size: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub iterations: usize,
    /// Seed the first particle of frame `t` with the solution of frame `t - 1`.
    pub warm_start: bool,
    pub rng_seed: u64,
}

impl Default for PsoParams {
    fn default() -> Self {
        Self {
            swarm_size: 64,
            inertia: 0.729,
            cognitive: 1.494,
            social: 1.494,
            iterations: 200,
            warm_start: false,
            rng_seed: 0,
        }
    }
}

impl PsoParams {
    pub fn validate(&self) -> Result<()> {
        if self.swarm_size == 0 || self.iterations == 0 {
            return Err(Error::Config("PSO needs at least one particle and iteration".into()));
        }
        let coeffs = [self.inertia, self.cognitive, self.social];
        if coeffs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Config("PSO coefficients must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Unmasked hyperbolic terms of one frame: `(x_m, x_ref, range difference in meters)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TdoaProblem {
    pub terms: Vec<(Point3, Point3, f64)>,
    pub ue_height_m: f64,
}

impl TdoaProblem {
    /// Collects the TDoAs that are valid and retained by `mask`. Fewer than
    /// two leave the position unobservable in 2D.
    pub fn new(frame: usize, tdoa: &TdoaVector, mask: &MaskVector, scenario: &Scenario) -> Result<Self> {
        let layout = scenario.tdoa_layout();
        if tdoa.len() != layout.len() || mask.nu.len() != layout.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} TDoAs", layout.len()),
                got: format!("{} values, {} weights", tdoa.len(), mask.nu.len()),
            });
        }
        let mps = scenario.meters_per_sample();
        let terms: Vec<_> = layout
            .entries
            .iter()
            .enumerate()
            .filter(|&(l, _)| tdoa.valid[l] && mask.nu[l])
            .map(|(l, e)| {
                (scenario.trp_positions[e.trp], scenario.trp_positions[e.reference], tdoa.values[l] * mps)
            })
            .collect();
        if terms.len() < 2 {
            return Err(Error::Unobservable { frame, unmasked: terms.len() });
        }
        Ok(Self { terms, ue_height_m: scenario.ue_height_m })
    }

    /// Sum of squared hyperbolic residuals at `u`.
    pub fn objective(&self, u: Point2) -> f64 {
        let p = [u[0], u[1], self.ue_height_m];
        self.terms
            .iter()
            .map(|(x_m, x_ref, rd)| {
                let r = dist3(*x_m, p) - dist3(*x_ref, p) - rd;
                r * r
            })
            .sum()
    }
}

/// Objective of a single frame; errors when fewer than two TDoAs are unmasked.
pub fn tdoa_objective(
    u: Point2,
    frame: usize,
    tdoa: &TdoaVector,
    mask: &MaskVector,
    scenario: &Scenario,
) -> Result<f64> {
    Ok(TdoaProblem::new(frame, tdoa, mask, scenario)?.objective(u))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsoResult {
    pub point: Point2,
    pub value: f64,
    /// Global-best value after initialization and after every iteration.
    pub history: Vec<f64>,
}

/// Global-best PSO over `bounds`. Velocities are clamped to 20% of the
/// bound width per axis and particles leaving the box are reflected.
pub fn pso_solve(
    objective: impl Fn(Point2) -> f64,
    bounds: &Bounds,
    params: &PsoParams,
    start: Option<Point2>,
    rng: &mut impl Rng,
) -> PsoResult {
    let n = params.swarm_size.max(1);
    let vmax = [0.2 * bounds.width(0), 0.2 * bounds.width(1)];
    let mut x: Vec<Point2> = (0..n)
        .map(|_| {
            [
                rng.random_range(bounds.min[0]..=bounds.max[0]),
                rng.random_range(bounds.min[1]..=bounds.max[1]),
            ]
        })
        .collect();
    if let Some(s) = start.filter(|s| bounds.contains(*s)) {
        x[0] = s;
    }
    let mut v: Vec<Point2> = (0..n)
        .map(|_| [rng.random_range(-vmax[0]..=vmax[0]), rng.random_range(-vmax[1]..=vmax[1])])
        .collect();
    let mut best_x = x.clone();
    let mut best_f: Vec<f64> = x.iter().map(|p| objective(*p)).collect();
    let mut g = argmin(&best_f);
    let mut history = Vec::with_capacity(params.iterations + 1);
    history.push(best_f[g]);

    for _ in 0..params.iterations {
        let gx = best_x[g];
        for i in 0..n {
            for a in 0..2 {
                let r1: f64 = rng.random();
                let r2: f64 = rng.random();
                let vel = params.inertia * v[i][a]
                    + params.cognitive * r1 * (best_x[i][a] - x[i][a])
                    + params.social * r2 * (gx[a] - x[i][a]);
                v[i][a] = vel.clamp(-vmax[a], vmax[a]);
                let (pos, vel) = reflect(x[i][a] + v[i][a], v[i][a], bounds.min[a], bounds.max[a]);
                x[i][a] = pos;
                v[i][a] = vel;
            }
            let f = objective(x[i]);
            if f < best_f[i] {
                best_f[i] = f;
                best_x[i] = x[i];
            }
        }
        g = argmin(&best_f);
        history.push(best_f[g]);
    }
    PsoResult { point: best_x[g], value: best_f[g], history }
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

fn reflect(pos: f64, vel: f64, lo: f64, hi: f64) -> (f64, f64) {
    if pos < lo {
        ((2.0 * lo - pos).min(hi), -vel)
    } else if pos > hi {
        ((2.0 * hi - pos).max(lo), -vel)
    } else {
        (pos, vel)
    }
}

/// Per-frame PSO solutions. Unobservable frames become gaps.
pub fn solve_trajectory(
    frames: &[PreprocessedFrame],
    masks: &[MaskVector],
    scenario: &Scenario,
    params: &PsoParams,
) -> Result<TrajectoryEstimate> {
    params.validate()?;
    scenario.validate()?;
    if frames.len() != masks.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} masks", frames.len()),
            got: format!("{}", masks.len()),
        });
    }
    let seed = derive_seed(params.rng_seed, "pso");
    let problems: Vec<Option<TdoaProblem>> = frames
        .iter()
        .zip(masks)
        .map(|(f, m)| match TdoaProblem::new(f.source_index, &f.tdoa, m, scenario) {
            Ok(p) => Ok(Some(p)),
            Err(Error::Unobservable { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let solve = |k: usize, start: Option<Point2>| {
        problems[k].as_ref().map(|p| {
            let mut rng = stream_rng(seed, frames[k].source_index as u64);
            pso_solve(|u| p.objective(u), &scenario.bounds, params, start, &mut rng).point
        })
    };
    let positions: Vec<Option<Point2>> = if params.warm_start {
        let mut out = Vec::with_capacity(frames.len());
        let mut prev = None;
        for k in 0..frames.len() {
            let p = solve(k, prev);
            prev = p.or(prev);
            out.push(p);
        }
        out
    } else {
        (0..frames.len()).into_par_iter().map(|k| solve(k, None)).collect()
    };
    Ok(TrajectoryEstimate {
        timestamps: frames.iter().map(|f| f.timestamp).collect(),
        source_index: frames.iter().map(|f| f.source_index).collect(),
        positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{ChannelModel, TdoaLayout};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square() -> Scenario {
        Scenario {
            trp_positions: vec![[0.0, 0.0, 6.0], [30.0, 0.0, 6.0], [30.0, 30.0, 6.0], [0.0, 30.0, 6.0]],
            ru_assignment: vec![0; 4],
            ref_trp_per_ru: vec![0],
            n_fft: 128,
            sample_rate_hz: 122.88e6,
            noise_floor_db: None,
            ue_height_m: 1.5,
            bounds: Bounds::new([0.0, 0.0], [30.0, 30.0]),
            channel: ChannelModel::default(),
        }
    }

    fn exact_tdoa(s: &Scenario, u: Point2) -> TdoaVector {
        let p = s.ue_point(u);
        let layout: TdoaLayout = s.tdoa_layout();
        let values = layout
            .entries
            .iter()
            .map(|e| (dist3(s.trp_positions[e.trp], p) - dist3(s.trp_positions[e.reference], p)) / s.meters_per_sample())
            .collect();
        TdoaVector { values, valid: vec![true; layout.len()] }
    }

    fn all_on(n: usize) -> MaskVector {
        MaskVector { mu: vec![true; n + 1], nu: vec![true; n] }
    }

    fn frame(s: &Scenario, t: usize, tdoa: TdoaVector) -> PreprocessedFrame {
        PreprocessedFrame { h_norm: Array2::zeros((s.num_trps(), 4)), tdoa, timestamp: t as f64, source_index: t }
    }

    #[test]
    fn objective_vanishes_at_truth() {
        let s = square();
        let u = [11.0, 7.5];
        let v = tdoa_objective(u, 0, &exact_tdoa(&s, u), &all_on(3), &s).unwrap();
        assert!(v < 1e-18, "{v}");
    }

    #[test]
    fn fully_masked_frame_is_unobservable() {
        let s = square();
        let tdoa = exact_tdoa(&s, [1.0, 1.0]);
        let mask = MaskVector { mu: vec![false; 4], nu: vec![false; 3] };
        assert!(matches!(tdoa_objective([0.0, 0.0], 9, &tdoa, &mask, &s), Err(Error::Unobservable { frame: 9, unmasked: 0 })));
        let one = MaskVector { mu: vec![true; 4], nu: vec![true, false, false] };
        assert!(matches!(tdoa_objective([0.0, 0.0], 9, &tdoa, &one, &s), Err(Error::Unobservable { unmasked: 1, .. })));
    }

    proptest! {
        #[test]
        fn objective_matches_direct_formula(
            u in proptest::array::uniform2(-10.0f64..40.0),
            vals in proptest::array::uniform3(-40.0f64..40.0),
            drop in 0usize..4,
        ) {
            let s = square();
            let tdoa = TdoaVector { values: vals.to_vec(), valid: vec![true; 3] };
            let mut nu = vec![true; 3];
            if drop < 3 { nu[drop] = false; }
            let mask = MaskVector { mu: vec![true; 4], nu: nu.clone() };
            let got = tdoa_objective(u, 0, &tdoa, &mask, &s).unwrap();
            let c = 299_792_458.0;
            let pt = [u[0], u[1], 1.5];
            let d = |x: [f64; 3]| ((x[0]-pt[0]).powi(2) + (x[1]-pt[1]).powi(2) + (x[2]-pt[2]).powi(2)).sqrt();
            let mut want = 0.0;
            for (l, trp) in [1usize, 2, 3].iter().enumerate() {
                if nu[l] {
                    let r = d(s.trp_positions[*trp]) - d(s.trp_positions[0]) - c * vals[l] / 122.88e6;
                    want += r * r;
                }
            }
            prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0));
            prop_assert!(got >= 0.0);
        }

        #[test]
        fn global_best_never_increases(seed in 0u64..500, cx in -40.0f64..40.0) {
            let b = Bounds::new([-50.0, -50.0], [50.0, 50.0]);
            let params = PsoParams { iterations: 40, swarm_size: 16, ..PsoParams::default() };
            let f = |u: Point2| ((u[0] - cx).abs() + 1.0).ln() + (u[1] * 3.0).sin().abs();
            let r = pso_solve(f, &b, &params, None, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(r.history.len(), 41);
            for w in r.history.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert!(b.contains(r.point));
        }
    }

    #[test]
    fn sphere_optimum_is_found() {
        let b = Bounds::new([-50.0, -50.0], [50.0, 50.0]);
        let r = pso_solve(
            |u| (u[0] - 3.0).powi(2) + (u[1] + 2.0).powi(2),
            &b,
            &PsoParams::default(),
            None,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        assert!((r.point[0] - 3.0).abs() < 1e-3 && (r.point[1] + 2.0).abs() < 1e-3, "{:?}", r.point);
    }

    #[test]
    fn constant_objective_returns_in_bounds_point() {
        let b = Bounds::new([-5.0, 2.0], [5.0, 3.0]);
        let r = pso_solve(|_| 4.25, &b, &PsoParams::default(), None, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(b.contains(r.point));
        assert_eq!(r.value, 4.25);
    }

    #[test]
    fn reflection_keeps_particles_inside() {
        assert_eq!(reflect(-1.0, -2.0, 0.0, 10.0), (1.0, 2.0));
        assert_eq!(reflect(12.0, 3.0, 0.0, 10.0), (8.0, -3.0));
        assert_eq!(reflect(-30.0, -30.0, 0.0, 10.0).0, 10.0);
        assert_eq!(reflect(4.0, 1.0, 0.0, 10.0), (4.0, 1.0));
    }

    #[test]
    fn solve_is_seed_deterministic() {
        let s = square();
        let frames: Vec<_> = (0..4).map(|t| frame(&s, t, exact_tdoa(&s, [5.0 + t as f64, 20.0]))).collect();
        let masks = vec![all_on(3); 4];
        let p = PsoParams { rng_seed: 3, ..PsoParams::default() };
        let a = solve_trajectory(&frames, &masks, &s, &p).unwrap();
        let b = solve_trajectory(&frames, &masks, &s, &p).unwrap();
        assert_eq!(a, b);
        for (t, e) in a.positions.iter().enumerate() {
            let e = e.unwrap();
            assert!((e[0] - 5.0 - t as f64).abs() < 1e-3 && (e[1] - 20.0).abs() < 1e-3, "{e:?}");
        }
    }

    #[test]
    fn static_ue_gives_matching_estimates() {
        let s = square();
        let frames: Vec<_> = (0..6).map(|t| frame(&s, t, exact_tdoa(&s, [17.0, 9.0]))).collect();
        for warm in [false, true] {
            let p = PsoParams { warm_start: warm, ..PsoParams::default() };
            let est = solve_trajectory(&frames, &vec![all_on(3); 6], &s, &p).unwrap();
            let pts: Vec<_> = est.positions.iter().map(|p| p.unwrap()).collect();
            for q in &pts {
                assert!((q[0] - pts[0][0]).abs() < 1e-4 && (q[1] - pts[0][1]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn unobservable_frames_become_gaps() {
        let s = square();
        let frames: Vec<_> = (0..3).map(|t| frame(&s, t, exact_tdoa(&s, [3.0, 3.0]))).collect();
        let off = MaskVector { mu: vec![false; 4], nu: vec![false; 3] };
        let est = solve_trajectory(&frames, &[off.clone(), all_on(3), off.clone()], &s, &PsoParams::default()).unwrap();
        assert_eq!(est.positions.iter().map(Option::is_some).collect::<Vec<_>>(), [false, true, false]);
        let none = solve_trajectory(&frames, &vec![off; 3], &s, &PsoParams::default()).unwrap();
        assert_eq!(none.gaps(), 3);
        assert!(crate::eval::evaluate(&none, &[[3.0, 3.0]; 3], &Default::default()).is_err());
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(PsoParams { swarm_size: 0, ..PsoParams::default() }.validate().is_err());
        assert!(PsoParams { inertia: -0.1, ..PsoParams::default() }.validate().is_err());
    }
}
