//! Residuals of the masked TDoA and displacement losses and their
//! gradients with respect to the 2D embedding.

use crate::geometry::SPEED_OF_LIGHT;
use crate::scalar::{signum0, Real};

/// Guard on Euclidean norms before dividing by them.
pub const NORM_GUARD: f64 = 1e-12;

/// `| ||x_m - u|| - ||x_ref - u|| - c * dtau / f_s |` with the embedding
/// lifted to the UE height. All lengths in meters.
pub fn tdoa_residual(
    u_hat: [f64; 2],
    x_m: [f64; 3],
    x_ref: [f64; 3],
    dtau_samples: f64,
    sample_rate_hz: f64,
    ue_height_m: f64,
) -> f64 {
    tdoa_residual_grad(
        u_hat,
        x_m,
        x_ref,
        dtau_samples * SPEED_OF_LIGHT / sample_rate_hz,
        ue_height_m,
    )
    .0
}

/// Residual with a measured range difference in meters, and its
/// subgradient with respect to `u`.
#[inline]
pub fn tdoa_residual_grad<T: Real>(u: [T; 2], x_m: [T; 3], x_ref: [T; 3], range_diff: T, height: T) -> (T, [T; 2]) {
    let guard = T::of(NORM_GUARD);
    let d = |x: [T; 3]| {
        let v = [u[0] - x[0], u[1] - x[1], height - x[2]];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        (n, v)
    };
    let (n_m, v_m) = d(x_m);
    let (n_r, v_r) = d(x_ref);
    let r = n_m - n_r - range_diff;
    let s = signum0(r);
    let g_m = s / n_m.max(guard);
    let g_r = s / n_r.max(guard);
    (r.abs(), [g_m * v_m[0] - g_r * v_r[0], g_m * v_m[1] - g_r * v_r[1]])
}

/// `| ||u_i - u_j|| - d_hat |`.
pub fn displacement_loss(u_i: [f64; 2], u_j: [f64; 2], d_hat: f64) -> f64 {
    displacement_residual_grad(u_i, u_j, d_hat).0
}

/// Displacement residual and its subgradient with respect to `u_i`
/// (the gradient for `u_j` is the negation).
#[inline]
pub fn displacement_residual_grad<T: Real>(u_i: [T; 2], u_j: [T; 2], d_hat: T) -> (T, [T; 2]) {
    let v = [u_i[0] - u_j[0], u_i[1] - u_j[1]];
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    let r = n - d_hat;
    let g = signum0(r) / n.max(T::of(NORM_GUARD));
    (r.abs(), [g * v[0], g * v[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm3(a: [f64; 3], b: [f64; 3]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    #[test]
    fn tdoa_residual_examples() {
        let x_m = [0.0, 0.0, 8.0];
        let x_r = [40.0, 0.0, 8.0];
        let u = [10.0, 5.0];
        let fs = 122.88e6;
        let truth = norm3(x_m, [10.0, 5.0, 1.5]) - norm3(x_r, [10.0, 5.0, 1.5]);
        let dtau = truth * fs / SPEED_OF_LIGHT;
        assert!(tdoa_residual(u, x_m, x_r, dtau, fs, 1.5) < 1e-9);
        assert_eq!(tdoa_residual([3.0, -7.0], x_m, x_m, 0.0, fs, 1.5), 0.0);
    }

    proptest! {
        #[test]
        fn tdoa_residual_matches_direct_formula(
            u in proptest::array::uniform2(-50.0f64..50.0),
            xm in proptest::array::uniform3(-50.0f64..50.0),
            xr in proptest::array::uniform3(-50.0f64..50.0),
            dtau in -30.0f64..30.0, h in 0.0f64..3.0,
        ) {
            let fs = 122.88e6;
            let ut = [u[0], u[1], h];
            let want = (norm3(xm, ut) - norm3(xr, ut) - 299_792_458.0 * dtau / fs).abs();
            prop_assert!((tdoa_residual(u, xm, xr, dtau, fs, h) - want).abs() < 1e-9);
        }

        #[test]
        fn residual_gradients_match_central_differences(
            u in proptest::array::uniform2(-20.0f64..20.0),
            v in proptest::array::uniform2(-20.0f64..20.0),
            xm in proptest::array::uniform3(-30.0f64..30.0),
            xr in proptest::array::uniform3(-30.0f64..30.0),
            rd in -10.0f64..10.0, d in 0.0f64..10.0,
        ) {
            let h = 1e-5;
            let (r0, g) = tdoa_residual_grad(u, xm, xr, rd, 1.5);
            let (q0, gd) = displacement_residual_grad(u, v, d);
            // skip points too close to a kink of |.| for a clean difference
            prop_assume!(r0 > 1e-3 && q0 > 1e-3);
            for k in 0..2 {
                let mut p = u; p[k] += h;
                let mut m = u; m[k] -= h;
                let fd = (tdoa_residual_grad(p, xm, xr, rd, 1.5).0 - tdoa_residual_grad(m, xm, xr, rd, 1.5).0) / (2.0 * h);
                prop_assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1e-2));
                let fd = (displacement_loss(p, v, d) - displacement_loss(m, v, d)) / (2.0 * h);
                prop_assert!((fd - gd[k]).abs() <= 1e-4 * fd.abs().max(1e-2));
            }
        }
    }

    #[test]
    fn displacement_examples() {
        assert_eq!(displacement_loss([0.0, 0.0], [3.0, 0.0], 3.0), 0.0);
        assert_eq!(displacement_loss([1.0, 1.0], [1.0, 1.0], 2.0), 2.0);
        // coincident points: guarded gradient is finite
        let (_, g) = displacement_residual_grad([1.0f64, 1.0], [1.0, 1.0], 2.0);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn exact_fit_has_zero_subgradient() {
        let (r, g) = displacement_residual_grad([0.0f64, 0.0], [3.0, 4.0], 5.0);
        assert_eq!(r, 0.0);
        assert_eq!(g, [0.0, 0.0]);
    }
}
