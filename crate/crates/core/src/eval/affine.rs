//! Least-squares affine alignment between raw and local coordinates.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    /// Row-major `A` in `local = A * raw + b`.
    pub a: [[f64; 3]; 3],
    pub b: [f64; 3],
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self { a: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], b: [0.0; 3] }
    }

    fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.a[r][c])
    }

    fn from_parts(a: Matrix3<f64>, b: Vector3<f64>) -> Self {
        let mut out = Self { a: [[0.0; 3]; 3], b: [b[0], b[1], b[2]] };
        for r in 0..3 {
            for c in 0..3 {
                out.a[r][c] = a[(r, c)];
            }
        }
        out
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = self.b;
        for (r, o) in out.iter_mut().enumerate() {
            *o += self.a[r][0] * p[0] + self.a[r][1] * p[1] + self.a[r][2] * p[2];
        }
        out
    }

    /// `self ∘ inner`: applies `inner` first.
    pub fn compose(&self, inner: &AffineTransform) -> AffineTransform {
        let a = self.matrix() * inner.matrix();
        let b = self.matrix() * Vector3::from(inner.b) + Vector3::from(self.b);
        Self::from_parts(a, b)
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let inv = self
            .matrix()
            .try_inverse()
            .ok_or_else(|| Error::invalid("affine matrix is singular"))?;
        Ok(Self::from_parts(inv, -(inv * Vector3::from(self.b))))
    }
}

pub fn apply_affine(transform: &AffineTransform, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
    points.iter().map(|p| transform.apply_point(*p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub transform: AffineTransform,
    /// Root mean squared 3D residual over the anchors, meters.
    pub residual_rms_m: f64,
}

/// Solves `min sum ||A raw + b - local||^2` over all three output rows at
/// once through the augmented `[raw | 1]` design.
pub fn fit_affine(anchors: &[([f64; 3], [f64; 3])]) -> Result<AffineFit> {
    let n = anchors.len();
    let x = DMatrix::from_fn(n, 4, |r, c| if c < 3 { anchors[r].0[c] } else { 1.0 });
    let y = DMatrix::from_fn(n, 3, |r, c| anchors[r].1[c]);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-10 * smax.max(1.0);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < 4 {
        return Err(Error::RankDeficient { rank });
    }
    let p = svd.solve(&y, tol).map_err(|e| Error::invalid(e.to_string()))?;
    let a = Matrix3::from_fn(|r, c| p[(c, r)]);
    let b = Vector3::new(p[(3, 0)], p[(3, 1)], p[(3, 2)]);
    let transform = AffineTransform::from_parts(a, b);
    let resid = &x * &p - &y;
    let residual_rms_m = (resid.norm_squared() / n as f64).sqrt();
    Ok(AffineFit { transform, residual_rms_m })
}
