use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plane-to-plane projective map, row-major 3x3, acting on `(x, y, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub [f64; 9]);

const DET_EPS: f64 = 1e-12;

impl Homography {
    pub fn identity() -> Self {
        Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography([1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0])
    }

    /// Uniform scale `s` about `center`, then translation by `shift`.
    pub fn zoom(s: f64, center: [f64; 2], shift: [f64; 2]) -> Self {
        Homography([
            s,
            0.0,
            center[0] * (1.0 - s) + shift[0],
            0.0,
            s,
            center[1] * (1.0 - s) + shift[1],
            0.0,
            0.0,
            1.0,
        ])
    }

    /// Rotation by `angle` and scale `s` about `center`, translation, and a
    /// small projective term.
    pub fn similarity_with_perspective(
        angle: f64,
        s: f64,
        center: [f64; 2],
        shift: [f64; 2],
        persp: [f64; 2],
    ) -> Self {
        let (c, si) = (angle.cos() * s, angle.sin() * s);
        let to_origin = Homography::translation(-center[0], -center[1]);
        let rot = Homography([c, -si, 0.0, si, c, 0.0, persp[0], persp[1], 1.0]);
        let back = Homography::translation(center[0] + shift[0], center[1] + shift[1]);
        back.compose(&rot).compose(&to_origin)
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Homography) -> Homography {
        let (a, b) = (&self.0, &other.0);
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
            }
        }
        Homography(out)
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn inverse(&self) -> Result<Homography> {
        let m = &self.0;
        let det = self.determinant();
        if !det.is_finite() || det.abs() < DET_EPS {
            return Err(Error::Config(format!(
                "degenerate homography (determinant {:e})",
                det
            )));
        }
        let inv = 1.0 / det;
        Ok(Homography([
            (m[4] * m[8] - m[5] * m[7]) * inv,
            (m[2] * m[7] - m[1] * m[8]) * inv,
            (m[1] * m[5] - m[2] * m[4]) * inv,
            (m[5] * m[6] - m[3] * m[8]) * inv,
            (m[0] * m[8] - m[2] * m[6]) * inv,
            (m[2] * m[3] - m[0] * m[5]) * inv,
            (m[3] * m[7] - m[4] * m[6]) * inv,
            (m[1] * m[6] - m[0] * m[7]) * inv,
            (m[0] * m[4] - m[1] * m[3]) * inv,
        ]))
    }

    /// Maps a point; `None` when it lands on or behind the line at infinity.
    pub fn apply(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        let m = &self.0;
        let w = m[6] * p[0] + m[7] * p[1] + m[8];
        if w <= 1e-12 {
            return None;
        }
        Some([
            (m[0] * p[0] + m[1] * p[1] + m[2]) / w,
            (m[3] * p[0] + m[4] * p[1] + m[5]) / w,
        ])
    }
}
