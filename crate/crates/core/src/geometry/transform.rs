//! Parametric frame-to-reference coordinate maps.
//!
//! All kinds act on coordinates centred on the image centre
//! `((W-1)/2, (H-1)/2)`, with `x` the column and `y` the row. A transform
//! `T` for frame `k` maps a pixel of frame `k` to the point of the reference
//! image it observes, so frame `k` is `warp(reference, T)`.
//!
//! | kind        | params                                  | identity          |
//! |-------------|-----------------------------------------|-------------------|
//! | translation | `[tx, ty]`                              | `[0, 0]`          |
//! | rigid       | `[theta, tx, ty]` (radians)             | `[0, 0, 0]`       |
//! | affine      | `[a, b, tx, c, d, ty]`                  | `[1,0,0,0,1,0]`   |
//! | perspective | `[h0..h7]`, denominator `h6 X + h7 Y + 1` | `[1,0,0,0,1,0,0,0]` |

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest perspective denominator accepted inside the frame.
pub const MIN_DENOMINATOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Translation,
    Rigid,
    Affine,
    Perspective,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::Translation,
        TransformKind::Rigid,
        TransformKind::Affine,
        TransformKind::Perspective,
    ];

    pub fn param_count(self) -> usize {
        match self {
            TransformKind::Translation => 2,
            TransformKind::Rigid => 3,
            TransformKind::Affine => 6,
            TransformKind::Perspective => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Translation => "translation",
            TransformKind::Rigid => "rigid",
            TransformKind::Affine => "affine",
            TransformKind::Perspective => "perspective",
        }
    }

    pub fn identity_params(self) -> Vec<f64> {
        match self {
            TransformKind::Translation => vec![0.0; 2],
            TransformKind::Rigid => vec![0.0; 3],
            TransformKind::Affine => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            TransformKind::Perspective => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        }
    }

    /// Indices of the translation components within the parameter vector.
    pub fn translation_indices(self) -> (usize, usize) {
        match self {
            TransformKind::Translation => (0, 1),
            TransformKind::Rigid => (1, 2),
            TransformKind::Affine | TransformKind::Perspective => (2, 5),
        }
    }

    /// Position of `self` in the generality order translation < rigid < affine < perspective.
    fn rank(self) -> u8 {
        match self {
            TransformKind::Translation => 0,
            TransformKind::Rigid => 1,
            TransformKind::Affine => 2,
            TransformKind::Perspective => 3,
        }
    }

    pub fn most_general(self, other: TransformKind) -> TransformKind {
        if self.rank() >= other.rank() {
            self
        } else {
            other
        }
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translation" => Ok(TransformKind::Translation),
            "rigid" => Ok(TransformKind::Rigid),
            "affine" => Ok(TransformKind::Affine),
            "perspective" => Ok(TransformKind::Perspective),
            other => Err(Error::Config(format!("unknown transform kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub kind: TransformKind,
    pub params: Vec<f64>,
}

/// Mapped point together with its derivatives w.r.t. every parameter.
#[derive(Clone, Debug)]
pub struct MappedPoint {
    pub x: f64,
    pub y: f64,
    pub dx: [f64; 8],
    pub dy: [f64; 8],
}

impl TransformParams {
    pub fn new(kind: TransformKind, params: Vec<f64>) -> Result<Self> {
        if params.len() != kind.param_count() {
            return Err(Error::ParamCount {
                kind: kind.name(),
                expected: kind.param_count(),
                got: params.len(),
            });
        }
        Ok(Self { kind, params })
    }

    pub fn identity(kind: TransformKind) -> Self {
        Self {
            kind,
            params: kind.identity_params(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            kind: TransformKind::Translation,
            params: vec![tx, ty],
        }
    }

    /// Rotation by `theta` radians about the image centre followed by a shift.
    pub fn rigid(theta: f64, tx: f64, ty: f64) -> Self {
        Self {
            kind: TransformKind::Rigid,
            params: vec![theta, tx, ty],
        }
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        self.params
            .iter()
            .zip(self.kind.identity_params())
            .all(|(a, b)| (a - b).abs() <= tol)
    }

    pub fn translation_part(&self) -> (f64, f64) {
        let (i, j) = self.kind.translation_indices();
        (self.params[i], self.params[j])
    }

    /// Maps a centred coordinate. Returns the mapped centred coordinate and
    /// the perspective denominator (1 for non-projective kinds).
    #[inline]
    pub fn map_centered(&self, cx: f64, cy: f64) -> (f64, f64, f64) {
        let p = &self.params;
        match self.kind {
            TransformKind::Translation => (cx + p[0], cy + p[1], 1.0),
            TransformKind::Rigid => {
                let (s, c) = p[0].sin_cos();
                (c * cx - s * cy + p[1], s * cx + c * cy + p[2], 1.0)
            }
            TransformKind::Affine => (
                p[0] * cx + p[1] * cy + p[2],
                p[3] * cx + p[4] * cy + p[5],
                1.0,
            ),
            TransformKind::Perspective => {
                let w = p[6] * cx + p[7] * cy + 1.0;
                (
                    (p[0] * cx + p[1] * cy + p[2]) / w,
                    (p[3] * cx + p[4] * cy + p[5]) / w,
                    w,
                )
            }
        }
    }

    /// Maps pixel `(x, y)` of an image with the given centre.
    #[inline]
    pub fn map(&self, x: f64, y: f64, center: (f64, f64)) -> (f64, f64) {
        let (mx, my, _) = self.map_centered(x - center.0, y - center.1);
        (mx + center.0, my + center.1)
    }

    /// Mapped pixel position plus its parameter derivatives.
    pub fn map_with_jacobian(&self, x: f64, y: f64, center: (f64, f64)) -> MappedPoint {
        let cx = x - center.0;
        let cy = y - center.1;
        let p = &self.params;
        let mut dx = [0.0; 8];
        let mut dy = [0.0; 8];
        let (mx, my) = match self.kind {
            TransformKind::Translation => {
                dx[0] = 1.0;
                dy[1] = 1.0;
                (cx + p[0], cy + p[1])
            }
            TransformKind::Rigid => {
                let (s, c) = p[0].sin_cos();
                dx[0] = -s * cx - c * cy;
                dy[0] = c * cx - s * cy;
                dx[1] = 1.0;
                dy[2] = 1.0;
                (c * cx - s * cy + p[1], s * cx + c * cy + p[2])
            }
            TransformKind::Affine => {
                dx[0] = cx;
                dx[1] = cy;
                dx[2] = 1.0;
                dy[3] = cx;
                dy[4] = cy;
                dy[5] = 1.0;
                (p[0] * cx + p[1] * cy + p[2], p[3] * cx + p[4] * cy + p[5])
            }
            TransformKind::Perspective => {
                let w = p[6] * cx + p[7] * cy + 1.0;
                let nx = p[0] * cx + p[1] * cy + p[2];
                let ny = p[3] * cx + p[4] * cy + p[5];
                let mx = nx / w;
                let my = ny / w;
                dx[0] = cx / w;
                dx[1] = cy / w;
                dx[2] = 1.0 / w;
                dy[3] = cx / w;
                dy[4] = cy / w;
                dy[5] = 1.0 / w;
                dx[6] = -mx * cx / w;
                dx[7] = -mx * cy / w;
                dy[6] = -my * cx / w;
                dy[7] = -my * cy / w;
                (mx, my)
            }
        };
        MappedPoint {
            x: mx + center.0,
            y: my + center.1,
            dx,
            dy,
        }
    }

    /// Fails if a perspective denominator gets too close to zero anywhere
    /// inside a `width x height` frame.
    pub fn check_invertible(&self, width: usize, height: usize) -> Result<()> {
        if self.kind != TransformKind::Perspective {
            return Ok(());
        }
        let (cx, cy) = center_of(width, height);
        // The denominator is affine in (x, y), so its minimum is at a corner.
        for &(x, y) in &[
            (0.0, 0.0),
            (width as f64 - 1.0, 0.0),
            (0.0, height as f64 - 1.0),
            (width as f64 - 1.0, height as f64 - 1.0),
        ] {
            let (_, _, w) = self.map_centered(x - cx, y - cy);
            if w <= MIN_DENOMINATOR {
                return Err(Error::DegenerateTransform {
                    denominator: w,
                    x,
                    y,
                });
            }
        }
        Ok(())
    }

    /// Homogeneous matrix acting on centred coordinates.
    pub fn to_matrix(&self) -> Matrix3<f64> {
        let p = &self.params;
        match self.kind {
            TransformKind::Translation => {
                Matrix3::new(1.0, 0.0, p[0], 0.0, 1.0, p[1], 0.0, 0.0, 1.0)
            }
            TransformKind::Rigid => {
                let (s, c) = p[0].sin_cos();
                Matrix3::new(c, -s, p[1], s, c, p[2], 0.0, 0.0, 1.0)
            }
            TransformKind::Affine => {
                Matrix3::new(p[0], p[1], p[2], p[3], p[4], p[5], 0.0, 0.0, 1.0)
            }
            TransformKind::Perspective => {
                Matrix3::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], 1.0)
            }
        }
    }

    /// Builds parameters of `kind` from a homogeneous matrix. Components the
    /// kind cannot represent are dropped (rigid keeps the rotation angle of
    /// the linear part).
    pub fn from_matrix(kind: TransformKind, m: &Matrix3<f64>) -> Self {
        let m = m / m[(2, 2)];
        let params = match kind {
            TransformKind::Translation => vec![m[(0, 2)], m[(1, 2)]],
            TransformKind::Rigid => {
                vec![m[(1, 0)].atan2(m[(0, 0)]), m[(0, 2)], m[(1, 2)]]
            }
            TransformKind::Affine => vec![
                m[(0, 0)],
                m[(0, 1)],
                m[(0, 2)],
                m[(1, 0)],
                m[(1, 1)],
                m[(1, 2)],
            ],
            TransformKind::Perspective => vec![
                m[(0, 0)],
                m[(0, 1)],
                m[(0, 2)],
                m[(1, 0)],
                m[(1, 1)],
                m[(1, 2)],
                m[(2, 0)],
                m[(2, 1)],
            ],
        };
        Self { kind, params }
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .to_matrix()
            .try_inverse()
            .ok_or(Error::DegenerateTransform {
                denominator: 0.0,
                x: 0.0,
                y: 0.0,
            })?;
        Ok(Self::from_matrix(self.kind, &inv))
    }

    /// The sampling map of `warp(warp(x, first), second)`: a point is first
    /// mapped by `second`, then by `first`.
    pub fn then_sample(first: &Self, second: &Self) -> Self {
        let kind = first.kind.most_general(second.kind);
        let m = first.to_matrix() * second.to_matrix();
        Self::from_matrix(kind, &m)
    }

    /// Re-expresses the transform on a grid `factor` times finer: translation
    /// scales by `factor`, projective terms by `1/factor`, the linear part is
    /// unchanged.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut params = self.params.clone();
        let (i, j) = self.kind.translation_indices();
        params[i] *= factor;
        params[j] *= factor;
        if self.kind == TransformKind::Perspective {
            params[6] /= factor;
            params[7] /= factor;
        }
        Self {
            kind: self.kind,
            params,
        }
    }

    /// Converts to a (possibly more general) kind.
    pub fn promote(&self, kind: TransformKind) -> Self {
        if kind == self.kind {
            return self.clone();
        }
        Self::from_matrix(kind, &self.to_matrix())
    }

    /// Largest displacement of the frame corners, in pixels.
    pub fn max_corner_displacement(&self, width: usize, height: usize) -> f64 {
        let c = center_of(width, height);
        let (w, h) = (width as f64 - 1.0, height as f64 - 1.0);
        [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
            .iter()
            .map(|&(x, y)| {
                let (mx, my) = self.map(x, y, c);
                ((mx - x).powi(2) + (my - y).powi(2)).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn center_of(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}
