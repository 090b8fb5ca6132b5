//! Similarity transforms acting on image coordinates.
//!
//! A transform is stored as `(a, b, tx, ty)` with `a = s·cosθ`, `b = s·sinθ`,
//! mapping `(x, y) ↦ (a·x − b·y + tx, b·x + a·y + ty)`. The action is linear in
//! the four parameters, so a Gauss-Newton step is a plain vector addition.

use crate::error::{MrlrError, Result};
use crate::image::Frame;

/// Number of transform parameters.
pub const PARAM_COUNT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityParams {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

/// Axis-aligned rectangle in observed-image pixel coordinates, as produced by a
/// face detector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl SimilarityParams {
    pub const IDENTITY: SimilarityParams = SimilarityParams {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(a: f64, b: f64, tx: f64, ty: f64) -> Result<Self> {
        let tau = SimilarityParams { a, b, tx, ty };
        tau.validate()?;
        Ok(tau)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        SimilarityParams { a: 1.0, b: 0.0, tx, ty }
    }

    /// Builds `(s cosθ, s sinθ, tx, ty)`.
    pub fn from_scale_rotation(scale: f64, theta: f64, tx: f64, ty: f64) -> Result<Self> {
        Self::new(scale * theta.cos(), scale * theta.sin(), tx, ty)
    }

    /// Scale about `center` followed by rotation about the same point.
    pub fn about_point(scale: f64, theta: f64, center: (f64, f64)) -> Result<Self> {
        let linear = Self::from_scale_rotation(scale, theta, 0.0, 0.0)?;
        let (cx, cy) = center;
        let (rx, ry) = linear.apply((cx, cy));
        Self::new(linear.a, linear.b, cx - rx, cy - ry)
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    pub fn angle(&self) -> f64 {
        self.b.atan2(self.a)
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    fn validate(&self) -> Result<()> {
        if ![self.a, self.b, self.tx, self.ty].iter().all(|v| v.is_finite()) {
            return Err(MrlrError::InvalidTransform(format!(
                "non-finite parameters {self:?}"
            )));
        }
        if self.a * self.a + self.b * self.b <= 0.0 {
            return Err(MrlrError::InvalidTransform(format!(
                "degenerate similarity {self:?} (a² + b² = 0)"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (
            self.a * x - self.b * y + self.tx,
            self.b * x + self.a * y + self.ty,
        )
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &SimilarityParams) -> SimilarityParams {
        let (tx, ty) = self.apply((other.tx, other.ty));
        SimilarityParams {
            a: self.a * other.a - self.b * other.b,
            b: self.a * other.b + self.b * other.a,
            tx,
            ty,
        }
    }

    pub fn inverse(&self) -> Result<SimilarityParams> {
        self.validate()?;
        let s2 = self.a * self.a + self.b * self.b;
        let a = self.a / s2;
        let b = -self.b / s2;
        Ok(SimilarityParams {
            a,
            b,
            tx: -(a * self.tx - b * self.ty),
            ty: -(b * self.tx + a * self.ty),
        })
    }

    pub fn to_vector(&self) -> [f64; PARAM_COUNT] {
        [self.a, self.b, self.tx, self.ty]
    }

    pub fn from_vector(v: [f64; PARAM_COUNT]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// `τ + Δτ` in parameter space.
    pub fn add_step(&self, step: &[f64; PARAM_COUNT]) -> Result<SimilarityParams> {
        Self::new(
            self.a + step[0],
            self.b + step[1],
            self.tx + step[2],
            self.ty + step[3],
        )
    }

    /// Maps the canonical frame onto a detector box. Scale is isotropic and
    /// taken from the box width; the box's top-left corner anchors the frame
    /// origin.
    pub fn from_rect(rect: Rect, frame: Frame) -> Result<SimilarityParams> {
        if !(rect.width > 0.0 && rect.height > 0.0)
            || !rect.x.is_finite()
            || !rect.y.is_finite()
            || !rect.width.is_finite()
            || !rect.height.is_finite()
        {
            return Err(MrlrError::InvalidInput(format!(
                "detector box must have positive finite size, got {rect:?}"
            )));
        }
        Self::new(rect.width / frame.width as f64, 0.0, rect.x, rect.y)
    }

    /// Partial derivatives of the mapped point with respect to `(a, b, tx, ty)`:
    /// returns `(∂x'/∂τ, ∂y'/∂τ)` at canonical point `(x, y)`.
    #[inline]
    pub fn point_derivatives((x, y): (f64, f64)) -> ([f64; PARAM_COUNT], [f64; PARAM_COUNT]) {
        ([x, -y, 1.0, 0.0], [y, x, 0.0, 1.0])
    }
}
