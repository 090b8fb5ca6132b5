//! Grayscale images, bilinear warping into the canonical frame, spatial
//! gradients, and the Jacobian of the normalized warp.

use nalgebra::{DMatrix, DVector};

use crate::error::{MrlrError, Result};
use crate::transform::{SimilarityParams, PARAM_COUNT};

/// Geometry of the canonical (aligned) crop. `m = width · height`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
}

impl Frame {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(MrlrError::InvalidInput(format!(
                "frame dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Frame { width, height })
    }

    /// Number of pixels, the length of a vectorized sample.
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Canonical pixel coordinates in row-major order.
    pub fn coords(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.height).flat_map(move |y| (0..self.width).map(move |x| (x as f64, y as f64)))
    }
}

impl std::fmt::Display for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Row-major grayscale image. Intensities are nominally in `[0, 1]`; derived
/// images such as gradients may be signed.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(MrlrError::InvalidInput(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(MrlrError::mismatch(
                format!("{} pixels", width * height),
                format!("{} values", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MrlrError::InvalidInput(format!(
                "non-finite pixel value at index {i}"
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Reshapes a row-major vector back into an image of the given frame.
    pub fn from_vector(frame: Frame, v: &DVector<f64>) -> Result<Self> {
        Self::new(frame.width, frame.height, v.iter().copied().collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frame(&self) -> Frame {
        Frame {
            width: self.width,
            height: self.height,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear interpolation with clamp-to-edge outside `[0, w−1] × [0, h−1]`.
    #[inline]
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let (x0, x1, fx) = cell(x, self.width);
        let (y0, y1, fy) = cell(y, self.height);
        let row0 = y0 * self.width;
        let row1 = y1 * self.width;
        let top = self.data[row0 + x0] * (1.0 - fx) + self.data[row0 + x1] * fx;
        let bottom = self.data[row1 + x0] * (1.0 - fx) + self.data[row1 + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Image> {
        Image::new(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Clamped cell lookup along one axis: `(lower index, upper index, fraction)`.
#[inline]
fn cell(coord: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let c = if coord.is_nan() { 0.0 } else { coord.clamp(0.0, max) };
    let lo = c.floor();
    let i0 = lo as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, c - lo)
}

/// Resamples `img` into `frame`: output pixel `p` takes the value of `img` at
/// `τ(p)`. `τ` maps canonical coordinates into the observed image.
pub fn warp(img: &Image, tau: &SimilarityParams, frame: Frame) -> Result<Image> {
    let tau = SimilarityParams::new(tau.a, tau.b, tau.tx, tau.ty)?;
    let data = frame
        .coords()
        .map(|p| {
            let (x, y) = tau.apply(p);
            img.sample_bilinear(x, y)
        })
        .collect();
    Image::new(frame.width, frame.height, data)
}

/// Row-major vectorization scaled to unit l2 norm.
pub fn vectorize_normalize(img: &Image) -> Result<DVector<f64>> {
    normalize_vector(DVector::from_column_slice(img.data()))
}

/// Scales a vector to unit l2 norm.
pub fn normalize_vector(mut v: DVector<f64>) -> Result<DVector<f64>> {
    let norm = v.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(MrlrError::ZeroNorm(format!(
            "cannot normalize a vector with norm {norm}"
        )));
    }
    v /= norm;
    Ok(v)
}

/// Central differences in the interior, one-sided differences on the border.
pub fn spatial_gradient(img: &Image) -> Result<(Image, Image)> {
    let (w, h) = (img.width, img.height);
    if w < 2 || h < 2 {
        return Err(MrlrError::InvalidInput(format!(
            "gradient needs at least 2x2 pixels, got {w}x{h}"
        )));
    }
    let gx = Image::from_fn(w, h, |x, y| {
        if x == 0 {
            img.get(1, y) - img.get(0, y)
        } else if x == w - 1 {
            img.get(w - 1, y) - img.get(w - 2, y)
        } else {
            0.5 * (img.get(x + 1, y) - img.get(x - 1, y))
        }
    })?;
    let gy = Image::from_fn(w, h, |x, y| {
        if y == 0 {
            img.get(x, 1) - img.get(x, 0)
        } else if y == h - 1 {
            img.get(x, h - 1) - img.get(x, h - 2)
        } else {
            0.5 * (img.get(x, y + 1) - img.get(x, y - 1))
        }
    })?;
    Ok((gx, gy))
}

/// `m × 4` derivative of the normalized warp with respect to `(a, b, tx, ty)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianMatrix(DMatrix<f64>);

impl JacobianMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.ncols() != PARAM_COUNT {
            return Err(MrlrError::mismatch(
                format!("{PARAM_COUNT} Jacobian columns"),
                matrix.ncols(),
            ));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(MrlrError::InvalidInput("non-finite Jacobian entry".into()));
        }
        Ok(JacobianMatrix(matrix))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

impl std::ops::Deref for JacobianMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Normalized warp and its Jacobian at one transform.
#[derive(Clone, Debug)]
pub struct Linearization {
    /// Unit-norm vectorized warp `ŷ`.
    pub y_hat: DVector<f64>,
    /// Norm of the raw warp before normalization.
    pub norm: f64,
    pub jacobian: JacobianMatrix,
}

/// An observed image with its spatial gradients, computed once and reused for
/// every linearization during alignment.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    image: Image,
    gx: Image,
    gy: Image,
}

impl PreparedImage {
    pub fn new(image: Image) -> Result<Self> {
        let (gx, gy) = spatial_gradient(&image)?;
        Ok(PreparedImage { image, gx, gy })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn warp(&self, tau: &SimilarityParams, frame: Frame) -> Result<Image> {
        warp(&self.image, tau, frame)
    }

    /// Evaluates `ŷ(τ)` and `J = ∂ŷ/∂τ` by the chain rule through the sampled
    /// gradients of the observed image.
    pub fn linearize(&self, tau: &SimilarityParams, frame: Frame) -> Result<Linearization> {
        let tau = SimilarityParams::new(tau.a, tau.b, tau.tx, tau.ty)?;
        let m = frame.pixel_count();
        let max_x = (self.image.width - 1) as f64;
        let max_y = (self.image.height - 1) as f64;
        let mut values = DVector::zeros(m);
        let mut dv = DMatrix::zeros(m, PARAM_COUNT);
        for (row, p) in frame.coords().enumerate() {
            let (x, y) = tau.apply(p);
            values[row] = self.image.sample_bilinear(x, y);
            let gx = edge_weight(x, max_x) * self.gx.sample_bilinear(x, y);
            let gy = edge_weight(y, max_y) * self.gy.sample_bilinear(x, y);
            let (dx, dy) = SimilarityParams::point_derivatives(p);
            for k in 0..PARAM_COUNT {
                dv[(row, k)] = gx * dx[k] + gy * dy[k];
            }
        }
        let norm = values.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(MrlrError::ZeroNorm(format!(
                "warp under {tau:?} has norm {norm}"
            )));
        }
        let y_hat = values / norm;
        // (I − ŷŷᵀ) dv / ‖v‖
        let proj = dv.tr_mul(&y_hat);
        for k in 0..PARAM_COUNT {
            let coef = proj[k];
            let mut col = dv.column_mut(k);
            col.axpy(-coef, &y_hat, 1.0);
            col /= norm;
        }
        Ok(Linearization {
            y_hat,
            norm,
            jacobian: JacobianMatrix::new(dv)?,
        })
    }
}

/// The clamped sampler is flat along an axis outside `[0, max]`, so the
/// gradient vanishes there; exactly on the edge only one side has slope and
/// the symmetric derivative is half of it.
fn edge_weight(c: f64, max: f64) -> f64 {
    if c < 0.0 || c > max {
        0.0
    } else if c == 0.0 || c == max {
        0.5
    } else {
        1.0
    }
}

/// Jacobian of `vectorize_normalize(warp(img, τ, frame))` with respect to `τ`.
pub fn jacobian(img: &Image, tau: &SimilarityParams, frame: Frame) -> Result<JacobianMatrix> {
    Ok(PreparedImage::new(img.clone())?
        .linearize(tau, frame)?
        .jacobian)
}
