//! Quantized copy of the dictionary used to bound correlations cheaply.
//!
//! Each atom column is stored as `i16` codes with a per-column scale. A
//! screened correlation comes with a rigorous bound on its distance from the
//! exact value, so callers can discard atoms that provably cannot rank among
//! the most correlated ones and recompute the rest exactly.

use nalgebra::DMatrix;

const LANES: usize = 16;
const CODE_MAX: f64 = i16::MAX as f64;
/// Unit roundoff of `f32`.
const U32: f64 = 1.0 / (1u64 << 24) as f64;

#[derive(Clone, Debug)]
pub(crate) struct Screen {
    rows: usize,
    codes: Vec<i16>,
    scales: Vec<f64>,
    code_norms: Vec<f64>,
}

/// Screened correlations with per-atom error bounds.
pub(crate) struct Bounds {
    pub approx: Vec<f64>,
    pub error: Vec<f64>,
}

impl Screen {
    pub fn new(atoms: &DMatrix<f64>) -> Screen {
        let (rows, cols) = atoms.shape();
        let mut codes = Vec::with_capacity(rows * cols);
        let mut scales = Vec::with_capacity(cols);
        let mut code_norms = Vec::with_capacity(cols);
        for col in atoms.column_iter() {
            let max = col.amax();
            let scale = if max > 0.0 { max / CODE_MAX } else { 0.0 };
            let mut sq = 0.0;
            for &v in col.iter() {
                let q = if scale > 0.0 {
                    (v / scale).round().clamp(-CODE_MAX, CODE_MAX) as i16
                } else {
                    0
                };
                sq += f64::from(q) * f64::from(q);
                codes.push(q);
            }
            scales.push(scale);
            code_norms.push(sq.sqrt());
        }
        Screen {
            rows,
            codes,
            scales,
            code_norms,
        }
    }

    /// Approximate `dⱼᵀy` for every atom, each within `error[j]` of the exact value.
    pub fn bounds(&self, y: &[f64]) -> Bounds {
        debug_assert_eq!(y.len(), self.rows);
        let yf: Vec<f32> = y.iter().map(|&v| v as f32).collect();
        let y_l1: f64 = y.iter().map(|v| v.abs()).sum();
        let yf_l2 = yf.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        // Each lane sums at most ceil(rows/LANES) rounded products before the
        // lanes are combined.
        let terms = self.rows.div_ceil(LANES) + LANES + 1;
        let rounding = (terms as f64 + 1.0) * U32 * 1.01;
        // Covers the f64 evaluation of the exact correlation being compared against.
        let exact_rounding = (self.rows as f64 + 2.0) * f64::EPSILON;
        let mut approx = Vec::with_capacity(self.scales.len());
        let mut error = Vec::with_capacity(self.scales.len());
        for (j, col) in self.codes.chunks_exact(self.rows.max(1)).enumerate() {
            let scale = self.scales[j];
            approx.push(scale * f64::from(lane_dot(col, &yf)));
            let quantization = 0.5 * scale * y_l1 * (1.0 + 1e-6);
            let arithmetic = scale * self.code_norms[j] * yf_l2 * rounding;
            error.push((quantization + arithmetic + exact_rounding) * (1.0 + 1e-9));
        }
        Bounds { approx, error }
    }
}

fn lane_dot(q: &[i16], y: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let body = q.len() - q.len() % LANES;
    for (c, v) in q[..body].chunks_exact(LANES).zip(y[..body].chunks_exact(LANES)) {
        for k in 0..LANES {
            acc[k] += f32::from(c[k]) * v[k];
        }
    }
    for (k, (c, v)) in q[body..].iter().zip(&y[body..]).enumerate() {
        acc[k] += f32::from(*c) * v;
    }
    acc.iter().sum()
}
