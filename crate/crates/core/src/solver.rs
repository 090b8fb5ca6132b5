//! Step solver for the linearized alignment problem
//!
//! ```text
//! min ‖C x‖² + ‖e‖²   s.t.   ŷ + J Δτ = D x + e
//! ```
//!
//! which is the least-squares problem `min ‖u − R z‖²` with
//! `R = [[D, −J], [C, 0]]`, `u = [ŷ; 0]`, `z = [x; Δτ]`.
//!
//! [`solve_naive`] factors the whole system and serves as the reference.
//! [`solve_block`] eliminates `x` through the Schur complement
//! `Z₂ = T₃ − T₂ᵀ T₁⁻¹ T₂` with `T₁ = DᵀD + CᵀC`, `T₂ = DᵀJ`, `T₃ = JᵀJ`,
//! so only a `q × q` system is solved per inner iteration once `T₁⁻¹` is cached.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{MrlrError, Result};

/// Condition estimate above which a factorization is retried with damping.
pub const MAX_CONDITION: f64 = 1e12;
/// Relative size of the ridge added on the damped retry.
pub const DAMPING_SCALE: f64 = 1e-8;

const BLOCK: usize = 64;

/// `T₁ = DᵀD + CᵀC` and its inverse for one locality-constrained dictionary.
///
/// `T₁` does not depend on `τ`, so one cache serves every inner iteration of an
/// outer iteration.
#[derive(Clone, Debug)]
pub struct GramCache {
    t1: DMatrix<f64>,
    t1_inv: DMatrix<f64>,
    damping: f64,
}

impl GramCache {
    /// Builds the cache from the sub-dictionary atoms and their penalties.
    pub fn build(atoms: &DMatrix<f64>, penalties: &DVector<f64>) -> Result<Self> {
        if atoms.ncols() != penalties.len() {
            return Err(MrlrError::mismatch(
                format!("{} penalties", atoms.ncols()),
                penalties.len(),
            ));
        }
        Self::from_gram(symmetrize(atoms.transpose() * atoms), penalties)
    }

    /// Builds the cache from a precomputed `DᵀD`.
    pub fn from_gram(gram: DMatrix<f64>, penalties: &DVector<f64>) -> Result<Self> {
        let n = penalties.len();
        if gram.shape() != (n, n) {
            return Err(MrlrError::mismatch(format!("{n}x{n} Gram matrix"), format!("{:?}", gram.shape())));
        }
        let mut t1 = gram;
        for (i, c) in penalties.iter().enumerate() {
            t1[(i, i)] += c * c;
        }
        let (chol, damping) = factor_spd(&t1, "T1")?;
        let t1_inv = spd_inverse(&chol);
        Ok(GramCache { t1, t1_inv, damping })
    }

    pub fn t1(&self) -> &DMatrix<f64> {
        &self.t1
    }

    pub fn t1_inv(&self) -> &DMatrix<f64> {
        &self.t1_inv
    }

    /// Ridge added to `T₁` before inversion (0 when none was needed).
    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn dim(&self) -> usize {
        self.t1.nrows()
    }
}

/// Solution of one linearized step.
#[derive(Clone, Debug)]
pub struct StepSolution {
    /// `Δτ`, one entry per transform parameter.
    pub delta_tau: DVector<f64>,
    /// `‖C x‖² + ‖e‖²` at the solution.
    pub objective: f64,
    /// Coefficients; only the reference solver produces them.
    pub x: Option<DVector<f64>>,
    /// `‖u − R z‖₂`.
    pub residual_norm: f64,
}

impl StepSolution {
    pub fn step_norm(&self) -> f64 {
        self.delta_tau.norm()
    }
}

fn check_dims(
    atoms: &DMatrix<f64>,
    penalties: &DVector<f64>,
    jacobian: &DMatrix<f64>,
    y_hat: &DVector<f64>,
) -> Result<()> {
    let (m, n) = atoms.shape();
    if penalties.len() != n {
        return Err(MrlrError::mismatch(format!("{n} penalties"), penalties.len()));
    }
    if jacobian.nrows() != m || jacobian.ncols() == 0 {
        return Err(MrlrError::mismatch(
            format!("Jacobian with {m} rows"),
            format!("{}x{}", jacobian.nrows(), jacobian.ncols()),
        ));
    }
    if y_hat.len() != m {
        return Err(MrlrError::mismatch(format!("query of length {m}"), y_hat.len()));
    }
    Ok(())
}

/// Iterative-refinement sweeps applied to the SVD least-squares solution.
const REFINEMENT_SWEEPS: usize = 3;

/// Reference solver: SVD least squares on the stacked system `R z = u`, after a
/// QR reduction of its rows.
///
/// Rank-deficient systems get the minimum-norm solution; only an all-zero or
/// non-finite `R` is rejected.
pub fn solve_naive(
    atoms: &DMatrix<f64>,
    penalties: &DVector<f64>,
    jacobian: &DMatrix<f64>,
    y_hat: &DVector<f64>,
) -> Result<StepSolution> {
    check_dims(atoms, penalties, jacobian, y_hat)?;
    let (m, n) = atoms.shape();
    let q = jacobian.ncols();
    let mut r = DMatrix::zeros(m + n, n + q);
    r.view_mut((0, 0), (m, n)).copy_from(atoms);
    r.view_mut((0, n), (m, q)).copy_from(&(-jacobian));
    for (i, c) in penalties.iter().enumerate() {
        r[(m + i, i)] = *c;
    }
    let mut u = DVector::zeros(m + n);
    u.rows_mut(0, m).copy_from(y_hat);

    if r.iter().any(|v| !v.is_finite()) {
        return Err(MrlrError::Singular("non-finite entries in the stacked system".into()));
    }
    // The rows are first reduced by Householder QR; `‖Rz − u‖` and
    // `‖R_f z − Qᵀu‖` differ by a constant, so both share the minimum-norm
    // minimizer. nalgebra's SVD can reconstruct its input only to about 1e-6
    // relative, so the SVD solution is polished by iterative refinement.
    let qr = r.clone().qr();
    let qtu = qr.q().tr_mul(&u);
    let rf = qr.r();
    let svd = rf.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) {
        return Err(MrlrError::Singular("stacked system is identically zero".into()));
    }
    let eps = smax * (m + n).max(n + q) as f64 * f64::EPSILON;
    let pinv_solve = |rhs: &DVector<f64>| {
        svd.solve(rhs, eps)
            .map_err(|e| MrlrError::Singular(e.to_string()))
    };
    let mut z = pinv_solve(&qtu)?;
    for _ in 0..REFINEMENT_SWEEPS {
        z += pinv_solve(&(&qtu - &rf * &z))?;
    }

    let x = z.rows(0, n).into_owned();
    let delta_tau = z.rows(n, q).into_owned();
    let residual_norm = (&u - &r * &z).norm();
    Ok(StepSolution {
        objective: objective(atoms, penalties, &x, &delta_tau, jacobian, y_hat)?,
        delta_tau,
        x: Some(x),
        residual_norm,
    })
}

/// Block-elimination solver using a cached `T₁⁻¹`. Computes `Δτ` without
/// forming `x`.
pub fn solve_block(
    atoms: &DMatrix<f64>,
    penalties: &DVector<f64>,
    jacobian: &DMatrix<f64>,
    y_hat: &DVector<f64>,
    cache: &GramCache,
) -> Result<StepSolution> {
    check_dims(atoms, penalties, jacobian, y_hat)?;
    let (m, n) = atoms.shape();
    if cache.dim() != n {
        return Err(MrlrError::mismatch(format!("Gram cache of size {n}"), cache.dim()));
    }
    let q = jacobian.ncols();

    // Dᵀ[ŷ, J] in a single pass over D.
    let mut rhs = DMatrix::zeros(m, q + 1);
    rhs.set_column(0, y_hat);
    rhs.columns_mut(1, q).copy_from(jacobian);
    let dt_rhs = atoms.tr_mul(&rhs);
    let dt_y = dt_rhs.column(0);
    let t2 = dt_rhs.columns(1, q);

    // T₁⁻¹[Dᵀŷ, T₂]
    let solved = cache.t1_inv() * &dt_rhs;
    let w = solved.column(0);
    let p = solved.columns(1, q);

    let jt_y = jacobian.tr_mul(y_hat);
    let t3 = jacobian.tr_mul(jacobian);
    let schur = symmetrize(t3 - t2.tr_mul(&p));
    let t2t_w = t2.tr_mul(&w);
    let step_rhs = &t2t_w - &jt_y;

    let (chol, _) = factor_spd(&schur, "Schur complement")?;
    let delta_tau = chol.solve(&step_rhs);

    // At the optimum, ‖u − Rz‖² = ‖u‖² − zᵀRᵀu, which needs only the
    // projections already in hand.
    let objective = y_hat.norm_squared() - dt_y.dot(&w) - t2t_w.dot(&delta_tau) + jt_y.dot(&delta_tau);
    let objective = objective.max(0.0);
    if delta_tau.iter().any(|v| !v.is_finite()) {
        return Err(MrlrError::Singular("non-finite step".into()));
    }
    Ok(StepSolution {
        delta_tau,
        objective,
        x: None,
        residual_norm: objective.sqrt(),
    })
}

/// `‖C x‖² + ‖ŷ − D x + J Δτ‖²`.
pub fn objective(
    atoms: &DMatrix<f64>,
    penalties: &DVector<f64>,
    x: &DVector<f64>,
    delta_tau: &DVector<f64>,
    jacobian: &DMatrix<f64>,
    y_hat: &DVector<f64>,
) -> Result<f64> {
    check_dims(atoms, penalties, jacobian, y_hat)?;
    if x.len() != atoms.ncols() || delta_tau.len() != jacobian.ncols() {
        return Err(MrlrError::mismatch(
            format!("x of length {} and Δτ of length {}", atoms.ncols(), jacobian.ncols()),
            format!("{} and {}", x.len(), delta_tau.len()),
        ));
    }
    let penalty = penalties.component_mul(x).norm_squared();
    let e = y_hat - atoms * x + jacobian * delta_tau;
    Ok(penalty + e.norm_squared())
}

/// `(A + Aᵀ) / 2`, removing rounding asymmetry left by matrix products.
pub(crate) fn symmetrize(mut a: DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

/// Cholesky factorization with one damped retry. Returns the factor and the
/// ridge that was added.
pub(crate) fn factor_spd(a: &DMatrix<f64>, what: &str) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(chol) = a.clone().cholesky() {
        if condition_estimate(a, &chol) <= MAX_CONDITION {
            return Ok((chol, 0.0));
        }
    }
    let dim = a.nrows().max(1) as f64;
    let mean_diag = a.trace() / dim;
    let lambda = DAMPING_SCALE * if mean_diag > 0.0 && mean_diag.is_finite() { mean_diag } else { 1.0 };
    let mut damped = a.clone();
    for i in 0..a.nrows() {
        damped[(i, i)] += lambda;
    }
    match damped.clone().cholesky() {
        Some(chol) if condition_estimate(&damped, &chol) <= MAX_CONDITION => Ok((chol, lambda)),
        _ => Err(MrlrError::Singular(format!(
            "{what} is not positive definite even with damping {lambda:e}"
        ))),
    }
}

/// `(max / min)²` of the Cholesky diagonal of the unit-diagonal rescaling of
/// `a`, a cheap lower bound on its 2-norm condition number that ignores how
/// the rows are scaled.
fn condition_estimate(a: &DMatrix<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..a.nrows() {
        let v = l[(i, i)].abs() / a[(i, i)].sqrt();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(lo > 0.0) || !hi.is_finite() {
        return f64::INFINITY;
    }
    (hi / lo).powi(2)
}

/// `A⁻¹ = L⁻ᵀ L⁻¹` with a blocked triangular inverse.
fn spd_inverse(chol: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let l = chol.l();
    let l_inv = lower_inverse(&l);
    symmetrize(l_inv.transpose() * &l_inv)
}

/// Inverse of a nonsingular lower-triangular matrix. Splits
/// `L = [[A, 0], [B, C]]` so that `L⁻¹ = [[A⁻¹, 0], [−C⁻¹ B A⁻¹, C⁻¹]]` and the
/// bulk of the work lands in matrix products.
fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= BLOCK {
        let mut inv = DMatrix::identity(n, n);
        for col in 0..n {
            for i in col..n {
                let mut acc = if i == col { 1.0 } else { 0.0 };
                for k in col..i {
                    acc -= l[(i, k)] * inv[(k, col)];
                }
                inv[(i, col)] = acc / l[(i, i)];
            }
        }
        return inv;
    }
    let h = n / 2;
    let a_inv = lower_inverse(&l.view((0, 0), (h, h)).into_owned());
    let c_inv = lower_inverse(&l.view((h, h), (n - h, n - h)).into_owned());
    let b = l.view((h, 0), (n - h, h));
    let off = -(&c_inv * (b * &a_inv));
    let mut inv = DMatrix::zeros(n, n);
    inv.view_mut((0, 0), (h, h)).copy_from(&a_inv);
    inv.view_mut((h, h), (n - h, n - h)).copy_from(&c_inv);
    inv.view_mut((h, 0), (n - h, h)).copy_from(&off);
    inv
}
