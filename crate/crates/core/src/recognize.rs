//! Representation-based classification: ridge (collaborative) and l1
//! (sparse) coding followed by the minimum class-residual rule.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::align::{align, AlignConfig, AlignResult};
use crate::dictionary::{Dictionary, Label};
use crate::error::{MrlrError, Result};
use crate::image::{vectorize_normalize, Image};
use crate::solver::factor_spd;
use crate::transform::SimilarityParams;

pub const DEFAULT_LAMBDA: f64 = 0.001;
pub const DEFAULT_SRC_MAX_ITERS: usize = 5000;
pub const DEFAULT_SRC_TOL: f64 = 1e-6;

/// Above this size the Lipschitz constant comes from power iteration.
const EXACT_EIGEN_LIMIT: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Coder {
    Crc,
    Src { max_iters: usize, tol: f64 },
}

impl Coder {
    pub fn src() -> Self {
        Coder::Src {
            max_iters: DEFAULT_SRC_MAX_ITERS,
            tol: DEFAULT_SRC_TOL,
        }
    }

    pub fn code(&self, dict: &Dictionary, y: &DVector<f64>, lambda: f64) -> Result<CodingResult> {
        match *self {
            Coder::Crc => crc_code(dict, y, lambda),
            Coder::Src { max_iters, tol } => src_code(dict, y, lambda, max_iters, tol),
        }
    }
}

impl std::str::FromStr for Coder {
    type Err = MrlrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crc" => Ok(Coder::Crc),
            "src" => Ok(Coder::src()),
            other => Err(MrlrError::InvalidInput(format!("unknown coder {other:?} (expected crc or src)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CodingResult {
    pub x: DVector<f64>,
    /// `(label, ‖y − D·δ(x)‖)` per training subject, ascending by label.
    pub class_residuals: Vec<(Label, f64)>,
    pub predicted: Label,
    /// Always true for the ridge coder.
    pub converged: bool,
    /// l1 objective after each shrinkage iteration (empty for the ridge coder).
    pub objective_history: Vec<f64>,
}

fn check_inputs(dict: &Dictionary, y: &DVector<f64>, lambda: f64) -> Result<()> {
    if y.len() != dict.dim() {
        return Err(MrlrError::mismatch(dict.dim(), y.len()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(MrlrError::InvalidInput("query contains non-finite values".into()));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(MrlrError::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    if dict.subject_count() == 0 {
        return Err(MrlrError::InvalidInput("dictionary has no training subjects".into()));
    }
    Ok(())
}

/// Ridge coding `x = (DᵀD + λI)⁻¹Dᵀy`.
pub fn crc_code(dict: &Dictionary, y: &DVector<f64>, lambda: f64) -> Result<CodingResult> {
    check_inputs(dict, y, lambda)?;
    let mut system = dict.gram().clone();
    for i in 0..system.nrows() {
        system[(i, i)] += lambda;
    }
    let (chol, _) = factor_spd(&system, "ridge system")?;
    let x = chol.solve(&dict.correlate(y)?);
    finish(dict, y, x, true, Vec::new())
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

struct L1Problem<'a> {
    gram: &'a DMatrix<f64>,
    dty: DVector<f64>,
    yty: f64,
    lambda: f64,
}

impl L1Problem<'_> {
    /// `‖y − Dx‖² + λ‖x‖₁` expanded through the Gram matrix.
    fn objective(&self, x: &DVector<f64>, gx: &DVector<f64>) -> f64 {
        (self.yty - 2.0 * self.dty.dot(x) + x.dot(gx)).max(0.0) + self.lambda * x.lp_norm(1)
    }

    /// Largest violation of the l1 optimality conditions.
    fn subgradient_residual(&self, x: &DVector<f64>, gx: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let g = 2.0 * (gx[i] - self.dty[i]);
            let r = if x[i] > 0.0 {
                (g + self.lambda).abs()
            } else if x[i] < 0.0 {
                (g - self.lambda).abs()
            } else {
                (g.abs() - self.lambda).max(0.0)
            };
            worst = worst.max(r);
        }
        worst
    }
}

/// Largest eigenvalue of the symmetric positive semidefinite `gram`.
fn largest_eigenvalue(gram: &DMatrix<f64>) -> f64 {
    let n = gram.nrows();
    if n <= EXACT_EIGEN_LIMIT {
        return SymmetricEigen::new(gram.clone()).eigenvalues.max().max(0.0);
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut estimate = 0.0;
    for _ in 0..500 {
        let w = gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - estimate).abs() <= 1e-10 * next {
            estimate = next;
            break;
        }
        estimate = next;
    }
    // Power iteration approaches from below.
    estimate * 1.01
}

/// l1 coding `min ‖y − Dx‖² + λ‖x‖₁` by monotone accelerated proximal
/// gradient with adaptive restart. Returns the best iterate, flagged
/// unconverged, when `max_iters` runs out.
pub fn src_code(
    dict: &Dictionary,
    y: &DVector<f64>,
    lambda: f64,
    max_iters: usize,
    tol: f64,
) -> Result<CodingResult> {
    check_inputs(dict, y, lambda)?;
    if !(tol >= 0.0) {
        return Err(MrlrError::InvalidInput(format!("tolerance must be non-negative, got {tol}")));
    }
    let gram = dict.gram();
    let problem = L1Problem {
        gram,
        dty: dict.correlate(y)?,
        yty: y.dot(y),
        lambda,
    };
    let lipschitz = 2.0 * largest_eigenvalue(gram);
    let n = dict.len();
    let mut x = DVector::zeros(n);
    let mut gx = DVector::zeros(n);
    let mut fx = problem.objective(&x, &gx);
    let mut history = Vec::new();
    if lipschitz == 0.0 {
        return finish(dict, y, x, true, history);
    }
    let step = 1.0 / lipschitz;
    let mut z = x.clone();
    let mut gz = gx.clone();
    let mut t: f64 = 1.0;
    let mut converged = problem.subgradient_residual(&x, &gx) <= tol;
    let mut iter = 0;
    while !converged && iter < max_iters {
        iter += 1;
        let u = DVector::from_fn(n, |i, _| {
            let grad = 2.0 * (gz[i] - problem.dty[i]);
            soft_threshold(z[i] - step * grad, lambda * step)
        });
        let gu = problem.gram * &u;
        let fu = problem.objective(&u, &gu);
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        if fu <= fx {
            let momentum = (t - 1.0) / t_next;
            z = &u + (&u - &x) * momentum;
            gz = &gu + (&gu - &gx) * momentum;
            x = u;
            gx = gu;
            fx = fu;
            t = t_next;
        } else {
            // Restart from the last accepted iterate.
            z = x.clone();
            gz = gx.clone();
            t = 1.0;
        }
        history.push(fx);
        converged = problem.subgradient_residual(&x, &gx) <= tol;
    }
    finish(dict, y, x, converged, history)
}

fn finish(
    dict: &Dictionary,
    y: &DVector<f64>,
    x: DVector<f64>,
    converged: bool,
    objective_history: Vec<f64>,
) -> Result<CodingResult> {
    let class_residuals = class_residuals(dict, y, &x)?;
    let predicted = argmin_label(&class_residuals)?;
    Ok(CodingResult {
        x,
        class_residuals,
        predicted,
        converged,
        objective_history,
    })
}

/// `‖y − D·δᵢ(x)‖` for each training subject; outside atoms never contribute.
pub fn class_residuals(dict: &Dictionary, y: &DVector<f64>, x: &DVector<f64>) -> Result<Vec<(Label, f64)>> {
    if x.len() != dict.len() {
        return Err(MrlrError::mismatch(dict.len(), x.len()));
    }
    if y.len() != dict.dim() {
        return Err(MrlrError::mismatch(dict.dim(), y.len()));
    }
    let mut reconstructions: BTreeMap<Label, DVector<f64>> = BTreeMap::new();
    for (j, (&label, &outside)) in dict.labels().iter().zip(dict.outside_flags()).enumerate() {
        if outside {
            continue;
        }
        let acc = reconstructions
            .entry(label)
            .or_insert_with(|| DVector::zeros(dict.dim()));
        acc.axpy(x[j], &dict.atoms().column(j), 1.0);
    }
    Ok(reconstructions
        .into_iter()
        .map(|(label, recon)| (label, (y - recon).norm()))
        .collect())
}

fn argmin_label(residuals: &[(Label, f64)]) -> Result<Label> {
    let mut best: Option<(Label, f64)> = None;
    for &(label, r) in residuals {
        if r.is_nan() {
            return Err(MrlrError::Singular("class residual is NaN".into()));
        }
        match best {
            Some((_, b)) if r >= b => {}
            _ => best = Some((label, r)),
        }
    }
    best.map(|(l, _)| l)
        .ok_or_else(|| MrlrError::InvalidInput("no class residuals".into()))
}

/// Label with the smallest class residual; ties go to the lower label.
pub fn classify(result: &CodingResult) -> Result<Label> {
    argmin_label(&result.class_residuals)
}

/// Aligns the observation, codes the unit-normalized aligned face against the
/// full dictionary, and classifies it.
pub fn recognize_pipeline(
    y_w: &Image,
    dict: &Dictionary,
    tau0: &SimilarityParams,
    align_cfg: &AlignConfig,
    coder: Coder,
    lambda: f64,
) -> Result<(Label, AlignResult, CodingResult)> {
    let aligned = align(y_w, dict, tau0, align_cfg)?;
    let y = vectorize_normalize(&aligned.aligned)?;
    let coding = coder.code(dict, &y, lambda)?;
    let label = classify(&coding)?;
    Ok((label, aligned, coding))
}

/// Codes and classifies a query warped by `tau0` without any alignment.
pub fn recognize_unaligned(
    y_w: &Image,
    dict: &Dictionary,
    tau0: &SimilarityParams,
    coder: Coder,
    lambda: f64,
) -> Result<(Label, CodingResult)> {
    let crop = crate::image::warp(y_w, tau0, dict.frame())?;
    let y = vectorize_normalize(&crop)?;
    let coding = coder.code(dict, &y, lambda)?;
    let label = classify(&coding)?;
    Ok((label, coding))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::tests::random_dictionary;
    use crate::image::{normalize_vector, Frame};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(seed: u64, m: usize) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normalize_vector(DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    /// Orthonormal dictionary from a QR factorization, frame m×1.
    fn orthonormal(seed: u64, m: usize, n: usize, labels: Vec<Label>) -> Dictionary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let q = a.qr().q();
        Dictionary::from_parts(q, labels, vec![false; n], Frame::new(m, 1).unwrap()).unwrap()
    }

    #[test]
    fn ridge_on_orthonormal_dictionary() {
        let d = orthonormal(1, 10, 4, vec![0, 0, 1, 1]);
        let y = random_unit(2, 10);
        let dty = d.atoms().transpose() * &y;
        let r = crc_code(&d, &y, 1.0).unwrap();
        assert!((&r.x - &dty / 2.0).amax() < 1e-12);
        let r = crc_code(&d, &y, 1e-12).unwrap();
        assert!((&r.x - &dty).amax() < 1e-10);
        assert!(r.converged && r.objective_history.is_empty());
    }

    #[test]
    fn ridge_matches_svd_oracle() {
        let d = random_dictionary(5, 30, 12);
        let y = random_unit(6, 30);
        let lambda = 0.01;
        let svd = d.atoms().clone().svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let uty = u.transpose() * &y;
        let scaled = DVector::from_fn(svd.singular_values.len(), |i, _| {
            let s = svd.singular_values[i];
            s / (s * s + lambda) * uty[i]
        });
        let oracle = vt.transpose() * scaled;
        let r = crc_code(&d, &y, lambda).unwrap();
        assert!((&r.x - &oracle).amax() < 1e-10);
        let grad = d.atoms().transpose() * (d.atoms() * &r.x - &y) * 2.0 + &r.x * (2.0 * lambda);
        assert!(grad.amax() < 1e-8);
    }

    #[test]
    fn sparse_matches_soft_threshold_on_orthonormal() {
        let d = orthonormal(3, 12, 6, vec![1, 1, 2, 2, 3, 3]);
        let y = random_unit(4, 12);
        let lambda = 0.3;
        let dty = d.atoms().transpose() * &y;
        let r = src_code(&d, &y, lambda, 1000, 1e-10).unwrap();
        for i in 0..6 {
            assert!((r.x[i] - soft_threshold(dty[i], lambda / 2.0)).abs() < 1e-6);
        }
        assert!(r.converged);
    }

    #[test]
    fn large_lambda_gives_zero_code() {
        let d = random_dictionary(7, 20, 9);
        let y = random_unit(8, 20);
        let dty = d.atoms().transpose() * &y;
        let r = src_code(&d, &y, 2.0 * dty.amax(), 100, 1e-9).unwrap();
        assert!(r.x.iter().all(|&v| v == 0.0));
        assert!(r.converged);
    }

    #[test]
    fn exact_atom_is_recovered() {
        let d = random_dictionary(9, 40, 10);
        let y = d.atoms().column(0).into_owned();
        let r = src_code(&d, &y, 1e-6, 20000, 1e-9).unwrap();
        assert!(r.x[0] >= 0.999, "{}", r.x[0]);
        assert!(r.x.rows(1, 9).amax() <= 1e-3);
        assert_eq!(r.predicted, d.labels()[0]);
        assert!(r.class_residuals.iter().find(|c| c.0 == d.labels()[0]).unwrap().1 < 1e-3);
    }

    #[test]
    fn sparse_objective_never_increases() {
        for seed in 0..10 {
            let d = random_dictionary(100 + seed, 30, 25);
            let y = random_unit(200 + seed, 30);
            let r = src_code(&d, &y, 0.01, 3000, 1e-8).unwrap();
            assert!(r.objective_history.windows(2).all(|w| w[1] <= w[0]));
            if r.converged {
                let problem = L1Problem {
                    gram: d.gram(),
                    dty: d.correlate(&y).unwrap(),
                    yty: 1.0,
                    lambda: 0.01,
                };
                let gx = d.gram() * &r.x;
                assert!(problem.subgradient_residual(&r.x, &gx) <= 1e-8);
            }
        }
    }

    #[test]
    fn iteration_cap_flags_unconverged() {
        let d = random_dictionary(11, 30, 25);
        let y = random_unit(12, 30);
        let r = src_code(&d, &y, 1e-4, 2, 1e-14).unwrap();
        assert!(!r.converged);
        assert_eq!(r.objective_history.len(), 2);
    }

    #[test]
    fn residuals_exclude_outside_atoms_and_break_ties_low() {
        let base = orthonormal(13, 8, 4, vec![4, 4, 2, 2]);
        assert_eq!(base.subjects(), vec![2, 4]);
        let y = base.atoms().column(2).into_owned();
        let r = crc_code(&base, &y, 1e-9).unwrap();
        assert_eq!(r.predicted, 2);
        assert_eq!(r.class_residuals.len(), 2);
        assert_eq!(r.class_residuals[0].0, 2);

        let tie = CodingResult {
            x: DVector::zeros(1),
            class_residuals: vec![(1, 0.5), (3, 0.5)],
            predicted: 1,
            converged: true,
            objective_history: vec![],
        };
        assert_eq!(classify(&tie).unwrap(), 1);

        let outside = Dictionary::from_parts(
            base.atoms().clone(),
            vec![4, 4, 2, 9],
            vec![false, false, false, true],
            base.frame(),
        )
        .unwrap();
        let y = outside.atoms().column(3).into_owned();
        let r = crc_code(&outside, &y, 1e-9).unwrap();
        assert_eq!(r.class_residuals.len(), 2);
        assert!(r.class_residuals.iter().all(|c| (c.1 - 1.0).abs() < 1e-6));
    }

    #[test]
    fn single_class_always_wins() {
        let d = orthonormal(14, 10, 3, vec![7, 7, 7]);
        for seed in 0..5 {
            let y = random_unit(seed, 10);
            assert_eq!(crc_code(&d, &y, 0.01).unwrap().predicted, 7);
            assert_eq!(src_code(&d, &y, 0.01, 500, 1e-8).unwrap().predicted, 7);
        }
    }

    #[test]
    fn class_reconstructions_sum_to_full() {
        let d = random_dictionary(15, 25, 12);
        let y = random_unit(16, 25);
        let r = crc_code(&d, &y, 0.1).unwrap();
        let mut sum = DVector::zeros(25);
        for label in d.subjects() {
            for j in 0..d.len() {
                if d.labels()[j] == label {
                    sum.axpy(r.x[j], &d.atoms().column(j), 1.0);
                }
            }
        }
        assert!((sum - d.atoms() * &r.x).amax() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        let d = random_dictionary(17, 10, 4);
        let y = random_unit(18, 10);
        assert!(matches!(crc_code(&d, &y, 0.0), Err(MrlrError::InvalidInput(_))));
        assert!(matches!(src_code(&d, &y, -1.0, 10, 1e-6), Err(MrlrError::InvalidInput(_))));
        assert!(matches!(
            crc_code(&d, &random_unit(1, 9), 0.1),
            Err(MrlrError::DimensionMismatch { .. })
        ));
        assert_eq!("src".parse::<Coder>().unwrap(), Coder::src());
        assert!("alm".parse::<Coder>().is_err());
    }

    #[test]
    fn power_iteration_bounds_spectrum() {
        let d = random_dictionary(19, 600, 450);
        let exact = SymmetricEigen::new(d.gram().clone()).eigenvalues.max();
        let est = largest_eigenvalue(d.gram());
        assert!(est >= exact && est <= exact * 1.02, "{est} vs {exact}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ridge_prediction_is_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let d = random_dictionary(seed, 20, 9);
            let y = random_unit(seed + 1, 20);
            let a = crc_code(&d, &y, 0.01).unwrap();
            let scaled = crc_code(&d, &(&y * scale), 0.01).unwrap();
            prop_assert_eq!(a.predicted, scaled.predicted);
            prop_assert!((&scaled.x - &a.x * scale).amax() <= 1e-9 * scale.max(1.0));
        }

        #[test]
        fn residuals_are_nonnegative(seed in 0u64..1000) {
            let d = random_dictionary(seed, 15, 6);
            let y = random_unit(seed + 7, 15);
            let r = src_code(&d, &y, 0.05, 500, 1e-8).unwrap();
            prop_assert!(r.class_residuals.iter().all(|c| c.1 >= 0.0));
            prop_assert_eq!(r.class_residuals.len(), d.subject_count());
        }
    }
}
