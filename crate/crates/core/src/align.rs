//! Iterative alignment of a query face against a locality-constrained
//! dictionary.
//!
//! Outer iterations rank the atoms against the current estimate and fix the
//! locality-constrained dictionary (plus its Gram cache). Inner iterations
//! relinearize the warp and take Gauss-Newton steps `τ ← τ + Δτ`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dictionary::Dictionary;
use crate::error::{MrlrError, Result};
use crate::image::{Frame, Image, PreparedImage};
use crate::parallel;
use crate::solver::{solve_block, GramCache};
use crate::transform::{SimilarityParams, PARAM_COUNT};

/// Default locality bandwidth σ.
pub const DEFAULT_SIGMA: f64 = 0.2;
/// Default size of the truncated dictionary.
pub const DEFAULT_S: usize = 20;
pub const DEFAULT_MAX_OUTER: usize = 3;
pub const DEFAULT_MAX_INNER: usize = 30;
pub const DEFAULT_TOL_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignConfig {
    /// Locality bandwidth σ.
    pub sigma: f64,
    /// Keep only the `s` most correlated atoms (truncated variant); `None`
    /// uses every atom with its penalty.
    pub s: Option<usize>,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Inner loop stops once `‖Δτ‖₂` falls to this value.
    pub tol_step: f64,
    /// Whether outside-data atoms join the alignment pool.
    pub use_outside: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            sigma: DEFAULT_SIGMA,
            s: None,
            max_outer: DEFAULT_MAX_OUTER,
            max_inner: DEFAULT_MAX_INNER,
            tol_step: DEFAULT_TOL_STEP,
            use_outside: true,
        }
    }
}

impl AlignConfig {
    /// Full dictionary with locality penalties.
    pub fn mrlr1() -> Self {
        Self::default()
    }

    /// Dictionary truncated to the `s` lowest penalties.
    pub fn mrlr2(s: usize) -> Self {
        AlignConfig {
            s: Some(s),
            ..Self::default()
        }
    }

    fn validate(&self, pool_size: usize) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(MrlrError::InvalidInput(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(MrlrError::InvalidInput("iteration limits must be at least 1".into()));
        }
        if !(self.tol_step >= 0.0) {
            return Err(MrlrError::InvalidInput(format!("tolerance must be non-negative, got {}", self.tol_step)));
        }
        if let Some(s) = self.s {
            if s == 0 || s > pool_size {
                return Err(MrlrError::InvalidInput(format!(
                    "s must lie in [1, {pool_size}], got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// One inner iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub outer: usize,
    pub inner: usize,
    pub delta_norm: f64,
    pub residual_norm: f64,
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct AlignResult {
    pub tau_final: SimilarityParams,
    /// The observation resampled into the canonical frame under `tau_final`.
    pub aligned: Image,
    pub trace: Vec<IterationRecord>,
    /// Atom indices (into the full dictionary) used in each outer iteration.
    pub selected_atoms: Vec<Vec<usize>>,
    pub converged: bool,
}

/// Aligns the observed image `y_w` to the dictionary, starting from `tau0`.
pub fn align(
    y_w: &Image,
    dict: &Dictionary,
    tau0: &SimilarityParams,
    cfg: &AlignConfig,
) -> Result<AlignResult> {
    let prepared = PreparedImage::new(y_w.clone())?;
    align_prepared(&prepared, dict, tau0, cfg)
}

/// [`align`] for an observation whose gradients are already computed.
pub fn align_prepared(
    observed: &PreparedImage,
    dict: &Dictionary,
    tau0: &SimilarityParams,
    cfg: &AlignConfig,
) -> Result<AlignResult> {
    let tau0 = SimilarityParams::new(tau0.a, tau0.b, tau0.tx, tau0.ty)?;
    let restricted;
    let (pool, pool_index): (&Dictionary, Option<Vec<usize>>) =
        if !cfg.use_outside && dict.outside_count() > 0 {
            let keep: Vec<usize> = (0..dict.len()).filter(|&j| !dict.outside_flags()[j]).collect();
            restricted = Dictionary::from_parts(
                dict.atoms().select_columns(&keep),
                keep.iter().map(|&j| dict.labels()[j]).collect(),
                vec![false; keep.len()],
                dict.frame(),
            )?;
            (&restricted, Some(keep))
        } else {
            (dict, None)
        };
    cfg.validate(pool.len())?;
    let frame = pool.frame();

    let mut state = LoopState {
        tau: tau0,
        trace: Vec::new(),
        selected: Vec::new(),
        converged: false,
    };
    match run_loops(observed, pool, frame, cfg, &mut state) {
        Ok(()) => {}
        Err(cause) => {
            return Err(MrlrError::AlignmentFailed {
                cause: Box::new(cause),
                trace: state.trace,
            })
        }
    }
    if let Some(map) = pool_index {
        for set in &mut state.selected {
            for i in set.iter_mut() {
                *i = map[*i];
            }
        }
    }
    let aligned = observed.warp(&state.tau, frame)?;
    Ok(AlignResult {
        tau_final: state.tau,
        aligned,
        trace: state.trace,
        selected_atoms: state.selected,
        converged: state.converged,
    })
}

struct LoopState {
    tau: SimilarityParams,
    trace: Vec<IterationRecord>,
    selected: Vec<Vec<usize>>,
    converged: bool,
}

fn run_loops(
    observed: &PreparedImage,
    dict: &Dictionary,
    frame: Frame,
    cfg: &AlignConfig,
    state: &mut LoopState,
) -> Result<()> {
    let mut previous: Option<(Vec<usize>, usize)> = None;
    for outer in 0..cfg.max_outer {
        let mut lin = observed.linearize(&state.tau, frame)?;
        let selection = match cfg.s {
            Some(s) => dict.select_local(&lin.y_hat, cfg.sigma, s)?,
            None => dict.locality_adaptor(&lin.y_hat, cfg.sigma)?.selection(dict.len())?,
        };
        // The full variant always keeps every atom, so the most correlated
        // atom is part of the stability key.
        let key = (selection.indices.clone(), selection.argmin);
        if state.converged && previous.as_ref() == Some(&key) {
            break;
        }
        let sub = dict.local_subdictionary(&selection)?;
        let cache = GramCache::from_gram(sub.gram(), sub.penalties())?;
        state.selected.push(key.0.clone());

        state.converged = false;
        for inner in 0..cfg.max_inner {
            if inner > 0 {
                lin = observed.linearize(&state.tau, frame)?;
            }
            let step = solve_block(sub.atoms(), sub.penalties(), &lin.jacobian, &lin.y_hat, &cache)?;
            let delta: [f64; PARAM_COUNT] = std::array::from_fn(|k| step.delta_tau[k]);
            state.tau = state.tau.add_step(&delta)?;
            let delta_norm = step.step_norm();
            state.trace.push(IterationRecord {
                outer,
                inner,
                delta_norm,
                residual_norm: step.residual_norm,
                objective: step.objective,
            });
            if delta_norm <= cfg.tol_step {
                state.converged = true;
                break;
            }
        }
        previous = Some(key);
    }
    Ok(())
}

/// Perturbation direction for region-of-attraction sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PerturbAxis {
    /// Horizontal shift; magnitude is a fraction of the frame width.
    Tx,
    /// Vertical shift; magnitude is a fraction of the frame width.
    Ty,
    /// In-plane rotation about the frame center; magnitude in degrees.
    Rotation,
    /// Scale change about the frame center; magnitude is a fraction.
    Scale,
}

impl PerturbAxis {
    pub fn name(&self) -> &'static str {
        match self {
            PerturbAxis::Tx => "tx",
            PerturbAxis::Ty => "ty",
            PerturbAxis::Rotation => "rot",
            PerturbAxis::Scale => "scale",
        }
    }

    /// Canonical-frame perturbation with the given signed magnitude.
    pub fn perturbation(&self, signed_magnitude: f64, frame: Frame) -> Result<SimilarityParams> {
        let center = (
            (frame.width as f64 - 1.0) / 2.0,
            (frame.height as f64 - 1.0) / 2.0,
        );
        let w = frame.width as f64;
        match self {
            PerturbAxis::Tx => Ok(SimilarityParams::translation(signed_magnitude * w, 0.0)),
            PerturbAxis::Ty => Ok(SimilarityParams::translation(0.0, signed_magnitude * w)),
            PerturbAxis::Rotation => {
                SimilarityParams::about_point(1.0, signed_magnitude.to_radians(), center)
            }
            PerturbAxis::Scale => SimilarityParams::about_point(1.0 + signed_magnitude, 0.0, center),
        }
    }
}

impl std::str::FromStr for PerturbAxis {
    type Err = MrlrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tx" => Ok(PerturbAxis::Tx),
            "ty" => Ok(PerturbAxis::Ty),
            "rot" | "rotation" => Ok(PerturbAxis::Rotation),
            "scale" => Ok(PerturbAxis::Scale),
            other => Err(MrlrError::InvalidInput(format!(
                "unknown axis {other:?} (expected tx, ty, rot or scale)"
            ))),
        }
    }
}

/// Query with a known correct alignment.
#[derive(Clone, Debug)]
pub struct Probe {
    pub image: Image,
    /// Transform that maps the canonical frame onto the face in `image`.
    pub truth: SimilarityParams,
    /// Dictionary atom to hold out while aligning this probe.
    pub exclude_atom: Option<usize>,
}

/// Canonical-frame landmarks used to score alignment: two eye positions.
pub fn fiducials(frame: Frame) -> [(f64, f64); 2] {
    let (w, h) = (frame.width as f64, frame.height as f64);
    [(0.32 * w, 0.40 * h), (0.68 * w, 0.40 * h)]
}

/// Largest displacement, in observed-image pixels, of the fiducials mapped by
/// `estimate` versus `truth`.
pub fn fiducial_error(estimate: &SimilarityParams, truth: &SimilarityParams, frame: Frame) -> f64 {
    fiducials(frame)
        .iter()
        .map(|&p| {
            let (ex, ey) = estimate.apply(p);
            let (tx, ty) = truth.apply(p);
            (ex - tx).hypot(ey - ty)
        })
        .fold(0.0, f64::max)
}

/// Success threshold on the fiducial displacement.
pub const SUCCESS_PIXELS: f64 = 1.0;

/// Success count at one perturbation magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct RoaRow {
    pub axis: PerturbAxis,
    pub magnitude: f64,
    pub trials: usize,
    pub successes: usize,
}

impl RoaRow {
    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.successes as f64 / self.trials as f64
        }
    }
}

/// Outcome of one perturbed alignment.
#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub probe: usize,
    pub initial: SimilarityParams,
    /// `None` when alignment failed.
    pub final_tau: Option<SimilarityParams>,
    pub error_px: f64,
    pub success: bool,
}

/// Aligns one probe from `truth ∘ perturbation` and scores the result.
pub fn run_trial(
    dict: &Dictionary,
    probe: &Probe,
    prepared: &PreparedImage,
    perturbation: &SimilarityParams,
    cfg: &AlignConfig,
) -> (SimilarityParams, Option<SimilarityParams>, f64) {
    let initial = probe.truth.compose(perturbation);
    let result = align_prepared(prepared, dict, &initial, cfg);
    match result {
        Ok(r) => {
            let err = fiducial_error(&r.tau_final, &probe.truth, dict.frame());
            (initial, Some(r.tau_final), err)
        }
        Err(_) => (initial, None, f64::INFINITY),
    }
}

/// Sweeps perturbation magnitudes along one axis. Each trial draws a probe and
/// a perturbation sign from a stream keyed by `(seed, magnitude index, trial)`,
/// so results do not depend on scheduling. Failed alignments count as misses.
pub fn region_of_attraction(
    dict: &Dictionary,
    probes: &[Probe],
    axis: PerturbAxis,
    magnitudes: &[f64],
    trials: usize,
    seed: u64,
    cfg: &AlignConfig,
    threads: usize,
) -> Result<Vec<RoaRow>> {
    let outcomes = roa_trials(dict, probes, axis, magnitudes, trials, seed, cfg, threads)?;
    Ok(magnitudes
        .iter()
        .enumerate()
        .map(|(mi, &magnitude)| RoaRow {
            axis,
            magnitude,
            trials,
            successes: outcomes[mi].iter().filter(|o| o.success).count(),
        })
        .collect())
}

/// Per-trial outcomes of a region-of-attraction sweep, grouped by magnitude.
#[allow(clippy::too_many_arguments)]
pub fn roa_trials(
    dict: &Dictionary,
    probes: &[Probe],
    axis: PerturbAxis,
    magnitudes: &[f64],
    trials: usize,
    seed: u64,
    cfg: &AlignConfig,
    threads: usize,
) -> Result<Vec<Vec<TrialOutcome>>> {
    if probes.is_empty() {
        return Err(MrlrError::InvalidInput("no probes to perturb".into()));
    }
    if let Some(m) = magnitudes.iter().find(|m| !m.is_finite()) {
        return Err(MrlrError::InvalidInput(format!("invalid magnitude {m}")));
    }
    let frame = dict.frame();
    let prepared: Vec<PreparedImage> = probes
        .iter()
        .map(|p| PreparedImage::new(p.image.clone()))
        .collect::<Result<_>>()?;
    let held_out: Vec<Option<Dictionary>> = probes
        .iter()
        .map(|p| p.exclude_atom.map(|j| dict.without_atom(j)).transpose())
        .collect::<Result<_>>()?;

    let jobs = magnitudes.len() * trials;
    let flat = parallel::map_indexed(jobs, threads, |job| {
        let (mi, t) = (job / trials, job % trials);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((mi as u64) << 32) | t as u64);
        let probe_idx = rng.random_range(0..probes.len());
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let probe = &probes[probe_idx];
        let pool = held_out[probe_idx].as_ref().unwrap_or(dict);
        let perturbation = axis.perturbation(sign * magnitudes[mi], frame);
        let (initial, final_tau, error_px) = match perturbation {
            Ok(p) => run_trial(pool, probe, &prepared[probe_idx], &p, cfg),
            Err(_) => (probe.truth, None, f64::INFINITY),
        };
        TrialOutcome {
            probe: probe_idx,
            initial,
            final_tau,
            error_px,
            success: error_px <= SUCCESS_PIXELS,
        }
    });
    let mut grouped: Vec<Vec<TrialOutcome>> = (0..magnitudes.len()).map(|_| Vec::with_capacity(trials)).collect();
    for (job, outcome) in flat.into_iter().enumerate() {
        grouped[job / trials].push(outcome);
    }
    Ok(grouped)
}

/// Leave-one-out probes built from the dictionary's own training atoms: each
/// atom image is its own ground truth at the identity transform.
pub fn atom_probes(dict: &Dictionary) -> Result<Vec<Probe>> {
    (0..dict.len())
        .filter(|&j| !dict.outside_flags()[j])
        .map(|j| {
            Ok(Probe {
                image: dict.atom_image(j)?,
                truth: SimilarityParams::IDENTITY,
                exclude_atom: Some(j),
            })
        })
        .collect()
}

/// `‖to_vector(a) − to_vector(b)‖₂`.
pub fn parameter_distance(a: &SimilarityParams, b: &SimilarityParams) -> f64 {
    let (va, vb) = (a.to_vector(), b.to_vector());
    DVector::from_fn(PARAM_COUNT, |k, _| va[k] - vb[k]).norm()
}
