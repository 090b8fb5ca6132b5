//! Benchmark runners behind `bench-roa` and `bench-scale`.

use std::fmt::Write as _;
use std::time::Instant;

use crate::align::{align_prepared, AlignConfig, RoaRow};
use crate::error::{MrlrError, Result};
use crate::harness::synth::{SynthModel, SynthSpec};
use crate::image::{Frame, PreparedImage};
use crate::transform::SimilarityParams;

pub const ROA_HEADER: &str = "axis,magnitude,trials,successes,rate";
pub const SCALE_HEADER: &str = "variant,m,n,s,mean_ms,std_ms";
/// Fewest timed repetitions per scaling row.
pub const MIN_REPS: usize = 5;

pub fn roa_csv(rows: &[RoaRow]) -> String {
    let mut s = format!("{ROA_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.axis.name(), r.magnitude, r.trials, r.successes, r.rate());
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleMode {
    /// Vary the frame size at a fixed subject count.
    Dims,
    /// Vary the subject count at a fixed frame.
    Subjects,
}

impl std::str::FromStr for ScaleMode {
    type Err = MrlrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dims" => Ok(ScaleMode::Dims),
            "subjects" => Ok(ScaleMode::Subjects),
            other => Err(MrlrError::InvalidInput(format!("unknown mode {other:?} (expected dims or subjects)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScaleConfig {
    pub mode: ScaleMode,
    pub base: SynthSpec,
    /// Frames swept in `Dims` mode.
    pub frames: Vec<Frame>,
    /// Subject counts swept in `Subjects` mode.
    pub subject_counts: Vec<usize>,
    pub s: usize,
    pub reps: usize,
    /// Query displacement as a fraction of the frame width.
    pub shift: f64,
}

impl ScaleConfig {
    pub fn new(mode: ScaleMode) -> Self {
        ScaleConfig {
            mode,
            base: SynthSpec::default(),
            frames: vec![Frame { width: 40, height: 35 }, Frame { width: 64, height: 56 }, Frame { width: 80, height: 70 }],
            subject_counts: vec![5, 25, 50],
            s: crate::align::DEFAULT_S,
            reps: 5,
            shift: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleRow {
    pub variant: &'static str,
    pub m: usize,
    pub n: usize,
    pub s: usize,
    /// Median per-query wall time over the timed repetitions.
    pub median_ms: f64,
    pub std_ms: f64,
    /// Wall time of each timed repetition.
    pub samples_ms: Vec<f64>,
}

pub fn scale_csv(rows: &[ScaleRow]) -> String {
    let mut s = format!("{SCALE_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{:.3},{:.3}", r.variant, r.m, r.n, r.s, r.median_ms, r.std_ms);
    }
    s
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Times one alignment per repetition after an untimed warm-up run.
pub fn time_alignment(
    query: &PreparedImage,
    dict: &crate::dictionary::Dictionary,
    tau0: &SimilarityParams,
    cfg: &AlignConfig,
    reps: usize,
) -> Result<Vec<f64>> {
    align_prepared(query, dict, tau0, cfg)?;
    let mut out = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let r = align_prepared(query, dict, tau0, cfg)?;
        out.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(r);
    }
    Ok(out)
}

/// Per-query alignment time of the full and truncated variants over a sweep
/// of seeded synthetic dictionaries.
pub fn run_scale(cfg: &ScaleConfig) -> Result<Vec<ScaleRow>> {
    if cfg.reps < MIN_REPS {
        return Err(MrlrError::InvalidInput(format!(
            "need at least {MIN_REPS} repetitions, got {}",
            cfg.reps
        )));
    }
    let specs: Vec<SynthSpec> = match cfg.mode {
        ScaleMode::Dims => cfg.frames.iter().map(|&frame| SynthSpec { frame, ..cfg.base.clone() }).collect(),
        ScaleMode::Subjects => cfg
            .subject_counts
            .iter()
            .map(|&subjects| SynthSpec { subjects, ..cfg.base.clone() })
            .collect(),
    };
    let mut rows = Vec::new();
    for spec in specs {
        let model = SynthModel::new(&spec)?;
        let dict = model.dictionary()?;
        let shift = cfg.shift * spec.frame.width as f64;
        let (img, _) = model.query(0, 0, &SimilarityParams::translation(shift, -shift))?;
        let query = PreparedImage::new(img)?;
        let tau0 = model.nominal_init();
        let s = cfg.s.min(dict.len());
        for (variant, align_cfg, s_col) in [
            ("mrlr1", AlignConfig::mrlr1(), dict.len()),
            ("mrlr2", AlignConfig::mrlr2(s), s),
        ] {
            let samples = time_alignment(&query, &dict, &tau0, &align_cfg, cfg.reps)?;
            rows.push(ScaleRow {
                variant,
                m: dict.dim(),
                n: dict.len(),
                s: s_col,
                median_ms: median(&samples),
                std_ms: std_dev(&samples),
                samples_ms: samples,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::PerturbAxis;

    #[test]
    fn roa_csv_layout() {
        let rows = vec![
            RoaRow { axis: PerturbAxis::Tx, magnitude: 0.0, trials: 4, successes: 4 },
            RoaRow { axis: PerturbAxis::Tx, magnitude: 0.05, trials: 4, successes: 3 },
        ];
        assert_eq!(roa_csv(&rows), "axis,magnitude,trials,successes,rate\ntx,0,4,4,1\ntx,0.05,4,3,0.75\n");
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
        assert_eq!(std_dev(&[2.0]), 0.0);
        assert!((std_dev(&[1.0, 2.0, 3.0, 4.0]) - 1.2909944487358056).abs() < 1e-15);
    }

    #[test]
    fn small_scale_sweep() {
        let mut cfg = ScaleConfig::new(ScaleMode::Subjects);
        cfg.subject_counts = vec![3, 4];
        cfg.base.samples = 3;
        cfg.s = 5;
        let rows = run_scale(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[0].variant, rows[0].n, rows[0].s), ("mrlr1", 9, 9));
        assert_eq!((rows[3].variant, rows[3].n, rows[3].s), ("mrlr2", 12, 5));
        assert!(rows.iter().all(|r| r.m == 1400 && r.samples_ms.len() == 5));
        let csv = scale_csv(&rows);
        assert!(csv.starts_with("variant,m,n,s,mean_ms,std_ms\nmrlr1,1400,9,9,"));
        cfg.reps = 4;
        assert!(run_scale(&cfg).is_err());
    }
}
