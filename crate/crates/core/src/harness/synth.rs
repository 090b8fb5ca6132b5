//! Seeded synthetic face-like data: a shared template of Gaussian blobs,
//! per-subject blob perturbations, and per-sample illumination and smooth
//! noise. Faces are rendered analytically, so a query can be drawn under any
//! similarity warp on a canvas larger than the canonical frame.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::Probe;
use crate::dictionary::{Dictionary, Label};
use crate::error::{MrlrError, Result};
use crate::harness::pgm::save_pgm;
use crate::image::{Frame, Image};
use crate::transform::SimilarityParams;

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const HELDOUT_DIR: &str = "heldout";
pub const OUTSIDE_DIR: &str = "outside";

const BACKGROUND: f64 = 0.2;
const NOISE_BLOBS: usize = 4;
const TEMPLATE_STREAM: u64 = u64::MAX;
const IDENTITY_STREAM: u64 = 1 << 62;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub subjects: usize,
    /// Training samples per subject.
    pub samples: usize,
    /// Held-out samples per subject written to disk.
    pub heldout: usize,
    /// Outside identities (one image each), disjoint from the subjects.
    pub outside: usize,
    pub frame: Frame,
    /// Extra identity blobs per subject on top of the shared template.
    pub blobs: usize,
    /// Amplitude of the additive smooth noise field.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 42,
            subjects: 5,
            samples: 8,
            heldout: 0,
            outside: 0,
            frame: Frame { width: 40, height: 35 },
            blobs: 4,
            noise: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
    amp: f64,
}

impl Blob {
    fn eval(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.cx) / self.sx;
        let dy = (y - self.cy) / self.sy;
        self.amp * (-0.5 * (dx * dx + dy * dy)).exp()
    }
}

/// Shared face layout in frame-relative units: center (x/W, y/H), widths in
/// units of W, amplitude.
const TEMPLATE: [(f64, f64, f64, f64, f64); 9] = [
    (0.50, 0.50, 0.32, 0.42, 0.45),   // head
    (0.32, 0.40, 0.06, 0.05, -0.25),  // left eye
    (0.68, 0.40, 0.06, 0.05, -0.25),  // right eye
    (0.32, 0.29, 0.09, 0.025, -0.12), // brows
    (0.68, 0.29, 0.09, 0.025, -0.12),
    (0.50, 0.58, 0.045, 0.08, 0.10),  // nose
    (0.50, 0.76, 0.12, 0.035, -0.20), // mouth
    (0.15, 0.50, 0.05, 0.12, 0.08),   // ears
    (0.85, 0.50, 0.05, 0.12, 0.08),
];

#[derive(Clone, Debug)]
struct Identity {
    blobs: Vec<Blob>,
}

#[derive(Clone, Debug)]
pub struct SynthModel {
    spec: SynthSpec,
    identities: Vec<Identity>,
}

/// Per-sample appearance change.
#[derive(Clone, Debug)]
struct Variation {
    gain: f64,
    offset: f64,
    noise: Vec<Blob>,
}

impl SynthModel {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        if spec.subjects == 0 || spec.samples == 0 {
            return Err(MrlrError::InvalidInput("need at least one subject and one sample".into()));
        }
        if !(spec.noise >= 0.0) || !spec.noise.is_finite() {
            return Err(MrlrError::InvalidInput(format!("invalid noise amplitude {}", spec.noise)));
        }
        if spec.frame.width < 2 || spec.frame.height < 2 {
            return Err(MrlrError::InvalidInput(format!("frame {} too small", spec.frame)));
        }
        let (w, h) = (spec.frame.width as f64, spec.frame.height as f64);
        let mut rng = stream(spec.seed, TEMPLATE_STREAM);
        let template: Vec<Blob> = TEMPLATE
            .iter()
            .map(|&(u, v, su, sv, amp)| Blob {
                cx: (u + rng.random_range(-0.01..0.01)) * w,
                cy: (v + rng.random_range(-0.01..0.01)) * h,
                sx: su * w,
                sy: sv * w,
                amp,
            })
            .collect();
        let identities = (0..spec.subjects + spec.outside)
            .map(|id| {
                let mut rng = stream(spec.seed, IDENTITY_STREAM + id as u64);
                let mut blobs: Vec<Blob> = template
                    .iter()
                    .map(|b| Blob {
                        cx: b.cx + rng.random_range(-0.03..0.03) * w,
                        cy: b.cy + rng.random_range(-0.03..0.03) * h,
                        sx: b.sx * rng.random_range(0.85..1.15),
                        sy: b.sy * rng.random_range(0.85..1.15),
                        amp: b.amp * rng.random_range(0.75..1.25),
                    })
                    .collect();
                for _ in 0..spec.blobs {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let s = rng.random_range(0.04..0.10) * w;
                    blobs.push(Blob {
                        cx: rng.random_range(0.2..0.8) * w,
                        cy: rng.random_range(0.2..0.85) * h,
                        sx: s,
                        sy: s * rng.random_range(0.7..1.4),
                        amp: sign * rng.random_range(0.08..0.2),
                    });
                }
                Identity { blobs }
            })
            .collect();
        Ok(SynthModel {
            spec: spec.clone(),
            identities,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn frame(&self) -> Frame {
        self.spec.frame
    }

    fn variation(&self, identity: usize, sample: usize) -> Variation {
        let mut rng = stream(self.spec.seed, ((identity as u64) << 32) | sample as u64);
        let w = self.spec.frame.width as f64;
        let h = self.spec.frame.height as f64;
        let gain = rng.random_range(0.7..1.3);
        let offset = rng.random_range(-0.1..0.1);
        let noise = (0..NOISE_BLOBS)
            .map(|_| {
                let s = rng.random_range(0.15..0.3) * w;
                Blob {
                    cx: rng.random_range(0.0..1.0) * w,
                    cy: rng.random_range(0.0..1.0) * h,
                    sx: s,
                    sy: s,
                    amp: self.spec.noise * rng.random_range(-1.0..1.0),
                }
            })
            .collect();
        Variation { gain, offset, noise }
    }

    /// Intensity of `identity`'s sample at a canonical-frame point.
    fn value(&self, identity: &Identity, var: &Variation, x: f64, y: f64) -> f64 {
        let face: f64 = BACKGROUND + identity.blobs.iter().map(|b| b.eval(x, y)).sum::<f64>();
        let noise: f64 = var.noise.iter().map(|b| b.eval(x, y)).sum();
        (var.gain * face + var.offset + noise).clamp(0.0, 1.0)
    }

    /// Renders a sample onto a `width × height` canvas where the canonical
    /// frame appears under `tau` (canonical point `p` lands at `tau(p)`).
    fn render(&self, identity: usize, sample: usize, tau: &SimilarityParams, width: usize, height: usize) -> Result<Image> {
        let inv = tau.inverse()?;
        let id = &self.identities[identity];
        let var = self.variation(identity, sample);
        Image::from_fn(width, height, |x, y| {
            let (cx, cy) = inv.apply((x as f64, y as f64));
            self.value(id, &var, cx, cy)
        })
    }

    fn check_subject(&self, subject: usize) -> Result<()> {
        if subject >= self.spec.subjects {
            return Err(MrlrError::InvalidInput(format!(
                "subject {subject} out of range (have {})",
                self.spec.subjects
            )));
        }
        Ok(())
    }

    /// Aligned training image of `subject`; samples past the training count
    /// are the held-out ones.
    pub fn sample_image(&self, subject: usize, sample: usize) -> Result<Image> {
        self.check_subject(subject)?;
        let f = self.spec.frame;
        self.render(subject, sample, &SimilarityParams::IDENTITY, f.width, f.height)
    }

    pub fn outside_image(&self, index: usize) -> Result<Image> {
        if index >= self.spec.outside {
            return Err(MrlrError::InvalidInput(format!("outside image {index} out of range")));
        }
        let f = self.spec.frame;
        self.render(self.spec.subjects + index, 0, &SimilarityParams::IDENTITY, f.width, f.height)
    }

    pub fn training_set(&self) -> Result<(Vec<Image>, Vec<Label>)> {
        let mut images = Vec::with_capacity(self.spec.subjects * self.spec.samples);
        let mut labels = Vec::with_capacity(images.capacity());
        for subject in 0..self.spec.subjects {
            for sample in 0..self.spec.samples {
                images.push(self.sample_image(subject, sample)?);
                labels.push(subject as Label);
            }
        }
        Ok((images, labels))
    }

    pub fn dictionary(&self) -> Result<Dictionary> {
        let (images, labels) = self.training_set()?;
        Dictionary::build(&images, &labels, self.spec.frame)
    }

    pub fn dictionary_with_outside(&self) -> Result<Dictionary> {
        let outside: Vec<Image> = (0..self.spec.outside)
            .map(|i| self.outside_image(i))
            .collect::<Result<_>>()?;
        self.dictionary()?.augment_with_outside(&outside, self.spec.frame)
    }

    /// Canvas margin on every side of a query.
    pub fn margin(&self) -> usize {
        self.spec.frame.width / 2
    }

    /// Held-out sample `heldout` of `subject`, displaced by `offset` (applied in
    /// canonical coordinates) on a canvas with a margin around the frame.
    /// Returns the image and the true canonical-to-image transform.
    pub fn query(&self, subject: usize, heldout: usize, offset: &SimilarityParams) -> Result<(Image, SimilarityParams)> {
        self.check_subject(subject)?;
        let m = self.margin();
        let f = self.spec.frame;
        let truth = SimilarityParams::translation(m as f64, m as f64).compose(offset);
        let image = self.render(subject, self.spec.samples + heldout, &truth, f.width + 2 * m, f.height + 2 * m)?;
        Ok((image, truth))
    }

    /// Transform a detector would report for a query: the frame placed at the
    /// canvas margin, ignoring the query's own offset.
    pub fn nominal_init(&self) -> SimilarityParams {
        let m = self.margin() as f64;
        SimilarityParams::translation(m, m)
    }

    /// `count` unperturbed held-out queries, cycling through subjects.
    pub fn probes(&self, count: usize) -> Result<Vec<Probe>> {
        (0..count)
            .map(|i| {
                let (image, truth) = self.query(i % self.spec.subjects, i / self.spec.subjects, &SimilarityParams::IDENTITY)?;
                Ok(Probe {
                    image,
                    truth,
                    exclude_atom: None,
                })
            })
            .collect()
    }

    /// Largest Pearson correlation between the mean training images of two
    /// distinct subjects.
    pub fn max_subject_correlation(&self) -> Result<f64> {
        let f = self.spec.frame;
        let mut means = Vec::with_capacity(self.spec.subjects);
        for subject in 0..self.spec.subjects {
            let mut acc = vec![0.0; f.pixel_count()];
            for sample in 0..self.spec.samples {
                for (a, v) in acc.iter_mut().zip(self.sample_image(subject, sample)?.data()) {
                    *a += v;
                }
            }
            means.push(acc);
        }
        let mut worst = f64::NEG_INFINITY;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                worst = worst.max(pearson(&means[i], &means[j]));
            }
        }
        Ok(worst)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 1.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Files written by [`generate`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthEntry {
    pub path: PathBuf,
    pub label: Label,
    pub split: &'static str,
}

/// Writes the dataset layout under `root`: `<label>/<sample>.pgm` for
/// training, `heldout/<label>/<sample>.pgm`, `outside/<index>.pgm`, and a
/// manifest. Paths in the manifest are relative to `root`.
pub fn generate(spec: &SynthSpec, root: &Path) -> Result<Vec<SynthEntry>> {
    let model = SynthModel::new(spec)?;
    fs::create_dir_all(root)?;
    let mut entries = Vec::new();
    for subject in 0..spec.subjects {
        let dir = PathBuf::from(subject.to_string());
        fs::create_dir_all(root.join(&dir))?;
        for sample in 0..spec.samples {
            let rel = dir.join(format!("{sample:03}.pgm"));
            save_pgm(&model.sample_image(subject, sample)?, &root.join(&rel))?;
            entries.push(SynthEntry { path: rel, label: subject as Label, split: "train" });
        }
        if spec.heldout > 0 {
            let dir = Path::new(HELDOUT_DIR).join(subject.to_string());
            fs::create_dir_all(root.join(&dir))?;
            for h in 0..spec.heldout {
                let rel = dir.join(format!("{h:03}.pgm"));
                save_pgm(&model.sample_image(subject, spec.samples + h)?, &root.join(&rel))?;
                entries.push(SynthEntry { path: rel, label: subject as Label, split: "heldout" });
            }
        }
    }
    if spec.outside > 0 {
        fs::create_dir_all(root.join(OUTSIDE_DIR))?;
        for o in 0..spec.outside {
            let rel = Path::new(OUTSIDE_DIR).join(format!("{o:03}.pgm"));
            save_pgm(&model.outside_image(o)?, &root.join(&rel))?;
            entries.push(SynthEntry {
                path: rel,
                label: (spec.subjects + o) as Label,
                split: "outside",
            });
        }
    }
    let manifest = manifest_text(spec, model.max_subject_correlation()?, &entries);
    fs::write(root.join(MANIFEST_NAME), manifest)?;
    Ok(entries)
}

fn manifest_text(spec: &SynthSpec, correlation: f64, entries: &[SynthEntry]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed={}", spec.seed);
    let _ = writeln!(s, "subjects={}", spec.subjects);
    let _ = writeln!(s, "samples={}", spec.samples);
    let _ = writeln!(s, "heldout={}", spec.heldout);
    let _ = writeln!(s, "outside={}", spec.outside);
    let _ = writeln!(s, "frame={}", spec.frame);
    let _ = writeln!(s, "blobs={}", spec.blobs);
    let _ = writeln!(s, "noise={}", spec.noise);
    let _ = writeln!(s, "max_subject_correlation={correlation:.6}");
    let _ = writeln!(s, "path,label,split");
    for e in entries {
        let _ = writeln!(s, "{},{},{}", e.path.to_string_lossy().replace('\\', "/"), e.label, e.split);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_spec_gives_identical_images() {
        let spec = SynthSpec::default();
        let a = SynthModel::new(&spec).unwrap();
        let b = SynthModel::new(&spec).unwrap();
        assert_eq!(a.sample_image(2, 5).unwrap(), b.sample_image(2, 5).unwrap());
        let other = SynthModel::new(&SynthSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.sample_image(2, 5).unwrap(), other.sample_image(2, 5).unwrap());
    }

    #[test]
    fn dictionary_bookkeeping() {
        let d = SynthModel::new(&SynthSpec::default()).unwrap().dictionary().unwrap();
        assert_eq!(d.subject_count(), 5);
        assert_eq!(d.len(), 40);
        assert!(d.subject_counts().values().all(|&c| c == 8));
    }

    #[test]
    fn subjects_are_distinguishable() {
        let model = SynthModel::new(&SynthSpec::default()).unwrap();
        let r = model.max_subject_correlation().unwrap();
        assert!(r < 0.99, "max correlation {r}");
    }

    #[test]
    fn query_at_truth_matches_aligned_render() {
        let model = SynthModel::new(&SynthSpec::default()).unwrap();
        let (img, truth) = model.query(1, 0, &SimilarityParams::IDENTITY).unwrap();
        let crop = crate::image::warp(&img, &truth, model.frame()).unwrap();
        let direct = model.sample_image(1, model.spec().samples).unwrap();
        let diff = crop.data().iter().zip(direct.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn values_stay_in_unit_range() {
        let model = SynthModel::new(&SynthSpec { noise: 0.3, ..SynthSpec::default() }).unwrap();
        for s in 0..5 {
            assert!(model.sample_image(s, 0).unwrap().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(SynthModel::new(&SynthSpec { subjects: 0, ..SynthSpec::default() }).is_err());
        assert!(SynthModel::new(&SynthSpec { noise: -1.0, ..SynthSpec::default() }).is_err());
        let model = SynthModel::new(&SynthSpec::default()).unwrap();
        assert!(model.sample_image(5, 0).is_err());
        assert!(model.outside_image(0).is_err());
    }

    #[test]
    fn layout_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let entries = generate(&SynthSpec::default(), dir.path()).unwrap();
        assert_eq!(entries.len(), 40);
        let pgm_count = walk(dir.path()).iter().filter(|p| p.extension().is_some_and(|e| e == "pgm")).count();
        assert_eq!(pgm_count, 40);
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert!(manifest.starts_with("seed=42\n"));
        assert!(manifest.contains("max_subject_correlation="));
        assert!(manifest.contains("\n0/000.pgm,0,train\n"));
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }
}
