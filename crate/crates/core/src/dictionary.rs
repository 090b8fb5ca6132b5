//! The global dictionary of unit-norm atoms, the locality adaptor that ranks
//! atoms against a query, and the locality-constrained sub-dictionary.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{MrlrError, Result};
use crate::image::{vectorize_normalize, Frame, Image};
use crate::screen::Screen;
use crate::solver::symmetrize;

/// Subject identifier attached to every atom.
pub type Label = u32;

const NORM_TOLERANCE: f64 = 1e-9;
pub const DICT_MAGIC: &[u8; 8] = b"MRLRDICT";
pub const DICT_VERSION: u32 = 1;

/// `m × n` matrix of unit-norm atoms with per-atom labels.
///
/// Outside atoms belong to identities that are neither enrolled nor queried.
/// They take part in alignment but never in classification.
#[derive(Clone, Debug)]
pub struct Dictionary {
    atoms: DMatrix<f64>,
    labels: Vec<Label>,
    outside: Vec<bool>,
    frame: Frame,
    gram: OnceLock<DMatrix<f64>>,
    screen: OnceLock<Screen>,
}

impl PartialEq for Dictionary {
    fn eq(&self, other: &Self) -> bool {
        self.atoms == other.atoms
            && self.labels == other.labels
            && self.outside == other.outside
            && self.frame == other.frame
    }
}

impl Dictionary {
    /// Vectorizes and normalizes each image into one column.
    pub fn build(images: &[Image], labels: &[Label], frame: Frame) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(MrlrError::mismatch(
                format!("{} labels", images.len()),
                labels.len(),
            ));
        }
        let atoms = vectorize_all(images, frame)?;
        Self::from_parts(atoms, labels.to_vec(), vec![false; labels.len()], frame)
    }

    pub fn from_parts(
        atoms: DMatrix<f64>,
        labels: Vec<Label>,
        outside: Vec<bool>,
        frame: Frame,
    ) -> Result<Self> {
        let (m, n) = atoms.shape();
        if m != frame.pixel_count() {
            return Err(MrlrError::mismatch(
                format!("{} rows for frame {frame}", frame.pixel_count()),
                m,
            ));
        }
        if n == 0 {
            return Err(MrlrError::InvalidInput("dictionary has no atoms".into()));
        }
        if labels.len() != n || outside.len() != n {
            return Err(MrlrError::mismatch(
                format!("{n} labels and flags"),
                format!("{} labels, {} flags", labels.len(), outside.len()),
            ));
        }
        for (j, col) in atoms.column_iter().enumerate() {
            let norm = col.norm();
            if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
                return Err(MrlrError::InvalidInput(format!(
                    "atom {j} has norm {norm}, expected 1"
                )));
            }
        }
        let training: BTreeSet<Label> = labels
            .iter()
            .zip(&outside)
            .filter(|(_, &o)| !o)
            .map(|(&l, _)| l)
            .collect();
        if let Some(j) = (0..n).find(|&j| outside[j] && training.contains(&labels[j])) {
            return Err(MrlrError::InvalidInput(format!(
                "outside atom {j} reuses training label {}",
                labels[j]
            )));
        }
        Ok(Dictionary {
            atoms,
            labels,
            outside,
            frame,
            gram: OnceLock::new(),
            screen: OnceLock::new(),
        })
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn outside_flags(&self) -> &[bool] {
        &self.outside
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    /// Vector length `m`.
    pub fn dim(&self) -> usize {
        self.atoms.nrows()
    }

    /// Atom count `n`, outside atoms included.
    pub fn len(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distinct training-subject labels in ascending order.
    pub fn subjects(&self) -> Vec<Label> {
        self.subject_counts().into_keys().collect()
    }

    /// Number of training subjects `k`.
    pub fn subject_count(&self) -> usize {
        self.subject_counts().len()
    }

    /// `nᵢ` per training subject.
    pub fn subject_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts = BTreeMap::new();
        for (&l, &o) in self.labels.iter().zip(&self.outside) {
            if !o {
                *counts.entry(l).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn outside_count(&self) -> usize {
        self.outside.iter().filter(|&&o| o).count()
    }

    /// `DᵀD`, computed on first use and shared afterwards.
    pub fn gram(&self) -> &DMatrix<f64> {
        self.gram
            .get_or_init(|| symmetrize(self.atoms.transpose() * &self.atoms))
    }

    /// Correlations `Dᵀy`.
    pub fn correlate(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.dim() {
            return Err(MrlrError::mismatch(format!("query of length {}", self.dim()), y.len()));
        }
        Ok(DVector::from_iterator(
            self.len(),
            self.atoms.column_iter().map(|col| col.dot(y)),
        ))
    }

    /// Penalties `cᵢ = maxⱼ exp(dⱼᵀy/σ) − exp(dᵢᵀy/σ)` for a unit-norm query.
    pub fn locality_adaptor(&self, y_hat: &DVector<f64>, sigma: f64) -> Result<LocalityAdaptor> {
        check_query(y_hat, sigma)?;
        let c = self.correlate(y_hat)?.map(|r| (r / sigma).exp());
        Ok(LocalityAdaptor {
            penalties: penalties_from(c, sigma)?,
            sigma,
        })
    }

    /// The `s` lowest-penalty atoms, identical to
    /// `locality_adaptor(y_hat, sigma)?.selection(s)`.
    ///
    /// A quantized copy of the atoms bounds every correlation; only atoms whose
    /// upper bound reaches the `s`-th largest lower bound are correlated
    /// exactly. When the bounds cannot certify the result, the exact adaptor
    /// is used instead.
    pub fn select_local(&self, y_hat: &DVector<f64>, sigma: f64, s: usize) -> Result<LocalSelection> {
        check_query(y_hat, sigma)?;
        let n = self.len();
        if y_hat.len() != self.dim() {
            return Err(MrlrError::mismatch(format!("query of length {}", self.dim()), y_hat.len()));
        }
        if s == 0 || s > n {
            return Err(MrlrError::InvalidInput(format!("s must lie in [1, {n}], got {s}")));
        }
        if 2 * s >= n {
            return self.locality_adaptor(y_hat, sigma)?.selection(s);
        }
        let screen = self.screen.get_or_init(|| Screen::new(&self.atoms));
        let b = screen.bounds(y_hat.as_slice());
        let mut lower: Vec<f64> = b.approx.iter().zip(&b.error).map(|(a, e)| a - e).collect();
        let (_, &mut threshold, _) = lower.select_nth_unstable_by(s - 1, |x, y| y.total_cmp(x));
        let (candidates, rest): (Vec<usize>, Vec<usize>) =
            (0..n).partition(|&j| b.approx[j] + b.error[j] >= threshold);
        let exps = DVector::from_iterator(
            candidates.len(),
            candidates.iter().map(|&j| (self.atoms.column(j).dot(y_hat) / sigma).exp()),
        );
        let penalties = penalties_from(exps.clone(), sigma)?;
        let local = LocalityAdaptor { penalties, sigma }.selection(s)?;
        let max = exps.max();
        let worst = local.penalties.max();
        let certified = rest.iter().all(|&j| {
            let upper = ((b.approx[j] + b.error[j]) / sigma).exp() * (1.0 + 1e-12);
            worst < (max - upper) * (1.0 - 1e-12)
        });
        if !certified {
            return self.locality_adaptor(y_hat, sigma)?.selection(s);
        }
        Ok(LocalSelection {
            indices: local.indices.iter().map(|&k| candidates[k]).collect(),
            penalties: local.penalties,
            argmin: candidates[local.argmin],
        })
    }

    /// Restricts the dictionary to `indices` (distinct, any order; order is
    /// preserved). The full ordered index set borrows instead of copying.
    pub fn subdictionary<'a>(
        &'a self,
        indices: &[usize],
        adaptor: &LocalityAdaptor,
    ) -> Result<SubDictionary<'a>> {
        if adaptor.len() != self.len() {
            return Err(MrlrError::mismatch(
                format!("{} penalties", self.len()),
                adaptor.len(),
            ));
        }
        self.restrict(indices, DVector::from_iterator(
            indices.len(),
            indices.iter().map(|&i| adaptor.penalties.get(i).copied().unwrap_or(f64::NAN)),
        ))
    }

    /// Sub-dictionary of a selection, carrying its penalties.
    pub fn local_subdictionary<'a>(&'a self, selection: &LocalSelection) -> Result<SubDictionary<'a>> {
        if selection.penalties.len() != selection.indices.len() {
            return Err(MrlrError::mismatch(
                format!("{} penalties", selection.indices.len()),
                selection.penalties.len(),
            ));
        }
        self.restrict(&selection.indices, selection.penalties.clone())
    }

    fn restrict<'a>(&'a self, indices: &[usize], penalties: DVector<f64>) -> Result<SubDictionary<'a>> {
        if indices.is_empty() {
            return Err(MrlrError::InvalidInput("empty atom index set".into()));
        }
        let mut seen = vec![false; self.len()];
        for &i in indices {
            if i >= self.len() || std::mem::replace(&mut seen[i], true) {
                return Err(MrlrError::InvalidInput(format!(
                    "atom index {i} is out of range or repeated"
                )));
            }
        }
        let full = indices.len() == self.len() && indices.iter().enumerate().all(|(k, &i)| k == i);
        let atoms = if full {
            Cow::Borrowed(&self.atoms)
        } else {
            Cow::Owned(self.atoms.select_columns(indices))
        };
        Ok(SubDictionary {
            parent: self,
            atoms,
            indices: indices.to_vec(),
            penalties,
        })
    }

    /// Copy of the dictionary without one atom.
    pub fn without_atom(&self, index: usize) -> Result<Dictionary> {
        if index >= self.len() || self.len() < 2 {
            return Err(MrlrError::InvalidInput(format!(
                "cannot remove atom {index} from a dictionary of {} atoms",
                self.len()
            )));
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&j| j != index).collect();
        Dictionary::from_parts(
            self.atoms.select_columns(&keep),
            keep.iter().map(|&j| self.labels[j]).collect(),
            keep.iter().map(|&j| self.outside[j]).collect(),
            self.frame,
        )
    }

    /// Appends outside-data atoms with fresh labels above every existing label.
    pub fn augment_with_outside(&self, outside: &[Image], frame: Frame) -> Result<Dictionary> {
        if frame != self.frame {
            return Err(MrlrError::mismatch(format!("frame {}", self.frame), format!("frame {frame}")));
        }
        if outside.is_empty() {
            return Ok(self.clone());
        }
        let extra = vectorize_all(outside, frame)?;
        let n = self.len();
        let mut atoms = self.atoms.clone().resize_horizontally(n + extra.ncols(), 0.0);
        atoms.columns_mut(n, extra.ncols()).copy_from(&extra);
        let first = self.labels.iter().copied().max().map_or(0, |l| l + 1);
        let mut labels = self.labels.clone();
        labels.extend((0..outside.len() as Label).map(|i| first + i));
        let mut flags = self.outside.clone();
        flags.extend(std::iter::repeat_n(true, outside.len()));
        Dictionary::from_parts(atoms, labels, flags, frame)
    }

    /// Atom `j` rescaled into `[0, 1]` intensities.
    pub fn atom_image(&self, j: usize) -> Result<Image> {
        let col = self.atoms.column(j);
        let max = col.max();
        if !(max > 0.0) {
            return Err(MrlrError::ZeroNorm(format!("atom {j} has no positive pixel")));
        }
        Image::from_vector(self.frame, &col.map(|v| (v / max).clamp(0.0, 1.0)))
    }

    /// Serializes to the little-endian `MRLRDICT` v1 layout.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let (m, n) = self.atoms.shape();
        w.write_all(DICT_MAGIC)?;
        for v in [
            DICT_VERSION,
            m as u32,
            n as u32,
            self.subject_count() as u32,
            self.frame.width as u32,
            self.frame.height as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for l in &self.labels {
            w.write_all(&l.to_le_bytes())?;
        }
        let flags: Vec<u8> = self.outside.iter().map(|&o| o as u8).collect();
        w.write_all(&flags)?;
        // nalgebra storage is column-major already.
        let mut buf = Vec::with_capacity(m * n * 8);
        for v in self.atoms.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Dictionary> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dictionary> {
        let mut cur = ByteCursor { bytes, pos: 0 };
        if cur.take(8)? != DICT_MAGIC {
            return Err(MrlrError::Format("missing MRLRDICT magic".into()));
        }
        let version = cur.u32()?;
        if version != DICT_VERSION {
            return Err(MrlrError::Format(format!("unsupported dictionary version {version}")));
        }
        let [m, n, k, fw, fh] = [cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?]
            .map(|v| v as usize);
        let frame = Frame::new(fw, fh).map_err(|e| MrlrError::Format(e.to_string()))?;
        if frame.pixel_count() != m {
            return Err(MrlrError::Format(format!("m = {m} does not match frame {frame}")));
        }
        let labels = (0..n).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let outside = cur
            .take(n)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(MrlrError::Format(format!("invalid outside flag {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let len = m
            .checked_mul(n)
            .ok_or_else(|| MrlrError::Format("atom block size overflows".into()))?;
        let data = cur.take(len.checked_mul(8).ok_or_else(|| MrlrError::Format("atom block size overflows".into()))?)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if cur.pos != bytes.len() {
            return Err(MrlrError::Format(format!(
                "{} trailing bytes after atom data",
                bytes.len() - cur.pos
            )));
        }
        let dict = Dictionary::from_parts(DMatrix::from_vec(m, n, values), labels, outside, frame)
            .map_err(|e| MrlrError::Format(e.to_string()))?;
        if dict.subject_count() != k {
            return Err(MrlrError::Format(format!(
                "header declares {k} subjects, labels give {}",
                dict.subject_count()
            )));
        }
        Ok(dict)
    }
}

fn check_query(y_hat: &DVector<f64>, sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(MrlrError::InvalidInput(format!(
            "locality bandwidth must be positive, got {sigma}"
        )));
    }
    let norm = y_hat.norm();
    if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
        return Err(MrlrError::InvalidInput(format!(
            "query must have unit norm, got {norm}"
        )));
    }
    Ok(())
}

/// `max − cᵢ` for exponentiated correlations `c`.
fn penalties_from(mut c: DVector<f64>, sigma: f64) -> Result<DVector<f64>> {
    let max = c.max();
    if !max.is_finite() {
        return Err(MrlrError::InvalidInput(format!(
            "locality adaptor overflows for sigma = {sigma}"
        )));
    }
    c.apply(|v| *v = max - *v);
    Ok(c)
}

fn vectorize_all(images: &[Image], frame: Frame) -> Result<DMatrix<f64>> {
    let mut atoms = DMatrix::zeros(frame.pixel_count(), images.len());
    for (j, img) in images.iter().enumerate() {
        if img.frame() != frame {
            return Err(MrlrError::mismatch(
                format!("image {j} of size {frame}"),
                img.frame(),
            ));
        }
        atoms.set_column(j, &vectorize_normalize(img)?);
    }
    Ok(atoms)
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            MrlrError::Format(format!(
                "truncated dictionary: needed {len} bytes at offset {}",
                self.pos
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Per-atom penalty vector `c` (the diagonal of `C`).
#[derive(Clone, Debug, PartialEq)]
pub struct LocalityAdaptor {
    pub penalties: DVector<f64>,
    pub sigma: f64,
}

impl LocalityAdaptor {
    pub fn len(&self) -> usize {
        self.penalties.len()
    }

    pub fn is_empty(&self) -> bool {
        self.penalties.is_empty()
    }

    /// Index of the zero penalty (most correlated atom, lowest index on ties).
    pub fn argmin(&self) -> usize {
        self.penalties.imin()
    }

    /// Indices of the `s` smallest penalties, ties to the lower index,
    /// returned in ascending index order.
    pub fn select_top_s(&self, s: usize) -> Result<Vec<usize>> {
        let n = self.len();
        if s == 0 || s > n {
            return Err(MrlrError::InvalidInput(format!(
                "s must lie in [1, {n}], got {s}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| self.penalties[i].total_cmp(&self.penalties[j]).then(i.cmp(&j)));
        order.truncate(s);
        order.sort_unstable();
        Ok(order)
    }

    /// [`select_top_s`](Self::select_top_s) with the selected penalties and the argmin.
    pub fn selection(&self, s: usize) -> Result<LocalSelection> {
        let indices = self.select_top_s(s)?;
        Ok(LocalSelection {
            penalties: DVector::from_iterator(s, indices.iter().map(|&i| self.penalties[i])),
            indices,
            argmin: self.argmin(),
        })
    }
}

/// The `s` lowest-penalty atoms in ascending index order, their penalties, and
/// the index of the most correlated atom.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalSelection {
    pub indices: Vec<usize>,
    pub penalties: DVector<f64>,
    pub argmin: usize,
}

/// Locality-constrained dictionary: selected columns with their penalties.
#[derive(Clone, Debug)]
pub struct SubDictionary<'a> {
    parent: &'a Dictionary,
    atoms: Cow<'a, DMatrix<f64>>,
    indices: Vec<usize>,
    penalties: DVector<f64>,
}

impl<'a> SubDictionary<'a> {
    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn penalties(&self) -> &DVector<f64> {
        &self.penalties
    }

    /// Column indices into the parent dictionary.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn labels(&self) -> Vec<Label> {
        self.indices.iter().map(|&i| self.parent.labels[i]).collect()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `D_sᵀD_s`, reusing the parent's cached Gram matrix when every atom is kept.
    pub fn gram(&self) -> DMatrix<f64> {
        match &self.atoms {
            Cow::Borrowed(_) => self.parent.gram().clone(),
            Cow::Owned(a) => a.transpose() * a,
        }
    }
}
