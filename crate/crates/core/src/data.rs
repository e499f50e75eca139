//! Gaussian-mixture data with class means on a scaled simplex ETF, IDX file
//! ingestion and export, stratified splits and shuffled batches.

use std::path::Path;

use crate::collapse::make_etf;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

// Independent streams derived from a data seed.
const STREAM_MEANS: u64 = 0;
const STREAM_SAMPLES: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Matrix,
    y: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>, classes: usize) -> Result<Self> {
        if y.len() != x.rows() {
            return Err(Error::shape("Dataset::new", format!("{} labels", x.rows()), format!("{}", y.len())));
        }
        if let Some((index, &label)) = y.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange { index, label, classes });
        }
        Ok(Dataset { x, y, classes })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }

    /// Rows `idx` as a batch.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset { x: self.x.select_rows(idx), y: idx.iter().map(|&i| self.y[i]).collect(), classes: self.classes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// Norm of every class mean (the ETF vertices have unit norm).
    pub separation: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < self.classes || self.n_per_class == 0 {
            return Err(Error::InvalidArgument(format!(
                "synthetic data needs K ≥ 2, D ≥ K and n ≥ 1 (K={}, D={}, n={})",
                self.classes, self.dim, self.n_per_class
            )));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::InvalidArgument(format!("separation must be finite and ≥ 0, got {}", self.separation)));
        }
        Ok(())
    }
}

/// Class means `s·M` as a `D×K` matrix.
pub fn class_means(spec: &SyntheticSpec) -> Result<Matrix> {
    spec.validate()?;
    let etf = make_etf(spec.dim, spec.classes, &mut Rng::derive(spec.seed, STREAM_MEANS))?;
    Ok(etf.m.scale(spec.separation))
}

/// `n_per_class` samples of `N(s·M[:,c], I)` per class, grouped by class.
pub fn gen_gaussian_mixture(spec: &SyntheticSpec) -> Result<Dataset> {
    let means = class_means(spec)?;
    let mut rng = Rng::derive(spec.seed, STREAM_SAMPLES);
    let (k, d) = (spec.classes, spec.dim);
    let n = k * spec.n_per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for c in 0..k {
        for _ in 0..spec.n_per_class {
            data.extend((0..d).map(|j| means[(j, c)] + rng.normal()));
            y.push(c);
        }
    }
    Dataset::new(Matrix::new(n, d, data)?, y, k)
}

/// Stratified split taking `per_class_train[c]` random samples of class `c`
/// for training and the rest for testing. Both parts keep the original
/// relative order.
pub fn split_counts(ds: &Dataset, per_class_train: &[usize], seed: u64) -> Result<(Dataset, Dataset)> {
    if per_class_train.len() != ds.classes {
        return Err(Error::shape("split", format!("{} class counts", ds.classes), format!("{}", per_class_train.len())));
    }
    let mut rng = Rng::new(seed);
    let mut train_mask = vec![false; ds.len()];
    for (c, &take) in per_class_train.iter().enumerate() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.y[i] == c).collect();
        if take == 0 || take >= members.len() {
            return Err(Error::InvalidArgument(format!(
                "split leaves class {c} empty on one side ({take} of {} for training)",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        for &i in &members[..take] {
            train_mask[i] = true;
        }
    }
    let train: Vec<usize> = (0..ds.len()).filter(|&i| train_mask[i]).collect();
    let test: Vec<usize> = (0..ds.len()).filter(|&i| !train_mask[i]).collect();
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Stratified split with `round(fraction · n_c)` training samples per class.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let counts: Vec<usize> = ds.class_counts().iter().map(|&n| (train_fraction * n as f64).round() as usize).collect();
    split_counts(ds, &counts, seed)
}

/// Shuffled index batches covering `0..n` once; the last batch may be short.
pub struct Batches {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batches(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Batches> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    Ok(Batches { order, batch_size, pos: 0 })
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(b)
    }
}

fn idx_err(reason: impl Into<String>) -> Error {
    Error::Format { kind: "IDX", reason: reason.into() }
}

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<u32> {
    buf.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap())).ok_or_else(|| idx_err(format!("truncated before {what}")))
}

/// Parse IDX image (`n × rows × cols`) and label buffers. Each image is
/// flattened and scaled by 1/255.
/// The class count is one more than the largest label.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(format!("image magic {magic:#010x} is not {IDX_IMAGES_MAGIC:#010x}")));
    }
    let ndim = 3;
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        dims.push(be_u32(images, 4 + 4 * i, "image dimensions")? as usize);
    }
    let n = dims[0];
    let per = dims[1..].iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| idx_err("image size overflows"))?;
    let header = 4 + 4 * ndim;
    let total = n.checked_mul(per).ok_or_else(|| idx_err("image size overflows"))?;
    let pixels = images.get(header..header + total).ok_or_else(|| {
        idx_err(format!("image data truncated: need {total} bytes after the header, have {}", images.len() - header.min(images.len())))
    })?;
    if images.len() != header + total {
        return Err(idx_err(format!("{} trailing bytes in image file", images.len() - header - total)));
    }

    let lmagic = be_u32(labels, 0, "label magic")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(idx_err(format!("label magic {lmagic:#010x} is not {IDX_LABELS_MAGIC:#010x}")));
    }
    let ln = be_u32(labels, 4, "label count")? as usize;
    if ln != n {
        return Err(idx_err(format!("{n} images but {ln} labels")));
    }
    let y: Vec<usize> = labels.get(8..8 + ln).ok_or_else(|| idx_err("label data truncated"))?.iter().map(|&b| b as usize).collect();
    if labels.len() != 8 + ln {
        return Err(idx_err(format!("{} trailing bytes in label file", labels.len() - 8 - ln)));
    }
    let classes = y.iter().max().map_or(0, |m| m + 1);
    let x = Matrix::new(n, per, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    Dataset::new(x, y, classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    parse_idx(&read(images_path.as_ref())?, &read(labels_path.as_ref())?)
}

/// IDX encoding with images stored as `n × 1 × D` bytes `round(255·v)`.
/// Values are clamped to `[0, 1]`; datasets on the `k/255` grid (such as
/// [`quantize_unit`] output or loaded IDX data) round-trip exactly.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if ds.classes > 256 {
        return Err(Error::InvalidArgument(format!("IDX labels are single bytes; {} classes", ds.classes)));
    }
    let n = u32::try_from(ds.len()).map_err(|_| Error::InvalidArgument("too many samples for IDX".into()))?;
    let d = u32::try_from(ds.dim()).map_err(|_| Error::InvalidArgument("too many features for IDX".into()))?;
    let mut images = Vec::with_capacity(16 + ds.x.as_slice().len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [n, 1, d] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(ds.x.as_slice().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend(ds.y.iter().map(|&y| y as u8));
    Ok((images, labels))
}

pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (img, lab) = encode_idx(ds)?;
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    std::fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    std::fs::write(lp, lab).map_err(|e| Error::io(lp, e))
}

/// Min-max rescale all features to `[0, 1]` and snap them to the `k/255`
/// grid, so the result survives an IDX round trip unchanged.
pub fn quantize_unit(ds: &Dataset) -> Dataset {
    let xs = ds.x.as_slice();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Dataset { x: ds.x.map(|v| ((v - lo) / span * 255.0).round() / 255.0), y: ds.y.clone(), classes: ds.classes }
}
