//! Dataset ingestion: IDX image/label pairs, delimited text tables, one-hot
//! label matrices and stratified subsetting.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples stored one per column of `x`, features scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub name: String,
    /// `(height, width)` when the features are flattened images.
    pub image_dims: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(x: Matrix, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if x.cols() != labels.len() {
            return Err(Error::dims(
                "Dataset",
                format!("{} labels", x.cols()),
                format!("{} labels", labels.len()),
            ));
        }
        Ok(Dataset {
            x,
            labels,
            name: name.into(),
            image_dims: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.rows()
    }

    /// One more than the largest label present.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_columns(idx),
            labels: idx.iter().map(|&j| self.labels[j]).collect(),
            name: self.name.clone(),
            image_dims: self.image_dims,
        }
    }

    /// Short content hash of features and labels, for model metadata.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.x.rows() as u64).to_le_bytes());
        h.update((self.x.cols() as u64).to_le_bytes());
        for v in self.x.as_slice() {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Class-indicator matrix, `c × N`, exactly one `1` per column.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix(Matrix);

impl LabelMatrix {
    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn classes(&self) -> usize {
        self.0.rows()
    }

    /// Recovers the label of each column.
    pub fn labels(&self) -> Vec<usize> {
        (0..self.0.cols())
            .map(|j| (0..self.0.rows()).find(|&i| self.0.get(i, j) == 1.0).unwrap_or(0))
            .collect()
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<LabelMatrix> {
    let mut m = Matrix::zeros(classes, labels.len());
    for (j, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} at sample {j} is out of range for {classes} classes"
            )));
        }
        m.set(l, j, 1.0);
    }
    Ok(LabelMatrix(m))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("truncated header at byte {at}")))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            path,
            format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let expected = n.checked_mul(rows).and_then(|v| v.checked_mul(cols));
    let payload = &bytes[16..];
    if Some(payload.len()) != expected {
        let expected = expected.map_or("more than addressable".into(), |e| e.to_string());
        return Err(Error::format(
            path,
            format!("{n} images of {rows}x{cols} need {expected} bytes, found {}", payload.len()),
        ));
    }
    Ok((n, rows, cols, payload.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(
            path,
            format!("{n} labels declared, found {} bytes", payload.len()),
        ));
    }
    Ok(payload.to_vec())
}

/// Loads an IDX image/label pair. Pixels become `byte / 255`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let (n, rows, cols, pixels) = parse_idx_images(&read(ipath)?, ipath)?;
    let label_bytes = parse_idx_labels(&read(lpath)?, lpath)?;
    if label_bytes.len() != n {
        return Err(Error::format(
            lpath,
            format!("{} labels for {n} images in {}", label_bytes.len(), ipath.display()),
        ));
    }
    let m = rows * cols;
    let mut x = Matrix::zeros(m, n);
    for (j, img) in pixels.chunks_exact(m.max(1)).enumerate().take(n) {
        for (i, &p) in img.iter().enumerate() {
            x.set(i, j, p as f64 / 255.0);
        }
    }
    let name = ipath
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        x,
        labels: label_bytes.into_iter().map(usize::from).collect(),
        name,
        image_dims: Some((rows, cols)),
    })
}

/// Encodes a dataset as an IDX image file and label file, quantizing each
/// feature to `round(255 · v)`.
pub fn idx_bytes(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = ds.image_dims.unwrap_or((ds.features(), 1));
    if rows * cols != ds.features() {
        return Err(Error::InvalidArgument(format!(
            "image dims {rows}x{cols} do not cover {} features",
            ds.features()
        )));
    }
    let n = ds.len();
    let mut img = Vec::with_capacity(16 + n * rows * cols);
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for j in 0..n {
        for i in 0..ds.features() {
            let v = ds.x.get(i, j);
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "feature ({i}, {j}) = {v} cannot be stored as an IDX byte"
                )));
            }
            img.push((v * 255.0).round() as u8);
        }
    }
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &ds.labels {
        let b = u8::try_from(l)
            .map_err(|_| Error::InvalidArgument(format!("label {l} does not fit in a byte")))?;
        lab.push(b);
    }
    Ok((img, lab))
}

pub fn write_idx(ds: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (img, lab) = idx_bytes(ds)?;
    fs::write(images.as_ref(), img).map_err(|e| Error::io(images.as_ref(), e))?;
    fs::write(labels.as_ref(), lab).map_err(|e| Error::io(labels.as_ref(), e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelimitedOptions {
    pub delimiter: char,
    pub label_column: usize,
    /// Skip the first line.
    pub header: bool,
    /// Divide every feature by the largest feature value in the table.
    pub scale: bool,
}

impl Default for DelimitedOptions {
    fn default() -> Self {
        DelimitedOptions {
            delimiter: ',',
            label_column: 0,
            header: false,
            scale: true,
        }
    }
}

/// One sample per row, label in `label_column`, features max-scaled.
pub fn load_delimited(path: impl AsRef<Path>, delimiter: char, label_column: usize) -> Result<Dataset> {
    load_delimited_with(
        path,
        &DelimitedOptions {
            delimiter,
            label_column,
            ..DelimitedOptions::default()
        },
    )
}

pub fn load_delimited_with(path: impl AsRef<Path>, opts: &DelimitedOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut width: Option<usize> = None;
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let skip = usize::from(opts.header);
    for (lineno, line) in text.lines().enumerate().skip(skip) {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(opts.delimiter).map(str::trim).collect();
        let row = lineno + 1;
        match width {
            None => {
                if opts.label_column >= cells.len() {
                    return Err(Error::format(
                        path,
                        format!(
                            "label column {} out of range for {} columns",
                            opts.label_column,
                            cells.len()
                        ),
                    ));
                }
                width = Some(cells.len());
            }
            Some(w) if w != cells.len() => {
                return Err(Error::format(
                    path,
                    format!("row {row} has {} columns, expected {w}", cells.len()),
                ));
            }
            _ => {}
        }
        let mut feats = Vec::with_capacity(cells.len() - 1);
        for (k, cell) in cells.iter().enumerate() {
            if k == opts.label_column {
                labels.push(parse_label(cell).ok_or_else(|| {
                    Error::format(path, format!("row {row}: label `{cell}` is not a class id"))
                })?);
            } else {
                let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                    Error::format(path, format!("row {row}, column {k}: `{cell}` is not a number"))
                })?;
                feats.push(v);
            }
        }
        features.push(feats);
    }
    let m = width.map_or(0, |w| w - 1);
    let n = features.len();
    let mut x = Matrix::zeros(m, n);
    for (j, f) in features.iter().enumerate() {
        for (i, &v) in f.iter().enumerate() {
            x.set(i, j, v);
        }
    }
    if opts.scale {
        let max = x.as_slice().iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            x.as_mut_slice().iter_mut().for_each(|v| *v /= max);
        }
    }
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        x,
        labels,
        name,
        image_dims: None,
    })
}

fn parse_label(cell: &str) -> Option<usize> {
    if let Ok(v) = cell.parse::<usize>() {
        return Some(v);
    }
    let f: f64 = cell.parse().ok()?;
    (f >= 0.0 && f.fract() == 0.0 && f < usize::MAX as f64).then_some(f as usize)
}

/// Seeded sample of `n` columns without replacement, stratified by class.
///
/// Per-class quotas use largest remainders, so each class gets its exact
/// proportional share rounded up or down. When `n` is at least the number
/// of classes every class keeps at least one sample. The result is shuffled.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let total = ds.len();
    if n > total {
        return Err(Error::InvalidArgument(format!(
            "subset of {n} requested from {total} samples"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, &l) in ds.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(j);
    }
    if n > 0 && n < by_class.len() {
        return Err(Error::InvalidArgument(format!(
            "subset of {n} cannot hold one sample from each of {} classes",
            by_class.len()
        )));
    }

    let exact: Vec<f64> = by_class
        .values()
        .map(|v| n as f64 * v.len() as f64 / total.max(1) as f64)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let short = n - quota.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        quota[k] += 1;
    }
    if n > 0 {
        while let Some(empty) = quota.iter().position(|&q| q == 0) {
            let donor = (0..quota.len())
                .filter(|&k| quota[k] > 1)
                .max_by(|&a, &b| {
                    (quota[a] as f64 - exact[a])
                        .partial_cmp(&(quota[b] as f64 - exact[b]))
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .expect("n >= classes leaves a donor");
            quota[donor] -= 1;
            quota[empty] += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(n);
    for (members, &q) in by_class.values().zip(&quota) {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        picked.extend_from_slice(&members[..q]);
    }
    picked.shuffle(&mut rng);
    Ok(ds.select(&picked))
}
