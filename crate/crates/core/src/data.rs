//! Dataset ingestion and generation: seeded synthetic Gaussian-cluster
//! benchmarks, IDX/CSV loaders for small real image sets, and deterministic
//! batching.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Val => write!(f, "val"),
            SplitTag::Test => write!(f, "test"),
        }
    }
}

/// A labeled split. `inputs` is `[N, ...sample_shape]`, `labels` holds class
/// indices in `[0, class_count)`.
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: SplitTag,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        inputs: Tensor<T>,
        labels: Vec<usize>,
        class_count: usize,
        split: SplitTag,
    ) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(Error::dimension(format!(
                "{} samples but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    /// Copy the given rows into a fresh batch.
    pub fn select(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let sample = self.sample_shape().iter().product::<usize>();
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor::from_vec_unchecked(shape, data), labels)
    }
}

/// Train/val/test triple from one generation or load.
#[derive(Debug, Clone)]
pub struct DatasetBundle<T: Scalar> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

/// Deterministic (seed, epoch) mix so every epoch reshuffles with a stream
/// that is a pure function of both.
fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut z = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Gaussian-cluster classification set.
///
/// Class means have per-coordinate standard deviation `3*delta/sqrt(d)` with
/// unit-variance isotropic noise, so the expected distance between two class
/// means is about `4.2 * delta` noise standard deviations regardless of
/// dimension. Image shapes `[c, h, w]` get two kinds of structure: the mean
/// is drawn on a grid of 4x4-pixel blocks (nearest upsampled) so the class
/// signal is spatially coherent and visible to small convolution kernels,
/// and consecutive classes are paired to share part of their mean energy, a
/// coarse super-class structure that makes some classes genuinely confusable
/// — soft teacher outputs carry that similarity, hard labels do not. Flat
/// shapes draw every coordinate independently with no pairing. Splits are
/// 80/10/10 with membership a pure function of the seed.
pub fn make_synthetic<T: Scalar>(
    classes: usize,
    per_class: usize,
    shape: &[usize],
    delta: f64,
    seed: u64,
) -> Result<DatasetBundle<T>> {
    if classes < 2 {
        return Err(Error::config(format!("need >= 2 classes, got {classes}")));
    }
    if per_class < 1 {
        return Err(Error::config("per_class must be >= 1"));
    }
    if !(delta > 0.0) {
        return Err(Error::config(format!("delta must be > 0, got {delta}")));
    }
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::config(format!("invalid sample shape {shape:?}")));
    }
    let dim: usize = shape.iter().product();
    let total = classes * per_class;
    if total < 3 {
        return Err(Error::config(
            "need at least 3 samples to form train/val/test splits",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean_scale = 3.0 * delta / (dim as f64).sqrt();
    let mut means = Vec::with_capacity(classes);
    if let [c, h, w] = shape[..] {
        let (ch, cw) = (h.div_ceil(4), w.div_ceil(4));
        let cells = c * ch * cw;
        // Shared-vs-unique mix per pair; weights are unit-norm so pairing
        // leaves the marginal mean scale and cross-pair distances unchanged.
        let (w_shared, w_unique) = (0.75f64.sqrt(), 0.25f64.sqrt());
        let mut shared: Vec<Vec<f64>> = Vec::new();
        for class in 0..classes {
            if class % 2 == 0 {
                shared.push(
                    (0..cells)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                );
            }
            let pair = &shared[class / 2];
            let coarse: Vec<f64> = (0..cells)
                .map(|i| {
                    let unique: f64 = rng.sample(StandardNormal);
                    mean_scale * (w_shared * pair[i] + w_unique * unique)
                })
                .collect();
            let mut m = Vec::with_capacity(dim);
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        m.push(coarse[(ci * ch + i / 4) * cw + j / 4]);
                    }
                }
            }
            means.push(m);
        }
    } else {
        for _ in 0..classes {
            means.push(
                (0..dim)
                    .map(|_| mean_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
        }
    }

    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                let noise: f64 = rng.sample(StandardNormal);
                data.push(T::from_f64(m + noise));
            }
            labels.push(c);
        }
    }

    let order = shuffled_indices(total, &mut rng);
    let n_val = ((total as f64) * 0.1).floor().max(1.0) as usize;
    let n_test = n_val;
    let n_train = total - n_val - n_test;

    let mut full_shape = vec![total];
    full_shape.extend_from_slice(shape);
    let all = Dataset::new(
        Tensor::from_vec_unchecked(full_shape, data),
        labels,
        classes,
        SplitTag::Train,
    )?;

    let (train_x, train_y) = all.select(&order[..n_train]);
    let (val_x, val_y) = all.select(&order[n_train..n_train + n_val]);
    let (test_x, test_y) = all.select(&order[n_train + n_val..]);
    Ok(DatasetBundle {
        train: Dataset::new(train_x, train_y, classes, SplitTag::Train)?,
        val: Dataset::new(val_x, val_y, classes, SplitTag::Val)?,
        test: Dataset::new(test_x, test_y, classes, SplitTag::Test)?,
    })
}

/// Carve a seeded validation split out of a dataset. Membership is a pure
/// function of the seed; the two splits are disjoint and cover the input.
pub fn split_train_val<T: Scalar>(
    ds: &Dataset<T>,
    val_fraction: f64,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::config(format!(
            "val_fraction must be in [0,1), got {val_fraction}"
        )));
    }
    let n = ds.len();
    let n_val = ((n as f64) * val_fraction).floor().max(1.0) as usize;
    if n_val >= n {
        return Err(Error::config(format!(
            "validation split of {n_val} leaves no training data (n = {n})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = shuffled_indices(n, &mut rng);
    let (val_x, val_y) = ds.select(&order[..n_val]);
    let (train_x, train_y) = ds.select(&order[n_val..]);
    Ok((
        Dataset::new(train_x, train_y, ds.class_count, SplitTag::Train)?,
        Dataset::new(val_x, val_y, ds.class_count, SplitTag::Val)?,
    ))
}

// ── IDX format ──────────────────────────────────────────────────────────

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

struct BeReader {
    buf: Vec<u8>,
    pos: usize,
    path: String,
}

impl BeReader {
    fn open(path: &Path) -> Result<Self> {
        let buf = fs::read(path)?;
        Ok(Self {
            buf,
            pos: 0,
            path: path.display().to_string(),
        })
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn read_u32(&mut self) -> Result<u32> {
        if self.pos + 4 > self.buf.len() {
            return Err(self.err(format!(
                "truncated: need 4 bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let v = u32::from_be_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn read_bytes(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err(format!(
                "truncated: expected {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Load an IDX image/label file pair (the MNIST container format). Pixel
/// bytes are scaled into `[0, 1]`; images come out as `[N, 1, rows, cols]`.
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let mut ir = BeReader::open(images_path)?;
    let magic = ir.read_u32()?;
    if magic != IDX_IMAGE_MAGIC {
        ir.pos = 0;
        return Err(ir.err(format!(
            "bad magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"
        )));
    }
    let n = ir.read_u32()? as usize;
    let rows = ir.read_u32()? as usize;
    let cols = ir.read_u32()? as usize;
    let pixels = ir.read_bytes(n * rows * cols)?;
    let scale = T::from_f64(1.0 / 255.0);
    let data: Vec<T> = pixels
        .iter()
        .map(|&b| T::from_f64(b as f64) * scale)
        .collect();

    let mut lr = BeReader::open(labels_path)?;
    let magic = lr.read_u32()?;
    if magic != IDX_LABEL_MAGIC {
        lr.pos = 0;
        return Err(lr.err(format!(
            "bad magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"
        )));
    }
    let ln = lr.read_u32()? as usize;
    if ln != n {
        return Err(lr.err(format!("label count {ln} does not match image count {n}")));
    }
    let labels: Vec<usize> = lr.read_bytes(ln)?.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1).max(2);

    Dataset::new(
        Tensor::from_vec_unchecked(vec![n, 1, rows, cols], data),
        labels,
        class_count,
        SplitTag::Train,
    )
}

// ── CSV format ──────────────────────────────────────────────────────────

/// Load `label,pixel0,...,pixelK` rows. `shape` is the per-sample shape and
/// pins the expected pixel count. Offsets in errors are 1-based row numbers.
pub fn load_csv<T: Scalar>(path: &Path, shape: &[usize], has_header: bool) -> Result<Dataset<T>> {
    let text = fs::read_to_string(path)?;
    let sample: usize = shape.iter().product();
    let path_s = path.display().to_string();
    let row_err = |row: usize, msg: String| Error::Format {
        path: path_s.clone(),
        offset: row as u64,
        msg,
    };

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        if has_header && i == 0 {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_field = fields.next().unwrap().trim();
        let label: i64 = label_field
            .parse()
            .map_err(|_| row_err(row, format!("bad label {label_field:?}")))?;
        if label < 0 {
            return Err(row_err(row, format!("label {label} out of range")));
        }
        labels.push(label as usize);
        let mut count = 0;
        for f in fields {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| row_err(row, format!("bad pixel value {f:?}")))?;
            data.push(T::from_f64(v));
            count += 1;
        }
        if count != sample {
            return Err(row_err(
                row,
                format!("expected {sample} pixels per row, got {count}"),
            ));
        }
    }
    if labels.is_empty() {
        return Err(row_err(1, "no data rows".to_string()));
    }
    let n = labels.len();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let mut full_shape = vec![n];
    full_shape.extend_from_slice(shape);
    Dataset::new(
        Tensor::from_vec(full_shape, data)?,
        labels,
        class_count,
        SplitTag::Train,
    )
}

/// Write a dataset in the same CSV layout `load_csv` reads.
pub fn write_csv<T: Scalar>(ds: &Dataset<T>, path: &Path, header: bool) -> Result<()> {
    let mut out = fs::File::create(path)?;
    let sample: usize = ds.sample_shape().iter().product();
    if header {
        let mut line = String::from("label");
        for i in 0..sample {
            line.push_str(&format!(",pixel{i}"));
        }
        writeln!(out, "{line}")?;
    }
    for (i, &y) in ds.labels.iter().enumerate() {
        let mut line = y.to_string();
        for v in &ds.inputs.data()[i * sample..(i + 1) * sample] {
            line.push(',');
            line.push_str(&format!("{}", v.as_f64()));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Plain key=value provenance manifest.
pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for (k, v) in entries {
        writeln!(out, "{k}={v}")?;
    }
    Ok(())
}

// ── Batching ────────────────────────────────────────────────────────────

pub struct BatchIterator<'a, T: Scalar> {
    ds: &'a Dataset<T>,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    drop_last: bool,
}

impl<'a, T: Scalar> BatchIterator<'a, T> {
    pub fn drop_last(mut self, flag: bool) -> Self {
        self.drop_last = flag;
        self
    }
}

impl<'a, T: Scalar> Iterator for BatchIterator<'a, T> {
    type Item = (Tensor<T>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        if self.drop_last && end - self.pos < self.batch {
            self.pos = self.order.len();
            return None;
        }
        let item = self.ds.select(&self.order[self.pos..end]);
        self.pos = end;
        Some(item)
    }
}

/// Seeded shuffled batches: the permutation for epoch `e` under seed `s` is a
/// pure function of `(s, e)`; contiguous slices of `batch_size`, last partial
/// batch kept.
pub fn batches<T: Scalar>(
    ds: &Dataset<T>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> BatchIterator<'_, T> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut rng = epoch_rng(seed, epoch);
    BatchIterator {
        ds,
        batch: batch_size,
        order: shuffled_indices(ds.len(), &mut rng),
        pos: 0,
        drop_last: false,
    }
}

/// The index slices [`batches`] would iterate, for callers that need to pair
/// batch rows with precomputed per-sample data.
pub fn batch_plan(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut rng = epoch_rng(seed, epoch);
    let order = shuffled_indices(n, &mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Unshuffled batches in dataset order, for evaluation.
pub fn eval_batches<T: Scalar>(ds: &Dataset<T>, batch_size: usize) -> BatchIterator<'_, T> {
    BatchIterator {
        ds,
        batch: batch_size,
        order: (0..ds.len()).collect(),
        pos: 0,
        drop_last: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic::<f32>(3, 10, &[2, 4, 4], 1.5, 7).unwrap();
        let b = make_synthetic::<f32>(3, 10, &[2, 4, 4], 1.5, 7).unwrap();
        assert_eq!(a.train.inputs.to_le_bytes(), b.train.inputs.to_le_bytes());
        assert_eq!(a.test.labels, b.test.labels);
        assert_eq!(a.val.inputs.to_le_bytes(), b.val.inputs.to_le_bytes());
    }

    #[test]
    fn synthetic_split_sizes_are_80_10_10() {
        let b = make_synthetic::<f32>(10, 20, &[4], 1.0, 0).unwrap();
        assert_eq!(b.train.len(), 160);
        assert_eq!(b.val.len(), 20);
        assert_eq!(b.test.len(), 20);
    }

    #[test]
    fn large_delta_separates_clusters_for_nearest_centroid() {
        let b = make_synthetic::<f64>(4, 30, &[8], 200.0, 3).unwrap();
        // Centroids from train, classify test by nearest centroid.
        let dim = 8;
        let mut centroids = vec![vec![0.0f64; dim]; 4];
        let mut counts = vec![0usize; 4];
        for (i, &y) in b.train.labels.iter().enumerate() {
            counts[y] += 1;
            for j in 0..dim {
                centroids[y][j] += b.train.inputs.data()[i * dim + j];
            }
        }
        for (c, cnt) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= *cnt as f64;
            }
        }
        let mut correct = 0;
        for (i, &y) in b.test.labels.iter().enumerate() {
            let x = &b.test.inputs.data()[i * dim..(i + 1) * dim];
            let best = (0..4)
                .min_by(|&a, &bb| {
                    let da: f64 = x
                        .iter()
                        .zip(&centroids[a])
                        .map(|(v, m)| (v - m) * (v - m))
                        .sum();
                    let db: f64 = x
                        .iter()
                        .zip(&centroids[bb])
                        .map(|(v, m)| (v - m) * (v - m))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == y {
                correct += 1;
            }
        }
        assert_eq!(correct, b.test.len(), "separated clusters must classify perfectly");
    }

    #[test]
    fn epoch_batches_cover_dataset_exactly() {
        let b = make_synthetic::<f32>(2, 25, &[3], 1.0, 1).unwrap();
        let mut seen = vec![0usize; b.train.len()];
        let sample = 3;
        for (x, y) in batches(&b.train, 7, 42, 0) {
            assert_eq!(x.shape()[0], y.len());
            assert_eq!(x.numel(), y.len() * sample);
            for &label in &y {
                assert!(label < 2);
            }
            seen[0] += y.len(); // total count
        }
        assert_eq!(seen[0], b.train.len());
    }

    #[test]
    fn same_seed_same_epoch_same_order() {
        let b = make_synthetic::<f32>(2, 20, &[2], 1.0, 5).unwrap();
        let x1: Vec<_> = batches(&b.train, 8, 9, 3).map(|(_, y)| y).collect();
        let x2: Vec<_> = batches(&b.train, 8, 9, 3).map(|(_, y)| y).collect();
        let x3: Vec<_> = batches(&b.train, 8, 9, 4).map(|(_, y)| y).collect();
        assert_eq!(x1, x2);
        assert_ne!(x1, x3, "different epochs should reshuffle");
    }

    #[test]
    fn drop_last_discards_partial_batch() {
        let b = make_synthetic::<f32>(2, 13, &[2], 1.0, 5).unwrap();
        let n: usize = batches(&b.train, 8, 0, 0).drop_last(true).map(|(_, y)| y.len()).sum();
        assert_eq!(n, (b.train.len() / 8) * 8);
    }
}
