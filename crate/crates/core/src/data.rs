//! Datasets: synthetic hierarchical Gaussian clusters and CIFAR-100.
//!
//! The synthetic generator builds the label tree geometrically. Each coarse
//! class gets a center with per-coordinate standard deviation
//! `coarse_spread`; each fine class offsets its parent center with
//! per-coordinate standard deviation `fine_spread`; samples add isotropic
//! Gaussian noise of standard deviation `noise_sigma`. With
//! `coarse_spread > fine_spread`, siblings sit closer to each other than to
//! any non-relative.
//!
//! # Flat dataset export
//!
//! `HCOTDATA` magic, then little-endian `u64` row count and `u64` input
//! width, the inputs as row-major little-endian `f64`, and finally one
//! little-endian `u64` fine label per row.
//!
//! # CIFAR-100 binary format
//!
//! `train.bin` and `test.bin` hold 3074-byte records: coarse label byte,
//! fine label byte, then 3072 image bytes (1024 red, 1024 green, 1024 blue,
//! each 32x32 row-major).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::LabelHierarchy;
use crate::seed;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_IMAGE_BYTES: usize = CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;
pub const CIFAR_RECORD_BYTES: usize = CIFAR_IMAGE_BYTES + 2;
pub const CIFAR_FINE_CLASSES: usize = 100;
pub const CIFAR_COARSE_CLASSES: usize = 20;
pub const CIFAR_TRAIN_RECORDS: usize = 50_000;
pub const CIFAR_TEST_RECORDS: usize = 10_000;
pub const CIFAR_PAD: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("{labels} labels for {rows} input rows")]
    LabelCount { rows: usize, labels: usize },
    #[error("non-finite input at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("label {label} at row {row} is out of range for {num_fine} fine classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        num_fine: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("missing data file {0}")]
    Missing(PathBuf),
    #[error("{path}: length {len} is not a multiple of the {record}-byte record size")]
    BadLength {
        path: PathBuf,
        len: u64,
        record: usize,
    },
    #[error("{path}: record {record} has {kind} label {value} (must be < {limit})")]
    BadLabel {
        path: PathBuf,
        record: usize,
        kind: &'static str,
        value: u8,
        limit: u8,
    },
    #[error("expected {expected}-wide rows of 32x32x3 images, got {got}")]
    ImageShape { expected: usize, got: usize },
    #[error(
        "record {record}: fine label {fine} belongs to coarse group {expected}, file says {coarse}"
    )]
    CoarseMismatch {
        record: usize,
        fine: usize,
        coarse: usize,
        expected: usize,
    },
    #[error("flat dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Inputs (N x D) and fine labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    fine_labels: Vec<usize>,
    split: Split,
}

impl Dataset {
    pub fn new(
        inputs: Array2<f64>,
        fine_labels: Vec<usize>,
        split: Split,
    ) -> Result<Self, DataError> {
        if inputs.nrows() == 0 {
            return Err(DataError::Empty);
        }
        if fine_labels.len() != inputs.nrows() {
            return Err(DataError::LabelCount {
                rows: inputs.nrows(),
                labels: fine_labels.len(),
            });
        }
        if let Some(((row, col), _)) = inputs.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(DataError::NonFinite { row, col });
        }
        Ok(Self {
            inputs,
            fine_labels,
            split,
        })
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn fine_labels(&self) -> &[usize] {
        &self.fine_labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.fine_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Checks every label against `num_fine`.
    pub fn check_labels(&self, num_fine: usize) -> Result<(), DataError> {
        match self
            .fine_labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= num_fine)
        {
            Some((row, &label)) => Err(DataError::LabelOutOfRange {
                row,
                label,
                num_fine,
            }),
            None => Ok(()),
        }
    }

    /// Copies the rows at `indices` into a new minibatch.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let inputs = self.inputs.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.fine_labels[i]).collect();
        (inputs, labels)
    }

    /// Writes the flat binary export described in the module docs.
    pub fn write_flat<W: Write>(&self, mut writer: W) -> Result<(), DataError> {
        writer.write_all(FLAT_MAGIC)?;
        writer.write_all(&(self.len() as u64).to_le_bytes())?;
        writer.write_all(&(self.dim() as u64).to_le_bytes())?;
        for v in self.inputs.iter() {
            writer.write_all(&v.to_le_bytes())?;
        }
        for &l in &self.fine_labels {
            writer.write_all(&(l as u64).to_le_bytes())?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_flat<R: Read>(mut reader: R, split: Split) -> Result<Self, DataError> {
        let mut magic = [0u8; 8];
        reader.read_exact(&mut magic)?;
        if &magic != FLAT_MAGIC {
            return Err(DataError::Format("bad magic".into()));
        }
        let mut word = [0u8; 8];
        reader.read_exact(&mut word)?;
        let rows = u64::from_le_bytes(word) as usize;
        reader.read_exact(&mut word)?;
        let dim = u64::from_le_bytes(word) as usize;
        let mut values = Vec::with_capacity(rows * dim);
        for _ in 0..rows * dim {
            reader.read_exact(&mut word)?;
            values.push(f64::from_le_bytes(word));
        }
        let mut labels = Vec::with_capacity(rows);
        for _ in 0..rows {
            reader.read_exact(&mut word)?;
            labels.push(u64::from_le_bytes(word) as usize);
        }
        let inputs = Array2::from_shape_vec((rows, dim), values)
            .map_err(|e| DataError::Format(e.to_string()))?;
        Self::new(inputs, labels, split)
    }
}

const FLAT_MAGIC: &[u8; 8] = b"HCOTDATA";

/// Parameters of the synthetic hierarchical cluster task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_coarse: usize,
    pub fines_per_coarse: usize,
    pub dim: usize,
    /// Training samples per fine class.
    pub samples_per_fine: usize,
    /// Test samples per fine class.
    pub test_samples_per_fine: usize,
    pub coarse_spread: f64,
    pub fine_spread: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn num_fine(&self) -> usize {
        self.num_coarse * self.fines_per_coarse
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: &str| Err(DataError::InvalidSpec(msg.to_string()));
        if self.num_coarse == 0 || self.fines_per_coarse == 0 {
            return bad("num_coarse and fines_per_coarse must be positive");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.samples_per_fine == 0 || self.test_samples_per_fine == 0 {
            return bad("samples per fine class must be positive");
        }
        if !(self.fine_spread > 0.0 && self.coarse_spread > self.fine_spread) {
            return bad("spreads must satisfy coarse_spread > fine_spread > 0");
        }
        if !(self.noise_sigma >= 0.0
            && self.noise_sigma.is_finite()
            && self.coarse_spread.is_finite())
        {
            return bad("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
    pub hierarchy: LabelHierarchy,
    /// Fine-class centers, one row per fine class.
    pub fine_centers: Array2<f64>,
}

/// Generates train and test splits plus the hierarchy that produced them.
///
/// Fine class `f` belongs to coarse group `f / fines_per_coarse`. Rows are
/// ordered by class; the trainer shuffles.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, DataError> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);
    let mut normal = move |scale: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    };
    let num_fine = spec.num_fine();
    let coarse_centers =
        Array2::from_shape_simple_fn((spec.num_coarse, spec.dim), || normal(spec.coarse_spread));
    let mut fine_centers = Array2::zeros((num_fine, spec.dim));
    for f in 0..num_fine {
        let parent = coarse_centers.row(f / spec.fines_per_coarse);
        for (d, c) in fine_centers.row_mut(f).iter_mut().enumerate() {
            *c = parent[d] + normal(spec.fine_spread);
        }
    }
    let mut sample = |per_fine: usize, split: Split| {
        let rows = num_fine * per_fine;
        let mut inputs = Array2::zeros((rows, spec.dim));
        let mut labels = Vec::with_capacity(rows);
        for f in 0..num_fine {
            for k in 0..per_fine {
                let mut row = inputs.row_mut(f * per_fine + k);
                for (d, x) in row.iter_mut().enumerate() {
                    *x = fine_centers[[f, d]] + normal(spec.noise_sigma);
                }
                labels.push(f);
            }
        }
        Dataset::new(inputs, labels, split)
    };
    let train = sample(spec.samples_per_fine, Split::Train)?;
    let test = sample(spec.test_samples_per_fine, Split::Test)?;
    let hierarchy = LabelHierarchy::uniform(spec.num_coarse, spec.fines_per_coarse)
        .expect("positive group counts form a valid hierarchy");
    Ok(SyntheticData {
        train,
        test,
        hierarchy,
        fine_centers,
    })
}

/// Locates `train.bin` / `test.bin` under `dir` or `dir/cifar-100-binary`.
pub fn cifar100_file(dir: &Path, split: Split) -> Result<PathBuf, DataError> {
    let name = format!("{}.bin", split.as_str());
    [dir.join(&name), dir.join("cifar-100-binary").join(&name)]
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| DataError::Missing(dir.join(&name)))
}

/// Loads one CIFAR-100 split, pixels scaled to `[0, 1]`.
///
/// Returns the dataset (fine labels) and the per-record coarse labels.
pub fn load_cifar100(dir: &Path, split: Split) -> Result<(Dataset, Vec<usize>), DataError> {
    let path = cifar100_file(dir, split)?;
    let bytes = fs::read(&path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(DataError::BadLength {
            path,
            len: bytes.len() as u64,
            record: CIFAR_RECORD_BYTES,
        });
    }
    let records = bytes.len() / CIFAR_RECORD_BYTES;
    let mut inputs = Array2::zeros((records, CIFAR_IMAGE_BYTES));
    let mut fine = Vec::with_capacity(records);
    let mut coarse = Vec::with_capacity(records);
    for (record, (chunk, mut row)) in bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .zip(inputs.rows_mut())
        .enumerate()
    {
        let check = |value: u8, limit: usize, kind: &'static str| {
            if value as usize >= limit {
                Err(DataError::BadLabel {
                    path: path.clone(),
                    record,
                    kind,
                    value,
                    limit: limit as u8,
                })
            } else {
                Ok(value as usize)
            }
        };
        coarse.push(check(chunk[0], CIFAR_COARSE_CLASSES, "coarse")?);
        fine.push(check(chunk[1], CIFAR_FINE_CLASSES, "fine")?);
        for (x, &b) in row.iter_mut().zip(&chunk[2..]) {
            *x = b as f64 / 255.0;
        }
    }
    Ok((Dataset::new(inputs, fine, split)?, coarse))
}

/// Checks recorded coarse labels against `h`.
pub fn verify_coarse_labels(
    fine: &[usize],
    coarse: &[usize],
    h: &LabelHierarchy,
) -> Result<(), DataError> {
    if fine.len() != coarse.len() {
        return Err(DataError::LabelCount {
            rows: fine.len(),
            labels: coarse.len(),
        });
    }
    for (record, (&f, &c)) in fine.iter().zip(coarse).enumerate() {
        let expected = *h
            .fine_to_coarse()
            .get(f)
            .ok_or(DataError::LabelOutOfRange {
                row: record,
                label: f,
                num_fine: h.num_fine(),
            })?;
        if expected != c {
            return Err(DataError::CoarseMismatch {
                record,
                fine: f,
                coarse: c,
                expected,
            });
        }
    }
    Ok(())
}

/// Per-channel mean of channel-planar 32x32x3 rows.
pub fn channel_means(data: &Dataset) -> Result<[f64; CIFAR_CHANNELS], DataError> {
    check_image_width(data.dim())?;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut means = [0.0; CIFAR_CHANNELS];
    for (c, mean) in means.iter_mut().enumerate() {
        let sum: f64 = data
            .inputs
            .rows()
            .into_iter()
            .map(|r| r.slice(ndarray::s![c * plane..(c + 1) * plane]).sum())
            .sum();
        *mean = sum / (plane * data.len()) as f64;
    }
    Ok(means)
}

/// Subtracts per-channel constants in place.
pub fn subtract_channel_means(
    data: &mut Dataset,
    means: &[f64; CIFAR_CHANNELS],
) -> Result<(), DataError> {
    check_image_width(data.dim())?;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for mut row in data.inputs.rows_mut() {
        for (i, x) in row.iter_mut().enumerate() {
            *x -= means[i / plane];
        }
    }
    Ok(())
}

fn check_image_width(got: usize) -> Result<(), DataError> {
    if got != CIFAR_IMAGE_BYTES {
        return Err(DataError::ImageShape {
            expected: CIFAR_IMAGE_BYTES,
            got,
        });
    }
    Ok(())
}

/// Crops a 32x32 window at `(offset_y, offset_x)` out of the image zero-padded
/// by 4 on each side, then mirrors horizontally if `flip`. An offset of
/// `(4, 4)` without flip reproduces the input.
pub fn crop_flip_image(src: &[f64], dst: &mut [f64], offset_y: usize, offset_x: usize, flip: bool) {
    debug_assert_eq!(src.len(), CIFAR_IMAGE_BYTES);
    debug_assert_eq!(dst.len(), CIFAR_IMAGE_BYTES);
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for c in 0..CIFAR_CHANNELS {
        for y in 0..CIFAR_SIDE {
            for x in 0..CIFAR_SIDE {
                let sx = if flip { CIFAR_SIDE - 1 - x } else { x };
                // coordinates in the unpadded source
                let py = (y + offset_y)
                    .checked_sub(CIFAR_PAD)
                    .filter(|&v| v < CIFAR_SIDE);
                let px = (sx + offset_x)
                    .checked_sub(CIFAR_PAD)
                    .filter(|&v| v < CIFAR_SIDE);
                dst[c * plane + y * CIFAR_SIDE + x] = match (py, px) {
                    (Some(py), Some(px)) => src[c * plane + py * CIFAR_SIDE + px],
                    _ => 0.0,
                };
            }
        }
    }
}

/// Random pad-4 crop and 50% horizontal flip of every row, seeded.
pub fn augment_crop_flip(inputs: &mut Array2<f64>, seed: u64) -> Result<(), DataError> {
    check_image_width(inputs.ncols())?;
    let mut rng = seed::rng(seed);
    let mut src = vec![0.0; CIFAR_IMAGE_BYTES];
    for mut row in inputs.rows_mut() {
        let oy = rng.random_range(0..=2 * CIFAR_PAD);
        let ox = rng.random_range(0..=2 * CIFAR_PAD);
        let flip = rng.random_bool(0.5);
        src.iter_mut().zip(row.iter()).for_each(|(s, &v)| *s = v);
        let dst = row
            .as_slice_mut()
            .expect("rows of a standard-layout array are contiguous");
        crop_flip_image(&src, dst, oy, ox, flip);
    }
    Ok(())
}
