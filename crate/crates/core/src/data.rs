//! Datasets: MNIST in IDX format and synthetic Gaussian blobs.

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use flate2::read::GzDecoder;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::nn::Tensor;
use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX file: {0}")]
    Truncated(String),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} outside 0..{classes}")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// A train/test pair with stable sample indices (file order).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
    pub num_classes: usize,
    /// `(rows, cols)` when samples are grayscale images.
    pub image_shape: Option<(usize, usize)>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.train_x.ncols()
    }

    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    /// Keep the first `train` / `test` samples of each split.
    pub fn truncated(mut self, train: Option<usize>, test: Option<usize>) -> Self {
        if let Some(n) = train.filter(|&n| n < self.train_y.len()) {
            self.train_x = self.train_x.slice(ndarray::s![..n, ..]).to_owned();
            self.train_y.truncate(n);
        }
        if let Some(n) = test.filter(|&n| n < self.test_y.len()) {
            self.test_x = self.test_x.slice(ndarray::s![..n, ..]).to_owned();
            self.test_y.truncate(n);
        }
        self
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.train_y {
            counts[y] += 1;
        }
        counts
    }
}

/// Images of one IDX split, pixels scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Tensor,
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(cur: &mut &[u8], what: &str) -> Result<u32, DataError> {
    cur.read_u32::<BigEndian>()
        .map_err(|_| DataError::Truncated(format!("header field {what}")))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, DataError> {
    let mut cur = bytes;
    let magic = header(&mut cur, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = header(&mut cur, "count")? as usize;
    let rows = header(&mut cur, "rows")? as usize;
    let cols = header(&mut cur, "cols")? as usize;
    let need = count * rows * cols;
    if cur.len() < need {
        return Err(DataError::Truncated(format!(
            "expected {need} pixel bytes, found {}",
            cur.len()
        )));
    }
    let pixels = Array2::from_shape_vec(
        (count, rows * cols),
        cur[..need].iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .expect("length checked");
    Ok(IdxImages { rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let mut cur = bytes;
    let magic = header(&mut cur, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = header(&mut cur, "count")? as usize;
    if cur.len() < count {
        return Err(DataError::Truncated(format!(
            "expected {count} label bytes, found {}",
            cur.len()
        )));
    }
    Ok(cur[..count].iter().map(|&b| b as usize).collect())
}

/// One split from an image file and a label file (raw or gzip-compressed).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<(IdxImages, Vec<usize>), DataError> {
    let images = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    if images.pixels.nrows() != labels.len() {
        return Err(DataError::CountMismatch {
            images: images.pixels.nrows(),
            labels: labels.len(),
        });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= 10) {
        return Err(DataError::LabelOutOfRange {
            index,
            label,
            classes: 10,
        });
    }
    Ok((images, labels))
}

fn find_split(dir: &Path, stem: &str) -> Result<PathBuf, DataError> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(DataError::Io {
        path: dir.join(stem),
        source: io::Error::new(io::ErrorKind::NotFound, "IDX file not found"),
    })
}

/// Load `train-*` and `t10k-*` IDX files from a directory.
pub fn load_mnist_dir(dir: &Path) -> Result<Dataset, DataError> {
    let (train, train_y) = load_mnist_idx(
        &find_split(dir, "train-images-idx3-ubyte")?,
        &find_split(dir, "train-labels-idx1-ubyte")?,
    )?;
    let (test, test_y) = load_mnist_idx(
        &find_split(dir, "t10k-images-idx3-ubyte")?,
        &find_split(dir, "t10k-labels-idx1-ubyte")?,
    )?;
    if (train.rows, train.cols) != (test.rows, test.cols) {
        return Err(DataError::Invalid("train and test image sizes differ".into()));
    }
    Ok(Dataset {
        name: "mnist".into(),
        image_shape: Some((train.rows, train.cols)),
        train_x: train.pixels,
        train_y,
        test_x: test.pixels,
        test_y,
        num_classes: 10,
        class_names: (0..10).map(|d| d.to_string()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub centers: Vec<Vec<f64>>,
    pub std: f64,
    pub per_class: usize,
    pub seed: u64,
}

impl BlobSpec {
    /// Class `c` centred at `separation * e_(c mod dim)`, shifted along the
    /// next axis for classes beyond `dim`.
    pub fn spread(classes: usize, dim: usize, separation: f64, std: f64, per_class: usize, seed: u64) -> Self {
        let centers = (0..classes)
            .map(|c| {
                let mut v = vec![0.0; dim];
                v[c % dim] += separation;
                if c >= dim {
                    v[(c + 1) % dim] += separation * (c / dim) as f64;
                }
                v
            })
            .collect();
        Self {
            centers,
            std,
            per_class,
            seed,
        }
    }
}

/// Gaussian clusters with an 80/20 train/test split stratified by class.
pub fn make_blobs(spec: &BlobSpec) -> Result<Dataset, DataError> {
    let classes = spec.centers.len();
    if classes < 2 {
        return Err(DataError::Invalid("at least two classes required".into()));
    }
    if spec.std.is_nan() || spec.std < 0.0 {
        return Err(DataError::Invalid("blob std must be nonnegative".into()));
    }
    let dim = spec.centers[0].len();
    if dim == 0 || spec.centers.iter().any(|c| c.len() != dim) {
        return Err(DataError::Invalid("centers must share a positive dimension".into()));
    }
    let mut rng = rng::seeded(spec.seed);
    let normal = Normal::new(0.0, spec.std).expect("std checked");
    let n_train = spec.per_class * 4 / 5;
    let mut train: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut test: Vec<(Vec<f64>, usize)> = Vec::new();
    for (class, center) in spec.centers.iter().enumerate() {
        for i in 0..spec.per_class {
            let x: Vec<f64> = center.iter().map(|&c| c + normal.sample(&mut rng)).collect();
            if i < n_train {
                train.push((x, class));
            } else {
                test.push((x, class));
            }
        }
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    let to_tensor = |rows: &[(Vec<f64>, usize)]| {
        Array2::from_shape_vec(
            (rows.len(), dim),
            rows.iter().flat_map(|(x, _)| x.iter().copied()).collect(),
        )
        .expect("consistent dims")
    };
    Ok(Dataset {
        name: "blobs".into(),
        train_x: to_tensor(&train),
        train_y: train.iter().map(|(_, y)| *y).collect(),
        test_x: to_tensor(&test),
        test_y: test.iter().map(|(_, y)| *y).collect(),
        num_classes: classes,
        image_shape: None,
        class_names: (0..classes).map(|c| format!("class {c}")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, count, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn parses_big_endian_header_and_scales_pixels() {
        let img = parse_idx_images(&idx_images(2, 1, 2, &[0, 255, 51, 102])).unwrap();
        assert_eq!((img.rows, img.cols), (1, 2));
        assert_eq!(img.pixels.row(0).to_vec(), vec![0.0, 1.0]);
        assert_eq!(img.pixels[[1, 0]], 0.2);
        assert_eq!(parse_idx_labels(&idx_labels(&[3, 9])).unwrap(), vec![3, 9]);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let err = parse_idx_images(&idx_labels(&[1])).unwrap_err();
        assert!(matches!(err, DataError::BadMagic { expected: 0x803, found: 0x801 }));
        assert!(matches!(parse_idx_images(&idx_images(2, 2, 2, &[0; 7])), Err(DataError::Truncated(_))));
        assert!(matches!(parse_idx_images(&[0, 0, 8]), Err(DataError::Truncated(_))));
        assert!(matches!(parse_idx_labels(&idx_labels(&[1, 2])[..9]), Err(DataError::Truncated(_))));
    }

    #[test]
    fn count_mismatch_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i");
        let lp = dir.path().join("l.gz");
        fs::write(&ip, idx_images(2, 1, 1, &[1, 2])).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&idx_labels(&[4, 5, 6])).unwrap();
        fs::write(&lp, gz.finish().unwrap()).unwrap();
        assert!(matches!(
            load_mnist_idx(&ip, &lp),
            Err(DataError::CountMismatch { images: 2, labels: 3 })
        ));
        fs::write(&ip, idx_images(3, 1, 1, &[1, 2, 3])).unwrap();
        let (img, labels) = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(labels, vec![4, 5, 6]);
        assert_eq!(img.pixels.nrows(), 3);
    }

    #[test]
    fn blob_contracts() {
        let spec = BlobSpec::spread(3, 2, 10.0, 0.0, 10, 4);
        let ds = make_blobs(&spec).unwrap();
        assert_eq!(ds.train_len(), 24);
        assert_eq!(ds.test_y.len(), 6);
        assert_eq!(ds.class_counts(), vec![8, 8, 8]);
        for (row, &y) in ds.train_x.rows().into_iter().zip(&ds.train_y) {
            assert_eq!(row.to_vec(), spec.centers[y]);
        }
        assert_eq!(make_blobs(&spec).unwrap(), ds);
    }

    #[test]
    fn separated_blobs_are_nearest_neighbor_separable() {
        let ds = make_blobs(&BlobSpec::spread(4, 3, 10.0, 1.0, 50, 8)).unwrap();
        let mut correct = 0;
        for (x, &y) in ds.test_x.rows().into_iter().zip(&ds.test_y) {
            let nearest = ds
                .train_x
                .rows()
                .into_iter()
                .enumerate()
                .map(|(i, t)| (i, t.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            correct += (ds.train_y[nearest] == y) as usize;
        }
        assert_eq!(correct, ds.test_y.len());
    }
}
