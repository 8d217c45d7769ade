//! MNIST IDX and CIFAR-10 binary readers.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::tensor::{Shape4, Tensor};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetId {
    MnistIdx,
    Cifar10Bin,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::MnistIdx => "mnist_idx",
            DatasetId::Cifar10Bin => "cifar10_bin",
        }
    }

    /// `(channels, height, width)` of one image.
    pub fn image_dims(self) -> (usize, usize, usize) {
        match self {
            DatasetId::MnistIdx => (1, 28, 28),
            DatasetId::Cifar10Bin => (3, 32, 32),
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist_idx" => Ok(DatasetId::MnistIdx),
            "cifar10_bin" => Ok(DatasetId::Cifar10Bin),
            _ => Err(config_err(format!("unknown dataset `{s}`"))),
        }
    }
}

/// Images as `(n, c, h, w)` reals plus one label byte per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the listed samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<u8>) {
        let s = self.images.shape();
        let per = s.c * s.plane();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let images =
            Tensor::from_vec(Shape4::new(indices.len(), s.c, s.h, s.w), data).expect("sized batch");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Keeps the first `limit` samples.
    pub fn truncate(&mut self, limit: usize) {
        if limit >= self.len() {
            return;
        }
        let s = self.images.shape();
        let per = s.c * s.plane();
        let mut data = std::mem::replace(
            &mut self.images,
            Tensor::zeros(Shape4::new(0, s.c, s.h, s.w)),
        )
        .into_vec();
        data.truncate(limit * per);
        self.images =
            Tensor::from_vec(Shape4::new(limit, s.c, s.h, s.w), data).expect("sized split");
        self.labels.truncate(limit);
    }

    /// Per-channel mean over all images and pixels.
    pub fn channel_means(&self) -> Vec<f64> {
        let s = self.images.shape();
        let mut acc = vec![0.0f64; s.c];
        for n in 0..s.n {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += self
                    .images
                    .plane(n, c)
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
        }
        let count = (s.n * s.plane()).max(1) as f64;
        acc.iter().map(|a| a / count).collect()
    }

    pub fn subtract_means(&mut self, means: &[f64]) {
        let s = self.images.shape();
        for n in 0..s.n {
            for (c, &m) in means.iter().enumerate() {
                self.images
                    .plane_mut(n, c)
                    .iter_mut()
                    .for_each(|v| *v -= m as f32);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub id: DatasetId,
    pub classes: usize,
    pub train: Split,
    pub test: Split,
    /// Training-set channel means removed from both splits.
    pub means: Vec<f64>,
}

fn ingest(offset: usize, message: impl Into<String>) -> Error {
    Error::Ingestion {
        offset: offset as u64,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| ingest(at, "truncated IDX header"))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(ingest(0, format!("bad IDX image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return Err(ingest(
            bytes.len(),
            format!("IDX images truncated, expected {need} bytes"),
        ));
    }
    if bytes.len() > need {
        return Err(ingest(need, "trailing bytes after IDX images"));
    }
    Ok((n, h, w, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], classes: usize) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(ingest(0, format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(ingest(
            bytes.len(),
            format!("IDX labels truncated, expected {need} bytes"),
        ));
    }
    if bytes.len() > need {
        return Err(ingest(need, "trailing bytes after IDX labels"));
    }
    let labels = bytes[8..].to_vec();
    if let Some(i) = labels.iter().position(|&l| l as usize >= classes) {
        return Err(ingest(8 + i, format!("label {} out of range", labels[i])));
    }
    Ok(labels)
}

/// Parses CIFAR-10 records (label byte, then R, G, B 32x32 planes).
pub fn parse_cifar(bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let at = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(ingest(at, "truncated CIFAR record"));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(ingest(
                i * CIFAR_RECORD,
                format!("label {} out of range", rec[0]),
            ));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

fn to_split(pixels: &[u8], labels: Vec<u8>, dims: (usize, usize, usize)) -> Split {
    let (c, h, w) = dims;
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Split {
        images: Tensor::from_vec(Shape4::new(labels.len(), c, h, w), data).expect("sized split"),
        labels,
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn with_context(e: Error, path: &Path) -> Error {
    match e {
        Error::Ingestion { offset, message } => Error::Ingestion {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

fn first_existing(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| config_err(format!("none of {names:?} found in {}", dir.display())))
}

fn load_mnist(dir: &Path) -> Result<(Split, Split)> {
    let mut splits = Vec::new();
    for (img, lbl) in [
        (
            ["train-images-idx3-ubyte", "train-images.idx3-ubyte"],
            ["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"],
        ),
        (
            ["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"],
            ["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"],
        ),
    ] {
        let ip = first_existing(dir, &img)?;
        let lp = first_existing(dir, &lbl)?;
        let (n, h, w, px) = parse_idx_images(&read(&ip)?).map_err(|e| with_context(e, &ip))?;
        let labels = parse_idx_labels(&read(&lp)?, 10).map_err(|e| with_context(e, &lp))?;
        if labels.len() != n {
            return Err(config_err(format!(
                "{} images but {} labels",
                n,
                labels.len()
            )));
        }
        splits.push(to_split(&px, labels, (1, h, w)));
    }
    let test = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok((train, test))
}

fn load_cifar(dir: &Path) -> Result<(Split, Split)> {
    let dir = if dir.join("cifar-10-batches-bin").is_dir() {
        dir.join("cifar-10-batches-bin")
    } else {
        dir.to_path_buf()
    };
    let load = |names: Vec<String>| -> Result<Split> {
        let (mut labels, mut pixels) = (Vec::new(), Vec::new());
        for name in names {
            let p = dir.join(&name);
            let (l, px) = parse_cifar(&read(&p)?).map_err(|e| with_context(e, &p))?;
            labels.extend(l);
            pixels.extend(px);
        }
        Ok(to_split(&pixels, labels, (3, 32, 32)))
    };
    let train = load((1..=5).map(|i| format!("data_batch_{i}.bin")).collect())?;
    let test = load(vec!["test_batch.bin".to_string()])?;
    Ok((train, test))
}

/// Reads both splits from `dir`, scales pixels to `[0, 1]` and removes the
/// training-set channel means.
pub fn load_dataset(id: DatasetId, dir: &Path) -> Result<Dataset> {
    let (mut train, mut test) = match id {
        DatasetId::MnistIdx => load_mnist(dir)?,
        DatasetId::Cifar10Bin => load_cifar(dir)?,
    };
    let means = train.channel_means();
    train.subtract_means(&means);
    test.subtract_means(&means);
    Ok(Dataset {
        id,
        classes: 10,
        train,
        test,
        means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, h, w] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..n * h * w).map(|i| (i % 251) as u8));
        b
    }

    #[test]
    fn idx_dims() {
        let (n, h, w, px) = parse_idx_images(&idx_images(10000, 28, 28)).unwrap();
        assert_eq!((n, h, w, px.len()), (10000, 28, 28, 10000 * 784));
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let mut b = idx_images(2, 2, 2);
        b.pop();
        assert!(matches!(
            parse_idx_images(&b),
            Err(Error::Ingestion { offset: 23, .. })
        ));
        b[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&b),
            Err(Error::Ingestion { offset: 0, .. })
        ));
        let mut l = Vec::new();
        l.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        l.extend_from_slice(&3u32.to_be_bytes());
        l.extend_from_slice(&[1, 12, 3]);
        assert!(matches!(
            parse_idx_labels(&l, 10),
            Err(Error::Ingestion { offset: 9, .. })
        ));
    }

    #[test]
    fn cifar_batch_size_and_bad_label() {
        assert_eq!(10000 * CIFAR_RECORD, 30_730_000);
        let mut b = vec![0u8; 3 * CIFAR_RECORD];
        b[CIFAR_RECORD] = 4;
        let (labels, px) = parse_cifar(&b).unwrap();
        assert_eq!(labels, vec![0, 4, 0]);
        assert_eq!(px.len(), 3 * 3072);
        b[2 * CIFAR_RECORD] = 10;
        assert!(
            matches!(parse_cifar(&b), Err(Error::Ingestion { offset, .. }) if offset == 2 * CIFAR_RECORD as u64)
        );
        assert!(matches!(
            parse_cifar(&b[..100]),
            Err(Error::Ingestion { offset: 0, .. })
        ));
    }

    #[test]
    fn loads_cifar_directory_and_centers_channels() {
        let dir = tempfile::tempdir().unwrap();
        for (name, n) in [
            ("data_batch_1.bin", 3),
            ("data_batch_2.bin", 1),
            ("data_batch_3.bin", 1),
            ("data_batch_4.bin", 1),
            ("data_batch_5.bin", 1),
            ("test_batch.bin", 2),
        ] {
            let mut b = Vec::new();
            for i in 0..n {
                b.push((i % 10) as u8);
                b.extend((0..3072).map(|p| ((p / 1024) * 100 + i) as u8));
            }
            fs::write(dir.path().join(name), b).unwrap();
        }
        let d = load_dataset(DatasetId::Cifar10Bin, dir.path()).unwrap();
        assert_eq!((d.train.len(), d.test.len()), (7, 2));
        assert_eq!(d.train.images.shape(), Shape4::new(7, 3, 32, 32));
        for m in d.train.channel_means() {
            assert!(m.abs() < 1e-5);
        }
        assert!(load_dataset(DatasetId::MnistIdx, dir.path()).is_err());
    }

    #[test]
    fn batch_and_truncate() {
        let mut s = to_split(&(0..4u8).collect::<Vec<_>>(), vec![1, 2, 3, 4], (1, 1, 1));
        let (x, y) = s.batch(&[3, 0]);
        assert_eq!(y, vec![4, 1]);
        assert_eq!(x.data()[0], 3.0 / 255.0);
        s.truncate(2);
        assert_eq!(s.len(), 2);
        assert_eq!(s.images.shape().n, 2);
    }
}
