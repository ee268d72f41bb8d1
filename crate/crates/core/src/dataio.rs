//! IDX image and label files (the MNIST container format).
//!
//! Only unsigned-byte payloads are supported. A file is a big-endian magic
//! `[0, 0, 0x08, ndim]`, `ndim` big-endian `u32` extents, then the bytes.

use std::path::Path;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const UBYTE: u8 = 0x08;
const SPLIT_TAG: u64 = 11;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndim = bytes[3] as usize;
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UBYTE || !(ndim == 1 || ndim == 3) {
        return Err(Error::BadMagic(magic));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(Error::Truncated {
            expected: header + n,
            found: bytes.len(),
        });
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn write_idx(arr: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, UBYTE, arr.dims.len() as u8];
    for &d in &arr.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    /// `N x 1 x H x W`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Option<Vec<u8>>,
    pub sources: Vec<String>,
    /// Hex SHA-256 of the image file followed by the label file, if any.
    pub checksum: String,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }

    /// Subset in the given order.
    pub fn select(&self, idx: &[usize]) -> ImageDataset {
        let d: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.image_shape());
        ImageDataset {
            images: tensor_allow_empty(shape, data),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            sources: self.sources.clone(),
            checksum: self.checksum.clone(),
        }
    }

    /// Build from `u8` pixels of shape `N x H x W`.
    pub fn from_idx(images: &IdxArray, labels: Option<&IdxArray>) -> Result<Self> {
        if images.dims.len() != 3 {
            return Err(Error::Shape(format!("image file has dims {:?}, expected 3", images.dims)));
        }
        if let Some(l) = labels {
            if l.dims.len() != 1 || l.dims[0] != images.dims[0] {
                return Err(Error::Shape(format!(
                    "{} images but label dims {:?}",
                    images.dims[0], l.dims
                )));
            }
        }
        let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
        let data = images.data.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self {
            images: tensor_allow_empty(vec![n, 1, h, w], data),
            labels: labels.map(|l| l.data.clone()),
            sources: Vec::new(),
            checksum: String::new(),
        })
    }

    /// Back to IDX bytes; exact for data loaded from `u8` files.
    pub fn to_idx(&self) -> (IdxArray, Option<IdxArray>) {
        let s = self.images.shape();
        let images = IdxArray {
            dims: vec![s[0], s[2], s[3]],
            data: self
                .images
                .data()
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect(),
        };
        let labels = self.labels.as_ref().map(|l| IdxArray {
            dims: vec![l.len()],
            data: l.clone(),
        });
        (images, labels)
    }
}

fn tensor_allow_empty(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::batch(shape[0], &shape[1..], data).expect("dataset tensor shape")
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Read an image file and optional label file without splitting.
pub fn load_images(image_path: &Path, label_path: Option<&Path>) -> Result<ImageDataset> {
    let ib = read(image_path)?;
    let lb = label_path.map(read).transpose()?;
    let images = parse_idx(&ib)?;
    let labels = lb.as_deref().map(parse_idx).transpose()?;
    let mut ds = ImageDataset::from_idx(&images, labels.as_ref())?;
    let mut h = Sha256::new();
    h.update(&ib);
    ds.sources.push(image_path.display().to_string());
    if let (Some(b), Some(p)) = (&lb, label_path) {
        h.update(b);
        ds.sources.push(p.display().to_string());
    }
    ds.checksum = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(ds)
}

/// Seeded random split of `n` indices into `(train, val)` with `val_size`
/// validation entries; both keep ascending order.
pub fn split_indices(n: usize, val_size: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let val_size = val_size.min(n);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(rng::derive(seed, SPLIT_TAG), 0));
    let mut val = perm[..val_size].to_vec();
    let mut train = perm[val_size..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Load an IDX file pair and split off a seeded validation set.
pub fn load_dataset(
    image_path: &Path,
    label_path: Option<&Path>,
    val_size: usize,
    seed: u64,
) -> Result<(ImageDataset, ImageDataset)> {
    let ds = load_images(image_path, label_path)?;
    let (train, val) = split_indices(ds.len(), val_size, seed);
    Ok((ds.select(&train), ds.select(&val)))
}

/// Training and validation subsets of `ds`: a seeded split with
/// `val_size` validation images, then the training part truncated to its
/// first `max_train` images (0 keeps all).
pub fn training_split(ds: &ImageDataset, val_size: usize, max_train: usize, seed: u64) -> (ImageDataset, ImageDataset) {
    let (mut train, val) = split_indices(ds.len(), val_size, seed);
    if max_train > 0 {
        train.truncate(max_train);
    }
    (ds.select(&train), ds.select(&val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file() -> Vec<u8> {
        vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 128, 255, 64]
    }

    #[test]
    fn hand_built_image_file() {
        let a = parse_idx(&image_file()).unwrap();
        assert_eq!(a.dims, vec![1, 2, 2]);
        assert_eq!(a.data, vec![0, 128, 255, 64]);
        let ds = ImageDataset::from_idx(&a, None).unwrap();
        assert_eq!(ds.image(0), &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);
    }

    #[test]
    fn hand_built_label_file() {
        let a = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 1]).unwrap();
        assert_eq!(a.dims, vec![3]);
        assert_eq!(a.data, vec![7, 2, 1]);
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(parse_idx(&[0, 0, 8, 2, 0, 0, 0, 0]), Err(Error::BadMagic(0x0802))));
        assert!(matches!(parse_idx(&[0, 0, 9, 1, 0, 0, 0, 0]), Err(Error::BadMagic(_))));
        let mut f = image_file();
        f.pop();
        assert!(matches!(parse_idx(&f), Err(Error::Truncated { expected: 20, found: 19 })));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let f = image_file();
        let ds = ImageDataset::from_idx(&parse_idx(&f).unwrap(), None).unwrap();
        assert_eq!(write_idx(&ds.to_idx().0), f);
    }

    #[test]
    fn splits_are_disjoint_and_seeded() {
        let (t, v) = split_indices(100, 30, 4);
        assert_eq!(t.len() + v.len(), 100);
        assert!(t.iter().all(|i| !v.contains(i)));
        assert_eq!(split_indices(100, 30, 4), (t, v));
        let (t, v) = split_indices(10, 0, 1);
        assert_eq!(t, (0..10).collect::<Vec<_>>());
        assert!(v.is_empty());
    }
}
