//! IDX reader for the MNIST digit files.

use std::path::Path;

use super::{Dataset, Inputs, Targets};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn idx_err(name: &str, offset: usize, detail: impl Into<String>) -> Error {
    Error::Idx {
        source_name: name.to_string(),
        offset,
        detail: detail.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, name: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_err(name, offset, "truncated header"))
}

fn expect_magic(bytes: &[u8], want: u32, name: &str) -> Result<()> {
    let got = read_u32(bytes, 0, name)?;
    if got != want {
        return Err(idx_err(name, 0, format!("magic {got:#010x}, expected {want:#010x}")));
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8], name: &str) -> Result<IdxImages> {
    expect_magic(bytes, IMAGE_MAGIC, name)?;
    let count = read_u32(bytes, 4, name)? as usize;
    let rows = read_u32(bytes, 8, name)? as usize;
    let cols = read_u32(bytes, 12, name)? as usize;
    let body = &bytes[16..];
    let want = count * rows * cols;
    if body.len() != want {
        return Err(idx_err(
            name,
            16 + body.len().min(want),
            format!("{count}x{rows}x{cols} header needs {want} pixel bytes, found {}", body.len()),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8], name: &str) -> Result<Vec<u8>> {
    expect_magic(bytes, LABEL_MAGIC, name)?;
    let count = read_u32(bytes, 4, name)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(idx_err(
            name,
            8 + body.len().min(count),
            format!("header declares {count} labels, found {}", body.len()),
        ));
    }
    if let Some(pos) = body.iter().position(|&l| l > 9) {
        return Err(idx_err(name, 8 + pos, format!("label {} outside 0..10", body[pos])));
    }
    Ok(body.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn pair(images: &Path, labels: &Path) -> Result<(IdxImages, Vec<u8>)> {
    let img = parse_images(&read(images)?, &images.display().to_string())?;
    let lab = parse_labels(&read(labels)?, &labels.display().to_string())?;
    if img.count != lab.len() {
        return Err(idx_err(
            &labels.display().to_string(),
            4,
            format!("{} labels for {} images", lab.len(), img.count),
        ));
    }
    Ok((img, lab))
}

fn to_dataset(name: &str, img: IdxImages, labels: Vec<u8>, n_train: usize) -> Dataset {
    let n = img.count;
    Dataset {
        name: name.into(),
        inputs: Inputs::Pixels {
            data: img.pixels,
            width: img.rows * img.cols,
        },
        targets: Targets::Classes {
            labels: labels.into_iter().map(usize::from).collect(),
            n_classes: 10,
        },
        train: (0..n_train).collect(),
        test: (n_train..n).collect(),
    }
}

/// One image/label file pair, every sample in the training split.
pub fn load_mnist(images: &Path, labels: &Path) -> Result<Dataset> {
    let (img, lab) = pair(images, labels)?;
    let n = img.count;
    Ok(to_dataset("mnist", img, lab, n))
}

/// The standard 60k/10k split from a directory holding the four files.
pub fn load_mnist_dir(dir: &Path) -> Result<Dataset> {
    let (mut train, mut train_lab) = pair(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let (test, test_lab) = pair(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    if (train.rows, train.cols) != (test.rows, test.cols) {
        return Err(idx_err(
            &dir.join(TEST_IMAGES).display().to_string(),
            8,
            format!(
                "image size {}x{} differs from training {}x{}",
                test.rows, test.cols, train.rows, train.cols
            ),
        ));
    }
    let n_train = train.count;
    train.pixels.extend_from_slice(&test.pixels);
    train.count += test.count;
    train_lab.extend_from_slice(&test_lab);
    Ok(to_dataset("mnist", train, train_lab, n_train))
}
