//! IDX-format loader for the MNIST image/label files.
//!
//! Layout: big-endian magic (0x00000803 for ubyte images with 3 dims,
//! 0x00000801 for ubyte labels with 1 dim), the big-endian dimension sizes,
//! then the raw unsigned bytes. Pixels are scaled by 1/255 into [0, 1].

use std::path::Path;

use crate::error::{DcqError, Result};
use crate::tensor::{Element, Tensor};

use super::{Dataset, Split};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const NUM_CLASSES: usize = 10;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| DcqError::Format(format!("truncated file reading {what}")))?;
    Ok(u32::from_be_bytes(slice.try_into().expect("4 bytes")))
}

pub fn load_mnist_idx<T: Element>(
    images_path: &Path,
    labels_path: &Path,
    split: Split,
) -> Result<Dataset<T>> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;

    let magic = read_u32_be(&images, 0, "images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(DcqError::Format(format!(
            "images file has magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(&images, 4, "image count")? as usize;
    let rows = read_u32_be(&images, 8, "rows")? as usize;
    let cols = read_u32_be(&images, 12, "cols")? as usize;
    let expected = 16 + count * rows * cols;
    if images.len() != expected {
        return Err(DcqError::Format(format!(
            "images file is {} bytes, header implies {expected}",
            images.len()
        )));
    }

    let lmagic = read_u32_be(&labels, 0, "labels magic")?;
    if lmagic != LABELS_MAGIC {
        return Err(DcqError::Format(format!(
            "labels file has magic {lmagic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let lcount = read_u32_be(&labels, 4, "label count")? as usize;
    if labels.len() != 8 + lcount {
        return Err(DcqError::Format(format!(
            "labels file is {} bytes, header implies {}",
            labels.len(),
            8 + lcount
        )));
    }
    if lcount != count {
        return Err(DcqError::Format(format!(
            "{count} images but {lcount} labels"
        )));
    }

    let scale = T::from_f64(1.0 / 255.0);
    let data: Vec<T> =
        images[16..].iter().map(|&b| T::from_f64(b as f64) * scale).collect();
    let inputs = Tensor::new(vec![count, 1, rows, cols], data)?;
    let label_vec: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    if let Some(&bad) = label_vec.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(DcqError::Format(format!("label byte {bad} is not a digit")));
    }
    Dataset::new(inputs, label_vec, NUM_CLASSES, split)
}
