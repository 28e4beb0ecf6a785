//! IDX image/label file loading (the MNIST on-disk format).

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image file plus its label file. Pixels are scaled to `[0,1]`
/// and shaped `[N,1,rows,cols]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut ir = BufReader::new(File::open(images_path)?);
    let magic = read_u32(&mut ir, "images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad images magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_u32(&mut ir, "image count")? as usize;
    let rows = read_u32(&mut ir, "rows")? as usize;
    let cols = read_u32(&mut ir, "cols")? as usize;
    let mut pixels = vec![0u8; n * rows * cols];
    ir.read_exact(&mut pixels)
        .map_err(|_| Error::Format("truncated image payload".into()))?;

    let mut lr = BufReader::new(File::open(labels_path)?);
    let lmagic = read_u32(&mut lr, "labels magic")?;
    if lmagic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad labels magic {lmagic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let ln = read_u32(&mut lr, "label count")? as usize;
    if ln != n {
        return Err(Error::Format(format!("{n} images but {ln} labels")));
    }
    let mut raw_labels = vec![0u8; ln];
    lr.read_exact(&mut raw_labels)
        .map_err(|_| Error::Format("truncated label payload".into()))?;

    let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(
        Tensor::new(vec![n, 1, rows, cols], data)?,
        labels,
        class_count.max(10),
    )
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("truncated file while reading {what}")))?;
    Ok(u32::from_be_bytes(buf))
}
