//! IDX image/label ingestion: big-endian headers, u8 payloads scaled to
//! [0, 1], flattened row-major.

use std::path::Path;

use crate::data::{sample_id, Dataset, Sample, Split, TaskId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::IdxTruncated {
            path: path.display().to_string(),
            needed: at + 4,
            have: bytes.len(),
        })
}

pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    task: TaskId,
    split: Split,
) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;

    let magic = be_u32(&images, 0, images_path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            path: images_path.display().to_string(),
            found: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let magic = be_u32(&labels, 0, labels_path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::IdxMagic {
            path: labels_path.display().to_string(),
            found: magic,
            expected: LABELS_MAGIC,
        });
    }

    let n_images = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let n_labels = be_u32(&labels, 4, labels_path)? as usize;
    if n_images != n_labels {
        return Err(Error::IdxCountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let pixel_count = n_images * rows * cols;
    if images.len() < 16 + pixel_count {
        return Err(Error::IdxTruncated {
            path: images_path.display().to_string(),
            needed: 16 + pixel_count,
            have: images.len(),
        });
    }
    if labels.len() < 8 + n_labels {
        return Err(Error::IdxTruncated {
            path: labels_path.display().to_string(),
            needed: 8 + n_labels,
            have: labels.len(),
        });
    }

    let dim = rows * cols;
    let mut samples = Vec::with_capacity(n_images);
    let mut max_label = 0usize;
    for i in 0..n_images {
        let start = 16 + i * dim;
        let x: Vec<f64> = images[start..start + dim]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        let label = labels[8 + i] as usize;
        max_label = max_label.max(label);
        samples.push(Sample {
            id: sample_id(task, i as u32, 0),
            orig_index: i as u32,
            variant: 0,
            x: Tensor::vector(x),
            label,
        });
    }
    Ok(Dataset {
        task,
        class_count: max_label + 1,
        input_dim: dim,
        split,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_images(path: &Path, n: u32, rows: u32, cols: u32, pixels: &[u8]) {
        let mut b = Vec::new();
        b.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&n.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        b.extend_from_slice(pixels);
        std::fs::write(path, b).unwrap();
    }

    fn write_labels(path: &Path, labels: &[u8]) {
        let mut b = Vec::new();
        b.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        std::fs::write(path, b).unwrap();
    }

    #[test]
    fn two_image_fixture_scales_pixel_endpoints() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_images(&img, 2, 2, 2, &[0, 255, 255, 0, 255, 255, 0, 0]);
        write_labels(&lab, &[1, 0]);
        let ds = load_idx(&img, &lab, TaskId(0), Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input_dim, 4);
        assert_eq!(ds.samples[0].x.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(ds.samples[1].x.data(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(ds.samples[0].label, 1);
        assert_eq!(ds.class_count, 2);
    }

    #[test]
    fn count_mismatch_is_distinct_error() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_images(&img, 2, 1, 1, &[10, 20]);
        write_labels(&lab, &[1, 0, 1]);
        assert!(matches!(
            load_idx(&img, &lab, TaskId(0), Split::Train).unwrap_err(),
            Error::IdxCountMismatch { images: 2, labels: 3 }
        ));
    }

    #[test]
    fn magic_mismatch_is_distinct_error() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, 0x0000_0804u32.to_be_bytes()).unwrap();
        write_labels(&lab, &[0]);
        assert!(matches!(
            load_idx(&img, &lab, TaskId(0), Split::Train).unwrap_err(),
            Error::IdxMagic { .. }
        ));
    }

    #[test]
    fn big_endian_dimension_field() {
        // dimension bytes 0x00 0x00 0x00 0x1C parse as 28
        let bytes = [0u8, 0, 0, 0x1C];
        assert_eq!(u32::from_be_bytes(bytes), 28);
        let dir = tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_images(&img, 1, 1, 28, &[7u8; 28]);
        write_labels(&lab, &[3]);
        let ds = load_idx(&img, &lab, TaskId(1), Split::Test).unwrap();
        assert_eq!(ds.input_dim, 28);
    }

    #[test]
    fn truncated_payload_is_distinct_error() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_images(&img, 4, 2, 2, &[1u8; 10]); // needs 16 pixels
        write_labels(&lab, &[0, 1, 0, 1]);
        assert!(matches!(
            load_idx(&img, &lab, TaskId(0), Split::Train).unwrap_err(),
            Error::IdxTruncated { .. }
        ));
    }
}
