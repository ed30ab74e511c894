//! CIFAR-10 binary batches: records of one label byte followed by 3072
//! pixel bytes (3 channels x 32 x 32, channel-major).

use crate::data::Dataset;
use crate::error::{Result, SnnError};
use crate::tensor::{Scalar, Tensor};
use std::path::Path;

const RECORD: usize = 1 + 3 * 32 * 32;

/// Load one CIFAR-10 binary batch file into `[n, 3, 32, 32]` images in
/// [0, 1] plus labels.
pub fn load_cifar_binary<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    let bytes = std::fs::read(path)
        .map_err(|e| SnnError::io(format!("reading {}", path.display()), e))?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(SnnError::Format {
            path: path.display().to_string(),
            reason: format!(
                "file length {} is not a positive multiple of the {RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (RECORD - 1));
    for rec in bytes.chunks_exact(RECORD) {
        let label = rec[0];
        if label > 9 {
            return Err(SnnError::Format {
                path: path.display().to_string(),
                reason: format!("label {label} outside [0, 9]"),
            });
        }
        labels.push(label as usize);
        data.extend(rec[1..].iter().map(|&b| T::from_f64(b as f64 / 255.0)));
    }
    let images = Tensor::from_vec(&[n, 3, 32, 32], data)?;
    Dataset::new(images, labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn single_zero_record_is_a_black_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        std::fs::File::create(&path)
            .unwrap()
            .write_all(&vec![0u8; RECORD])
            .unwrap();
        let ds = load_cifar_binary::<f32>(&path).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels[0], 0);
        assert!(ds.images.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn record_count_follows_length_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut payload = Vec::new();
        for label in [3u8, 7u8] {
            payload.push(label);
            payload.extend(std::iter::repeat(128u8).take(RECORD - 1));
        }
        std::fs::File::create(&path).unwrap().write_all(&payload).unwrap();
        let ds = load_cifar_binary::<f32>(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 7]);
    }

    #[test]
    fn off_by_one_length_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        std::fs::File::create(&path)
            .unwrap()
            .write_all(&vec![0u8; RECORD + 1])
            .unwrap();
        assert!(matches!(
            load_cifar_binary::<f32>(&path),
            Err(SnnError::Format { .. })
        ));
    }
}
