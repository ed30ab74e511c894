//! IDX-format image and label files (the MNIST family): big-endian magic,
//! dimension sizes, raw unsigned bytes. Files may be gzip-compressed; the
//! stream is sniffed and decompressed transparently.

use crate::data::Dataset;
use crate::error::{Result, SnnError};
use crate::tensor::{Scalar, Tensor};
use flate2::read::GzDecoder;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path)
        .map_err(|e| SnnError::io(format!("opening {}", path.display()), e))?;
    let mut reader = BufReader::new(file);
    let mut head = [0u8; 2];
    let n = reader
        .read(&mut head)
        .map_err(|e| SnnError::io(format!("reading {}", path.display()), e))?;
    let rest = std::io::Cursor::new(head[..n].to_vec()).chain(reader);
    if n == 2 && head == [0x1f, 0x8b] {
        Ok(Box::new(GzDecoder::new(rest)))
    } else {
        Ok(Box::new(rest))
    }
}

fn read_u32_be(r: &mut dyn Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| SnnError::Format {
        path: path.display().to_string(),
        reason: format!("truncated while reading {what}"),
    })?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image file into a `[n, 1, rows, cols]` tensor scaled to
/// [0, 1].
pub fn load_idx_images<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut r = open_maybe_gz(path)?;
    let magic = read_u32_be(&mut r, path, "magic")?;
    if magic != IMAGE_MAGIC {
        return Err(SnnError::Format {
            path: path.display().to_string(),
            reason: format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let n = read_u32_be(&mut r, path, "count")? as usize;
    let rows = read_u32_be(&mut r, path, "rows")? as usize;
    let cols = read_u32_be(&mut r, path, "cols")? as usize;
    let expected = n * rows * cols;
    let mut bytes = vec![0u8; expected];
    r.read_exact(&mut bytes).map_err(|_| SnnError::Format {
        path: path.display().to_string(),
        reason: format!("truncated image payload: expected {expected} bytes"),
    })?;
    let data = bytes
        .iter()
        .map(|&b| T::from_f64(b as f64 / 255.0))
        .collect();
    Tensor::from_vec(&[n, 1, rows, cols], data)
}

/// Load an IDX label file; labels must lie in [0, 10).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = open_maybe_gz(path)?;
    let magic = read_u32_be(&mut r, path, "magic")?;
    if magic != LABEL_MAGIC {
        return Err(SnnError::Format {
            path: path.display().to_string(),
            reason: format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let n = read_u32_be(&mut r, path, "count")? as usize;
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes).map_err(|_| SnnError::Format {
        path: path.display().to_string(),
        reason: format!("truncated label payload: expected {n} bytes"),
    })?;
    for (i, &b) in bytes.iter().enumerate() {
        if b > 9 {
            return Err(SnnError::Format {
                path: path.display().to_string(),
                reason: format!("label {b} at index {i} outside [0, 9]"),
            });
        }
    }
    Ok(bytes.into_iter().map(|b| b as usize).collect())
}

/// Load the four standard MNIST-layout files from a directory (plain or
/// `.gz`): returns (train, test).
pub fn load_mnist_dir<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    let find = |stem: &str| -> Result<std::path::PathBuf> {
        for suffix in ["", ".gz"] {
            let p = dir.join(format!("{stem}{suffix}"));
            if p.exists() {
                return Ok(p);
            }
        }
        Err(SnnError::Format {
            path: dir.display().to_string(),
            reason: format!("missing {stem}[.gz]"),
        })
    };
    let train_images = load_idx_images(&find("train-images-idx3-ubyte")?)?;
    let train_labels = load_idx_labels(&find("train-labels-idx1-ubyte")?)?;
    let test_images = load_idx_images(&find("t10k-images-idx3-ubyte")?)?;
    let test_labels = load_idx_labels(&find("t10k-labels-idx1-ubyte")?)?;
    Ok((
        Dataset::new(train_images, train_labels, 10)?,
        Dataset::new(test_images, test_labels, 10)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_images(path: &Path, n: usize, rows: usize, cols: usize, pixels: &[u8]) {
        let mut f = File::create(path).unwrap();
        f.write_all(&IMAGE_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&(rows as u32).to_be_bytes()).unwrap();
        f.write_all(&(cols as u32).to_be_bytes()).unwrap();
        f.write_all(pixels).unwrap();
    }

    #[test]
    fn parses_small_image_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs");
        write_idx_images(&path, 2, 2, 2, &[0, 128, 255, 64, 1, 2, 3, 4]);
        let t = load_idx_images::<f32>(&path).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 2]);
        assert_eq!(t.data()[0], 0.0);
        assert!((t.data()[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn truncated_image_file_names_expected_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs");
        write_idx_images(&path, 2, 2, 2, &[0, 1, 2]); // 8 expected, 3 given
        let err = load_idx_images::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("expected 8 bytes"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs");
        let mut f = File::create(&path).unwrap();
        f.write_all(&0xDEADBEEFu32.to_be_bytes()).unwrap();
        f.write_all(&[0u8; 12]).unwrap();
        drop(f);
        assert!(load_idx_images::<f32>(&path).is_err());
    }

    #[test]
    fn labels_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels");
        let mut f = File::create(&path).unwrap();
        f.write_all(&LABEL_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&3u32.to_be_bytes()).unwrap();
        f.write_all(&[1, 9, 11]).unwrap();
        drop(f);
        let err = load_idx_labels(&path).unwrap_err();
        assert!(err.to_string().contains("label 11"), "{err}");
    }

    #[test]
    fn gzip_files_load_transparently() {
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("imgs");
        write_idx_images(&plain, 1, 2, 2, &[10, 20, 30, 40]);
        let gz = dir.path().join("imgs.gz");
        let bytes = std::fs::read(&plain).unwrap();
        let mut enc =
            flate2::write::GzEncoder::new(File::create(&gz).unwrap(), flate2::Compression::fast());
        enc.write_all(&bytes).unwrap();
        enc.finish().unwrap();
        let a = load_idx_images::<f32>(&plain).unwrap();
        let b = load_idx_images::<f32>(&gz).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
