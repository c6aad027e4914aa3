//! Binary PPM (P6) export for pixel observations and reconstructions.

use crate::autodiff::Tensor;
use crate::error::{IcfError, Result};
use std::io::Write;
use std::path::Path;

/// Serialize a [3, H, W] tensor with values clamped to [0,1] as P6 bytes.
pub fn encode(img: &Tensor) -> Result<Vec<u8>> {
    if img.rank() != 3 || img.shape()[0] != 3 {
        return Err(IcfError::Dimension(format!(
            "PPM export expects [3, H, W], got {:?}",
            img.shape()
        )));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = Vec::with_capacity(3 * h * w + 32);
    write!(out, "P6\n{} {}\n255\n", w, h)?;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img.data()[(c * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write(path: &Path, img: &Tensor) -> Result<()> {
    write_atomic(path, &encode(img)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_size() {
        let img = Tensor::zeros(&[3, 2, 4]);
        let bytes = encode(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n4 2\n255\n"));
        assert_eq!(bytes.len(), "P6\n4 2\n255\n".len() + 3 * 8);
    }

    #[test]
    fn clamps_out_of_range() {
        let mut img = Tensor::zeros(&[3, 1, 1]);
        img.data_mut()[0] = 2.0;
        img.data_mut()[1] = -1.0;
        let bytes = encode(&img).unwrap();
        let px = &bytes[bytes.len() - 3..];
        assert_eq!(px, &[255, 0, 0]);
    }
}
