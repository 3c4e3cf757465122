//! Binary PGM (P5) and PPM (P6) writers with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{ensure, Result};
use crate::tensor::{Float, Tensor};

/// `round(v · 255)` with halves rounded up.
pub fn to_byte(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor() as u8
}

fn bytes_of<T: Float>(data: &[T]) -> Result<Vec<u8>> {
    data.iter()
        .map(|&v| {
            let v = v.as_f64();
            ensure!((0.0..=1.0).contains(&v), "pixel value {v} outside [0, 1]");
            Ok(to_byte(v))
        })
        .collect()
}

pub fn encode_pgm<T: Float>(image: &Tensor<T>) -> Result<Vec<u8>> {
    ensure!(image.ndim() == 2, "write_pgm: expected [H, W], got {:?}", image.shape());
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(bytes_of(image.data())?);
    Ok(out)
}

/// Planar `[3, H, W]` input, interleaved RGB output.
pub fn encode_ppm<T: Float>(image: &Tensor<T>) -> Result<Vec<u8>> {
    ensure!(
        image.ndim() == 3 && image.shape()[0] == 3,
        "write_ppm: expected [3, H, W], got {:?}",
        image.shape()
    );
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let planar = bytes_of(image.data())?;
    let hw = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * hw);
    for i in 0..hw {
        out.extend([planar[i], planar[hw + i], planar[2 * hw + i]]);
    }
    Ok(out)
}

pub fn write_pgm<T: Float>(path: impl AsRef<Path>, image: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_pgm(image)?)?;
    Ok(())
}

pub fn write_ppm<T: Float>(path: impl AsRef<Path>, image: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}
