use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use ndarray::Array2;

use crate::{Error, Result};

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a grayscale image as intensities in `[0, 1]`, shape `(H, W)`.
pub fn read_image(path: &Path) -> Result<Array2<f32>> {
    let img = open(path)?.to_luma32f();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("dimensions match"))
}

/// Reads raw 8-bit label values. 16-bit masks are accepted when every value fits.
pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let (w, h, data) = match open(path)? {
        DynamicImage::ImageLuma8(b) => {
            let (w, h) = b.dimensions();
            (w, h, b.into_raw())
        }
        DynamicImage::ImageLuma16(b) => {
            let (w, h) = b.dimensions();
            let raw = b.into_raw();
            if raw.iter().any(|&v| v > u8::MAX as u16) {
                return Err(Error::InvalidInput(format!(
                    "{}: mask labels exceed 255",
                    path.display()
                )));
            }
            (w, h, raw.into_iter().map(|v| v as u8).collect())
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "{}: mask must be single-channel, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(Array2::from_shape_vec((h as usize, w as usize), data).expect("dimensions match"))
}

fn save(buf: GrayImage, path: &Path) -> Result<()> {
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes intensities in `[0, 1]` as 8-bit grayscale (PNG or PGM by extension).
pub fn write_gray_u8(img: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = img.dim();
    let data: Vec<u8> = img
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, data)
        .expect("buffer size matches");
    save(buf, path)
}

pub fn write_mask(mask: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let data = mask.iter().copied().collect();
    let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, data)
        .expect("buffer size matches");
    save(buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f32 / 14.0);
        let mask = Array2::from_shape_fn((3, 5), |(i, j)| ((i + j) % 3) as u8);
        for ext in ["png", "pgm"] {
            let p = dir.path().join(format!("img.{ext}"));
            write_gray_u8(&img, &p).unwrap();
            let back = read_image(&p).unwrap();
            assert_eq!(back.dim(), (3, 5));
            for (a, b) in back.iter().zip(img.iter()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
            let m = dir.path().join(format!("mask.{ext}"));
            write_mask(&mask, &m).unwrap();
            assert_eq!(read_mask(&m).unwrap(), mask);
        }
    }
}
