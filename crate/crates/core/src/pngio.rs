//! 16-bit PNG encodings for coordinate, error, depth and mask images.
//!
//! Coordinates and errors are stored as `round(v * 65535)`; depth as
//! `round(d * 10)` (0.1 mm units, saturating at 6553.5 mm).

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::grid::{CoordImage, DepthMap, ErrorImage, Mask, RgbImage};

/// Depth PNG unit in mm.
pub const DEPTH_UNIT_MM: f64 = 0.1;

#[inline]
pub fn quantize_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

#[inline]
pub fn dequantize_u16(v: u16) -> f64 {
    v as f64 / 65535.0
}

fn dims_u32(w: usize, h: usize) -> (u32, u32) {
    (w as u32, h as u32)
}

pub fn write_coord_png(path: impl AsRef<Path>, img: &CoordImage) -> Result<()> {
    let (w, h) = dims_u32(img.width(), img.height());
    let data: Vec<u16> = img
        .as_slice()
        .iter()
        .flat_map(|c| c.map(quantize_u16))
        .collect();
    let buf = ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, data).expect("sized buffer");
    buf.save(path)?;
    Ok(())
}

fn open_png(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::Format(format!("missing file {}", path.display())));
    }
    image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_coord_png(path: impl AsRef<Path>) -> Result<CoordImage> {
    let path = path.as_ref();
    match open_png(path)? {
        DynamicImage::ImageRgb16(buf) => {
            let (w, h) = buf.dimensions();
            let data = buf
                .pixels()
                .map(|p| p.0.map(dequantize_u16))
                .collect();
            CoordImage::from_vec(w as usize, h as usize, data)
        }
        other => Err(Error::Format(format!(
            "{}: expected 16-bit RGB coordinate PNG, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

fn write_gray16(path: &Path, w: usize, h: usize, data: Vec<u16>) -> Result<()> {
    let (w, h) = dims_u32(w, h);
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w, h, data).expect("sized buffer");
    buf.save(path)?;
    Ok(())
}

fn read_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    match open_png(path)? {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Ok((w as usize, h as usize, buf.into_raw()))
        }
        other => Err(Error::Format(format!(
            "{}: expected 16-bit grayscale PNG, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn write_error_png(path: impl AsRef<Path>, img: &ErrorImage) -> Result<()> {
    let data = img.as_slice().iter().map(|&v| quantize_u16(v)).collect();
    write_gray16(path.as_ref(), img.width(), img.height(), data)
}

pub fn read_error_png(path: impl AsRef<Path>) -> Result<ErrorImage> {
    let (w, h, raw) = read_gray16(path.as_ref())?;
    ErrorImage::from_vec(w, h, raw.into_iter().map(dequantize_u16).collect())
}

pub fn write_depth_png(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let data = depth
        .as_slice()
        .iter()
        .map(|&d| (d / DEPTH_UNIT_MM).round().clamp(0.0, 65535.0) as u16)
        .collect();
    write_gray16(path.as_ref(), depth.width(), depth.height(), data)
}

/// Reads a 16-bit depth PNG whose raw values are multiplied by `mm_per_unit`.
pub fn read_depth_png(path: impl AsRef<Path>, mm_per_unit: f64) -> Result<DepthMap> {
    let (w, h, raw) = read_gray16(path.as_ref())?;
    DepthMap::from_vec(w, h, raw.into_iter().map(|v| v as f64 * mm_per_unit).collect())
}

pub fn write_mask_png(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let (w, h) = dims_u32(mask.width(), mask.height());
    let data: Vec<u8> = mask.as_slice().iter().map(|&m| if m { 255u8 } else { 0 }).collect();
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(w, h, data).expect("sized buffer");
    buf.save(path)?;
    Ok(())
}

pub fn read_mask_png(path: impl AsRef<Path>) -> Result<Mask> {
    let img = open_png(path.as_ref())?.to_luma8();
    let (w, h) = img.dimensions();
    Mask::from_vec(
        w as usize,
        h as usize,
        img.into_raw().into_iter().map(|v| v > 127).collect(),
    )
}

pub fn write_rgb_png(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let (w, h) = dims_u32(img.width(), img.height());
    let data: Vec<u8> = img.as_slice().iter().flatten().copied().collect();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, data).expect("sized buffer");
    buf.save(path)?;
    Ok(())
}

/// Reads any PNG as 8-bit RGB.
pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    let img = open_png(path.as_ref())?.to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::from_vec(w as usize, h as usize, img.pixels().map(|p| p.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coord_png_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let img = CoordImage::from_fn(7, 5, |x, y| {
            [x as f64 / 7.0, y as f64 / 5.0, ((x * y) as f64 / 35.0).sqrt()]
        });
        let p = dir.path().join("c.png");
        write_coord_png(&p, &img).unwrap();
        let back = read_coord_png(&p).unwrap();
        assert_eq!(back.dims(), (7, 5));
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 65535.0 + 1e-15);
            }
        }
        // re-encoding a decoded image is lossless
        let p2 = dir.path().join("c2.png");
        write_coord_png(&p2, &back).unwrap();
        assert_eq!(read_coord_png(&p2).unwrap(), back);
    }

    #[test]
    fn depth_png_units() {
        let dir = tempfile::tempdir().unwrap();
        let d = DepthMap::from_vec(2, 1, vec![0.0, 450.04]).unwrap();
        let p = dir.path().join("d.png");
        write_depth_png(&p, &d).unwrap();
        let back = read_depth_png(&p, DEPTH_UNIT_MM).unwrap();
        assert_eq!(back.as_slice()[0], 0.0);
        assert!((back.as_slice()[1] - 450.0).abs() < 1e-9);
    }

    #[test]
    fn wrong_channel_layout_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.png");
        write_error_png(&p, &ErrorImage::new(3, 3)).unwrap();
        assert!(matches!(read_coord_png(&p), Err(Error::Format(_))));
        assert!(matches!(
            read_error_png(dir.path().join("missing.png")),
            Err(Error::Format(_))
        ));
    }
}
