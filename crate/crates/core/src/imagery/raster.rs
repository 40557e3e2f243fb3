//! Raster file I/O. The native binary formats are 16-bit little-endian grids
//! with an 8-byte `(width u32, height u32)` header:
//!
//! * `.sar16` — one `i16` per pixel holding backscatter in centi-dB
//!   (`value = dB * 100`), row-major.
//! * `.rgb16` — three `u16` reflectance counts per pixel (R, G, B
//!   interleaved), row-major.
//!
//! RGB rasters may alternatively be lossless PNG (8- or 16-bit samples are
//! read as counts verbatim); SAR must use the signed binary format. The
//! loaders dispatch on the file extension.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

fn read_header(r: &mut Cursor<Vec<u8>>, path: &Path) -> Result<(usize, usize)> {
    let w = r
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::io(path, e))?;
    let h = r
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::io(path, e))?;
    Ok((w as usize, h as usize))
}

pub fn save_sar_raster(path: &Path, sar: &Array2<f64>) -> Result<()> {
    let (h, w) = sar.dim();
    let mut buf = Vec::with_capacity(8 + 2 * h * w);
    buf.write_u32::<LittleEndian>(w as u32).unwrap();
    buf.write_u32::<LittleEndian>(h as u32).unwrap();
    for &v in sar.iter() {
        let cdb = (v * 100.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        buf.write_i16::<LittleEndian>(cdb).unwrap();
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn save_rgb_raster(path: &Path, rgb: &Array3<f64>) -> Result<()> {
    let (c, h, w) = rgb.dim();
    if c != 3 {
        return Err(Error::Shape(format!("rgb raster needs 3 channels, got {c}")));
    }
    let mut buf = Vec::with_capacity(8 + 6 * h * w);
    buf.write_u32::<LittleEndian>(w as u32).unwrap();
    buf.write_u32::<LittleEndian>(h as u32).unwrap();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = rgb[[ch, y, x]].round().clamp(0.0, u16::MAX as f64) as u16;
                buf.write_u16::<LittleEndian>(v).unwrap();
            }
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Save RGB counts as a 16-bit PNG (counts are stored verbatim).
pub fn save_rgb_png(path: &Path, rgb: &Array3<f64>) -> Result<()> {
    let (c, h, w) = rgb.dim();
    if c != 3 {
        return Err(Error::Shape(format!("rgb png needs 3 channels, got {c}")));
    }
    let mut img = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                rgb[[0, y, x]].round().clamp(0.0, 65535.0) as u16,
                rgb[[1, y, x]].round().clamp(0.0, 65535.0) as u16,
                rgb[[2, y, x]].round().clamp(0.0, 65535.0) as u16,
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

pub fn load_sar_raster(path: &Path) -> Result<Array2<f64>> {
    match extension(path).as_str() {
        "sar16" => {}
        other => {
            return Err(Error::Config(format!(
                "unsupported SAR raster extension `.{other}` for {} (expected .sar16)",
                path.display()
            )))
        }
    }
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor::new(data);
    let (w, h) = read_header(&mut r, path)?;
    let mut out = Array2::<f64>::zeros((h, w));
    for v in out.iter_mut() {
        *v = r
            .read_i16::<LittleEndian>()
            .map_err(|e| Error::io(path, e))? as f64
            / 100.0;
    }
    expect_eof(&mut r, path)?;
    Ok(out)
}

pub fn load_rgb_raster(path: &Path) -> Result<Array3<f64>> {
    match extension(path).as_str() {
        "rgb16" => load_rgb_binary(path),
        "png" => load_rgb_png(path),
        other => Err(Error::Config(format!(
            "unsupported RGB raster extension `.{other}` for {} (expected .rgb16 or .png)",
            path.display()
        ))),
    }
}

fn load_rgb_binary(path: &Path) -> Result<Array3<f64>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor::new(data);
    let (w, h) = read_header(&mut r, path)?;
    let mut out = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[c, y, x]] = r
                    .read_u16::<LittleEndian>()
                    .map_err(|e| Error::io(path, e))? as f64;
            }
        }
    }
    expect_eof(&mut r, path)?;
    Ok(out)
}

fn load_rgb_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let rgb = img.into_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Array3::<f64>::zeros((3, h, w));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64;
        }
    }
    Ok(out)
}

fn expect_eof(r: &mut Cursor<Vec<u8>>, path: &Path) -> Result<()> {
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{} trailing bytes after raster payload", rest.len()),
            ),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sar_roundtrip_centidecibel_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.sar16");
        let sar = Array2::from_shape_fn((5, 7), |(y, x)| -25.0 + 0.173 * (y * 7 + x) as f64);
        save_sar_raster(&path, &sar).unwrap();
        let back = load_sar_raster(&path).unwrap();
        assert_eq!(back.dim(), sar.dim());
        for (a, b) in sar.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.005 + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rgb_binary_roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.rgb16");
        let rgb = Array3::from_shape_fn((3, 4, 6), |(c, y, x)| (c * 991 + y * 131 + x * 17) as f64);
        save_rgb_raster(&path, &rgb).unwrap();
        let back = load_rgb_raster(&path).unwrap();
        assert_eq!(back, rgb);
    }

    #[test]
    fn rgb_png_roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.png");
        let rgb = Array3::from_shape_fn((3, 4, 6), |(c, y, x)| (c * 2000 + y * 300 + x * 40) as f64);
        save_rgb_png(&path, &rgb).unwrap();
        let back = load_rgb_raster(&path).unwrap();
        assert_eq!(back, rgb);
    }

    #[test]
    fn sar_loader_rejects_png_extension() {
        let err = load_sar_raster(Path::new("x.png")).unwrap_err();
        assert!(err.to_string().contains("unsupported SAR raster extension"));
    }

    #[test]
    fn truncated_raster_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rgb16");
        let mut buf = Vec::new();
        buf.write_u32::<LittleEndian>(4).unwrap();
        buf.write_u32::<LittleEndian>(4).unwrap();
        buf.write_u16::<LittleEndian>(1).unwrap();
        std::fs::write(&path, buf).unwrap();
        assert!(load_rgb_raster(&path).is_err());
    }
}
