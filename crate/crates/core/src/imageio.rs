//! Grayscale PNG and raw `.f32` grid IO shared by the dataset exporters,
//! loaders and the explain/report commands.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Writes a storage-range grid as a 16-bit grayscale PNG.
pub fn save_png16(path: &Path, grid: &Array2<f32>) -> Result<()> {
    let (h, w) = (grid.nrows() as u32, grid.ncols() as u32);
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w, h, |x, y| {
        let v = grid[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    buf.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// Writes a storage-range grid as an 8-bit grayscale PNG (panels, masks).
pub fn save_png8(path: &Path, grid: &Array2<f32>) -> Result<()> {
    let (h, w) = (grid.nrows() as u32, grid.ncols() as u32);
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w, h, |x, y| {
        let v = grid[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    });
    buf.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// Loads any PNG as a storage-range grayscale grid. Multi-channel inputs are
/// converted to luminance; 8- and 16-bit depths are both accepted.
pub fn load_png_gray(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Ingest(format!("cannot decode {}: {e}", path.display())))?;
    let grid = match img {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                buf.get_pixel(x as u32, y as u32)[0] as f32 / 65535.0
            })
        }
        other => {
            let buf = other.to_luma16();
            let (w, h) = buf.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                buf.get_pixel(x as u32, y as u32)[0] as f32 / 65535.0
            })
        }
    };
    if grid.is_empty() {
        return Err(Error::Ingest(format!("{} decodes to an empty image", path.display())));
    }
    Ok(grid)
}

/// Writes a grid as row-major little-endian f32, no header.
pub fn save_f32(path: &Path, grid: &Array2<f32>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    let mut bytes = Vec::with_capacity(grid.len() * 4);
    for &v in grid.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a raw row-major little-endian f32 grid of known shape.
pub fn load_f32(path: &Path, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Ingest(format!(
            "{}: expected {} bytes for a {rows}x{cols} f32 grid, found {}",
            path.display(),
            rows * cols * 4,
            bytes.len()
        )));
    }
    let mut grid = Array2::<f32>::zeros((rows, cols));
    for (i, v) in grid.iter_mut().enumerate() {
        *v = f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
    }
    Ok(grid)
}
