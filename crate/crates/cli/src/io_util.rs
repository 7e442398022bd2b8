//! Raster I/O between the `[-1, 1]` tensor convention and 8-bit grayscale
//! files, plus checksum helpers for run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use nanosyn_core::tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Quantize an image tensor in `[-1, 1]` to 8-bit grayscale.
pub fn image_to_gray(t: &Tensor) -> GrayImage {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (t.at2(y, x).clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0;
            out.put_pixel(x as u32, y as u32, Luma([v.round_ties_even() as u8]));
        }
    }
    out
}

/// Quantize a binary mask tensor ({0, 1}) to an 8-bit image with values
/// 0 and 255 only.
pub fn mask_to_gray(t: &Tensor) -> GrayImage {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if t.at2(y, x) >= 0.5 { 255u8 } else { 0u8 };
            out.put_pixel(x as u32, y as u32, Luma([v]));
        }
    }
    out
}

pub fn write_image(path: &Path, t: &Tensor) -> Result<(), CliError> {
    image_to_gray(t)
        .save(path)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

pub fn write_mask(path: &Path, t: &Tensor) -> Result<(), CliError> {
    mask_to_gray(t)
        .save(path)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

/// Read a grayscale raster as an image tensor in `[-1, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::Validation(format!("reading {}: {e}", path.display())))?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let v = img.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0;
            t.set2(y, x, v * 2.0 - 1.0);
        }
    }
    Ok(t)
}

/// Read a grayscale raster as a binary mask tensor ({0, 1}), thresholding
/// at mid-gray.
pub fn read_mask(path: &Path) -> Result<Tensor, CliError> {
    let img = read_image(path)?;
    let mut t = Tensor::zeros(img.shape());
    for (i, v) in img.data().iter().enumerate() {
        t.data_mut()[i] = if *v >= 0.0 { 1.0 } else { 0.0 };
    }
    Ok(t)
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Runtime(format!("hashing {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Sorted list of raster files (png/tif/tiff) directly inside `dir`.
pub fn list_rasters(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Validation(format!("reading {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("tif") | Some("tiff")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Validation(format!(
            "no raster files (.png/.tif/.tiff) in {}",
            dir.display()
        )));
    }
    Ok(paths)
}
