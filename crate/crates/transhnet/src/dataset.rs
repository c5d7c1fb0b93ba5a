//! `images/` + `masks/` directory loading and batching.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use transhnet_core::trainer::Batch;
use transhnet_core::Tensor;

use crate::error::{Error, Result};
use crate::raster::{read_raster, Raster, SUPPORTED_EXTENSIONS};

/// Mask pixels at or above this 8-bit value are foreground.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    /// `3×H×W` in [0, 1]
    pub image: Tensor,
    /// `1×H×W` in {0, 1}
    pub mask: Tensor,
}

/// Raster files of `dir` keyed by file stem, ignoring other extensions.
fn rasters_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| SUPPORTED_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Loads every image of `dir/images` with its same-stem mask from
/// `dir/masks`, resized to `image_size`, in lexicographic id order.
/// A directory without an `images/` subdirectory yields no samples.
pub fn load_dataset(dir: &Path, image_size: usize) -> Result<Vec<SegmentationSample>> {
    let image_dir = dir.join("images");
    let mask_dir = dir.join("masks");
    if !image_dir.is_dir() {
        return Ok(Vec::new());
    }
    let images = rasters_by_stem(&image_dir)?;
    let masks = if mask_dir.is_dir() { rasters_by_stem(&mask_dir)? } else { BTreeMap::new() };
    images
        .into_iter()
        .map(|(id, image_path)| {
            let mask_path = masks.get(&id).ok_or_else(|| Error::MissingMask { id: id.clone(), dir: mask_dir.clone() })?;
            let image = read_raster(&image_path)?;
            let mask = read_raster(mask_path)?;
            Ok(SegmentationSample {
                image: image_tensor(&image, image_size),
                mask: mask_tensor(&mask, image_size),
                id,
            })
        })
        .collect()
}

/// Images of `dir/images` (or of `dir` itself when it has no `images/`),
/// resized to `image_size`, as `(id, 3×size×size)` in lexicographic id order.
pub fn load_images(dir: &Path, image_size: usize) -> Result<Vec<(String, Tensor)>> {
    let image_dir = dir.join("images");
    let image_dir = if image_dir.is_dir() { image_dir } else { dir.to_path_buf() };
    rasters_by_stem(&image_dir)?
        .into_iter()
        .map(|(id, path)| Ok((id, image_tensor(&read_raster(&path)?, image_size))))
        .collect()
}

/// `3×size×size` bilinear resample (half-pixel centres, clamped edges) scaled to [0, 1].
pub fn image_tensor(r: &Raster, size: usize) -> Tensor {
    let taps_x = bilinear_taps(r.width, size);
    let taps_y = bilinear_taps(r.height, size);
    Tensor::from_fn(&[3, size, size], |i| {
        let (c, y, x) = (i / (size * size), i / size % size, i % size);
        let ((y0, y1, fy), (x0, x1, fx)) = (taps_y[y], taps_x[x]);
        let px = |yy, xx| r.at(xx, yy, c) as f64;
        let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
        let bottom = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
        (top * (1.0 - fy) + bottom * fy) / 255.0
    })
}

/// `1×size×size` binary mask: threshold on the source grid, then nearest resample.
/// Colour masks use their first channel.
pub fn mask_tensor(r: &Raster, size: usize) -> Tensor {
    Tensor::from_fn(&[1, size, size], |i| {
        let (y, x) = (i / size, i % size);
        let sy = nearest(y, r.height, size);
        let sx = nearest(x, r.width, size);
        if r.at(sx, sy, 0) >= MASK_THRESHOLD { 1.0 } else { 0.0 }
    })
}

fn nearest(dst: usize, src_len: usize, dst_len: usize) -> usize {
    ((2 * dst + 1) * src_len / (2 * dst_len)).min(src_len - 1)
}

fn bilinear_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let lo = s.floor() as usize;
            (lo, (lo + 1).min(src_len - 1), s - lo as f64)
        })
        .collect()
}

/// Consecutive batches of at most `batch_size` samples, in order.
pub fn batches(samples: &[SegmentationSample], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    samples
        .chunks(batch_size)
        .map(|chunk| {
            let lift = |t: &Tensor| {
                let mut shape = vec![1];
                shape.extend_from_slice(t.shape());
                t.reshape(&shape)
            };
            let images = chunk.iter().map(|s| lift(&s.image)).collect::<transhnet_core::Result<Vec<_>>>()?;
            let masks = chunk.iter().map(|s| lift(&s.mask)).collect::<transhnet_core::Result<Vec<_>>>()?;
            Ok(Batch::new(Tensor::stack_batch(&images)?, Tensor::stack_batch(&masks)?))
        })
        .collect()
}
