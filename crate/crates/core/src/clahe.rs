//! Contrast-limited adaptive histogram equalization on [-1, 1] rasters.
//!
//! Per-tile histograms are clipped at `clip_limit` times the uniform bin
//! count, the excess is redistributed evenly, and each pixel is remapped by
//! bilinear interpolation between the four nearest tile mappings.

use crate::tensor::Tensor;

const BINS: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum ClaheError {
    #[error("clip_limit must be positive, got {0}")]
    NonPositiveClipLimit(f64),
    #[error("tile grid must be nonzero, got {0}x{1}")]
    EmptyTileGrid(usize, usize),
}

fn to_bin(v: f64) -> usize {
    (((v + 1.0) * 0.5 * (BINS - 1) as f64).round() as isize).clamp(0, BINS as isize - 1) as usize
}

fn from_level(m: f64) -> f64 {
    (m / (BINS - 1) as f64) * 2.0 - 1.0
}

/// Clipped-histogram equalization mapping for one tile region, bin -> level.
fn tile_mapping(image: &Tensor, y0: usize, y1: usize, x0: usize, x1: usize, clip_limit: f64) -> Vec<f64> {
    let mut hist = [0.0f64; BINS];
    for y in y0..y1 {
        for x in x0..x1 {
            hist[to_bin(image.at2(y, x))] += 1.0;
        }
    }
    let total = ((y1 - y0) * (x1 - x0)) as f64;
    let limit = (clip_limit * total / BINS as f64).max(1.0);
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let bonus = excess / BINS as f64;
    for h in hist.iter_mut() {
        *h += bonus;
    }
    // Midpoint CDF keeps a flat histogram close to the identity mapping.
    let mut mapping = vec![0.0; BINS];
    let mut cdf = 0.0;
    for b in 0..BINS {
        let mid = cdf + hist[b] * 0.5;
        cdf += hist[b];
        mapping[b] = (BINS - 1) as f64 * mid / total;
    }
    mapping
}

pub fn clahe(
    image: &Tensor,
    clip_limit: f64,
    tile_grid: (usize, usize),
) -> Result<Tensor, ClaheError> {
    if clip_limit <= 0.0 {
        return Err(ClaheError::NonPositiveClipLimit(clip_limit));
    }
    let (ty, tx) = tile_grid;
    if ty == 0 || tx == 0 {
        return Err(ClaheError::EmptyTileGrid(ty, tx));
    }
    assert_eq!(image.shape().len(), 2, "clahe expects a 2-D raster");
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let ty = ty.min(h);
    let tx = tx.min(w);

    // Proportional tile bounds keep every tile nonempty for any grid size.
    let bounds = |t: usize, n: usize, len: usize| (t * len / n, (t + 1) * len / n);
    let center = |t: usize, n: usize, len: usize| {
        let (a, b) = bounds(t, n, len);
        (a + b) as f64 / 2.0 - 0.5
    };
    let cy: Vec<f64> = (0..ty).map(|i| center(i, ty, h)).collect();
    let cx: Vec<f64> = (0..tx).map(|j| center(j, tx, w)).collect();
    let mut mappings = Vec::with_capacity(ty * tx);
    for i in 0..ty {
        let (y0, y1) = bounds(i, ty, h);
        for j in 0..tx {
            let (x0, x1) = bounds(j, tx, w);
            mappings.push(tile_mapping(image, y0, y1, x0, x1, clip_limit));
        }
    }

    let locate = |centers: &[f64], pos: f64| -> (usize, usize, f64) {
        if pos <= centers[0] {
            return (0, 0, 0.0);
        }
        if pos >= centers[centers.len() - 1] {
            let last = centers.len() - 1;
            return (last, last, 0.0);
        }
        let mut i = 0;
        while centers[i + 1] < pos {
            i += 1;
        }
        let f = (pos - centers[i]) / (centers[i + 1] - centers[i]);
        (i, i + 1, f)
    };

    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        let (i0, i1, fy) = locate(&cy, y as f64);
        for x in 0..w {
            let (j0, j1, fx) = locate(&cx, x as f64);
            let b = to_bin(image.at2(y, x));
            let m00 = mappings[i0 * tx + j0][b];
            let m01 = mappings[i0 * tx + j1][b];
            let m10 = mappings[i1 * tx + j0][b];
            let m11 = mappings[i1 * tx + j1][b];
            let m = m00 * (1.0 - fy) * (1.0 - fx)
                + m01 * (1.0 - fy) * fx
                + m10 * fy * (1.0 - fx)
                + m11 * fy * fx;
            out.set2(y, x, from_level(m).clamp(-1.0, 1.0));
        }
    }
    Ok(out)
}
