//! Small synthetic dataset for smoke tests: ellipse masks paired with
//! procedurally shaded "particle" renderings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{split_dataset, DatasetSplit, SamplePair};
use crate::generation::{synthesize_masks, MaskSynthesisSpec};
use crate::tensor::Tensor;

/// 3x3 box blur with clamped borders.
fn blur(t: &Tensor) -> Tensor {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    acc += t.at2(yy, xx);
                }
            }
            out.set2(y, x, acc / 9.0);
        }
    }
    out
}

/// Renders a mask as a shaded grayscale image: bright softened particles on
/// a dark, lightly noisy background.
pub fn shade_mask(mask: &Tensor, seed: u64) -> Tensor {
    let mut soft = mask.clone();
    for _ in 0..3 {
        soft = blur(&soft);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Tensor::randn(mask.shape(), &mut rng);
    soft.zip(&noise, |s, n| (-0.7 + 1.3 * s + 0.05 * n).clamp(-1.0, 1.0))
}

/// Builds `n` mask/image pairs of side `size` and splits them with the same
/// seed. Deterministic; needs n >= 3 so every split is nonempty.
pub fn toy_dataset(n: usize, size: usize, seed: u64) -> DatasetSplit {
    let spec = MaskSynthesisSpec {
        canvas: (size, size),
        particle_count_range: (2, 5),
        radius_range: (size as f64 / 12.0, size as f64 / 6.0),
        ellipticity_range: (0.0, 0.4),
        overlap_allowed: true,
        seed,
    };
    let masks = synthesize_masks(&spec, n).expect("toy spec is valid");
    let pairs: Vec<SamplePair> = masks
        .into_iter()
        .enumerate()
        .map(|(i, mask)| SamplePair {
            id: format!("toy{i:03}"),
            image: shade_mask(&mask, seed.wrapping_add(i as u64)),
            mask,
        })
        .collect();
    split_dataset(pairs, seed).expect("toy dataset is large enough to split")
}
