//! Dataset loading, deterministic splitting, and paired augmentation.
//!
//! A dataset directory holds `images/` and `masks/` subdirectories whose
//! files are matched by stem. Images are loaded as grayscale, resized, and
//! normalized to [-1, 1]; masks are binarized to {0, 1}.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clahe::{clahe, ClaheError};
use crate::tensor::{resize_bilinear, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("missing dataset directory {0}")]
    MissingDir(PathBuf),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unpaired files (present in only one of images/ and masks/): {0:?}")]
    Orphans(Vec<String>),
    #[error("could not decode raster {path}: {reason}")]
    UnreadableRaster { path: PathBuf, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("need at least 3 pairs to split into train/val/test, got {0}")]
    TooFewPairs(usize),
    #[error("invalid augmentation policy: {0}")]
    BadPolicy(String),
    #[error(transparent)]
    Clahe(#[from] ClaheError),
    #[error("malformed split manifest line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
    #[error("split manifest references unknown sample id {0:?}")]
    UnknownManifestId(String),
}

/// One image/mask pair. The image lives in [-1, 1]; the mask in {0, 1}.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

impl SamplePair {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.image.shape() != self.mask.shape() || self.image.shape().len() != 2 {
            return Err(DataError::BadPolicy(format!(
                "sample {:?}: image shape {:?} does not match mask shape {:?}",
                self.id,
                self.image.shape(),
                self.mask.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct AugmentationPolicy {
    pub horizontal_flip_prob: f64,
    pub vertical_flip_prob: f64,
    pub crop_size: Option<(usize, usize)>,
    pub clahe_clip_limit: Option<f64>,
    pub clahe_tile_grid: (usize, usize),
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            horizontal_flip_prob: 0.5,
            vertical_flip_prob: 0.5,
            crop_size: None,
            clahe_clip_limit: Some(2.0),
            clahe_tile_grid: (8, 8),
        }
    }
}

impl AugmentationPolicy {
    /// No-op policy, useful for validation passes.
    pub fn disabled() -> Self {
        Self {
            horizontal_flip_prob: 0.0,
            vertical_flip_prob: 0.0,
            crop_size: None,
            clahe_clip_limit: None,
            clahe_tile_grid: (8, 8),
        }
    }

    /// Checks the policy against the dimensions it will be applied to.
    pub fn validate(&self, height: usize, width: usize) -> Result<(), DataError> {
        for (name, p) in [
            ("horizontal_flip_prob", self.horizontal_flip_prob),
            ("vertical_flip_prob", self.vertical_flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::BadPolicy(format!("{name} = {p} not in [0, 1]")));
            }
        }
        if let Some((ch, cw)) = self.crop_size {
            if ch == 0 || cw == 0 || ch > height || cw > width {
                return Err(DataError::BadPolicy(format!(
                    "crop size {ch}x{cw} invalid for {height}x{width} inputs"
                )));
            }
        }
        if let Some(c) = self.clahe_clip_limit {
            if c <= 0.0 {
                return Err(DataError::BadPolicy(format!("clahe clip limit {c} <= 0")));
            }
        }
        if self.clahe_tile_grid.0 == 0 || self.clahe_tile_grid.1 == 0 {
            return Err(DataError::BadPolicy("clahe tile grid has a zero axis".into()));
        }
        Ok(())
    }
}

const RASTER_EXTS: [&str; 3] = ["png", "tif", "tiff"];

fn list_rasters(dir: &Path) -> Result<BTreeMap<String, PathBuf>, DataError> {
    if !dir.is_dir() {
        return Err(DataError::MissingDir(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| DataError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    for entry in entries {
        let entry = entry.map_err(|e| DataError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if let (Some(ext), Some(stem)) = (ext, path.file_stem().and_then(|s| s.to_str())) {
            if RASTER_EXTS.contains(&ext.as_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn load_gray(path: &Path) -> Result<Tensor, DataError> {
    let img = image::open(path).map_err(|e| DataError::UnreadableRaster {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = img.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut t = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            t.set2(y, x, gray.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0);
        }
    }
    Ok(t)
}

/// Loads image/mask pairs from `root/images` and `root/masks`, matched by
/// file stem, resized to `size` (height, width). Unpaired stems are an error.
pub fn load_dataset(root: &Path, size: (usize, usize)) -> Result<Vec<SamplePair>, DataError> {
    let images = list_rasters(&root.join("images"))?;
    let masks = list_rasters(&root.join("masks"))?;

    let mut orphans: Vec<String> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .chain(masks.keys().filter(|k| !images.contains_key(*k)))
        .cloned()
        .collect();
    if !orphans.is_empty() {
        orphans.sort();
        return Err(DataError::Orphans(orphans));
    }
    if images.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    let mut pairs = Vec::with_capacity(images.len());
    for (id, img_path) in &images {
        let raw_img = resize_bilinear(&load_gray(img_path)?, size.0, size.1);
        let raw_mask = resize_bilinear(&load_gray(&masks[id])?, size.0, size.1);
        let image = raw_img.map(|v| v * 2.0 - 1.0);
        let mask = raw_mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        pairs.push(SamplePair {
            id: id.clone(),
            image,
            mask,
        });
    }
    Ok(pairs)
}

/// Shuffles deterministically and splits: test gets max(1, floor(0.2 N)),
/// val gets max(1, floor(0.1 N)), the remainder goes to train.
pub fn split_dataset(mut pairs: Vec<SamplePair>, seed: u64) -> Result<DatasetSplit, DataError> {
    let n = pairs.len();
    if n < 3 {
        return Err(DataError::TooFewPairs(n));
    }
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);

    let n_test = (n / 5).max(1);
    let n_val = (n / 10).max(1);
    let test = pairs.split_off(n - n_test);
    let val = pairs.split_off(pairs.len() - n_val);
    let train = pairs;
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed,
    })
}

fn flip_h(t: &Tensor) -> Tensor {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            out.set2(y, x, t.at2(y, w - 1 - x));
        }
    }
    out
}

fn flip_v(t: &Tensor) -> Tensor {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            out.set2(y, x, t.at2(h - 1 - y, x));
        }
    }
    out
}

fn crop(t: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor {
    let mut out = Tensor::zeros(&[ch, cw]);
    for y in 0..ch {
        for x in 0..cw {
            out.set2(y, x, t.at2(y0 + y, x0 + x));
        }
    }
    out
}

/// Applies the same geometric transforms to image and mask; contrast
/// equalization touches the image only, so the mask stays binary.
pub fn augment(
    pair: &SamplePair,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<SamplePair, DataError> {
    let (h, w) = (pair.image.shape()[0], pair.image.shape()[1]);
    policy.validate(h, w)?;
    let mut image = pair.image.clone();
    let mut mask = pair.mask.clone();

    if rng.gen::<f64>() < policy.horizontal_flip_prob {
        image = flip_h(&image);
        mask = flip_h(&mask);
    }
    if rng.gen::<f64>() < policy.vertical_flip_prob {
        image = flip_v(&image);
        mask = flip_v(&mask);
    }
    if let Some((ch, cw)) = policy.crop_size {
        let y0 = rng.gen_range(0..=h - ch);
        let x0 = rng.gen_range(0..=w - cw);
        image = crop(&image, y0, x0, ch, cw);
        mask = crop(&mask, y0, x0, ch, cw);
    }
    if let Some(clip) = policy.clahe_clip_limit {
        image = clahe(&image, clip, policy.clahe_tile_grid)?;
    }
    Ok(SamplePair {
        id: pair.id.clone(),
        image,
        mask,
    })
}

/// Serializes a split as `id<TAB>split` lines, sorted by id within split.
pub fn write_split_manifest(split: &DatasetSplit) -> String {
    let mut out = String::new();
    for (name, part) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        let mut ids: Vec<&str> = part.iter().map(|p| p.id.as_str()).collect();
        ids.sort();
        for id in ids {
            out.push_str(id);
            out.push('\t');
            out.push_str(name);
            out.push('\n');
        }
    }
    out
}

/// Rebuilds a split from a manifest; every manifest id must exist in `pairs`.
pub fn apply_split_manifest(
    pairs: Vec<SamplePair>,
    manifest: &str,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    let mut by_id: BTreeMap<String, SamplePair> =
        pairs.into_iter().map(|p| (p.id.clone(), p)).collect();
    let mut split = DatasetSplit {
        train: vec![],
        val: vec![],
        test: vec![],
        seed,
    };
    for (i, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, which) = line.split_once('\t').ok_or(DataError::BadManifest {
            line: i + 1,
            reason: "expected id<TAB>split".into(),
        })?;
        let pair = by_id
            .remove(id)
            .ok_or_else(|| DataError::UnknownManifestId(id.to_string()))?;
        match which.trim() {
            "train" => split.train.push(pair),
            "val" => split.val.push(pair),
            "test" => split.test.push(pair),
            other => {
                return Err(DataError::BadManifest {
                    line: i + 1,
                    reason: format!("unknown split name {other:?}"),
                })
            }
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn synthetic_pairs(n: usize) -> Vec<SamplePair> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n)
            .map(|i| {
                let image = Tensor::randn(&[16, 16], &mut rng).map(|v| v.tanh());
                let mask = Tensor::randn(&[16, 16], &mut rng)
                    .map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                SamplePair {
                    id: format!("s{i:03}"),
                    image,
                    mask,
                }
            })
            .collect()
    }

    #[test]
    fn split_sizes_follow_the_floor_rule() {
        let s = split_dataset(synthetic_pairs(10), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        let s = split_dataset(synthetic_pairs(100), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        let s = split_dataset(synthetic_pairs(3), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));
    }

    #[test]
    fn split_is_deterministic_per_seed_and_changes_with_seed() {
        let a = split_dataset(synthetic_pairs(20), 7).unwrap();
        let b = split_dataset(synthetic_pairs(20), 7).unwrap();
        let ids = |s: &DatasetSplit| {
            s.train
                .iter()
                .chain(&s.val)
                .chain(&s.test)
                .map(|p| p.id.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(&a), ids(&b));
        let c = split_dataset(synthetic_pairs(20), 8).unwrap();
        assert_ne!(ids(&a), ids(&c), "different seed should reshuffle");
    }

    #[test]
    fn too_few_pairs_is_an_error() {
        assert!(matches!(
            split_dataset(synthetic_pairs(2), 1),
            Err(DataError::TooFewPairs(2))
        ));
    }

    proptest! {
        #[test]
        fn split_partitions_exactly(n in 3usize..60, seed in 0u64..50) {
            let s = split_dataset(synthetic_pairs(n), seed).unwrap();
            let mut all: Vec<String> = s.train.iter()
                .chain(&s.val)
                .chain(&s.test)
                .map(|p| p.id.clone())
                .collect();
            prop_assert_eq!(all.len(), n);
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n, "splits must be disjoint");
            prop_assert!(!s.train.is_empty());
            prop_assert!(!s.val.is_empty());
            prop_assert!(!s.test.is_empty());
        }
    }

    #[test]
    fn flips_are_involutions_and_stay_paired() {
        let pair = &synthetic_pairs(1)[0];
        assert_eq!(flip_h(&flip_h(&pair.image)).data(), pair.image.data());
        assert_eq!(flip_v(&flip_v(&pair.mask)).data(), pair.mask.data());
    }

    #[test]
    fn augment_preserves_mask_binarity_and_foreground_count_without_crop() {
        let pair = &synthetic_pairs(1)[0];
        let policy = AugmentationPolicy {
            horizontal_flip_prob: 1.0,
            vertical_flip_prob: 1.0,
            crop_size: None,
            clahe_clip_limit: Some(2.0),
            clahe_tile_grid: (4, 4),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = augment(pair, &policy, &mut rng).unwrap();
        assert!(out.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(out.mask.sum(), pair.mask.sum(), "flips preserve foreground");
        assert!(out.image.min() >= -1.0 && out.image.max() <= 1.0);
    }

    #[test]
    fn crop_yields_requested_size_and_keeps_pairing() {
        let pair = &synthetic_pairs(1)[0];
        let policy = AugmentationPolicy {
            horizontal_flip_prob: 0.0,
            vertical_flip_prob: 0.0,
            crop_size: Some((8, 8)),
            clahe_clip_limit: None,
            clahe_tile_grid: (8, 8),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = augment(pair, &policy, &mut rng).unwrap();
        assert_eq!(out.image.shape(), &[8, 8]);
        assert_eq!(out.mask.shape(), &[8, 8]);
        // The crop window is shared: find it in the source and compare.
        let mut found = false;
        for y0 in 0..=8 {
            for x0 in 0..=8 {
                let ci = crop(&pair.image, y0, x0, 8, 8);
                if ci.data() == out.image.data() {
                    let cm = crop(&pair.mask, y0, x0, 8, 8);
                    assert_eq!(cm.data(), out.mask.data());
                    found = true;
                }
            }
        }
        assert!(found, "cropped image must be a window of the source");
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let pair = &synthetic_pairs(1)[0];
        let policy = AugmentationPolicy {
            crop_size: Some((32, 32)),
            ..AugmentationPolicy::disabled()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            augment(pair, &policy, &mut rng),
            Err(DataError::BadPolicy(_))
        ));
    }

    #[test]
    fn manifest_round_trips() {
        let split = split_dataset(synthetic_pairs(12), 5).unwrap();
        let manifest = write_split_manifest(&split);
        let rebuilt = apply_split_manifest(synthetic_pairs(12), &manifest, 5).unwrap();
        let ids = |v: &[SamplePair]| {
            let mut s: Vec<String> = v.iter().map(|p| p.id.clone()).collect();
            s.sort();
            s
        };
        assert_eq!(ids(&split.train), ids(&rebuilt.train));
        assert_eq!(ids(&split.val), ids(&rebuilt.val));
        assert_eq!(ids(&split.test), ids(&rebuilt.test));
    }

    #[test]
    fn manifest_rejects_unknown_ids_and_bad_lines() {
        let pairs = synthetic_pairs(4);
        assert!(matches!(
            apply_split_manifest(pairs.clone(), "ghost\ttrain\n", 0),
            Err(DataError::UnknownManifestId(_))
        ));
        assert!(matches!(
            apply_split_manifest(pairs.clone(), "s000 train\n", 0),
            Err(DataError::BadManifest { .. })
        ));
        assert!(matches!(
            apply_split_manifest(pairs, "s000\tmystery\n", 0),
            Err(DataError::BadManifest { .. })
        ));
    }

    #[test]
    fn load_dataset_reads_paired_rasters_and_flags_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        let masks = dir.path().join("masks");
        std::fs::create_dir_all(&images).unwrap();
        std::fs::create_dir_all(&masks).unwrap();
        for i in 0..3 {
            let img = image::GrayImage::from_fn(20, 20, |x, y| {
                image::Luma([((x + y + i) % 256) as u8])
            });
            img.save(images.join(format!("p{i}.png"))).unwrap();
            let msk = image::GrayImage::from_fn(20, 20, |x, _| {
                image::Luma([if x < 10 { 255 } else { 0 }])
            });
            msk.save(masks.join(format!("p{i}.png"))).unwrap();
        }
        let pairs = load_dataset(dir.path(), (16, 16)).unwrap();
        assert_eq!(pairs.len(), 3);
        for p in &pairs {
            assert_eq!(p.image.shape(), &[16, 16]);
            assert!(p.image.min() >= -1.0 && p.image.max() <= 1.0);
            assert!(p.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }

        // Add an orphan mask and expect an error that names it.
        let msk = image::GrayImage::from_fn(20, 20, |_, _| image::Luma([0u8]));
        msk.save(masks.join("orphan.png")).unwrap();
        match load_dataset(dir.path(), (16, 16)) {
            Err(DataError::Orphans(names)) => assert_eq!(names, vec!["orphan".to_string()]),
            other => panic!("expected orphan error, got {other:?}"),
        }
    }

    #[test]
    fn load_dataset_missing_dir_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path(), (16, 16)),
            Err(DataError::MissingDir(_))
        ));
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), (16, 16)),
            Err(DataError::EmptyDataset)
        ));
    }
}
