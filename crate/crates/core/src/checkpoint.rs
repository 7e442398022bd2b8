//! Versioned single-file checkpoints with bit-exact round-trips.
//!
//! Layout (all little-endian): magic, format version, model config, epoch and
//! step counters, RNG seed and stream position, then four named parameter
//! groups each followed by its optimizer moments. Writes go to a temp file in
//! the same directory and are renamed into place.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::networks::{ModelConfig, ParamStruct};
use crate::tensor::Tensor;
use crate::training::{AdamState, TrainState};

const MAGIC: &[u8; 4] = b"NSYN";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (this build reads {supported})")]
    BadVersion { found: u32, supported: u32 },
    #[error("checkpoint is truncated or corrupt: {0}")]
    Truncated(String),
    #[error("parameter group {group}, tensor {index}: shape {found:?} does not match {expected:?}")]
    ShapeMismatch {
        group: &'static str,
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint model config field {field} = {found} conflicts with expected {expected}")]
    ConfigMismatch {
        field: &'static str,
        expected: u64,
        found: u64,
    },
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u64(t.shape().len() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn tensors(&mut self, ts: &[&Tensor]) {
        self.u64(ts.len() as u64);
        for t in ts {
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated(format!(
                "unexpected end of file while reading {what}"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn u128(&mut self, what: &str) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn tensor(&mut self, what: &str) -> Result<Tensor, CheckpointError> {
        let rank = self.u64(what)? as usize;
        if rank > 8 {
            return Err(CheckpointError::Truncated(format!(
                "implausible tensor rank {rank} in {what}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64(what)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64(what)?);
        }
        Ok(Tensor::new(shape, data))
    }
    fn tensors(&mut self, what: &str) -> Result<Vec<Tensor>, CheckpointError> {
        let n = self.u64(what)? as usize;
        (0..n).map(|_| self.tensor(what)).collect()
    }
}

fn config_words(cfg: &ModelConfig) -> [(&'static str, u64); 9] {
    [
        ("image_size", cfg.image_size as u64),
        ("depth", cfg.depth as u64),
        ("base_width", cfg.base_width as u64),
        ("latent_dim", cfg.latent_dim as u64),
        ("style_dim", cfg.style_dim as u64),
        ("mapping_layers", cfg.mapping_layers as u64),
        ("disc_base_width", cfg.disc_base_width as u64),
        ("disc_stride2_layers", cfg.disc_stride2_layers as u64),
        ("attn_dim", cfg.attn_dim as u64),
    ]
}

/// Errors with the first differing field name, for resume-time validation.
pub fn check_config_compatible(
    expected: &ModelConfig,
    found: &ModelConfig,
) -> Result<(), CheckpointError> {
    for ((field, e), (_, f)) in config_words(expected).iter().zip(config_words(found)) {
        if *e != f {
            return Err(CheckpointError::ConfigMismatch {
                field,
                expected: *e,
                found: f,
            });
        }
    }
    Ok(())
}

fn write_group<P: ParamStruct<Tensor>>(w: &mut Writer, params: &P, opt: &AdamState) {
    let refs = crate::networks::params::collect_refs(params);
    w.tensors(&refs);
    w.u64(opt.t);
    w.tensors(&opt.m.iter().collect::<Vec<_>>());
    w.tensors(&opt.v.iter().collect::<Vec<_>>());
}

fn read_group<P: ParamStruct<Tensor>>(
    r: &mut Reader,
    group: &'static str,
    params: &mut P,
    opt: &mut AdamState,
) -> Result<(), CheckpointError> {
    let tensors = r.tensors(group)?;
    let mut i = 0;
    let mut err = None;
    params.for_each_mut(&mut |t: &mut Tensor| {
        if err.is_some() {
            return;
        }
        match tensors.get(i) {
            Some(loaded) if loaded.shape() == t.shape() => *t = loaded.clone(),
            Some(loaded) => {
                err = Some(CheckpointError::ShapeMismatch {
                    group,
                    index: i,
                    expected: t.shape().to_vec(),
                    found: loaded.shape().to_vec(),
                })
            }
            None => {
                err = Some(CheckpointError::Truncated(format!(
                    "group {group} has too few tensors"
                )))
            }
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != tensors.len() {
        return Err(CheckpointError::Truncated(format!(
            "group {group} has {} extra tensors",
            tensors.len() - i
        )));
    }
    opt.t = r.u64(group)?;
    opt.m = r.tensors(group)?;
    opt.v = r.tensors(group)?;
    Ok(())
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), CheckpointError> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    for (_, v) in config_words(&state.model) {
        w.u64(v);
    }
    w.f64(state.model.adain_eps);
    w.u64(state.epoch as u64);
    w.u64(state.step);
    w.buf.extend_from_slice(&state.rng.get_seed());
    w.u128(state.rng.get_word_pos());
    write_group(&mut w, &state.gen, &state.adam_gen);
    write_group(&mut w, &state.seg, &state.adam_seg);
    write_group(&mut w, &state.disc_image, &state.adam_disc_image);
    write_group(&mut w, &state.disc_mask, &state.adam_disc_mask);

    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(io_err)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&w.buf).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, CheckpointError> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion {
            found: version,
            supported: VERSION,
        });
    }
    let mut model = ModelConfig::default();
    model.image_size = r.u64("image_size")? as usize;
    model.depth = r.u64("depth")? as usize;
    model.base_width = r.u64("base_width")? as usize;
    model.latent_dim = r.u64("latent_dim")? as usize;
    model.style_dim = r.u64("style_dim")? as usize;
    model.mapping_layers = r.u64("mapping_layers")? as usize;
    model.disc_base_width = r.u64("disc_base_width")? as usize;
    model.disc_stride2_layers = r.u64("disc_stride2_layers")? as usize;
    model.attn_dim = r.u64("attn_dim")? as usize;
    model.adain_eps = r.f64("adain_eps")?;
    let epoch = r.u64("epoch")? as usize;
    let step = r.u64("step")?;
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
    let word_pos = r.u128("rng word position")?;

    // Rebuild the parameter skeletons with the right shapes, then overwrite
    // every leaf with the stored tensors.
    let mut state = TrainState::new(model, 0);
    read_group(&mut r, "generator", &mut state.gen, &mut state.adam_gen)?;
    read_group(&mut r, "segmenter", &mut state.seg, &mut state.adam_seg)?;
    read_group(
        &mut r,
        "image discriminator",
        &mut state.disc_image,
        &mut state.adam_disc_image,
    )?;
    read_group(
        &mut r,
        "mask discriminator",
        &mut state.disc_mask,
        &mut state.adam_disc_mask,
    )?;
    if r.pos != buf.len() {
        return Err(CheckpointError::Truncated(format!(
            "{} trailing bytes after final group",
            buf.len() - r.pos
        )));
    }
    state.epoch = epoch;
    state.step = step;
    state.rng = ChaCha8Rng::from_seed(seed);
    state.rng.set_word_pos(word_pos);
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AugmentationPolicy;
    use crate::evaluation::FeatureExtractor;
    use crate::losses::LossConfig;
    use crate::toy::toy_dataset;
    use crate::training::{train, train_step, TrainingConfig};
    use rand::Rng;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            depth: 2,
            base_width: 2,
            latent_dim: 4,
            style_dim: 4,
            mapping_layers: 2,
            disc_base_width: 2,
            disc_stride2_layers: 1,
            attn_dim: 2,
            ..ModelConfig::default()
        }
    }

    fn trained_state() -> TrainState {
        let split = toy_dataset(4, 8, 13);
        let mut state = TrainState::new(tiny_model(), 13);
        // Advance the rng so word_pos is nontrivial, and take one real step
        // so the optimizer moments are nonzero.
        let _: f64 = state.rng.gen();
        train_step(
            &split.train,
            &mut state,
            &LossConfig::default(),
            &TrainingConfig {
                epochs: 1,
                ..TrainingConfig::default()
            },
            &FeatureExtractor::fallback(),
        )
        .unwrap();
        state
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let state = trained_state();
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(state, loaded);
    }

    #[test]
    fn truncated_file_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let state = trained_state();
        save_checkpoint(&state, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&cut),
            Err(CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn bad_magic_and_bad_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));

        let good = dir.path().join("good.bin");
        save_checkpoint(&trained_state(), &good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes[4] = 99; // bump the version word
        let versioned = dir.path().join("versioned.bin");
        std::fs::write(&versioned, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&versioned),
            Err(CheckpointError::BadVersion { found: 99, .. })
        ));
    }

    #[test]
    fn config_mismatch_names_the_field() {
        let a = tiny_model();
        let mut b = tiny_model();
        b.image_size = 16;
        let err = check_config_compatible(&a, &b).unwrap_err();
        match err {
            CheckpointError::ConfigMismatch { field, .. } => assert_eq!(field, "image_size"),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(check_config_compatible(&a, &tiny_model()).is_ok());
    }

    #[test]
    fn resume_continues_identically_to_an_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let split = toy_dataset(5, 8, 31);
        let (lc, policy, ex) = (
            LossConfig::default(),
            AugmentationPolicy::disabled(),
            FeatureExtractor::fallback(),
        );
        let straight_cfg = TrainingConfig {
            epochs: 2,
            learning_rate: 1e-3,
            batch_size: 2,
            checkpoint_every: 0,
            ..TrainingConfig::default()
        };
        let straight = train(
            &split,
            TrainState::new(tiny_model(), 41),
            &lc,
            &straight_cfg,
            &policy,
            &ex,
            None,
            None,
        )
        .unwrap();

        // Same run interrupted after epoch 1 and resumed from disk.
        let half_cfg = TrainingConfig {
            epochs: 1,
            ..straight_cfg.clone()
        };
        let half = train(
            &split,
            TrainState::new(tiny_model(), 41),
            &lc,
            &half_cfg,
            &policy,
            &ex,
            None,
            None,
        )
        .unwrap();
        let path = dir.path().join("half.bin");
        save_checkpoint(&half.state, &path).unwrap();
        let resumed = train(
            &split,
            load_checkpoint(&path).unwrap(),
            &lc,
            &straight_cfg,
            &policy,
            &ex,
            None,
            None,
        )
        .unwrap();
        assert_eq!(straight.state, resumed.state);
    }
}
