//! The six subcommands. Each one resolves its configuration, writes a run
//! manifest into the output directory before heavy work, performs the work,
//! then rewrites the manifest with artifact checksums.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use nanosyn_core::checkpoint::load_checkpoint;
use nanosyn_core::data::{load_dataset, split_dataset, write_split_manifest, DatasetSplit};
use nanosyn_core::evaluation::{
    evaluate_model, evaluate_with, FeatureExtractor, MetricsReport,
};
use nanosyn_core::generation::{
    generate, post_process, segment, synthesize_masks, GenerationError, MaskSynthesisSpec,
    PostProcessSpec,
};
use nanosyn_core::tensor::Tensor;
use nanosyn_core::toy::toy_dataset;
use nanosyn_core::training::{train, TrainError, TrainState};

use crate::config::{Overrides, RunConfig};
use crate::io_util::{list_rasters, read_image, read_mask, write_image, write_mask};
use crate::manifest::RunManifest;
use crate::CliError;

fn validation<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn gen_err(e: GenerationError) -> CliError {
    match e {
        GenerationError::Network(_) => CliError::Runtime(e.to_string()),
        _ => CliError::Validation(e.to_string()),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::BadConfig(_) => CliError::Validation(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

/// Loads the config file if given, otherwise starts from defaults.
fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Builds the dataset split named by `[data].root`: a directory holding
/// `images/` and `masks/`, or the hermetic `toy:<n>` form.
fn load_split(cfg: &RunConfig) -> Result<DatasetSplit, CliError> {
    let root = cfg.data.root.trim();
    if root.is_empty() {
        return Err(CliError::Validation(
            "[data].root is required: a dataset directory with images/ and masks/, \
             or toy:<n> for a synthetic dataset"
                .into(),
        ));
    }
    if let Some(n) = root.strip_prefix("toy:") {
        let n: usize = n
            .parse()
            .map_err(|_| CliError::Validation(format!("bad toy dataset size in {root:?}")))?;
        return Ok(toy_dataset(n, cfg.model.image_size, cfg.data.split_seed));
    }
    let size = (cfg.model.image_size, cfg.model.image_size);
    let pairs = load_dataset(Path::new(root), size).map_err(validation)?;
    split_dataset(pairs, cfg.data.split_seed).map_err(validation)
}

fn resolve_extractor(name: &str) -> Result<FeatureExtractor, CliError> {
    if name == "fallback" {
        Ok(FeatureExtractor::fallback())
    } else {
        FeatureExtractor::pretrained(name).map_err(validation)
    }
}

fn make_out_dir(out_dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Validation(format!("creating {}: {e}", out_dir.display())))
}

fn load_state(checkpoint: &Path) -> Result<TrainState, CliError> {
    load_checkpoint(checkpoint)
        .map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", checkpoint.display())))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unnamed".into())
}

/// Human-readable metrics table, one row per evaluated configuration.
fn metrics_table(rows: &[&MetricsReport]) -> String {
    let mut s = String::new();
    s.push_str("| Configuration | FID (lower is better) | SSIM (higher is better) |\n");
    s.push_str("|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.4} | {:.4} |\n",
            r.configuration, r.fid, r.ssim_mean
        ));
    }
    s
}

/// Machine-readable counterpart: comment header naming the feature
/// extractor and covariance convention, then one TSV row per configuration.
fn metrics_tsv(rows: &[&MetricsReport]) -> String {
    let mut s = String::new();
    if let Some(first) = rows.first() {
        s.push_str(&format!("# extractor: {}\n", first.extractor));
        s.push_str(&format!("# covariance: {}\n", first.covariance_convention));
    }
    s.push_str("configuration\tfid\tssim_mean\n");
    for r in rows {
        s.push_str(&format!("{}\t{}\t{}\n", r.configuration, r.fid, r.ssim_mean));
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

// ---------------------------------------------------------------- train --

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub data_root: Option<String>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    let overrides = Overrides {
        data_root: args.data_root.clone(),
        seed: args.seed,
        epochs: args.epochs,
    };
    let override_log = overrides.apply(&mut cfg);
    cfg.validate()?;

    let split = load_split(&cfg)?;
    let extractor = resolve_extractor(&cfg.eval.extractor)?;
    make_out_dir(&args.out_dir)?;

    let mut manifest = RunManifest::new(
        "train",
        cfg.training.seed,
        cfg.clone(),
        vec![cfg.data.root.clone()],
        &args.out_dir,
        override_log,
    );
    manifest.write(&args.out_dir)?;

    let split_path = args.out_dir.join("split.tsv");
    write_text(&split_path, &write_split_manifest(&split))?;

    let metrics_path = args.out_dir.join("metrics.log");
    let mut metrics_file = File::create(&metrics_path)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", metrics_path.display())))?;

    let state = TrainState::new(cfg.model.clone(), cfg.training.seed);
    let outcome = train(
        &split,
        state,
        &cfg.losses,
        &cfg.training,
        &cfg.data.augmentation_policy(),
        &extractor,
        Some(&args.out_dir),
        Some(&mut metrics_file),
    )
    .map_err(train_err)?;
    metrics_file.flush().map_err(runtime)?;

    for report in &outcome.epoch_reports {
        println!(
            "epoch {}: val_seg_loss={:.6} val_ssim={:.4}",
            report.epoch, report.val_seg_loss, report.val_ssim
        );
    }

    let mut artifacts = vec![split_path, metrics_path];
    artifacts.extend(outcome.checkpoints.iter().cloned());
    manifest.finalize(&args.out_dir, &artifacts)?;
    println!(
        "trained {} epochs ({} steps); artifacts in {}",
        outcome.state.epoch,
        outcome.state.step,
        args.out_dir.display()
    );
    Ok(())
}

// ------------------------------------------------------------- generate --

pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    /// Directory of binary mask rasters; mutually exclusive with `synthesize`.
    pub masks: Option<PathBuf>,
    /// Number of masks to synthesize instead of reading them from disk.
    pub synthesize: Option<usize>,
    pub seed: u64,
    pub particle_count: (usize, usize),
    pub radius: (f64, f64),
    pub ellipticity: (f64, f64),
    pub overlap: bool,
    pub brightness_shift: f64,
    pub exposure_gain: f64,
    pub shadow_lift: f64,
    pub highlight_cut: f64,
}

impl GenerateArgs {
    fn post_process_spec(&self) -> PostProcessSpec {
        PostProcessSpec {
            brightness_shift: self.brightness_shift,
            exposure_gain: self.exposure_gain,
            shadow_lift: self.shadow_lift,
            highlight_cut: self.highlight_cut,
        }
    }

    fn synthesis_spec(&self, canvas: usize) -> MaskSynthesisSpec {
        MaskSynthesisSpec {
            canvas: (canvas, canvas),
            particle_count_range: self.particle_count,
            radius_range: self.radius,
            ellipticity_range: self.ellipticity,
            overlap_allowed: self.overlap,
            seed: self.seed,
        }
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    if args.masks.is_some() == args.synthesize.is_some() {
        return Err(CliError::Validation(
            "pass exactly one of --masks <dir> or --synthesize <count>".into(),
        ));
    }
    let state = load_state(&args.checkpoint)?;
    let size = state.model.image_size;
    let post = args.post_process_spec();
    post.validate().map_err(gen_err)?;

    // (name stem, mask) pairs, either read from disk or synthesized.
    let mut inputs = vec![args.checkpoint.display().to_string()];
    let masks: Vec<(String, Tensor)> = match (&args.masks, args.synthesize) {
        (Some(dir), None) => {
            inputs.push(dir.display().to_string());
            let mut out = Vec::new();
            for path in list_rasters(dir)? {
                let mask = read_mask(&path)?;
                if mask.shape() != [size, size] {
                    return Err(CliError::Validation(format!(
                        "mask {} is {}x{}, model expects {size}x{size}",
                        path.display(),
                        mask.shape()[0],
                        mask.shape()[1]
                    )));
                }
                out.push((file_stem(&path), mask));
            }
            out
        }
        (None, Some(count)) => {
            let spec = args.synthesis_spec(size);
            synthesize_masks(&spec, count)
                .map_err(gen_err)?
                .into_iter()
                .enumerate()
                .map(|(i, m)| (format!("mask_{i:03}"), m))
                .collect()
        }
        _ => unreachable!(),
    };

    make_out_dir(&args.out_dir)?;
    let cfg = RunConfig {
        model: state.model.clone(),
        ..RunConfig::default()
    };
    let mut manifest = RunManifest::new("generate", args.seed, cfg, inputs, &args.out_dir, vec![]);
    manifest.write(&args.out_dir)?;

    let mut artifacts = Vec::new();
    for (i, (stem, mask)) in masks.iter().enumerate() {
        let image = generate(mask, &state.gen, &state.model, args.seed.wrapping_add(i as u64))
            .map_err(gen_err)?;
        let image = post_process(&image, &post).map_err(gen_err)?;
        if args.synthesize.is_some() {
            let mask_path = args.out_dir.join(format!("{stem}.png"));
            write_mask(&mask_path, mask)?;
            artifacts.push(mask_path);
        }
        let img_path = args.out_dir.join(format!("{stem}_gen.png"));
        write_image(&img_path, &image)?;
        artifacts.push(img_path);
    }
    manifest.finalize(&args.out_dir, &artifacts)?;
    println!(
        "generated {} image(s) in {}",
        masks.len(),
        args.out_dir.display()
    );
    Ok(())
}

// -------------------------------------------------------------- segment --

pub struct SegmentArgs {
    pub checkpoint: PathBuf,
    pub images: PathBuf,
    pub out_dir: PathBuf,
    pub threshold: f64,
}

pub fn cmd_segment(args: &SegmentArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(CliError::Validation(format!(
            "--threshold must lie in [0, 1], got {}",
            args.threshold
        )));
    }
    let state = load_state(&args.checkpoint)?;
    let size = state.model.image_size;
    let paths = list_rasters(&args.images)?;

    make_out_dir(&args.out_dir)?;
    let cfg = RunConfig {
        model: state.model.clone(),
        ..RunConfig::default()
    };
    let mut manifest = RunManifest::new(
        "segment",
        0,
        cfg,
        vec![
            args.checkpoint.display().to_string(),
            args.images.display().to_string(),
        ],
        &args.out_dir,
        vec![],
    );
    manifest.write(&args.out_dir)?;

    let mut artifacts = Vec::new();
    for path in &paths {
        let image = read_image(path)?;
        if image.shape() != [size, size] {
            return Err(CliError::Validation(format!(
                "image {} is {}x{}, model expects {size}x{size}",
                path.display(),
                image.shape()[0],
                image.shape()[1]
            )));
        }
        let mask = segment(&image, &state.seg, &state.model, args.threshold).map_err(gen_err)?;
        let out_path = args.out_dir.join(format!("{}_mask.png", file_stem(path)));
        write_mask(&out_path, &mask)?;
        artifacts.push(out_path);
    }
    manifest.finalize(&args.out_dir, &artifacts)?;
    println!(
        "segmented {} image(s) into {}",
        paths.len(),
        args.out_dir.display()
    );
    Ok(())
}

// ------------------------------------------------------------- evaluate --

pub struct EvaluateArgs {
    pub config: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub data_root: Option<String>,
    /// Score the real test images against themselves; yields FID near zero
    /// and SSIM of one, exercising the metric pipeline without a model.
    pub identity_stub: bool,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    let overrides = Overrides {
        data_root: args.data_root.clone(),
        seed: None,
        epochs: None,
    };
    let override_log = overrides.apply(&mut cfg);
    cfg.validate()?;
    if args.checkpoint.is_none() && !args.identity_stub {
        return Err(CliError::Validation(
            "pass --checkpoint <file>, or --identity-stub to score real images \
             against themselves"
                .into(),
        ));
    }

    let split = load_split(&cfg)?;
    let extractor = resolve_extractor(&cfg.eval.extractor)?;
    make_out_dir(&args.out_dir)?;

    let mut inputs = vec![cfg.data.root.clone()];
    if let Some(ckpt) = &args.checkpoint {
        inputs.push(ckpt.display().to_string());
    }
    let mut manifest = RunManifest::new(
        "evaluate",
        cfg.eval.seed,
        cfg.clone(),
        inputs,
        &args.out_dir,
        override_log,
    );
    manifest.write(&args.out_dir)?;

    let report = if args.identity_stub {
        evaluate_with(
            &split.test,
            |pair| Ok(pair.image.clone()),
            &extractor,
            "identity stub",
        )
        .map_err(runtime)?
    } else {
        let state = load_state(args.checkpoint.as_ref().unwrap())?;
        if state.model != cfg.model {
            return Err(CliError::Validation(
                "checkpoint model configuration differs from [model] in the config; \
                 pass the config the model was trained with"
                    .into(),
            ));
        }
        evaluate_model(
            &split.test,
            &state.gen,
            &state.model,
            cfg.eval.seed,
            &extractor,
            "trained generator",
        )
        .map_err(runtime)?
    };

    let table = metrics_table(&[&report]);
    print!("{table}");
    let report_txt = args.out_dir.join("report.txt");
    write_text(&report_txt, &table)?;
    let report_tsv = args.out_dir.join("report.tsv");
    write_text(&report_tsv, &metrics_tsv(&[&report]))?;

    let mut per_sample = String::from("id\tssim\n");
    for (id, s) in &report.per_sample_ssim {
        per_sample.push_str(&format!("{id}\t{s}\n"));
    }
    let per_sample_path = args.out_dir.join("per_sample_ssim.tsv");
    write_text(&per_sample_path, &per_sample)?;

    manifest.finalize(&args.out_dir, &[report_txt, report_tsv, per_sample_path])?;
    Ok(())
}

// --------------------------------------------------------------- ablate --

pub struct AblateArgs {
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub data_root: Option<String>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    let overrides = Overrides {
        data_root: args.data_root.clone(),
        seed: args.seed,
        epochs: args.epochs,
    };
    let mut override_log = overrides.apply(&mut cfg);
    cfg.validate()?;
    let rows = cfg.ablation_rows();
    for row in &rows {
        row.losses
            .validate()
            .map_err(|e| CliError::Validation(format!("ablation row {:?}: {e}", row.label)))?;
    }

    let split = load_split(&cfg)?;
    let extractor = resolve_extractor(&cfg.eval.extractor)?;
    make_out_dir(&args.out_dir)?;

    // Every row trains from the same initial weights and data order.
    override_log.push(format!(
        "all {} rows share training seed {} and split seed {}",
        rows.len(),
        cfg.training.seed,
        split.seed
    ));
    let mut manifest = RunManifest::new(
        "ablate",
        cfg.training.seed,
        cfg.clone(),
        vec![cfg.data.root.clone()],
        &args.out_dir,
        override_log,
    );
    manifest.write(&args.out_dir)?;

    let policy = cfg.data.augmentation_policy();
    let mut reports = Vec::with_capacity(rows.len());
    for row in &rows {
        let state = TrainState::new(cfg.model.clone(), cfg.training.seed);
        let outcome = train(
            &split,
            state,
            &row.losses,
            &cfg.training,
            &policy,
            &extractor,
            None,
            None,
        )
        .map_err(train_err)?;
        let report = evaluate_model(
            &split.test,
            &outcome.state.gen,
            &outcome.state.model,
            cfg.eval.seed,
            &extractor,
            &row.label,
        )
        .map_err(runtime)?;
        println!(
            "{}: fid={:.4} ssim={:.4}",
            report.configuration, report.fid, report.ssim_mean
        );
        reports.push(report);
    }

    let refs: Vec<&MetricsReport> = reports.iter().collect();
    let table = metrics_table(&refs);
    print!("{table}");
    let table_path = args.out_dir.join("ablation.txt");
    write_text(&table_path, &table)?;
    let tsv_path = args.out_dir.join("ablation.tsv");
    write_text(&tsv_path, &metrics_tsv(&refs))?;
    manifest.finalize(&args.out_dir, &[table_path, tsv_path])?;
    Ok(())
}

// ----------------------------------------------------------- make-masks --

pub struct MakeMasksArgs {
    pub out_dir: PathBuf,
    pub count: usize,
    pub size: usize,
    pub particle_count: (usize, usize),
    pub radius: (f64, f64),
    pub ellipticity: (f64, f64),
    pub overlap: bool,
    pub seed: u64,
}

pub fn cmd_make_masks(args: &MakeMasksArgs) -> Result<(), CliError> {
    if args.count == 0 {
        return Err(CliError::Validation("--count must be positive".into()));
    }
    let spec = MaskSynthesisSpec {
        canvas: (args.size, args.size),
        particle_count_range: args.particle_count,
        radius_range: args.radius,
        ellipticity_range: args.ellipticity,
        overlap_allowed: args.overlap,
        seed: args.seed,
    };
    let masks = synthesize_masks(&spec, args.count).map_err(gen_err)?;

    make_out_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new(
        "make-masks",
        args.seed,
        RunConfig::default(),
        vec![],
        &args.out_dir,
        vec![],
    );
    manifest.write(&args.out_dir)?;

    let mut artifacts = Vec::new();
    for (i, mask) in masks.iter().enumerate() {
        let path = args.out_dir.join(format!("mask_{i:03}.png"));
        write_mask(&path, mask)?;
        artifacts.push(path);
    }
    manifest.finalize(&args.out_dir, &artifacts)?;
    println!("wrote {} mask(s) to {}", masks.len(), args.out_dir.display());
    Ok(())
}
