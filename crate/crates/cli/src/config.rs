//! Run configuration: one TOML file with [data], [model], [losses],
//! [training], and [eval] sections, every field optional with defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use nanosyn_core::data::AugmentationPolicy;
use nanosyn_core::losses::LossConfig;
use nanosyn_core::networks::ModelConfig;
use nanosyn_core::training::TrainingConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset root holding images/ and masks/; the special value
    /// `toy:<n>` builds an n-pair synthetic dataset in memory.
    pub root: String,
    /// Seed for the train/val/test shuffle.
    pub split_seed: u64,
    pub horizontal_flip_prob: f64,
    pub vertical_flip_prob: f64,
    /// 0 disables contrast equalization during augmentation.
    pub clahe_clip_limit: f64,
    pub clahe_tile_grid: [usize; 2],
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: String::new(),
            split_seed: 0,
            horizontal_flip_prob: 0.5,
            vertical_flip_prob: 0.5,
            clahe_clip_limit: 2.0,
            clahe_tile_grid: [8, 8],
        }
    }
}

impl DataSection {
    pub fn augmentation_policy(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            horizontal_flip_prob: self.horizontal_flip_prob,
            vertical_flip_prob: self.vertical_flip_prob,
            crop_size: None,
            clahe_clip_limit: if self.clahe_clip_limit > 0.0 {
                Some(self.clahe_clip_limit)
            } else {
                None
            },
            clahe_tile_grid: (self.clahe_tile_grid[0], self.clahe_tile_grid[1]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// "fallback" (deterministic, hermetic) or a pretrained extractor name.
    pub extractor: String,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            extractor: "fallback".into(),
            seed: 0,
        }
    }
}

/// One ablation row: a label plus the loss configuration it trains with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    #[serde(default)]
    pub losses: LossConfig,
}

/// The three segmentation-loss configurations compared by default.
pub fn default_ablation_rows() -> Vec<AblationRow> {
    let base = LossConfig::default();
    vec![
        AblationRow {
            label: "Focal CE + Dice".into(),
            losses: LossConfig {
                tversky_alpha: 0.5,
                tversky_beta: 0.5,
                tversky_gamma: 1.0,
                ..base.clone()
            },
        },
        AblationRow {
            label: "CE + Focal TV(α=0.3, β=0.7, γ=0.75)".into(),
            losses: LossConfig {
                alpha_t: 1.0,
                gamma: 0.0,
                tversky_alpha: 0.3,
                tversky_beta: 0.7,
                tversky_gamma: 0.75,
                ..base.clone()
            },
        },
        AblationRow {
            label: "Focal CE + TV(α=0.4, β=0.6)".into(),
            losses: LossConfig {
                tversky_alpha: 0.4,
                tversky_beta: 0.6,
                tversky_gamma: 1.0,
                ..base
            },
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub training: TrainingConfig,
    pub eval: EvalSection,
    /// Rows for the ablation command; empty means the default three.
    pub ablation: Vec<AblationRow>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSection::default(),
            model: ModelConfig::default(),
            losses: LossConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalSection::default(),
            ablation: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.losses
            .validate()
            .map_err(|e| CliError::Validation(format!("[losses] {e}")))?;
        self.training
            .validate()
            .map_err(|e| CliError::Validation(format!("[training] {e}")))?;
        let m = &self.model;
        if m.depth == 0 || m.base_width == 0 || m.latent_dim == 0 || m.style_dim == 0 {
            return Err(CliError::Validation(
                "[model] depth, base_width, latent_dim, and style_dim must be positive".into(),
            ));
        }
        m.validate_spatial(m.image_size, m.image_size)
            .map_err(|e| CliError::Validation(format!("[model] {e}")))?;
        self.data
            .augmentation_policy()
            .validate(m.image_size, m.image_size)
            .map_err(|e| CliError::Validation(format!("[data] {e}")))?;
        if self.eval.extractor != "fallback" {
            // Pretrained extractors are rejected later with guidance; the
            // name itself is not a validation failure.
        }
        Ok(())
    }

    pub fn ablation_rows(&self) -> Vec<AblationRow> {
        if self.ablation.is_empty() {
            default_ablation_rows()
        } else {
            self.ablation.clone()
        }
    }
}

/// Applies optional command-line overrides onto the config, returning one
/// human-readable line per applied override.
pub struct Overrides {
    pub data_root: Option<String>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Vec<String> {
        let mut log = Vec::new();
        if let Some(root) = &self.data_root {
            log.push(format!(
                "--data-root overrides [data].root ({:?} -> {:?})",
                cfg.data.root, root
            ));
            cfg.data.root = root.clone();
        }
        if let Some(seed) = self.seed {
            log.push(format!(
                "--seed overrides [training].seed ({} -> {seed})",
                cfg.training.seed
            ));
            cfg.training.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            log.push(format!(
                "--epochs overrides [training].epochs ({} -> {epochs})",
                cfg.training.epochs
            ));
            cfg.training.epochs = epochs;
        }
        log
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_sections_fill_in_defaults() {
        let cfg: RunConfig = toml::from_str(
            "[data]\nroot = \"toy:8\"\n\n[training]\nepochs = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.data.root, "toy:8");
        assert_eq!(cfg.training.epochs, 3);
        let defaults = RunConfig::default();
        assert_eq!(cfg.model, defaults.model);
        assert_eq!(cfg.losses, defaults.losses);
        assert_eq!(cfg.data.horizontal_flip_prob, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[trainign]\nepochs = 3\n").unwrap_err();
        assert!(err.to_string().contains("trainign"), "{err}");
    }

    #[test]
    fn validation_errors_name_the_section() {
        let mut cfg = RunConfig::default();
        cfg.losses.tversky_alpha = -1.0;
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, CliError::Validation(ref m) if m.starts_with("[losses]")));

        let mut cfg = RunConfig::default();
        cfg.training.learning_rate = 0.0;
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, CliError::Validation(ref m) if m.starts_with("[training]")));
    }

    #[test]
    fn default_ablation_has_three_labeled_rows() {
        let rows = default_ablation_rows();
        assert_eq!(rows.len(), 3);
        let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        assert!(labels.contains(&"Focal CE + Dice"));
        assert!(labels.contains(&"CE + Focal TV(\u{3b1}=0.3, \u{3b2}=0.7, \u{3b3}=0.75)"));
        assert!(labels.contains(&"Focal CE + TV(\u{3b1}=0.4, \u{3b2}=0.6)"));
        for row in &rows {
            row.losses.validate().unwrap();
        }
    }

    #[test]
    fn explicit_ablation_rows_replace_the_defaults() {
        let cfg: RunConfig = toml::from_str(
            "[[ablation]]\nlabel = \"a\"\n\n[[ablation]]\nlabel = \"b\"\n\n\
             [[ablation]]\nlabel = \"c\"\n\n[[ablation]]\nlabel = \"d\"\n",
        )
        .unwrap();
        let rows = cfg.ablation_rows();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3].label, "d");
    }

    #[test]
    fn overrides_are_applied_and_logged() {
        let mut cfg = RunConfig::default();
        let log = Overrides {
            data_root: Some("toy:6".into()),
            seed: Some(9),
            epochs: Some(2),
        }
        .apply(&mut cfg);
        assert_eq!(cfg.data.root, "toy:6");
        assert_eq!(cfg.training.seed, 9);
        assert_eq!(cfg.training.epochs, 2);
        assert_eq!(log.len(), 3);
        assert!(log[1].contains("--seed"));
    }
}
