//! Flat `key = value` run configuration. One struct carries everything
//! the three commands need; command-line flags override file values, and
//! `EVSEV_SEED` overrides the file (but not an explicit `--seed`).

use std::collections::BTreeMap;
use std::path::Path;

use evsev_core::evidential::LossConfig;
use evsev_core::model::ModelConfig;
use evsev_core::synth::{DatasetSpec, LabelMode};

use crate::error::AppError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // dataset
    pub n_patches: usize,
    pub proportions: [f64; 3],
    pub tau_margin: f64,
    pub patches_per_scene: usize,
    pub label_mode: LabelMode,
    pub split_fractions: (f64, f64, f64),
    // model
    pub patch_size: usize,
    pub conv_channels: [usize; 3],
    pub fc_widths: [usize; 2],
    pub dropout: f64,
    pub cbam_reduction: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment_flips: bool,
    pub lambda_kl: f64,
    pub lambda_aod: f64,
    pub kl_ramp_epochs: usize,
    pub include_variance_term: bool,
    pub ce_weight: f64,
    // eval
    pub n_bins: usize,
    pub bootstrap_confidence: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ds = DatasetSpec::default();
        let mc = ModelConfig::default();
        let lc = LossConfig::default();
        RunConfig {
            n_patches: ds.n_patches,
            proportions: ds.proportions,
            tau_margin: ds.tau_margin,
            patches_per_scene: ds.patches_per_scene,
            label_mode: LabelMode::Oracle,
            split_fractions: (0.53, 0.09, 0.38),
            patch_size: mc.patch_size,
            conv_channels: mc.conv_channels,
            fc_widths: mc.fc_widths,
            dropout: mc.dropout,
            cbam_reduction: mc.cbam_reduction,
            learning_rate: mc.learning_rate,
            weight_decay: mc.weight_decay,
            epochs: mc.epochs,
            batch_size: mc.batch_size,
            augment_flips: mc.augment_flips,
            lambda_kl: lc.lambda_kl,
            lambda_aod: lc.lambda_aod,
            kl_ramp_epochs: lc.kl_ramp_epochs,
            include_variance_term: lc.include_variance_term,
            ce_weight: lc.ce_weight,
            n_bins: 15,
            bootstrap_confidence: 0.95,
            seed: mc.seed,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, AppError> {
    value
        .parse()
        .map_err(|_| AppError::usage(format!("config key {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, AppError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(AppError::usage(format!("config key {key}: expected a boolean, got {value:?}"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), AppError> {
        match key {
            "n_patches" => self.n_patches = parse(key, value)?,
            "p_light" => self.proportions[0] = parse(key, value)?,
            "p_moderate" => self.proportions[1] = parse(key, value)?,
            "p_heavy" => self.proportions[2] = parse(key, value)?,
            "tau_margin" => self.tau_margin = parse(key, value)?,
            "patches_per_scene" => self.patches_per_scene = parse(key, value)?,
            "label_mode" => {
                self.label_mode = match value {
                    "oracle" => LabelMode::Oracle,
                    "pipeline" => LabelMode::Pipeline,
                    _ => {
                        return Err(AppError::usage(format!(
                            "label_mode must be oracle or pipeline, got {value:?}"
                        )))
                    }
                }
            }
            "f_train" => self.split_fractions.0 = parse(key, value)?,
            "f_val" => self.split_fractions.1 = parse(key, value)?,
            "f_test" => self.split_fractions.2 = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "conv1" => self.conv_channels[0] = parse(key, value)?,
            "conv2" => self.conv_channels[1] = parse(key, value)?,
            "conv3" => self.conv_channels[2] = parse(key, value)?,
            "fc1" => self.fc_widths[0] = parse(key, value)?,
            "fc2" => self.fc_widths[1] = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "cbam_reduction" => self.cbam_reduction = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "augment_flips" => self.augment_flips = parse_bool(key, value)?,
            "lambda_kl" => self.lambda_kl = parse(key, value)?,
            "lambda_aod" => self.lambda_aod = parse(key, value)?,
            "kl_ramp_epochs" => self.kl_ramp_epochs = parse(key, value)?,
            "include_variance_term" => self.include_variance_term = parse_bool(key, value)?,
            "ce_weight" => self.ce_weight = parse(key, value)?,
            "n_bins" => self.n_bins = parse(key, value)?,
            "bootstrap_confidence" => self.bootstrap_confidence = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(AppError::usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Loads a flat key=value file; `#` starts a comment, blank lines skip.
    pub fn load(path: &Path) -> Result<RunConfig, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::usage(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                AppError::usage(format!("{}:{}: expected key = value", path.display(), lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Every field as strings, the echo embedded in all artifacts.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("n_patches", self.n_patches.to_string());
        put("p_light", self.proportions[0].to_string());
        put("p_moderate", self.proportions[1].to_string());
        put("p_heavy", self.proportions[2].to_string());
        put("tau_margin", self.tau_margin.to_string());
        put("patches_per_scene", self.patches_per_scene.to_string());
        put(
            "label_mode",
            match self.label_mode {
                LabelMode::Oracle => "oracle".into(),
                LabelMode::Pipeline => "pipeline".into(),
            },
        );
        put("f_train", self.split_fractions.0.to_string());
        put("f_val", self.split_fractions.1.to_string());
        put("f_test", self.split_fractions.2.to_string());
        put("patch_size", self.patch_size.to_string());
        put("conv1", self.conv_channels[0].to_string());
        put("conv2", self.conv_channels[1].to_string());
        put("conv3", self.conv_channels[2].to_string());
        put("fc1", self.fc_widths[0].to_string());
        put("fc2", self.fc_widths[1].to_string());
        put("dropout", self.dropout.to_string());
        put("cbam_reduction", self.cbam_reduction.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("augment_flips", self.augment_flips.to_string());
        put("lambda_kl", self.lambda_kl.to_string());
        put("lambda_aod", self.lambda_aod.to_string());
        put("kl_ramp_epochs", self.kl_ramp_epochs.to_string());
        put("include_variance_term", self.include_variance_term.to_string());
        put("ce_weight", self.ce_weight.to_string());
        put("n_bins", self.n_bins.to_string());
        put("bootstrap_confidence", self.bootstrap_confidence.to_string());
        put("seed", self.seed.to_string());
        m
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_patches: self.n_patches,
            proportions: self.proportions,
            tau_margin: self.tau_margin,
            patch_size: self.patch_size,
            patches_per_scene: self.patches_per_scene,
            label_mode: self.label_mode,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            patch_size: self.patch_size,
            conv_channels: self.conv_channels,
            fc_widths: self.fc_widths,
            dropout: self.dropout,
            cbam_reduction: self.cbam_reduction,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            augment_flips: self.augment_flips,
            loss: LossConfig {
                lambda_kl: self.lambda_kl,
                lambda_aod: self.lambda_aod,
                kl_ramp_epochs: self.kl_ramp_epochs,
                include_variance_term: self.include_variance_term,
                ce_weight: self.ce_weight,
            },
            seed: self.seed,
        }
    }

    /// Rebuilds the struct from an echo map (checkpoint compatibility
    /// checks use this).
    pub fn from_echo(echo: &BTreeMap<String, String>) -> Result<RunConfig, AppError> {
        let mut cfg = RunConfig::default();
        for (k, v) in echo {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("epochs", "7").unwrap();
        cfg.set("label_mode", "pipeline").unwrap();
        cfg.set("p_moderate", "0.066").unwrap();
        let back = RunConfig::from_echo(&cfg.echo()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn file_parsing_and_overrides() {
        let dir = std::env::temp_dir().join("evsev-config-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(
            &path,
            "# a comment\nepochs = 3\nseed=41   # trailing comment\n\nn_patches = 50\n",
        )
        .unwrap();
        let mut cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.seed, 41);
        assert_eq!(cfg.n_patches, 50);
        cfg.set("seed", "9").unwrap(); // flag override
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn bad_input_is_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("no_such_key", "1").is_err());
        assert!(cfg.set("epochs", "three").is_err());
        assert!(cfg.set("label_mode", "guess").is_err());
        assert!(cfg.set("augment_flips", "maybe").is_err());
    }
}
