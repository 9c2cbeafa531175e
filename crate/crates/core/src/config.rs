//! Training hyperparameters and their validation.
//!
//! Configuration is stored as flat TOML. Unknown keys are rejected so a typo
//! in a config file can never silently fall back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Square input side length in pixels.
    pub image_size: usize,
    pub in_channels: usize,
    /// Foreground class count; the network predicts `k_fg + 1` channels.
    pub k_fg: usize,
    /// Channel width of each U-Net resolution level, finest first.
    pub widths: Vec<usize>,

    pub alpha: f64,
    pub beta: f64,
    pub ema_lambda: f64,
    /// Puzzle grid sizes sampled uniformly each iteration.
    pub n_choices: Vec<usize>,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iters: u64,
    /// Supervised-only iterations before the semi-supervised phase; the
    /// teacher mirrors the student throughout.
    pub warmup_iters: u64,
    pub seed: u64,
    pub labeled_ratio: f64,

    pub val_interval: u64,
    /// Zero disables periodic checkpoints; best and last are always written.
    pub checkpoint_interval: u64,
    pub log_interval: u64,

    pub canny_low: f64,
    pub canny_high: f64,
    pub gaussian_sigma: f64,
    pub dilation_radius: usize,
    /// Teacher max-probability below which a pixel counts as unreliable
    /// when the reconstruction step is removed.
    pub s1_confidence_threshold: f64,

    /// Train on labeled pairs only (plain supervised baseline).
    pub labeled_only: bool,
    pub disable_ers: bool,
    pub disable_mms: bool,
    pub disable_s1: bool,
    pub disable_s2: bool,
    pub disable_aux_sketch: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_n: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            in_channels: 1,
            k_fg: 4,
            widths: vec![16, 32, 64, 128],
            alpha: 0.01,
            beta: 0.01,
            ema_lambda: 0.99,
            n_choices: vec![2, 3],
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_iters: 1000,
            warmup_iters: 0,
            seed: 0,
            labeled_ratio: 0.05,
            val_interval: 100,
            checkpoint_interval: 0,
            log_interval: 10,
            canny_low: 0.1,
            canny_high: 0.2,
            gaussian_sigma: 1.0,
            dilation_radius: 1,
            s1_confidence_threshold: 0.8,
            labeled_only: false,
            disable_ers: false,
            disable_mms: false,
            disable_s1: false,
            disable_s2: false,
            disable_aux_sketch: false,
            fixed_n: None,
        }
    }
}

/// Loss coefficients for the reconstruction and guidance terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl TrainConfig {
    /// Channel count of the segmentation head, background included.
    pub fn k_tot(&self) -> usize {
        self.k_fg + 1
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

/// Checks every field and returns the normalized config (grid choices
/// sorted and deduplicated).
pub fn validate_config(cfg: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = cfg;
    cfg.n_choices.sort_unstable();
    cfg.n_choices.dedup();

    check(cfg.image_size >= 2, || {
        format!("image_size {} must be at least 2", cfg.image_size)
    })?;
    check(cfg.in_channels >= 1, || "in_channels must be at least 1".into())?;
    check(cfg.k_fg >= 1 && cfg.k_fg < 255, || {
        format!("k_fg {} must lie in 1..=254", cfg.k_fg)
    })?;
    check(!cfg.widths.is_empty(), || "widths must not be empty".into())?;
    check(cfg.widths.iter().all(|&w| w > 0), || {
        "every width must be positive".into()
    })?;
    let stride = 1usize << (cfg.widths.len() - 1);
    check(cfg.image_size % stride == 0, || {
        format!(
            "image_size {} is not divisible by the network stride {stride}",
            cfg.image_size
        )
    })?;

    for (name, v) in [("alpha", cfg.alpha), ("beta", cfg.beta)] {
        check(v.is_finite() && v >= 0.0, || {
            format!("{name} = {v} must be finite and non-negative")
        })?;
    }
    check((0.0..=1.0).contains(&cfg.ema_lambda), || {
        format!("ema_lambda = {} must lie in [0, 1]", cfg.ema_lambda)
    })?;
    check(cfg.lr.is_finite() && cfg.lr > 0.0, || {
        format!("lr = {} must be positive", cfg.lr)
    })?;
    check((0.0..1.0).contains(&cfg.momentum), || {
        format!("momentum = {} must lie in [0, 1)", cfg.momentum)
    })?;
    check(cfg.weight_decay.is_finite() && cfg.weight_decay >= 0.0, || {
        format!("weight_decay = {} must be non-negative", cfg.weight_decay)
    })?;
    check(cfg.labeled_ratio > 0.0 && cfg.labeled_ratio <= 1.0, || {
        format!("labeled_ratio = {} must lie in (0, 1]", cfg.labeled_ratio)
    })?;

    check(!cfg.n_choices.is_empty(), || "n_choices must not be empty".into())?;
    let max_n = *cfg.n_choices.last().unwrap();
    check(cfg.n_choices[0] >= 1, || "grid sizes must be at least 1".into())?;
    check(cfg.image_size >= max_n, || {
        format!(
            "image_size {} is smaller than the largest grid size {max_n}",
            cfg.image_size
        )
    })?;
    if let Some(n) = cfg.fixed_n {
        check(n >= 1 && n <= cfg.image_size, || {
            format!("fixed_n = {n} must lie in 1..={}", cfg.image_size)
        })?;
        check(!cfg.disable_mms, || {
            "fixed_n requires the mixing strategy (conflicts with disable_mms)".into()
        })?;
    }

    check(cfg.canny_low >= 0.0 && cfg.canny_low < cfg.canny_high, || {
        format!(
            "canny thresholds need 0 <= low < high, got {} / {}",
            cfg.canny_low, cfg.canny_high
        )
    })?;
    check(cfg.gaussian_sigma >= 0.0, || "gaussian_sigma must be >= 0".into())?;
    check(cfg.dilation_radius >= 1, || "dilation_radius must be >= 1".into())?;
    check((0.0..=1.0).contains(&cfg.s1_confidence_threshold), || {
        "s1_confidence_threshold must lie in [0, 1]".into()
    })?;

    let removals = [cfg.disable_s1, cfg.disable_s2, cfg.disable_aux_sketch]
        .iter()
        .filter(|&&b| b)
        .count();
    check(removals <= 1, || {
        "disable_s1, disable_s2 and disable_aux_sketch are mutually exclusive".into()
    })?;
    check(!(cfg.disable_ers && removals > 0), || {
        "step removals have no effect when the reflection strategy is disabled".into()
    })?;
    check(!cfg.labeled_only || (cfg.disable_ers && cfg.disable_mms), || {
        "labeled_only training requires disable_ers and disable_mms".into()
    })?;
    check(cfg.val_interval > 0, || "val_interval must be positive".into())?;
    check(cfg.log_interval > 0, || "log_interval must be positive".into())?;

    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_constants() {
        let cfg = validate_config(TrainConfig::default()).unwrap();
        assert_eq!(cfg.alpha, 0.01);
        assert_eq!(cfg.beta, 0.01);
        assert_eq!(cfg.n_choices, vec![2, 3]);
        assert_eq!(cfg.image_size, 256);
        assert_eq!(cfg.k_tot(), cfg.k_fg + 1);
        // 4 or 9 puzzle patches
        let patches: Vec<usize> = cfg.n_choices.iter().map(|n| n * n).collect();
        assert_eq!(patches, vec![4, 9]);
    }

    #[test]
    fn rejects_out_of_range_fields() {
        let bad = [
            TrainConfig {
                ema_lambda: 1.5,
                ..Default::default()
            },
            TrainConfig {
                alpha: -0.1,
                ..Default::default()
            },
            TrainConfig {
                beta: f64::NAN,
                ..Default::default()
            },
            TrainConfig {
                n_choices: vec![],
                ..Default::default()
            },
            TrainConfig {
                image_size: 8,
                widths: vec![4],
                n_choices: vec![2, 16],
                ..Default::default()
            },
            TrainConfig {
                image_size: 100,
                ..Default::default()
            },
            TrainConfig {
                canny_low: 0.3,
                canny_high: 0.2,
                ..Default::default()
            },
            TrainConfig {
                disable_mms: true,
                fixed_n: Some(2),
                ..Default::default()
            },
            TrainConfig {
                disable_s1: true,
                disable_s2: true,
                ..Default::default()
            },
            TrainConfig {
                disable_ers: true,
                disable_aux_sketch: true,
                ..Default::default()
            },
            TrainConfig {
                labeled_only: true,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(validate_config(cfg.clone()).is_err(), "{cfg:?} accepted");
        }
    }

    #[test]
    fn normalizes_grid_choices() {
        let cfg = validate_config(TrainConfig {
            n_choices: vec![3, 2, 3],
            ..Default::default()
        })
        .unwrap();
        assert_eq!(cfg.n_choices, vec![2, 3]);
    }

    #[test]
    fn toml_roundtrip_is_exact() {
        let cfg = TrainConfig {
            lr: 0.1 + 0.2,
            ema_lambda: 0.995,
            fixed_n: Some(4),
            seed: u64::MAX >> 12,
            ..Default::default()
        };
        let text = cfg.to_toml_string().unwrap();
        let back = TrainConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.lr.to_bits(), cfg.lr.to_bits());
        assert_eq!(back.to_toml_string().unwrap(), text);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = TrainConfig::from_toml_str("alpha = 0.01\ngamma = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("gamma"));
    }

    #[test]
    fn missing_keys_take_defaults() {
        let cfg = TrainConfig::from_toml_str("seed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.alpha, 0.01);
    }
}
