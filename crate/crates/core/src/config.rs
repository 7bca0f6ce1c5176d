//! Run configuration, read from TOML. Every section is optional and falls
//! back to the defaults below; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GenConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::TemperatureParams;

/// Weights of the four terms in the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        if all.iter().all(|l| *l == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Which of the optional scales are trained. The global term is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleToggles {
    pub local: bool,
    pub instance: bool,
    pub modality: bool,
}

impl Default for ScaleToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl ScaleToggles {
    pub fn all() -> Self {
        Self {
            local: true,
            instance: true,
            modality: true,
        }
    }

    /// The seven non-empty combinations, singles first, full set last.
    pub fn ablation_rows() -> Vec<ScaleToggles> {
        let t = |local, instance, modality| ScaleToggles {
            local,
            instance,
            modality,
        };
        vec![
            t(true, false, false),
            t(false, true, false),
            t(false, false, true),
            t(true, true, false),
            t(true, false, true),
            t(false, true, true),
            t(true, true, true),
        ]
    }

    pub fn count(&self) -> usize {
        [self.local, self.instance, self.modality]
            .iter()
            .filter(|b| **b)
            .count()
    }

    pub fn label(&self) -> String {
        let mut parts = vec!["global"];
        if self.local {
            parts.push("local");
        }
        if self.instance {
            parts.push("instance");
        }
        if self.modality {
            parts.push("modality");
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossOptions {
    /// Average the image-anchored and report-anchored contrastive terms.
    pub symmetric: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { symmetric: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub image_ratio: f64,
    pub text_ratio: f64,
    /// Standardize each target patch before the squared error.
    pub norm_pix_target: bool,
    /// Regress encoder features of the unmasked pass instead of pixels.
    pub latent_targets: bool,
    pub decoder_depth: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            image_ratio: 0.75,
            text_ratio: 0.15,
            norm_pix_target: true,
            latent_targets: false,
            decoder_depth: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub model: EncoderConfig,
    pub weights: LossWeights,
    pub temperature: TemperatureParams,
    pub loss: LossOptions,
    pub scales: ScaleToggles,
    pub masking: MaskingConfig,
    pub optim: OptimConfig,
    pub data: GenConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 800,
            batch_size: 32,
            model: EncoderConfig::default(),
            weights: LossWeights::default(),
            temperature: TemperatureParams::default(),
            loss: LossOptions::default(),
            scales: ScaleToggles::default(),
            masking: MaskingConfig::default(),
            optim: OptimConfig::default(),
            data: GenConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.temperature.validate()?;
        self.data.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.scales.instance && self.batch_size < 2 {
            return Err(Error::Config("instance matching needs batch_size >= 2".into()));
        }
        for (name, r) in [("image_ratio", self.masking.image_ratio), ("text_ratio", self.masking.text_ratio)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {r}")));
            }
        }
        let p = self.model.num_patches();
        let masked = crate::losses::modality::masked_count(p, self.masking.image_ratio);
        if masked == 0 || masked == p {
            return Err(Error::Config(format!("image_ratio masks {masked} of {p} patches")));
        }
        if self.data.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "data.image_size {} differs from model.image_size {}",
                self.data.image_size, self.model.image_size
            )));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let s = cfg.to_toml_string().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&s).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = TrainConfig::from_toml_str("steps = 5\n[scales]\nlocal = false\n").unwrap();
        assert_eq!(cfg.steps, 5);
        assert!(!cfg.scales.local && cfg.scales.instance);
        assert_eq!(cfg.model, EncoderConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(TrainConfig::from_toml_str("stepz = 5").is_err());
        assert!(TrainConfig::from_toml_str("[model]\nwidth = 5").is_err());
        assert!(TrainConfig::from_toml_str("[nonsense]\n").is_err());
    }

    #[test]
    fn invariants_enforced() {
        assert!(TrainConfig::from_toml_str("batch_size = 1").is_err());
        assert!(TrainConfig::from_toml_str("batch_size = 1\n[scales]\ninstance = false").is_ok());
        assert!(TrainConfig::from_toml_str("[weights]\nlambda1 = 0\nlambda2 = 0\nlambda3 = 0\nlambda4 = 0").is_err());
        assert!(TrainConfig::from_toml_str("[weights]\nlambda2 = -1").is_err());
        assert!(TrainConfig::from_toml_str("[temperature]\ntau1 = 0").is_err());
        assert!(TrainConfig::from_toml_str("[data]\nimage_size = 32").is_err());
    }

    #[test]
    fn seven_ablation_rows() {
        let rows = ScaleToggles::ablation_rows();
        assert_eq!(rows.len(), 7);
        let set: std::collections::HashSet<_> = rows.iter().collect();
        assert_eq!(set.len(), 7);
        assert!(rows.iter().all(|r| r.count() >= 1));
        assert_eq!(rows.last().unwrap(), &ScaleToggles::all());
    }
}
