use cyclepose_core::augment::AugmentConfig;
use cyclepose_core::{DeformConfig, EllipseConfig, PerlinConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::{DiscriminatorSpec, GeneratorSpec, SegmenterSpec};

/// Which loss families take part in training. Disabling `adv` also skips
/// both discriminator updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Terms {
    pub adv: bool,
    pub perlin: bool,
    pub m2i: bool,
    pub cyc: bool,
}

impl Default for Terms {
    fn default() -> Self {
        Self { adv: true, perlin: true, m2i: true, cyc: true }
    }
}

impl Terms {
    /// Switch off the comma-separated families in `list`
    /// (e.g. `"adv,perlin"`).
    pub fn ablate(mut self, list: &str) -> Result<Self> {
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "adv" => self.adv = false,
                "perlin" => self.perlin = false,
                "m2i" => self.m2i = false,
                "cyc" => self.cyc = false,
                other => {
                    return Err(Error::Config(format!(
                        "unknown loss family '{other}' (expected adv, perlin, m2i or cyc)"
                    )))
                }
            }
        }
        Ok(self)
    }

    pub fn any(&self) -> bool {
        self.adv || self.perlin || self.m2i || self.cyc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs_const: usize,
    pub epochs_decay: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub pool_size: usize,
    pub crop: usize,
    /// Save a checkpoint every this many epochs (and after the last one).
    pub checkpoint_every: usize,
    /// Compute in double precision (slow; meant for gradient checks).
    pub f64: bool,
    pub terms: Terms,
    pub weights: LossWeights,
    pub generator: GeneratorSpec,
    pub segmenter: SegmenterSpec,
    /// Shared by both discriminators; input channels are set per role.
    pub discriminator: DiscriminatorSpec,
    pub ellipse: EllipseConfig,
    pub deform: DeformConfig,
    pub perlin: PerlinConfig,
    /// Per-image Gaussian blur sigma range of the Perlin images.
    pub perlin_blur_range: (f64, f64),
    /// Replace the Perlin intensity ranges by ranges estimated from the
    /// (unlabeled) training images.
    pub fit_perlin_intensity: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs_const: 100,
            epochs_decay: 100,
            lr: 8e-4,
            weight_decay: 0.01,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            pool_size: 50,
            crop: 224,
            checkpoint_every: 5,
            f64: false,
            terms: Terms::default(),
            weights: LossWeights::default(),
            generator: GeneratorSpec::default(),
            segmenter: SegmenterSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            ellipse: EllipseConfig::default(),
            deform: DeformConfig::default(),
            perlin: PerlinConfig::default(),
            perlin_blur_range: (0.5, 1.5),
            fit_perlin_intensity: true,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.terms.any() {
            return Err(Error::Config(
                "all loss families are disabled; at least one of adv, perlin, m2i, cyc is required".into(),
            ));
        }
        if self.epochs_const + self.epochs_decay == 0 {
            return Err(Error::Config("training needs at least one epoch".into()));
        }
        for (name, v) in [("batch_size", self.batch_size), ("crop", self.crop), ("checkpoint_every", self.checkpoint_every)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        let (lo, hi) = self.perlin_blur_range;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(Error::Config("perlin_blur_range must satisfy 0 <= low <= high".into()));
        }
        let factor = self.segmenter.size_factor().max(4);
        if self.crop % factor != 0 {
            return Err(Error::Config(format!("crop {} must be a multiple of {factor}", self.crop)));
        }
        if self.augment.crop != self.crop {
            return Err(Error::Config(format!(
                "augment.crop ({}) must equal crop ({})",
                self.augment.crop, self.crop
            )));
        }
        self.weights.validate()?;
        self.ellipse_config().validate()?;
        self.deform.validate((self.crop, self.crop))?;
        self.perlin.validate()?;
        Ok(())
    }

    /// Ellipse sampling on a crop-sized canvas.
    pub fn ellipse_config(&self) -> EllipseConfig {
        EllipseConfig { canvas_size: (self.crop, self.crop), ..self.ellipse.clone() }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_const + self.epochs_decay
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self.lr, self.epochs_const, self.epochs_decay, epoch)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Constant `base` for the first `constant` epochs, then linear decay that
/// reaches zero after `decay` more epochs.
pub fn lr_at(base: f64, constant: usize, decay: usize, epoch: usize) -> f64 {
    if epoch < constant {
        return base;
    }
    if decay == 0 {
        return 0.0;
    }
    let remaining = (constant + decay).saturating_sub(epoch) as f64;
    base * (remaining / decay as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.0008);
        assert_eq!(c.lr_at(99), 0.0008);
        assert_eq!(c.lr_at(100), 0.0008);
        assert_eq!(c.lr_at(150), 0.0004);
        assert_eq!(c.lr_at(200), 0.0);
        assert_eq!(c.lr_at(250), 0.0);
    }

    #[test]
    fn all_terms_off_is_rejected() {
        let mut c = TrainConfig::default();
        c.terms = Terms::default().ablate("adv,perlin,m2i,cyc").unwrap();
        assert!(c.validate().is_err());
        c.terms.cyc = true;
        assert!(c.validate().is_ok());
        assert!(Terms::default().ablate("bogus").is_err());
    }

    #[test]
    fn defaults_validate_and_hash_is_stable() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.hash(), c.clone().hash());
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(c.hash(), d.hash());
    }
}
