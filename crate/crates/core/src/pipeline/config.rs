//! Run configuration: a TOML document with `[filter]`, `[optimizer]`,
//! `[pipeline]`, `[model]`, `[data]` and `[synthetic]` sections. Every key
//! is optional and defaults to the values below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{BaseAugment, Magnitude, OpKind, OrderMode};
use crate::error::{Error, Result};
use crate::filter::{FilterConfig, InitMode};
use crate::nn::OptimizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Velocity {
    Uniform(f64),
    PerOp(Vec<f64>),
}

impl Default for Velocity {
    fn default() -> Self {
        Velocity::Uniform(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub particles: usize,
    pub sigma: f64,
    pub velocity: Velocity,
    pub eta: f64,
    pub alpha: f64,
    pub sparse_init_count: usize,
    pub init_value: f64,
    pub init_mode: InitMode,
}

impl Default for FilterSection {
    fn default() -> Self {
        let d = FilterConfig::default();
        FilterSection {
            particles: d.particle_count,
            sigma: d.process_noise_sigma,
            velocity: Velocity::default(),
            eta: d.update_rate,
            alpha: d.resample_fraction,
            sparse_init_count: d.sparse_init_count,
            init_value: d.init_value,
            init_mode: d.init_mode,
        }
    }
}

impl FilterSection {
    pub fn to_filter_config(&self, seed: u64) -> Result<FilterConfig> {
        let n = OpKind::COUNT;
        let velocity = match &self.velocity {
            Velocity::Uniform(c) => vec![*c; n],
            Velocity::PerOp(v) => v.clone(),
        };
        let cfg = FilterConfig {
            particle_count: self.particles,
            state_dim: n,
            process_noise_sigma: self.sigma,
            velocity,
            update_rate: self.eta,
            resample_fraction: self.alpha,
            sparse_init_count: self.sparse_init_count,
            init_value: self.init_value,
            init_mode: self.init_mode,
            rng_seed: seed,
        };
        cfg.validate().map_err(|e| match e {
            Error::Config { key, reason } => Error::config(format!("filter.{key}"), reason),
            other => other,
        })?;
        Ok(cfg)
    }
}

/// When the filter-training subset is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Resplit {
    /// A fresh stratified subset at every filter step.
    #[default]
    PerStep,
    /// One subset drawn before the first filter step and reused.
    Once,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub epochs: usize,
    pub filter_interval: usize,
    pub warmup_epochs: usize,
    pub prediction_epochs: usize,
    pub tp_fraction: f64,
    pub vp_size: usize,
    pub magnitude: Magnitude,
    pub order: OrderMode,
    /// Train with a fixed policy and never run the filter.
    pub baseline: bool,
    /// The fixed policy used in baseline mode; all zeros when absent.
    pub baseline_policy: Option<Vec<f64>>,
    pub d0_epsilon: f64,
    pub tp_resplit: Resplit,
    pub vp_resplit: Resplit,
    /// Draw the measurement subset from outside the filter-training subset.
    pub vp_disjoint: bool,
    pub base_augment: BaseAugment,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            epochs: 10,
            filter_interval: 1,
            warmup_epochs: 1,
            prediction_epochs: 1,
            tp_fraction: 0.5,
            vp_size: 512,
            magnitude: Magnitude::new(3).expect("in range"),
            order: OrderMode::Fixed,
            baseline: false,
            baseline_policy: None,
            d0_epsilon: 1e-6,
            tp_resplit: Resplit::PerStep,
            vp_resplit: Resplit::PerStep,
            vp_disjoint: false,
            base_augment: BaseAugment::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub conv_filters: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: 64,
            conv_filters: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    /// Generated digit glyphs; no files needed.
    #[default]
    Synthetic,
    /// A `path,label` CSV of PNG files.
    Manifest,
    /// CIFAR-10 binary batches.
    Cifar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    pub path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub samples: usize,
    pub val_samples: usize,
    pub classes: usize,
    pub image_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DataKind::Synthetic,
            path: None,
            val_path: None,
            samples: 2000,
            val_samples: 500,
            classes: 10,
            image_size: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub steps: usize,
    pub gamma: f64,
    /// Hidden target policy; every entry 0.5 when absent.
    pub target: Option<Vec<f64>>,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            steps: 200,
            gamma: 0.5,
            target: None,
        }
    }
}

impl SyntheticSection {
    pub fn target(&self, dim: usize) -> Vec<f64> {
        self.target.clone().unwrap_or_else(|| vec![0.5; dim])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: usize,
    pub filter: FilterSection,
    pub optimizer: OptimizerConfig,
    pub pipeline: PipelineSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub synthetic: SyntheticSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            threads: 1,
            filter: FilterSection::default(),
            optimizer: OptimizerConfig::default(),
            pipeline: PipelineSection::default(),
            model: ModelSection::default(),
            data: DataSection::default(),
            synthetic: SyntheticSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".to_string());
            Error::config(key, e.to_string().trim().replace('\n', " "))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // Data paths in a config file are relative to the file.
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.data.path, &mut cfg.data.val_path].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    pub fn filter_config(&self) -> Result<FilterConfig> {
        self.filter.to_filter_config(self.seed)
    }

    pub fn baseline_policy(&self) -> Vec<f64> {
        self.pipeline
            .baseline_policy
            .clone()
            .unwrap_or_else(|| vec![0.0; OpKind::COUNT])
    }

    pub fn validate(&self) -> Result<()> {
        self.filter_config()?;
        self.optimizer.validate()?;
        let p = &self.pipeline;
        if p.epochs == 0 {
            return Err(Error::config("pipeline.epochs", "must be at least 1"));
        }
        if p.filter_interval == 0 {
            return Err(Error::config("pipeline.filter_interval", "must be at least 1"));
        }
        if p.prediction_epochs == 0 {
            return Err(Error::config("pipeline.prediction_epochs", "must be at least 1"));
        }
        if !(p.tp_fraction > 0.0 && p.tp_fraction < 1.0) {
            return Err(Error::config("pipeline.tp_fraction", "must lie in (0, 1)"));
        }
        if p.vp_size == 0 {
            return Err(Error::config("pipeline.vp_size", "must be at least 1"));
        }
        if !(p.d0_epsilon >= 0.0 && p.d0_epsilon.is_finite()) {
            return Err(Error::config("pipeline.d0_epsilon", "must be finite and nonnegative"));
        }
        if let Some(policy) = &p.baseline_policy {
            if policy.len() != OpKind::COUNT || policy.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::config(
                    "pipeline.baseline_policy",
                    format!("needs {} probabilities in [0, 1]", OpKind::COUNT),
                ));
            }
        }
        if self.threads == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        let d = &self.data;
        if d.kind != DataKind::Synthetic && d.path.is_none() {
            return Err(Error::config("data.path", "required for manifest and cifar data"));
        }
        if d.kind == DataKind::Synthetic {
            if !(2..=10).contains(&d.classes) {
                return Err(Error::config("data.classes", "synthetic data supports 2 to 10 classes"));
            }
            if d.image_size < 7 {
                return Err(Error::config(
                    "data.image_size",
                    "synthetic images need a side of at least 7",
                ));
            }
            if d.samples < d.classes {
                return Err(Error::config("data.samples", "need at least one sample per class"));
            }
        }
        let s = &self.synthetic;
        if !(s.gamma.is_finite()) {
            return Err(Error::config("synthetic.gamma", "must be finite"));
        }
        if let Some(t) = &s.target {
            if t.len() != OpKind::COUNT || t.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::config(
                    "synthetic.target",
                    format!("needs {} entries in [0, 1]", OpKind::COUNT),
                ));
            }
        }
        Ok(())
    }

    /// Epoch numbers (1-based) preceded by a filter step.
    ///
    /// The first step follows the warm-up epochs, further steps follow every
    /// `filter_interval` epochs, and a step only runs when a full interval of
    /// reference training remains to use its particles. The count is
    /// `floor((epochs - warmup) / interval)`.
    pub fn filter_epochs(&self) -> Vec<usize> {
        let p = &self.pipeline;
        if p.baseline || p.filter_interval == 0 {
            return Vec::new();
        }
        (1..=p.epochs)
            .filter(|&e| {
                let boundary = e - 1;
                boundary >= p.warmup_epochs
                    && (boundary - p.warmup_epochs).is_multiple_of(p.filter_interval)
                    && boundary + p.filter_interval <= p.epochs
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.filter.particles, 50);
        assert_eq!(cfg.filter.sigma, 0.05);
        assert_eq!(cfg.filter.eta, 1.0);
        assert_eq!(cfg.pipeline.prediction_epochs, 1);
        assert_eq!(cfg.pipeline.filter_interval, 1);
        assert_eq!(cfg.pipeline.warmup_epochs, 1);
        assert_eq!(cfg.pipeline.vp_size, 512);
        assert_eq!(cfg.pipeline.tp_fraction, 0.5);
        assert_eq!(cfg.optimizer.learning_rate, 0.1);
        assert_eq!(cfg.optimizer.weight_decay, 5e-4);
        assert_eq!(cfg.optimizer.batch_size, 128);
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.filter.velocity = Velocity::Uniform(-0.001);
        cfg.pipeline.baseline_policy = Some(vec![0.1; 15]);
        let text = cfg.to_toml_string();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg =
            PipelineConfig::from_toml_str("seed = 7\n[filter]\neta = 0.25\n[pipeline]\norder = \"random\"\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.filter.eta, 0.25);
        assert_eq!(cfg.filter.particles, 50);
        assert_eq!(cfg.pipeline.order, OrderMode::Random);
    }

    #[test]
    fn errors_name_the_key() {
        let err = PipelineConfig::from_toml_str("[filter]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = PipelineConfig::from_toml_str("[pipeline]\nmagnitude = 11\n").unwrap_err();
        assert!(err.to_string().contains("magnitude"), "{err}");

        let mut cfg = PipelineConfig::default();
        cfg.pipeline.epochs = 0;
        assert!(cfg.validate().unwrap_err().to_string().contains("pipeline.epochs"));
        let mut cfg = PipelineConfig::default();
        cfg.filter.alpha = 2.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("filter.alpha"));
    }

    #[test]
    fn filter_schedule() {
        let mut cfg = PipelineConfig::default();
        assert_eq!(cfg.filter_epochs(), (2..=10).collect::<Vec<_>>());
        for (epochs, warmup, interval) in [(10, 1, 2), (10, 0, 3), (7, 2, 1), (5, 5, 1), (3, 1, 5)] {
            cfg.pipeline.epochs = epochs;
            cfg.pipeline.warmup_epochs = warmup;
            cfg.pipeline.filter_interval = interval;
            let expected = epochs.saturating_sub(warmup) / interval;
            assert_eq!(cfg.filter_epochs().len(), expected, "{epochs} {warmup} {interval}");
        }
        cfg.pipeline.baseline = true;
        assert!(cfg.filter_epochs().is_empty());
    }
}
