//! TOML run configuration. Every field has a default, so an empty file is a
//! valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stip_core::distill::DistillConfig;
use stip_core::embed::{AssembleOptions, CbowConfig, RepeatMode};
use stip_core::fusion::FusionConfig;
use stip_core::model::{StudentSpec, TeacherSpec};
use stip_core::optim::OptimizerConfig;
use stip_core::train::TrainConfig;

use crate::error::{Error, Result};
use crate::preprocess::VulnClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Repeat {
    #[default]
    Tile,
    Element,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Tokens kept per contract.
    pub n: usize,
    /// Repeat factor.
    pub k: usize,
    pub repeat: Repeat,
    pub pe_after_repeat: bool,
    pub min_count: u64,
    pub split_ratio: f64,
    /// Feed only annotated tokens to the networks.
    pub span_only: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n: 256,
            k: 2,
            repeat: Repeat::Tile,
            pe_after_repeat: false,
            min_count: 2,
            split_ratio: 0.8,
            span_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbowSection {
    /// Embedding width C.
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for CbowSection {
    fn default() -> Self {
        let c = CbowConfig::default();
        CbowSection {
            dim: c.dim,
            window: c.window,
            negatives: c.negatives,
            epochs: c.epochs,
            learning_rate: c.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub enabled: bool,
    pub numhead: usize,
    pub groups: usize,
    pub memory_slots: usize,
    pub memory_dim: Option<usize>,
    pub stages: usize,
    pub mb_expansion: usize,
    pub mlp_ratio: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        let f = FusionConfig::default();
        FusionSection {
            enabled: true,
            numhead: f.numhead,
            groups: f.groups,
            memory_slots: f.memory_slots,
            memory_dim: f.memory_dim,
            stages: f.stages,
            mb_expansion: f.mb_expansion,
            mlp_ratio: f.mlp_ratio,
        }
    }
}

impl FusionSection {
    pub fn to_core(&self) -> Option<FusionConfig> {
        self.enabled.then_some(FusionConfig {
            numhead: self.numhead,
            groups: self.groups,
            memory_slots: self.memory_slots,
            memory_dim: self.memory_dim,
            stages: self.stages,
            mb_expansion: self.mb_expansion,
            mlp_ratio: self.mlp_ratio,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub conv_filters: Vec<usize>,
    pub kernel: usize,
    pub bn_momentum: f64,
    pub tap_block: Option<usize>,
    pub fusion: FusionSection,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let t = TeacherSpec::new(1, 1);
        TeacherSection {
            conv_filters: t.conv_filters,
            kernel: t.kernel,
            bn_momentum: t.bn_momentum,
            tap_block: t.tap_block,
            fusion: FusionSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    pub conv_filters: [usize; 2],
    pub kernel: usize,
    pub psa_groups: usize,
    pub hidden: usize,
    pub bn_momentum: f64,
}

impl Default for StudentSection {
    fn default() -> Self {
        let s = StudentSpec::new(1, 1);
        StudentSection {
            conv_filters: s.conv_filters,
            kernel: s.kernel,
            psa_groups: s.psa_groups,
            hidden: s.hidden,
            bn_momentum: s.bn_momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.optimizer.learning_rate,
        }
    }
}

impl TrainSection {
    pub fn to_core(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            optimizer: OptimizerConfig::adam_amsgrad(self.learning_rate),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub mu: f64,
    pub sigma: f64,
    pub eta: f64,
    pub synth_steps: usize,
    pub temperature: f64,
    pub alpha: f64,
    pub batch: usize,
    pub steps: usize,
    pub refresh_every: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_backtracks: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            mu: d.mu,
            sigma: d.sigma,
            eta: d.eta,
            synth_steps: d.synth_steps,
            temperature: d.temperature,
            alpha: d.alpha,
            batch: d.batch,
            steps: d.steps,
            refresh_every: d.refresh_every,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            max_backtracks: d.max_backtracks,
        }
    }
}

impl DistillSection {
    pub fn to_core(&self) -> DistillConfig {
        DistillConfig {
            mu: self.mu,
            sigma: self.sigma,
            eta: self.eta,
            synth_steps: self.synth_steps,
            temperature: self.temperature,
            alpha: self.alpha,
            batch: self.batch,
            steps: self.steps,
            refresh_every: self.refresh_every,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            max_backtracks: self.max_backtracks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessSection {
    /// Class the teacher and student are trained to detect.
    pub class: VulnClass,
    /// Class used for the transfer experiment.
    pub transfer_class: VulnClass,
    pub transfer_epochs: usize,
    pub repeats: usize,
    /// Contracts per class generated by `synth-corpus` inside `run-all`.
    pub synthetic_count: usize,
    pub eval_batch: usize,
}

impl Default for HarnessSection {
    fn default() -> Self {
        HarnessSection {
            class: VulnClass::Reentrancy,
            transfer_class: VulnClass::Timestamp,
            transfer_epochs: 30,
            repeats: 5,
            synthetic_count: 400,
            eval_batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub precision: Precision,
    pub data: DataConfig,
    pub cbow: CbowSection,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub train: TrainSection,
    pub distill: DistillSection,
    pub harness: HarnessSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            e => e,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.data.n == 0 || self.data.k == 0 {
            return bad("data.n and data.k must be at least 1".into());
        }
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return bad(format!("data.split_ratio must lie in (0, 1), got {}", self.data.split_ratio));
        }
        if self.data.min_count == 0 {
            return bad("data.min_count must be at least 1".into());
        }
        if self.harness.repeats == 0 {
            return bad("harness.repeats must be at least 1".into());
        }
        if self.harness.class == self.harness.transfer_class {
            return bad("harness.transfer_class must differ from harness.class".into());
        }
        self.teacher_spec(0).validate()?;
        self.student_spec(0).validate()?;
        self.distill.to_core().validate()?;
        self.train.to_core(self.train.epochs, 0).optimizer.validate()?;
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.cbow.dim
    }

    pub fn seq_len(&self) -> usize {
        self.data.n * self.data.k
    }

    pub fn cbow_config(&self, seed: u64) -> CbowConfig {
        CbowConfig {
            dim: self.cbow.dim,
            window: self.cbow.window,
            negatives: self.cbow.negatives,
            epochs: self.cbow.epochs,
            learning_rate: self.cbow.learning_rate,
            seed,
        }
    }

    pub fn assemble_options(&self) -> AssembleOptions {
        AssembleOptions {
            n: self.data.n,
            k: self.data.k,
            repeat: match self.data.repeat {
                Repeat::Tile => RepeatMode::Tile,
                Repeat::Element => RepeatMode::Element,
            },
            pe_after_repeat: self.data.pe_after_repeat,
        }
    }

    pub fn teacher_spec(&self, seed: u64) -> TeacherSpec {
        let t = &self.teacher;
        TeacherSpec {
            seq_len: self.seq_len(),
            channels: self.channels(),
            fusion: t.fusion.to_core(),
            conv_filters: t.conv_filters.clone(),
            kernel: t.kernel,
            classes: 2,
            bn_momentum: t.bn_momentum,
            tap_block: t.tap_block,
            seed,
        }
    }

    pub fn student_spec(&self, seed: u64) -> StudentSpec {
        let s = &self.student;
        StudentSpec {
            seq_len: self.seq_len(),
            channels: self.channels(),
            conv_filters: s.conv_filters,
            kernel: s.kernel,
            psa_groups: s.psa_groups,
            hidden: s.hidden,
            classes: 2,
            bn_momentum: s.bn_momentum,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::parse("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!((c.data.n, c.data.k, c.cbow.dim), (256, 2, 300));
        assert_eq!(c.distill.alpha, 0.2);
        assert_eq!(c.train.learning_rate, 1e-3);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = Config::default();
        c.data.n = 48;
        c.precision = Precision::F64;
        c.teacher.fusion.memory_dim = Some(16);
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::parse("[data]\nsize = 3\n").is_err());
    }

    #[test]
    fn infeasible_shapes_are_rejected() {
        assert!(Config::parse("[data]\nn = 30\nk = 1\n").is_err());
    }
}
