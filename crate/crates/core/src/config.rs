//! Run configuration: one TOML document with every tunable constant.
//! Missing keys take their defaults, unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crane::CraneModel;
use crate::curriculum::CurriculumConfig;
use crate::env::{EnvConfig, EpisodeConfig, RewardConfig, RewardMode};
use crate::error::{config_err, Result};
use crate::eval::{default_suite, SuiteEntry};
use crate::ppo::PpoConfig;
use crate::world::{default_bunk, BunkBox, CollisionConfig, GraspConfig, LogConfig, PerturbationConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    pub suite: Vec<SuiteEntry>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            seed: 20_240_601,
            suite: default_suite(LogConfig::default().radius),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: RewardMode,
    pub seed: u64,
    /// Training budget in simulation steps.
    pub total_steps: u64,
    pub out_dir: String,
    pub crane: CraneModel,
    pub grasp: GraspConfig,
    pub collision: CollisionConfig,
    pub log: LogConfig,
    pub bunk: BunkBox,
    pub reward: RewardConfig,
    pub episode: EpisodeConfig,
    pub curriculum: CurriculumConfig,
    pub ppo: PpoConfig,
    /// Perturbations applied while training (identity by default).
    pub perturbation: PerturbationConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RewardMode::Plain,
            seed: 0,
            total_steps: 35_000_000,
            out_dir: "runs/default".into(),
            crane: CraneModel::default(),
            grasp: GraspConfig::default(),
            collision: CollisionConfig::default(),
            log: LogConfig::default(),
            bunk: default_bunk(),
            reward: RewardConfig::default(),
            episode: EpisodeConfig::default(),
            curriculum: CurriculumConfig::default(),
            ppo: PpoConfig::default(),
            perturbation: PerturbationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.crane.validate()?;
        self.curriculum.validate()?;
        self.ppo.validate()?;
        self.perturbation.validate()?;
        for e in &self.eval.suite {
            e.perturbation.validate()?;
        }
        self.crane.check_range(&self.episode.nominal_q)?;
        if self.episode.max_sim_steps == 0 {
            return Err(config_err("max_sim_steps must be positive"));
        }
        if !(0.0..0.5).contains(&self.episode.init_perturbation) {
            return Err(config_err("init_perturbation must lie in [0, 0.5)"));
        }
        if !(self.reward.energy_ref > 0.0 && self.reward.success_reward > 0.0) {
            return Err(config_err("energy_ref and success_reward must be positive"));
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            model: self.crane.clone(),
            grasp: self.grasp.clone(),
            collision: self.collision.clone(),
            log: self.log.clone(),
            bunk: self.bunk.clone(),
            reward: self.reward.clone(),
            reward_mode: self.mode,
            episode: self.episode.clone(),
            perturbation: self.perturbation.clone(),
        }
    }
}

/// Applies a `NAME=VALUE` override to a perturbation. Names are the
/// perturbation fields; `base_compliance` takes `true`/`false`.
pub fn apply_perturb_override(p: &mut PerturbationConfig, spec: &str) -> Result<()> {
    let (name, value) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("perturbation override {spec:?} is not NAME=VALUE")))?;
    let num = || {
        value
            .trim()
            .parse::<f64>()
            .map_err(|_| config_err(format!("perturbation {name}: {value:?} is not a number")))
    };
    match name.trim() {
        "position_noise_radius" => p.position_noise_radius = num()?,
        "heading_noise" => p.heading_noise = num()?,
        "mass_scale" => p.mass_scale = num()?,
        "slope_grade" => p.slope_grade = num()?,
        "base_compliance" => {
            p.base_compliance.enabled = value
                .trim()
                .parse::<bool>()
                .map_err(|_| config_err(format!("base_compliance: {value:?} is not true/false")))?
        }
        other => return Err(config_err(format!("unknown perturbation {other:?}"))),
    }
    p.validate()
}
