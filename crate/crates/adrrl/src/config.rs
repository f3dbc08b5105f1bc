//! Run configuration: TOML file with strict key checking, plus environment
//! variable overrides prefixed `ADRRL_` (section and field joined by an
//! underscore, e.g. `ADRRL_GUIDANCE_ALPHA=0.05`).

use crate::env::{EnvKind, EnvParams};
use crate::guidance::GuidanceConfig;
use crate::policy::A2CConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(String),
    #[error("invalid value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub kind: String,
    pub mass: f64,
    pub friction: f64,
    pub gravity: f64,
    pub dt: f64,
    pub episode_horizon: usize,
    /// Trajectory window length L.
    pub window: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        let p = EnvParams::default();
        Self {
            kind: "point_mass_1d".into(),
            mass: p.mass,
            friction: p.friction,
            gravity: p.gravity,
            dt: p.dt,
            episode_horizon: p.episode_horizon,
            window: 10,
        }
    }
}

impl EnvSection {
    pub fn env_kind(&self) -> Result<EnvKind, ConfigError> {
        self.kind
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("{e}")))
    }

    pub fn env_params(&self) -> EnvParams {
        EnvParams {
            mass: self.mass,
            friction: self.friction,
            gravity: self.gravity,
            dt: self.dt,
            episode_horizon: self.episode_horizon,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub n_steps: usize,
    pub hidden: usize,
    pub layers: usize,
    pub lr: f64,
    pub batch: usize,
    pub embed_dim: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            n_steps: 50,
            hidden: 1024,
            layers: 6,
            lr: 3e-4,
            batch: 256,
            embed_dim: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub alpha: f64,
    pub action_scale: f64,
    pub enabled: bool,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            action_scale: 1.0,
            enabled: true,
        }
    }
}

impl GuidanceSection {
    pub fn guidance_config(&self) -> Result<GuidanceConfig, ConfigError> {
        let mut cfg = GuidanceConfig::new(self.alpha)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.enabled = self.enabled;
        cfg.action_scale = self.action_scale;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReturnModelSection {
    pub lr: f64,
    pub iterations: usize,
}

impl Default for ReturnModelSection {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            iterations: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct A2CSection {
    pub gae_lambda: f64,
    pub gamma: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub entropy_weight: f64,
    pub batch: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for A2CSection {
    fn default() -> Self {
        let c = A2CConfig::default();
        Self {
            gae_lambda: c.gae_lambda,
            gamma: c.gamma,
            critic_lr: c.critic_lr,
            actor_lr: c.actor_lr,
            entropy_weight: c.entropy_weight,
            batch: c.batch,
            hidden: 64,
            layers: 2,
        }
    }
}

impl A2CSection {
    pub fn a2c_config(&self) -> A2CConfig {
        A2CConfig {
            gae_lambda: self.gae_lambda,
            gamma: self.gamma,
            critic_lr: self.critic_lr,
            actor_lr: self.actor_lr,
            entropy_weight: self.entropy_weight,
            batch: self.batch,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Outer training iterations M.
    pub m_iterations: usize,
    /// World-model updates per outer iteration K.
    pub k_iterations: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub buffer_capacity: usize,
    /// Adversarial trajectories generated per outer iteration.
    pub synthetic_batch: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            m_iterations: 200,
            k_iterations: 100,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            buffer_capacity: 10_000,
            synthetic_batch: 64,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvSection,
    pub diffusion: DiffusionSection,
    pub guidance: GuidanceSection,
    pub return_model: ReturnModelSection,
    pub a2c: A2CSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_str_with_env(
        text: &str,
        env_vars: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        apply_env_overrides(&mut value, env_vars)?;
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let env_vars: Vec<(String, String)> = std::env::vars().collect();
        Self::from_str_with_env(&text, &env_vars)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.env_kind()?;
        self.env
            .env_params()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.env.window == 0 || self.env.window > self.env.episode_horizon {
            return Err(ConfigError::Invalid(format!(
                "window {} must be in [1, episode_horizon]",
                self.env.window
            )));
        }
        if self.diffusion.n_steps < 2 {
            return Err(ConfigError::Invalid("diffusion.n_steps must be >= 2".into()));
        }
        if !(self.guidance.alpha > 0.0 && self.guidance.alpha <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "guidance.alpha {} outside (0, 1]",
                self.guidance.alpha
            )));
        }
        for (name, v) in [
            ("a2c.gae_lambda", self.a2c.gae_lambda),
            ("a2c.gamma", self.a2c.gamma),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ConfigError::Invalid(format!("{name} {v} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

const SECTIONS: [&str; 6] = ["env", "diffusion", "guidance", "return_model", "a2c", "run"];

/// Applies `ADRRL_<SECTION>_<FIELD>=value` overrides onto the parsed TOML
/// tree. Section names are matched longest-first so fields of
/// `return_model` parse unambiguously.
fn apply_env_overrides(
    value: &mut toml::Value,
    env_vars: &[(String, String)],
) -> Result<(), ConfigError> {
    for (key, raw) in env_vars {
        let Some(rest) = key.strip_prefix("ADRRL_") else {
            continue;
        };
        let lower = rest.to_ascii_lowercase();
        let mut sections: Vec<&str> = SECTIONS.to_vec();
        sections.sort_by_key(|s| std::cmp::Reverse(s.len()));
        let Some((section, field)) = sections.iter().find_map(|s| {
            lower
                .strip_prefix(&format!("{s}_"))
                .map(|field| (*s, field.to_string()))
        }) else {
            return Err(ConfigError::Invalid(format!(
                "unrecognized override variable {key}"
            )));
        };
        let table = value
            .as_table_mut()
            .ok_or_else(|| ConfigError::Parse("top level is not a table".into()))?
            .entry(section)
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::Parse(format!("section {section} is not a table")))?;
        table.insert(field, parse_scalar(raw));
    }
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else {
        toml::Value::String(raw.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::from_str_with_env("", &[]).unwrap();
        assert_eq!(cfg.diffusion.n_steps, 50);
        assert_eq!(cfg.diffusion.hidden, 1024);
        assert_eq!(cfg.diffusion.layers, 6);
        assert_eq!(cfg.diffusion.batch, 256);
        assert_eq!(cfg.diffusion.embed_dim, 128);
        assert!((cfg.diffusion.lr - 3e-4).abs() < 1e-18);
        assert!((cfg.guidance.alpha - 0.1).abs() < 1e-18);
        assert_eq!(cfg.a2c.batch, 512);
        assert!((cfg.a2c.gae_lambda - 0.9).abs() < 1e-18);
        assert!((cfg.a2c.actor_lr - 3e-5).abs() < 1e-18);
        assert!((cfg.a2c.critic_lr - 3e-4).abs() < 1e-18);
        assert!((cfg.a2c.entropy_weight - 1e-5).abs() < 1e-18);
        assert_eq!(cfg.env.window, 10);
    }

    #[test]
    fn parses_sections() {
        let text = r#"
            [env]
            kind = "pendulum"
            mass = 2.0

            [guidance]
            alpha = 0.25
            enabled = false

            [run]
            seed = 7
            m_iterations = 3
        "#;
        let cfg = RunConfig::from_str_with_env(text, &[]).unwrap();
        assert_eq!(cfg.env.env_kind().unwrap(), EnvKind::Pendulum);
        assert_eq!(cfg.env.mass, 2.0);
        assert_eq!(cfg.guidance.alpha, 0.25);
        assert!(!cfg.guidance.enabled);
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.run.m_iterations, 3);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_str_with_env("[diffusion]\nn_step = 10\n", &[]);
        assert!(matches!(err, Err(ConfigError::Parse(_))));
        let err = RunConfig::from_str_with_env("[mystery]\nx = 1\n", &[]);
        assert!(matches!(err, Err(ConfigError::Parse(_))));
    }

    #[test]
    fn env_overrides_apply() {
        let vars = vec![
            ("ADRRL_GUIDANCE_ALPHA".to_string(), "0.05".to_string()),
            ("ADRRL_RETURN_MODEL_LR".to_string(), "0.001".to_string()),
            ("ADRRL_RUN_SEED".to_string(), "99".to_string()),
            ("ADRRL_GUIDANCE_ENABLED".to_string(), "false".to_string()),
            ("UNRELATED".to_string(), "zzz".to_string()),
        ];
        let cfg = RunConfig::from_str_with_env("[guidance]\nalpha = 0.5\n", &vars).unwrap();
        assert_eq!(cfg.guidance.alpha, 0.05);
        assert_eq!(cfg.return_model.lr, 0.001);
        assert_eq!(cfg.run.seed, 99);
        assert!(!cfg.guidance.enabled);
    }

    #[test]
    fn bad_override_and_values_rejected() {
        let vars = vec![("ADRRL_BOGUS_KEY".to_string(), "1".to_string())];
        assert!(RunConfig::from_str_with_env("", &vars).is_err());
        assert!(RunConfig::from_str_with_env("[guidance]\nalpha = 1.5\n", &[]).is_err());
        assert!(RunConfig::from_str_with_env("[env]\nkind = \"mars_rover\"\n", &[]).is_err());
        assert!(RunConfig::from_str_with_env("[env]\nwindow = 0\n", &[]).is_err());
    }
}
