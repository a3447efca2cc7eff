//! Deployment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chat::DEFAULT_WINDOW_DAYS;
use crate::course::DEFAULT_EXCERPT_BUDGET;
use crate::gateway::GatewayConfig;
use crate::topic::DEFAULT_MAX_PROPOSALS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Mock,
    /// Any OpenAI-compatible chat completions endpoint.
    Openai,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub base_url: String,
    /// Script for the mock provider; without one it answers synthetically.
    pub mock_script: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            model: "gpt-4o-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            base_url: "https://api.openai.com/v1".into(),
            mock_script: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LoomConfig {
    pub data_dir: PathBuf,
    pub window_days: u32,
    pub max_proposals: usize,
    pub excerpt_budget: usize,
    /// Minimum spacing between pipeline runs triggered by new messages.
    pub debounce_minutes: i64,
    /// Learner's preferred session length. Shown to the UI only.
    pub session_length_minutes: u32,
    pub port: u16,
    pub learner_id: String,
    pub provider: ProviderConfig,
    pub gateway: GatewayConfig,
}

impl Default for LoomConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("loom-data"),
            window_days: DEFAULT_WINDOW_DAYS,
            max_proposals: DEFAULT_MAX_PROPOSALS,
            excerpt_budget: DEFAULT_EXCERPT_BUDGET,
            debounce_minutes: 5,
            session_length_minutes: 20,
            port: 8420,
            learner_id: "default".into(),
            provider: ProviderConfig::default(),
            gateway: GatewayConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl LoomConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: LoomConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.window_days == 0 {
            return Err(ConfigError::Invalid("window_days must be positive".into()));
        }
        if self.max_proposals == 0 {
            return Err(ConfigError::Invalid(
                "max_proposals must be positive".into(),
            ));
        }
        if self.gateway.inflight_limit == 0 {
            return Err(ConfigError::Invalid(
                "gateway.inflight_limit must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = LoomConfig::from_toml("").unwrap();
        assert_eq!(c.window_days, 10);
        assert_eq!(c.max_proposals, 3);
        assert_eq!(c.gateway.retry_budget, 2);
        assert_eq!(c.gateway.timeout_ms, 60_000);
        assert_eq!(c.gateway.inflight_limit, 4);
        assert_eq!(c.excerpt_budget, 2000);
        assert_eq!(c.provider.kind, ProviderKind::Mock);
    }

    #[test]
    fn overrides() {
        let c = LoomConfig::from_toml(
            r#"
            window_days = 7
            port = 9000
            [provider]
            kind = "openai"
            model = "local-model"
            base_url = "http://localhost:11434/v1"
            [gateway]
            retry_budget = 1
            busy_policy = "reject"
            "#,
        )
        .unwrap();
        assert_eq!(c.window_days, 7);
        assert_eq!(c.port, 9000);
        assert_eq!(c.provider.kind, ProviderKind::Openai);
        assert_eq!(c.gateway.retry_budget, 1);
        assert_eq!(c.gateway.timeout_ms, 60_000);
    }

    #[test]
    fn rejects_zero_window() {
        assert!(matches!(
            LoomConfig::from_toml("window_days = 0"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(LoomConfig::from_toml("window_days = \"ten\"").is_err());
    }
}
