//! Settings resolution: command-line flags, then environment, then
//! `<data-dir>/config.toml`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;
use stackrag::llm_gateway::{self, DEFAULT_CHAT_MODEL, DEFAULT_EMBEDDING_DIMENSION, DEFAULT_EMBEDDING_MODEL};
use stackrag::orchestrator::SessionConfig;
use stackrag::stackexchange;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub llm_api_key: Option<String>,
    pub llm_base_url: Option<String>,
    pub chat_model: Option<String>,
    pub embedding_model: Option<String>,
    pub embedding_dimension: Option<usize>,
    pub stackexchange_key: Option<String>,
    pub stackexchange_base_url: Option<String>,
    pub session: Option<SessionConfig>,
}

impl FileConfig {
    pub fn load(data_dir: &Path) -> anyhow::Result<Self> {
        let path = data_dir.join(CONFIG_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => toml::from_str(&text).with_context(|| format!("invalid {}", path.display())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e).with_context(|| format!("cannot read {}", path.display())),
        }
    }
}

/// Values given on the command line.
#[derive(Debug, Default)]
pub struct FlagOverrides {
    pub max_iterations: Option<usize>,
    pub mmr_lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub data_dir: PathBuf,
    pub llm_api_key: Option<String>,
    pub llm_base_url: String,
    pub chat_model: String,
    pub embedding_model: String,
    pub embedding_dimension: usize,
    pub stackexchange_key: Option<String>,
    pub stackexchange_base_url: String,
    pub session: SessionConfig,
}

impl Settings {
    pub fn resolve(
        data_dir: PathBuf,
        flags: &FlagOverrides,
        env: impl Fn(&str) -> Option<String>,
        file: FileConfig,
    ) -> anyhow::Result<Self> {
        let env = |name: &str| env(name).filter(|v| !v.trim().is_empty());
        let mut session = file.session.unwrap_or_default();
        if let Some(n) = flags.max_iterations {
            session.max_loop_iterations = n;
        }
        if let Some(l) = flags.mmr_lambda {
            session.mmr_lambda = l;
        }
        session.validate()?;
        Ok(Self {
            data_dir,
            llm_api_key: env(llm_gateway::API_KEY_ENV).or(file.llm_api_key),
            llm_base_url: env(llm_gateway::BASE_URL_ENV)
                .or(file.llm_base_url)
                .unwrap_or_else(|| llm_gateway::DEFAULT_BASE_URL.into()),
            chat_model: file.chat_model.unwrap_or_else(|| DEFAULT_CHAT_MODEL.into()),
            embedding_model: file.embedding_model.unwrap_or_else(|| DEFAULT_EMBEDDING_MODEL.into()),
            embedding_dimension: file.embedding_dimension.unwrap_or(DEFAULT_EMBEDDING_DIMENSION),
            stackexchange_key: env(stackexchange::KEY_ENV).or(file.stackexchange_key),
            stackexchange_base_url: env(stackexchange::BASE_URL_ENV)
                .or(file.stackexchange_base_url)
                .unwrap_or_else(|| stackexchange::DEFAULT_BASE_URL.into()),
            session,
        })
    }

    pub fn require_llm_key(&self) -> anyhow::Result<&str> {
        self.llm_api_key.as_deref().with_context(|| {
            format!(
                "no LLM API key: set {} or llm_api_key in {}",
                llm_gateway::API_KEY_ENV,
                self.data_dir.join(CONFIG_FILE).display()
            )
        })
    }
}

pub fn default_data_dir() -> PathBuf {
    match std::env::var_os("HOME") {
        Some(home) if !home.is_empty() => PathBuf::from(home).join(".stackrag"),
        _ => PathBuf::from(".stackrag"),
    }
}
