//! Fixture directories: a recorded LLM script (`llm.json`) and recorded
//! StackExchange exchanges (`stackexchange.json`), replayable offline.

use std::path::Path;

use crate::llm_gateway::MockScript;
use crate::transport::{ExchangeLog, FixtureError};

pub const LLM_FIXTURE: &str = "llm.json";
pub const HTTP_FIXTURE: &str = "stackexchange.json";

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSet {
    pub llm: MockScript,
    pub http: ExchangeLog,
}

impl FixtureSet {
    /// Loads and validates both files.
    pub fn load(dir: &Path) -> Result<Self, FixtureError> {
        Ok(Self { llm: MockScript::load(&dir.join(LLM_FIXTURE))?, http: ExchangeLog::load(&dir.join(HTTP_FIXTURE))? })
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        self.llm.save(&dir.join(LLM_FIXTURE))?;
        self.http.save(&dir.join(HTTP_FIXTURE))
    }

    pub fn validate(&self) -> Result<(), String> {
        self.llm.validate()?;
        self.http.validate()
    }
}
