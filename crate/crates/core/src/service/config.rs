use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{PromiseManager, ServiceError};
use crate::catalog::ResourceCatalog;

/// Environment variable naming the config file. Takes precedence over any
/// path given on the command line.
pub const CONFIG_ENV: &str = "PROMISE_MANAGER_CONFIG";

/// Service configuration, read from TOML:
///
/// ```toml
/// catalog = "catalog.toml"        # relative to this file
/// endpoint = "127.0.0.1:7411"
/// max-promise-duration = 3600
/// tick-millis = 1000
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ServiceConfig {
    pub catalog: PathBuf,
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
    #[serde(default = "default_max_duration")]
    pub max_promise_duration: u64,
    #[serde(default = "default_tick")]
    pub tick_millis: u64,
}

fn default_endpoint() -> String {
    "127.0.0.1:7411".into()
}

fn default_max_duration() -> u64 {
    3600
}

fn default_tick() -> u64 {
    1000
}

impl ServiceConfig {
    pub fn parse(text: &str) -> Result<Self, ServiceError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        if cfg.tick_millis == 0 {
            return Err(ServiceError::Config("tick-millis must be positive".into()));
        }
        Ok(cfg)
    }

    /// Reads a config file; a relative catalog path is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if cfg.catalog.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.catalog = dir.join(&cfg.catalog);
            }
        }
        Ok(cfg)
    }

    /// The config path to use: the environment variable if set, else
    /// `fallback`.
    pub fn resolve_path(fallback: Option<PathBuf>) -> Option<PathBuf> {
        std::env::var_os(CONFIG_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .or(fallback)
    }

    pub fn build_manager(&self) -> Result<PromiseManager, ServiceError> {
        let text = std::fs::read_to_string(&self.catalog)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", self.catalog.display())))?;
        let catalog = ResourceCatalog::load_catalog(&text)?;
        Ok(PromiseManager::with_standard_handlers(catalog, self.max_promise_duration))
    }
}
