//! Service settings: built-in defaults, then `ISKG_*` environment
//! variables, then the TOML config file, then command-line flags.

use std::path::{Path, PathBuf};

use iskg_core::apps::SlotKeywords;
use serde::Deserialize;
use thiserror::Error;

pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";
pub const DEFAULT_BODY_LIMIT: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config file: {0}")]
    Toml(#[from] toml::de::Error),
}

/// Keys accepted in the config file. All are optional.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub addr: Option<String>,
    pub model: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
    pub body_limit: Option<usize>,
    /// Start from the built-in demo graph when no graph file exists yet.
    pub demo: Option<bool>,
    /// Extra question keywords per answer slot.
    pub keywords: Option<SlotKeywords>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    pub addr: String,
    /// Checkpoint base path for the extraction model.
    pub model: Option<PathBuf>,
    /// Graph JSON snapshot; loaded at startup and rewritten after ingest.
    pub graph: Option<PathBuf>,
    /// Directory of static UI assets served for unmatched GET paths.
    pub static_dir: Option<PathBuf>,
    pub body_limit: usize,
    pub demo: bool,
    pub keywords: SlotKeywords,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: DEFAULT_ADDR.to_string(),
            model: None,
            graph: None,
            static_dir: None,
            body_limit: DEFAULT_BODY_LIMIT,
            demo: false,
            keywords: SlotKeywords::default(),
        }
    }
}

impl ServiceConfig {
    /// Layers `ISKG_ADDR`, `ISKG_MODEL`, `ISKG_GRAPH` and `ISKG_STATIC`
    /// (read through `env`) and then `file` over the defaults.
    pub fn resolve(env: impl Fn(&str) -> Option<String>, file: Option<&FileConfig>) -> Self {
        let mut c = Self::default();
        let env = |k: &str| env(k).filter(|v| !v.is_empty());
        if let Some(v) = env("ISKG_ADDR") {
            c.addr = v;
        }
        if let Some(v) = env("ISKG_MODEL") {
            c.model = Some(v.into());
        }
        if let Some(v) = env("ISKG_GRAPH") {
            c.graph = Some(v.into());
        }
        if let Some(v) = env("ISKG_STATIC") {
            c.static_dir = Some(v.into());
        }
        if let Some(f) = file {
            if let Some(v) = &f.addr {
                c.addr = v.clone();
            }
            if f.model.is_some() {
                c.model = f.model.clone();
            }
            if f.graph.is_some() {
                c.graph = f.graph.clone();
            }
            if f.static_dir.is_some() {
                c.static_dir = f.static_dir.clone();
            }
            if let Some(v) = f.body_limit {
                c.body_limit = v;
            }
            if let Some(v) = f.demo {
                c.demo = v;
            }
            if let Some(k) = &f.keywords {
                c.keywords.extend(k);
            }
        }
        c
    }

    /// [`Self::resolve`] against the process environment and an optional
    /// config file on disk.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                Some(toml::from_str::<FileConfig>(&text)?)
            }
            None => None,
        };
        Ok(Self::resolve(|k| std::env::var(k).ok(), file.as_ref()))
    }
}
