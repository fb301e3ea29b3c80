//! Layered settings: built-in defaults, then a TOML file, then environment
//! and command-line values. Per-request overrides apply on top at query time.

use std::path::{Path, PathBuf};

use anyhow::Context;
use neurorag_core::corpus::ChunkConfig;
use neurorag_core::engine::{EnricherSpec, TrainHyper};
use neurorag_core::types::{ConfigOverrides, RetrievalConfig};
use serde::{Deserialize, Serialize};

pub const ENV_PORT: &str = "NEURORAG_PORT";
pub const ENV_DATA_DIR: &str = "NEURORAG_DATA_DIR";
pub const ENV_CONFIG: &str = "NEURORAG_CONFIG";
pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_BIND: &str = "127.0.0.1";

/// Contents of a config file. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub bind: Option<String>,
    pub port: Option<u16>,
    pub retrieval: ConfigOverrides,
    pub enricher: Option<EnricherSpec>,
    pub training: Option<TrainHyper>,
    pub chunking: Option<ChunkConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    /// Absent means the bundled demo data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub bind: String,
    pub port: u16,
    pub retrieval: RetrievalConfig,
    pub enricher: EnricherSpec,
    pub training: TrainHyper,
    pub chunking: ChunkConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            data_dir: None,
            bind: DEFAULT_BIND.to_string(),
            port: DEFAULT_PORT,
            retrieval: RetrievalConfig::default(),
            enricher: EnricherSpec::default(),
            training: TrainHyper::default(),
            chunking: ChunkConfig::default(),
        }
    }
}

/// Values supplied on the command line or through the environment.
#[derive(Debug, Clone, Default)]
pub struct Explicit {
    pub data_dir: Option<PathBuf>,
    pub port: Option<u16>,
}

impl Explicit {
    /// Reads the environment; `cli` values win over it.
    pub fn from_env(cli: Explicit) -> anyhow::Result<Self> {
        let port = match (cli.port, std::env::var(ENV_PORT).ok()) {
            (Some(p), _) => Some(p),
            (None, Some(v)) => Some(v.parse().with_context(|| format!("{ENV_PORT}={v} is not a port"))?),
            (None, None) => None,
        };
        Ok(Explicit {
            data_dir: cli.data_dir.or_else(|| std::env::var_os(ENV_DATA_DIR).map(PathBuf::from)),
            port,
        })
    }
}

impl Settings {
    pub fn resolve(file: FileConfig, explicit: Explicit) -> anyhow::Result<Self> {
        let d = Settings::default();
        let retrieval = d.retrieval.with_overrides(&file.retrieval)?;
        let chunking = file.chunking.unwrap_or(d.chunking);
        chunking.validate()?;
        Ok(Settings {
            data_dir: explicit.data_dir.or(file.data_dir),
            bind: file.bind.unwrap_or(d.bind),
            port: explicit.port.or(file.port).unwrap_or(d.port),
            retrieval,
            enricher: file.enricher.unwrap_or(d.enricher),
            training: file.training.unwrap_or(d.training),
            chunking,
        })
    }

    /// Loads `config` (or the file named by the environment) and applies
    /// explicit values.
    pub fn load(config: Option<&Path>, cli: Explicit) -> anyhow::Result<Self> {
        let path = config
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(ENV_CONFIG).map(PathBuf::from));
        let file = match path {
            Some(p) => FileConfig::load(&p)?,
            None => FileConfig::default(),
        };
        Self::resolve(file, Explicit::from_env(cli)?)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}
