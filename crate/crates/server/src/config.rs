//! Service configuration file and pipeline loading.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use crskit::{from_pretrained, LoadOptions, Pipeline};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SESSION_TTL_SECS: u64 = 3600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineEntry {
    /// Stable id exposed by the API.
    pub id: String,
    /// Local artifact directory (relative to the config file) or hub name.
    #[serde(rename = "ref")]
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hub_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_ttl")]
    pub session_ttl_secs: u64,
    #[serde(default)]
    pub pipelines: Vec<PipelineEntry>,
}

fn default_ttl() -> u64 {
    DEFAULT_SESSION_TTL_SECS
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: ServerConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let mut seen = std::collections::HashSet::new();
        for p in &self.pipelines {
            if p.id.is_empty() {
                bail!("pipeline id must not be empty");
            }
            if !seen.insert(p.id.as_str()) {
                bail!("duplicate pipeline id {:?}", p.id);
            }
        }
        Ok(())
    }

    pub fn session_ttl(&self) -> Duration {
        Duration::from_secs(self.session_ttl_secs)
    }

    /// Loads every listed pipeline. Relative local refs resolve against `base_dir`;
    /// anything that is not an existing directory is pulled from the hub.
    pub async fn load_pipelines(&self, base_dir: &Path, offline: bool) -> anyhow::Result<Vec<(String, Pipeline)>> {
        let opts = LoadOptions {
            hub_url: self.hub_url.clone(),
            cache_dir: self.cache_dir.as_ref().map(|d| base_dir.join(d)),
            offline,
        };
        let mut out = Vec::with_capacity(self.pipelines.len());
        for entry in &self.pipelines {
            let local = base_dir.join(&entry.reference);
            let reference = if local.is_dir() {
                local.to_string_lossy().into_owned()
            } else {
                entry.reference.clone()
            };
            let loaded = from_pretrained(&reference, &opts)
                .await
                .with_context(|| format!("loading pipeline {:?} from {:?}", entry.id, entry.reference))?;
            let Some(p) = loaded.into_pipeline() else {
                bail!("artifact {:?} is a module, not a pipeline", entry.reference);
            };
            out.push((entry.id.clone(), p));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_and_full_configs() {
        let cfg = ServerConfig::from_toml("").unwrap();
        assert_eq!(cfg.session_ttl_secs, DEFAULT_SESSION_TTL_SECS);
        assert!(cfg.pipelines.is_empty());
        let cfg = ServerConfig::from_toml(
            r#"
hub_url = "http://hub"
session_ttl_secs = 5
[[pipelines]]
id = "a"
ref = "artifacts/a"
"#,
        )
        .unwrap();
        assert_eq!(cfg.hub_url.as_deref(), Some("http://hub"));
        assert_eq!(cfg.pipelines[0].reference, "artifacts/a");
        assert_eq!(cfg.session_ttl(), Duration::from_secs(5));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let text = "[[pipelines]]\nid = \"a\"\nref = \"x\"\n[[pipelines]]\nid = \"a\"\nref = \"y\"\n";
        assert!(ServerConfig::from_toml(text).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ServerConfig {
            hub_url: None,
            cache_dir: None,
            session_ttl_secs: 60,
            pipelines: vec![PipelineEntry {
                id: "x".into(),
                reference: "dir".into(),
            }],
        };
        assert_eq!(ServerConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap(), cfg);
    }
}
