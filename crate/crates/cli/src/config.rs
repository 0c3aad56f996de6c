//! Configuration file, scenario and model resolution.
//!
//! A config file is TOML, or JSON when its extension is `.json`. Its path
//! comes from `--config` or the `EAA_CONFIG` environment variable. Every
//! section is optional.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context as _, Result};
use serde::{Deserialize, Serialize};

use eaa_core::beamline::Scenario;
use eaa_core::engine::{FeatureSearchPolicy, FocusingPolicy};
use eaa_core::memory::{HashingEmbedder, MemoryConfig, MemoryStore, NotabilityRules};
use eaa_core::model::{ChatModel, ModelConfig, OpenAiModel, ScriptedModel};
use eaa_core::model::{ENV_API_KEY, ENV_BASE_URL, ENV_MODEL_NAME};
use eaa_core::runtime::{ToolPolicy, ToolRegistry};

pub const ENV_CONFIG: &str = "EAA_CONFIG";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub model: ModelSection,
    pub scenario: ScenarioSection,
    pub memory: MemoryConfig,
    pub guardrail: GuardrailConfig,
    pub service: ServiceSection,
}

/// `spec` selects the backend: `openai` (the default), `scripted:<file>`,
/// `policy:focusing` or `policy:feature-search`. The remaining fields only
/// matter for `openai` and fall back to the `EAA_MODEL_*` / `EAA_API_KEY`
/// environment variables.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub spec: Option<String>,
    pub base_url: Option<String>,
    pub model_name: Option<String>,
    pub api_key: Option<String>,
    pub temperature: Option<f64>,
    pub timeout: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    /// A scenario file, or one of the built-in names `desk`, `star`, `empty`.
    pub path: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuardrailConfig {
    /// Seconds an unattended approval request waits before the call is denied.
    pub approval_timeout: f64,
    /// Tools that always need approval.
    pub require_approval: Vec<String>,
    /// Tools that never need approval, even when high-risk.
    pub auto_approve: Vec<String>,
    /// Parameter limits per tool, replacing the declared ranges.
    pub limits: BTreeMap<String, BTreeMap<String, (f64, f64)>>,
}

impl Default for GuardrailConfig {
    fn default() -> Self {
        GuardrailConfig {
            approval_timeout: 300.0,
            require_approval: Vec::new(),
            auto_approve: Vec::new(),
            limits: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub bind: String,
    pub data_dir: PathBuf,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("eaa-data"),
        }
    }
}

impl AppConfig {
    /// Reads the file named by `explicit`, else by `EAA_CONFIG`, else defaults.
    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        let path = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(ENV_CONFIG).filter(|v| !v.is_empty()).map(PathBuf::from),
        };
        let Some(path) = path else {
            return Ok(AppConfig::default());
        };
        let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read config {}", path.display()))?;
        let config: AppConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?
        };
        config.guardrail.validate()?;
        Ok(config)
    }

    /// The scenario named on the command line, else in the config, else `desk`.
    pub fn scenario(&self, cli: Option<&str>) -> Result<Scenario> {
        resolve_scenario(cli.or(self.scenario.path.as_deref()).unwrap_or("desk"))
    }

    pub fn model(&self, cli: Option<&str>, scenario: &Scenario) -> Result<Arc<dyn ChatModel>> {
        let spec = cli.or(self.model.spec.as_deref()).unwrap_or("openai");
        build_model(spec, &self.model, scenario)
    }

    /// The memory store configured for a session, if enabled.
    pub fn memory(&self) -> Result<Option<(MemoryStore, NotabilityRules, usize)>> {
        let m = &self.memory;
        if !m.enabled {
            return Ok(None);
        }
        let embedder = Box::new(HashingEmbedder::new(m.dimension));
        let store = match &m.path {
            Some(path) => MemoryStore::open(path, embedder).with_context(|| format!("cannot open memory store {}", path.display()))?,
            None => MemoryStore::in_memory(embedder),
        };
        Ok(Some((store, NotabilityRules::default(), m.k)))
    }
}

pub fn resolve_scenario(name: &str) -> Result<Scenario> {
    match name {
        "desk" => Ok(Scenario::desk()),
        "star" | "star_search" => Ok(Scenario::star_search()),
        "empty" | "empty_search" => Ok(Scenario::empty_search()),
        path => Scenario::from_file(Path::new(path)).map_err(|e| anyhow!("scenario {path}: {e}")),
    }
}

/// Builds a model from a spec string.
pub fn build_model(spec: &str, section: &ModelSection, scenario: &Scenario) -> Result<Arc<dyn ChatModel>> {
    if let Some(file) = spec.strip_prefix("scripted:") {
        let model = ScriptedModel::from_file(Path::new(file)).map_err(|e| anyhow!("scripted model {file}: {e}"))?;
        return Ok(Arc::new(model));
    }
    match spec {
        "policy:focusing" => Ok(Arc::new(FocusingPolicy::new(scenario.focusing.clone()))),
        "policy:feature-search" => Ok(Arc::new(FeatureSearchPolicy::new(scenario.feature_search.clone()))),
        "openai" => Ok(Arc::new(OpenAiModel::new(remote_config(section)?)?)),
        other => match other.strip_prefix("openai:") {
            Some(name) => {
                let mut section = section.clone();
                section.model_name = Some(name.to_string());
                Ok(Arc::new(OpenAiModel::new(remote_config(&section)?)?))
            }
            None => bail!(
                "unknown model `{other}`; use openai[:<name>], scripted:<file>, policy:focusing or policy:feature-search"
            ),
        },
    }
}

fn remote_config(section: &ModelSection) -> Result<ModelConfig> {
    let env = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
    let base_url = section
        .base_url
        .clone()
        .or_else(|| env(ENV_BASE_URL))
        .unwrap_or_else(|| "https://api.openai.com/v1".into());
    let model_name = section
        .model_name
        .clone()
        .or_else(|| env(ENV_MODEL_NAME))
        .ok_or_else(|| anyhow!("no model name: set model.model_name or {ENV_MODEL_NAME}"))?;
    let api_key = section
        .api_key
        .clone()
        .or_else(|| env(ENV_API_KEY))
        .ok_or_else(|| anyhow!("missing API key for remote model `{model_name}`: set {ENV_API_KEY} or model.api_key"))?;
    let mut config = ModelConfig::new(&base_url, &model_name, &api_key);
    if let Some(t) = section.temperature {
        config.temperature = t;
    }
    if let Some(t) = section.timeout {
        config.timeout = t;
    }
    config.validate()?;
    Ok(config)
}

impl GuardrailConfig {
    fn validate(&self) -> Result<()> {
        if !(self.approval_timeout > 0.0) {
            bail!("guardrail.approval_timeout must be > 0");
        }
        for (tool, params) in &self.limits {
            for (name, (lo, hi)) in params {
                if !(lo <= hi) {
                    bail!("guardrail.limits.{tool}.{name}: lower bound exceeds upper bound");
                }
            }
        }
        if let Some(both) = self.require_approval.iter().find(|t| self.auto_approve.contains(t)) {
            bail!("tool `{both}` is listed in both require_approval and auto_approve");
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.approval_timeout)
    }

    /// Applies the overrides to every matching tool in `registry`.
    pub fn apply(&self, registry: &mut ToolRegistry) -> Result<()> {
        for name in registry.names() {
            let Some(current) = registry.policy(&name) else { continue };
            let mut policy: ToolPolicy = current.clone();
            if self.require_approval.contains(&name) {
                policy.requires_approval = true;
            }
            if self.auto_approve.contains(&name) {
                policy.requires_approval = false;
            }
            if let Some(limits) = self.limits.get(&name) {
                policy.limits.extend(limits.iter().map(|(k, v)| (k.clone(), *v)));
            }
            registry.set_policy(&name, policy)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_parse_from_toml() {
        let text = r#"
            [model]
            spec = "policy:focusing"
            [scenario]
            path = "star"
            [memory]
            enabled = true
            k = 2
            [guardrail]
            approval_timeout = 5
            require_approval = ["move_stage"]
            [guardrail.limits.set_zone_plate_z]
            z = [-200.0, -185.0]
        "#;
        let config: AppConfig = toml::from_str(text).unwrap();
        assert_eq!(config.model.spec.as_deref(), Some("policy:focusing"));
        assert_eq!(config.memory.k, 2);
        assert_eq!(config.guardrail.limits["set_zone_plate_z"]["z"], (-200.0, -185.0));
        assert_eq!(config.service.bind, "127.0.0.1:8080");
        assert!(config.scenario(None).unwrap().pattern.contains_star());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<AppConfig>("[model]\nspek = 1").is_err());
    }

    #[test]
    fn unknown_model_spec_is_an_error() {
        let err = build_model("gpt", &ModelSection::default(), &Scenario::desk()).err().unwrap();
        assert!(err.to_string().contains("unknown model"));
    }

    #[test]
    fn remote_model_without_key_fails() {
        let section = ModelSection {
            model_name: Some("m".into()),
            api_key: None,
            ..Default::default()
        };
        if std::env::var(ENV_API_KEY).is_ok() {
            return;
        }
        let err = build_model("openai", &section, &Scenario::desk()).err().unwrap();
        assert!(err.to_string().contains("missing API key"), "{err}");
    }
}
