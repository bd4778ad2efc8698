//! Service configuration: a TOML file overlaid with `LABLINK_` environment
//! variables. Nested keys use `__` in variable names, so
//! `LABLINK_FAULTWATCH__CONSENSUS_Z=4` sets `faultwatch.consensus_z`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use crate::devices::DEFAULT_SYSTEM_VERSION;
use crate::error::{Error, Result};
use crate::faultwatch::Thresholds;

pub const ENV_PREFIX: &str = "LABLINK_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    Registry,
    Floorplan,
    Devices,
    Tsstore,
    Surveys,
    Faultwatch,
    Dashboards,
}

impl Module {
    pub const ALL: [Module; 7] = [
        Module::Registry,
        Module::Floorplan,
        Module::Devices,
        Module::Tsstore,
        Module::Surveys,
        Module::Faultwatch,
        Module::Dashboards,
    ];

    pub const OPTIONAL: [Module; 3] = [Module::Surveys, Module::Faultwatch, Module::Dashboards];

    pub fn as_str(self) -> &'static str {
        match self {
            Module::Registry => "registry",
            Module::Floorplan => "floorplan",
            Module::Devices => "devices",
            Module::Tsstore => "tsstore",
            Module::Surveys => "surveys",
            Module::Faultwatch => "faultwatch",
            Module::Dashboards => "dashboards",
        }
    }

    pub fn is_core(self) -> bool {
        !Module::OPTIONAL.contains(&self)
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapAdmin {
    pub username: String,
    pub password: String,
    #[serde(default)]
    pub email: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurveyConfig {
    /// Late callbacks are accepted this long after close.
    pub grace_s: i64,
}

impl Default for SurveyConfig {
    fn default() -> Self {
        SurveyConfig { grace_s: 24 * 3600 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DashboardConfig {
    pub default_radius_m: f64,
    /// Period of the job that reseeds member dashboards from seat
    /// proximity. 0 disables it; the on-demand refresh endpoint remains.
    pub radius_refresh_s: u64,
}

impl Default for DashboardConfig {
    fn default() -> Self {
        DashboardConfig { default_radius_m: 5.0, radius_refresh_s: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub listen_address: String,
    /// Root for segments, metadata and survey files. In-memory when absent.
    pub data_dir: Option<PathBuf>,
    /// fsync every ingested batch.
    pub sync_writes: bool,
    pub deployment_tz: String,
    pub enabled_modules: BTreeSet<Module>,
    pub default_system_version: String,
    pub token_ttl_s: i64,
    /// Background sweep period; 0 disables the job.
    pub sweep_period_s: u64,
    /// Lookback of each background sweep.
    pub sweep_lookback_s: i64,
    /// Directory served under `/console`.
    pub console_dir: Option<PathBuf>,
    pub bootstrap_admin: Option<BootstrapAdmin>,
    pub surveys: SurveyConfig,
    pub dashboards: DashboardConfig,
    pub faultwatch: Thresholds,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen_address: "127.0.0.1:8080".into(),
            data_dir: None,
            sync_writes: true,
            deployment_tz: "UTC".into(),
            enabled_modules: Module::OPTIONAL.into_iter().collect(),
            default_system_version: DEFAULT_SYSTEM_VERSION.into(),
            token_ttl_s: 12 * 3600,
            sweep_period_s: 0,
            sweep_lookback_s: 30 * 24 * 3600,
            console_dir: None,
            bootstrap_admin: None,
            surveys: SurveyConfig::default(),
            dashboards: DashboardConfig::default(),
            faultwatch: Thresholds::default(),
        }
    }
}

impl ServiceConfig {
    /// Reads `path` and applies environment overrides from the process.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_env(text, std::iter::empty())
    }

    pub fn from_toml_with_env(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (key, raw) in env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
            let path: Vec<String> = rest.split("__").map(str::to_lowercase).collect();
            if path.iter().any(String::is_empty) {
                continue;
            }
            set_path(&mut root, &path, parse_env_value(&raw))?;
        }
        let mut unknown = Vec::new();
        let cfg: ServiceConfig = serde_ignored::deserialize(toml::Value::Table(root), |p| unknown.push(p.to_string()))
            .map_err(|e| Error::Config(e.to_string()))?;
        for key in unknown {
            tracing::warn!(key, "ignoring unknown configuration key");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.timezone()?;
        if let Some(core) = self.enabled_modules.iter().find(|m| m.is_core()) {
            tracing::debug!(module = %core, "core modules are always enabled");
        }
        if !(self.dashboards.default_radius_m.is_finite() && self.dashboards.default_radius_m >= 0.0) {
            return Err(Error::Config("dashboards.default_radius_m must be a non-negative number".into()));
        }
        if self.token_ttl_s <= 0 {
            return Err(Error::Config("token_ttl_s must be positive".into()));
        }
        if self.surveys.grace_s < 0 {
            return Err(Error::Config("surveys.grace_s must not be negative".into()));
        }
        let th = &self.faultwatch;
        if th.counter_modulus <= 1 || th.counter_modulus_overrides.values().any(|m| *m <= 1) {
            return Err(Error::Config("counter moduli must exceed 1".into()));
        }
        if th.consensus_bin_s == 0 {
            return Err(Error::Config("faultwatch.consensus_bin_s must be positive".into()));
        }
        Ok(())
    }

    pub fn timezone(&self) -> Result<Tz> {
        Tz::from_str(&self.deployment_tz).map_err(|_| Error::Config(format!("unknown timezone {:?}", self.deployment_tz)))
    }

    pub fn is_enabled(&self, module: Module) -> bool {
        module.is_core() || self.enabled_modules.contains(&module)
    }

    pub fn require(&self, module: Module) -> Result<()> {
        if self.is_enabled(module) {
            Ok(())
        } else {
            Err(Error::ModuleDisabled(module.as_str()))
        }
    }

    pub fn with_modules(mut self, modules: impl IntoIterator<Item = Module>) -> Self {
        self.enabled_modules = modules.into_iter().collect();
        self
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for key in parents {
        let entry = cur.entry(key.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("environment override descends into non-table key {key:?}")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_enable_everything() {
        let c = ServiceConfig::from_toml("").unwrap();
        assert!(Module::ALL.iter().all(|m| c.is_enabled(*m)));
        assert_eq!(c.faultwatch.consensus_z, 3.5);
        assert_eq!(c.dashboards.default_radius_m, 5.0);
    }

    #[test]
    fn file_values_and_env_overrides() {
        let text = r#"
            deployment_tz = "America/New_York"
            enabled_modules = ["faultwatch", "dashboards"]
            [faultwatch]
            partial_loss_rate = 0.1
        "#;
        let env = vec![
            ("LABLINK_FAULTWATCH__CONSENSUS_Z".to_string(), "4.5".to_string()),
            ("LABLINK_LISTEN_ADDRESS".to_string(), "0.0.0.0:9000".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let c = ServiceConfig::from_toml_with_env(text, env).unwrap();
        assert_eq!(c.faultwatch.partial_loss_rate, 0.1);
        assert_eq!(c.faultwatch.consensus_z, 4.5);
        assert_eq!(c.listen_address, "0.0.0.0:9000");
        assert!(!c.is_enabled(Module::Surveys));
        assert!(c.is_enabled(Module::Tsstore));
        assert!(matches!(c.require(Module::Surveys), Err(Error::ModuleDisabled("surveys"))));
    }

    #[test]
    fn bad_timezone_is_config_error() {
        let err = ServiceConfig::from_toml(r#"deployment_tz = "Mars/Olympus""#).unwrap_err();
        assert_eq!(err.code(), "ConfigError");
    }

    #[test]
    fn unknown_module_is_rejected() {
        assert!(ServiceConfig::from_toml(r#"enabled_modules = ["billing"]"#).is_err());
    }
}
