use crate::checker::CweDb;
use crate::effects::{EffectsConfig, LibcDb};
use crate::ltl::{bundled_properties, compile_monitor, merge_properties, parse_properties, Monitor, Property};
use crate::memstace::{BufferHints, BuildConfig};
use crate::patcher::TemplateDb;
use crate::validator::RunConfig;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub max_states: usize,
    pub max_loop_iters: usize,
    pub max_input_len: usize,
    pub step_budget: u64,
    pub atomic_writes: bool,
    /// Seconds per binary.
    pub timeout: Option<f64>,
    pub props: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub libc_db: Option<PathBuf>,
    pub buffers: Option<PathBuf>,
    pub random_trials: usize,
    pub seed: u64,
    pub entry: Option<String>,
    pub patch: bool,
    pub out: Option<PathBuf>,
    pub validate: bool,
    pub export_memstace: Option<PathBuf>,
    pub enable_scanf_patch: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            max_states: 100_000,
            max_loop_iters: 64,
            max_input_len: 4096,
            step_budget: 1_000_000,
            atomic_writes: false,
            timeout: None,
            props: None,
            templates: None,
            libc_db: None,
            buffers: None,
            random_trials: 16,
            seed: 0,
            entry: None,
            patch: false,
            out: None,
            validate: false,
            export_memstace: None,
            enable_scanf_patch: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("`{0}` must be positive")]
    NonPositive(&'static str),
    #[error("{path}: {message}")]
    Load { path: String, message: String },
    #[error("property `{name}`: {message}")]
    Property { name: String, message: String },
}

fn load_err(path: &Path, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Load {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let checks: [(&'static str, bool); 5] = [
            ("max_states", self.max_states > 0),
            ("max_loop_iters", self.max_loop_iters > 0),
            ("max_input_len", self.max_input_len > 0),
            ("step_budget", self.step_budget > 0),
            ("random_trials", self.random_trials > 0),
        ];
        if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
            return Err(ConfigError::NonPositive(name));
        }
        if self.timeout.is_some_and(|t| t.is_nan() || t <= 0.0) {
            return Err(ConfigError::NonPositive("timeout"));
        }
        Ok(())
    }

    pub fn effects(&self) -> EffectsConfig {
        EffectsConfig {
            max_input_len: self.max_input_len,
            max_loop_iters: self.max_loop_iters,
            step_budget: self.step_budget,
            entry: self.entry.clone(),
        }
    }

    pub fn build(&self, buffers: &BufferHints) -> BuildConfig {
        BuildConfig {
            max_states: self.max_states,
            atomic_writes: self.atomic_writes,
            entry: self.entry.clone(),
            buffers: buffers.clone(),
            ..BuildConfig::default()
        }
    }

    pub fn run(&self) -> RunConfig {
        RunConfig {
            entry: self.entry.clone(),
            step_budget: self.step_budget,
            random_trials: self.random_trials,
            max_input_len: self.max_input_len,
            seed: self.seed,
        }
    }
}

/// Everything loaded once and shared by every binary of a batch.
#[derive(Debug, Clone)]
pub struct Resources {
    pub properties: Vec<Property>,
    pub monitors: Vec<Monitor>,
    pub cwes: CweDb,
    pub templates: TemplateDb,
    pub libc: LibcDb,
    pub buffers: BufferHints,
}

impl Resources {
    pub fn load(cfg: &Config) -> Result<Resources, ConfigError> {
        cfg.validate()?;
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| load_err(p, e));
        let mut properties = bundled_properties();
        if let Some(p) = &cfg.props {
            let extra = parse_properties(&read(p)?).map_err(|e| load_err(p, e))?;
            properties = merge_properties(properties, extra);
        }
        let monitors = properties
            .iter()
            .map(|p| {
                compile_monitor(p).map_err(|e| ConfigError::Property {
                    name: p.name.clone(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut cwes = CweDb::bundled();
        for p in &properties {
            if !p.cwes.is_empty() {
                cwes.insert(&p.name, p.cwes.clone());
            }
        }
        let mut templates = TemplateDb::bundled();
        if let Some(d) = &cfg.templates {
            templates.extend_from_dir(d).map_err(|e| load_err(d, e))?;
        }
        if cfg.enable_scanf_patch {
            templates.enable("scanf");
        }
        let mut libc = LibcDb::bundled();
        if let Some(p) = &cfg.libc_db {
            libc.extend_from_file(p).map_err(|e| load_err(p, e))?;
        }
        let buffers = match &cfg.buffers {
            Some(p) => BufferHints::from_toml(&read(p)?).map_err(|e| load_err(p, e))?,
            None => BufferHints::default(),
        };
        Ok(Resources {
            properties,
            monitors,
            cwes,
            templates,
            libc,
            buffers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets_must_be_positive() {
        assert!(Config::default().validate().is_ok());
        let c = Config {
            max_loop_iters: 0,
            ..Config::default()
        };
        assert!(matches!(c.validate(), Err(ConfigError::NonPositive("max_loop_iters"))));
        let c = Config {
            timeout: Some(0.0),
            ..Config::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn extra_properties_merge_and_bad_ones_fail() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("p.ltl");
        std::fs::write(&good, "property \"Always\" { ltl: G true cwe: [CWE-1] }\n").unwrap();
        let cfg = Config {
            props: Some(good),
            ..Config::default()
        };
        let r = Resources::load(&cfg).unwrap();
        assert_eq!(r.monitors.len(), 8);
        assert_eq!(r.cwes.map_cwe("always"), vec!["CWE-1".to_string()]);
        let bad = dir.path().join("q.ltl");
        std::fs::write(&bad, "property \"Eventually\" { ltl: F true }\n").unwrap();
        let cfg = Config {
            props: Some(bad),
            ..Config::default()
        };
        assert!(matches!(Resources::load(&cfg), Err(ConfigError::Property { .. })));
    }
}
