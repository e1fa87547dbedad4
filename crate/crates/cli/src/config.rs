use std::path::Path;

use serde_json::{Map, Value};

use meltr::bilevel::TrainConfig;
use meltr::tasks::{SuiteOptions, TaskSpec};

use crate::CliError;

/// Overrides the configured seed when set.
pub const SEED_ENV: &str = "MELTR_SEED";

/// A `run` document: the suite to train on plus every [`TrainConfig`] key.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub suite: String,
    pub suite_options: SuiteOptions,
    /// Seed of the generated suite; the run seed when absent.
    pub suite_seed: Option<u64>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(suite: &str, train: TrainConfig) -> Self {
        Self { suite: suite.into(), suite_options: SuiteOptions::default(), suite_seed: None, train }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, CliError> {
        let Value::Object(mut map) = value else {
            return Err(CliError::Config("config must be a JSON object".into()));
        };
        let suite = match map.remove("suite") {
            Some(Value::String(s)) => s,
            Some(other) => return Err(CliError::Config(format!("suite must be a string, got {other}"))),
            None => return Err(CliError::Config("missing key: suite".into())),
        };
        let suite_options = match map.remove("suite_options") {
            Some(v) => serde_json::from_value(v).map_err(|e| CliError::Config(format!("suite_options: {e}")))?,
            None => SuiteOptions::default(),
        };
        let suite_seed = match map.remove("suite_seed") {
            Some(v) => Some(serde_json::from_value(v).map_err(|e| CliError::Config(format!("suite_seed: {e}")))?),
            None => None,
        };
        let train: TrainConfig = serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Config(e.to_string()))?;
        let cfg = Self { suite, suite_options, suite_seed, train };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read `path` and apply the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_env_seed()?;
        Ok(cfg)
    }

    pub fn apply_env_seed(&mut self) -> Result<(), CliError> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.train.seed =
                raw.trim().parse().map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got {raw:?}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        // builds cheaply and catches bad suite names and sizes
        self.task().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn task(&self) -> Result<TaskSpec, CliError> {
        Ok(self.suite_options.build(&self.suite, self.suite_seed.unwrap_or(self.train.seed))?)
    }

    pub fn to_value(&self) -> Value {
        let mut map: Map<String, Value> = match serde_json::to_value(&self.train).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("struct serializes to an object"),
        };
        map.insert("suite".into(), Value::String(self.suite.clone()));
        map.insert("suite_options".into(), serde_json::to_value(self.suite_options).expect("serializes"));
        if let Some(s) = self.suite_seed {
            map.insert("suite_seed".into(), s.into());
        }
        Value::Object(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use meltr::bilevel::{HypergradScheme, Method};

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"suite":"regression","scheme":"identity","seed":1}"#).unwrap();
        assert_eq!(cfg.train.seed, 1);
        assert_eq!(cfg.train.scheme, Method::Meltr(HypergradScheme::IdentityLite));
        assert_eq!(cfg.train, TrainConfig { seed: 1, ..TrainConfig::default() });
    }

    #[test]
    fn strict_keys() {
        for bad in [
            r#"{"scheme":"identity"}"#,
            r#"{"suite":"regression","sheme":"identity"}"#,
            r#"{"suite":"regression","flags":{"direct_reg":true}}"#,
            r#"{"suite":"regression","suite_options":{"width":3}}"#,
            r#"{"suite":"video"}"#,
            r#"{"suite":"regression","alpha":-1}"#,
            r#"{"suite":"regression","scheme":"neumann:x"}"#,
            r#"[1]"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad), Err(CliError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::from_json(
            r#"{"suite":"regression","scheme":"neumann:3","K":2,"meltr":{"d":16,"heads":2,"variant":"linear"},
                "flags":{"direct_reg_grad":false,"shared_outer_batch":true},"suite_options":{"dims":4},"suite_seed":9}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.scheme, Method::Meltr(HypergradScheme::Neumann(3)));
        assert_eq!(RunConfig::from_value(cfg.to_value()).unwrap(), cfg);
        assert_eq!(cfg.task().unwrap().metadata.seed, 9);
    }
}
