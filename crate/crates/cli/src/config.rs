//! JSON configuration files.
//!
//! Every subcommand reads an optional JSON object. The keys `seed` and `jobs`
//! are shared; the remaining keys belong to the subcommand's own schema and
//! unknown keys are rejected. Precedence is flags, then file, then defaults.

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde_json::Value;
use std::path::Path;

#[derive(Debug, Default)]
pub struct Loaded<T> {
    pub value: T,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<Loaded<T>> {
    let Some(path) = path else {
        return Ok(Loaded {
            value: T::default(),
            seed: None,
            jobs: None,
        });
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| safire::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
        .context("reading config")?;
    parse(&text).with_context(|| format!("config {}", path.display()))
}

fn config_error(msg: String) -> safire::Error {
    safire::Error::Config(msg)
}

pub fn parse<T: DeserializeOwned>(text: &str) -> Result<Loaded<T>> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| config_error(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| config_error("top level must be a JSON object".into()))?;
    let seed = obj
        .remove("seed")
        .map(|v| v.as_u64().ok_or_else(|| config_error(format!("seed must be a non-negative integer, got {v}"))))
        .transpose()?;
    let jobs = obj
        .remove("jobs")
        .map(|v| match v.as_u64() {
            Some(n) if n > 0 => Ok(n as usize),
            _ => Err(config_error(format!("jobs must be a positive integer, got {v}"))),
        })
        .transpose()?;
    let value = serde_json::from_value(value).map_err(|e| config_error(e.to_string()))?;
    Ok(Loaded { value, seed, jobs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use safire::trainer::TrainConfig;

    #[test]
    fn shared_keys_are_split_off() {
        let l: Loaded<TrainConfig> = parse(r#"{"seed": 4, "jobs": 2, "epochs": 3}"#).unwrap();
        assert_eq!((l.seed, l.jobs, l.value.epochs), (Some(4), Some(2), 3));
        assert_eq!(l.value.lr, TrainConfig::default().lr);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse::<TrainConfig>(r#"{"epochz": 3}"#).is_err());
        assert!(parse::<TrainConfig>("[1]").is_err());
        assert!(parse::<TrainConfig>(r#"{"jobs": 0}"#).is_err());
    }
}
