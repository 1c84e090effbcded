//! The run configuration document: `[data]`, `[encoder]` and `[train]` tables
//! layered over the synthetic preset.

use std::path::Path;

use gemzsl::data::GenConfig;
use gemzsl::encoders::EncoderConfig;
use gemzsl::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

const SECTIONS: [&str; 3] = ["data", "encoder", "train"];

/// Keys that are valid but absent from the serialized preset because they default to `None`.
const OPTIONAL_KEYS: [(&str, &str); 1] = [("data", "sigma_blur")];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: GenConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: GenConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::synthetic(),
        }
    }
}

impl RunConfig {
    /// Parses a document; keys it omits keep their preset values.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::config(format!("cannot parse config: {}", e.message())))?;
        let mut merged = Table::try_from(RunConfig::default()).expect("preset serializes");
        for (section, value) in user {
            if !SECTIONS.contains(&section.as_str()) {
                return Err(CliError::config(format!("unknown key `{section}`")));
            }
            let Value::Table(entries) = value else {
                return Err(CliError::config(format!("`{section}` must be a table")));
            };
            let target = merged
                .get_mut(&section)
                .and_then(Value::as_table_mut)
                .expect("preset has every section");
            for (key, v) in entries {
                if !target.contains_key(&key) && !OPTIONAL_KEYS.contains(&(section.as_str(), key.as_str())) {
                    return Err(CliError::config(format!("unknown key `{section}.{key}`")));
                }
                target.insert(key, v);
            }
        }
        merged
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(format!("invalid config: {}", e.message())))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// CRC32 of the resolved document.
    pub fn hash(&self) -> u32 {
        crc32fast::hash(self.to_toml().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_preset() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::default().train.epochs, 10);
        assert_eq!(RunConfig::default().train.batches_per_epoch, 50);
    }

    #[test]
    fn partial_section_keeps_preset_values() {
        let cfg = RunConfig::parse("[train]\nlr = 0.01\n").unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.data, GenConfig::default());
    }

    #[test]
    fn round_trip_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.data.sigma_blur = Some(1.5);
        cfg.encoder.stage_channels = vec![8, 16];
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.message.contains("train.learning_rate"), "{}", err.message);
        let err = RunConfig::parse("[paths]\nout = \"x\"\n").unwrap_err();
        assert!(err.message.contains("paths"), "{}", err.message);
        assert_eq!(err.code, 2);
    }

    #[test]
    fn wrong_types_are_rejected() {
        assert!(RunConfig::parse("[train]\nepochs = \"ten\"\n").is_err());
        assert!(RunConfig::parse("train = 3\n").is_err());
    }

    #[test]
    fn hash_tracks_changes() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
