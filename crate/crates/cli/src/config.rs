//! Run configuration: defaults, then the TOML file, then flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use atagnn::cache::PredictionWindowConfig;
use atagnn::events::{CsvSchema, HeaderMode};
use atagnn::synth::SynthConfig;
use atagnn::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SYNTHETIC: &str = "synthetic";
pub const POLICIES: [&str; 3] = ["lru", "lfu", "model"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// CSV path, or `synthetic` for a generated trace.
    pub trace: String,
    /// `auto`, `present` or `absent`.
    pub csv_header: String,
    pub csv_has_label: bool,
    /// Defaults to `checkpoint.json` in the output directory.
    pub checkpoint: String,
    /// Defaults to `memory.json` next to the checkpoint.
    pub memory_snapshot: String,
    pub policies: Vec<String>,
    pub cache_sizes: Vec<usize>,
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub window: PredictionWindowConfig,
    pub synth_users: usize,
    pub synth_items: usize,
    pub synth_hours: usize,
    pub synth_events_per_hour: usize,
    pub synth_zipf_exponent: f64,
    pub synth_clusters: usize,
    /// Hours between popularity reshuffles; 0 disables drift.
    pub synth_drift_every: usize,
    pub synth_feature_dim: usize,
    pub synth_feature_noise: f64,
    pub synth_edge_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            output_dir: PathBuf::from("out"),
            trace: String::new(),
            csv_header: "auto".into(),
            csv_has_label: true,
            checkpoint: String::new(),
            memory_snapshot: String::new(),
            policies: POLICIES.iter().map(|s| s.to_string()).collect(),
            cache_sizes: vec![5, 10, 15, 20],
            train: TrainConfig::default(),
            window: PredictionWindowConfig::default(),
            synth_users: synth.users,
            synth_items: synth.items,
            synth_hours: synth.hours,
            synth_events_per_hour: synth.events_per_hour,
            synth_zipf_exponent: synth.zipf_exponent,
            synth_clusters: synth.clusters,
            synth_drift_every: 4,
            synth_feature_dim: synth.feature_dim,
            synth_feature_noise: synth.feature_noise,
            synth_edge_dim: synth.edge_dim,
        }
    }
}

fn known_keys() -> BTreeSet<String> {
    toml::Table::try_from(RunConfig::default())
        .expect("default config serializes")
        .keys()
        .cloned()
        .collect()
}

fn parse_value(raw: &str) -> toml::Value {
    // Bare words such as `aoi-attention` are not valid TOML; keep them as strings.
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Merges the optional file and `key=value` overrides over the defaults.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self, CliError> {
        let mut table = toml::Table::try_from(RunConfig::default()).expect("default config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let user: toml::Table = text
                .parse()
                .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
            table.extend(user);
        }
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        let known = known_keys();
        let unknown: Vec<&String> = table.keys().filter(|k| !known.contains(*k)).collect();
        if !unknown.is_empty() {
            let names: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
            return Err(CliError::Usage(format!("unknown configuration keys: {}", names.join(", "))));
        }
        let config: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Usage(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.schema()?;
        for p in &self.policies {
            if !POLICIES.contains(&p.as_str()) {
                return Err(CliError::Usage(format!(
                    "unknown policy `{p}`; expected one of: {}",
                    POLICIES.join(", ")
                )));
            }
        }
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.window.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    pub fn schema(&self) -> Result<CsvSchema, CliError> {
        let header = match self.csv_header.as_str() {
            "auto" => HeaderMode::Auto,
            "present" => HeaderMode::Present,
            "absent" => HeaderMode::Absent,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown csv_header `{other}`; expected auto, present or absent"
                )))
            }
        };
        Ok(CsvSchema {
            header,
            has_label: self.csv_has_label,
        })
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.train.seed,
            users: self.synth_users,
            items: self.synth_items,
            hours: self.synth_hours,
            events_per_hour: self.synth_events_per_hour,
            zipf_exponent: self.synth_zipf_exponent,
            clusters: self.synth_clusters,
            drift_hours: Vec::new(),
            feature_dim: self.synth_feature_dim,
            feature_noise: self.synth_feature_noise,
            edge_dim: self.synth_edge_dim,
        }
        .with_drift_every(self.synth_drift_every)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.checkpoint.is_empty() {
            self.output_dir.join("checkpoint.json")
        } else {
            PathBuf::from(&self.checkpoint)
        }
    }

    pub fn memory_path(&self) -> PathBuf {
        if self.memory_snapshot.is_empty() {
            self.checkpoint_path().with_file_name("memory.json")
        } else {
            PathBuf::from(&self.memory_snapshot)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses `key=value`; the value is read as TOML when possible.
pub fn parse_override(raw: &str) -> Result<(String, toml::Value), String> {
    let (k, v) = raw.split_once('=').ok_or_else(|| format!("expected key=value, got `{raw}`"))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

/// A comma-separated list as a TOML array of `parse_value` items.
pub fn list_value(raw: &str) -> toml::Value {
    toml::Value::Array(
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(parse_value)
            .collect(),
    )
}
