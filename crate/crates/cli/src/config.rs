//! Hierarchical run configuration: a TOML file, then `--set key=value`
//! overrides, then validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use volrep_core::dataset::Task;
use volrep_nn::decoder::{Decoder, DecoderConfig, MemoryKind};
use volrep_nn::encoder::{Encoder, EncoderConfig};
use volrep_nn::search::{SearchGrid, DEFAULT_BUDGET, DEFAULT_TARGET};
use volrep_nn::train::TrainConfig;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub shape: [usize; 3],
    pub n_phantoms: usize,
    pub task: Task,
    pub seed: u64,
    /// Samples drawn per phantom for the combined task.
    pub combined_multiplier: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { shape: [64, 64, 64], n_phantoms: 500, task: Task::Combined, seed: 7, combined_multiplier: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Run the adaptive search instead of a single training run.
    pub enabled: bool,
    pub target: f64,
    pub budget: usize,
    pub grid: SearchGrid,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { enabled: false, target: DEFAULT_TARGET, budget: DEFAULT_BUDGET, grid: SearchGrid::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Every artifact lives below this directory.
    pub root: PathBuf,
    pub templates: Option<PathBuf>,
    pub sarle_rules: Option<PathBuf>,
    pub sarle_vocabulary: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { root: PathBuf::from("run"), templates: None, sarle_rules: None, sarle_vocabulary: None }
    }
}

/// `encoder.input_shape` and `encoder.n_labels` are derived from the
/// dataset section; the decoder's vocabulary and memory sizes from the
/// template library and the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train_encoder: TrainConfig,
    pub train_decoder: TrainConfig,
    pub search: SearchConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            train_encoder: TrainConfig::encoder(),
            train_decoder: TrainConfig::decoder(),
            search: SearchConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from the defaults), applies `overrides` of
    /// the form `section.key=value` and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::missing(p, "config file not found"),
                    _ => Error::Internal(format!("{}: {e}", p.display())),
                })?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.n_phantoms == 0 || self.dataset.combined_multiplier == 0 {
            return Err(Error::Config("dataset.n_phantoms and dataset.combined_multiplier must be at least 1".into()));
        }
        // Building the model is the authoritative compatibility check
        // (extractor × head pairs, chunk counts, head splits).
        Encoder::new(self.encoder_config(self.dataset.task))?;
        Decoder::new(DecoderConfig { memory_len: 2, memory_width: 2, ..self.decoder.clone() })?;
        self.train_encoder.validate()?;
        self.train_decoder.validate()?;
        if self.search.budget == 0 {
            return Err(Error::Config("search.budget must be at least 1".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self, task: Task) -> EncoderConfig {
        EncoderConfig { input_shape: self.dataset.shape, n_labels: task.n_labels(), ..self.encoder.clone() }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Sets `table[a][b]... = value`, parsing `value` as a TOML literal when
/// possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override '{assignment}' is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("bad override key '{key}'")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{p}' in override '{key}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn parse_representation(s: &str) -> Result<MemoryKind> {
    match s {
        "tokens" => Ok(MemoryKind::Tokens),
        "feature_map" | "feature-map" => Ok(MemoryKind::FeatureMap),
        _ => Err(Error::Usage(format!("unknown representation '{s}' (tokens | feature-map)"))),
    }
}

pub fn representation_name(kind: MemoryKind) -> &'static str {
    match kind {
        MemoryKind::Tokens => "tokens",
        MemoryKind::FeatureMap => "feature-map",
    }
}
