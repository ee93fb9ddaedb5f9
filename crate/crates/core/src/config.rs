//! Run configuration: one TOML file plus dot-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytic::AnalyticConfig;
use crate::dataset::DatasetSchema;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::net::NetworkConfig;
use crate::trainer::{StepConfig, TrainConfig};

/// File locations. Unset dataset paths resolve to `<out_dir>/data/{train,val,test}.csv`,
/// the checkpoint to `<out_dir>/checkpoint.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            train: None,
            val: None,
            test: None,
            checkpoint: None,
        }
    }
}

impl PathsConfig {
    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn train_path(&self) -> PathBuf {
        self.train.clone().unwrap_or_else(|| self.data_dir().join("train.csv"))
    }

    pub fn val_path(&self) -> PathBuf {
        self.val.clone().unwrap_or_else(|| self.data_dir().join("val.csv"))
    }

    pub fn test_path(&self) -> PathBuf {
        self.test.clone().unwrap_or_else(|| self.data_dir().join("test.csv"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("checkpoint.json"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("eval")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Monte Carlo draws for posterior summaries and the posterior-mean θ̂.
    pub n_mc: usize,
    /// Run the exhaustive θ reference search (analytic data only).
    pub oracle: bool,
    pub oracle_resolution: f64,
    pub oracle_points: usize,
    /// Export latent coordinates.
    pub latents: bool,
    /// Points per prior and posterior `z_theta` cloud.
    pub latent_probes: usize,
    pub pdf_points: usize,
    pub pdf_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_mc: 4000,
            oracle: false,
            oracle_resolution: 0.01,
            oracle_points: 1000,
            latents: false,
            latent_probes: 500,
            pdf_points: 200,
            pdf_bins: 50,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    /// Synthetic benchmark settings; used (with defaults) unless `schema` is given.
    pub analytic: Option<AnalyticConfig>,
    pub schema: Option<DatasetSchema>,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub steps: Vec<StepConfig>,
    pub eval: EvalConfig,
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value`, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{path}`")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{k}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Builds a config from TOML text and `key=value` overrides applied in order.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        cfg.analytic = cfg.analytic_config();
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        match (&self.analytic, &self.schema) {
            (Some(_), Some(_)) => return Err(Error::Config("set either `analytic` or `schema`, not both".into())),
            (_, Some(s)) => s.validate()?,
            (a, None) => a.clone().unwrap_or_default().validate()?,
        }
        self.network.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        for s in &self.steps {
            s.train.validate()?;
        }
        if self.eval.n_mc < 1000 {
            return Err(Error::Config("eval.n_mc must be at least 1000".into()));
        }
        if !(self.eval.oracle_resolution > 0.0) || self.eval.oracle_points < 2 || self.eval.pdf_bins == 0 {
            return Err(Error::Config("eval oracle/pdf settings must be positive".into()));
        }
        Ok(())
    }

    /// The effective synthetic-benchmark settings, `None` for external data.
    pub fn analytic_config(&self) -> Option<AnalyticConfig> {
        match self.schema {
            Some(_) => None,
            None => Some(self.analytic.clone().unwrap_or_default()),
        }
    }

    pub fn dataset_schema(&self) -> DatasetSchema {
        match (&self.schema, self.analytic_config()) {
            (Some(s), _) => s.clone(),
            (None, a) => a.expect("analytic when no schema").schema(),
        }
    }

    /// Canonical TOML of the resolved config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// SHA-256 of the canonical TOML, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
