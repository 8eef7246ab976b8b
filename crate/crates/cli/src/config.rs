//! Run configuration: defaults, then a TOML file, then command-line flags.
//!
//! Every leaf value keeps a record of which layer set it. The resolved
//! document is written as `run_config.toml` next to a run's outputs, with a
//! `[provenance]` table mapping dotted keys to `default`, `file` or `flag`.
//! A resolved file can be passed back through `--config`; its provenance
//! table is ignored on read.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pathground::eval::EvalConfig;
use pathground::knowledge::{RemoteConfig, DEFAULT_PROMPT_TEMPLATE};
use pathground::model::ModelConfig;
use pathground::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub seed: u64,
    pub train_n: usize,
    pub test_n: usize,
    pub image_size: u32,
    pub decoy_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            seed: 0,
            train_n: 512,
            test_n: 128,
            image_size: 256,
            decoy_fraction: 0.5,
        }
    }
}

/// Where knowledge comes from when a corpus needs expanding. A glossary
/// file wins over an endpoint; with neither, the corpus term bank is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnowledgeConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub glossary: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub prompt_template: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_file: Option<PathBuf>,
}

impl Default for KnowledgeConfig {
    fn default() -> Self {
        Self {
            glossary: None,
            endpoint: None,
            model: None,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            cache_file: None,
        }
    }
}

impl KnowledgeConfig {
    /// Remote settings, the endpoint falling back to the environment.
    /// The token only ever comes from the environment.
    pub fn remote(&self) -> Option<RemoteConfig> {
        let mut cfg = match (&self.endpoint, RemoteConfig::from_env()) {
            (Some(e), env) => {
                let mut c = RemoteConfig::new(e.clone());
                c.token = env.and_then(|c| c.token);
                c
            }
            (None, Some(env)) => env,
            (None, None) => return None,
        };
        cfg.model = self.model.clone();
        cfg.prompt_template = self.prompt_template.clone();
        cfg.cache_file = self.cache_file.clone();
        Some(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub knowledge: KnowledgeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
pub fn parse_override(s: &str) -> anyhow::Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .with_context(|| format!("override {s:?} is not of the form section.key=value"))?;
    let key = key.trim();
    if key.split('.').count() < 2 || key.split('.').any(str::is_empty) {
        bail!("override key {key:?} must be dotted, e.g. train.epochs");
    }
    Ok((key.to_string(), literal(raw.trim())))
}

pub fn literal(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Table, key: &str, value: Value) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().expect("dotted key");
    let mut cur = root;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .with_context(|| format!("{key}: {p} is not a section"))?;
    }
    cur.insert(leaf.to_string(), value);
    Ok(())
}

fn leaves(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => leaves(&key, t, out),
            _ => out.push((key, v.clone())),
        }
    }
}

pub fn read_config_file(path: &Path) -> anyhow::Result<Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table: Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    table.remove("provenance");
    Ok(table)
}

/// Layers `file` and `flags` over the defaults. Unknown keys and
/// ill-typed values are rejected.
pub fn resolve(file: Option<&Table>, flags: &[(String, Value)]) -> anyhow::Result<Resolved> {
    let mut doc = Table::try_from(RunConfig::default()).context("serializing defaults")?;
    let mut provenance = BTreeMap::new();
    if let Some(file) = file {
        let mut vals = Vec::new();
        leaves("", file, &mut vals);
        for (k, v) in vals {
            set_path(&mut doc, &k, v)?;
            provenance.insert(k, Source::File);
        }
    }
    for (k, v) in flags {
        set_path(&mut doc, k, v.clone())?;
        provenance.insert(k.clone(), Source::Flag);
    }
    let config: RunConfig = Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| anyhow::anyhow!("invalid configuration: {}", e.message()))?;
    // vocab_size is filled in from the corpus when the model is built
    pathground::model::ModelConfig {
        vocab_size: config.model.vocab_size.max(2),
        ..config.model.clone()
    }
    .validate()?;
    config.train.validate()?;
    config.eval.validate()?;

    let mut all = Vec::new();
    leaves("", &Table::try_from(&config)?, &mut all);
    let mut full = BTreeMap::new();
    for (k, _) in all {
        let src = provenance.get(&k).copied().unwrap_or(Source::Default);
        full.insert(k, src);
    }
    Ok(Resolved { config, provenance: full })
}

impl Resolved {
    pub fn to_toml(&self) -> anyhow::Result<String> {
        let mut doc = Table::try_from(&self.config)?;
        let prov: Table = self
            .provenance
            .iter()
            .map(|(k, v)| {
                let s = serde_json::to_value(v).expect("enum").as_str().expect("string").to_string();
                (k.clone(), Value::String(s))
            })
            .collect();
        doc.insert("provenance".into(), Value::Table(prov));
        Ok(toml::to_string(&doc)?)
    }

    /// Writes `run_config.toml` into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RUN_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
