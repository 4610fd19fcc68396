//! Pipeline configuration: one TOML document with a section per module.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::TranslationRoute;
use crate::corpus::CorpusName;
use crate::eval::ReportFormat;
use crate::heads::{HeadsConfig, SanConfig, TaskType};
use crate::nn::EncoderConfig;
use crate::training::TrainConfig;

pub const MT_ENDPOINT_ENV: &str = "WSD_MT_ENDPOINT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("bad override {0:?}: expected section.key=value")]
    BadOverride(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// WordNet `dict` directory with `index.sense` and `data.*`.
    pub wordnet: PathBuf,
    /// Run directory receiving every artifact.
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub name: CorpusName,
    pub xml: PathBuf,
    pub gold: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: String,
    pub task: TaskType,
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InventorySection {
    pub gloss_include_examples: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairgenSection {
    pub mark_gloss_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSection {
    pub routes: Vec<TranslationRoute>,
    /// Empty disables augmentation (the pool is written empty).
    pub mt_endpoint: String,
    pub workers: usize,
    pub retry_attempts: u32,
    pub retry_backoff_ms: u64,
    pub timeout_s: u64,
}

impl Default for AugmentationSection {
    fn default() -> Self {
        AugmentationSection {
            routes: TranslationRoute::defaults(),
            mt_endpoint: String::new(),
            workers: 4,
            retry_attempts: 3,
            retry_backoff_ms: 1000,
            timeout_s: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    pub vocab_min_freq: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        EncoderSection {
            d_model: e.d_model,
            n_layers: e.n_layers,
            n_heads: e.n_heads,
            max_len: e.max_len,
            dropout_rate: e.dropout_rate,
            seed: e.seed,
            vocab_min_freq: 2,
        }
    }
}

impl EncoderSection {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 0,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_len: self.max_len,
            dropout_rate: self.dropout_rate,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub format: ReportFormat,
    /// Count the dev set (SE07) in the per-POS and All columns.
    pub aggregate_includes_dev: bool,
    pub system_name: String,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            format: ReportFormat::Text,
            aggregate_includes_dev: false,
            system_name: "MTL+Gloss".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub inventory: InventorySection,
    pub pairgen: PairgenSection,
    pub augmentation: AugmentationSection,
    pub encoder: EncoderSection,
    pub heads: HeadsConfig,
    pub san: SanConfig,
    pub train: TrainConfig,
    pub report: ReportSection,
    pub corpora: Vec<CorpusConfig>,
    pub tasks: Vec<TaskConfig>,
}

fn set_override(root: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::BadOverride(spec.to_string());
    let (key, raw) = spec.split_once('=').ok_or_else(bad)?;
    let (section, field) = key.trim().split_once('.').ok_or_else(bad)?;
    if section.is_empty() || field.is_empty() || field.contains('.') {
        return Err(bad());
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let entry = root
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let table = entry.as_table_mut().ok_or_else(bad)?;
    table.insert(field.to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Parse TOML text, apply `section.key=value` overrides, and resolve
    /// relative paths against `base_dir`.
    pub fn from_toml(text: &str, overrides: &[String], base_dir: &Path) -> Result<PipelineConfig, ConfigError> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            set_override(&mut root, o)?;
        }
        let mut cfg: PipelineConfig = root.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<PipelineConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, overrides, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.wordnet);
        fix(&mut self.paths.output);
        for c in &mut self.corpora {
            fix(&mut c.xml);
            fix(&mut c.gold);
        }
        for t in &mut self.tasks {
            fix(&mut t.train);
            if let Some(d) = &mut t.dev {
                fix(d);
            }
        }
    }

    /// The endpoint in effect: environment variable over file value.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var(MT_ENDPOINT_ENV) {
            if !v.trim().is_empty() {
                self.augmentation.mt_endpoint = v.trim().to_string();
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.paths.output.as_os_str().is_empty() {
            return invalid("paths.output is required".into());
        }
        let mut enc = self.encoder.encoder_config();
        enc.vocab_size = 4;
        enc.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.san.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.heads.single_classes < 2 || self.heads.pair_classes != 2 {
            return invalid("heads.single_classes must be >= 2 and heads.pair_classes must be 2".into());
        }
        if self.encoder.vocab_min_freq == 0 {
            return invalid("encoder.vocab_min_freq must be positive".into());
        }
        if self.augmentation.workers == 0 || self.augmentation.retry_attempts == 0 {
            return invalid("augmentation.workers and augmentation.retry_attempts must be positive".into());
        }
        let mut seen = Vec::new();
        for c in &self.corpora {
            if seen.contains(&c.name) {
                return invalid(format!("corpus {} listed twice", c.name));
            }
            seen.push(c.name);
        }
        Ok(())
    }

    pub fn corpus(&self, name: CorpusName) -> Option<&CorpusConfig> {
        self.corpora.iter().find(|c| c.name == name)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `section.key = default` for every scalar key, plus the list-valued ones.
pub fn describe_keys() -> String {
    let value = toml::Value::try_from(PipelineConfig::default()).expect("config serializes");
    let mut out = String::new();
    if let toml::Value::Table(root) = value {
        for (section, v) in root {
            if let toml::Value::Table(t) = v {
                for (k, v) in t {
                    let _ = writeln!(out, "  {section}.{k} = {v}");
                }
            }
        }
    }
    out.push_str("  [[corpora]] name, xml, gold    (one entry per corpus: SemCor, SE07, SE2, SE3, SE13, SE15)\n");
    out.push_str("  [[tasks]] name, task, train, dev    (pre-training datasets, JSON lines)\n");
    let _ = writeln!(out, "  environment {MT_ENDPOINT_ENV} overrides augmentation.mt_endpoint");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&c.to_toml(), &[], Path::new("")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_paths() {
        let text = r#"
[paths]
wordnet = "wn"
output = "/abs/run"

[[corpora]]
name = "SE07"
xml = "se07.xml"
gold = "se07.gold.key.txt"
"#;
        let c = PipelineConfig::from_toml(
            text,
            &["train.lr=0.001".into(), "san.k_steps=2".into(), "report.format=markdown".into()],
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.san.k_steps, 2);
        assert_eq!(c.report.format, ReportFormat::Markdown);
        assert_eq!(c.paths.wordnet, Path::new("/base/wn"));
        assert_eq!(c.paths.output, Path::new("/abs/run"));
        assert_eq!(c.corpora[0].xml, Path::new("/base/se07.xml"));
        assert!(matches!(
            PipelineConfig::from_toml(text, &["nodot=1".into()], Path::new("")),
            Err(ConfigError::BadOverride(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml(text, &["train.bogus=1".into()], Path::new("")),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn validation() {
        let mut c = PipelineConfig::default();
        assert!(c.validate().is_err());
        c.paths.output = "out".into();
        c.validate().unwrap();
        c.encoder.n_heads = 5;
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn key_listing_covers_sections() {
        let d = describe_keys();
        for key in ["train.lr = 0.00002", "san.k_steps = 5", "encoder.d_model = 64", "train.batch_size = 256", "augmentation.mt_endpoint"] {
            assert!(d.contains(key), "{key} missing from\n{d}");
        }
    }
}
