//! Stage orchestration over a run directory.
//!
//! Layout under `paths.output`:
//!
//! ```text
//! config.toml                 effective configuration
//! pairs/<corpus>.jsonl        context-gloss pairs
//! stats.json                  per-corpus pair statistics
//! augment/pool.jsonl          accepted paraphrases
//! augment/audit.jsonl         every translation and skipped route
//! vocab.txt
//! checkpoints/pretrain_best.ckpt
//! checkpoints/finetune_best.ckpt
//! metrics_pretrain.jsonl
//! metrics_finetune.jsonl
//! predictions/<corpus>.key    system answers
//! predictions/<corpus>.mfs.key
//! report.json | report.txt | report.md
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{
    build_pool, imbalance_stats, read_jsonl, write_jsonl, AugmentError, AugmentationPool, HttpTranslator, PoolOptions,
    RetryPolicy,
};
use crate::config::{ConfigError, PipelineConfig};
use crate::corpus::{CorpusError, CorpusName, DatasetSplit};
use crate::eval::{
    mfs_predict, predict_instance, render_reports, score_splits, write_predictions, EvalError, EvalReport, Prediction,
    ReportFormat,
};
use crate::heads::{ModelConfig, MultiTaskModel, TaskExample};
use crate::inventory::{InventoryError, InventoryOptions, SenseInventory};
use crate::nn::Vocab;
use crate::pairgen::{generate_pairs, read_pairs, write_pairs, GlossPair, PairError, PairOptions};
use crate::training::{
    finetune_wsd, load_checkpoint, pretrain, save_checkpoint, MetricRecord, TaskDataset, TrainError, WsdData,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prepare,
    Augment,
    Pretrain,
    Finetune,
    Evaluate,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Augment => "augment",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("input not found: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("missing artifact {} (run `{producer}` first)", path.display())]
    MissingArtifact { producer: Stage, path: PathBuf },
    #[error(transparent)]
    Inventory(#[from] InventoryError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Pair(#[from] PairError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl PipelineError {
    /// 2 for configuration and input problems, 1 for failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::MissingInput(_)
            | PipelineError::MissingArtifact { .. }
            | PipelineError::Inventory(_)
            | PipelineError::Corpus(_) => 2,
            PipelineError::Train(TrainError::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Pair statistics of one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub instances: usize,
    pub pairs: usize,
    pub positives: usize,
    pub negatives: usize,
    pub ratio: Option<f64>,
    /// Instances whose lemma has no candidate under its tagged POS.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSummary {
    pub instances: usize,
    pub paraphrases: usize,
    pub audit_entries: usize,
}

pub struct Pipeline {
    pub config: PipelineConfig,
}

impl Pipeline {
    /// Validate the configuration and every referenced input path.
    pub fn new(config: PipelineConfig) -> Result<Pipeline, PipelineError> {
        config.validate()?;
        let mut inputs = vec![config.paths.wordnet.join("index.sense")];
        for c in &config.corpora {
            inputs.push(c.xml.clone());
            inputs.push(c.gold.clone());
        }
        for t in &config.tasks {
            inputs.push(t.train.clone());
            inputs.extend(t.dev.clone());
        }
        if let Some(p) = inputs.into_iter().find(|p| !p.is_file()) {
            return Err(PipelineError::MissingInput(p));
        }
        Ok(Pipeline { config })
    }

    pub fn run_dir(&self) -> &Path {
        &self.config.paths.output
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.run_dir().join(rel)
    }

    pub fn pairs_path(&self, corpus: CorpusName) -> PathBuf {
        self.path(&format!("pairs/{}.jsonl", corpus.label()))
    }

    pub fn pool_path(&self) -> PathBuf {
        self.path("augment/pool.jsonl")
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.path(&format!("checkpoints/{}_best.ckpt", stage.name()))
    }

    pub fn report_path(&self, format: ReportFormat) -> PathBuf {
        self.path(match format {
            ReportFormat::Json => "report.json",
            ReportFormat::Text => "report.txt",
            ReportFormat::Markdown => "report.md",
        })
    }

    fn ensure_dir(&self, rel: &str) -> Result<PathBuf, PipelineError> {
        let dir = self.path(rel);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }

    fn require(&self, path: PathBuf, producer: Stage) -> Result<PathBuf, PipelineError> {
        if path.is_file() {
            Ok(path)
        } else {
            Err(PipelineError::MissingArtifact { producer, path })
        }
    }

    /// Write the effective configuration into the run directory.
    pub fn write_snapshot(&self) -> Result<PathBuf, PipelineError> {
        self.ensure_dir("")?;
        let path = self.path("config.toml");
        fs::write(&path, self.config.to_toml()).map_err(io_err(&path))?;
        Ok(path)
    }

    fn pair_options(&self) -> PairOptions {
        PairOptions {
            mark_gloss_target: self.config.pairgen.mark_gloss_target,
        }
    }

    pub fn load_inventory(&self) -> Result<SenseInventory, PipelineError> {
        let opts = InventoryOptions {
            gloss_include_examples: self.config.inventory.gloss_include_examples,
        };
        Ok(SenseInventory::load_dir(&self.config.paths.wordnet, opts)?)
    }

    fn load_split(&self, name: CorpusName) -> Result<DatasetSplit, PipelineError> {
        let c = self
            .config
            .corpus(name)
            .ok_or_else(|| ConfigError::Invalid(format!("no [[corpora]] entry named {}", name.label())))?;
        Ok(DatasetSplit::load(&c.xml, &c.gold, name)?)
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.config.encoder.encoder_config(),
            heads: self.config.heads,
            san: self.config.san,
        }
    }

    /// Generate pairs for every configured corpus.
    pub fn prepare(&self) -> Result<BTreeMap<String, CorpusStats>, PipelineError> {
        let inv = self.load_inventory()?;
        self.ensure_dir("pairs")?;
        let mut stats = BTreeMap::new();
        for c in &self.config.corpora {
            let split = DatasetSplit::load(&c.xml, &c.gold, c.name)?;
            let mut pairs = Vec::new();
            let mut skipped = 0;
            for inst in split.instances() {
                match generate_pairs(&inst, &inv, self.pair_options()) {
                    Ok(p) => pairs.extend(p),
                    Err(PairError::NoCandidates { lemma, pos }) => {
                        log::warn!("{}: no candidates for {lemma} ({pos}); instance skipped", inst.instance_id);
                        skipped += 1;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            write_pairs(&pairs, &self.pairs_path(c.name))?;
            let im = imbalance_stats(&pairs);
            log::info!(
                "{}: {} instances, {} pairs, {} positive, {} negative, ratio {}",
                c.name.label(),
                split.instance_count(),
                pairs.len(),
                im.positives,
                im.negatives,
                im.ratio.map_or("n/a".to_string(), |r| format!("{r:.3}"))
            );
            stats.insert(
                c.name.label().to_string(),
                CorpusStats {
                    instances: split.instance_count(),
                    pairs: pairs.len(),
                    positives: im.positives,
                    negatives: im.negatives,
                    ratio: im.ratio,
                    skipped,
                },
            );
        }
        let path = self.path("stats.json");
        let text = serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n";
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(stats)
    }

    /// Back-translate the positive training pairs. Without an endpoint the
    /// pool is written empty.
    pub fn augment(&self) -> Result<AugmentSummary, PipelineError> {
        let pairs = read_pairs(&self.require(self.pairs_path(CorpusName::SemCor), Stage::Prepare)?)?;
        self.ensure_dir("augment")?;
        let aug = &self.config.augmentation;
        let build = if aug.mt_endpoint.is_empty() {
            log::warn!("no MT endpoint configured; writing an empty augmentation pool");
            Default::default()
        } else {
            let client = HttpTranslator::with_timeout(&aug.mt_endpoint, Duration::from_secs(aug.timeout_s));
            let opts = PoolOptions {
                retry: RetryPolicy {
                    attempts: aug.retry_attempts,
                    initial_backoff: Duration::from_millis(aug.retry_backoff_ms),
                },
                workers: aug.workers,
            };
            build_pool(pairs.iter().filter(|p| p.is_positive()), &aug.routes, &client, opts)
        };
        build.pool.save(&self.pool_path())?;
        write_jsonl(&self.path("augment/audit.jsonl"), &build.audit)?;
        Ok(AugmentSummary {
            instances: build.pool.len(),
            paraphrases: build.pool.total_paraphrases(),
            audit_entries: build.audit.len(),
        })
    }

    fn load_tasks(&self) -> Result<Vec<TaskDataset>, PipelineError> {
        self.config
            .tasks
            .iter()
            .map(|t| {
                let read = |p: &Path| -> Result<Vec<TaskExample>, PipelineError> {
                    Ok(read_jsonl::<TaskExample>(p)?
                        .into_iter()
                        .map(|e| TaskExample { task: t.task, ..e })
                        .collect())
                };
                Ok(TaskDataset {
                    name: t.name.clone(),
                    task: t.task,
                    train: read(&t.train)?,
                    dev: t.dev.as_deref().map(read).transpose()?.unwrap_or_default(),
                })
            })
            .collect()
    }

    fn build_vocab(&self, tasks: &[TaskDataset], pairs: &[GlossPair]) -> Result<Vocab, PipelineError> {
        let pool = match self.pool_path() {
            p if p.is_file() => AugmentationPool::load(&p)?,
            _ => AugmentationPool::default(),
        };
        let mut texts: Vec<&str> = Vec::new();
        for t in tasks {
            for e in t.train.iter().chain(&t.dev) {
                texts.push(&e.text_a);
                texts.extend(e.text_b.as_deref());
                texts.extend(e.candidates.iter().flatten().map(String::as_str));
            }
        }
        for p in pairs {
            texts.push(&p.context_text);
            texts.push(&p.gloss_text);
        }
        for e in pool.entries() {
            texts.extend(e.paraphrases.iter().map(String::as_str));
        }
        Ok(Vocab::build(texts, self.config.encoder.vocab_min_freq))
    }

    fn load_vocab(&self) -> Result<Vocab, PipelineError> {
        let path = self.require(self.path("vocab.txt"), Stage::Pretrain)?;
        Vocab::load(&path).map_err(io_err(&path))
    }

    fn write_metrics(&self, name: &str, metrics: &[MetricRecord]) -> Result<(), PipelineError> {
        Ok(write_jsonl(&self.path(name), metrics)?)
    }

    /// Multi-task pre-training on the configured task datasets.
    pub fn pretrain(&self) -> Result<f64, PipelineError> {
        if self.config.tasks.is_empty() {
            return Err(ConfigError::Invalid("pretrain needs at least one [[tasks]] entry".into()).into());
        }
        let pairs = read_pairs(&self.require(self.pairs_path(CorpusName::SemCor), Stage::Prepare)?)?;
        let tasks = self.load_tasks()?;
        let vocab = self.build_vocab(&tasks, &pairs)?;
        let vocab_path = self.path("vocab.txt");
        vocab.save(&vocab_path).map_err(io_err(&vocab_path))?;
        log::info!("vocabulary: {} entries", vocab.len());
        let model = MultiTaskModel::new(self.model_config(), vocab).map_err(TrainError::from)?;
        let out = pretrain(model, &tasks, &self.config.train)?;
        self.ensure_dir("checkpoints")?;
        save_checkpoint(&out.best, &self.checkpoint_path(Stage::Pretrain))?;
        self.write_metrics("metrics_pretrain.jsonl", &out.metrics)?;
        Ok(out.best.dev_score)
    }

    /// Fine-tune the pairwise head on SemCor pairs, selecting on SE07.
    pub fn finetune(&self) -> Result<f64, PipelineError> {
        let base = load_checkpoint(&self.require(self.checkpoint_path(Stage::Pretrain), Stage::Pretrain)?)?;
        let vocab = self.load_vocab()?;
        let pairs = read_pairs(&self.require(self.pairs_path(CorpusName::SemCor), Stage::Prepare)?)?;
        let pool = AugmentationPool::load(&self.require(self.pool_path(), Stage::Augment)?)?;
        let inv = self.load_inventory()?;
        let dev = self.load_split(CorpusName::SE07)?;
        let model = MultiTaskModel::new(self.model_config(), vocab).map_err(TrainError::from)?;
        let data = WsdData {
            train_pairs: &pairs,
            pool: &pool,
            dev: &dev,
            inventory: &inv,
            pair_options: self.pair_options(),
        };
        let out = finetune_wsd(&base, model, data, &self.config.train)?;
        self.ensure_dir("checkpoints")?;
        save_checkpoint(&out.best, &self.checkpoint_path(Stage::Finetune))?;
        self.write_metrics("metrics_finetune.jsonl", &out.metrics)?;
        Ok(out.best.dev_score)
    }

    /// Predict every evaluation corpus with the fine-tuned model and the MFS
    /// baseline, then write predictions and reports.
    pub fn evaluate(&self) -> Result<Vec<EvalReport>, PipelineError> {
        let ckpt = load_checkpoint(&self.require(self.checkpoint_path(Stage::Finetune), Stage::Finetune)?)?;
        let mut model = MultiTaskModel::new(self.model_config(), self.load_vocab()?).map_err(TrainError::from)?;
        let missing = model.load_matching(&ckpt.params).map_err(TrainError::from)?;
        if let Some(name) = missing.first() {
            return Err(TrainError::CorruptCheckpoint {
                path: self.checkpoint_path(Stage::Finetune),
                reason: format!("parameter {name} absent"),
            }
            .into());
        }
        let inv = self.load_inventory()?;
        let opts = self.pair_options();
        self.ensure_dir("predictions")?;
        let mut splits: Vec<(CorpusName, DatasetSplit, Vec<Prediction>, Vec<Prediction>)> = Vec::new();
        for name in CorpusName::EVAL {
            if self.config.corpus(name).is_none() {
                continue;
            }
            let split = self.load_split(name)?;
            let mut sys = Vec::new();
            let mut mfs = Vec::new();
            for inst in split.instances() {
                sys.push(predict_instance(&inst, &inv, &model, opts)?);
                mfs.push(mfs_predict(&inst, &inv)?);
            }
            write_predictions(&sys, &self.path(&format!("predictions/{}.key", name.label())))?;
            write_predictions(&mfs, &self.path(&format!("predictions/{}.mfs.key", name.label())))?;
            splits.push((name, split, sys, mfs));
        }
        let include_dev = self.config.report.aggregate_includes_dev;
        let in_aggregate = |n: CorpusName| include_dev || n != CorpusName::SE07;
        let sys: Vec<_> = splits.iter().map(|(n, s, p, _)| (*n, p.as_slice(), &s.gold)).collect();
        let mfs: Vec<_> = splits.iter().map(|(n, s, _, m)| (*n, m.as_slice(), &s.gold)).collect();
        let reports = vec![
            score_splits(&self.config.report.system_name, &sys, in_aggregate)?,
            score_splits("MFS Baseline", &mfs, in_aggregate)?,
        ];
        for format in [ReportFormat::Json, ReportFormat::Text, ReportFormat::Markdown] {
            let path = self.report_path(format);
            fs::write(&path, render_reports(&reports, format)).map_err(io_err(&path))?;
        }
        Ok(reports)
    }

    /// Render the stored evaluation reports.
    pub fn report(&self, format: ReportFormat) -> Result<String, PipelineError> {
        let path = self.require(self.report_path(ReportFormat::Json), Stage::Evaluate)?;
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let reports: Vec<EvalReport> = serde_json::from_str(&text)
            .or_else(|_| serde_json::from_str::<EvalReport>(&text).map(|r| vec![r]))
            .map_err(|e| PipelineError::Io {
                path: path.clone(),
                source: io::Error::new(io::ErrorKind::InvalidData, e),
            })?;
        Ok(render_reports(&reports, format))
    }
}
