//! Multi-task pre-training, WSD fine-tuning and checkpoints.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{mark_paraphrase, sample_augmented, AugmentationPool};
use crate::corpus::DatasetSplit;
use crate::eval::{predict_instance, score_predictions, EvalError};
use crate::heads::{HeadError, Mode, MultiTaskModel, Router, TaskExample, TaskType};
use crate::inventory::SenseInventory;
use crate::nn::{adamax_step, AdamaxConfig, AdamaxState, Dropout, Gradients, NnError, ParamStore, Tape, Tensor};
use crate::pairgen::{GlossPair, PairOptions};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset {0} has no training examples")]
    EmptyDataset(String),
    #[error("no task datasets given")]
    NoDatasets,
    #[error("{path}: not a checkpoint of a supported version ({found})")]
    VersionMismatch { path: PathBuf, found: String },
    #[error("{path}: corrupt checkpoint: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleUnit {
    /// Every positive pair draws its own paraphrases.
    #[default]
    Pair,
    /// Positive pairs of one instance share a single draw.
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DevMetric {
    #[default]
    F1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n_augment: usize,
    pub seed: u64,
    pub sample_unit: SampleUnit,
    pub dev_metric: DevMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 5,
            finetune_epochs: 4,
            batch_size: 256,
            lr: 2e-5,
            n_augment: 3,
            seed: 42,
            sample_unit: SampleUnit::Pair,
            dev_metric: DevMetric::F1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    fn adamax(&self) -> AdamaxConfig {
        AdamaxConfig {
            lr: self.lr,
            ..AdamaxConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    fn code(self) -> u8 {
        match self {
            Phase::Pretrain => 0,
            Phase::Finetune => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub phase: Phase,
    /// 0-100.
    pub dev_score: f64,
    pub params: ParamStore,
}

const MAGIC: &[u8; 8] = b"WSDCKPT\0";
const VERSION: u32 = 1;

/// Little-endian binary layout:
///
/// ```text
/// magic "WSDCKPT\0" | u32 version | u64 step | u8 phase | f64 dev_score | u32 n
/// n x ( u32 name_len | name utf-8 | u32 rank | rank x u64 dim | f64 values )
/// ```
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let io_err = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut write = || -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(ckpt.step)?;
        w.write_u8(ckpt.phase.code())?;
        w.write_f64::<LittleEndian>(ckpt.dev_score)?;
        w.write_u32::<LittleEndian>(ckpt.params.len() as u32)?;
        for (name, t) in ckpt.params.iter() {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.values() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()
    };
    write().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let io_err = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let corrupt = |reason: String| TrainError::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 8];
    if r.read_exact(&mut magic).is_err() || &magic != MAGIC {
        return Err(TrainError::VersionMismatch {
            path: path.to_path_buf(),
            found: "bad magic".into(),
        });
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| corrupt(e.to_string()))?;
    if version != VERSION {
        return Err(TrainError::VersionMismatch {
            path: path.to_path_buf(),
            found: format!("version {version}"),
        });
    }
    let mut read = || -> Result<Checkpoint, String> {
        let e = |e: io::Error| e.to_string();
        let step = r.read_u64::<LittleEndian>().map_err(e)?;
        let phase = match r.read_u8().map_err(e)? {
            0 => Phase::Pretrain,
            1 => Phase::Finetune,
            p => return Err(format!("unknown phase {p}")),
        };
        let dev_score = r.read_f64::<LittleEndian>().map_err(e)?;
        let n = r.read_u32::<LittleEndian>().map_err(e)?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let len = r.read_u32::<LittleEndian>().map_err(e)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(e)?;
            let name = String::from_utf8(name).map_err(|_| "parameter name is not utf-8".to_string())?;
            let rank = r.read_u32::<LittleEndian>().map_err(e)? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<io::Result<Vec<_>>>()
                .map_err(e)?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&c| c <= 1 << 32)
                .ok_or_else(|| format!("implausible shape {shape:?} for {name}"))?;
            let mut values = vec![0.0; count];
            r.read_f64_into::<LittleEndian>(&mut values).map_err(e)?;
            let t = Tensor::new(shape, values).map_err(|x| x.to_string())?;
            params.add(&name, t).map_err(|x| x.to_string())?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(e)? != 0 {
            return Err("trailing bytes".into());
        }
        Ok(Checkpoint {
            step,
            phase,
            dev_score,
            params,
        })
    };
    read().map_err(corrupt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub phase: Phase,
    pub task: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    /// Parameters after the last epoch.
    pub last: ParamStore,
    pub metrics: Vec<MetricRecord>,
    pub router: Router,
    /// Number of training examples seen in each epoch.
    pub epoch_examples: Vec<usize>,
}

/// A task-tagged dataset with train and dev portions.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub task: TaskType,
    pub train: Vec<TaskExample>,
    pub dev: Vec<TaskExample>,
}

struct Trainer {
    state: AdamaxState,
    adamax: AdamaxConfig,
    dropout: Dropout,
    router: Router,
    step: u64,
    metrics: Vec<MetricRecord>,
}

impl Trainer {
    fn new(cfg: &TrainConfig, model: &MultiTaskModel) -> Trainer {
        Trainer {
            state: AdamaxState::for_params(&model.params),
            adamax: cfg.adamax(),
            dropout: Dropout::new(model.config.encoder.dropout_rate, cfg.seed ^ 0x5eed_d20f),
            router: Router::new(),
            step: 0,
            metrics: Vec::new(),
        }
    }

    /// One optimizer step on the mean loss of `batch`.
    fn batch(&mut self, model: &mut MultiTaskModel, batch: &[TaskExample], phase: Phase) -> Result<f64, TrainError> {
        let n = batch.len() as f64;
        let mut grads = Gradients::default();
        let mut total = 0.0;
        self.router
            .route_batch(model, batch, Mode::Train, Some(&mut self.dropout), |tape, out| {
                let loss = out.loss.expect("training mode yields a loss");
                let scaled = tape.scale(loss, 1.0 / n);
                total += tape.scalar(loss);
                grads.merge(tape.backward(scaled)?);
                Ok(())
            })?;
        model.params.zero_grads();
        model.params.accumulate(&grads)?;
        adamax_step(&mut model.params, &mut self.state, &self.adamax)?;
        self.step += 1;
        let loss = total / n;
        self.metrics.push(MetricRecord {
            step: self.step,
            phase,
            task: batch[0].task.name().to_string(),
            loss,
            dev_f1: None,
        });
        Ok(loss)
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Dev score of one task on the 0-100 scale: accuracy for classification and
/// ranking, `100 * max(0, 1 - MSE)` for similarity.
pub fn task_dev_score(model: &MultiTaskModel, examples: &[TaskExample]) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0.0;
    let mut sq = 0.0;
    for ex in examples {
        let mut tape = Tape::new(&model.params);
        let out = model.forward(&mut tape, ex, Mode::Eval, None)?;
        let v = tape.value(out.logits);
        match ex.task {
            TaskType::PairwiseSimilarity => sq += (v[0] - ex.target.unwrap_or(0.0)).powi(2),
            TaskType::PairwiseRanking => hits += f64::from(Some(argmax(v)) == ex.positive_index),
            _ => hits += f64::from(Some(argmax(v)) == ex.label),
        }
    }
    let n = examples.len() as f64;
    Ok(match examples[0].task {
        TaskType::PairwiseSimilarity => 100.0 * (1.0 - sq / n).max(0.0),
        _ => 100.0 * hits / n,
    })
}

fn pretrain_dev(model: &MultiTaskModel, tasks: &[TaskDataset]) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    for t in tasks {
        let examples = if t.dev.is_empty() { &t.train } else { &t.dev };
        sum += task_dev_score(model, examples)?;
    }
    Ok(sum / tasks.len() as f64)
}

/// Multi-task training with task-homogeneous batches. The pooled batch list
/// is reshuffled every epoch; the checkpoint with the best mean dev score is
/// returned.
pub fn pretrain(mut model: MultiTaskModel, tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(TrainError::NoDatasets);
    }
    for t in tasks {
        if t.train.is_empty() {
            return Err(TrainError::EmptyDataset(t.name.clone()));
        }
        if t.dev.is_empty() {
            log::warn!("dataset {} has no dev portion; scoring on its training examples", t.name);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new(cfg, &model);
    let init_score = pretrain_dev(&model, tasks)?;
    let mut best = Checkpoint {
        step: 0,
        phase: Phase::Pretrain,
        dev_score: init_score,
        params: model.params.snapshot(),
    };
    let mut epoch_examples = Vec::new();
    for epoch in 0..cfg.pretrain_epochs {
        let mut batches: Vec<Vec<TaskExample>> = Vec::new();
        for t in tasks {
            let mut order: Vec<&TaskExample> = t.train.iter().collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                batches.push(chunk.iter().map(|e| TaskExample { task: t.task, ..(*e).clone() }).collect());
            }
        }
        batches.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for b in &batches {
            loss_sum += trainer.batch(&mut model, b, Phase::Pretrain)? * b.len() as f64;
            seen += b.len();
        }
        epoch_examples.push(seen);
        let score = pretrain_dev(&model, tasks)?;
        log::info!("pretrain epoch {}: loss {:.4}, dev {:.2}", epoch + 1, loss_sum / seen as f64, score);
        trainer.metrics.push(MetricRecord {
            step: trainer.step,
            phase: Phase::Pretrain,
            task: "dev".into(),
            loss: loss_sum / seen as f64,
            dev_f1: Some(score),
        });
        if epoch == 0 || score > best.dev_score {
            best = Checkpoint {
                step: trainer.step,
                phase: Phase::Pretrain,
                dev_score: score,
                params: model.params.snapshot(),
            };
        }
    }
    Ok(TrainOutcome {
        best,
        last: model.params,
        metrics: trainer.metrics,
        router: trainer.router,
        epoch_examples,
    })
}

/// WSD data for fine-tuning.
#[derive(Debug, Clone, Copy)]
pub struct WsdData<'a> {
    pub train_pairs: &'a [GlossPair],
    pub pool: &'a AugmentationPool,
    pub dev: &'a DatasetSplit,
    pub inventory: &'a SenseInventory,
    pub pair_options: PairOptions,
}

/// Dev F1 of the pairwise head over every instance of `dev`.
pub fn wsd_dev_f1(model: &MultiTaskModel, dev: &DatasetSplit, inv: &SenseInventory, opts: PairOptions) -> Result<f64, TrainError> {
    let preds = dev
        .instances()
        .map(|inst| predict_instance(&inst, inv, model, opts))
        .collect::<Result<Vec<_>, _>>()?;
    let report = score_predictions(&preds, &dev.gold)?;
    Ok(report.overall.f1().unwrap_or(0.0))
}

/// Training examples for one epoch: every pair plus up to `n_augment`
/// paraphrased copies of each positive pair.
pub fn epoch_examples(pairs: &[GlossPair], pool: &AugmentationPool, cfg: &TrainConfig, rng: &mut impl Rng) -> Vec<GlossPair> {
    let mut out: Vec<GlossPair> = pairs.to_vec();
    let mut instance_draws: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for p in pairs.iter().filter(|p| p.is_positive()) {
        let seed: u64 = rng.gen();
        if cfg.n_augment == 0 {
            continue;
        }
        let Some(entry) = pool.get(&p.instance_id) else {
            continue;
        };
        let draw = match cfg.sample_unit {
            SampleUnit::Pair => sample_augmented(pool, &p.instance_id, cfg.n_augment, seed),
            SampleUnit::Instance => instance_draws
                .entry(&p.instance_id)
                .or_insert_with(|| sample_augmented(pool, &p.instance_id, cfg.n_augment, seed))
                .clone(),
        };
        for para in draw {
            match mark_paraphrase(&para, &entry.target) {
                Some(context_text) => out.push(GlossPair {
                    context_text,
                    ..p.clone()
                }),
                None => log::warn!("pool paraphrase for {} lost its target; skipped", p.instance_id),
            }
        }
    }
    out
}

/// Fine-tune the pairwise head on context-gloss pairs, starting from `base`.
/// `model` supplies the architecture; all parameters present in `base` are
/// copied over first.
pub fn finetune_wsd(
    base: &Checkpoint,
    mut model: MultiTaskModel,
    data: WsdData<'_>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.train_pairs.is_empty() {
        return Err(TrainError::EmptyDataset("wsd train pairs".into()));
    }
    let missing = model.load_matching(&base.params)?;
    if missing.iter().any(|n| n.starts_with("head.san.")) {
        log::warn!("MissingHead: base checkpoint lacks the pairwise classification head; initialised fresh");
    }
    if let Some(n) = missing.iter().find(|n| !n.starts_with("head.")) {
        log::warn!("base checkpoint lacks shared parameter {n}; kept fresh initialisation");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new(cfg, &model);
    let mut best = Checkpoint {
        step: 0,
        phase: Phase::Finetune,
        dev_score: wsd_dev_f1(&model, data.dev, data.inventory, data.pair_options)?,
        params: model.params.snapshot(),
    };
    let mut counts = Vec::new();
    for epoch in 0..cfg.finetune_epochs {
        let mut examples = epoch_examples(data.train_pairs, data.pool, cfg, &mut rng);
        examples.shuffle(&mut rng);
        counts.push(examples.len());
        let mut loss_sum = 0.0;
        for chunk in examples.chunks(cfg.batch_size) {
            let batch: Vec<TaskExample> = chunk.iter().map(TaskExample::from).collect();
            loss_sum += trainer.batch(&mut model, &batch, Phase::Finetune)? * batch.len() as f64;
        }
        let f1 = wsd_dev_f1(&model, data.dev, data.inventory, data.pair_options)?;
        let loss = loss_sum / examples.len() as f64;
        log::info!("finetune epoch {}: loss {:.4}, dev F1 {:.1}", epoch + 1, loss, f1);
        trainer.metrics.push(MetricRecord {
            step: trainer.step,
            phase: Phase::Finetune,
            task: "dev".into(),
            loss,
            dev_f1: Some(f1),
        });
        if epoch == 0 || f1 > best.dev_score {
            best = Checkpoint {
                step: trainer.step,
                phase: Phase::Finetune,
                dev_score: f1,
                params: model.params.snapshot(),
            };
        }
    }
    Ok(TrainOutcome {
        best,
        last: model.params,
        metrics: trainer.metrics,
        router: trainer.router,
        epoch_examples: counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::matrix(2, 3, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 3.0]).unwrap())
            .unwrap();
        s.add("b", Tensor::row(vec![std::f64::consts::PI])).unwrap();
        s
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let c = Checkpoint {
            step: 7,
            phase: Phase::Finetune,
            dev_score: 55.5,
            params: store(),
        };
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.step, 7);
        assert_eq!(back.phase, Phase::Finetune);
        for ((n1, t1), (n2, t2)) in c.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert!(t1.values().iter().zip(t2.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn bad_magic_or_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"NOTACKPT\x01\0\0\0").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TrainError::VersionMismatch { .. })));
        let mut bytes = MAGIC.to_vec();
        bytes.extend(9u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TrainError::VersionMismatch { .. })));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let c = Checkpoint {
            step: 1,
            phase: Phase::Pretrain,
            dev_score: 0.0,
            params: store(),
        };
        save_checkpoint(&c, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TrainError::CorruptCheckpoint { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
    }
}
