//! Task-specific output layers on top of the shared encoder.

mod model;
mod san;

pub use model::{Mode, ModelConfig, MultiTaskModel, Router, TaskExample};
pub use san::{combine_step_probabilities, SanCombine, SanConfig, SanWeights};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{truncated_normal, NnError, PairEncoding, ParamId, ParamStore, Tape, Tensor, Var, INIT_SIGMA};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("segment boundary {boundary} invalid for sequence of length {len}")]
    InvalidBoundary { boundary: usize, len: usize },
    #[error("index {index} out of range for {len} candidates")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("malformed {task} example: missing {field}")]
    MalformedExample { task: TaskType, field: &'static str },
    #[error("batch mixes tasks {0} and {1}")]
    MixedBatch(TaskType, TaskType),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    SingleSentenceClassification,
    PairwiseSimilarity,
    PairwiseClassification,
    PairwiseRanking,
}

impl TaskType {
    pub const ALL: [TaskType; 4] = [
        TaskType::SingleSentenceClassification,
        TaskType::PairwiseSimilarity,
        TaskType::PairwiseClassification,
        TaskType::PairwiseRanking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskType::SingleSentenceClassification => "single_sentence_classification",
            TaskType::PairwiseSimilarity => "pairwise_similarity",
            TaskType::PairwiseClassification => "pairwise_classification",
            TaskType::PairwiseRanking => "pairwise_ranking",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task type {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsConfig {
    pub single_classes: usize,
    pub pair_classes: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            single_classes: 2,
            pair_classes: 2,
        }
    }
}

/// Output of any head. `logits` holds class log-scores, the similarity score
/// (`1 x 1`) or the candidate scores (`1 x n`) depending on the task.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub logits: Var,
    pub loss: Option<Var>,
    /// SAN only: per-step logits, before averaging.
    pub step_logits: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub single: (ParamId, ParamId),
    pub similarity: (ParamId, ParamId),
    pub ranking: (ParamId, ParamId),
    pub san: SanWeights,
}

pub(crate) fn init_linear(
    store: &mut ParamStore,
    name: &str,
    i: usize,
    o: usize,
    rng: &mut impl Rng,
) -> Result<(ParamId, ParamId), NnError> {
    let w = store.add(&format!("{name}.w"), truncated_normal(vec![i, o], INIT_SIGMA, rng))?;
    let b = store.add(&format!("{name}.b"), Tensor::zeros(vec![1, o]))?;
    Ok((w, b))
}

pub(crate) fn lookup_linear(store: &ParamStore, name: &str) -> Result<(ParamId, ParamId), NnError> {
    Ok((store.require(&format!("{name}.w"))?, store.require(&format!("{name}.b"))?))
}

impl HeadWeights {
    pub fn init(
        store: &mut ParamStore,
        d_model: usize,
        heads: &HeadsConfig,
        san: &SanConfig,
        rng: &mut impl Rng,
    ) -> Result<HeadWeights, NnError> {
        Ok(HeadWeights {
            single: init_linear(store, "head.single", d_model, heads.single_classes, rng)?,
            similarity: init_linear(store, "head.similarity", d_model, 1, rng)?,
            ranking: init_linear(store, "head.ranking", d_model, 1, rng)?,
            san: SanWeights::init(store, d_model, heads.pair_classes, san, rng)?,
        })
    }

    pub fn lookup(store: &ParamStore) -> Result<HeadWeights, NnError> {
        Ok(HeadWeights {
            single: lookup_linear(store, "head.single")?,
            similarity: lookup_linear(store, "head.similarity")?,
            ranking: lookup_linear(store, "head.ranking")?,
            san: SanWeights::lookup(store)?,
        })
    }
}

fn cross_entropy(tape: &mut Tape<'_>, logits: Var, label: usize) -> Result<Var, HeadError> {
    let classes = tape.shape(logits).1;
    if label >= classes {
        return Err(HeadError::LabelOutOfRange { label, classes });
    }
    let lp = tape.log_softmax_rows(logits);
    let picked = tape.pick(lp, 0, label)?;
    Ok(tape.scale(picked, -1.0))
}

/// Linear classifier on the summary state with cross-entropy loss.
pub fn single_sentence_head(
    tape: &mut Tape<'_>,
    w: &HeadWeights,
    enc: &PairEncoding,
    label: Option<usize>,
) -> Result<HeadOutput, HeadError> {
    let logits = tape.linear(enc.summary, w.single.0, w.single.1)?;
    let loss = label.map(|l| cross_entropy(tape, logits, l)).transpose()?;
    Ok(HeadOutput {
        logits,
        loss,
        step_logits: Vec::new(),
    })
}

/// Unbounded scalar score with squared-error loss.
pub fn similarity_head(
    tape: &mut Tape<'_>,
    w: &HeadWeights,
    enc: &PairEncoding,
    target: Option<f64>,
) -> Result<HeadOutput, HeadError> {
    let score = tape.linear(enc.summary, w.similarity.0, w.similarity.1)?;
    let loss = match target {
        Some(t) => {
            let t = tape.constant(&Tensor::scalar(t));
            let diff = tape.sub(score, t)?;
            Some(tape.mul(diff, diff)?)
        }
        None => None,
    };
    Ok(HeadOutput {
        logits: score,
        loss,
        step_logits: Vec::new(),
    })
}

/// Scores each candidate encoding and applies the listwise softmax loss.
pub fn ranking_head(
    tape: &mut Tape<'_>,
    w: &HeadWeights,
    candidates: &[PairEncoding],
    positive: Option<usize>,
) -> Result<HeadOutput, HeadError> {
    if candidates.is_empty() {
        return Err(HeadError::IndexOutOfRange { index: positive.unwrap_or(0), len: 0 });
    }
    let scores: Vec<Var> = candidates
        .iter()
        .map(|e| tape.linear(e.summary, w.ranking.0, w.ranking.1))
        .collect::<Result<_, _>>()?;
    let logits = tape.concat_cols(&scores)?;
    let loss = match positive {
        Some(p) if p >= candidates.len() => {
            return Err(HeadError::IndexOutOfRange { index: p, len: candidates.len() })
        }
        Some(p) => {
            let lp = tape.log_softmax_rows(logits);
            let picked = tape.pick(lp, 0, p)?;
            Some(tape.scale(picked, -1.0))
        }
        None => None,
    };
    Ok(HeadOutput {
        logits,
        loss,
        step_logits: Vec::new(),
    })
}

pub use san::san_pairwise_head;

/// `-log softmax(scores)[positive_index]`.
pub fn ranking_loss(scores: &[f64], positive_index: usize) -> Result<f64, HeadError> {
    if positive_index >= scores.len() {
        return Err(HeadError::IndexOutOfRange {
            index: positive_index,
            len: scores.len(),
        });
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(lse - scores[positive_index])
}
