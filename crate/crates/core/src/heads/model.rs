use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    ranking_head, san_pairwise_head, similarity_head, single_sentence_head, HeadError, HeadOutput, HeadWeights,
    HeadsConfig, SanConfig, TaskType,
};
use crate::nn::{encode, tokenize, Dropout, EncoderConfig, EncoderWeights, NnError, PairEncoding, ParamStore, Tape, Vocab};
use crate::pairgen::GlossPair;

/// One task-tagged training or evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub task: TaskType,
    pub text_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_index: Option<usize>,
}

impl TaskExample {
    pub fn single(text: &str, label: usize) -> TaskExample {
        TaskExample {
            task: TaskType::SingleSentenceClassification,
            text_a: text.to_string(),
            text_b: None,
            label: Some(label),
            target: None,
            candidates: None,
            positive_index: None,
        }
    }

    pub fn pair(task: TaskType, a: &str, b: &str) -> TaskExample {
        TaskExample {
            task,
            text_a: a.to_string(),
            text_b: Some(b.to_string()),
            label: None,
            target: None,
            candidates: None,
            positive_index: None,
        }
    }

    /// Check that the fields the task needs are present.
    pub fn validate(&self, mode: Mode) -> Result<(), HeadError> {
        let missing = |field| Err(HeadError::MalformedExample { task: self.task, field });
        let train = mode == Mode::Train;
        match self.task {
            TaskType::SingleSentenceClassification => {
                if train && self.label.is_none() {
                    return missing("label");
                }
            }
            TaskType::PairwiseSimilarity => {
                if self.text_b.is_none() {
                    return missing("text_b");
                }
                if train && self.target.is_none() {
                    return missing("target");
                }
            }
            TaskType::PairwiseClassification => {
                if self.text_b.is_none() {
                    return missing("text_b");
                }
                if train && self.label.is_none() {
                    return missing("label");
                }
            }
            TaskType::PairwiseRanking => {
                if self.candidates.as_ref().is_none_or(Vec::is_empty) {
                    return missing("candidates");
                }
                if train && self.positive_index.is_none() {
                    return missing("positive_index");
                }
            }
        }
        Ok(())
    }
}

impl From<&GlossPair> for TaskExample {
    /// Context-gloss pairs always go to the pairwise classification head.
    fn from(p: &GlossPair) -> TaskExample {
        TaskExample {
            label: Some(p.label as usize),
            ..TaskExample::pair(TaskType::PairwiseClassification, &p.context_text, &p.gloss_text)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadsConfig,
    pub san: SanConfig,
}

/// Shared encoder plus the four heads, with the vocabulary that feeds it.
#[derive(Debug, Clone)]
pub struct MultiTaskModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    encoder: EncoderWeights,
    heads: HeadWeights,
}

impl MultiTaskModel {
    /// Fresh initialisation seeded by `config.encoder.seed`; the vocabulary
    /// size overrides `config.encoder.vocab_size`.
    pub fn new(mut config: ModelConfig, vocab: Vocab) -> Result<MultiTaskModel, NnError> {
        config.encoder.vocab_size = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.encoder.seed);
        let mut params = ParamStore::new();
        let encoder = EncoderWeights::init(&mut params, &config.encoder, &mut rng)?;
        let heads = HeadWeights::init(&mut params, config.encoder.d_model, &config.heads, &config.san, &mut rng)?;
        Ok(MultiTaskModel {
            config,
            vocab,
            params,
            encoder,
            heads,
        })
    }

    /// Copy every parameter of `source` whose name exists here. Returns the
    /// names of parameters that `source` lacked.
    pub fn load_matching(&mut self, source: &ParamStore) -> Result<Vec<String>, NnError> {
        let mut missing = Vec::new();
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            match source.by_name(&name) {
                Some(t) => self.params.assign(&name, t)?,
                None => missing.push(name),
            }
        }
        Ok(missing)
    }

    pub fn encode_texts(
        &self,
        tape: &mut Tape<'_>,
        a: &str,
        b: Option<&str>,
        dropout: Option<&mut Dropout>,
    ) -> Result<PairEncoding, NnError> {
        let t = tokenize(a, b, &self.vocab, self.config.encoder.max_len);
        encode(tape, &self.encoder, &self.config.encoder, &t.ids, &t.segments, dropout)
    }

    /// Run the head that matches `ex.task`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        ex: &TaskExample,
        mode: Mode,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<HeadOutput, HeadError> {
        ex.validate(mode)?;
        let b = ex.text_b.as_deref();
        match ex.task {
            TaskType::SingleSentenceClassification => {
                let e = self.encode_texts(tape, &ex.text_a, None, dropout)?;
                single_sentence_head(tape, &self.heads, &e, ex.label)
            }
            TaskType::PairwiseSimilarity => {
                let e = self.encode_texts(tape, &ex.text_a, b, dropout)?;
                similarity_head(tape, &self.heads, &e, ex.target)
            }
            TaskType::PairwiseClassification => {
                let e = self.encode_texts(tape, &ex.text_a, b, dropout)?;
                san_pairwise_head(tape, &self.heads.san, &self.config.san, &e, ex.label)
            }
            TaskType::PairwiseRanking => {
                let cands = ex.candidates.as_deref().unwrap_or_default();
                let encs = cands
                    .iter()
                    .map(|c| self.encode_texts(tape, &ex.text_a, Some(c), dropout.as_deref_mut()))
                    .collect::<Result<Vec<_>, _>>()?;
                ranking_head(tape, &self.heads, &encs, ex.positive_index)
            }
        }
    }

    /// Probability of the positive class for one context-gloss pair.
    pub fn positive_probability(&self, context: &str, gloss: &str) -> Result<f64, HeadError> {
        let mut tape = Tape::new(&self.params);
        let e = self.encode_texts(&mut tape, context, Some(gloss), None)?;
        let out = san_pairwise_head(&mut tape, &self.heads.san, &self.config.san, &e, None)?;
        Ok(tape.value(out.logits)[1].exp())
    }
}

/// Dispatches task-homogeneous batches to heads and counts invocations.
#[derive(Debug, Clone, Default)]
pub struct Router {
    counts: [usize; 4],
    log: Vec<TaskType>,
}

impl Router {
    pub fn new() -> Router {
        Router::default()
    }

    /// Run each example of a task-homogeneous batch on its own tape and hand
    /// the tape and head output to `each`.
    pub fn route_batch(
        &mut self,
        model: &MultiTaskModel,
        batch: &[TaskExample],
        mode: Mode,
        mut dropout: Option<&mut Dropout>,
        mut each: impl FnMut(&mut Tape<'_>, &HeadOutput) -> Result<(), HeadError>,
    ) -> Result<(), HeadError> {
        let Some(first) = batch.first() else {
            return Ok(());
        };
        if let Some(other) = batch.iter().find(|e| e.task != first.task) {
            return Err(HeadError::MixedBatch(first.task, other.task));
        }
        for ex in batch {
            ex.validate(mode)?;
        }
        for ex in batch {
            let mut tape = Tape::new(&model.params);
            let out = model.forward(&mut tape, ex, mode, dropout.as_deref_mut())?;
            each(&mut tape, &out)?;
        }
        self.counts[first.task.index()] += 1;
        self.log.push(first.task);
        Ok(())
    }

    /// Number of batches dispatched to the head for `task`.
    pub fn invocations(&self, task: TaskType) -> usize {
        self.counts[task.index()]
    }

    /// Task of each routed batch, in order.
    pub fn batch_log(&self) -> &[TaskType] {
        &self.log
    }
}
