use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init_linear, lookup_linear, HeadError, HeadOutput};
use crate::nn::{truncated_normal, NnError, PairEncoding, ParamId, ParamStore, Tape, Tensor, Var, INIT_SIGMA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SanCombine {
    #[default]
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SanConfig {
    pub k_steps: usize,
    pub state_dim: usize,
    pub prediction_combine: SanCombine,
}

impl Default for SanConfig {
    fn default() -> Self {
        SanConfig {
            k_steps: 5,
            state_dim: 64,
            prediction_combine: SanCombine::Average,
        }
    }
}

impl SanConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.k_steps == 0 || self.state_dim == 0 {
            return Err(NnError::InvalidConfig(format!("k_steps and state_dim must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Gate {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

/// Parameters of the multi-step answer module, all named `head.san.*`.
#[derive(Debug, Clone)]
pub struct SanWeights {
    pool: ParamId,
    init: ParamId,
    attn: ParamId,
    mem: ParamId,
    out: (ParamId, ParamId),
    z: Gate,
    r: Gate,
    n: Gate,
}

impl SanWeights {
    pub fn init(
        store: &mut ParamStore,
        d: usize,
        classes: usize,
        cfg: &SanConfig,
        rng: &mut impl Rng,
    ) -> Result<SanWeights, NnError> {
        cfg.validate()?;
        let h = cfg.state_dim;
        let mut w = |store: &mut ParamStore, name: &str, shape: Vec<usize>| {
            store.add(&format!("head.san.{name}"), truncated_normal(shape, INIT_SIGMA, rng))
        };
        let pool = w(store, "pool", vec![d, 1])?;
        let init = w(store, "init", vec![d, h])?;
        let attn = w(store, "attn", vec![d, h])?;
        let mem = w(store, "mem", vec![d, h])?;
        let mut gate = |store: &mut ParamStore, g: &str| -> Result<Gate, NnError> {
            Ok(Gate {
                w: w(store, &format!("gru.{g}.w"), vec![h, h])?,
                u: w(store, &format!("gru.{g}.u"), vec![h, h])?,
                b: store.add(&format!("head.san.gru.{g}.b"), Tensor::zeros(vec![1, h]))?,
            })
        };
        let z = gate(store, "z")?;
        let r = gate(store, "r")?;
        let n = gate(store, "n")?;
        let out = init_linear(store, "head.san.out", 4 * h, classes, rng)?;
        Ok(SanWeights { pool, init, attn, mem, out, z, r, n })
    }

    pub fn lookup(store: &ParamStore) -> Result<SanWeights, NnError> {
        let p = |name: &str| store.require(&format!("head.san.{name}"));
        let gate = |g: &str| -> Result<Gate, NnError> {
            Ok(Gate {
                w: p(&format!("gru.{g}.w"))?,
                u: p(&format!("gru.{g}.u"))?,
                b: p(&format!("gru.{g}.b"))?,
            })
        };
        Ok(SanWeights {
            pool: p("pool")?,
            init: p("init")?,
            attn: p("attn")?,
            mem: p("mem")?,
            out: lookup_linear(store, "head.san.out")?,
            z: gate("z")?,
            r: gate("r")?,
            n: gate("n")?,
        })
    }
}

/// `softmax(scores^T) * rows` for a column of scores.
fn attend(tape: &mut Tape<'_>, rows: Var, scores: Var) -> Result<Var, NnError> {
    let t = tape.transpose(scores);
    let alpha = tape.softmax_rows(t);
    tape.matmul(alpha, rows)
}

fn gate_pre(tape: &mut Tape<'_>, g: &Gate, x: Var, s: Var) -> Result<Var, NnError> {
    let w = tape.param(g.w);
    let u = tape.param(g.u);
    let b = tape.param(g.b);
    let a = tape.matmul(x, w)?;
    let c = tape.matmul(s, u)?;
    let sum = tape.add(a, c)?;
    tape.add_row(sum, b)
}

fn gru(tape: &mut Tape<'_>, w: &SanWeights, x: Var, s: Var) -> Result<Var, NnError> {
    let zp = gate_pre(tape, &w.z, x, s)?;
    let z = tape.sigmoid(zp);
    let rp = gate_pre(tape, &w.r, x, s)?;
    let r = tape.sigmoid(rp);
    let rs = tape.mul(r, s)?;
    let np = gate_pre(tape, &w.n, x, rs)?;
    let n = tape.tanh(np);
    let ones = tape.constant(&Tensor::full(vec![1, tape.shape(z).1], 1.0));
    let keep = tape.sub(ones, z)?;
    let a = tape.mul(keep, n)?;
    let b = tape.mul(z, s)?;
    tape.add(a, b)
}

/// Multi-step pairwise classifier.
///
/// Memory is the second-segment token states; the initial state is an
/// attention pool of the first segment. Each step attends the state over the
/// memory, predicts from `[s; x; |s - x|; s * x]`, then updates the state with
/// a GRU cell. The output logits are `ln(mean_k softmax(step_k))`.
pub fn san_pairwise_head(
    tape: &mut Tape<'_>,
    w: &SanWeights,
    cfg: &SanConfig,
    enc: &PairEncoding,
    label: Option<usize>,
) -> Result<HeadOutput, HeadError> {
    cfg.validate()?;
    if enc.segment_boundary == 0 || enc.segment_boundary >= enc.len {
        return Err(HeadError::InvalidBoundary {
            boundary: enc.segment_boundary,
            len: enc.len,
        });
    }
    let context = tape.slice_rows(enc.token_states, 0, enc.segment_boundary)?;
    let memory = tape.slice_rows(enc.token_states, enc.segment_boundary, enc.len)?;

    let u = tape.param(w.pool);
    let pool_scores = tape.matmul(context, u)?;
    let pooled = attend(tape, context, pool_scores)?;
    let w_init = tape.param(w.init);
    let mut s = tape.matmul(pooled, w_init)?;

    let w_attn = tape.param(w.attn);
    let w_mem = tape.param(w.mem);
    let keys = tape.matmul(memory, w_attn)?;

    let mut step_logits = Vec::with_capacity(cfg.k_steps);
    let mut prob_sum: Option<Var> = None;
    for k in 0..cfg.k_steps {
        let st = tape.transpose(s);
        let scores = tape.matmul(keys, st)?;
        let read = attend(tape, memory, scores)?;
        let x = tape.matmul(read, w_mem)?;
        let diff = tape.sub(s, x)?;
        let adiff = tape.abs(diff);
        let prod = tape.mul(s, x)?;
        let feats = tape.concat_cols(&[s, x, adiff, prod])?;
        let logits = tape.linear(feats, w.out.0, w.out.1)?;
        let p = tape.softmax_rows(logits);
        prob_sum = Some(match prob_sum {
            Some(acc) => tape.add(acc, p)?,
            None => p,
        });
        step_logits.push(logits);
        if k + 1 < cfg.k_steps {
            s = gru(tape, w, x, s)?;
        }
    }
    let mean = match cfg.prediction_combine {
        SanCombine::Average => {
            let sum = prob_sum.expect("k_steps >= 1");
            tape.scale(sum, 1.0 / cfg.k_steps as f64)
        }
    };
    let logits = tape.ln(mean);
    let loss = match label {
        Some(l) => {
            let classes = tape.shape(logits).1;
            if l >= classes {
                return Err(HeadError::LabelOutOfRange { label: l, classes });
            }
            let picked = tape.pick(logits, 0, l)?;
            Some(tape.scale(picked, -1.0))
        }
        None => None,
    };
    Ok(HeadOutput {
        logits,
        loss,
        step_logits,
    })
}

/// Arithmetic mean of per-step class distributions.
pub fn combine_step_probabilities(steps: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = steps.first() else {
        return Vec::new();
    };
    let mut out = vec![0.0; first.len()];
    for p in steps {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    let k = steps.len() as f64;
    out.iter_mut().for_each(|o| *o /= k);
    out
}
