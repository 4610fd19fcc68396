use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{truncated_normal, ParamId, ParamStore, INIT_SIGMA};
use super::tape::{Tape, Var};
use super::{NnError, Tensor};

const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Filled from the vocabulary when a model is built.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_len: 128,
            dropout_rate: 0.1,
            seed: 42,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let positive = self.vocab_size > 0 && self.d_model > 0 && self.n_layers > 0 && self.n_heads > 0 && self.max_len >= 3;
        if !positive {
            return Err(NnError::InvalidConfig(format!("all encoder sizes must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(NnError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::InvalidConfig(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    /// `V*d + L*d + 2d + 2d + layers * (12 d^2 + 13 d)` with `V` the vocabulary
    /// size and `L` the maximum length.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d + self.max_len * d + 2 * d + 2 * d + self.n_layers * (12 * d * d + 13 * d)
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln1: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

/// Parameter handles of the shared encoder. All names start with `encoder.`.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    tok: ParamId,
    pos: ParamId,
    seg: ParamId,
    ln: (ParamId, ParamId),
    layers: Vec<LayerWeights>,
}

pub const ENCODER_PREFIX: &str = "encoder.";

enum Source<'a, R> {
    Init(&'a mut ParamStore, &'a mut R),
    Lookup(&'a ParamStore),
}

impl<R: Rng> Source<'_, R> {
    fn weight(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId, NnError> {
        match self {
            Source::Init(store, rng) => store.add(name, truncated_normal(shape, INIT_SIGMA, *rng)),
            Source::Lookup(store) => check(store, name, &shape),
        }
    }

    fn fill(&mut self, name: &str, shape: Vec<usize>, v: f64) -> Result<ParamId, NnError> {
        match self {
            Source::Init(store, _) => store.add(name, Tensor::full(shape, v)),
            Source::Lookup(store) => check(store, name, &shape),
        }
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Result<(ParamId, ParamId), NnError> {
        Ok((self.weight(&format!("{name}.w"), vec![i, o])?, self.fill(&format!("{name}.b"), vec![1, o], 0.0)?))
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<(ParamId, ParamId), NnError> {
        Ok((self.fill(&format!("{name}.gain"), vec![1, d], 1.0)?, self.fill(&format!("{name}.bias"), vec![1, d], 0.0)?))
    }
}

fn check(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId, NnError> {
    let id = store.require(name)?;
    if store.get(id).shape() != shape {
        return Err(NnError::ShapeMismatch(format!("{name}: expected {shape:?}, found {:?}", store.get(id).shape())));
    }
    Ok(id)
}

impl EncoderWeights {
    fn build<R: Rng>(mut src: Source<'_, R>, cfg: &EncoderConfig) -> Result<EncoderWeights, NnError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let tok = src.weight("encoder.embed.token", vec![cfg.vocab_size, d])?;
        let pos = src.weight("encoder.embed.position", vec![cfg.max_len, d])?;
        let seg = src.weight("encoder.embed.segment", vec![2, d])?;
        let ln = src.norm("encoder.embed.ln", d)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("encoder.layer{l}");
            layers.push(LayerWeights {
                q: src.linear(&format!("{p}.attn.q"), d, d)?,
                k: src.linear(&format!("{p}.attn.k"), d, d)?,
                v: src.linear(&format!("{p}.attn.v"), d, d)?,
                o: src.linear(&format!("{p}.attn.o"), d, d)?,
                ln1: src.norm(&format!("{p}.attn.ln"), d)?,
                ff1: src.linear(&format!("{p}.ffn.in"), d, cfg.ffn_dim())?,
                ff2: src.linear(&format!("{p}.ffn.out"), cfg.ffn_dim(), d)?,
                ln2: src.norm(&format!("{p}.ffn.ln"), d)?,
            });
        }
        Ok(EncoderWeights { tok, pos, seg, ln, layers })
    }

    /// Register freshly initialised encoder parameters.
    pub fn init(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<EncoderWeights, NnError> {
        Self::build(Source::Init(store, rng), cfg)
    }

    pub fn lookup(store: &ParamStore, cfg: &EncoderConfig) -> Result<EncoderWeights, NnError> {
        Self::build::<ChaCha8Rng>(Source::Lookup(store), cfg)
    }
}

/// Inverted dropout driven by a seeded generator.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Dropout {
        Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var, NnError> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let (r, c) = tape.shape(x);
        let keep = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let m = tape.constant(&Tensor::matrix(r, c, mask)?);
        tape.mul(x, m)
    }
}

/// Output of the shared layers for one sequence.
#[derive(Debug, Clone, Copy)]
pub struct PairEncoding {
    /// `[seq_len x d_model]`
    pub token_states: Var,
    /// First-position (`[CLS]`) state, `[1 x d_model]`.
    pub summary: Var,
    pub segment_boundary: usize,
    pub len: usize,
}

fn drop(tape: &mut Tape<'_>, dropout: &mut Option<&mut Dropout>, x: Var) -> Result<Var, NnError> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

fn norm(tape: &mut Tape<'_>, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var, NnError> {
    let n = tape.layer_norm_rows(x, LN_EPS);
    let gv = tape.param(g);
    let bv = tape.param(b);
    let scaled = tape.mul_row(n, gv)?;
    tape.add_row(scaled, bv)
}

/// Post-norm transformer encoder forward pass.
pub fn encode(
    tape: &mut Tape<'_>,
    w: &EncoderWeights,
    cfg: &EncoderConfig,
    ids: &[usize],
    segments: &[usize],
    mut dropout: Option<&mut Dropout>,
) -> Result<PairEncoding, NnError> {
    let n = ids.len();
    if n == 0 || n > cfg.max_len || segments.len() != n {
        return Err(NnError::ShapeMismatch(format!(
            "sequence of {n} ids / {} segments with max_len {}",
            segments.len(),
            cfg.max_len
        )));
    }
    if segments.iter().any(|&s| s > 1) {
        return Err(NnError::ShapeMismatch("segment ids must be 0 or 1".into()));
    }
    let positions: Vec<usize> = (0..n).collect();
    let tok = tape.embed(w.tok, ids)?;
    let pos = tape.embed(w.pos, &positions)?;
    let seg = tape.embed(w.seg, segments)?;
    let x = tape.add(tok, pos)?;
    let x = tape.add(x, seg)?;
    let x = norm(tape, x, w.ln)?;
    let mut x = drop(tape, &mut dropout, x)?;

    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for layer in &w.layers {
        let q = tape.linear(x, layer.q.0, layer.q.1)?;
        let k = tape.linear(x, layer.k.0, layer.k.1)?;
        let v = tape.linear(x, layer.v.0, layer.v.1)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let out = tape.linear(ctx, layer.o.0, layer.o.1)?;
        let out = drop(tape, &mut dropout, out)?;
        let res = tape.add(x, out)?;
        x = norm(tape, res, layer.ln1)?;

        let hidden = tape.linear(x, layer.ff1.0, layer.ff1.1)?;
        let hidden = tape.gelu(hidden);
        let out = tape.linear(hidden, layer.ff2.0, layer.ff2.1)?;
        let out = drop(tape, &mut dropout, out)?;
        let res = tape.add(x, out)?;
        x = norm(tape, res, layer.ln2)?;
    }
    let summary = tape.slice_rows(x, 0, 1)?;
    let segment_boundary = segments.iter().position(|&s| s == 1).unwrap_or(n);
    Ok(PairEncoding {
        token_states: x,
        summary,
        segment_boundary,
        len: n,
    })
}
