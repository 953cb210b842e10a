//! Attention-only decoder: token + absolute position embeddings, `L`
//! multi-head attention blocks with residual connections, and an
//! unembedding. No MLPs and no normalisation.

use serde::{Deserialize, Serialize};

use super::trace::{AttentionTrace, StepRecord};
use crate::error::{Error, Result};
use crate::heads::{HeadGrid, HeadId, Shape};
use crate::kvstore::HeadCache;
use crate::numkit::{argmax, dot, matmul, softmax, vecmat, Matrix, SeededRng};
use crate::probes::Token;

fn default_max_context() -> usize {
    4096
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Size of the position-embedding table.
    #[serde(default = "default_max_context")]
    pub max_context: usize,
}

impl ModelSpec {
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_head: usize,
        vocab_size: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model: n_heads * d_head,
            d_head,
            vocab_size,
            seed,
            max_context: default_max_context(),
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.n_layers, self.n_heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 {
            return Err(Error::config(
                "model needs at least one layer, head and head dimension",
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) || self.d_model / self.n_heads != self.d_head
        {
            return Err(Error::config(format!(
                "d_model {} is not n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.vocab_size == 0 || self.max_context == 0 {
            return Err(Error::config("vocab_size and max_context must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    embed: Matrix,
    pos: Matrix,
    blocks: Vec<Block>,
    unembed: Matrix,
}

/// Which prefill attention rows to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionRows {
    All,
    /// Only the final `k` query rows (the observation window).
    Last(usize),
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub caches: HeadGrid<HeadCache>,
    /// Per-head attention rows over all `n` prompt positions; row `i`
    /// belongs to query position `first_row + i` and is zero past it.
    pub attention: HeadGrid<Matrix>,
    pub first_row: usize,
    pub logits: Vec<f64>,
}

/// Weights are drawn uniformly from `[-1/sqrt(d_model), 1/sqrt(d_model)]`
/// in a fixed order: embedding, positions, then `W_Q, W_K, W_V, W_O` per
/// layer, then the unembedding.
pub fn build_toy_model(spec: &ModelSpec) -> Result<Model> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let scale = 1.0 / (spec.d_model as f64).sqrt();
    let mut draw = |rows: usize, cols: usize| {
        let data = (0..rows * cols)
            .map(|_| rng.uniform(-scale, scale))
            .collect();
        Matrix::new(rows, cols, data)
    };
    let d = spec.d_model;
    let embed = draw(spec.vocab_size, d)?;
    let pos = draw(spec.max_context, d)?;
    let mut blocks = Vec::with_capacity(spec.n_layers);
    for _ in 0..spec.n_layers {
        blocks.push(Block {
            wq: draw(d, d)?,
            wk: draw(d, d)?,
            wv: draw(d, d)?,
            wo: draw(d, d)?,
        });
    }
    let unembed = draw(d, spec.vocab_size)?;
    Ok(Model {
        spec: spec.clone(),
        embed,
        pos,
        blocks,
        unembed,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn shape(&self) -> Shape {
        self.spec.shape()
    }

    fn input_row(&self, token: Token, position: usize) -> Result<Vec<f64>> {
        if token as usize >= self.spec.vocab_size {
            return Err(Error::range(format!(
                "token {token} outside vocabulary of {}",
                self.spec.vocab_size
            )));
        }
        if position >= self.spec.max_context {
            return Err(Error::range(format!(
                "position {position} beyond max context {}",
                self.spec.max_context
            )));
        }
        Ok(self
            .embed
            .row(token as usize)
            .iter()
            .zip(self.pos.row(position))
            .map(|(e, p)| e + p)
            .collect())
    }

    /// Runs the whole prompt, returning full per-head KV caches, the
    /// requested attention rows and the logits at the last position.
    pub fn prefill(&self, tokens: &[Token], rows: AttentionRows) -> Result<PrefillOutput> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Empty("prompt"));
        }
        if n > self.spec.max_context {
            return Err(Error::invalid(format!(
                "prompt of {n} tokens exceeds max context {}",
                self.spec.max_context
            )));
        }
        let first_row = match rows {
            AttentionRows::All => 0,
            AttentionRows::Last(k) => n.saturating_sub(k),
        };
        let (d, dh) = (self.spec.d_model, self.spec.d_head);
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let mut x = Matrix::zeros(n, d);
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i).copy_from_slice(&self.input_row(t, i)?);
        }

        let shape = self.shape();
        let mut caches = Vec::with_capacity(shape.n_heads());
        let mut attention = Vec::with_capacity(shape.n_heads());
        for block in &self.blocks {
            let q = matmul(&x, &block.wq)?;
            let k = matmul(&x, &block.wk)?;
            let v = matmul(&x, &block.wv)?;
            let mut heads_out = Matrix::zeros(n, d);
            for h in 0..self.spec.n_heads {
                let qh = q.column_block(h * dh, dh)?;
                let kh = k.column_block(h * dh, dh)?;
                let vh = v.column_block(h * dh, dh)?;
                let mut recorded = Matrix::zeros(n - first_row, n);
                for i in 0..n {
                    let logits: Vec<f64> = (0..=i)
                        .map(|j| dot(qh.row(i), kh.row(j)) * inv_sqrt)
                        .collect();
                    let a = softmax(&logits)?;
                    let out = &mut heads_out.row_mut(i)[h * dh..(h + 1) * dh];
                    for (j, &aij) in a.iter().enumerate() {
                        for (o, &vj) in out.iter_mut().zip(vh.row(j)) {
                            *o += aij * vj;
                        }
                    }
                    if i >= first_row {
                        recorded.row_mut(i - first_row)[..=i].copy_from_slice(&a);
                    }
                }
                caches.push(HeadCache::new(kh, vh, (0..n).collect())?);
                attention.push(recorded);
            }
            let proj = matmul(&heads_out, &block.wo)?;
            for i in 0..n {
                for (xi, pi) in x.row_mut(i).iter_mut().zip(proj.row(i)) {
                    *xi += pi;
                }
            }
        }
        let logits = vecmat(x.row(n - 1), &self.unembed)?;
        Ok(PrefillOutput {
            caches: HeadGrid::from_vec(shape, caches)?,
            attention: HeadGrid::from_vec(shape, attention)?,
            first_row,
            logits,
        })
    }

    /// Feeds one token at `position`, appending its keys and values to
    /// every head's cache. Returns the next-token logits and each head's
    /// attention over its (updated) cache.
    pub fn step(
        &self,
        caches: &mut HeadGrid<HeadCache>,
        token: Token,
        position: usize,
    ) -> Result<(Vec<f64>, HeadGrid<Vec<f64>>)> {
        if caches.shape() != self.shape() {
            return Err(Error::shape("cache grid does not match the model"));
        }
        let dh = self.spec.d_head;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut x = self.input_row(token, position)?;
        let mut attention = Vec::with_capacity(self.shape().n_heads());
        for (l, block) in self.blocks.iter().enumerate() {
            let q = vecmat(&x, &block.wq)?;
            let k = vecmat(&x, &block.wk)?;
            let v = vecmat(&x, &block.wv)?;
            let mut heads_out = vec![0.0; self.spec.d_model];
            for h in 0..self.spec.n_heads {
                let cache = &mut caches[HeadId::new(l, h)];
                let range = h * dh..(h + 1) * dh;
                cache.append(&k[range.clone()], &v[range.clone()], position)?;
                let qh = &q[range.clone()];
                let logits: Vec<f64> = (0..cache.len())
                    .map(|j| dot(qh, cache.keys().row(j)) * inv_sqrt)
                    .collect();
                let a = softmax(&logits)?;
                let out = &mut heads_out[range];
                for (j, &aj) in a.iter().enumerate() {
                    for (o, &vj) in out.iter_mut().zip(cache.values().row(j)) {
                        *o += aj * vj;
                    }
                }
                attention.push(a);
            }
            let proj = vecmat(&heads_out, &block.wo)?;
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }
        }
        let logits = vecmat(&x, &self.unembed)?;
        Ok((logits, HeadGrid::from_vec(self.shape(), attention)?))
    }

    /// Greedy continuation of `n_tokens` tokens after a prompt of
    /// `prompt_len` tokens whose final logits are `first_logits`.
    pub fn greedy_decode(
        &self,
        mut caches: HeadGrid<HeadCache>,
        prompt_len: usize,
        first_logits: &[f64],
        n_tokens: usize,
    ) -> Result<Vec<Token>> {
        let mut out = Vec::with_capacity(n_tokens);
        if n_tokens == 0 {
            return Ok(out);
        }
        let mut next = argmax(first_logits).ok_or(Error::Empty("logits"))? as Token;
        out.push(next);
        for i in 1..n_tokens {
            let (logits, _) = self.step(&mut caches, next, prompt_len + i - 1)?;
            next = argmax(&logits).ok_or(Error::Empty("logits"))? as Token;
            out.push(next);
        }
        Ok(out)
    }
}

/// Teacher-forced decoding: step `t` feeds `target[t]` at position
/// `prompt_len + t` whatever the model would have predicted, and records
/// attention over the retained cache plus the tokens fed so far.
pub fn decode_teacher_forced(
    model: &Model,
    mut caches: HeadGrid<HeadCache>,
    prompt_len: usize,
    target: &[Token],
) -> Result<AttentionTrace> {
    if target.is_empty() {
        return Err(Error::Empty("target"));
    }
    let complete = caches
        .values()
        .iter()
        .all(|c| c.positions().iter().copied().eq(0..prompt_len));
    let retained = (!complete).then(|| caches.map(|c| c.positions().to_vec()));
    let mut steps = Vec::with_capacity(target.len());
    for (t, &tok) in target.iter().enumerate() {
        let (_, attention) = model.step(&mut caches, tok, prompt_len + t)?;
        steps.push(StepRecord {
            emitted_token: tok,
            attention,
        });
    }
    Ok(AttentionTrace {
        shape: model.shape(),
        prompt_len,
        retained,
        steps,
    })
}
