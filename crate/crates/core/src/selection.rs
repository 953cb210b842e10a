//! Per-head KV selection from observation-window attention.
//!
//! The last `alpha` prompt positions form the observation window. Their
//! attention rows are summed per column over the earlier positions, the
//! sums are pooled over a small neighbourhood, and each head keeps its
//! `budget` highest-scoring positions plus the whole window.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::allocation::BudgetPlan;
use crate::error::{Error, Result};
use crate::heads::HeadGrid;
use crate::kvstore::{memory_report, CacheReport, HeadCache};
use crate::numkit::{top_k_indices, Matrix};
use crate::probes::Token;
use crate::toymodel::{AttentionRows, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingConfig {
    /// Observation window length; these positions are always retained.
    pub alpha: usize,
    /// Pooling neighbourhood width, odd (1 disables pooling).
    pub kernel: usize,
    #[serde(default)]
    pub mode: PoolMode,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self {
            alpha: 8,
            kernel: 7,
            mode: PoolMode::Max,
        }
    }
}

impl PoolingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0 {
            return Err(Error::config("observation window alpha must be at least 1"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "pooling kernel must be odd, got {}",
                self.kernel
            )));
        }
        Ok(())
    }
}

/// Pooled observation scores for one head.
///
/// `window` holds the last `cfg.alpha` attention rows over all `n` prompt
/// positions. The result has one entry per position in `[0, n - alpha)`.
pub fn pooled_scores(window: &Matrix, cfg: &PoolingConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = window.cols();
    if window.rows() != cfg.alpha {
        return Err(Error::shape(format!(
            "expected {} window rows, got {}",
            cfg.alpha,
            window.rows()
        )));
    }
    if cfg.alpha >= n {
        return Err(Error::invalid(format!(
            "window of {} leaves no positions to score in a prompt of {n}",
            cfg.alpha
        )));
    }
    let m = n - cfg.alpha;
    let mut raw = vec![0.0; m];
    for r in 0..window.rows() {
        for (s, a) in raw.iter_mut().zip(&window.row(r)[..m]) {
            *s += a;
        }
    }
    if cfg.kernel == 1 {
        return Ok(raw);
    }
    let half = cfg.kernel / 2;
    Ok((0..m)
        .map(|j| {
            let lo = j.saturating_sub(half);
            let hi = (j + half).min(m - 1);
            let nb = &raw[lo..=hi];
            match cfg.mode {
                PoolMode::Max => nb.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                PoolMode::Mean => nb.iter().sum::<f64>() / nb.len() as f64,
            }
        })
        .collect())
}

/// Pooled scores for every head.
pub fn pooled_grid(window: &HeadGrid<Matrix>, cfg: &PoolingConfig) -> Result<HeadGrid<Vec<f64>>> {
    let values = window
        .values()
        .iter()
        .map(|w| pooled_scores(w, cfg))
        .collect::<Result<Vec<_>>>()?;
    HeadGrid::from_vec(window.shape(), values)
}

/// Sorted positions kept by one head: the `budget` best pooled positions
/// (ties to the lower index) plus the window `[n - alpha, n)`. Plans must
/// be clamped first: `budget + alpha` may not exceed `n`.
pub fn select_retained(
    pooled: &[f64],
    budget: usize,
    n: usize,
    alpha: usize,
) -> Result<Vec<usize>> {
    if alpha > n {
        return Err(Error::invalid(format!(
            "window of {alpha} exceeds prompt of {n}"
        )));
    }
    let m = n - alpha;
    if pooled.len() != m {
        return Err(Error::shape(format!(
            "{} pooled scores for {m} positions",
            pooled.len()
        )));
    }
    if budget > m {
        return Err(Error::invalid(format!(
            "budget {budget} plus window {alpha} exceeds the prompt of {n}"
        )));
    }
    let mut kept = top_k_indices(pooled, budget)?;
    kept.sort_unstable();
    kept.extend(m..n);
    Ok(kept)
}

/// Evicts every head's cache down to its selected positions.
///
/// `caches` must hold the full prompt of `n` positions. The report counts
/// `alpha` window entries per head in `window_entries`.
pub fn compress_with_scores(
    caches: &HeadGrid<HeadCache>,
    pooled: &HeadGrid<Vec<f64>>,
    plan: &BudgetPlan,
    n: usize,
) -> Result<(HeadGrid<HeadCache>, CacheReport)> {
    let shape = caches.shape();
    if pooled.shape() != shape || plan.shape() != shape {
        return Err(Error::shape(
            "caches, pooled scores and plan cover different heads",
        ));
    }
    let mut out = Vec::with_capacity(shape.n_heads());
    for id in shape.iter() {
        let cache = &caches[id];
        if cache.len() != n {
            return Err(Error::shape(format!(
                "{id} holds {} entries, expected {n}",
                cache.len()
            )));
        }
        let kept = select_retained(&pooled[id], plan.per_head[id], n, plan.alpha)?;
        let idx: Vec<usize> = kept
            .iter()
            .map(|p| {
                cache
                    .positions()
                    .binary_search(p)
                    .map_err(|_| Error::range(format!("{id} lacks position {p}")))
            })
            .collect::<Result<_>>()?;
        out.push(cache.evict_to(&idx)?);
    }
    let compressed = HeadGrid::from_vec(shape, out)?;
    let mut report = memory_report(&compressed, n)?;
    report.window_entries = plan.alpha * shape.n_heads();
    Ok((compressed, report))
}

/// Positions-only caches for a prompt of `n` tokens, as used by the
/// planted oracle where no keys or values exist.
pub fn full_position_caches(shape: crate::heads::Shape, n: usize) -> Result<HeadGrid<HeadCache>> {
    let values = (0..shape.n_heads())
        .map(|_| HeadCache::positions_only((0..n).collect()))
        .collect::<Result<Vec<_>>>()?;
    HeadGrid::from_vec(shape, values)
}

#[derive(Debug, Clone)]
pub struct Compressed {
    pub caches: HeadGrid<HeadCache>,
    pub report: CacheReport,
    pub pooled: HeadGrid<Vec<f64>>,
    /// Next-token logits after the full prompt.
    pub logits: Vec<f64>,
}

/// Prefills `prompt` on the toy model and compresses each head's cache to
/// `plan`, scoring positions from the model's own window attention.
pub fn compress(
    model: &Model,
    prompt: &[Token],
    plan: &BudgetPlan,
    cfg: &PoolingConfig,
) -> Result<Compressed> {
    cfg.validate()?;
    if plan.alpha != cfg.alpha {
        return Err(Error::config(format!(
            "plan window {} differs from pooling window {}",
            plan.alpha, cfg.alpha
        )));
    }
    let out = model.prefill(prompt, AttentionRows::Last(cfg.alpha))?;
    let pooled = pooled_grid(&out.attention, cfg)?;
    let (caches, report) = compress_with_scores(&out.caches, &pooled, plan, prompt.len())?;
    Ok(Compressed {
        caches,
        report,
        pooled,
        logits: out.logits,
    })
}

/// Retained original positions per head.
pub fn retained_positions(caches: &HeadGrid<HeadCache>) -> HeadGrid<Vec<usize>> {
    caches.map(|c| c.positions().to_vec())
}

/// Retained positions as a nested `L × H` JSON array.
pub fn write_retained_json<W: Write>(caches: &HeadGrid<HeadCache>, out: W) -> Result<()> {
    serde_json::to_writer(out, &retained_positions(caches))?;
    Ok(())
}
