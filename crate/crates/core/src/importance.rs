//! Per-head importance estimation from attention traces.
//!
//! Three estimators are provided:
//!
//! * **R** ([`score_retrieval`]): a head earns `1/N` for every decoding
//!   step whose argmax attention position lies inside the needle *and*
//!   holds the token being emitted.
//! * **R2** ([`score_r2`]): a head earns `a_i / N` for each of its top-`N`
//!   attention entries `a_i` that falls inside the correct answer span,
//!   summed over all `N` steps (`N` = answer length).
//! * **ER** ([`score_enhanced_retrieval`]): the R2 rule applied to plain
//!   retrieval examples, with the whole needle as the answer.
//!
//! Span membership is decided by original position, never by token value.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{HeadGrid, Shape};
use crate::numkit::{argmax, top_k_indices};
use crate::probes::{Span, Token};
use crate::toymodel::AttentionTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    R,
    ER,
    R2,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::R => "R",
            Estimator::ER => "ER",
            Estimator::R2 => "R2",
        })
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "R" | "r" => Ok(Estimator::R),
            "ER" | "er" => Ok(Estimator::ER),
            "R2" | "r2" => Ok(Estimator::R2),
            other => Err(Error::config(format!(
                "unknown estimator '{other}' (expected R, ER or R2)"
            ))),
        }
    }
}

/// Importance distribution over all heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub shape: Shape,
    pub raw: HeadGrid<f64>,
    pub normalized: HeadGrid<f64>,
    #[serde(rename = "tag")]
    pub estimator_tag: Estimator,
}

impl ImportanceScores {
    /// Normalises `raw` to sum to one, or to the uniform distribution when
    /// every raw score is zero.
    pub fn from_raw(raw: HeadGrid<f64>, estimator_tag: Estimator) -> Result<Self> {
        if raw.values().iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::invalid(
                "raw importance scores must be finite and non-negative",
            ));
        }
        let total: f64 = raw.values().iter().sum();
        let n = raw.shape().n_heads() as f64;
        let normalized = if total > 0.0 {
            raw.map(|x| x / total)
        } else {
            raw.map(|_| 1.0 / n)
        };
        Ok(Self {
            shape: raw.shape(),
            raw,
            normalized,
            estimator_tag,
        })
    }

    /// Uniform distribution (every head `1/(L·H)`).
    pub fn uniform(shape: Shape, estimator_tag: Estimator) -> Self {
        Self::from_raw(HeadGrid::from_fn(shape, |_| 0.0), estimator_tag).expect("zeros are valid")
    }

    /// `L` rows × `H` columns of normalised scores, no header.
    pub fn write_heatmap_csv<W: Write>(&self, out: W) -> Result<()> {
        write_grid_csv(&self.normalized, out)
    }
}

pub(crate) fn write_grid_csv<T: ToString, W: Write>(grid: &HeadGrid<T>, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    for l in 0..grid.shape().layers {
        w.write_record(grid.layer(l).iter().map(ToString::to_string))?;
    }
    w.flush()?;
    Ok(())
}

fn check_steps(trace: &AttentionTrace, n: usize) -> Result<()> {
    if trace.len() != n {
        return Err(Error::invalid(format!(
            "trace has {} steps but the answer has {n} tokens",
            trace.len()
        )));
    }
    Ok(())
}

/// Retrieval-head score of every head for one example.
pub fn score_retrieval(
    trace: &AttentionTrace,
    needle_span: Span,
    target: &[Token],
    context: &[Token],
) -> Result<HeadGrid<f64>> {
    let n = target.len();
    if n == 0 {
        return Err(Error::Empty("target"));
    }
    check_steps(trace, n)?;
    let unit = 1.0 / n as f64;
    let mut scores = HeadGrid::from_fn(trace.shape, |_| 0.0);
    for step in &trace.steps {
        for (id, a) in step.attention.iter() {
            let Some(idx) = argmax(a) else { continue };
            let pos = trace.position_of(id, idx);
            if needle_span.contains(pos) && context.get(pos) == Some(&step.emitted_token) {
                scores[id] += unit;
            }
        }
    }
    Ok(scores)
}

/// Retrieval-reasoning score of every head for one example.
pub fn score_r2(trace: &AttentionTrace, correct_span: Span) -> Result<HeadGrid<f64>> {
    let n = correct_span.len;
    if n == 0 {
        return Err(Error::Empty("correct answer span"));
    }
    check_steps(trace, n)?;
    let nf = n as f64;
    let mut scores = HeadGrid::from_fn(trace.shape, |_| 0.0);
    for step in &trace.steps {
        for (id, a) in step.attention.iter() {
            let top = top_k_indices(a, n.min(a.len()))?;
            let mass: f64 = top
                .into_iter()
                .filter(|&i| correct_span.contains(trace.position_of(id, i)))
                .map(|i| a[i] / nf)
                .sum();
            scores[id] += mass;
        }
    }
    Ok(scores)
}

/// The R2 rule scored against a whole retrieval needle.
pub fn score_enhanced_retrieval(
    trace: &AttentionTrace,
    needle_span: Span,
) -> Result<HeadGrid<f64>> {
    score_r2(trace, needle_span)
}

/// Unweighted mean of per-example scores, then normalisation.
pub fn aggregate(
    per_example: &[HeadGrid<f64>],
    estimator_tag: Estimator,
) -> Result<ImportanceScores> {
    let first = per_example
        .first()
        .ok_or(Error::Empty("per-example scores"))?;
    let shape = first.shape();
    let mut sum = HeadGrid::from_fn(shape, |_| 0.0);
    for s in per_example {
        if s.shape() != shape {
            return Err(Error::shape("per-example score grids disagree in shape"));
        }
        for (acc, x) in sum.values_mut().iter_mut().zip(s.values()) {
            *acc += x;
        }
    }
    let count = per_example.len() as f64;
    ImportanceScores::from_raw(sum.map(|x| x / count), estimator_tag)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub zero_fraction_a: f64,
    pub zero_fraction_b: f64,
    pub topk_overlap: f64,
}

/// Heads with the `k` highest raw scores (lowest index on ties).
pub fn top_heads(scores: &ImportanceScores, k: usize) -> Result<Vec<usize>> {
    top_k_indices(scores.raw.values(), k)
}

/// Sparsity of two distributions and the overlap of their top-`k` heads.
pub fn distribution_stats(
    a: &ImportanceScores,
    b: &ImportanceScores,
    k: usize,
) -> Result<DistributionStats> {
    if a.shape != b.shape {
        return Err(Error::shape("distributions have different shapes"));
    }
    let n = a.shape.n_heads();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("top-{k} overlap over {n} heads")));
    }
    let zero = |s: &ImportanceScores| {
        s.raw.values().iter().filter(|&&x| x == 0.0).count() as f64 / n as f64
    };
    let top_a = top_heads(a, k)?;
    let top_b = top_heads(b, k)?;
    let shared = top_a.iter().filter(|i| top_b.contains(i)).count();
    Ok(DistributionStats {
        zero_fraction_a: zero(a),
        zero_fraction_b: zero(b),
        topk_overlap: shared as f64 / k as f64,
    })
}

/// Ranks starting at 1, ties receiving their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape(
            "spearman needs two equally long series of at least two values",
        ));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::invalid("spearman undefined for a constant series"));
    }
    Ok(cov / (va * vb).sqrt())
}
