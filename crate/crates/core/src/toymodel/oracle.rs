//! Planted-oracle attention generator.
//!
//! Stands in for a pretrained model whose important heads are known: a
//! planted head with weight `w` puts attention mass `w` on the answer while
//! decoding, and boosts the answer positions by `needle_boost * w` in its
//! prefill observation window. Every other head attends to noise.

use serde::{Deserialize, Serialize};

use super::trace::{AttentionTrace, StepRecord};
use crate::error::{Error, Result};
use crate::heads::{HeadGrid, HeadId, Shape};
use crate::numkit::{softmax, splitmix64, Matrix, SeededRng};
use crate::probes::{NeedleExample, Span, Token, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedHead {
    pub layer: usize,
    pub head: usize,
    pub weight: f64,
}

impl PlantedHead {
    pub fn id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }
}

/// Shape of the oracle's prefill observation-window attention.
///
/// Each head draws a per-position salience `sigma * g_j` (`g_j` standard
/// normal, shared by all window rows), each row adds `row_jitter * e_rj`,
/// and planted heads add `needle_boost * w` on the focus positions. Rows
/// are causal softmaxes of these logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefillShape {
    pub salience_sigma: f64,
    pub row_jitter: f64,
    pub needle_boost: f64,
}

impl Default for PrefillShape {
    fn default() -> Self {
        Self {
            salience_sigma: 1.5,
            row_jitter: 0.5,
            needle_boost: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedOracleSpec {
    pub model_shape: Shape,
    pub planted: Vec<PlantedHead>,
    pub noise_seed: u64,
    #[serde(default)]
    pub prefill: PrefillShape,
}

impl PlantedOracleSpec {
    pub fn new(model_shape: Shape, planted: Vec<PlantedHead>, noise_seed: u64) -> Result<Self> {
        let spec = Self {
            model_shape,
            planted,
            noise_seed,
            prefill: PrefillShape::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Plants `round(fraction * L * H)` distinct heads, chosen by `seed`,
    /// all with the same `weight`.
    pub fn random(model_shape: Shape, fraction: f64, weight: f64, seed: u64) -> Result<Self> {
        let n = model_shape.n_heads();
        let count = (fraction * n as f64).round() as usize;
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::config("planted fraction must lie in [0, 1]"));
        }
        let mut rng = SeededRng::derive(seed, &[0x0050_4c41_4e54]);
        let mut chosen = rng.sample_distinct(n, count);
        chosen.sort_unstable();
        let planted = chosen
            .into_iter()
            .map(|i| {
                let id = model_shape.id(i);
                PlantedHead {
                    layer: id.layer,
                    head: id.head,
                    weight,
                }
            })
            .collect();
        Self::new(model_shape, planted, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_shape.n_heads() == 0 {
            return Err(Error::config("oracle shape must have at least one head"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.planted {
            if !self.model_shape.contains(p.id()) {
                return Err(Error::config(format!(
                    "planted head {} outside model shape",
                    p.id()
                )));
            }
            if !(0.0..=1.0).contains(&p.weight) {
                return Err(Error::config(format!(
                    "plant weight {} outside [0, 1]",
                    p.weight
                )));
            }
            if !seen.insert(p.id()) {
                return Err(Error::config(format!("head {} planted twice", p.id())));
            }
        }
        let s = &self.prefill;
        if !(s.salience_sigma >= 0.0 && s.row_jitter >= 0.0 && s.needle_boost >= 0.0) {
            return Err(Error::config(
                "oracle prefill parameters must be non-negative",
            ));
        }
        Ok(())
    }

    /// Plant weight per head (0 for unplanted heads).
    pub fn weights(&self) -> HeadGrid<f64> {
        let mut g = HeadGrid::from_fn(self.model_shape, |_| 0.0);
        for p in &self.planted {
            g[p.id()] = p.weight;
        }
        g
    }

    /// Heads with a positive plant weight, in `(layer, head)` order.
    pub fn planted_ids(&self) -> Vec<HeadId> {
        let mut ids: Vec<HeadId> = self
            .planted
            .iter()
            .filter(|p| p.weight > 0.0)
            .map(PlantedHead::id)
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Mean plant weight over heads with positive weight (0 if none).
    pub fn mean_plant_weight(&self) -> f64 {
        let ws: Vec<f64> = self
            .planted
            .iter()
            .map(|p| p.weight)
            .filter(|&w| w > 0.0)
            .collect();
        if ws.is_empty() {
            0.0
        } else {
            ws.iter().sum::<f64>() / ws.len() as f64
        }
    }

    /// Emission rule under a compressed cache: the answer token at
    /// `position` is produced iff the plant weight of the heads that still
    /// hold `position`, averaged over all planted heads, reaches 0.5.
    pub fn emits_with(&self, retained: &HeadGrid<Vec<usize>>, position: usize) -> bool {
        let ids = self.planted_ids();
        if ids.is_empty() {
            return false;
        }
        let weights = self.weights();
        let held: f64 = ids
            .iter()
            .filter(|&&id| retained[id].binary_search(&position).is_ok())
            .map(|&id| weights[id])
            .sum();
        held / ids.len() as f64 >= 0.5
    }
}

/// Stable 64-bit key of a token sequence, used to give every example its
/// own noise stream.
pub fn token_key(tokens: &[Token]) -> u64 {
    let mut state = tokens.len() as u64;
    let mut acc = splitmix64(&mut state);
    for &t in tokens {
        let mut s = acc ^ u64::from(t);
        acc = splitmix64(&mut s);
    }
    acc
}

/// Decode-time attention of the planted oracle over `example.context`.
///
/// Planted head with weight `w > 0`, step `t`: `0.8 w` on the `t`-th span
/// token, `0.2 w` spread evenly over the other span tokens, `1 - w` spread
/// evenly over the non-span positions. Other heads: `1/n` plus uniform
/// noise of amplitude `0.5/n` per position, renormalised. The emitted token
/// is the `t`-th span token when the mean plant weight is at least 0.5 and
/// the noise token otherwise.
pub fn oracle_trace(
    spec: &PlantedOracleSpec,
    example: &NeedleExample,
    target_span: Span,
) -> Result<AttentionTrace> {
    spec.validate()?;
    let n = example.context.len();
    if target_span.is_empty() || target_span.end() > n {
        return Err(Error::range(format!(
            "target span {}..{} outside context of {n}",
            target_span.start,
            target_span.end()
        )));
    }
    let steps_n = target_span.len;
    let weights = spec.weights();
    let correct = spec.mean_plant_weight() >= 0.5;
    let mut rng = SeededRng::derive(
        spec.noise_seed,
        &[token_key(&example.context), target_span.start as u64],
    );
    let amp = 0.5 / n as f64;
    let off_span = n - steps_n;

    let mut steps = Vec::with_capacity(steps_n);
    for t in 0..steps_n {
        let focus = target_span.start + t;
        let attention = HeadGrid::from_fn(spec.model_shape, |id| {
            let w = weights[id];
            if w > 0.0 {
                let mut a = vec![0.0; n];
                if off_span > 0 {
                    let each = (1.0 - w) / off_span as f64;
                    a.iter_mut().for_each(|x| *x = each);
                }
                if steps_n == 1 {
                    a[focus] = w;
                } else {
                    let rest = 0.2 * w / (steps_n - 1) as f64;
                    for p in target_span.positions() {
                        a[p] = rest;
                    }
                    a[focus] = 0.8 * w;
                }
                if off_span == 0 {
                    let s: f64 = a.iter().sum();
                    a.iter_mut().for_each(|x| *x /= s);
                }
                a
            } else {
                let mut a: Vec<f64> = (0..n)
                    .map(|_| 1.0 / n as f64 + rng.uniform(-amp, amp))
                    .collect();
                let s: f64 = a.iter().sum();
                a.iter_mut().for_each(|x| *x /= s);
                a
            }
        });
        let emitted_token = if correct {
            example.context[focus]
        } else {
            Vocab::NOISE
        };
        steps.push(StepRecord {
            emitted_token,
            attention,
        });
    }
    Ok(AttentionTrace {
        shape: spec.model_shape,
        prompt_len: n,
        retained: None,
        steps,
    })
}

/// Prefill observation-window attention: for every head, the last `alpha`
/// query rows over a prompt of `prompt_len` positions. Planted heads boost
/// every position inside `focus`.
pub fn oracle_window_attention(
    spec: &PlantedOracleSpec,
    prompt_len: usize,
    focus: &[Span],
    alpha: usize,
    key: u64,
) -> Result<HeadGrid<Matrix>> {
    spec.validate()?;
    if alpha == 0 || alpha > prompt_len {
        return Err(Error::invalid(format!(
            "window of {alpha} rows over a prompt of {prompt_len}"
        )));
    }
    if let Some(s) = focus.iter().find(|s| s.end() > prompt_len) {
        return Err(Error::range(format!(
            "focus span ending at {} outside prompt",
            s.end()
        )));
    }
    let n = prompt_len;
    let weights = spec.weights();
    let shape = spec.prefill;
    let mut in_focus = vec![false; n];
    for s in focus {
        in_focus[s.positions()].iter_mut().for_each(|f| *f = true);
    }

    let mut out = Vec::with_capacity(spec.model_shape.n_heads());
    for id in spec.model_shape.iter() {
        let mut rng = SeededRng::derive(
            spec.noise_seed,
            &[key, spec.model_shape.flat(id) as u64, 0x5749_4e44],
        );
        let boost = shape.needle_boost * weights[id];
        let base: Vec<f64> = (0..n)
            .map(|j| {
                let z = shape.salience_sigma * rng.gaussian();
                if in_focus[j] {
                    z + boost
                } else {
                    z
                }
            })
            .collect();
        let mut m = Matrix::zeros(alpha, n);
        for r in 0..alpha {
            let q = n - alpha + r;
            let logits: Vec<f64> = base[..=q]
                .iter()
                .map(|z| z + shape.row_jitter * rng.gaussian())
                .collect();
            m.row_mut(r)[..=q].copy_from_slice(&softmax(&logits)?);
        }
        out.push(m);
    }
    HeadGrid::from_vec(spec.model_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::score_retrieval;
    use crate::probes::make_retrieval_example;

    fn example(n: usize) -> NeedleExample {
        let hay = vec![300u32; n];
        make_retrieval_example(&hay, &[20, 21, 22, 23], &[1, 2], 0.5).unwrap()
    }

    fn one_head(w: f64, noise_seed: u64) -> PlantedOracleSpec {
        let planted = if w > 0.0 {
            vec![PlantedHead {
                layer: 0,
                head: 0,
                weight: w,
            }]
        } else {
            vec![]
        };
        PlantedOracleSpec::new(Shape::new(1, 2), planted, noise_seed).unwrap()
    }

    #[test]
    fn full_weight_step_two() {
        let ex = example(100);
        let trace = oracle_trace(&one_head(1.0, 1), &ex, ex.needle_span).unwrap();
        let a = &trace.steps[2].attention[HeadId::new(0, 0)];
        let s = ex.needle_span.start;
        assert!((a[s + 2] - 0.8).abs() < 1e-15);
        for p in [s, s + 1, s + 3] {
            assert!((a[p] - 0.2 / 3.0).abs() < 1e-15);
        }
        let off: f64 = (0..100)
            .filter(|p| !ex.needle_span.contains(*p))
            .map(|p| a[p])
            .sum();
        assert_eq!(off, 0.0);
        trace.validate().unwrap();
    }

    #[test]
    fn unplanted_head_is_near_uniform() {
        let ex = example(200);
        let trace = oracle_trace(&one_head(0.0, 4), &ex, ex.needle_span).unwrap();
        for step in &trace.steps {
            for (_, a) in step.attention.iter() {
                let max = a.iter().cloned().fold(0.0, f64::max);
                assert!(max < 2.0 / 200.0);
            }
        }
        assert!(trace.steps.iter().all(|s| s.emitted_token == Vocab::NOISE));
    }

    #[test]
    fn same_noise_seed_same_trace() {
        let ex = example(64);
        let spec = PlantedOracleSpec::random(Shape::new(2, 4), 0.25, 0.9, 3).unwrap();
        assert_eq!(
            oracle_trace(&spec, &ex, ex.needle_span).unwrap(),
            oracle_trace(&spec, &ex, ex.needle_span).unwrap()
        );
        assert!(oracle_trace(&spec, &ex, Span::new(60, 8)).is_err());
    }

    #[test]
    fn retrieval_score_grows_with_plant_weight() {
        let ex = example(128);
        let mut last = -1.0;
        for w in [0.0, 0.25, 0.5, 0.75, 1.0] {
            // a second always-on head keeps the emission rule satisfied
            let planted = {
                let mut p = vec![PlantedHead {
                    layer: 0,
                    head: 1,
                    weight: 1.0,
                }];
                if w > 0.0 {
                    p.push(PlantedHead {
                        layer: 0,
                        head: 0,
                        weight: w,
                    });
                }
                p
            };
            let spec = PlantedOracleSpec::new(Shape::new(1, 2), planted, 8).unwrap();
            let trace = oracle_trace(&spec, &ex, ex.needle_span).unwrap();
            let s = score_retrieval(&trace, ex.needle_span, &ex.target, &ex.context).unwrap()
                [HeadId::new(0, 0)];
            assert!(s >= last, "w={w}: {s} < {last}");
            last = s;
        }
    }

    #[test]
    fn window_attention_is_causal_and_boosted() {
        let spec = PlantedOracleSpec::random(Shape::new(2, 2), 0.5, 1.0, 5).unwrap();
        let focus = [Span::new(10, 4)];
        let win = oracle_window_attention(&spec, 64, &focus, 8, 99).unwrap();
        for (id, m) in win.iter() {
            assert_eq!((m.rows(), m.cols()), (8, 64));
            for r in 0..8 {
                let q = 56 + r;
                assert!(m.row(r)[q + 1..].iter().all(|&x| x == 0.0));
                assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12, "{id}");
            }
        }
        assert_eq!(
            win,
            oracle_window_attention(&spec, 64, &focus, 8, 99).unwrap()
        );
        assert!(oracle_window_attention(&spec, 64, &focus, 0, 99).is_err());
    }

    #[test]
    fn emission_needs_half_the_weight() {
        let spec = PlantedOracleSpec::new(
            Shape::new(1, 3),
            vec![
                PlantedHead {
                    layer: 0,
                    head: 0,
                    weight: 1.0,
                },
                PlantedHead {
                    layer: 0,
                    head: 1,
                    weight: 0.5,
                },
            ],
            0,
        )
        .unwrap();
        let mut kept = HeadGrid::from_fn(Shape::new(1, 3), |_| vec![1, 5, 9]);
        assert!(spec.emits_with(&kept, 5));
        kept[HeadId::new(0, 1)] = vec![1, 9];
        assert!(spec.emits_with(&kept, 5)); // (1.0 + 0) / 2
        kept[HeadId::new(0, 0)] = vec![1, 9];
        kept[HeadId::new(0, 1)] = vec![5];
        assert!(!spec.emits_with(&kept, 5)); // (0 + 0.5) / 2
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = vec![PlantedHead {
            layer: 0,
            head: 0,
            weight: 1.5,
        }];
        assert!(PlantedOracleSpec::new(Shape::new(1, 1), bad, 0).is_err());
        let dup = vec![
            PlantedHead {
                layer: 0,
                head: 0,
                weight: 0.5,
            },
            PlantedHead {
                layer: 0,
                head: 0,
                weight: 0.5,
            },
        ];
        assert!(PlantedOracleSpec::new(Shape::new(1, 1), dup, 0).is_err());
        let outside = vec![PlantedHead {
            layer: 1,
            head: 0,
            weight: 0.5,
        }];
        assert!(PlantedOracleSpec::new(Shape::new(1, 1), outside, 0).is_err());
    }
}
