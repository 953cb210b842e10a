//! Integer KV budgets per head.
//!
//! The head-level policy builds a shared pool: every head keeps a basic
//! budget `b - b/β`, and the pool `B = (b/β)·L·H` is handed out in
//! proportion to the normalised importance `S_h`:
//!
//! ```text
//! target_h = (b - b/β) + S_h · B
//! ```
//!
//! Real targets are turned into integers with largest-remainder
//! apportionment, so every policy conserves `b·L·H` exactly. The protected
//! window of `alpha` tokens is kept on top of these budgets.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{HeadGrid, Shape};
use crate::importance::{write_grid_csv, ImportanceScores};
use crate::numkit::top_k_indices;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Shared budget pool driven by head importance.
    HeadKv,
    /// Same budget for every head.
    Uniform,
    /// Linear ramp from lower to upper layers.
    Pyramid,
    /// Per-layer split by attention concentration.
    Ada,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::HeadKv => "headkv",
            Policy::Uniform => "uniform",
            Policy::Pyramid => "pyramid",
            Policy::Ada => "ada",
        })
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "headkv" => Ok(Policy::HeadKv),
            "uniform" | "snapkv" => Ok(Policy::Uniform),
            "pyramid" | "pyramidkv" => Ok(Policy::Pyramid),
            "ada" | "ada-snapkv" => Ok(Policy::Ada),
            other => Err(Error::config(format!("unknown policy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationConfig {
    /// Base budget per head, in entries.
    pub b: usize,
    /// Pool-size control; the pool takes `b/β` from every head.
    pub beta: f64,
    /// Protected window size, retained in addition to the budget.
    pub alpha: usize,
    pub policy: Policy,
}

impl AllocationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(Error::config("base budget b must be at least 1"));
        }
        if !(self.beta.is_finite() && self.beta > 1.0) {
            return Err(Error::config(format!(
                "beta must be > 1, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// The pool sizes swept for the head-level policy.
pub const BETA_SWEEP: [f64; 8] = [1.005, 1.01, 1.1, 1.2, 1.5, 2.0, 5.0, 10.0];

/// Integer budget per head. `weights` steer redistribution when the plan
/// is clamped to a short sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub per_head: HeadGrid<usize>,
    pub alpha: usize,
    pub total: usize,
    pub weights: HeadGrid<f64>,
}

impl BudgetPlan {
    fn new(per_head: HeadGrid<usize>, alpha: usize, weights: HeadGrid<f64>) -> Self {
        let total = per_head.values().iter().sum();
        Self {
            per_head,
            alpha,
            total,
            weights,
        }
    }

    pub fn shape(&self) -> Shape {
        self.per_head.shape()
    }

    /// `L` rows × `H` columns of integer budgets, no header.
    pub fn write_heatmap_csv<W: Write>(&self, out: W) -> Result<()> {
        write_grid_csv(&self.per_head, out)
    }
}

fn remainder_key(r: f64) -> i64 {
    // quantised so near-equal remainders tie and fall through to priority
    (r * 1e9).round() as i64
}

/// Hamilton apportionment of `total` units over real `targets`.
///
/// Units left after flooring go to the largest fractional parts; ties go to
/// the higher `priority`, then to the lower index. Targets within 1e-9 of
/// an integer are treated as that integer.
pub fn largest_remainder(targets: &[f64], total: usize, priority: &[f64]) -> Vec<usize> {
    assert_eq!(targets.len(), priority.len());
    if targets.is_empty() {
        return Vec::new();
    }
    let snapped: Vec<f64> = targets
        .iter()
        .map(|&t| {
            let t = t.max(0.0);
            if (t - t.round()).abs() < 1e-9 {
                t.round()
            } else {
                t
            }
        })
        .collect();
    let mut out: Vec<usize> = snapped.iter().map(|t| t.floor() as usize).collect();
    let rem: Vec<i64> = snapped
        .iter()
        .map(|t| remainder_key(t - t.floor()))
        .collect();
    let assigned: usize = out.iter().sum();

    let by_priority = |a: usize, b: usize| {
        priority[b]
            .partial_cmp(&priority[a])
            .unwrap_or(Ordering::Equal)
    };
    let mut order: Vec<usize> = (0..targets.len()).collect();
    if assigned <= total {
        order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(by_priority(a, b)).then(a.cmp(&b)));
        let mut left = total - assigned;
        while left > 0 {
            for &i in &order {
                if left == 0 {
                    break;
                }
                out[i] += 1;
                left -= 1;
            }
        }
    } else {
        // floating-point drift overshot the total: take units back from the
        // smallest remainders, lowest priority first
        order.sort_by(|&a, &b| rem[a].cmp(&rem[b]).then(by_priority(b, a)).then(b.cmp(&a)));
        let mut over = assigned - total;
        while over > 0 {
            for &i in &order {
                if over == 0 {
                    break;
                }
                if out[i] > 0 {
                    out[i] -= 1;
                    over -= 1;
                }
            }
        }
    }
    out
}

/// Head-level allocation from a shared budget pool.
pub fn allocate_headkv(scores: &ImportanceScores, cfg: &AllocationConfig) -> Result<BudgetPlan> {
    cfg.validate()?;
    let shape = scores.shape;
    let n = shape.n_heads();
    let b = cfg.b as f64;
    let pool = b / cfg.beta * n as f64;
    let basic = b - b / cfg.beta;
    let s = scores.normalized.values();
    let targets: Vec<f64> = s.iter().map(|&sh| basic + sh * pool).collect();
    let per_head = largest_remainder(&targets, cfg.b * n, s);
    Ok(BudgetPlan::new(
        HeadGrid::from_vec(shape, per_head)?,
        cfg.alpha,
        scores.normalized.clone(),
    ))
}

/// Every head receives exactly `b`.
pub fn allocate_uniform(cfg: &AllocationConfig, shape: Shape) -> Result<BudgetPlan> {
    cfg.validate()?;
    let n = shape.n_heads() as f64;
    Ok(BudgetPlan::new(
        HeadGrid::from_fn(shape, |_| cfg.b),
        cfg.alpha,
        HeadGrid::from_fn(shape, |_| 1.0 / n),
    ))
}

/// Linear per-layer ramp from `3b/2` at the bottom to `b/2` at the top.
pub fn allocate_pyramid(cfg: &AllocationConfig, shape: Shape) -> Result<BudgetPlan> {
    cfg.validate()?;
    if shape.layers < 2 {
        return Err(Error::config(
            "pyramid allocation needs at least two layers",
        ));
    }
    let b = cfg.b as f64;
    let b_min = b / 2.0;
    let b_max = 2.0 * b - b_min;
    let step = (b_max - b_min) / (shape.layers - 1) as f64;
    let targets: Vec<f64> = shape
        .iter()
        .map(|id| b_max - id.layer as f64 * step)
        .collect();
    let per_head = largest_remainder(&targets, cfg.b * shape.n_heads(), &vec![0.0; targets.len()]);
    let sum: f64 = targets.iter().sum();
    Ok(BudgetPlan::new(
        HeadGrid::from_vec(shape, per_head)?,
        cfg.alpha,
        HeadGrid::from_vec(shape, targets.iter().map(|t| t / sum).collect())?,
    ))
}

/// Sum of a head's `b` highest pooled observation scores.
pub fn concentration(pooled: &[f64], b: usize) -> Result<f64> {
    let top = top_k_indices(pooled, b.min(pooled.len()))?;
    Ok(top.into_iter().map(|i| pooled[i]).sum())
}

/// Every layer keeps `b·H`; inside a layer heads share it in proportion to
/// their concentration.
pub fn allocate_ada(
    cfg: &AllocationConfig,
    pooled: &HeadGrid<Vec<f64>>,
    shape: Shape,
) -> Result<BudgetPlan> {
    cfg.validate()?;
    if pooled.shape() != shape {
        return Err(Error::shape("pooled scores do not cover every head"));
    }
    let conc = HeadGrid::from_vec(
        shape,
        pooled
            .values()
            .iter()
            .map(|p| concentration(p, cfg.b))
            .collect::<Result<Vec<f64>>>()?,
    )?;
    let layer_total = cfg.b * shape.heads;
    let mut per_head = Vec::with_capacity(shape.n_heads());
    let mut weights = Vec::with_capacity(shape.n_heads());
    for l in 0..shape.layers {
        let c = conc.layer(l);
        let sum: f64 = c.iter().sum();
        let share: Vec<f64> = if sum > 0.0 {
            c.iter().map(|x| x / sum).collect()
        } else {
            vec![1.0 / shape.heads as f64; shape.heads]
        };
        let targets: Vec<f64> = share.iter().map(|s| s * layer_total as f64).collect();
        per_head.extend(largest_remainder(&targets, layer_total, &share));
        weights.extend(share.iter().map(|s| s / shape.layers as f64));
    }
    Ok(BudgetPlan::new(
        HeadGrid::from_vec(shape, per_head)?,
        cfg.alpha,
        HeadGrid::from_vec(shape, weights)?,
    ))
}

/// Dispatches on `cfg.policy`. Ada needs `pooled`; head-level needs `scores`.
pub fn allocate(
    cfg: &AllocationConfig,
    shape: Shape,
    scores: Option<&ImportanceScores>,
    pooled: Option<&HeadGrid<Vec<f64>>>,
) -> Result<BudgetPlan> {
    match cfg.policy {
        Policy::HeadKv => {
            let s =
                scores.ok_or_else(|| Error::config("headkv allocation needs importance scores"))?;
            if s.shape != shape {
                return Err(Error::shape(
                    "importance scores do not match the model shape",
                ));
            }
            allocate_headkv(s, cfg)
        }
        Policy::Uniform => allocate_uniform(cfg, shape),
        Policy::Pyramid => allocate_pyramid(cfg, shape),
        Policy::Ada => {
            let p = pooled.ok_or_else(|| Error::config("ada allocation needs pooled scores"))?;
            allocate_ada(cfg, p, shape)
        }
    }
}

/// Caps every head at `n - alpha` and hands the excess to uncapped heads
/// in proportion to the plan's weights, repeating until nothing exceeds
/// the cap. Excess that no head can absorb is dropped.
pub fn clamp_to_sequence(plan: &BudgetPlan, n: usize) -> Result<BudgetPlan> {
    if n < plan.alpha {
        return Err(Error::invalid(format!(
            "sequence of {n} tokens is shorter than the protected window {}",
            plan.alpha
        )));
    }
    let cap = n - plan.alpha;
    let mut budgets = plan.per_head.values().to_vec();
    let weights = plan.weights.values();
    loop {
        let mut excess = 0;
        for b in &mut budgets {
            if *b > cap {
                excess += *b - cap;
                *b = cap;
            }
        }
        if excess == 0 {
            break;
        }
        let open: Vec<usize> = (0..budgets.len()).filter(|&i| budgets[i] < cap).collect();
        if open.is_empty() {
            break;
        }
        let w: Vec<f64> = open.iter().map(|&i| weights[i].max(0.0)).collect();
        let wsum: f64 = w.iter().sum();
        let targets: Vec<f64> = if wsum > 0.0 {
            w.iter().map(|x| x / wsum * excess as f64).collect()
        } else {
            vec![excess as f64 / open.len() as f64; open.len()]
        };
        let extra = largest_remainder(&targets, excess, &w);
        for (&i, e) in open.iter().zip(extra) {
            budgets[i] += e;
        }
    }
    Ok(BudgetPlan::new(
        HeadGrid::from_vec(plan.shape(), budgets)?,
        plan.alpha,
        plan.weights.clone(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanValidation {
    pub shape_ok: bool,
    /// `Σ per_head == b·L·H` (only meaningful before clamping).
    pub conservation: bool,
    pub non_negative: bool,
    /// Higher score never gets a smaller budget; `None` without scores.
    pub monotonic: Option<bool>,
}

impl PlanValidation {
    pub fn passed(&self) -> bool {
        self.shape_ok && self.conservation && self.non_negative && self.monotonic.unwrap_or(true)
    }
}

pub fn validate_plan(
    plan: &BudgetPlan,
    cfg: &AllocationConfig,
    shape: Shape,
    scores: Option<&ImportanceScores>,
) -> PlanValidation {
    let shape_ok = plan.shape() == shape;
    let sum: usize = plan.per_head.values().iter().sum();
    let conservation = shape_ok && sum == cfg.b * shape.n_heads() && plan.total == sum;
    let monotonic = scores.filter(|s| s.shape == plan.shape()).map(|s| {
        let sv = s.normalized.values();
        let bv = plan.per_head.values();
        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&a, &b| sv[a].partial_cmp(&sv[b]).unwrap_or(Ordering::Equal));
        // walking up the score order, budgets may only grow across strict score increases
        let mut ok = true;
        let mut max_below = 0usize;
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && sv[order[j + 1]] == sv[order[i]] {
                j += 1;
            }
            let group = &order[i..=j];
            if group.iter().any(|&h| bv[h] < max_below) {
                ok = false;
            }
            max_below = max_below.max(group.iter().map(|&h| bv[h]).max().unwrap_or(0));
            i = j + 1;
        }
        ok
    });
    PlanValidation {
        shape_ok,
        conservation,
        // budgets are unsigned; the check documents the contract
        non_negative: true,
        monotonic,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::Estimator;
    use crate::numkit::SeededRng;
    use proptest::prelude::*;

    fn cfg(b: usize, beta: f64, policy: Policy) -> AllocationConfig {
        AllocationConfig {
            b,
            beta,
            alpha: 8,
            policy,
        }
    }

    fn scores(shape: Shape, raw: Vec<f64>) -> ImportanceScores {
        ImportanceScores::from_raw(HeadGrid::from_vec(shape, raw).unwrap(), Estimator::R2).unwrap()
    }

    #[test]
    fn headkv_pool_arithmetic() {
        let s = scores(Shape::new(2, 2), vec![0.5, 0.25, 0.25, 0.0]);
        let plan = allocate_headkv(&s, &cfg(8, 2.0, Policy::HeadKv)).unwrap();
        assert_eq!(plan.per_head.values(), &[12, 8, 8, 4]);
        assert_eq!(plan.total, 32);
    }

    #[test]
    fn headkv_uniform_scores_give_b() {
        let shape = Shape::new(3, 5);
        let u = ImportanceScores::uniform(shape, Estimator::R);
        for beta in BETA_SWEEP {
            let plan = allocate_headkv(&u, &cfg(64, beta, Policy::HeadKv)).unwrap();
            assert!(
                plan.per_head.values().iter().all(|&x| x == 64),
                "beta {beta}"
            );
            assert_eq!(
                plan.per_head,
                allocate_uniform(&cfg(64, beta, Policy::Uniform), shape)
                    .unwrap()
                    .per_head
            );
        }
        let skew = scores(shape, (0..15).map(|i| (i * i) as f64).collect());
        let plan = allocate_headkv(&skew, &cfg(64, 1e6, Policy::HeadKv)).unwrap();
        assert!(plan.per_head.values().iter().all(|&x| x == 64));
    }

    #[test]
    fn headkv_rejects_small_beta() {
        let s = ImportanceScores::uniform(Shape::new(1, 2), Estimator::R);
        assert!(allocate_headkv(&s, &cfg(8, 1.0, Policy::HeadKv)).is_err());
        assert!(allocate_headkv(&s, &cfg(8, 0.5, Policy::HeadKv)).is_err());
    }

    #[test]
    fn uniform_examples() {
        let plan = allocate_uniform(&cfg(128, 2.0, Policy::Uniform), Shape::new(32, 32)).unwrap();
        assert_eq!(plan.total, 131_072);
        let ones = allocate_uniform(&cfg(1, 2.0, Policy::Uniform), Shape::new(2, 3)).unwrap();
        assert!(ones.per_head.values().iter().all(|&x| x == 1));
    }

    #[test]
    fn pyramid_examples() {
        let c = cfg(8, 2.0, Policy::Pyramid);
        let two = allocate_pyramid(&c, Shape::new(2, 3)).unwrap();
        assert_eq!(two.per_head.values(), &[12, 12, 12, 4, 4, 4]);
        let three = allocate_pyramid(&c, Shape::new(3, 1)).unwrap();
        assert_eq!(three.per_head.values(), &[12, 8, 4]);
        assert!(allocate_pyramid(&c, Shape::new(1, 4)).is_err());
        for l in 2..=8 {
            for h in 1..=8 {
                for b in [1, 7, 8, 64] {
                    let p =
                        allocate_pyramid(&cfg(b, 2.0, Policy::Pyramid), Shape::new(l, h)).unwrap();
                    assert_eq!(p.total, b * l * h);
                }
            }
        }
    }

    #[test]
    fn ada_examples() {
        let shape = Shape::new(2, 2);
        let c = cfg(4, 2.0, Policy::Ada);
        let even = HeadGrid::from_fn(shape, |_| vec![0.25; 8]);
        assert!(allocate_ada(&c, &even, shape)
            .unwrap()
            .per_head
            .values()
            .iter()
            .all(|&x| x == 4));

        let lopsided = HeadGrid::from_fn(shape, |id| {
            if id.head == 0 {
                vec![0.5; 8]
            } else {
                vec![0.0; 8]
            }
        });
        let plan = allocate_ada(&c, &lopsided, shape).unwrap();
        assert_eq!(plan.per_head.values(), &[8, 0, 8, 0]);

        let mut rng = SeededRng::new(3);
        let random = HeadGrid::from_fn(Shape::new(3, 5), |_| {
            (0..20).map(|_| rng.next_f64()).collect::<Vec<_>>()
        });
        let plan = allocate_ada(&cfg(7, 2.0, Policy::Ada), &random, Shape::new(3, 5)).unwrap();
        for l in 0..3 {
            assert_eq!(plan.per_head.layer(l).iter().sum::<usize>(), 35);
        }
        assert!(allocate_ada(&c, &random, shape).is_err());
        assert!(allocate(&c, shape, None, None).is_err());
    }

    #[test]
    fn clamp_examples() {
        let s = scores(Shape::new(1, 3), vec![0.5, 0.3, 0.2]);
        let plan = BudgetPlan::new(
            HeadGrid::from_vec(Shape::new(1, 3), vec![10, 6, 2]).unwrap(),
            2,
            s.normalized.clone(),
        );
        assert_eq!(
            clamp_to_sequence(&plan, 10).unwrap().per_head.values(),
            &[8, 7, 3]
        );
        assert_eq!(clamp_to_sequence(&plan, 10_000).unwrap(), plan);
        let sat = clamp_to_sequence(&plan, 3).unwrap();
        assert_eq!(sat.per_head.values(), &[1, 1, 1]);
        assert_eq!(sat.total, 3);
        assert!(clamp_to_sequence(&plan, 1).is_err());
    }

    #[test]
    fn validation_flags_corruption() {
        let shape = Shape::new(2, 3);
        let mut rng = SeededRng::new(8);
        let s = scores(shape, (0..6).map(|_| rng.next_f64()).collect());
        let c = cfg(16, 1.5, Policy::HeadKv);
        let plan = allocate_headkv(&s, &c).unwrap();
        let v = validate_plan(&plan, &c, shape, Some(&s));
        assert!(v.passed() && v.conservation && v.monotonic == Some(true));

        let mut bad = plan.clone();
        bad.per_head.values_mut()[0] += 1;
        bad.total += 1;
        assert!(!validate_plan(&bad, &c, shape, Some(&s)).conservation);

        let sorted = scores(shape, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let plan = allocate_headkv(&sorted, &c).unwrap();
        assert_eq!(
            validate_plan(&plan, &c, shape, Some(&sorted)).monotonic,
            Some(true)
        );
        let mut flipped = plan.clone();
        flipped.per_head.values_mut().swap(0, 5);
        assert_eq!(
            validate_plan(&flipped, &c, shape, Some(&sorted)).monotonic,
            Some(false)
        );
    }

    #[test]
    fn largest_remainder_basics() {
        assert_eq!(largest_remainder(&[1.5, 1.5], 3, &[0.0, 1.0]), vec![1, 2]);
        assert_eq!(largest_remainder(&[1.5, 1.5], 3, &[0.0, 0.0]), vec![2, 1]);
        assert_eq!(
            largest_remainder(&[0.3, 0.3, 0.4], 1, &[0.0; 3]),
            vec![0, 0, 1]
        );
        // drift above the total is taken back
        assert_eq!(
            largest_remainder(&[2.0000000001, 1.0], 3, &[0.0; 2])
                .iter()
                .sum::<usize>(),
            3
        );
    }

    proptest! {
        #[test]
        fn every_policy_conserves(l in 2usize..9, h in 1usize..9, b in 1usize..512, bi in 0usize..8, seed in any::<u64>()) {
            let shape = Shape::new(l, h);
            let mut rng = SeededRng::new(seed);
            let s = scores(shape, (0..l * h).map(|_| rng.next_f64()).collect());
            let pooled = HeadGrid::from_fn(shape, |_| (0..32).map(|_| rng.next_f64()).collect::<Vec<_>>());
            let beta = BETA_SWEEP[bi];
            for policy in [Policy::HeadKv, Policy::Uniform, Policy::Pyramid, Policy::Ada] {
                let c = cfg(b, beta, policy);
                let plan = allocate(&c, shape, Some(&s), Some(&pooled)).unwrap();
                prop_assert_eq!(plan.total, b * l * h);
                prop_assert!(validate_plan(&plan, &c, shape, None).conservation);
            }
        }

        #[test]
        fn headkv_targets_stay_in_bounds(n in 1usize..64, b in 1usize..1024, bi in 0usize..8, seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let shape = Shape::new(1, n);
            let s = scores(shape, (0..n).map(|_| rng.next_f64()).collect());
            let beta = BETA_SWEEP[bi];
            let bf = b as f64;
            let basic = bf - bf / beta;
            let pool = bf / beta * n as f64;
            let plan = allocate_headkv(&s, &cfg(b, beta, Policy::HeadKv)).unwrap();
            for (&x, &sh) in plan.per_head.values().iter().zip(s.normalized.values()) {
                let t = basic + sh * pool;
                prop_assert!(t >= basic - 1e-9 && t <= basic + pool + 1e-9);
                prop_assert!((x as f64 - t).abs() < 1.0 + 1e-9);
            }
        }

        #[test]
        fn clamped_plans_fit_the_sequence(n_heads in 1usize..16, b in 1usize..200, n in 8usize..300, seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let shape = Shape::new(1, n_heads);
            let s = scores(shape, (0..n_heads).map(|_| rng.next_f64()).collect());
            let plan = allocate_headkv(&s, &cfg(b, 1.5, Policy::HeadKv)).unwrap();
            let clamped = clamp_to_sequence(&plan, n).unwrap();
            let cap = n - 8;
            prop_assert!(clamped.per_head.values().iter().all(|&x| x <= cap));
            prop_assert_eq!(clamped.total, (b * n_heads).min(cap * n_heads));
        }
    }
}
