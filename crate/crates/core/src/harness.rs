//! Experiment runner: importance estimation, needle grids, reasoning
//! suites and method comparisons over paired corpora.
//!
//! Every example draws from its own RNG stream derived from the corpus
//! seed and its grid coordinates, so different methods and budgets always
//! see identical prompts. All methods also share the pooled selection
//! scores of each example; only the allocation differs between them.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{allocate, clamp_to_sequence, AllocationConfig, BudgetPlan, Policy};
use crate::error::{Error, Result};
use crate::heads::{HeadGrid, Shape};
use crate::importance::{
    aggregate, score_enhanced_retrieval, score_r2, score_retrieval, Estimator, ImportanceScores,
};
use crate::kvstore::{CacheReport, HeadCache};
use crate::numkit::SeededRng;
use crate::probes::{
    make_multi_needle_task, sample_r2_example, sample_retrieval_example, NeedleExample,
    NeedleShape, Span, Token, Vocab,
};
use crate::selection::{compress_with_scores, full_position_caches, pooled_grid, PoolingConfig};
use crate::toymodel::{
    build_toy_model, decode_teacher_forced, oracle_trace, oracle_window_attention, token_key,
    AttentionRows, Model, ModelSpec, PlantedOracleSpec,
};

const TAG_ESTIMATE_RETRIEVAL: u64 = 0x4553_5452;
const TAG_ESTIMATE_R2: u64 = 0x4553_5232;
const TAG_NEEDLE: u64 = 0x4e45_4544;
const TAG_REASON: u64 = 0x5245_4153;

/// Attention source for an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Oracle(PlantedOracleSpec),
    Toy(ModelSpec),
}

impl ModelConfig {
    pub fn shape(&self) -> Shape {
        match self {
            ModelConfig::Oracle(s) => s.model_shape,
            ModelConfig::Toy(s) => s.shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
}

/// A per-head budget: a fixed entry count, or the whole prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "BudgetRepr", into = "BudgetRepr")]
pub enum Budget {
    Entries(usize),
    Full,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BudgetRepr {
    Entries(usize),
    Named(String),
}

impl TryFrom<BudgetRepr> for Budget {
    type Error = Error;

    fn try_from(r: BudgetRepr) -> Result<Self> {
        match r {
            BudgetRepr::Entries(b) => Ok(Budget::Entries(b)),
            BudgetRepr::Named(s) => s.parse(),
        }
    }
}

impl From<Budget> for BudgetRepr {
    fn from(b: Budget) -> Self {
        match b {
            Budget::Entries(n) => BudgetRepr::Entries(n),
            Budget::Full => BudgetRepr::Named("full".into()),
        }
    }
}

impl Budget {
    /// Entries per head for a prompt of `prompt_len` tokens.
    pub fn resolve(&self, prompt_len: usize) -> usize {
        match self {
            Budget::Entries(b) => *b,
            Budget::Full => prompt_len,
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Entries(b) => write!(f, "{b}"),
            Budget::Full => f.write_str("full"),
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(Budget::Full);
        }
        s.parse::<usize>()
            .map(Budget::Entries)
            .map_err(|_| Error::config(format!("budget must be a count or 'full', got '{s}'")))
    }
}

fn default_n_eval() -> usize {
    8
}

fn default_n_facts() -> usize {
    4
}

fn default_vocab() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub estimator: Estimator,
    pub allocation: AllocationConfig,
    pub pooling: PoolingConfig,
    pub grid: Grid,
    pub corpus_seed: u64,
    /// Estimation examples per depth.
    pub n_examples: usize,
    pub success_threshold: f64,
    /// Evaluation examples per grid cell.
    #[serde(default = "default_n_eval")]
    pub n_eval_examples: usize,
    /// Haystack length of the estimation corpus; the longest grid length
    /// when absent.
    #[serde(default)]
    pub estimation_length: Option<usize>,
    /// Budgets swept by comparisons; `allocation.b` when absent.
    #[serde(default)]
    pub budgets: Option<Vec<Budget>>,
    /// β values swept by comparisons; `allocation.beta` when absent.
    #[serde(default)]
    pub betas: Option<Vec<f64>>,
    /// Facts per reasoning task.
    #[serde(default = "default_n_facts")]
    pub n_facts: usize,
    /// Vocabulary of the oracle corpus (toy runs use the model's).
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
}

impl ExperimentConfig {
    /// Desk-scale planted-oracle experiment: 8×8 heads, 20% planted at
    /// weight 0.9, five lengths up to 2048 and five depths.
    pub fn desk_default() -> Self {
        let shape = Shape::new(8, 8);
        Self {
            model: ModelConfig::Oracle(
                PlantedOracleSpec::random(shape, 0.2, 0.9, 17).expect("valid plant"),
            ),
            estimator: Estimator::R2,
            allocation: AllocationConfig {
                b: 64,
                beta: 1.2,
                alpha: 8,
                policy: Policy::HeadKv,
            },
            pooling: PoolingConfig::default(),
            grid: Grid {
                lengths: vec![128, 256, 512, 1024, 2048],
                depths: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            },
            corpus_seed: 7,
            n_examples: 32,
            success_threshold: 1.0,
            n_eval_examples: default_n_eval(),
            estimation_length: None,
            budgets: None,
            betas: None,
            n_facts: default_n_facts(),
            vocab_size: default_vocab(),
        }
    }

    pub fn shape(&self) -> Shape {
        self.model.shape()
    }

    pub fn vocab(&self) -> Result<Vocab> {
        match &self.model {
            ModelConfig::Oracle(_) => Vocab::new(self.vocab_size),
            ModelConfig::Toy(s) => Vocab::new(s.vocab_size),
        }
    }

    pub fn needle_shape(&self) -> NeedleShape {
        NeedleShape {
            question_len: self.pooling.alpha.max(2),
            ..NeedleShape::default()
        }
    }

    pub fn estimation_length(&self) -> usize {
        self.estimation_length
            .unwrap_or_else(|| self.grid.lengths.iter().copied().max().unwrap_or(0))
    }

    pub fn budgets(&self) -> Vec<Budget> {
        self.budgets
            .clone()
            .unwrap_or_else(|| vec![Budget::Entries(self.allocation.b)])
    }

    pub fn betas(&self) -> Vec<f64> {
        self.betas
            .clone()
            .unwrap_or_else(|| vec![self.allocation.beta])
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.lengths.is_empty() || self.grid.depths.is_empty() {
            return Err(Error::config(
                "grid needs at least one length and one depth",
            ));
        }
        if self.n_examples == 0 || self.n_eval_examples == 0 {
            return Err(Error::config("example counts must be at least 1"));
        }
        if !(self.success_threshold > 0.0 && self.success_threshold <= 1.0) {
            return Err(Error::config("success_threshold must lie in (0, 1]"));
        }
        if let Some(d) = self.grid.depths.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(Error::config(format!("depth {d} outside [0, 1]")));
        }
        self.pooling.validate()?;
        self.allocation.validate()?;
        if self.allocation.alpha != self.pooling.alpha {
            return Err(Error::config(
                "allocation.alpha and pooling.alpha must agree",
            ));
        }
        if self.n_facts < 2 {
            return Err(Error::config("reasoning tasks need at least two facts"));
        }
        for beta in self.betas() {
            AllocationConfig {
                beta,
                ..self.allocation
            }
            .validate()?;
        }
        self.vocab()?;
        match &self.model {
            ModelConfig::Oracle(s) => s.validate()?,
            ModelConfig::Toy(s) => {
                s.validate()?;
                let longest = self
                    .grid
                    .lengths
                    .iter()
                    .copied()
                    .max()
                    .unwrap_or(0)
                    .max(self.estimation_length());
                if longest + self.needle_shape().question_len > s.max_context {
                    return Err(Error::config(format!(
                        "length {longest} plus question exceeds max context {}",
                        s.max_context
                    )));
                }
            }
        }
        let shape = self.needle_shape();
        let min_len = (shape.reasoning_len + shape.wrong_answer_len + shape.correct_answer_len)
            .max(self.n_facts * 3);
        if let Some(l) = self.grid.lengths.iter().find(|&&l| l < min_len) {
            return Err(Error::config(format!("length {l} cannot hold the needles")));
        }
        if self.estimation_length() < min_len {
            return Err(Error::config("estimation length cannot hold the needles"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One aggregated grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub b: Budget,
    pub length: usize,
    /// NaN for reasoning rows, whose facts sit at random depths.
    pub depth: f64,
    pub accuracy: f64,
    pub retained_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_writer(out);
        w.write_record([
            "method",
            "b",
            "length",
            "depth",
            "accuracy",
            "retained_fraction",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.b.to_string(),
                r.length.to_string(),
                r.depth.to_string(),
                r.accuracy.to_string(),
                r.retained_fraction.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean accuracy over the rows of one method and budget.
    pub fn mean_accuracy(&self, method: &str, b: Budget) -> Option<f64> {
        let acc: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.b == b)
            .map(|r| r.accuracy)
            .collect();
        (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }
}

/// An allocation policy under evaluation; `scores` drive head-level runs.
#[derive(Debug, Clone)]
pub struct Method {
    pub label: String,
    pub policy: Policy,
    pub beta: f64,
    pub scores: Option<ImportanceScores>,
}

impl Method {
    pub fn baseline(policy: Policy, beta: f64) -> Self {
        Self {
            label: policy.to_string(),
            policy,
            beta,
            scores: None,
        }
    }

    pub fn headkv(scores: ImportanceScores, beta: f64) -> Self {
        Self {
            label: format!("headkv-{}", scores.estimator_tag),
            policy: Policy::HeadKv,
            beta,
            scores: Some(scores),
        }
    }

    fn plan(
        &self,
        cfg: &ExperimentConfig,
        b: usize,
        pooled: &HeadGrid<Vec<f64>>,
    ) -> Result<BudgetPlan> {
        let alloc = AllocationConfig {
            b,
            beta: self.beta,
            alpha: cfg.pooling.alpha,
            policy: self.policy,
        };
        allocate(&alloc, cfg.shape(), self.scores.as_ref(), Some(pooled))
    }
}

enum Source {
    Oracle(PlantedOracleSpec),
    Toy(Box<Model>),
}

impl Source {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match &cfg.model {
            ModelConfig::Oracle(s) => Source::Oracle(s.clone()),
            ModelConfig::Toy(s) => Source::Toy(Box::new(build_toy_model(s)?)),
        })
    }
}

fn estimation_example(
    cfg: &ExperimentConfig,
    estimator: Estimator,
    depth: f64,
    i: usize,
) -> Result<(NeedleExample, Span)> {
    let vocab = cfg.vocab()?;
    let length = cfg.estimation_length();
    let (tag, r2) = match estimator {
        Estimator::R | Estimator::ER => (TAG_ESTIMATE_RETRIEVAL, false),
        Estimator::R2 => (TAG_ESTIMATE_R2, true),
    };
    let mut rng = SeededRng::derive(
        cfg.corpus_seed,
        &[tag, length as u64, depth.to_bits(), i as u64],
    );
    let ex = if r2 {
        sample_r2_example(&mut rng, vocab, length, depth, cfg.needle_shape())?
    } else {
        sample_retrieval_example(&mut rng, vocab, length, depth, cfg.needle_shape())?
    };
    let span = if r2 {
        ex.correct_answer_span
    } else {
        ex.needle_span
    };
    Ok((ex, span))
}

fn score_example(
    source: &Source,
    estimator: Estimator,
    ex: &NeedleExample,
    span: Span,
) -> Result<HeadGrid<f64>> {
    let trace = match source {
        Source::Oracle(spec) => oracle_trace(spec, ex, span)?,
        Source::Toy(model) => {
            let prompt = ex.prompt();
            let out = model.prefill(&prompt, AttentionRows::Last(1))?;
            decode_teacher_forced(model, out.caches, prompt.len(), span.read(&ex.context))?
        }
    };
    match estimator {
        Estimator::R => score_retrieval(&trace, span, span.read(&ex.context), &ex.context),
        Estimator::ER => score_enhanced_retrieval(&trace, span),
        Estimator::R2 => score_r2(&trace, span),
    }
}

/// Raw per-example scores of `estimator` over the estimation corpus, in
/// (depth, example) order.
pub fn estimation_scores(
    cfg: &ExperimentConfig,
    estimator: Estimator,
) -> Result<Vec<HeadGrid<f64>>> {
    cfg.validate()?;
    let source = Source::new(cfg)?;
    let jobs: Vec<(f64, usize)> = cfg
        .grid
        .depths
        .iter()
        .flat_map(|&d| (0..cfg.n_examples).map(move |i| (d, i)))
        .collect();
    jobs.par_iter()
        .map(|&(d, i)| {
            let (ex, span) = estimation_example(cfg, estimator, d, i)?;
            score_example(&source, estimator, &ex, span)
        })
        .collect()
}

/// Importance distribution of `cfg.estimator` over a corpus spanning the
/// depth grid at the estimation length.
pub fn run_estimation(cfg: &ExperimentConfig) -> Result<ImportanceScores> {
    aggregate(&estimation_scores(cfg, cfg.estimator)?, cfg.estimator)
}

/// The estimation corpus of `estimator`, in (depth, example) order.
pub fn estimation_corpus(
    cfg: &ExperimentConfig,
    estimator: Estimator,
) -> Result<Vec<NeedleExample>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &d in &cfg.grid.depths {
        for i in 0..cfg.n_examples {
            out.push(estimation_example(cfg, estimator, d, i)?.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Case {
    Needle { length: usize, depth: f64, i: usize },
    Reason { length: usize, i: usize },
}

impl Case {
    fn cell(&self) -> (usize, f64) {
        match *self {
            Case::Needle { length, depth, .. } => (length, depth),
            Case::Reason { length, .. } => (length, f64::NAN),
        }
    }
}

struct ToyCase {
    caches: HeadGrid<HeadCache>,
    logits: Vec<f64>,
    reference: Vec<Token>,
}

/// Everything the methods share for one example.
struct Prepared {
    prompt_len: usize,
    /// Spans the retained fraction is measured on (needle, or facts about
    /// the question entity).
    focus: Vec<Span>,
    /// Positions the oracle must be able to emit.
    emit: Vec<usize>,
    pooled: HeadGrid<Vec<f64>>,
    /// Oracle only: for every planted head, the selection rank of each
    /// focus and emission position.
    ranks: Option<HeadGrid<Vec<(usize, usize)>>>,
    toy: Option<ToyCase>,
}

/// Rank of position `p` in top-k order (higher score first, lower index on
/// ties): `p` is selected exactly when its rank is below the budget.
fn selection_rank(pooled: &[f64], p: usize) -> usize {
    let v = pooled[p];
    pooled
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < p))
        .count()
}

fn prepare(cfg: &ExperimentConfig, source: &Source, case: Case) -> Result<Prepared> {
    let vocab = cfg.vocab()?;
    let (prompt, focus, emit, answer_len) = match case {
        Case::Needle { length, depth, i } => {
            let mut rng = SeededRng::derive(
                cfg.corpus_seed,
                &[TAG_NEEDLE, length as u64, depth.to_bits(), i as u64],
            );
            let ex = sample_retrieval_example(&mut rng, vocab, length, depth, cfg.needle_shape())?;
            let span = ex.needle_span;
            (
                ex.prompt(),
                vec![span],
                span.positions().collect::<Vec<_>>(),
                span.len,
            )
        }
        Case::Reason { length, i } => {
            let mut rng =
                SeededRng::derive(cfg.corpus_seed, &[TAG_REASON, length as u64, i as u64]);
            let (context, task) = make_multi_needle_task(
                &mut rng,
                cfg.n_facts,
                length,
                vocab,
                cfg.needle_shape().question_len,
            )?;
            let mut prompt = context;
            prompt.extend_from_slice(&task.question);
            (
                prompt,
                task.relevant_spans(),
                vec![task.answer_position()],
                1,
            )
        }
    };
    let n = prompt.len();
    let (pooled, ranks, toy) = match source {
        Source::Oracle(spec) => {
            let window =
                oracle_window_attention(spec, n, &focus, cfg.pooling.alpha, token_key(&prompt))?;
            let pooled = pooled_grid(&window, &cfg.pooling)?;
            let m = n - cfg.pooling.alpha;
            let mut tracked: Vec<usize> = focus
                .iter()
                .flat_map(|s| s.positions())
                .chain(emit.iter().copied())
                .collect();
            tracked.sort_unstable();
            tracked.dedup();
            let weights = spec.weights();
            let ranks = HeadGrid::from_fn(spec.model_shape, |id| {
                if weights[id] > 0.0 {
                    tracked
                        .iter()
                        .map(|&p| {
                            (
                                p,
                                if p < m {
                                    selection_rank(&pooled[id], p)
                                } else {
                                    0
                                },
                            )
                        })
                        .collect()
                } else {
                    Vec::new()
                }
            });
            (pooled, Some(ranks), None)
        }
        Source::Toy(model) => {
            let out = model.prefill(&prompt, AttentionRows::Last(cfg.pooling.alpha))?;
            let pooled = pooled_grid(&out.attention, &cfg.pooling)?;
            let reference = model.greedy_decode(out.caches.clone(), n, &out.logits, answer_len)?;
            (
                pooled,
                None,
                Some(ToyCase {
                    caches: out.caches,
                    logits: out.logits,
                    reference,
                }),
            )
        }
    };
    Ok(Prepared {
        prompt_len: n,
        focus,
        emit,
        pooled,
        ranks,
        toy,
    })
}

#[derive(Debug, Clone, Copy)]
struct Outcome {
    success: bool,
    retained_fraction: f64,
}

fn clamped_plan(
    cfg: &ExperimentConfig,
    method: &Method,
    budget: Budget,
    prep: &Prepared,
) -> Result<BudgetPlan> {
    let plan = method.plan(cfg, budget.resolve(prep.prompt_len), &prep.pooled)?;
    let plan = clamp_to_sequence(&plan, prep.prompt_len)?;
    if let Some((id, b)) = plan
        .per_head
        .iter()
        .find(|(_, &b)| b + plan.alpha > prep.prompt_len)
    {
        return Err(Error::invalid(format!(
            "{id} budget {b} exceeds the prompt after clamping"
        )));
    }
    Ok(plan)
}

fn evaluate(
    cfg: &ExperimentConfig,
    source: &Source,
    method: &Method,
    budget: Budget,
    prep: &Prepared,
) -> Result<Outcome> {
    let plan = clamped_plan(cfg, method, budget, prep)?;
    let shape = cfg.shape();
    let n = prep.prompt_len;
    let m = n - plan.alpha;
    let span_fraction = |kept: &[usize], s: &Span| {
        s.positions()
            .filter(|p| kept.binary_search(p).is_ok())
            .count() as f64
            / s.len as f64
    };
    match source {
        Source::Oracle(spec) => {
            let tracked = spec.planted_ids();
            if tracked.is_empty() {
                return Ok(Outcome {
                    success: false,
                    retained_fraction: 0.0,
                });
            }
            // only focus and emission positions matter, so retention is
            // read off their selection ranks instead of a full top-k
            let ranks = prep.ranks.as_ref().expect("oracle cases carry ranks");
            let retained = HeadGrid::from_fn(shape, |id| {
                let b = plan.per_head[id];
                ranks[id]
                    .iter()
                    .filter(|&&(p, r)| p >= m || r < b)
                    .map(|&(p, _)| p)
                    .collect::<Vec<usize>>()
            });
            let per_span: Vec<f64> = prep
                .focus
                .iter()
                .map(|s| {
                    tracked
                        .iter()
                        .map(|&id| span_fraction(&retained[id], s))
                        .sum::<f64>()
                        / tracked.len() as f64
                })
                .collect();
            let retained_ok = per_span.iter().all(|&f| f >= cfg.success_threshold - 1e-12);
            let emits = prep.emit.iter().all(|&p| spec.emits_with(&retained, p));
            Ok(Outcome {
                success: retained_ok && emits,
                retained_fraction: per_span.iter().sum::<f64>() / per_span.len() as f64,
            })
        }
        Source::Toy(model) => {
            let toy = prep.toy.as_ref().expect("toy cases carry caches");
            let (caches, _) = compress_with_scores(&toy.caches, &prep.pooled, &plan, n)?;
            let fractions: Vec<f64> = prep
                .focus
                .iter()
                .flat_map(|s| shape.iter().map(move |id| (id, s)))
                .map(|(id, s)| span_fraction(caches[id].positions(), s))
                .collect();
            let decoded = model.greedy_decode(caches, n, &toy.logits, toy.reference.len())?;
            Ok(Outcome {
                success: decoded == toy.reference,
                retained_fraction: fractions.iter().sum::<f64>() / fractions.len() as f64,
            })
        }
    }
}

fn run_cases(
    cfg: &ExperimentConfig,
    cases: &[Case],
    methods: &[Method],
    budgets: &[Budget],
) -> Result<ResultTable> {
    cfg.validate()?;
    if methods.is_empty() || budgets.is_empty() {
        return Err(Error::config("nothing to evaluate: no methods or budgets"));
    }
    let source = Source::new(cfg)?;
    for m in methods {
        if let Some(s) = &m.scores {
            if s.shape != cfg.shape() {
                return Err(Error::shape(format!(
                    "scores of {} do not match the model shape",
                    m.label
                )));
            }
        }
    }
    // outcomes[case][method][budget]
    let outcomes: Vec<Vec<Vec<Outcome>>> = cases
        .par_iter()
        .map(|&case| {
            let prep = prepare(cfg, &source, case)?;
            methods
                .iter()
                .map(|m| {
                    budgets
                        .iter()
                        .map(|&b| evaluate(cfg, &source, m, b, &prep))
                        .collect()
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut cells: Vec<(usize, f64)> = Vec::new();
    for c in cases {
        let cell = c.cell();
        if !cells
            .iter()
            .any(|x| x.0 == cell.0 && x.1.to_bits() == cell.1.to_bits())
        {
            cells.push(cell);
        }
    }
    let mut table = ResultTable::default();
    for (mi, m) in methods.iter().enumerate() {
        for (bi, &b) in budgets.iter().enumerate() {
            for &(length, depth) in &cells {
                let hits: Vec<Outcome> = cases
                    .iter()
                    .zip(&outcomes)
                    .filter(|(c, _)| {
                        let x = c.cell();
                        x.0 == length && x.1.to_bits() == depth.to_bits()
                    })
                    .map(|(_, o)| o[mi][bi])
                    .collect();
                let k = hits.len() as f64;
                table.rows.push(ResultRow {
                    method: m.label.clone(),
                    b,
                    length,
                    depth,
                    accuracy: hits.iter().filter(|o| o.success).count() as f64 / k,
                    retained_fraction: hits.iter().map(|o| o.retained_fraction).sum::<f64>() / k,
                });
            }
        }
    }
    Ok(table)
}

fn needle_cases(cfg: &ExperimentConfig) -> Vec<Case> {
    let mut cases = Vec::new();
    for &length in &cfg.grid.lengths {
        for &depth in &cfg.grid.depths {
            for i in 0..cfg.n_eval_examples {
                cases.push(Case::Needle { length, depth, i });
            }
        }
    }
    cases
}

/// `n_eval_examples × |depths|` tasks per length, so both suites evaluate
/// the same number of prompts.
fn reasoning_cases(cfg: &ExperimentConfig) -> Vec<Case> {
    let per_length = cfg.n_eval_examples * cfg.grid.depths.len();
    cfg.grid
        .lengths
        .iter()
        .flat_map(|&length| (0..per_length).map(move |i| Case::Reason { length, i }))
        .collect()
}

fn config_method(cfg: &ExperimentConfig, scores: &ImportanceScores) -> Method {
    match cfg.allocation.policy {
        Policy::HeadKv => Method::headkv(scores.clone(), cfg.allocation.beta),
        p => Method::baseline(p, cfg.allocation.beta),
    }
}

/// Needle-in-a-haystack grid for the configured policy at budget `b`.
pub fn run_needle_grid(cfg: &ExperimentConfig, scores: &ImportanceScores) -> Result<ResultTable> {
    evaluate_needle(
        cfg,
        &[config_method(cfg, scores)],
        &[Budget::Entries(cfg.allocation.b)],
    )
}

/// Multi-needle reasoning suite for the configured policy at budget `b`.
pub fn run_reasoning_suite(
    cfg: &ExperimentConfig,
    scores: &ImportanceScores,
) -> Result<ResultTable> {
    evaluate_reasoning(
        cfg,
        &[config_method(cfg, scores)],
        &[Budget::Entries(cfg.allocation.b)],
    )
}

pub fn evaluate_needle(
    cfg: &ExperimentConfig,
    methods: &[Method],
    budgets: &[Budget],
) -> Result<ResultTable> {
    run_cases(cfg, &needle_cases(cfg), methods, budgets)
}

pub fn evaluate_reasoning(
    cfg: &ExperimentConfig,
    methods: &[Method],
    budgets: &[Budget],
) -> Result<ResultTable> {
    run_cases(cfg, &reasoning_cases(cfg), methods, budgets)
}

/// Cache accounting of one method at one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub method: String,
    pub b: Budget,
    pub length: usize,
    pub report: CacheReport,
}

/// The first needle example at the longest grid length, used for single
/// plans and memory accounting.
pub struct ReferenceCase {
    pub prompt_len: usize,
    pub pooled: HeadGrid<Vec<f64>>,
    shape: Shape,
    caches: Option<HeadGrid<HeadCache>>,
    prep: Prepared,
}

impl ReferenceCase {
    /// Full-prompt caches: the toy model's keys and values, or
    /// positions-only caches for the oracle.
    pub fn full_caches(&self) -> Result<HeadGrid<HeadCache>> {
        match &self.caches {
            Some(c) => Ok(c.clone()),
            None => full_position_caches(self.shape, self.prompt_len),
        }
    }
}

pub fn reference_case(cfg: &ExperimentConfig) -> Result<ReferenceCase> {
    cfg.validate()?;
    let source = Source::new(cfg)?;
    let length = cfg
        .grid
        .lengths
        .iter()
        .copied()
        .max()
        .expect("validated grid");
    let prep = prepare(
        cfg,
        &source,
        Case::Needle {
            length,
            depth: cfg.grid.depths[0],
            i: 0,
        },
    )?;
    Ok(ReferenceCase {
        prompt_len: prep.prompt_len,
        pooled: prep.pooled.clone(),
        shape: cfg.shape(),
        caches: prep.toy.as_ref().map(|t| t.caches.clone()),
        prep,
    })
}

/// Memory reports of every method and budget on the reference case.
pub fn memory_reports(
    cfg: &ExperimentConfig,
    methods: &[Method],
    budgets: &[Budget],
) -> Result<Vec<MemoryEntry>> {
    let case = reference_case(cfg)?;
    let full = case.full_caches()?;
    let mut out = Vec::new();
    for m in methods {
        for &b in budgets {
            let plan = clamped_plan(cfg, m, b, &case.prep)?;
            let (_, report) = compress_with_scores(&full, &case.pooled, &plan, case.prompt_len)?;
            out.push(MemoryEntry {
                method: m.label.clone(),
                b,
                length: case.prompt_len,
                report,
            });
        }
    }
    Ok(out)
}

/// `method,b,length,total_entries,window_entries,full_entries,compression_ratio`
pub fn write_memory_summary<W: Write>(entries: &[MemoryEntry], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    w.write_record([
        "method",
        "b",
        "length",
        "total_entries",
        "window_entries",
        "full_entries",
        "compression_ratio",
    ])?;
    for e in entries {
        w.write_record([
            e.method.clone(),
            e.b.to_string(),
            e.length.to_string(),
            e.report.total_entries.to_string(),
            e.report.window_entries.to_string(),
            e.report.full_entries.to_string(),
            e.report.compression_ratio.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub scores: Vec<ImportanceScores>,
    pub needle: ResultTable,
    pub reasoning: ResultTable,
    pub memory: Vec<MemoryEntry>,
}

/// The compared methods: the three baselines, then head-level allocation
/// with each estimator's scores, once per β.
pub fn comparison_methods(cfg: &ExperimentConfig, scores: &[ImportanceScores]) -> Vec<Method> {
    let beta = cfg.allocation.beta;
    let mut methods = vec![
        Method::baseline(Policy::Uniform, beta),
        Method::baseline(Policy::Pyramid, beta),
        Method::baseline(Policy::Ada, beta),
    ];
    let betas = cfg.betas();
    for s in scores {
        for &beta in &betas {
            let mut m = Method::headkv(s.clone(), beta);
            if betas.len() > 1 {
                m.label = format!("{}-beta{beta}", m.label);
            }
            methods.push(m);
        }
    }
    methods
}

/// Runs every method on the same corpora at every configured budget.
pub fn compare_methods(cfg: &ExperimentConfig) -> Result<Comparison> {
    cfg.validate()?;
    let scores = [Estimator::R, Estimator::ER, Estimator::R2]
        .into_iter()
        .map(|e| aggregate(&estimation_scores(cfg, e)?, e))
        .collect::<Result<Vec<_>>>()?;
    let methods = comparison_methods(cfg, &scores);
    let budgets = cfg.budgets();
    Ok(Comparison {
        needle: evaluate_needle(cfg, &methods, &budgets)?,
        reasoning: evaluate_reasoning(cfg, &methods, &budgets)?,
        memory: memory_reports(cfg, &methods, &budgets)?,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::PlantedHead;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.grid.lengths = vec![128, 256];
        cfg.grid.depths = vec![0.0, 0.5, 1.0];
        cfg.n_examples = 4;
        cfg.n_eval_examples = 2;
        cfg
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = ExperimentConfig::desk_default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        assert!(text.contains("\"kind\": \"oracle\""));

        let mut bad = cfg.clone();
        bad.grid.lengths.clear();
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = cfg.clone();
        bad.n_examples = 0;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.success_threshold = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.pooling.alpha = 4;
        assert!(bad.validate().is_err());
        let mut toy = cfg;
        toy.model = ModelConfig::Toy(ModelSpec::new(2, 2, 8, 256, 1));
        toy.grid.lengths = vec![5000];
        assert!(toy.validate().is_err());
        assert!(ExperimentConfig::from_json("{").is_err());
    }

    #[test]
    fn budgets_parse() {
        assert_eq!("full".parse::<Budget>().unwrap(), Budget::Full);
        assert_eq!("64".parse::<Budget>().unwrap(), Budget::Entries(64));
        assert!("lots".parse::<Budget>().is_err());
        let v: Vec<Budget> = serde_json::from_str(r#"[16, "full"]"#).unwrap();
        assert_eq!(v, vec![Budget::Entries(16), Budget::Full]);
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"[16,"full"]"#);
        assert_eq!(Budget::Full.resolve(300), 300);
    }

    #[test]
    fn estimation_is_deterministic_and_finds_plants() {
        let cfg = small();
        let a = run_estimation(&cfg).unwrap();
        assert_eq!(a, run_estimation(&cfg).unwrap());
        let ModelConfig::Oracle(spec) = &cfg.model else {
            unreachable!()
        };
        let planted: Vec<usize> = spec
            .planted_ids()
            .iter()
            .map(|&id| cfg.shape().flat(id))
            .collect();
        let mut top = crate::importance::top_heads(&a, planted.len()).unwrap();
        top.sort_unstable();
        assert_eq!(top, planted);
    }

    #[test]
    fn full_budget_is_lossless() {
        let cfg = small();
        let scores = run_estimation(&cfg).unwrap();
        let methods = comparison_methods(&cfg, &[scores]);
        let table = evaluate_needle(&cfg, &methods, &[Budget::Full]).unwrap();
        assert!(table
            .rows
            .iter()
            .all(|r| r.accuracy == 1.0 && r.retained_fraction == 1.0));
        let table = evaluate_reasoning(&cfg, &methods, &[Budget::Full]).unwrap();
        assert!(table
            .rows
            .iter()
            .all(|r| r.accuracy == 1.0 && r.depth.is_nan()));
        assert_eq!(table.rows.len(), methods.len() * 2);
    }

    #[test]
    fn adversarial_scores_fail() {
        let mut cfg = small();
        cfg.allocation.b = 1;
        cfg.allocation.beta = 1.005;
        let ModelConfig::Oracle(spec) = &cfg.model else {
            unreachable!()
        };
        let planted = spec.planted_ids();
        let decoy = cfg.shape().iter().find(|id| !planted.contains(id)).unwrap();
        let raw = HeadGrid::from_fn(cfg.shape(), |id| if id == decoy { 1.0 } else { 0.0 });
        let scores = ImportanceScores::from_raw(raw, Estimator::R2).unwrap();
        let table = run_needle_grid(&cfg, &scores).unwrap();
        assert!(table
            .rows
            .iter()
            .all(|r| r.accuracy == 0.0 && r.retained_fraction == 0.0));
    }

    #[test]
    fn weak_plants_never_emit() {
        let mut cfg = small();
        let shape = cfg.shape();
        cfg.model = ModelConfig::Oracle(
            PlantedOracleSpec::new(
                shape,
                vec![PlantedHead {
                    layer: 0,
                    head: 0,
                    weight: 0.4,
                }],
                1,
            )
            .unwrap(),
        );
        let scores = ImportanceScores::uniform(shape, Estimator::R2);
        let methods = [Method::baseline(Policy::Uniform, 1.2)];
        let table = evaluate_needle(&cfg, &methods, &[Budget::Full]).unwrap();
        assert!(table
            .rows
            .iter()
            .all(|r| r.accuracy == 0.0 && r.retained_fraction == 1.0));
        drop(scores);
    }

    #[test]
    fn memory_reports_count_window() {
        let cfg = small();
        let scores = run_estimation(&cfg).unwrap();
        let methods = comparison_methods(&cfg, &[scores]);
        let reports = memory_reports(&cfg, &methods, &[Budget::Entries(64)]).unwrap();
        for e in &reports {
            assert_eq!(e.report.total_entries, (64 + 8) * 64, "{}", e.method);
            assert_eq!(e.report.window_entries, 8 * 64);
            assert_eq!(e.length, 256 + 8);
        }
        let mut buf = Vec::new();
        write_memory_summary(&reports, &mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("method,b,length,total_entries"));
    }

    #[test]
    fn toy_model_grid_runs() {
        let mut cfg = small();
        cfg.model = ModelConfig::Toy(ModelSpec::new(2, 2, 8, 256, 3));
        cfg.grid.lengths = vec![40];
        cfg.grid.depths = vec![0.5];
        cfg.n_examples = 2;
        cfg.n_eval_examples = 2;
        let scores = run_estimation(&cfg).unwrap();
        assert_eq!(scores.shape, Shape::new(2, 2));
        let methods = [
            Method::baseline(Policy::Uniform, 1.2),
            Method::headkv(scores, 1.2),
        ];
        let table = evaluate_needle(&cfg, &methods, &[Budget::Full]).unwrap();
        assert!(table.rows.iter().all(|r| r.accuracy == 1.0));
        let table = evaluate_reasoning(&cfg, &methods, &[Budget::Entries(4)]).unwrap();
        assert_eq!(table.rows.len(), 2);
    }

    #[test]
    fn rank_shortcut_matches_selection() {
        let cfg = small();
        let source = Source::new(&cfg).unwrap();
        let prep = prepare(
            &cfg,
            &source,
            Case::Needle {
                length: 256,
                depth: 0.5,
                i: 1,
            },
        )
        .unwrap();
        let ranks = prep.ranks.as_ref().unwrap();
        let m = prep.prompt_len - cfg.pooling.alpha;
        for (id, r) in ranks.iter().filter(|(_, r)| !r.is_empty()) {
            for b in [0, 1, 5, 17, 64, 200, m] {
                let kept =
                    crate::selection::select_retained(&prep.pooled[id], b, prep.prompt_len, 8)
                        .unwrap();
                for &(p, rank) in r {
                    assert_eq!(kept.binary_search(&p).is_ok(), rank < b, "{id} p={p} b={b}");
                }
            }
        }
    }

    #[test]
    fn result_csv_layout() {
        let table = ResultTable {
            rows: vec![ResultRow {
                method: "uniform".into(),
                b: Budget::Entries(64),
                length: 128,
                depth: 0.25,
                accuracy: 0.5,
                retained_fraction: 1.0,
            }],
        };
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "method,b,length,depth,accuracy,retained_fraction\nuniform,64,128,0.25,0.5,1\n"
        );
        assert_eq!(
            table.mean_accuracy("uniform", Budget::Entries(64)),
            Some(0.5)
        );
        assert_eq!(table.mean_accuracy("ada", Budget::Entries(64)), None);
    }
}
