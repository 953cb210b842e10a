//! Synthetic needle corpora over an integer token language.
//!
//! The vocabulary is split into disjoint ranges (see [`Vocab`]) so that
//! filler never collides with needle, question, entity or location tokens.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::SeededRng;

pub type Token = u32;

const QUESTION_TOKENS: u32 = 16;
const NEEDLE_TOKENS: u32 = 128;
const ENTITY_TOKENS: u32 = 16;
const LOCATION_TOKENS: u32 = 16;
const MIN_FILLER_TOKENS: u32 = 16;

/// Reserved token ranges inside a vocabulary of `size` tokens.
///
/// | range | use |
/// |---|---|
/// | `0` | noise token emitted on failed retrieval |
/// | `1..17` | question tokens |
/// | `17..145` | needle tokens (retrieval needles and `r`, `c¹`, `c²`) |
/// | `145..161` | entities |
/// | `161..177` | locations |
/// | `177` | the "moved to" relation |
/// | `178..size` | filler |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: u32,
}

impl Vocab {
    pub const NOISE: Token = 0;
    pub const RELATION: Token =
        1 + QUESTION_TOKENS + NEEDLE_TOKENS + ENTITY_TOKENS + LOCATION_TOKENS;
    pub const MIN_SIZE: usize = (Self::RELATION + 1 + MIN_FILLER_TOKENS) as usize;

    pub fn new(size: usize) -> Result<Self> {
        if size < Self::MIN_SIZE {
            return Err(Error::invalid(format!(
                "vocabulary of {size} tokens cannot hold the reserved ranges (need {})",
                Self::MIN_SIZE
            )));
        }
        let size = u32::try_from(size).map_err(|_| Error::invalid("vocabulary too large"))?;
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn question(&self) -> std::ops::Range<Token> {
        1..1 + QUESTION_TOKENS
    }

    pub fn needle(&self) -> std::ops::Range<Token> {
        let s = 1 + QUESTION_TOKENS;
        s..s + NEEDLE_TOKENS
    }

    pub fn entities(&self) -> std::ops::Range<Token> {
        let s = self.needle().end;
        s..s + ENTITY_TOKENS
    }

    pub fn locations(&self) -> std::ops::Range<Token> {
        let s = self.entities().end;
        s..s + LOCATION_TOKENS
    }

    pub fn filler(&self) -> std::ops::Range<Token> {
        Self::RELATION + 1..self.size
    }

    pub fn is_filler(&self, t: Token) -> bool {
        self.filler().contains(&t)
    }
}

fn pick(rng: &mut SeededRng, range: std::ops::Range<Token>) -> Token {
    range.start + rng.below((range.end - range.start) as usize) as Token
}

fn pick_distinct(rng: &mut SeededRng, range: std::ops::Range<Token>, k: usize) -> Vec<Token> {
    rng.sample_distinct((range.end - range.start) as usize, k)
        .into_iter()
        .map(|i| range.start + i as Token)
        .collect()
}

/// Half-open token span `[start, start + len)` in context coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, pos: usize) -> bool {
        pos >= self.start && pos < self.end()
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }

    pub fn read<'a>(&self, tokens: &'a [Token]) -> &'a [Token] {
        &tokens[self.start..self.end()]
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        !self.is_empty()
            && !other.is_empty()
            && self.start < other.end()
            && other.start < self.end()
    }
}

/// A haystack with one inserted needle and its span bookkeeping.
///
/// For retrieval examples `reasoning_span` and `wrong_answer_span` are
/// empty and `correct_answer_span == needle_span`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleExample {
    pub context: Vec<Token>,
    pub question: Vec<Token>,
    pub needle_span: Span,
    pub reasoning_span: Span,
    pub wrong_answer_span: Span,
    pub correct_answer_span: Span,
    pub depth: f64,
    pub target: Vec<Token>,
}

impl NeedleExample {
    /// Context followed by the question: the sequence fed to prefill.
    pub fn prompt(&self) -> Vec<Token> {
        let mut p = self.context.clone();
        p.extend_from_slice(&self.question);
        p
    }
}

/// Filler tokens drawn uniformly from the filler sub-vocabulary.
pub fn gen_haystack(rng: &mut SeededRng, length: usize, vocab_size: usize) -> Result<Vec<Token>> {
    if length == 0 {
        return Err(Error::invalid("haystack length must be at least 1"));
    }
    let vocab = Vocab::new(vocab_size)?;
    Ok((0..length).map(|_| pick(rng, vocab.filler())).collect())
}

fn check_depth(depth: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::invalid(format!("depth {depth} outside [0, 1]")));
    }
    Ok(())
}

/// Start position of a needle of `needle_len` tokens at `depth`.
pub fn insertion_start(haystack_len: usize, needle_len: usize, depth: f64) -> usize {
    (depth * (haystack_len - needle_len) as f64).round() as usize
}

fn overwrite(haystack: &[Token], needle: &[Token], depth: f64) -> Result<(Vec<Token>, usize)> {
    check_depth(depth)?;
    if needle.len() > haystack.len() {
        return Err(Error::invalid(format!(
            "needle of {} tokens does not fit a haystack of {}",
            needle.len(),
            haystack.len()
        )));
    }
    let start = insertion_start(haystack.len(), needle.len(), depth);
    let mut context = haystack.to_vec();
    context[start..start + needle.len()].copy_from_slice(needle);
    Ok((context, start))
}

/// Plain needle-in-a-haystack example: the whole needle is the answer.
pub fn make_retrieval_example(
    haystack: &[Token],
    needle: &[Token],
    question: &[Token],
    depth: f64,
) -> Result<NeedleExample> {
    if needle.is_empty() {
        return Err(Error::Empty("needle"));
    }
    let (context, start) = overwrite(haystack, needle, depth)?;
    let span = Span::new(start, needle.len());
    Ok(NeedleExample {
        context,
        question: question.to_vec(),
        needle_span: span,
        reasoning_span: Span::new(start, 0),
        wrong_answer_span: Span::new(start, 0),
        correct_answer_span: span,
        depth,
        target: needle.to_vec(),
    })
}

/// Retrieval-reasoning example: the needle is `(r, c¹, c²)` inserted
/// contiguously in that order, and only `c²` is the answer.
pub fn make_r2_example(
    haystack: &[Token],
    reasoning: &[Token],
    wrong_answer: &[Token],
    correct_answer: &[Token],
    question: &[Token],
    depth: f64,
) -> Result<NeedleExample> {
    if reasoning.is_empty() || wrong_answer.is_empty() || correct_answer.is_empty() {
        return Err(Error::Empty("retrieval-reasoning needle part"));
    }
    let needle = [reasoning, wrong_answer, correct_answer].concat();
    let (context, start) = overwrite(haystack, &needle, depth)?;
    let r = Span::new(start, reasoning.len());
    let c1 = Span::new(r.end(), wrong_answer.len());
    let c2 = Span::new(c1.end(), correct_answer.len());
    Ok(NeedleExample {
        context,
        question: question.to_vec(),
        needle_span: Span::new(start, needle.len()),
        reasoning_span: r,
        wrong_answer_span: c1,
        correct_answer_span: c2,
        depth,
        target: correct_answer.to_vec(),
    })
}

/// Lengths of the pieces of a generated needle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedleShape {
    pub retrieval_len: usize,
    pub reasoning_len: usize,
    pub wrong_answer_len: usize,
    pub correct_answer_len: usize,
    pub question_len: usize,
}

impl Default for NeedleShape {
    fn default() -> Self {
        Self {
            retrieval_len: 4,
            reasoning_len: 4,
            wrong_answer_len: 2,
            correct_answer_len: 2,
            question_len: 8,
        }
    }
}

/// Draws a question of `len` distinct question tokens (repeating once the
/// range is exhausted).
pub fn sample_question(rng: &mut SeededRng, vocab: Vocab, len: usize) -> Vec<Token> {
    let range = vocab.question();
    let n = (range.end - range.start) as usize;
    let mut q = pick_distinct(rng, range.clone(), len.min(n));
    while q.len() < len {
        q.push(pick(rng, range.clone()));
    }
    q
}

/// Generates a retrieval example with fresh haystack, needle and question.
pub fn sample_retrieval_example(
    rng: &mut SeededRng,
    vocab: Vocab,
    length: usize,
    depth: f64,
    shape: NeedleShape,
) -> Result<NeedleExample> {
    let haystack = gen_haystack(rng, length, vocab.size())?;
    if shape.retrieval_len > NEEDLE_TOKENS as usize {
        return Err(Error::invalid("needle longer than the needle vocabulary"));
    }
    let needle = pick_distinct(rng, vocab.needle(), shape.retrieval_len);
    let question = sample_question(rng, vocab, shape.question_len);
    make_retrieval_example(&haystack, &needle, &question, depth)
}

/// Generates a retrieval-reasoning example; all needle tokens are distinct.
pub fn sample_r2_example(
    rng: &mut SeededRng,
    vocab: Vocab,
    length: usize,
    depth: f64,
    shape: NeedleShape,
) -> Result<NeedleExample> {
    let haystack = gen_haystack(rng, length, vocab.size())?;
    let total = shape.reasoning_len + shape.wrong_answer_len + shape.correct_answer_len;
    if total > NEEDLE_TOKENS as usize {
        return Err(Error::invalid("needle longer than the needle vocabulary"));
    }
    let tokens = pick_distinct(rng, vocab.needle(), total);
    let (r, rest) = tokens.split_at(shape.reasoning_len);
    let (c1, c2) = rest.split_at(shape.wrong_answer_len);
    let question = sample_question(rng, vocab, shape.question_len);
    make_r2_example(&haystack, r, c1, c2, &question, depth)
}

/// One `(entity, moved-to, location)` statement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub entity: Token,
    pub location: Token,
}

impl Fact {
    pub const LEN: usize = 3;

    pub fn tokens(&self) -> [Token; 3] {
        [self.entity, Vocab::RELATION, self.location]
    }
}

/// Multi-needle "where is X" task: the answer is the location in the last
/// fact about the question entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTask {
    pub facts: Vec<Fact>,
    pub fact_spans: Vec<Span>,
    pub question_entity: Token,
    pub question: Vec<Token>,
    pub answer: Token,
    pub insert_depths: Vec<f64>,
}

impl ReasoningTask {
    /// Spans of the facts that mention the question entity.
    pub fn relevant_spans(&self) -> Vec<Span> {
        self.facts
            .iter()
            .zip(&self.fact_spans)
            .filter(|(f, _)| f.entity == self.question_entity)
            .map(|(_, s)| *s)
            .collect()
    }

    /// Context position of the answer token (location of the last relevant fact).
    pub fn answer_position(&self) -> usize {
        let last = *self
            .relevant_spans()
            .last()
            .expect("task has relevant facts");
        last.start + 2
    }
}

/// Location named by the last fact about `entity`, if any.
pub fn resolve_answer(facts: &[Fact], entity: Token) -> Option<Token> {
    facts
        .iter()
        .rev()
        .find(|f| f.entity == entity)
        .map(|f| f.location)
}

/// Inserts `facts` in order at sorted random depths into a fresh haystack.
pub fn make_multi_needle_task(
    rng: &mut SeededRng,
    n_facts: usize,
    context_length: usize,
    vocab: Vocab,
    question_len: usize,
) -> Result<(Vec<Token>, ReasoningTask)> {
    if n_facts < 2 {
        return Err(Error::invalid("a reasoning task needs at least two facts"));
    }
    if question_len < 2 {
        return Err(Error::invalid("question must hold a prefix and the entity"));
    }
    if context_length < n_facts * Fact::LEN {
        return Err(Error::invalid(format!(
            "{n_facts} facts do not fit a context of {context_length} tokens"
        )));
    }
    let haystack = gen_haystack(rng, context_length, vocab.size())?;

    let entity = pick(rng, vocab.entities());
    let mentions = 2 + rng.below(n_facts - 1);
    let mut about: Vec<bool> = (0..n_facts).map(|i| i < mentions).collect();
    rng.shuffle(&mut about);

    let mut facts = Vec::with_capacity(n_facts);
    let mut last_location: Option<Token> = None;
    for &is_question_entity in &about {
        let fact = if is_question_entity {
            // consecutive mentions move the entity somewhere new
            let mut loc = pick(rng, vocab.locations());
            while Some(loc) == last_location {
                loc = pick(rng, vocab.locations());
            }
            last_location = Some(loc);
            Fact {
                entity,
                location: loc,
            }
        } else {
            let mut other = pick(rng, vocab.entities());
            while other == entity {
                other = pick(rng, vocab.entities());
            }
            Fact {
                entity: other,
                location: pick(rng, vocab.locations()),
            }
        };
        facts.push(fact);
    }

    let mut question = sample_question(rng, vocab, question_len - 1);
    question.push(entity);
    insert_facts(&haystack, facts, entity, question, rng)
}

/// Places `facts` at sorted random offsets, preserving their order.
pub fn insert_facts(
    haystack: &[Token],
    facts: Vec<Fact>,
    question_entity: Token,
    question: Vec<Token>,
    rng: &mut SeededRng,
) -> Result<(Vec<Token>, ReasoningTask)> {
    let needed = facts.len() * Fact::LEN;
    if haystack.len() < needed {
        return Err(Error::invalid("facts do not fit the haystack"));
    }
    let answer = resolve_answer(&facts, question_entity)
        .ok_or_else(|| Error::invalid("no fact mentions the question entity"))?;
    let free = haystack.len() - needed;
    let mut offsets: Vec<usize> = (0..facts.len()).map(|_| rng.below(free + 1)).collect();
    offsets.sort_unstable();

    let mut context = haystack.to_vec();
    let mut fact_spans = Vec::with_capacity(facts.len());
    let mut insert_depths = Vec::with_capacity(facts.len());
    for (i, (fact, &off)) in facts.iter().zip(&offsets).enumerate() {
        let span = Span::new(off + i * Fact::LEN, Fact::LEN);
        context[span.positions()].copy_from_slice(&fact.tokens());
        fact_spans.push(span);
        insert_depths.push(if free == 0 {
            0.0
        } else {
            off as f64 / free as f64
        });
    }
    Ok((
        context,
        ReasoningTask {
            facts,
            fact_spans,
            question_entity,
            question,
            answer,
            insert_depths,
        },
    ))
}

#[derive(Serialize)]
struct CorpusLine<'a> {
    context: &'a [Token],
    needle_span: Span,
    reasoning_span: Span,
    wrong_answer_span: Span,
    correct_answer_span: Span,
    question: &'a [Token],
    target: &'a [Token],
    depth: f64,
}

/// Writes one JSON object per example, one example per line.
pub fn write_corpus_jsonl<W: Write>(examples: &[NeedleExample], mut out: W) -> Result<()> {
    for ex in examples {
        let line = CorpusLine {
            context: &ex.context,
            needle_span: ex.needle_span,
            reasoning_span: ex.reasoning_span,
            wrong_answer_span: ex.wrong_answer_span,
            correct_answer_span: ex.correct_answer_span,
            question: &ex.question,
            target: &ex.target,
            depth: ex.depth,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
