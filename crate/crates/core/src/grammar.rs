//! PCFG-sampled Boolean concepts over a fixed feature set.
//!
//! A concept is a formula over literals `x1..xF` built from negation,
//! conjunction and disjunction. The sampler draws productions with fixed
//! probabilities (literal 0.30, not 0.20, and 0.25, or 0.25) and forces the
//! literal production once a node sits at the depth limit, so generation
//! always terminates and the tree never exceeds the configured depth.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("invalid grammar config: {0}")]
    InvalidConfig(String),
    #[error("literal x{index} out of range for input of length {features}")]
    LiteralOutOfRange { index: u32, features: usize },
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
}

/// A sampled Boolean formula. Literal indices are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ConceptAst {
    Literal(u32),
    Not(Box<ConceptAst>),
    And(Box<ConceptAst>, Box<ConceptAst>),
    Or(Box<ConceptAst>, Box<ConceptAst>),
}

/// Sampling distribution: feature count, depth cap, production probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub features: u32,
    pub max_depth: u32,
    pub p_literal: f64,
    pub p_not: f64,
    pub p_and: f64,
    pub p_or: f64,
    pub seed: u64,
}

impl GrammarConfig {
    /// Config with the standard production probabilities.
    pub fn new(features: u32, max_depth: u32, seed: u64) -> Self {
        GrammarConfig {
            features,
            max_depth,
            p_literal: 0.30,
            p_not: 0.20,
            p_and: 0.25,
            p_or: 0.25,
            seed,
        }
    }

    /// Checks F >= 1, D >= 1, probabilities nonnegative and summing to 1
    /// within one representable unit.
    pub fn validate(&self) -> Result<(), GrammarError> {
        if self.features < 1 {
            return Err(GrammarError::InvalidConfig("features must be >= 1".into()));
        }
        if self.max_depth < 1 {
            return Err(GrammarError::InvalidConfig("max_depth must be >= 1".into()));
        }
        let probs = [self.p_literal, self.p_not, self.p_and, self.p_or];
        if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(GrammarError::InvalidConfig(
                "production probabilities must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > f64::EPSILON {
            return Err(GrammarError::InvalidConfig(format!(
                "production probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Literal-count complexity bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComplexityClass {
    Simple,
    Medium,
    Complex,
}

impl ComplexityClass {
    /// Simple: <= 3 literals, Medium: 4-6, Complex: >= 7.
    pub fn classify(literal_count: u32) -> Self {
        match literal_count {
            0..=3 => ComplexityClass::Simple,
            4..=6 => ComplexityClass::Medium,
            _ => ComplexityClass::Complex,
        }
    }
}

impl fmt::Display for ComplexityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComplexityClass::Simple => write!(f, "simple"),
            ComplexityClass::Medium => write!(f, "medium"),
            ComplexityClass::Complex => write!(f, "complex"),
        }
    }
}

/// Per-production draw counts from sampling, split into free draws and
/// depth-forced literals. Free-draw frequencies should match the configured
/// production probabilities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SiteCounts {
    pub literal: u64,
    pub not: u64,
    pub and: u64,
    pub or: u64,
    pub forced_literal: u64,
}

impl SiteCounts {
    pub fn free_total(&self) -> u64 {
        self.literal + self.not + self.and + self.or
    }
}

/// Samples one concept from the grammar.
pub fn sample_concept<R: Rng>(cfg: &GrammarConfig, rng: &mut R) -> ConceptAst {
    let mut counts = SiteCounts::default();
    sample_concept_counted(cfg, rng, &mut counts)
}

/// Samples one concept, tallying production draws into `counts`.
pub fn sample_concept_counted<R: Rng>(
    cfg: &GrammarConfig,
    rng: &mut R,
    counts: &mut SiteCounts,
) -> ConceptAst {
    debug_assert!(cfg.validate().is_ok());
    expand(cfg, rng, 1, counts)
}

fn expand<R: Rng>(cfg: &GrammarConfig, rng: &mut R, level: u32, counts: &mut SiteCounts) -> ConceptAst {
    if level >= cfg.max_depth {
        // At the depth cap any non-literal child would exceed it.
        counts.forced_literal += 1;
        return ConceptAst::Literal(draw_index(cfg, rng));
    }
    let u: f64 = rng.random();
    if u < cfg.p_literal {
        counts.literal += 1;
        ConceptAst::Literal(draw_index(cfg, rng))
    } else if u < cfg.p_literal + cfg.p_not {
        counts.not += 1;
        ConceptAst::Not(Box::new(expand(cfg, rng, level + 1, counts)))
    } else if u < cfg.p_literal + cfg.p_not + cfg.p_and {
        counts.and += 1;
        let a = expand(cfg, rng, level + 1, counts);
        let b = expand(cfg, rng, level + 1, counts);
        ConceptAst::And(Box::new(a), Box::new(b))
    } else {
        counts.or += 1;
        let a = expand(cfg, rng, level + 1, counts);
        let b = expand(cfg, rng, level + 1, counts);
        ConceptAst::Or(Box::new(a), Box::new(b))
    }
}

fn draw_index<R: Rng>(cfg: &GrammarConfig, rng: &mut R) -> u32 {
    rng.random_range(1..=cfg.features)
}

/// Evaluates a concept on one input; `x[i]` is the value of literal `x(i+1)`.
pub fn evaluate(concept: &ConceptAst, x: &[bool]) -> Result<bool, GrammarError> {
    match concept {
        ConceptAst::Literal(i) => x
            .get((*i as usize).wrapping_sub(1))
            .copied()
            .ok_or(GrammarError::LiteralOutOfRange { index: *i, features: x.len() }),
        ConceptAst::Not(c) => Ok(!evaluate(c, x)?),
        ConceptAst::And(a, b) => Ok(evaluate(a, x)? && evaluate(b, x)?),
        ConceptAst::Or(a, b) => Ok(evaluate(a, x)? || evaluate(b, x)?),
    }
}

/// Depth, literal count and complexity class of a concept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConceptStats {
    /// Longest root-to-leaf path in node count (single literal = 1).
    pub depth: u32,
    /// Literal occurrences, with multiplicity.
    pub literal_count: u32,
    pub class: ComplexityClass,
}

pub fn concept_stats(concept: &ConceptAst) -> ConceptStats {
    fn walk(c: &ConceptAst) -> (u32, u32) {
        match c {
            ConceptAst::Literal(_) => (1, 1),
            ConceptAst::Not(a) => {
                let (d, l) = walk(a);
                (d + 1, l)
            }
            ConceptAst::And(a, b) | ConceptAst::Or(a, b) => {
                let (da, la) = walk(a);
                let (db, lb) = walk(b);
                (da.max(db) + 1, la + lb)
            }
        }
    }
    let (depth, literal_count) = walk(concept);
    ConceptStats { depth, literal_count, class: ComplexityClass::classify(literal_count) }
}

/// Renders the text form: literals `x<i>`, `!` for negation, fully
/// parenthesized infix `&`/`|`.
pub fn to_text(concept: &ConceptAst) -> String {
    concept.to_string()
}

impl fmt::Display for ConceptAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConceptAst::Literal(i) => write!(f, "x{i}"),
            ConceptAst::Not(c) => write!(f, "!{c}"),
            ConceptAst::And(a, b) => write!(f, "({a} & {b})"),
            ConceptAst::Or(a, b) => write!(f, "({a} | {b})"),
        }
    }
}

/// Parses the text form emitted by [`to_text`].
pub fn parse_text(s: &str) -> Result<ConceptAst, GrammarError> {
    let bytes = s.as_bytes();
    let mut pos = 0usize;
    let ast = parse_node(bytes, &mut pos, 0)?;
    skip_ws(bytes, &mut pos);
    if pos != bytes.len() {
        return Err(GrammarError::Parse { pos, msg: "trailing input after formula".into() });
    }
    Ok(ast)
}

impl FromStr for ConceptAst {
    type Err = GrammarError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_text(s)
    }
}

const MAX_PARSE_DEPTH: u32 = 4096;

fn parse_node(b: &[u8], pos: &mut usize, depth: u32) -> Result<ConceptAst, GrammarError> {
    if depth > MAX_PARSE_DEPTH {
        return Err(GrammarError::Parse { pos: *pos, msg: "formula nested too deeply".into() });
    }
    skip_ws(b, pos);
    match b.get(*pos) {
        Some(b'!') => {
            *pos += 1;
            Ok(ConceptAst::Not(Box::new(parse_node(b, pos, depth + 1)?)))
        }
        Some(b'x') => {
            *pos += 1;
            parse_index(b, pos)
        }
        Some(b'(') => {
            *pos += 1;
            let left = parse_node(b, pos, depth + 1)?;
            skip_ws(b, pos);
            let op = match b.get(*pos) {
                Some(b'&') => b'&',
                Some(b'|') => b'|',
                _ => {
                    return Err(GrammarError::Parse {
                        pos: *pos,
                        msg: "expected '&' or '|'".into(),
                    })
                }
            };
            *pos += 1;
            let right = parse_node(b, pos, depth + 1)?;
            skip_ws(b, pos);
            if b.get(*pos) != Some(&b')') {
                return Err(GrammarError::Parse { pos: *pos, msg: "expected ')'".into() });
            }
            *pos += 1;
            Ok(if op == b'&' {
                ConceptAst::And(Box::new(left), Box::new(right))
            } else {
                ConceptAst::Or(Box::new(left), Box::new(right))
            })
        }
        _ => Err(GrammarError::Parse {
            pos: *pos,
            msg: "expected literal, '!' or '('".into(),
        }),
    }
}

fn parse_index(b: &[u8], pos: &mut usize) -> Result<ConceptAst, GrammarError> {
    let start = *pos;
    while b.get(*pos).is_some_and(|c| c.is_ascii_digit()) {
        *pos += 1;
    }
    if *pos == start {
        return Err(GrammarError::Parse { pos: start, msg: "expected literal index".into() });
    }
    let text = std::str::from_utf8(&b[start..*pos]).expect("digits are ascii");
    let index: u32 = text
        .parse()
        .map_err(|_| GrammarError::Parse { pos: start, msg: "literal index overflows".into() })?;
    if index == 0 {
        return Err(GrammarError::Parse { pos: start, msg: "literal indices are 1-based".into() });
    }
    Ok(ConceptAst::Literal(index))
}

fn skip_ws(b: &[u8], pos: &mut usize) {
    while b.get(*pos) == Some(&b' ') {
        *pos += 1;
    }
}
