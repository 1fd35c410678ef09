//! Episode construction: balanced support/query sets for sampled concepts.
//!
//! Each episode holds 10 support examples (5 positive, 5 negative) and 20
//! query examples (10/10), drawn uniformly from the Boolean input space and
//! labeled by the concept. All 30 inputs are pairwise distinct, so support
//! and query never share an input. Concepts whose label balance cannot be
//! met within the draw budget are discarded and resampled.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::grammar::{self, ConceptAst, GrammarConfig, GrammarError};
use crate::seeding;

pub const SUPPORT_PER_LABEL: usize = 5;
pub const QUERY_PER_LABEL: usize = 10;
pub const SUPPORT_SIZE: usize = 2 * SUPPORT_PER_LABEL;
pub const QUERY_SIZE: usize = 2 * QUERY_PER_LABEL;
/// Uniform input draws allowed per concept before it is discarded.
pub const INPUT_DRAW_BUDGET: usize = 10_000;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("no balanced episode after {attempts} concept resamples (F may be too small)")]
    DegenerateConceptSpace { attempts: usize },
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error("episode format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One labeled input; `bits[i]` is literal `x(i+1)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub bits: Vec<bool>,
    pub label: bool,
}

/// One few-shot task: a concept with its balanced support and query sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub concept: ConceptAst,
    pub features: u32,
    pub max_depth: u32,
    pub seed: u64,
    pub support: Vec<Example>,
    pub query: Vec<Example>,
}

impl Episode {
    /// Verifies balance, label consistency, and support/query disjointness.
    pub fn check_invariants(&self) -> Result<(), EpisodeError> {
        let fail = |msg: String| EpisodeError::Format { line: 0, msg };
        if self.support.len() != SUPPORT_SIZE {
            return Err(fail(format!("support size {} != {SUPPORT_SIZE}", self.support.len())));
        }
        if self.query.len() != QUERY_SIZE {
            return Err(fail(format!("query size {} != {QUERY_SIZE}", self.query.len())));
        }
        let pos = |xs: &[Example]| xs.iter().filter(|e| e.label).count();
        if pos(&self.support) != SUPPORT_PER_LABEL {
            return Err(fail("support labels not balanced".into()));
        }
        if pos(&self.query) != QUERY_PER_LABEL {
            return Err(fail("query labels not balanced".into()));
        }
        let mut seen = HashSet::new();
        for e in self.support.iter().chain(self.query.iter()) {
            if e.bits.len() != self.features as usize {
                return Err(fail("example width != features".into()));
            }
            if grammar::evaluate(&self.concept, &e.bits)? != e.label {
                return Err(fail(format!("label disagrees with concept on {}", bits_to_string(&e.bits))));
            }
            if !seen.insert(e.bits.clone()) {
                return Err(fail(format!("duplicate input {}", bits_to_string(&e.bits))));
            }
        }
        Ok(())
    }
}

/// Episodes sharing one (F, D) cell.
#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    pub episodes: Vec<Episode>,
}

/// One uniform draw from the input space.
pub fn draw_input<R: Rng>(rng: &mut R, features: u32) -> Vec<bool> {
    (0..features).map(|_| rng.random::<bool>()).collect()
}

/// Builds one balanced episode. The episode seed fixes both the concept and
/// the inputs; concepts that cannot fill both label quotas with distinct
/// inputs inside [`INPUT_DRAW_BUDGET`] draws are discarded, up to
/// `max_attempts` times.
pub fn make_episode(
    cfg: &GrammarConfig,
    episode_seed: u64,
    max_attempts: usize,
) -> Result<Episode, EpisodeError> {
    assert!(max_attempts >= 1, "max_attempts must be >= 1");
    let need = SUPPORT_PER_LABEL + QUERY_PER_LABEL;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);

    for _ in 0..max_attempts {
        let concept = grammar::sample_concept(cfg, &mut rng);
        let mut pos: Vec<Vec<bool>> = Vec::with_capacity(need);
        let mut neg: Vec<Vec<bool>> = Vec::with_capacity(need);
        let mut seen: HashSet<Vec<bool>> = HashSet::new();

        for _ in 0..INPUT_DRAW_BUDGET {
            if pos.len() == need && neg.len() == need {
                break;
            }
            let x = draw_input(&mut rng, cfg.features);
            if seen.contains(&x) {
                continue;
            }
            let label = grammar::evaluate(&concept, &x)?;
            let pool = if label { &mut pos } else { &mut neg };
            if pool.len() < need {
                seen.insert(x.clone());
                pool.push(x);
            }
        }

        if pos.len() == need && neg.len() == need {
            let mk = |xs: &[Vec<bool>], label: bool| {
                xs.iter().map(|x| Example { bits: x.clone(), label }).collect::<Vec<_>>()
            };
            let mut support = mk(&pos[..SUPPORT_PER_LABEL], true);
            support.extend(mk(&neg[..SUPPORT_PER_LABEL], false));
            let mut query = mk(&pos[SUPPORT_PER_LABEL..], true);
            query.extend(mk(&neg[SUPPORT_PER_LABEL..], false));
            return Ok(Episode {
                concept,
                features: cfg.features,
                max_depth: cfg.max_depth,
                seed: episode_seed,
                support,
                query,
            });
        }
    }
    Err(EpisodeError::DegenerateConceptSpace { attempts: max_attempts })
}

/// Builds `batch_size` independent episodes; episode seeds derive from
/// `(cfg.seed, batch_index, position)` so batches are reproducible in
/// isolation.
pub fn make_batch(
    cfg: &GrammarConfig,
    batch_index: u64,
    batch_size: usize,
    max_attempts: usize,
) -> Result<EpisodeBatch, EpisodeError> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut episodes = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let seed = seeding::derive_seed(cfg.seed, batch_index, i as u64);
        episodes.push(make_episode(cfg, seed, max_attempts)?);
    }
    Ok(EpisodeBatch { episodes })
}

fn bits_to_string(bits: &[bool]) -> String {
    bits.iter().map(|b| if *b { '1' } else { '0' }).collect()
}

fn bits_from_string(s: &str, line: usize) -> Result<Vec<bool>, EpisodeError> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(EpisodeError::Format { line, msg: format!("bad bit char '{c}'") }),
        })
        .collect()
}

fn examples_to_field(xs: &[Example]) -> String {
    xs.iter()
        .map(|e| format!("{}:{}", bits_to_string(&e.bits), if e.label { 1 } else { 0 }))
        .collect::<Vec<_>>()
        .join(" ")
}

fn examples_from_field(s: &str, line: usize) -> Result<Vec<Example>, EpisodeError> {
    s.split(' ')
        .filter(|t| !t.is_empty())
        .map(|tok| {
            let (bits, label) = tok
                .split_once(':')
                .ok_or_else(|| EpisodeError::Format { line, msg: format!("bad example '{tok}'") })?;
            let label = match label {
                "0" => false,
                "1" => true,
                _ => return Err(EpisodeError::Format { line, msg: format!("bad label '{label}'") }),
            };
            Ok(Example { bits: bits_from_string(bits, line)?, label })
        })
        .collect()
}

/// Writes episodes one per line: concept, F, D, seed, support, query,
/// tab-separated; examples are `bits:label` tokens with x1 leftmost.
pub fn write_episodes<W: Write>(mut w: W, episodes: &[Episode]) -> Result<(), EpisodeError> {
    for ep in episodes {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            ep.concept,
            ep.features,
            ep.max_depth,
            ep.seed,
            examples_to_field(&ep.support),
            examples_to_field(&ep.query),
        )?;
    }
    Ok(())
}

/// Reads episodes written by [`write_episodes`].
pub fn read_episodes<R: BufRead>(r: R) -> Result<Vec<Episode>, EpisodeError> {
    let mut episodes = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(EpisodeError::Format {
                line: line_no,
                msg: format!("expected 6 tab-separated fields, got {}", fields.len()),
            });
        }
        let concept = grammar::parse_text(fields[0])
            .map_err(|e| EpisodeError::Format { line: line_no, msg: e.to_string() })?;
        let parse_int = |s: &str, what: &str| -> Result<u64, EpisodeError> {
            s.parse().map_err(|_| EpisodeError::Format {
                line: line_no,
                msg: format!("bad {what} '{s}'"),
            })
        };
        episodes.push(Episode {
            concept,
            features: parse_int(fields[1], "feature count")? as u32,
            max_depth: parse_int(fields[2], "max depth")? as u32,
            seed: parse_int(fields[3], "seed")?,
            support: examples_from_field(fields[4], line_no)?,
            query: examples_from_field(fields[5], line_no)?,
        });
    }
    Ok(episodes)
}
