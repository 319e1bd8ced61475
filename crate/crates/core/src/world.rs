//! The ground-truth bigram distribution `P`.
//!
//! A sequence starts with a token drawn from `pi` and continues through the
//! row-stochastic transition matrix `M` until the end-of-sequence token (the
//! last vocabulary index) is drawn. The EOS row of `M` is all zeros.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::index;
use rand::RngCore;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::sampling::{categorical_sample, NextTokenModel};

/// Floor added inside every log so gold-zero transitions stay finite.
pub const EPSILON: f64 = 1e-30;

const ROW_TOLERANCE: f64 = 1e-12;

pub const WORLD_FORMAT: &str = "mixce-world/1";

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("vocabulary size {0} is too small (need at least 3)")]
    VocabTooSmall(usize),
    #[error("zero fraction {0} must lie in [0, 1)")]
    ZeroFracRange(f64),
    #[error("zero fraction {zero_frac} zeroes {zeros} entries per row but only {available} non-EOS columns exist")]
    ZeroFracTooLarge {
        zero_frac: f64,
        zeros: usize,
        available: usize,
    },
    #[error("dirichlet concentration must be positive and finite, got {0}")]
    Alpha(f64),
    #[error("negative count {value} at ({row}, {col})")]
    NegativeCount { row: usize, col: usize, value: i64 },
    #[error("count matrix must be square, row {row} has {len} entries for {expected} rows")]
    CountShape {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("EOS row of the count matrix must be zero")]
    EosCounts,
    #[error("invalid world: {0}")]
    Invalid(String),
    #[error("world is not tight: some reachable token never reaches EOS")]
    NotTight,
    #[error("world file: {0}")]
    Io(#[from] std::io::Error),
    #[error("world file: {0}")]
    Json(#[from] serde_json::Error),
}

/// A sequence of token ids. `terminated` is true iff the last token is EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub terminated: bool,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, eos_id: usize) -> Self {
        let terminated = tokens.last() == Some(&eos_id);
        Self { tokens, terminated }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BigramWorld {
    vocab_size: usize,
    eos_id: usize,
    pi: Vec<f64>,
    m: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    format: String,
    vocab_size: usize,
    eos_id: usize,
    pi: Vec<f64>,
    #[serde(rename = "M")]
    m: Vec<Vec<f64>>,
}

impl BigramWorld {
    /// Builds a world from explicit parts, checking shapes, ranges, row sums
    /// and the zero EOS row. Tightness is not required here; see
    /// [`BigramWorld::check_tight`].
    pub fn from_parts(pi: Vec<f64>, m: Vec<Vec<f64>>) -> Result<Self, WorldError> {
        let v = pi.len();
        if v < 2 {
            return Err(WorldError::Invalid(format!("vocabulary size {v}")));
        }
        let eos = v - 1;
        if m.len() != v || m.iter().any(|r| r.len() != v) {
            return Err(WorldError::Invalid("M must be V x V".into()));
        }
        let in_unit = |x: &f64| (0.0..=1.0).contains(x);
        if !pi.iter().all(in_unit) || !m.iter().flatten().all(in_unit) {
            return Err(WorldError::Invalid("probabilities must lie in [0, 1]".into()));
        }
        if (pi.iter().sum::<f64>() - 1.0).abs() > ROW_TOLERANCE {
            return Err(WorldError::Invalid("pi does not sum to 1".into()));
        }
        for (i, row) in m.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if i == eos {
                if s != 0.0 {
                    return Err(WorldError::Invalid("EOS row of M must be zero".into()));
                }
            } else if (s - 1.0).abs() > ROW_TOLERANCE {
                return Err(WorldError::Invalid(format!("row {i} of M sums to {s}")));
            }
        }
        Ok(Self {
            vocab_size: v,
            eos_id: eos,
            pi,
            m,
        })
    }

    /// Dirichlet rows with `round(zero_frac * V)` entries per row forced to
    /// zero. The EOS column is never zeroed, so the result is always tight.
    pub fn init_random(v: usize, zero_frac: f64, alpha: f64, seed: u64) -> Result<Self, WorldError> {
        if v < 3 {
            return Err(WorldError::VocabTooSmall(v));
        }
        if !(0.0..1.0).contains(&zero_frac) {
            return Err(WorldError::ZeroFracRange(zero_frac));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(WorldError::Alpha(alpha));
        }
        let eos = v - 1;
        let zeros = (zero_frac * v as f64).round() as usize;
        if zeros > eos {
            return Err(WorldError::ZeroFracTooLarge {
                zero_frac,
                zeros,
                available: eos,
            });
        }
        let gamma = Gamma::new(alpha, 1.0).map_err(|_| WorldError::Alpha(alpha))?;
        let mut m = vec![vec![0.0; v]; v];
        for (i, row) in m.iter_mut().enumerate().take(eos) {
            let mut rng = rng::stream(seed, "world-row", i as u64);
            loop {
                for x in row.iter_mut() {
                    *x = gamma.sample(&mut rng);
                }
                for j in index::sample(&mut rng, eos, zeros) {
                    row[j] = 0.0;
                }
                let total: f64 = row.iter().sum();
                // Gamma draws with small alpha can underflow to zero, which
                // would add an unplanned zero (or remove the EOS exit).
                let exact_zeros = row.iter().filter(|&&x| x == 0.0).count() == zeros;
                if exact_zeros && row[eos] > 0.0 && total.is_finite() {
                    row.iter_mut().for_each(|x| *x /= total);
                    break;
                }
            }
        }
        Ok(Self {
            vocab_size: v,
            eos_id: eos,
            pi: uniform_start(v),
            m,
        })
    }

    /// Normalizes bigram counts row by row. Tokens never seen as a
    /// predecessor transition straight to EOS.
    pub fn init_from_counts(counts: &[Vec<i64>]) -> Result<Self, WorldError> {
        let v = counts.len();
        if v < 3 {
            return Err(WorldError::VocabTooSmall(v));
        }
        for (row, r) in counts.iter().enumerate() {
            if r.len() != v {
                return Err(WorldError::CountShape {
                    row,
                    len: r.len(),
                    expected: v,
                });
            }
            if let Some((col, &value)) = r.iter().enumerate().find(|(_, &c)| c < 0) {
                return Err(WorldError::NegativeCount { row, col, value });
            }
        }
        let eos = v - 1;
        if counts[eos].iter().any(|&c| c != 0) {
            return Err(WorldError::EosCounts);
        }
        let mut m = vec![vec![0.0; v]; v];
        for (row, r) in m.iter_mut().zip(counts).take(eos) {
            let total: i64 = r.iter().sum();
            if total == 0 {
                row[eos] = 1.0;
            } else {
                for (x, &c) in row.iter_mut().zip(r) {
                    *x = c as f64 / total as f64;
                }
            }
        }
        let world = Self {
            vocab_size: v,
            eos_id: eos,
            pi: uniform_start(v),
            m,
        };
        if !world.check_tight() {
            return Err(WorldError::NotTight);
        }
        Ok(world)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn row(&self, prev: usize) -> &[f64] {
        &self.m[prev]
    }

    /// Ancestral sample, truncated (unterminated) after `max_len` tokens.
    pub fn sample_sequence(&self, max_len: usize, rng: &mut dyn RngCore) -> TokenSequence {
        let mut tokens = Vec::new();
        let mut dist = &self.pi[..];
        while tokens.len() < max_len {
            let tok = categorical_sample(dist, rng).expect("world rows are normalized");
            tokens.push(tok);
            if tok == self.eos_id {
                break;
            }
            dist = &self.m[tok];
        }
        TokenSequence::new(tokens, self.eos_id)
    }

    /// `log(pi[x1] + eps) + sum_t log(M[x_{t-1}, x_t] + eps)`.
    pub fn log_prob(&self, seq: &[usize], eps: f64) -> f64 {
        let Some(&first) = seq.first() else {
            return 0.0;
        };
        let mut lp = (self.pi[first] + eps).ln();
        for w in seq.windows(2) {
            lp += (self.m[w[0]][w[1]] + eps).ln();
        }
        lp
    }

    /// True iff every token reachable from `pi` has a path to EOS.
    pub fn check_tight(&self) -> bool {
        let v = self.vocab_size;
        let mut reaches_eos = vec![false; v];
        reaches_eos[self.eos_id] = true;
        let mut queue = VecDeque::from([self.eos_id]);
        while let Some(j) = queue.pop_front() {
            for i in 0..v {
                if !reaches_eos[i] && self.m[i][j] > 0.0 {
                    reaches_eos[i] = true;
                    queue.push_back(i);
                }
            }
        }

        let mut seen = vec![false; v];
        let mut queue: VecDeque<usize> = (0..v).filter(|&i| self.pi[i] > 0.0).collect();
        for &i in &queue {
            seen[i] = true;
        }
        while let Some(i) = queue.pop_front() {
            if !reaches_eos[i] {
                return false;
            }
            for j in 0..v {
                if !seen[j] && self.m[i][j] > 0.0 {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        true
    }

    pub fn to_json(&self) -> String {
        let file = WorldFile {
            format: WORLD_FORMAT.into(),
            vocab_size: self.vocab_size,
            eos_id: self.eos_id,
            pi: self.pi.clone(),
            m: self.m.clone(),
        };
        serde_json::to_string(&file).expect("world serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, WorldError> {
        let file: WorldFile = serde_json::from_str(text)?;
        if file.format != WORLD_FORMAT {
            return Err(WorldError::Invalid(format!("unknown format {:?}", file.format)));
        }
        if file.vocab_size != file.pi.len() || file.eos_id + 1 != file.vocab_size {
            return Err(WorldError::Invalid(
                "vocab_size and eos_id disagree with pi".into(),
            ));
        }
        Self::from_parts(file.pi, file.m)
    }

    pub fn save(&self, path: &Path) -> Result<(), WorldError> {
        let mut text = self.to_json();
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl NextTokenModel for BigramWorld {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn eos_id(&self) -> usize {
        self.eos_id
    }

    fn start_probs(&self) -> &[f64] {
        &self.pi
    }

    fn next_probs(&self, prev: usize) -> &[f64] {
        &self.m[prev]
    }
}

fn uniform_start(v: usize) -> Vec<f64> {
    let mut pi = vec![1.0 / (v - 1) as f64; v];
    pi[v - 1] = 0.0;
    pi
}

/// Draws `count` sequences, each from its own sub-stream of `seed`.
pub fn sample_corpus(
    world: &BigramWorld,
    count: usize,
    max_len: usize,
    seed: u64,
    name: &str,
) -> Vec<TokenSequence> {
    let mut rng = rng::stream(seed, name, 0);
    (0..count)
        .map(|_| world.sample_sequence(max_len, &mut rng))
        .collect()
}
