//! Evaluation metrics: transition-matrix divergences, perplexity, n-gram
//! diversity, and fixed-length fragment sampling.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::TokenSequence;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("matrix shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("no log probabilities given")]
    Empty,
    #[error("every text is shorter than {0} tokens")]
    AllTooShort(usize),
    #[error("no text has at least {0} tokens")]
    NoLongText(usize),
    #[error("fragment length and count must be positive")]
    ZeroFragment,
}

/// Jensen-Shannon divergence with mixing weight 1/2, in nats. Terms with a
/// zero coefficient are zero.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            total += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            total += 0.5 * b * (b / m).ln();
        }
    }
    total.max(0.0)
}

fn shape(m: &[Vec<f64>]) -> (usize, usize) {
    (m.len(), m.first().map_or(0, Vec::len))
}

fn check_shapes(gold: &[Vec<f64>], learned: &[Vec<f64>]) -> Result<(), MetricError> {
    let ragged = |m: &[Vec<f64>]| m.iter().any(|r| r.len() != m.len());
    if shape(gold) != shape(learned) || ragged(gold) || ragged(learned) {
        return Err(MetricError::ShapeMismatch(shape(gold), shape(learned)));
    }
    Ok(())
}

/// Mean row-wise JS divergence over all rows but the last (EOS) one.
pub fn avg_js(gold: &[Vec<f64>], learned: &[Vec<f64>]) -> Result<f64, MetricError> {
    check_shapes(gold, learned)?;
    let rows = gold.len().saturating_sub(1);
    if rows == 0 {
        return Ok(0.0);
    }
    let total: f64 = gold[..rows]
        .iter()
        .zip(learned)
        .map(|(p, q)| js_divergence(p, q))
        .sum();
    Ok(total / rows as f64)
}

/// Learned probability mass at gold-zero positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroMass {
    pub mean: f64,
    /// Number of gold-zero positions outside the EOS row. When zero, `mean`
    /// is reported as 0.
    pub positions: usize,
}

impl ZeroMass {
    pub fn degenerate(&self) -> bool {
        self.positions == 0
    }
}

/// Mean of learned entries where the gold matrix is exactly zero, EOS row
/// excluded.
pub fn avg_0s(gold: &[Vec<f64>], learned: &[Vec<f64>]) -> Result<ZeroMass, MetricError> {
    check_shapes(gold, learned)?;
    let rows = gold.len().saturating_sub(1);
    let mut total = 0.0;
    let mut positions = 0;
    for (p, q) in gold[..rows].iter().zip(learned) {
        for (&a, &b) in p.iter().zip(q) {
            if a == 0.0 {
                total += b;
                positions += 1;
            }
        }
    }
    let mean = if positions == 0 { 0.0 } else { total / positions as f64 };
    Ok(ZeroMass { mean, positions })
}

/// `exp` of the negative mean natural-log token probability.
pub fn perplexity(token_log_probs: &[f64]) -> Result<f64, MetricError> {
    if token_log_probs.is_empty() {
        return Err(MetricError::Empty);
    }
    let mean = token_log_probs.iter().sum::<f64>() / token_log_probs.len() as f64;
    Ok((-mean).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NgramDiversity {
    pub mean: f64,
    /// Texts shorter than four tokens, left out of the mean.
    pub skipped: usize,
}

/// Unique-to-total n-gram ratio for n = 1..=4, averaged over n.
pub fn text_diversity(tokens: &[usize]) -> f64 {
    let mut total = 0.0;
    for n in 1..=4 {
        let grams: Vec<&[usize]> = tokens.windows(n).collect();
        let unique: HashSet<&[usize]> = grams.iter().copied().collect();
        total += unique.len() as f64 / grams.len() as f64;
    }
    total / 4.0
}

/// Mean of [`text_diversity`] over texts with at least four tokens.
pub fn ngram_diversity(texts: &[TokenSequence]) -> Result<NgramDiversity, MetricError> {
    let mut total = 0.0;
    let mut used = 0;
    for t in texts.iter().filter(|t| t.len() >= 4) {
        total += text_diversity(&t.tokens);
        used += 1;
    }
    let skipped = texts.len() - used;
    if used == 0 {
        return Err(MetricError::AllTooShort(4));
    }
    if skipped > 0 {
        log::warn!("n-gram diversity skipped {skipped} texts shorter than 4 tokens");
    }
    Ok(NgramDiversity {
        mean: total / used as f64,
        skipped,
    })
}

/// A fragment and where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub text: usize,
    pub start: usize,
    pub tokens: Vec<usize>,
}

/// Draws `count` fragments of exactly `len` tokens, with replacement: first a
/// text uniformly among those with at least `len` tokens, then a start
/// offset uniformly among the valid ones.
pub fn fragment_sample(
    texts: &[TokenSequence],
    len: usize,
    count: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<Fragment>, MetricError> {
    if len == 0 || count == 0 {
        return Err(MetricError::ZeroFragment);
    }
    let eligible: Vec<usize> = (0..texts.len()).filter(|&i| texts[i].len() >= len).collect();
    if eligible.is_empty() {
        return Err(MetricError::NoLongText(len));
    }
    Ok((0..count)
        .map(|_| {
            let text = eligible[rng.random_range(0..eligible.len())];
            let tokens = &texts[text].tokens;
            let start = rng.random_range(0..=tokens.len() - len);
            Fragment {
                text,
                start,
                tokens: tokens[start..start + len].to_vec(),
            }
        })
        .collect())
}

/// Serialized evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub avg_js: f64,
    pub avg_0s: f64,
    pub perplexity: Option<f64>,
    pub diversity: Option<f64>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl MetricReport {
    /// `avg_js` and `avg_0s` of `learned` against `gold`, with the zero-mass
    /// degeneracy noted in the metadata.
    pub fn from_matrices(gold: &[Vec<f64>], learned: &[Vec<f64>]) -> Result<Self, MetricError> {
        let js = avg_js(gold, learned)?;
        let zeros = avg_0s(gold, learned)?;
        let mut meta = BTreeMap::new();
        meta.insert("gold_zero_positions".into(), zeros.positions.into());
        Ok(Self {
            avg_js: js,
            avg_0s: zeros.mean,
            perplexity: None,
            diversity: None,
            meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn js_hand_values() {
        let js = js_divergence(&[1.0, 0.0], &[0.5, 0.5]);
        let oracle = 0.5 * (1.0f64 / 0.75).ln() + 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln());
        assert!((js - oracle).abs() < 1e-15);
        assert!((js - 0.21576).abs() < 1e-5);
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn avg_js_excludes_eos_row() {
        let gold = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let learned = m(&[&[0.5, 0.5], &[0.3, 0.7]]);
        let v = avg_js(&gold, &learned).unwrap();
        assert!((v - js_divergence(&[1.0, 0.0], &[0.5, 0.5])).abs() < 1e-15);
        assert_eq!(avg_js(&gold, &gold).unwrap(), 0.0);
        assert!(avg_js(&gold, &m(&[&[1.0]])).is_err());
    }

    #[test]
    fn avg_0s_hand_value() {
        let gold = m(&[&[0.5, 0.0, 0.5], &[0.2, 0.3, 0.5], &[0.0, 0.0, 0.0]]);
        let learned = m(&[&[0.4, 0.2, 0.4], &[0.2, 0.3, 0.5], &[0.3, 0.3, 0.4]]);
        let z = avg_0s(&gold, &learned).unwrap();
        assert!((z.mean - 0.2).abs() < 1e-15);
        assert_eq!(z.positions, 1);
        assert_eq!(avg_0s(&gold, &gold).unwrap().mean, 0.0);
        let dense = m(&[&[0.5, 0.5], &[0.0, 0.0]]);
        assert!(avg_0s(&dense, &dense).unwrap().degenerate());
    }

    #[test]
    fn perplexity_values() {
        let p = perplexity(&[0.5f64.ln(), 0.25f64.ln()]).unwrap();
        assert!((p - 8f64.sqrt()).abs() < 1e-12);
        assert!((perplexity(&[0.2f64.ln(); 7]).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(perplexity(&[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(perplexity(&[]), Err(MetricError::Empty));
    }

    #[test]
    fn diversity_values() {
        let aaaa = TokenSequence::new(vec![0, 0, 0, 0], 9);
        let d = ngram_diversity(&[aaaa.clone()]).unwrap();
        assert!((d.mean - (0.25 + 1.0 / 3.0 + 0.5 + 1.0) / 4.0).abs() < 1e-15);
        let distinct = TokenSequence::new(vec![0, 1, 2, 3, 4], 9);
        assert_eq!(ngram_diversity(&[distinct]).unwrap().mean, 1.0);
        let short = TokenSequence::new(vec![1, 2], 9);
        let d = ngram_diversity(&[aaaa, short.clone()]).unwrap();
        assert_eq!(d.skipped, 1);
        assert_eq!(ngram_diversity(&[short]), Err(MetricError::AllTooShort(4)));
    }

    #[test]
    fn fragments_of_exact_text() {
        let texts = vec![TokenSequence::new(vec![3, 1, 4, 1, 5], 9), TokenSequence::new(vec![2], 9)];
        let mut r = rng::stream(0, "frag", 0);
        for f in fragment_sample(&texts, 5, 50, &mut r).unwrap() {
            assert_eq!(f.tokens, vec![3, 1, 4, 1, 5]);
        }
        assert_eq!(fragment_sample(&texts, 6, 1, &mut r), Err(MetricError::NoLongText(6)));
        assert_eq!(fragment_sample(&texts, 0, 1, &mut r), Err(MetricError::ZeroFragment));
    }

    fn row_stochastic(v: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.0f64..1.0, v), v).prop_map(|rows| {
            rows.into_iter()
                .map(|r| {
                    let s: f64 = r.iter().sum::<f64>() + 1e-12;
                    r.iter().map(|x| x / s).collect()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn avg_js_symmetric_and_bounded(a in row_stochastic(5), b in row_stochastic(5)) {
            let ab = avg_js(&a, &b).unwrap();
            let ba = avg_js(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= 0.0 && ab <= 2f64.ln() + 1e-12);
        }

        #[test]
        fn zero_mass_vanishes_on_sub_support(a in row_stochastic(4)) {
            let z = avg_0s(&a, &a).unwrap();
            prop_assert_eq!(z.mean, 0.0);
        }

        #[test]
        fn diversity_in_unit_interval_and_relabel_invariant(
            toks in prop::collection::vec(0usize..6, 4..40),
            shift in 1usize..6,
        ) {
            let d = text_diversity(&toks);
            prop_assert!(d > 0.0 && d <= 1.0);
            let relabeled: Vec<usize> = toks.iter().map(|t| (t + shift) % 6).collect();
            prop_assert_eq!(d, text_diversity(&relabeled));
        }
    }
}
