//! Categorical and Gumbel-Softmax sampling, relaxed rollouts, and decoding.

use rand::distr::Open01;
use rand::{Rng, RngCore};
use thiserror::Error;

use crate::grad::{GradError, Tape, Tensor, Var};
use crate::model::{Forward, Mode, ModelError};
use crate::world::{BigramWorld, TokenSequence, EPSILON};

const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("distribution sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("probability at index {0} is not strictly positive")]
    ZeroProbability(usize),
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("top-p threshold {0} outside (0, 1]")]
    TopP(f64),
    #[error("rollout length must be at least 1")]
    RolloutLength,
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenRange { token: usize, vocab: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Anything that can hand out a start distribution and next-token rows.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;
    fn eos_id(&self) -> usize;
    fn start_probs(&self) -> &[f64];
    fn next_probs(&self, prev: usize) -> &[f64];
}

/// A bigram model given by explicit tables.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramTable {
    start: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl BigramTable {
    pub fn new(start: Vec<f64>, rows: Vec<Vec<f64>>) -> Self {
        Self { start, rows }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Natural-log probability of `seq` and the per-step probabilities.
    /// On an out-of-range token, returns that token as the error.
    pub fn seq_log_prob(&self, seq: &[usize]) -> Result<(f64, Vec<f64>), usize> {
        let v = self.rows.len();
        let mut probs = Vec::with_capacity(seq.len());
        let mut dist = &self.start;
        for &tok in seq {
            if tok >= v {
                return Err(tok);
            }
            probs.push(dist[tok]);
            dist = &self.rows[tok];
        }
        Ok((probs.iter().map(|p| p.ln()).sum(), probs))
    }
}

impl NextTokenModel for BigramTable {
    fn vocab_size(&self) -> usize {
        self.rows.len()
    }

    fn eos_id(&self) -> usize {
        self.rows.len() - 1
    }

    fn start_probs(&self) -> &[f64] {
        &self.start
    }

    fn next_probs(&self, prev: usize) -> &[f64] {
        &self.rows[prev]
    }
}

fn check_normalized(dist: &[f64]) -> Result<(), SamplingError> {
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > NORM_TOLERANCE || dist.iter().any(|&p| p < 0.0) {
        return Err(SamplingError::NotNormalized(total));
    }
    Ok(())
}

/// Inverse-CDF draw in index order.
pub fn categorical_sample(dist: &[f64], rng: &mut dyn RngCore) -> Result<usize, SamplingError> {
    check_normalized(dist)?;
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = i;
            if u < cum {
                return Ok(i);
            }
        }
    }
    // u landed in the rounding gap above the final cumulative sum
    Ok(last)
}

/// Standard Gumbel draw `-ln(-ln u)` with `u` in the open unit interval.
pub fn gumbel(rng: &mut dyn RngCore) -> f64 {
    let u: f64 = rng.sample(Open01);
    -(-u.ln()).ln()
}

/// `softmax((ln probs + g) / tau)` with fresh Gumbel noise `g`.
pub fn gumbel_softmax_sample(probs: &[f64], tau: f64, rng: &mut dyn RngCore) -> Result<Vec<f64>, SamplingError> {
    check_tau(tau)?;
    if let Some(i) = probs.iter().position(|&p| p <= 0.0) {
        return Err(SamplingError::ZeroProbability(i));
    }
    let z: Vec<f64> = probs.iter().map(|p| (p.ln() + gumbel(rng)) / tau).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = ex.iter().sum();
    Ok(ex.into_iter().map(|x| x / total).collect())
}

fn check_tau(tau: f64) -> Result<(), SamplingError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(SamplingError::Temperature(tau));
    }
    Ok(())
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Nucleus filter: keeps the smallest high-probability prefix whose mass
/// reaches `p` (the boundary token included) and renormalizes. Equal
/// probabilities are ranked by lower index. `p = 1` returns the input as is.
pub fn top_p_filter(dist: &[f64], p: f64) -> Result<Vec<f64>, SamplingError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(SamplingError::TopP(p));
    }
    check_normalized(dist)?;
    if p == 1.0 {
        return Ok(dist.to_vec());
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; dist.len()];
    let mut cum = 0.0;
    for &i in &order {
        if dist[i] <= 0.0 {
            break;
        }
        out[i] = dist[i];
        cum += dist[i];
        if cum >= p {
            break;
        }
    }
    out.iter_mut().for_each(|x| *x /= cum);
    Ok(out)
}

/// Samples a continuation of `prompt`: starts from the distribution after
/// the last prompt token (the start distribution for an empty prompt) and
/// emits at most `max_len` new tokens, stopping after EOS.
pub fn generate(
    model: &dyn NextTokenModel,
    prompt: &[usize],
    max_len: usize,
    p: f64,
    rng: &mut dyn RngCore,
) -> Result<TokenSequence, SamplingError> {
    let v = model.vocab_size();
    if let Some(&token) = prompt.iter().find(|&&t| t >= v) {
        return Err(SamplingError::TokenRange { token, vocab: v });
    }
    let eos = model.eos_id();
    let mut out = Vec::new();
    let mut prev = prompt.last().copied();
    if prev == Some(eos) {
        return Ok(TokenSequence::new(out, eos));
    }
    while out.len() < max_len {
        let dist = match prev {
            None => model.start_probs(),
            Some(t) => model.next_probs(t),
        };
        let tok = if p == 1.0 {
            categorical_sample(dist, rng)?
        } else {
            categorical_sample(&top_p_filter(dist, p)?, rng)?
        };
        out.push(tok);
        if tok == eos {
            break;
        }
        prev = Some(tok);
    }
    Ok(TokenSequence::new(out, eos))
}

/// `count` unbiased (p = 1) samples from scratch.
pub fn sample_sequences(
    model: &dyn NextTokenModel,
    count: usize,
    max_len: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<TokenSequence>, SamplingError> {
    (0..count).map(|_| generate(model, &[], max_len, 1.0, rng)).collect()
}

/// One step of a batch of relaxed rollouts. Rows are the rollouts still
/// running at this step, in increasing rollout order.
#[derive(Debug, Clone)]
struct RelaxedStep {
    rows: Vec<usize>,
    y: Var,
    /// Relaxed sample of the previous step, restricted to `rows`.
    prev_y: Option<Var>,
    log_q_term: Var,
}

/// One relaxed sequence read back from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedSequence {
    pub steps: Vec<Vec<f64>>,
    /// `done_mask[t]` is true for steps after the hard argmax hit EOS.
    pub done_mask: Vec<bool>,
    pub tau: f64,
}

/// A batch of Gumbel-Softmax rollouts recorded on a tape.
///
/// A rollout stops once the hard argmax of its relaxed sample is EOS; later
/// steps are never computed, so they contribute nothing to either score.
#[derive(Debug, Clone)]
pub struct RelaxedRollouts {
    count: usize,
    max_len: usize,
    tau: f64,
    steps: Vec<RelaxedStep>,
    lengths: Vec<usize>,
    log_q: Var,
}

/// Rolls out `count` relaxed sequences from the model behind `fwd`.
///
/// At each step `y_t = softmax((ln q_t + g) / tau)` and the next input is the
/// embedding interpolation `y_t E`. Gumbel noise is drawn from `noise`,
/// dropout masks (in training mode) from `mode`.
pub fn rollout_relaxed(
    tape: &mut Tape,
    fwd: &Forward,
    count: usize,
    max_len: usize,
    tau: f64,
    mode: &mut Mode,
    noise: &mut dyn RngCore,
) -> Result<RelaxedRollouts, SamplingError> {
    check_tau(tau)?;
    if max_len == 0 {
        return Err(SamplingError::RolloutLength);
    }
    let v = fwd.vocab_size();
    let eos = fwd.eos_id();
    let mut rows: Vec<usize> = (0..count).collect();
    let mut lengths = vec![0; count];
    let mut steps = Vec::new();
    let mut prev_y: Option<Var> = None;

    for _ in 0..max_len {
        if rows.is_empty() {
            break;
        }
        let n = rows.len();
        let log_q = match prev_y {
            None => fwd.log_probs_hard(tape, &vec![eos; n], mode)?,
            Some(y) => fwd.log_probs_soft(tape, y, mode)?,
        };
        let g: Vec<f64> = (0..n * v).map(|_| gumbel(noise)).collect();
        let g = tape.constant(Tensor::matrix(n, v, g)?);
        let z = tape.add(log_q, g)?;
        let z = if tau == 1.0 { z } else { tape.scale(z, 1.0 / tau)? };
        let y = tape.row_softmax(z)?;
        let yq = tape.mul(y, log_q)?;
        let log_q_term = tape.row_sum(yq)?;

        let yv = tape.value(y);
        let done: Vec<bool> = (0..n).map(|r| argmax(yv.row(r)) == eos).collect();
        tape.record_branch(&done);
        for &r in &rows {
            lengths[r] += 1;
        }
        steps.push(RelaxedStep {
            rows: rows.clone(),
            y,
            prev_y,
            log_q_term,
        });

        let keep: Vec<usize> = (0..n).filter(|&k| !done[k]).collect();
        if keep.is_empty() {
            break;
        }
        prev_y = Some(if keep.len() == n { y } else { tape.index_rows(y, &keep)? });
        rows = keep.iter().map(|&k| rows[k]).collect();
    }

    let parts: Vec<(Var, &[usize])> = steps.iter().map(|s| (s.log_q_term, &s.rows[..])).collect();
    let log_q = sum_per_rollout(tape, &parts, count)?;
    Ok(RelaxedRollouts {
        count,
        max_len,
        tau,
        steps,
        lengths,
        log_q,
    })
}

/// Adds per-step `rows x 1` terms into a `count x 1` per-rollout column.
fn sum_per_rollout(tape: &mut Tape, parts: &[(Var, &[usize])], count: usize) -> Result<Var, GradError> {
    let mut total = tape.constant(Tensor::zeros(&[count, 1]));
    for &(term, rows) in parts {
        let spread = tape.scatter_rows(term, rows, count)?;
        total = tape.add(total, spread)?;
    }
    Ok(total)
}

impl RelaxedRollouts {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Active steps of each rollout.
    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn total_steps(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// `count x 1` column of `sum_t y_t . ln q_t` over active steps.
    pub fn relaxed_log_q(&self) -> Var {
        self.log_q
    }

    /// `count x 1` column of
    /// `y_1 . ln(pi + eps) + sum_{t>=2} y_{t-1} ln(M + eps) y_t`.
    ///
    /// The EOS row of `ln(M + eps)` is replaced by `ln(pi + eps)`, matching
    /// the model, which reads the EOS embedding as its start context. No
    /// sequence moves out of EOS, so one-hot rollouts are unaffected, while
    /// soft EOS mass in `y_{t-1}` would otherwise cost `ln eps` per step.
    pub fn relaxed_log_p(&self, tape: &mut Tape, world: &BigramWorld) -> Result<Var, SamplingError> {
        let v = world.vocab_size();
        let eos = world.eos_id();
        let log_pi: Vec<f64> = world.pi().iter().map(|p| (p + EPSILON).ln()).collect();
        let log_m: Vec<f64> = world
            .transitions()
            .iter()
            .enumerate()
            .flat_map(|(i, row)| if i == eos { world.pi() } else { &row[..] })
            .map(|p| (p + EPSILON).ln())
            .collect();
        let log_pi = tape.constant(Tensor::matrix(v, 1, log_pi)?);
        let log_m = tape.constant(Tensor::matrix(v, v, log_m)?);
        let mut parts = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let term = match s.prev_y {
                None => tape.matmul(s.y, log_pi)?,
                Some(prev) => {
                    let a = tape.matmul(prev, log_m)?;
                    let b = tape.mul(a, s.y)?;
                    tape.row_sum(b)?
                }
            };
            parts.push((term, &s.rows[..]));
        }
        Ok(sum_per_rollout(tape, &parts, self.count)?)
    }

    /// Hard decoding of each rollout by per-step argmax.
    pub fn decoded(&self, tape: &Tape) -> Vec<TokenSequence> {
        let eos = tape.value(self.steps[0].y).cols() - 1;
        let mut tokens = vec![Vec::new(); self.count];
        for s in &self.steps {
            let y = tape.value(s.y);
            for (k, &r) in s.rows.iter().enumerate() {
                tokens[r].push(argmax(y.row(k)));
            }
        }
        tokens.into_iter().map(|t| TokenSequence::new(t, eos)).collect()
    }

    /// Per-rollout relaxed samples with their done masks.
    pub fn sequences(&self, tape: &Tape) -> Vec<RelaxedSequence> {
        let mut out: Vec<RelaxedSequence> = self
            .lengths
            .iter()
            .map(|&len| RelaxedSequence {
                steps: Vec::with_capacity(len),
                done_mask: (0..self.max_len).map(|t| t >= len).collect(),
                tau: self.tau,
            })
            .collect();
        for s in &self.steps {
            let y = tape.value(s.y);
            for (k, &r) in s.rows.iter().enumerate() {
                out[r].steps.push(y.row(k).to_vec());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NeuralBigramLM;
    use crate::rng;
    use proptest::prelude::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn categorical_delta_and_reproducibility() {
        let mut r = rng::stream(0, "cat", 0);
        for _ in 0..100 {
            assert_eq!(categorical_sample(&[0.0, 1.0, 0.0], &mut r).unwrap(), 1);
        }
        let draw = |seed| {
            let mut r = rng::stream(seed, "cat", 0);
            (0..20)
                .map(|_| categorical_sample(&[0.2, 0.3, 0.5], &mut r).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        assert!(categorical_sample(&[0.5, 0.4], &mut r).is_err());
    }

    #[test]
    fn categorical_fair_coin() {
        let mut r = rng::stream(1, "coin", 0);
        let zeros = (0..100_000)
            .filter(|_| categorical_sample(&[0.5, 0.5], &mut r).unwrap() == 0)
            .count();
        let f = zeros as f64 / 100_000.0;
        assert!((0.494..=0.506).contains(&f), "{f}");
    }

    #[test]
    fn gumbel_softmax_low_temperature_is_one_hot() {
        let mut r = rng::stream(2, "gs", 0);
        for _ in 0..100 {
            let y = gumbel_softmax_sample(&[0.2, 0.5, 0.3], 1e-4, &mut r).unwrap();
            assert!(y.iter().cloned().fold(0.0, f64::max) > 0.999);
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(gumbel_softmax_sample(&[0.0, 1.0], 1.0, &mut r).is_err());
        assert!(gumbel_softmax_sample(&[0.5, 0.5], 0.0, &mut r).is_err());
    }

    fn gumbel_max_frequencies(probs: &[f64], tau: f64, draws: usize, seed: u64) {
        let mut r = rng::stream(seed, "gmax", 0);
        let mut counts = vec![0usize; probs.len()];
        for _ in 0..draws {
            let y = gumbel_softmax_sample(probs, tau, &mut r).unwrap();
            counts[argmax(&y)] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            let f = *c as f64 / draws as f64;
            assert!((f - p).abs() <= 3.0 * se, "{f} vs {p}");
        }
    }

    #[test]
    fn gumbel_max_uniform() {
        gumbel_max_frequencies(&[0.25; 4], 1.0, 100_000, 3);
    }

    #[test]
    fn gumbel_max_matches_categorical_at_any_temperature() {
        gumbel_max_frequencies(&[0.1, 0.6, 0.3], 0.1, 50_000, 4);
        gumbel_max_frequencies(&[0.1, 0.6, 0.3], 1.0, 50_000, 5);
    }

    #[test]
    fn top_p_examples() {
        let out = top_p_filter(&[0.5, 0.3, 0.2], 0.8).unwrap();
        assert_close(&out, &[0.625, 0.375, 0.0], 1e-15);
        assert_eq!(top_p_filter(&[0.0, 1.0, 0.0], 0.3).unwrap(), vec![0.0, 1.0, 0.0]);
        let d = [0.1, 0.2, 0.7];
        assert_eq!(top_p_filter(&d, 1.0).unwrap(), d.to_vec());
        assert!(top_p_filter(&d, 0.0).is_err());
        assert!(top_p_filter(&d, 1.5).is_err());
    }

    #[test]
    fn top_p_ties_prefer_lower_index() {
        let out = top_p_filter(&[0.25, 0.25, 0.25, 0.25], 0.3).unwrap();
        assert_eq!(out, vec![0.5, 0.5, 0.0, 0.0]);
        let out = top_p_filter(&[0.25, 0.25, 0.25, 0.25], 0.2).unwrap();
        assert_eq!(out, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn top_p_second_pass_can_drop_the_boundary_token() {
        let d = [0.3, 0.25, 0.2, 0.15, 0.1];
        let once = top_p_filter(&d, 0.8).unwrap();
        assert_eq!(once.iter().filter(|&&x| x > 0.0).count(), 4);
        let twice = top_p_filter(&once, 0.8).unwrap();
        assert_eq!(twice.iter().filter(|&&x| x > 0.0).count(), 3);
    }

    fn arb_dist() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 1..12).prop_filter_map("nonzero", |xs| {
            let s: f64 = xs.iter().sum();
            (s > 1e-6).then(|| xs.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn top_p_properties(d in arb_dist(), p in 0.001f64..=1.0) {
            let once = top_p_filter(&d, p).unwrap();
            let twice = top_p_filter(&once, p).unwrap();
            prop_assert!((once.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // a second pass can only shrink the nucleus, and repeated passes
            // settle on a fixed point
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!(*a > 0.0 || *b == 0.0);
            }
            let mut cur = once.clone();
            for _ in 0..d.len() {
                cur = top_p_filter(&cur, p).unwrap();
            }
            let fixed = top_p_filter(&cur, p).unwrap();
            for (a, b) in cur.iter().zip(&fixed) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for (o, i) in once.iter().zip(&d) {
                prop_assert!(*i > 0.0 || *o == 0.0);
            }
        }

        #[test]
        fn gumbel_softmax_normalized(d in arb_dist(), tau in 0.01f64..10.0, seed in any::<u64>()) {
            let positive: Vec<f64> = d.iter().map(|x| x + 1e-3).collect();
            let s: f64 = positive.iter().sum();
            let probs: Vec<f64> = positive.iter().map(|x| x / s).collect();
            let mut r = rng::stream(seed, "gsp", 0);
            let y = gumbel_softmax_sample(&probs, tau, &mut r).unwrap();
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn chain_table() -> BigramTable {
        // start on 0, 0 -> 1, 1 -> EOS
        BigramTable::new(
            vec![1.0, 0.0, 0.0],
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0; 3]],
        )
    }

    #[test]
    fn generate_deterministic_chain() {
        for seed in 0..5 {
            let mut r = rng::stream(seed, "gen", 0);
            let s = generate(&chain_table(), &[], 10, 1.0, &mut r).unwrap();
            assert_eq!(s.tokens, vec![0, 1, 2]);
            let s = generate(&chain_table(), &[0], 10, 1.0, &mut r).unwrap();
            assert_eq!(s.tokens, vec![1, 2]);
            let s = generate(&chain_table(), &[], 2, 1.0, &mut r).unwrap();
            assert!(!s.terminated);
        }
        let mut r = rng::stream(0, "gen", 0);
        assert!(generate(&chain_table(), &[7], 10, 1.0, &mut r).is_err());
    }

    #[test]
    fn tiny_nucleus_is_greedy() {
        let w = BigramWorld::init_random(8, 0.0, 0.5, 9).unwrap();
        let mut r = rng::stream(3, "greedy", 0);
        let s = generate(&w, &[], 30, 1e-9, &mut r).unwrap();
        let mut prev: Option<usize> = None;
        for &t in &s.tokens {
            let dist = prev.map_or(w.pi(), |p| w.row(p));
            assert_eq!(t, argmax(dist));
            prev = Some(t);
        }
    }

    #[test]
    fn generation_from_world_matches_world_sampling() {
        let w = BigramWorld::init_random(4, 0.0, 0.5, 21).unwrap();
        let mut r = rng::stream(6, "genw", 0);
        let mut counts = vec![vec![0usize; 4]; 4];
        let mut steps = 0;
        while steps < 100_000 {
            let s = generate(&w, &[], 500, 1.0, &mut r).unwrap();
            for p in s.tokens.windows(2) {
                counts[p[0]][p[1]] += 1;
                steps += 1;
            }
        }
        for i in 0..3 {
            let n: usize = counts[i].iter().sum();
            for j in 0..4 {
                let p = w.row(i)[j];
                let se = (p * (1.0 - p) / n as f64).sqrt();
                let f = counts[i][j] as f64 / n as f64;
                assert!((f - p).abs() <= 3.0 * se + 1e-12);
            }
        }
    }

    /// Model whose start is token 0 and whose token 0 moves to EOS, both with
    /// probability close to 1.
    fn chain_model() -> NeuralBigramLM {
        let w = BigramWorld::from_parts(
            vec![1.0, 0.0, 0.0],
            vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0], vec![0.0; 3]],
        )
        .unwrap();
        NeuralBigramLM::from_world(&w)
    }

    #[test]
    fn low_temperature_rollout_matches_hard_sequence() {
        let m = chain_model();
        let mut tape = Tape::new();
        let f = m.attach(&mut tape).unwrap();
        let mut noise = rng::stream(0, "noise", 0);
        let ro = rollout_relaxed(&mut tape, &f, 4, 10, 1e-4, &mut Mode::Eval, &mut noise).unwrap();
        assert_eq!(ro.lengths(), &[2, 2, 2, 2]);
        let (hard, _) = m.seq_log_prob(&[0, 2]).unwrap();
        let lq = tape.value(ro.relaxed_log_q()).clone();
        for r in 0..4 {
            assert!((lq.data()[r] - hard).abs() < 1e-3);
        }
        for seq in ro.sequences(&tape) {
            assert_eq!(seq.done_mask[..3], [false, false, true]);
            assert!(seq.done_mask[2..].iter().all(|&d| d));
        }
    }

    #[test]
    fn one_hot_rollouts_score_like_the_world() {
        // With a very low temperature every relaxed step is one-hot to
        // machine precision, so the relaxed score is the world log prob.
        let w = BigramWorld::init_random(5, 0.4, 0.5, 2).unwrap();
        let m = NeuralBigramLM::new(5, 4, 0.0, 3).unwrap();
        let mut tape = Tape::new();
        let f = m.attach(&mut tape).unwrap();
        let mut noise = rng::stream(1, "noise", 0);
        let ro = rollout_relaxed(&mut tape, &f, 50, 6, 1e-6, &mut Mode::Eval, &mut noise).unwrap();
        let lp = ro.relaxed_log_p(&mut tape, &w).unwrap();
        let decoded = ro.decoded(&tape);
        for (r, seq) in decoded.iter().enumerate() {
            let y = ro.sequences(&tape)[r].steps.clone();
            if y.iter().all(|s| s.iter().all(|&x| x == 0.0 || x == 1.0)) {
                let expect = w.log_prob(&seq.tokens, EPSILON);
                assert!((tape.value(lp).data()[r] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn masked_steps_contribute_nothing() {
        let w = BigramWorld::init_random(5, 0.4, 0.5, 4).unwrap();
        let m = NeuralBigramLM::new(5, 4, 0.0, 5).unwrap();
        let mut tape = Tape::new();
        let f = m.attach(&mut tape).unwrap();
        let mut noise = rng::stream(2, "noise", 0);
        let ro = rollout_relaxed(&mut tape, &f, 30, 8, 1.0, &mut Mode::Eval, &mut noise).unwrap();
        let lq = tape.value(ro.relaxed_log_q()).clone();
        let lp_var = ro.relaxed_log_p(&mut tape, &w).unwrap();
        let lp = tape.value(lp_var).clone();
        let table = m.as_table();
        let seqs = ro.sequences(&tape);
        for (r, seq) in seqs.iter().enumerate() {
            assert_eq!(seq.steps.len(), ro.lengths()[r]);
            // recompute from active steps only
            let mut q = 0.0;
            let mut p = 0.0;
            let mut prev: Option<&Vec<f64>> = None;
            for y in &seq.steps {
                let dist = match prev {
                    None => table.start_probs().to_vec(),
                    Some(py) => m.next_token_dist(py, &mut Mode::Eval).unwrap(),
                };
                q += y.iter().zip(&dist).map(|(a, b)| a * b.ln()).sum::<f64>();
                p += match prev {
                    None => y.iter().zip(w.pi()).map(|(a, b)| a * (b + EPSILON).ln()).sum::<f64>(),
                    Some(py) => {
                        let mut acc = 0.0;
                        for i in 0..5 {
                            for j in 0..5 {
                                // EOS mass in a soft context scores like the start
                                let row = if i == 4 { w.pi() } else { w.row(i) };
                                acc += py[i] * (row[j] + EPSILON).ln() * y[j];
                            }
                        }
                        acc
                    }
                };
                prev = Some(y);
            }
            assert!((lq.data()[r] - q).abs() < 1e-9 * q.abs().max(1.0));
            assert!((lp.data()[r] - p).abs() < 1e-9 * p.abs().max(1.0));
            let steps = seq.steps.len();
            assert!(seq.done_mask[steps..].iter().all(|&d| d));
            assert!(seq.done_mask[..steps].iter().all(|&d| !d));
        }
    }
}
