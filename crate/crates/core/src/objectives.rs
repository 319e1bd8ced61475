//! Training objectives built as scalar loss nodes on a tape.
//!
//! Every objective consumes [`SequenceScores`]: per-sequence model log
//! probabilities (and, with a gold world, gold log probabilities) for either
//! data sequences or samples from the model. Samples are relaxed rollouts
//! during training and hard samples when a loss value is only estimated.
//!
//! CE-style losses are token means; the generalized JS loss is a sequence
//! mean. All logarithms are natural.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{GradError, Tape, Tensor, Var};
use crate::model::{Forward, Mode, ModelError};
use crate::sampling::{RelaxedRollouts, SamplingError};
use crate::world::{BigramWorld, TokenSequence, EPSILON};

/// Longest sequence the sequence-weighted loss accepts before the product of
/// step probabilities risks underflow.
pub const SEQ_WEIGHT_MAX_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("no samples from the model")]
    NoSamples,
    #[error("{0} needs gold log probabilities, but no world was given")]
    MissingWorld(&'static str),
    #[error("{0} needs {1}")]
    MissingInput(&'static str, &'static str),
    #[error("mixing ratio {eta} outside {range}")]
    Eta { eta: f64, range: &'static str },
    #[error("sequence {index} has {len} tokens, more than the limit of {limit}")]
    SequenceTooLong { index: usize, len: usize, limit: usize },
    #[error("{0} needs token-level scores")]
    NoTokens(&'static str),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// KL(P || Q); trains exactly like maximum likelihood.
    ForwardKl,
    ReverseKl,
    MixKl,
    GeneralizedJs,
    #[serde(rename = "mixce_oracle")]
    MixCeOracle,
    #[serde(rename = "mixce_approx")]
    MixCeApprox,
    SeqWeightedRevCe,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 7] = [
        ObjectiveKind::ForwardKl,
        ObjectiveKind::ReverseKl,
        ObjectiveKind::MixKl,
        ObjectiveKind::GeneralizedJs,
        ObjectiveKind::MixCeOracle,
        ObjectiveKind::MixCeApprox,
        ObjectiveKind::SeqWeightedRevCe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::ForwardKl => "forward_kl",
            ObjectiveKind::ReverseKl => "reverse_kl",
            ObjectiveKind::MixKl => "mix_kl",
            ObjectiveKind::GeneralizedJs => "generalized_js",
            ObjectiveKind::MixCeOracle => "mixce_oracle",
            ObjectiveKind::MixCeApprox => "mixce_approx",
            ObjectiveKind::SeqWeightedRevCe => "seq_weighted_rev_ce",
        }
    }

    /// Objectives that cannot be computed without the gold distribution.
    pub fn oracle_only(self) -> bool {
        matches!(
            self,
            ObjectiveKind::ReverseKl
                | ObjectiveKind::MixKl
                | ObjectiveKind::GeneralizedJs
                | ObjectiveKind::MixCeOracle
        )
    }

    pub fn uses_eta(self) -> bool {
        matches!(
            self,
            ObjectiveKind::MixKl
                | ObjectiveKind::GeneralizedJs
                | ObjectiveKind::MixCeOracle
                | ObjectiveKind::MixCeApprox
        )
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown objective {s:?}"))
    }
}

fn default_eta() -> f64 {
    1.0
}

fn default_tau() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    /// Weight of the forward term; ignored by the pure KL objectives.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Rollouts per batch; defaults to the batch size.
    #[serde(default)]
    pub mc_samples: Option<usize>,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind, eta: f64) -> Self {
        Self {
            kind,
            eta,
            mc_samples: None,
            tau: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ObjectiveKind::GeneralizedJs {
            if !(self.eta > 0.0 && self.eta < 1.0) {
                return Err(ObjectiveError::Eta {
                    eta: self.eta,
                    range: "(0, 1)",
                });
            }
        } else if !(0.0..=1.0).contains(&self.eta) {
            return Err(ObjectiveError::Eta {
                eta: self.eta,
                range: "[0, 1]",
            });
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(SamplingError::Temperature(self.tau).into());
        }
        if self.mc_samples == Some(0) {
            return Err(ObjectiveError::NoSamples);
        }
        Ok(())
    }

    /// Whether the loss has a data (expectation under P) term.
    pub fn uses_data(&self) -> bool {
        match self.kind {
            ObjectiveKind::ReverseKl => false,
            ObjectiveKind::MixKl | ObjectiveKind::MixCeOracle => self.eta > 0.0,
            _ => true,
        }
    }

    /// Whether the loss has a model-sample (expectation under Q) term.
    pub fn uses_samples(&self) -> bool {
        match self.kind {
            ObjectiveKind::ReverseKl | ObjectiveKind::GeneralizedJs => true,
            ObjectiveKind::MixKl | ObjectiveKind::MixCeOracle => self.eta < 1.0,
            _ => false,
        }
    }
}

/// Model (and optionally gold) log probabilities of a set of sequences.
#[derive(Debug, Clone)]
pub struct SequenceScores {
    /// `n x 1` model log probability per sequence.
    pub seq_log_q: Var,
    /// `N x 1` model log probability per token, for hard sequences.
    pub token_log_q: Option<Var>,
    /// `n x 1` gold log probability per sequence.
    pub log_p: Option<Var>,
    pub lengths: Vec<usize>,
    /// True when the sequences are relaxed rollouts.
    pub relaxed: bool,
}

impl SequenceScores {
    pub fn count(&self) -> usize {
        self.lengths.len()
    }

    pub fn tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Scores hard sequences under the model (first token conditioned on the
/// start context) and, when a world is given, under the gold distribution.
pub fn score_sequences(
    tape: &mut Tape,
    fwd: &Forward,
    seqs: &[TokenSequence],
    world: Option<&BigramWorld>,
    mode: &mut Mode,
) -> Result<SequenceScores> {
    let eos = fwd.eos_id();
    let total: usize = seqs.iter().map(TokenSequence::len).sum();
    let mut prev = Vec::with_capacity(total);
    let mut next = Vec::with_capacity(total);
    let mut owner = Vec::with_capacity(total);
    for (i, s) in seqs.iter().enumerate() {
        let mut p = eos;
        for &t in &s.tokens {
            prev.push(p);
            next.push(t);
            owner.push(i);
            p = t;
        }
    }
    let log_q = fwd.log_probs_hard(tape, &prev, mode)?;
    let token_log_q = tape.pick(log_q, &next)?;
    let seq_log_q = tape.scatter_rows(token_log_q, &owner, seqs.len())?;
    let log_p = match world {
        Some(w) => {
            let lp: Vec<f64> = seqs.iter().map(|s| w.log_prob(&s.tokens, EPSILON)).collect();
            Some(tape.constant(Tensor::matrix(seqs.len(), 1, lp)?))
        }
        None => None,
    };
    Ok(SequenceScores {
        seq_log_q,
        token_log_q: Some(token_log_q),
        log_p,
        lengths: seqs.iter().map(TokenSequence::len).collect(),
        relaxed: false,
    })
}

/// Scores relaxed rollouts with `relaxed_log_q` and, given a world,
/// `relaxed_log_p`.
pub fn score_rollouts(
    tape: &mut Tape,
    rollouts: &RelaxedRollouts,
    world: Option<&BigramWorld>,
) -> Result<SequenceScores> {
    let log_p = match world {
        Some(w) => Some(rollouts.relaxed_log_p(tape, w)?),
        None => None,
    };
    Ok(SequenceScores {
        seq_log_q: rollouts.relaxed_log_q(),
        token_log_q: None,
        log_p,
        lengths: rollouts.lengths().to_vec(),
        relaxed: true,
    })
}

/// A loss node together with the named terms it is made of. The term values
/// add up to `value`.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub loss: Var,
    pub value: f64,
    pub terms: Vec<(&'static str, f64)>,
    pub tokens: usize,
    pub estimator: Option<&'static str>,
}

impl LossValue {
    fn new(tape: &Tape, loss: Var, terms: Vec<(&'static str, f64)>, tokens: usize) -> Self {
        Self {
            loss,
            value: tape.scalar(loss),
            terms,
            tokens,
            estimator: None,
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }
}

fn gold(scores: &SequenceScores, who: &'static str) -> Result<Var> {
    scores.log_p.ok_or(ObjectiveError::MissingWorld(who))
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(ObjectiveError::Eta {
            eta,
            range: "[0, 1]",
        });
    }
    Ok(())
}

/// Token mean of `-ln q(x_t | x_{t-1})` over data sequences.
pub fn forward_ce(tape: &mut Tape, data: &SequenceScores) -> Result<LossValue> {
    let tokens = data.tokens();
    if data.count() == 0 || tokens == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    let token_log_q = data.token_log_q.ok_or(ObjectiveError::NoTokens("forward_ce"))?;
    let m = tape.mean(token_log_q)?;
    let loss = tape.neg(m)?;
    let v = tape.scalar(loss);
    Ok(LossValue::new(tape, loss, vec![("forward_ce", v)], tokens))
}

/// Forward CE plus the batch estimate of the constant `E_P[ln P]`, both per
/// token. The constant carries no gradient.
pub fn forward_kl(tape: &mut Tape, data: &SequenceScores) -> Result<LossValue> {
    let ce = forward_ce(tape, data)?;
    let log_p = gold(data, "forward_kl")?;
    let constant = tape.value(log_p).data().iter().sum::<f64>() / ce.tokens as f64;
    let loss = tape.add_scalar(ce.loss, constant)?;
    Ok(LossValue::new(
        tape,
        loss,
        vec![("forward_ce", ce.value), ("data_log_p", constant)],
        ce.tokens,
    ))
}

/// `-E_Q[ln P]` per token over samples from the model.
pub fn reverse_ce(tape: &mut Tape, samples: &SequenceScores) -> Result<LossValue> {
    let steps = samples.tokens();
    if samples.count() == 0 || steps == 0 {
        return Err(ObjectiveError::NoSamples);
    }
    let log_p = gold(samples, "reverse_ce")?;
    let s = tape.sum(log_p)?;
    let loss = tape.scale(s, -1.0 / steps as f64)?;
    let v = tape.scalar(loss);
    let mut out = LossValue::new(tape, loss, vec![("reverse_ce", v)], steps);
    out.estimator = Some(estimator(samples));
    Ok(out)
}

/// `E_Q[ln Q - ln P]` per token, split into reverse CE and negative entropy.
pub fn reverse_kl(tape: &mut Tape, samples: &SequenceScores) -> Result<LossValue> {
    let rce = reverse_ce(tape, samples)?;
    let s = tape.sum(samples.seq_log_q)?;
    let neg_entropy = tape.scale(s, 1.0 / rce.tokens as f64)?;
    let loss = tape.add(rce.loss, neg_entropy)?;
    let ne = tape.scalar(neg_entropy);
    let mut out = LossValue::new(
        tape,
        loss,
        vec![("reverse_ce", rce.value), ("neg_entropy", ne)],
        rce.tokens,
    );
    out.estimator = rce.estimator;
    Ok(out)
}

fn estimator(samples: &SequenceScores) -> &'static str {
    if samples.relaxed {
        "relaxed rollouts scored by relaxed_log_q and relaxed_log_p"
    } else {
        "hard samples scored exactly"
    }
}

/// `eta * a + (1 - eta) * b`, returning a component untouched when its
/// partner has zero weight so the endpoints are exact.
fn mix(
    tape: &mut Tape,
    eta: f64,
    a: impl FnOnce(&mut Tape) -> Result<LossValue>,
    b: impl FnOnce(&mut Tape) -> Result<LossValue>,
) -> Result<LossValue> {
    check_eta(eta)?;
    if eta == 1.0 {
        return a(tape);
    }
    if eta == 0.0 {
        return b(tape);
    }
    let a = a(tape)?;
    let b = b(tape)?;
    let sa = tape.scale(a.loss, eta)?;
    let sb = tape.scale(b.loss, 1.0 - eta)?;
    let loss = tape.add(sa, sb)?;
    let mut terms: Vec<(&'static str, f64)> = a.terms.iter().map(|&(n, v)| (n, eta * v)).collect();
    terms.extend(b.terms.iter().map(|&(n, v)| (n, (1.0 - eta) * v)));
    let mut out = LossValue::new(tape, loss, terms, a.tokens + b.tokens);
    out.estimator = b.estimator;
    Ok(out)
}

fn need<'a>(scores: Option<&'a SequenceScores>, who: &'static str, what: &'static str) -> Result<&'a SequenceScores> {
    scores.ok_or(ObjectiveError::MissingInput(who, what))
}

/// `eta * KL(P || Q) + (1 - eta) * KL(Q || P)`.
pub fn mix_kl(
    tape: &mut Tape,
    data: Option<&SequenceScores>,
    samples: Option<&SequenceScores>,
    eta: f64,
) -> Result<LossValue> {
    mix(
        tape,
        eta,
        |t| forward_kl(t, need(data, "mix_kl", "data sequences")?),
        |t| reverse_kl(t, need(samples, "mix_kl", "model samples")?),
    )
}

/// `eta * forward CE + (1 - eta) * reverse CE` with the exact reverse term.
pub fn mixce_oracle(
    tape: &mut Tape,
    data: Option<&SequenceScores>,
    samples: Option<&SequenceScores>,
    eta: f64,
) -> Result<LossValue> {
    mix(
        tape,
        eta,
        |t| forward_ce(t, need(data, "mixce_oracle", "data sequences")?),
        |t| reverse_ce(t, need(samples, "mixce_oracle", "model samples")?),
    )
}

/// `log(eta P + (1 - eta) Q)` per sequence, in log space.
fn log_mixture(tape: &mut Tape, log_p: Var, log_q: Var, eta: f64) -> Result<Var> {
    let a = tape.add_scalar(log_p, eta.ln())?;
    let b = tape.add_scalar(log_q, (1.0 - eta).ln())?;
    Ok(tape.log_add_exp(a, b)?)
}

/// `eta KL(P || M) + (1 - eta) KL(Q || M)` with `M = eta P + (1 - eta) Q`,
/// estimated per sequence: data sequences for the first term, model samples
/// for the second.
pub fn generalized_js(
    tape: &mut Tape,
    data: &SequenceScores,
    samples: &SequenceScores,
    eta: f64,
) -> Result<LossValue> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(ObjectiveError::Eta {
            eta,
            range: "(0, 1)",
        });
    }
    if data.count() == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    if samples.count() == 0 {
        return Err(ObjectiveError::NoSamples);
    }
    let dp = gold(data, "generalized_js")?;
    let dm = log_mixture(tape, dp, data.seq_log_q, eta)?;
    let d_terms = tape.sub(dp, dm)?;
    let d_mean = tape.mean(d_terms)?;

    let sp = gold(samples, "generalized_js")?;
    let sm = log_mixture(tape, sp, samples.seq_log_q, eta)?;
    let s_terms = tape.sub(samples.seq_log_q, sm)?;
    let s_mean = tape.mean(s_terms)?;

    let a = tape.scale(d_mean, eta)?;
    let b = tape.scale(s_mean, 1.0 - eta)?;
    let loss = tape.add(a, b)?;
    let terms = vec![
        ("kl_p_m", tape.scalar(a)),
        ("kl_q_m", tape.scalar(b)),
    ];
    let mut out = LossValue::new(tape, loss, terms, data.tokens() + samples.tokens());
    out.estimator = Some(estimator(samples));
    Ok(out)
}

/// Token mean of `-w_t ln q_t` with `w_t = eta + (1 - eta) sg(q_t)`.
/// Needs no gold distribution.
pub fn mixce_approx(tape: &mut Tape, data: &SequenceScores, eta: f64) -> Result<LossValue> {
    check_eta(eta)?;
    let tokens = data.tokens();
    if data.count() == 0 || tokens == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    let log_q = data.token_log_q.ok_or(ObjectiveError::NoTokens("mixce_approx"))?;
    let q = tape.exp(log_q)?;
    let q = tape.stop_gradient(q);
    let w = tape.scale(q, 1.0 - eta)?;
    let w = tape.add_scalar(w, eta)?;
    let wl = tape.mul(w, log_q)?;
    let m = tape.mean(wl)?;
    let loss = tape.neg(m)?;

    let lq = tape.value(log_q).data();
    let n = lq.len() as f64;
    let forward_part = -eta * lq.iter().sum::<f64>() / n;
    let value = tape.scalar(loss);
    let terms = vec![
        ("forward_ce", forward_part),
        ("self_weighted", value - forward_part),
    ];
    Ok(LossValue::new(tape, loss, terms, tokens))
}

/// Per-token weights `eta + (1 - eta) q_t` used by [`mixce_approx`].
pub fn mixce_weights(tape: &Tape, data: &SequenceScores, eta: f64) -> Vec<f64> {
    data.token_log_q
        .map(|v| {
            tape.value(v)
                .data()
                .iter()
                .map(|lq| eta + (1.0 - eta) * lq.exp())
                .collect()
        })
        .unwrap_or_default()
}

/// Sequence mean of `-sg(prod_t q_t) sum_t ln q_t`.
pub fn seq_weighted_rev_ce(tape: &mut Tape, data: &SequenceScores) -> Result<LossValue> {
    if data.count() == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    if let Some((index, &len)) = data
        .lengths
        .iter()
        .enumerate()
        .find(|(_, &l)| l > SEQ_WEIGHT_MAX_LEN)
    {
        return Err(ObjectiveError::SequenceTooLong {
            index,
            len,
            limit: SEQ_WEIGHT_MAX_LEN,
        });
    }
    let w = tape.exp(data.seq_log_q)?;
    let w = tape.stop_gradient(w);
    let wl = tape.mul(w, data.seq_log_q)?;
    let m = tape.mean(wl)?;
    let loss = tape.neg(m)?;
    let v = tape.scalar(loss);
    Ok(LossValue::new(tape, loss, vec![("seq_weighted_rev_ce", v)], data.tokens()))
}

/// The loss selected by `spec`. `data` must be present when
/// [`ObjectiveSpec::uses_data`], `samples` when [`ObjectiveSpec::uses_samples`].
pub fn evaluate(
    tape: &mut Tape,
    spec: &ObjectiveSpec,
    data: Option<&SequenceScores>,
    samples: Option<&SequenceScores>,
) -> Result<LossValue> {
    let name = spec.kind.name();
    let data_req = || need(data, name, "data sequences");
    let samples_req = || need(samples, name, "model samples");
    match spec.kind {
        ObjectiveKind::ForwardKl => {
            let d = data_req()?;
            if d.log_p.is_some() {
                forward_kl(tape, d)
            } else {
                // Without a world the constant is unknown; the gradient is
                // the same either way.
                forward_ce(tape, d)
            }
        }
        ObjectiveKind::ReverseKl => reverse_kl(tape, samples_req()?),
        ObjectiveKind::MixKl => mix_kl(tape, data, samples, spec.eta),
        ObjectiveKind::GeneralizedJs => generalized_js(tape, data_req()?, samples_req()?, spec.eta),
        ObjectiveKind::MixCeOracle => mixce_oracle(tape, data, samples, spec.eta),
        ObjectiveKind::MixCeApprox => mixce_approx(tape, data_req()?, spec.eta),
        ObjectiveKind::SeqWeightedRevCe => seq_weighted_rev_ce(tape, data_req()?),
    }
}
