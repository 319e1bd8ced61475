//! The learned neural bigram language model `Q`.
//!
//! For a previous token (or a relaxed distribution over tokens) `y`:
//!
//! ```text
//! e = y E
//! h = Dropout(ReLU(e W1 + b1))
//! q = Softmax(h W2 + b2)
//! ```
//!
//! Vectors are rows, so `W1` is `d x d` and `W2` is `d x V`. The first token
//! of a sequence is conditioned on the EOS embedding: EOS never precedes a
//! token inside a sequence, so its row of `E` is free to act as the start
//! context, and row EOS of the extracted transition matrix is the model's
//! start distribution.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{self, GradError, Tape, Tensor, Var};
use crate::rng;
use crate::sampling::BigramTable;
use crate::world::{BigramWorld, EPSILON};

pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parameter {name} has shape {actual:?}, expected {expected:?}")]
    Shape {
        name: &'static str,
        actual: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("parameter {0} contains a non-finite value")]
    NonFinite(&'static str),
    #[error("input distribution has length {actual}, expected {expected}")]
    InputLength { actual: usize, expected: usize },
    #[error("input distribution sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenRange { token: usize, vocab: usize },
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Whether dropout is active. Training mode draws masks from the given stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralBigramLM {
    vocab_size: usize,
    hidden: usize,
    dropout_rate: f64,
    e: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Serialized parameter block, matrices as lists of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    #[serde(rename = "E")]
    pub e: Vec<Vec<f64>>,
    #[serde(rename = "W1")]
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    #[serde(rename = "W2")]
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

fn uniform_tensor(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sizes agree")
}

fn check_shape(name: &'static str, t: &Tensor, expected: &[usize]) -> Result<(), ModelError> {
    if t.shape() != expected {
        return Err(ModelError::Shape {
            name,
            actual: t.shape().to_vec(),
            expected: expected.to_vec(),
        });
    }
    if !t.is_finite() {
        return Err(ModelError::NonFinite(name));
    }
    Ok(())
}

impl NeuralBigramLM {
    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero
    /// biases. The fan-in of the embedding is the vocabulary size.
    pub fn new(vocab_size: usize, hidden: usize, dropout_rate: f64, seed: u64) -> Result<Self, ModelError> {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(ModelError::DropoutRate(dropout_rate));
        }
        let mut rng = rng::stream(seed, "init", 0);
        let (v, d) = (vocab_size, hidden);
        let e = uniform_tensor(v, d, 1.0 / (v as f64).sqrt(), &mut rng);
        let w1 = uniform_tensor(d, d, 1.0 / (d as f64).sqrt(), &mut rng);
        let w2 = uniform_tensor(d, v, 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self {
            vocab_size: v,
            hidden: d,
            dropout_rate,
            e,
            w1,
            b1: Tensor::vector(vec![0.0; d]),
            w2,
            b2: Tensor::vector(vec![0.0; v]),
        })
    }

    pub fn from_tensors(
        dropout_rate: f64,
        e: Tensor,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    ) -> Result<Self, ModelError> {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(ModelError::DropoutRate(dropout_rate));
        }
        let (v, d) = (e.rows(), e.cols());
        check_shape("E", &e, &[v, d])?;
        check_shape("W1", &w1, &[d, d])?;
        check_shape("b1", &b1, &[d])?;
        check_shape("W2", &w2, &[d, v])?;
        check_shape("b2", &b2, &[v])?;
        Ok(Self {
            vocab_size: v,
            hidden: d,
            dropout_rate,
            e,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn from_params(params: &ModelParams, dropout_rate: f64) -> Result<Self, ModelError> {
        let m = |name: &'static str, rows: &[Vec<f64>]| {
            Tensor::from_rows(rows).map_err(|_| ModelError::Shape {
                name,
                actual: vec![rows.len()],
                expected: vec![],
            })
        };
        Self::from_tensors(
            dropout_rate,
            m("E", &params.e)?,
            m("W1", &params.w1)?,
            Tensor::vector(params.b1.clone()),
            m("W2", &params.w2)?,
            Tensor::vector(params.b2.clone()),
        )
    }

    pub fn params(&self) -> ModelParams {
        ModelParams {
            e: self.e.to_rows(),
            w1: self.w1.to_rows(),
            b1: self.b1.data().to_vec(),
            w2: self.w2.to_rows(),
            b2: self.b2.data().to_vec(),
        }
    }

    /// A model that reproduces `world` up to the log floor: identity
    /// embeddings and hidden layer, and output weights equal to the log
    /// transition probabilities. Useful as a "perfect model" reference.
    pub fn from_world(world: &BigramWorld) -> Self {
        let v = world.vocab_size();
        let eos = world.eos_id();
        let mut identity = vec![0.0; v * v];
        for i in 0..v {
            identity[i * v + i] = 1.0;
        }
        let mut w2 = vec![0.0; v * v];
        for i in 0..v {
            let row = if i == eos { world.pi() } else { world.row(i) };
            for j in 0..v {
                w2[i * v + j] = (row[j] + EPSILON).ln();
            }
        }
        let eye = Tensor::matrix(v, v, identity).expect("square");
        Self {
            vocab_size: v,
            hidden: v,
            dropout_rate: 0.0,
            e: eye.clone(),
            w1: eye,
            b1: Tensor::vector(vec![0.0; v]),
            w2: Tensor::matrix(v, v, w2).expect("square"),
            b2: Tensor::vector(vec![0.0; v]),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn eos_id(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<(), ModelError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(ModelError::DropoutRate(rate));
        }
        self.dropout_rate = rate;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Parameters in the order E, W1, b1, W2, b2.
    pub fn tensors(&self) -> [&Tensor; 5] {
        [&self.e, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.e,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    /// Records the parameters as tape leaves and precomputes `E W1`.
    pub fn attach(&self, tape: &mut Tape) -> Result<Forward, ModelError> {
        let vars = ModelVars {
            e: tape.leaf(self.e.clone()),
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        };
        Forward::new(tape, vars, self.dropout_rate, self.vocab_size)
    }

    /// Next-token distribution for a one-hot or relaxed previous token.
    pub fn next_token_dist(&self, prev: &[f64], mode: &mut Mode) -> Result<Vec<f64>, ModelError> {
        let (v, d) = (self.vocab_size, self.hidden);
        if prev.len() != v {
            return Err(ModelError::InputLength {
                actual: prev.len(),
                expected: v,
            });
        }
        let total: f64 = prev.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ModelError::NotNormalized(total));
        }
        let mut e = vec![0.0; d];
        for (i, &y) in prev.iter().enumerate() {
            if y != 0.0 {
                for (acc, w) in e.iter_mut().zip(self.e.row(i)) {
                    *acc += y * w;
                }
            }
        }
        let mut h = self.b1.data().to_vec();
        for (k, &ek) in e.iter().enumerate() {
            for (acc, w) in h.iter_mut().zip(self.w1.row(k)) {
                *acc += ek * w;
            }
        }
        let rate = self.dropout_rate;
        for x in h.iter_mut() {
            *x = x.max(0.0);
        }
        if let Mode::Train(rng) = mode {
            if rate > 0.0 {
                let scale = 1.0 / (1.0 - rate);
                for x in h.iter_mut() {
                    *x = if rng.random::<f64>() < rate { 0.0 } else { *x * scale };
                }
            }
        }
        let mut logits = self.b2.data().to_vec();
        for (k, &hk) in h.iter().enumerate() {
            for (acc, w) in logits.iter_mut().zip(self.w2.row(k)) {
                *acc += hk * w;
            }
        }
        let lse = grad::log_sum_exp(&logits);
        Ok(logits.iter().map(|l| (l - lse).exp()).collect())
    }

    fn one_hot(&self, token: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.vocab_size];
        y[token] = 1.0;
        y
    }

    /// Row `i` is the eval-mode distribution after token `i`; the EOS row is
    /// the start distribution.
    pub fn extract_transition_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.vocab_size)
            .map(|i| {
                self.next_token_dist(&self.one_hot(i), &mut Mode::Eval)
                    .expect("one-hot input is valid")
            })
            .collect()
    }

    /// The model as a plain lookup table, for sampling and scoring.
    pub fn as_table(&self) -> BigramTable {
        let rows = self.extract_transition_matrix();
        BigramTable::new(rows[self.eos_id()].clone(), rows)
    }

    /// Log probability of a whole sequence and the per-step probabilities.
    pub fn seq_log_prob(&self, seq: &[usize]) -> Result<(f64, Vec<f64>), ModelError> {
        self.as_table().seq_log_prob(seq).map_err(|token| ModelError::TokenRange {
            token,
            vocab: self.vocab_size,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub e: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ModelVars {
    pub fn as_array(&self) -> [Var; 5] {
        [self.e, self.w1, self.b1, self.w2, self.b2]
    }
}

/// Tape handles for one forward pass. `ew1 = E W1` is shared by every
/// lookup, since `onehot(i) E W1` is row `i` of it.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub vars: ModelVars,
    ew1: Var,
    rate: f64,
    vocab_size: usize,
}

impl Forward {
    pub fn new(tape: &mut Tape, vars: ModelVars, rate: f64, vocab_size: usize) -> Result<Self, ModelError> {
        let ew1 = tape.matmul(vars.e, vars.w1)?;
        Ok(Self {
            vars,
            ew1,
            rate,
            vocab_size,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn eos_id(&self) -> usize {
        self.vocab_size - 1
    }

    /// Log next-token distributions (`n x V`) after hard previous tokens.
    pub fn log_probs_hard(&self, tape: &mut Tape, prev: &[usize], mode: &mut Mode) -> Result<Var, ModelError> {
        let pre = tape.index_rows(self.ew1, prev)?;
        self.head(tape, pre, mode)
    }

    /// Log next-token distributions after relaxed previous tokens `y` (`n x V`).
    pub fn log_probs_soft(&self, tape: &mut Tape, y: Var, mode: &mut Mode) -> Result<Var, ModelError> {
        let pre = tape.matmul(y, self.ew1)?;
        self.head(tape, pre, mode)
    }

    fn head(&self, tape: &mut Tape, pre: Var, mode: &mut Mode) -> Result<Var, ModelError> {
        let pre = tape.add(pre, self.vars.b1)?;
        let mut h = tape.relu(pre)?;
        if let Mode::Train(rng) = mode {
            if self.rate > 0.0 {
                let n = tape.value(h).numel();
                let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= self.rate).collect();
                h = tape.dropout_mask_apply(h, &keep, self.rate)?;
            }
        }
        let logits = tape.matmul(h, self.vars.w2)?;
        let logits = tape.add(logits, self.vars.b2)?;
        Ok(tape.row_log_softmax(logits)?)
    }
}
