//! Tokenized conditional policy over quantized coefficients.
//!
//! Every action has an independent linear softmax head over `B` bins,
//! conditioned on the observation plus a constant bias feature. The
//! sequence log-probability is the sum of the per-head token log-probs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, Header};
use crate::coeffs::{dequantize, quantize, ActionVocabulary, CoefficientSet};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, StreamRng};

/// Temperatures at or below this decode greedily.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

/// Trainable parameters: per head, a `bins x (feature_dim + 1)` matrix whose
/// last column multiplies the constant bias feature.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    actions: usize,
    bins: usize,
    feature_dim: usize,
    theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(actions: usize, bins: usize, feature_dim: usize) -> Self {
        Self {
            actions,
            bins,
            feature_dim,
            theta: vec![0.0; actions * bins * (feature_dim + 1)],
        }
    }

    /// Zero parameters shaped for a vocabulary, conditioning on a length-K observation.
    pub fn for_vocab(vocab: &ActionVocabulary) -> Self {
        Self::zeros(vocab.len(), vocab.bins(), vocab.len())
    }

    pub fn from_theta(actions: usize, bins: usize, feature_dim: usize, theta: Vec<f64>) -> Result<Self> {
        let expected = actions * bins * (feature_dim + 1);
        if theta.len() != expected {
            return Err(Error::Dimension {
                expected,
                got: theta.len(),
            });
        }
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("policy parameter {i}")));
        }
        Ok(Self {
            actions,
            bins,
            feature_dim,
            theta,
        })
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub(crate) fn row_len(&self) -> usize {
        self.feature_dim + 1
    }

    pub(crate) fn head_len(&self) -> usize {
        self.bins * self.row_len()
    }

    /// Offset of `(head, bin)`'s weight row in `theta`.
    pub(crate) fn row_offset(&self, head: usize, bin: usize) -> usize {
        head * self.head_len() + bin * self.row_len()
    }

    /// Adds the gradient of `lambda/2 * |w|^2` over each head's weights on
    /// the other actions' observations. A head's own observation weight and
    /// its bias column are not penalized.
    pub fn add_weight_decay(&self, grad: &mut [f64], lambda: f64) {
        if lambda == 0.0 {
            return;
        }
        let own = self.feature_dim == self.actions;
        for head in 0..self.actions {
            for bin in 0..self.bins {
                let off = self.row_offset(head, bin);
                for f in 0..self.feature_dim {
                    if !(own && f == head) {
                        grad[off + f] += lambda * self.theta[off + f];
                    }
                }
            }
        }
    }

    pub(crate) fn check_observation(&self, observation: &[f64]) -> Result<()> {
        if observation.len() != self.feature_dim {
            return Err(Error::Dimension {
                expected: self.feature_dim,
                got: observation.len(),
            });
        }
        Ok(())
    }

    /// Logit of one bin of one head.
    pub(crate) fn logit(&self, head: usize, bin: usize, observation: &[f64]) -> f64 {
        let off = self.row_offset(head, bin);
        let row = &self.theta[off..off + self.row_len()];
        row[..self.feature_dim]
            .iter()
            .zip(observation)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + row[self.feature_dim]
    }

    pub fn logits(&self, head: usize, observation: &[f64]) -> Vec<f64> {
        (0..self.bins)
            .map(|b| self.logit(head, b, observation))
            .collect()
    }

    /// Token indices of a coefficient set under this policy's bin count.
    pub fn tokens(&self, s: &CoefficientSet) -> Result<Vec<usize>> {
        if s.len() != self.actions {
            return Err(Error::Dimension {
                expected: self.actions,
                got: s.len(),
            });
        }
        s.values().iter().map(|&v| quantize(v, self.bins)).collect()
    }

    fn detokenize(&self, tokens: &[usize]) -> Result<CoefficientSet> {
        let values = tokens
            .iter()
            .map(|&t| dequantize(t, self.bins))
            .collect::<Result<Vec<_>>>()?;
        CoefficientSet::new(values)
    }
}

/// Frozen snapshot of the policy taken at the end of supervised training.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceParams(PolicyParams);

impl ReferenceParams {
    pub fn snapshot(params: &PolicyParams) -> Self {
        Self(params.clone())
    }

    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Log-probability of one token under one head.
pub fn token_log_prob(params: &PolicyParams, head: usize, observation: &[f64], token: usize) -> f64 {
    log_softmax(&params.logits(head, observation))[token]
}

pub fn log_prob_tokens(params: &PolicyParams, observation: &[f64], tokens: &[usize]) -> Result<f64> {
    params.check_observation(observation)?;
    if tokens.len() != params.actions {
        return Err(Error::Dimension {
            expected: params.actions,
            got: tokens.len(),
        });
    }
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(k, &t)| token_log_prob(params, k, observation, t))
        .sum())
}

/// `sum_k log softmax(logits_k(observation))[quantize(v_k)]`.
pub fn log_prob(params: &PolicyParams, observation: &[f64], s: &CoefficientSet) -> Result<f64> {
    let tokens = params.tokens(s)?;
    log_prob_tokens(params, observation, &tokens)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-head argmax, ties to the lowest bin.
pub fn greedy_decode(params: &PolicyParams, observation: &[f64]) -> Result<CoefficientSet> {
    params.check_observation(observation)?;
    let tokens: Vec<usize> = (0..params.actions)
        .map(|k| argmax(&params.logits(k, observation)))
        .collect();
    params.detokenize(&tokens)
}

pub fn sample(
    params: &PolicyParams,
    observation: &[f64],
    temperature: f64,
    rng: &mut StreamRng,
) -> Result<CoefficientSet> {
    if !(temperature > 0.0) {
        return Err(Error::OutOfRange(format!("temperature {temperature} must be > 0")));
    }
    if temperature <= GREEDY_TEMPERATURE {
        return greedy_decode(params, observation);
    }
    params.check_observation(observation)?;
    let tokens: Vec<usize> = (0..params.actions)
        .map(|k| {
            let scaled: Vec<f64> = params
                .logits(k, observation)
                .into_iter()
                .map(|l| l / temperature)
                .collect();
            let probs = softmax(&scaled);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (b, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return b;
                }
            }
            probs.len() - 1
        })
        .collect();
    params.detokenize(&tokens)
}

/// One supervised example: an observation and its target tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenExample {
    pub observation: Vec<f64>,
    pub tokens: Vec<usize>,
}

/// Mean per-token NLL over `batch` and its gradient with respect to `theta`.
pub fn nll_loss_and_grad(params: &PolicyParams, batch: &[&TokenExample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyData("empty batch".into()));
    }
    let mut grad = vec![0.0; params.theta.len()];
    let scale = 1.0 / (batch.len() * params.actions) as f64;
    let f = params.feature_dim;
    let mut loss = 0.0;
    for ex in batch {
        params.check_observation(&ex.observation)?;
        for (k, &t) in ex.tokens.iter().enumerate() {
            let logits = params.logits(k, &ex.observation);
            let probs = softmax(&logits);
            loss -= log_softmax(&logits)[t];
            for (b, p) in probs.iter().enumerate() {
                let coef = (p - if b == t { 1.0 } else { 0.0 }) * scale;
                if coef == 0.0 {
                    continue;
                }
                let off = params.row_offset(k, b);
                for (g, x) in grad[off..off + f].iter_mut().zip(&ex.observation) {
                    *g += coef * x;
                }
                grad[off + f] += coef;
            }
        }
    }
    Ok((loss * scale, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// L2 penalty on observation weights, added to the gradient.
    pub weight_decay: f64,
    /// Derived from the run seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SftHyper {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 100,
            batch: 32,
            weight_decay: 1e-2,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub params: PolicyParams,
    pub reference: ReferenceParams,
    /// Mini-batch loss after every optimizer step.
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Mean per-token NLL of a whole dataset.
pub fn dataset_nll(params: &PolicyParams, data: &[TokenExample]) -> Result<f64> {
    let refs: Vec<&TokenExample> = data.iter().collect();
    let mut total = 0.0;
    for ex in &refs {
        total -= log_prob_tokens(params, &ex.observation, &ex.tokens)?;
    }
    Ok(total / (data.len() * params.actions) as f64)
}

/// Mini-batch Adam on the mean token NLL of the targets.
pub fn sft_train(params: PolicyParams, data: &[TokenExample], hyper: &SftHyper) -> Result<SftOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyData("supervised split has no samples".into()));
    }
    if hyper.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut params = params;
    let initial_loss = dataset_nll(&params, data)?;
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr), params.theta.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_curve = Vec::new();
    for epoch in 0..hyper.epochs {
        let mut shuffle = rng::stream(hyper.seed, "sft-shuffle", &[epoch as u64]);
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(hyper.batch) {
            let batch: Vec<&TokenExample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, mut grad) = nll_loss_and_grad(&params, &batch)?;
            params.add_weight_decay(&mut grad, hyper.weight_decay);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "SFT loss diverged at epoch {epoch}, step {}",
                    loss_curve.len()
                )));
            }
            loss_curve.push(loss);
            adam.step(&mut params.theta, &grad);
        }
    }
    let final_loss = dataset_nll(&params, data)?;
    Ok(SftOutcome {
        reference: ReferenceParams::snapshot(&params),
        params,
        loss_curve,
        initial_loss,
        final_loss,
    })
}

pub fn examples_from(pairs: impl IntoIterator<Item = (Vec<f64>, CoefficientSet)>, bins: usize) -> Result<Vec<TokenExample>> {
    pairs
        .into_iter()
        .map(|(observation, target)| {
            let tokens = target
                .values()
                .iter()
                .map(|&v| quantize(v, bins))
                .collect::<Result<Vec<_>>>()?;
            Ok(TokenExample {
                observation,
                tokens,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyFile {
    pub header: Header,
    pub vocab_hash: String,
    pub actions: usize,
    pub bins: usize,
    pub feature_dim: usize,
    pub theta: Vec<f64>,
}

pub const POLICY_SCHEMA: &str = "facepref.policy";

pub fn save_policy(path: &Path, params: &PolicyParams, vocab: &ActionVocabulary, header: Header) -> Result<()> {
    artifact::write_json(
        path,
        &PolicyFile {
            header,
            vocab_hash: vocab.hash(),
            actions: params.actions,
            bins: params.bins,
            feature_dim: params.feature_dim,
            theta: params.theta.clone(),
        },
    )
}

/// Loads a policy, rejecting files written for a different vocabulary.
pub fn load_policy(path: &Path, vocab: &ActionVocabulary) -> Result<(Header, PolicyParams)> {
    let file: PolicyFile = artifact::read_json(path)?;
    file.header.expect_schema(POLICY_SCHEMA, path)?;
    if file.vocab_hash != vocab.hash() {
        return Err(Error::VocabMismatch {
            expected: vocab.hash(),
            found: file.vocab_hash,
        });
    }
    let params = PolicyParams::from_theta(file.actions, file.bins, file.feature_dim, file.theta)?;
    Ok((file.header, params))
}
