//! Hard top-1 routing for both stages: straight-through Gumbel-Softmax
//! selection in training, argmax at inference, deterministic round-robin
//! assignment during the balanced warmup, plus the load-balancing and
//! entropy regularizers applied to the routing probabilities.

pub mod log;
pub mod proxy;

pub use log::RoutingLogRecord;
pub use proxy::{AudioRoutingProxy, LanguageRoutingInput, RouterHead};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum RoutingError {
    #[error("route: non-finite logit at index {0}")]
    NonFiniteLogit(usize),
    #[error("route: temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("route: need at least 2 experts, got {0}")]
    TooFewExperts(usize),
    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),
    #[error("noise length {got} does not match {want} experts")]
    NoiseLength { got: usize, want: usize },
}

/// Which signal feeds a router: an audio summary, a question summary, or a
/// fused cross-attention of both. Configured independently per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterPolicy {
    Audio,
    Question,
    Fused,
}

impl RouterPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            RouterPolicy::Audio => "audio",
            RouterPolicy::Question => "question",
            RouterPolicy::Fused => "fused",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    Train,
    Eval,
}

/// Router hyperparameters, fixed across an experiment unless ablated.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    pub policy_audio: RouterPolicy,
    pub policy_lang: RouterPolicy,
    /// Gumbel-Softmax temperature, constant across training.
    pub temperature: f64,
    pub lambda_audio: f64,
    pub lambda_lang: f64,
    pub beta_audio: f64,
    pub beta_lang: f64,
    /// Balanced-warmup length in routing steps.
    pub warmup_steps: u64,
    pub mode: RoutingMode,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            policy_audio: RouterPolicy::Fused,
            policy_lang: RouterPolicy::Fused,
            temperature: 1.0,
            lambda_audio: 0.01,
            lambda_lang: 0.01,
            beta_audio: 0.001,
            beta_lang: 0.001,
            warmup_steps: 200,
            mode: RoutingMode::Train,
        }
    }
}

impl RoutingConfig {
    pub fn with_mode(mut self, mode: RoutingMode) -> Self {
        self.mode = mode;
        self
    }
}

/// Per-example routing outcome for one stage.
#[derive(Debug, Clone)]
pub struct RoutingDecision {
    /// Soft probabilities (Gumbel-Softmax in train mode, softmax in eval).
    pub probs: Vec<f64>,
    /// Hard one-hot assignment.
    pub one_hot: Vec<f64>,
    /// Selected expert index.
    pub expert: usize,
    /// Shannon entropy of `probs`, in nats.
    pub entropy: f64,
    /// Pre-softmax logits.
    pub logits: Vec<f64>,
    /// Gumbel sample used (train mode), kept for replay.
    pub noise: Option<Vec<f64>>,
    /// True when the hard assignment came from the balanced warmup cycle.
    pub warmup: bool,
}

/// Lowest-index argmax.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

/// Shannon entropy in nats with the 0·log 0 := 0 convention.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>()
}

/// Draw an n-dimensional standard Gumbel sample: g = -ln(-ln u).
pub fn gumbel_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Select one expert.
///
/// Train mode: the hard assignment is the argmax of the Gumbel-perturbed
/// logits and the soft probabilities come from the tempered softmax of the
/// same perturbation; during warmup (`step < warmup_steps`) the hard
/// assignment instead cycles round-robin while the soft path is unchanged.
/// Eval mode: argmax of the raw logits, plain softmax, no noise.
pub fn route(
    logits: &[f64],
    cfg: &RoutingConfig,
    step: u64,
    noise: Option<&[f64]>,
) -> Result<RoutingDecision, RoutingError> {
    let n = logits.len();
    if n < 2 {
        return Err(RoutingError::TooFewExperts(n));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(RoutingError::NonFiniteLogit(i));
    }
    if cfg.temperature <= 0.0 {
        return Err(RoutingError::BadTemperature(cfg.temperature));
    }
    let (probs, expert, used_noise, warmup) = match cfg.mode {
        RoutingMode::Eval => (softmax(logits), argmax(logits), None, false),
        RoutingMode::Train => {
            let g = match noise {
                Some(g) => {
                    if g.len() != n {
                        return Err(RoutingError::NoiseLength { got: g.len(), want: n });
                    }
                    g.to_vec()
                }
                None => vec![0.0; n],
            };
            let perturbed: Vec<f64> = logits.iter().zip(&g).map(|(l, gi)| l + gi).collect();
            let tempered: Vec<f64> = perturbed.iter().map(|v| v / cfg.temperature).collect();
            let probs = softmax(&tempered);
            let warmup = step < cfg.warmup_steps;
            let expert = if warmup {
                (step % n as u64) as usize
            } else {
                argmax(&perturbed)
            };
            (probs, expert, Some(g), warmup)
        }
    };
    let mut one_hot = vec![0.0; n];
    one_hot[expert] = 1.0;
    let entropy = shannon_entropy(&probs);
    Ok(RoutingDecision {
        probs,
        one_hot,
        expert,
        entropy,
        logits: logits.to_vec(),
        noise: used_noise,
        warmup,
    })
}

/// Differentiable mirror of the soft path in [`route`], plus the
/// straight-through gate: a `[1]` tensor whose forward value is exactly 1
/// for the selected expert while its gradient flows through the soft
/// Gumbel-Softmax probability of that expert.
///
/// `detach_reference` overrides the stop-gradient constant. Training always
/// passes None (the live probability, so the gate is exactly 1). Finite
/// difference verification of the straight-through estimator must hold the
/// constant at the unperturbed base value, otherwise the re-snapshotted
/// detach cancels the very sensitivity the estimator reports.
pub fn straight_through_gate(
    tape: &Tape,
    logits_t: &Tensor,
    decision: &RoutingDecision,
    cfg: &RoutingConfig,
    detach_reference: Option<f64>,
) -> crate::tensor::Result<(Tensor, Tensor)> {
    let probs_t = match (cfg.mode, &decision.noise) {
        (RoutingMode::Train, Some(g)) => {
            let noise_t = Tensor::from_vec(vec![g.len()], g.clone(), false);
            let perturbed = tape.add(logits_t, &noise_t)?;
            tape.softmax_rows(&tape.scale(&perturbed, 1.0 / cfg.temperature))?
        }
        _ => tape.softmax_rows(logits_t)?,
    };
    let p_e = tape.pick(&probs_t, decision.expert)?;
    let reference = match detach_reference {
        Some(v) => Tensor::scalar(v),
        None => p_e.detached(),
    };
    let gate = tape.add_const(&tape.sub(&p_e, &reference)?, 1.0);
    Ok((probs_t, gate))
}

/// Switch-style load balance: N * sum_i f_i * P_i, where f_i is the fraction
/// of hard assignments to expert i and P_i the mean routing probability of
/// expert i. Minimum 1 exactly at perfect balance.
pub fn load_balance_loss(
    probs_batch: &[Vec<f64>],
    hard_batch: &[usize],
) -> Result<f64, RoutingError> {
    if probs_batch.is_empty() || probs_batch.len() != hard_batch.len() {
        return Err(RoutingError::EmptyBatch("load_balance_loss"));
    }
    let n = probs_batch[0].len();
    let b = probs_batch.len() as f64;
    let mut f = vec![0.0; n];
    let mut p = vec![0.0; n];
    for (probs, &hard) in probs_batch.iter().zip(hard_batch) {
        f[hard] += 1.0 / b;
        for (pi, v) in p.iter_mut().zip(probs) {
            *pi += v / b;
        }
    }
    Ok(n as f64 * f.iter().zip(&p).map(|(fi, pi)| fi * pi).sum::<f64>())
}

/// Mean Shannon entropy over the batch, in nats.
pub fn entropy_term(probs_batch: &[Vec<f64>]) -> Result<f64, RoutingError> {
    if probs_batch.is_empty() {
        return Err(RoutingError::EmptyBatch("entropy_term"));
    }
    let b = probs_batch.len() as f64;
    Ok(probs_batch.iter().map(|p| shannon_entropy(p)).sum::<f64>() / b)
}
