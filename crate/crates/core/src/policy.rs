//! Linear-softmax autoregressive toy policy with analytic gradients.
//!
//! The policy scores every candidate token `a` at each output step with
//! `logit(a) = w · phi(a, state)` where `phi` is a fixed five-dimensional
//! feature map:
//!
//! 0. bias (constant 1);
//! 1. indicator: `a` immediately follows an occurrence of the question
//!    token sequence in the context;
//! 2. count of `a` in the context, normalized by context length;
//! 3. indicator: `a` equals the previous output token;
//! 4. indicator: `a` is end-of-sequence AND a content word has already
//!    been emitted.
//!
//! The correct answer is the unique token with feature 1 set, so the task
//! is linearly separable and reward can climb under policy-gradient
//! updates. All log-probabilities are exact and the score-function
//! gradient has the closed form
//! `d/dw sum_t u_t log pi(y_t) = sum_t u_t (phi(y_t) - E_pi[phi])`.
//!
//! Sampling applies temperature scaling followed by nucleus truncation
//! (the smallest probability-sorted prefix reaching `top_p`, ties broken
//! by ascending token id). Recorded log-probabilities are always the
//! untempered true model values, so downstream importance ratios are
//! exact policy ratios; the sampling distortion is a documented bias
//! mirroring high-temperature rollout collection against true-likelihood
//! training in full-scale systems.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, ToyCodec, TokenId, EOS_ID, RESERVED_TOKENS};
use crate::error::{Error, Result};
use crate::rng;

/// Dimension of the fixed feature map.
pub const FEATURE_DIM: usize = 5;

/// Policy parameters: one shared weight per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: Vec<f64>,
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Hash of the codec the policy was built against.
    pub codec_hash: String,
}

impl PolicyParams {
    /// Uniform policy: all weights zero.
    pub fn uniform(codec: &ToyCodec) -> Self {
        Self {
            weights: vec![0.0; FEATURE_DIM],
            vocab_size: codec.vocab_size(),
            feature_dim: FEATURE_DIM,
            codec_hash: codec.hash(),
        }
    }

    /// Grounded starting point: weight `strength` on the context-count
    /// feature, so exploration concentrates on tokens that appear in the
    /// context (the stand-in for a pretrained model's copying bias). Under
    /// this prior short contexts expose few distinct candidates and long
    /// contexts expose many, which is what makes long inputs harder.
    pub fn context_prior(codec: &ToyCodec, strength: f64) -> Self {
        let mut params = Self::uniform(codec);
        params.weights[2] = strength;
        params
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim != FEATURE_DIM || self.weights.len() != FEATURE_DIM {
            return Err(Error::Dimension(format!(
                "policy weights have dimension {}, expected {FEATURE_DIM}",
                self.weights.len()
            )));
        }
        if self.vocab_size <= RESERVED_TOKENS as usize {
            return Err(Error::Dimension(format!(
                "vocab size {} leaves no content tokens",
                self.vocab_size
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("policy weights must be finite".into()));
        }
        Ok(())
    }
}

/// Per-instance quantities the feature map needs, precomputed once.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceView {
    pub vocab_size: usize,
    /// Tokens that immediately follow an occurrence of the question token
    /// sequence in the context.
    followers: HashSet<TokenId>,
    /// Context count of each token divided by context length.
    counts: Vec<f64>,
}

impl InstanceView {
    pub fn build(codec: &ToyCodec, instance: &Instance) -> Result<Self> {
        let context = codec.encode(&instance.context)?;
        let question = codec.encode(&instance.question)?;
        if context.is_empty() || question.is_empty() {
            return Err(Error::Config(format!(
                "instance {} has an empty context or question",
                instance.id
            )));
        }
        let vocab_size = codec.vocab_size();
        let mut counts = vec![0.0; vocab_size];
        for &t in &context {
            counts[t as usize] += 1.0;
        }
        for c in &mut counts {
            *c /= context.len() as f64;
        }
        let mut followers = HashSet::new();
        for (i, window) in context.windows(question.len()).enumerate() {
            if window == question.as_slice() {
                if let Some(&next) = context.get(i + question.len()) {
                    followers.insert(next);
                }
            }
        }
        Ok(Self { vocab_size, followers, counts })
    }
}

/// Autoregressive state: the previous output token and whether a content
/// word (any non-reserved token) has been emitted yet.
#[derive(Debug, Clone, Copy, Default)]
struct StepState {
    prev: Option<TokenId>,
    answer_emitted: bool,
}

impl StepState {
    fn advance(&mut self, token: TokenId) {
        self.answer_emitted |= token >= RESERVED_TOKENS;
        self.prev = Some(token);
    }
}

fn feature(view: &InstanceView, candidate: TokenId, state: StepState) -> [f64; FEATURE_DIM] {
    [
        1.0,
        f64::from(view.followers.contains(&candidate)),
        view.counts[candidate as usize],
        f64::from(state.prev == Some(candidate)),
        f64::from(candidate == EOS_ID && state.answer_emitted),
    ]
}

fn check_compatible(params: &PolicyParams, view: &InstanceView) -> Result<()> {
    params.validate()?;
    if params.vocab_size != view.vocab_size {
        return Err(Error::Dimension(format!(
            "policy vocab {} vs instance vocab {}",
            params.vocab_size, view.vocab_size
        )));
    }
    Ok(())
}

fn check_tokens(view: &InstanceView, output: &[TokenId]) -> Result<()> {
    for &t in output {
        if (t as usize) >= view.vocab_size {
            return Err(Error::UnknownToken(t));
        }
    }
    Ok(())
}

/// Log-softmax over the logits of every candidate token in one step.
fn step_logprobs(params: &PolicyParams, view: &InstanceView, state: StepState) -> Vec<f64> {
    let w = &params.weights;
    let mut logits = Vec::with_capacity(view.vocab_size);
    for a in 0..view.vocab_size as TokenId {
        let phi = feature(view, a, state);
        let mut z = 0.0;
        for d in 0..FEATURE_DIM {
            z += w[d] * phi[d];
        }
        logits.push(z);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    for z in &mut logits {
        *z -= lse;
    }
    logits
}

/// Exact per-token log-probabilities of a realized output sequence.
pub fn token_logprobs(
    params: &PolicyParams,
    view: &InstanceView,
    output: &[TokenId],
) -> Result<Vec<f64>> {
    check_compatible(params, view)?;
    check_tokens(view, output)?;
    let mut state = StepState::default();
    let mut out = Vec::with_capacity(output.len());
    for &tok in output {
        let lp = step_logprobs(params, view, state);
        out.push(lp[tok as usize]);
        state.advance(tok);
    }
    Ok(out)
}

/// Gradient of `sum_t weights[t] * log pi(output[t])` with respect to the
/// policy weights: `sum_t u_t (phi(y_t) - E[phi])`, exact.
pub fn grad_weighted_logprob(
    params: &PolicyParams,
    view: &InstanceView,
    output: &[TokenId],
    token_weights: &[f64],
) -> Result<Vec<f64>> {
    check_compatible(params, view)?;
    check_tokens(view, output)?;
    if output.len() != token_weights.len() {
        return Err(Error::Dimension(format!(
            "{} output tokens but {} token weights",
            output.len(),
            token_weights.len()
        )));
    }
    let mut grad = vec![0.0; FEATURE_DIM];
    let mut state = StepState::default();
    for (&tok, &u) in output.iter().zip(token_weights) {
        let lp = step_logprobs(params, view, state);
        let mut expected = [0.0; FEATURE_DIM];
        for a in 0..view.vocab_size as TokenId {
            let p = lp[a as usize].exp();
            let phi = feature(view, a, state);
            for d in 0..FEATURE_DIM {
                expected[d] += p * phi[d];
            }
        }
        let phi_tok = feature(view, tok, state);
        for d in 0..FEATURE_DIM {
            grad[d] += u * (phi_tok[d] - expected[d]);
        }
        state.advance(tok);
    }
    Ok(grad)
}

/// Mean per-step entropy (nats) of the policy along a realized output.
pub fn trajectory_entropy(
    params: &PolicyParams,
    view: &InstanceView,
    output: &[TokenId],
) -> Result<f64> {
    check_compatible(params, view)?;
    check_tokens(view, output)?;
    if output.is_empty() {
        return Err(Error::Config("trajectory_entropy: empty output".into()));
    }
    let mut state = StepState::default();
    let mut total = 0.0;
    for &tok in output {
        let lp = step_logprobs(params, view, state);
        total -= lp.iter().map(|&l| l.exp() * l).sum::<f64>();
        state.advance(tok);
    }
    Ok(total / output.len() as f64)
}

/// Sampling configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_len: usize,
    /// Stepwise argmax decoding (ties broken by lowest token id).
    pub greedy: bool,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_output_len: 8,
            greedy: false,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.greedy && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be a positive real",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.max_output_len == 0 {
            return Err(Error::Config("max_output_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// A sampled output sequence. `logprobs_old` are the untempered
/// log-probabilities of each token under the policy that sampled it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tokens: Vec<TokenId>,
    pub logprobs_old: Vec<f64>,
    /// True when generation stopped at end-of-sequence (not the length cap).
    pub terminated: bool,
}

impl Trajectory {
    /// Output length `|y|` (the end-of-sequence token counts).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens that form the answer text: everything before the trailing
    /// end-of-sequence token.
    pub fn answer_tokens(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == EOS_ID => rest,
            _ => &self.tokens,
        }
    }
}

/// Sample one trajectory with the config's seed.
pub fn sample_trajectory(
    params: &PolicyParams,
    view: &InstanceView,
    config: &SamplingConfig,
) -> Result<Trajectory> {
    let mut rng = rng::stream(config.seed, &[]);
    sample_trajectory_with_rng(params, view, config, &mut rng)
}

/// Sample one trajectory from an explicit RNG stream.
pub fn sample_trajectory_with_rng(
    params: &PolicyParams,
    view: &InstanceView,
    config: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    check_compatible(params, view)?;
    config.validate()?;
    let mut state = StepState::default();
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    let mut terminated = false;
    while tokens.len() < config.max_output_len {
        let lp = step_logprobs(params, view, state);
        let tok = if config.greedy {
            argmax_lowest_id(&lp)
        } else {
            sample_nucleus(&lp, config.temperature, config.top_p, rng)
        };
        logprobs.push(lp[tok as usize]);
        tokens.push(tok);
        state.advance(tok);
        if tok == EOS_ID {
            terminated = true;
            break;
        }
    }
    Ok(Trajectory { tokens, logprobs_old: logprobs, terminated })
}

fn argmax_lowest_id(logprobs: &[f64]) -> TokenId {
    let mut best = 0usize;
    for (i, &lp) in logprobs.iter().enumerate().skip(1) {
        if lp > logprobs[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Temperature-scaled, nucleus-truncated categorical draw. Candidates are
/// sorted by probability (descending), ties by ascending token id; the kept
/// set is the smallest prefix with cumulative mass >= top_p.
fn sample_nucleus(logprobs: &[f64], temperature: f64, top_p: f64, rng: &mut ChaCha8Rng) -> TokenId {
    let max = logprobs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logprobs.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = scaled.iter().sum();
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
    let mut kept = 0usize;
    let mut mass = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        mass += scaled[idx] / total;
        kept = rank + 1;
        if mass >= top_p {
            break;
        }
    }
    let kept_total: f64 = order[..kept].iter().map(|&i| scaled[i]).sum();
    let mut u = rng.gen::<f64>() * kept_total;
    for &idx in &order[..kept] {
        u -= scaled[idx];
        if u <= 0.0 {
            return idx as TokenId;
        }
    }
    order[kept - 1] as TokenId
}

/// Write parameters as a line-delimited text checkpoint: a JSON metadata
/// header (vocab size, feature dimension, codec hash) followed by one
/// weight per line in shortest round-trip decimal form.
pub fn save_checkpoint(path: &Path, params: &PolicyParams) -> Result<()> {
    params.validate()?;
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = serde_json::json!({
        "vocab_size": params.vocab_size,
        "feature_dim": params.feature_dim,
        "codec_hash": params.codec_hash,
    });
    writeln!(w, "{header}")?;
    for weight in &params.weights {
        writeln!(w, "{weight:?}")?;
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let raw = fs::read_to_string(path)?;
    let mut lines = raw.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Data {
        line: 1,
        msg: "empty checkpoint file".into(),
    })?;
    #[derive(Deserialize)]
    struct Header {
        vocab_size: usize,
        feature_dim: usize,
        codec_hash: String,
    }
    let header: Header = serde_json::from_str(header).map_err(|e| Error::Data {
        line: 1,
        msg: format!("bad checkpoint header: {e}"),
    })?;
    let mut weights = Vec::new();
    for (idx, line) in lines {
        let w: f64 = line.trim().parse().map_err(|e| Error::Data {
            line: idx + 1,
            msg: format!("bad weight: {e}"),
        })?;
        weights.push(w);
    }
    let params = PolicyParams {
        weights,
        vocab_size: header.vocab_size,
        feature_dim: header.feature_dim,
        codec_hash: header.codec_hash,
    };
    params.validate()?;
    Ok(params)
}
