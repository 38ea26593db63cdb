//! Supervised warm-up: negative mean log-likelihood of gold outputs with
//! exact gradients, plus a small minibatch-SGD training loop.
//!
//! The loss for one demonstration is the token-mean negative
//! log-probability of its gold output sequence (answer tokens followed by
//! end-of-sequence); a batch aggregates by the plain mean over
//! demonstrations.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, ToyCodec, EOS_ID, TokenId};
use crate::error::{Error, Result};
use crate::policy::{grad_weighted_logprob, token_logprobs, InstanceView, PolicyParams, FEATURE_DIM};
use crate::rng::{self, purpose};

/// One supervised example: an instance view plus the tokenized gold output
/// the policy should reproduce.
#[derive(Debug, Clone)]
pub struct Demonstration {
    pub instance_id: String,
    pub view: InstanceView,
    /// Gold answer tokens followed by the end-of-sequence token.
    pub gold_output: Vec<TokenId>,
    /// Token count of question plus context, for length filtering.
    pub input_length: usize,
}

impl Demonstration {
    pub fn from_instance(codec: &ToyCodec, instance: &Instance) -> Result<Self> {
        let view = InstanceView::build(codec, instance)?;
        let mut gold_output = codec.encode(&instance.gold_answer)?;
        gold_output.push(EOS_ID);
        let input_length =
            codec.token_count(&instance.question)? + codec.token_count(&instance.context)?;
        Ok(Self { instance_id: instance.id.clone(), view, gold_output, input_length })
    }
}

/// Supervised warm-up hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep only demonstrations whose input length does not exceed this.
    pub max_input_length: Option<usize>,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            max_input_length: None,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean over demonstrations of the token-mean negative log-likelihood,
/// with its exact gradient.
pub fn sft_loss(
    params: &PolicyParams,
    demos: &[&Demonstration],
) -> Result<(f64, Vec<f64>)> {
    if demos.is_empty() {
        return Err(Error::Config("loss needs at least one demonstration".into()));
    }
    let n = demos.len() as f64;
    let mut loss = 0.0;
    let mut gradient = vec![0.0; FEATURE_DIM];
    for demo in demos {
        if demo.gold_output.is_empty() {
            return Err(Error::Config(format!(
                "demonstration {} has an empty gold output",
                demo.instance_id
            )));
        }
        let lp = token_logprobs(params, &demo.view, &demo.gold_output)?;
        let len = demo.gold_output.len() as f64;
        loss += lp.iter().sum::<f64>() * (-1.0 / (n * len));
        let weights = vec![-1.0 / (n * len); demo.gold_output.len()];
        let g = grad_weighted_logprob(params, &demo.view, &demo.gold_output, &weights)?;
        for d in 0..FEATURE_DIM {
            gradient[d] += g[d];
        }
    }
    Ok((loss, gradient))
}

/// Minibatch-SGD warm-up. Demonstrations longer than
/// `config.max_input_length` are dropped up front; each epoch reshuffles
/// from its own derived RNG stream. Returns the full-dataset loss measured
/// after each epoch.
pub fn train_sft(
    params: &mut PolicyParams,
    demos: &[Demonstration],
    config: &SftConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let kept: Vec<&Demonstration> = demos
        .iter()
        .filter(|d| config.max_input_length.map_or(true, |m| d.input_length <= m))
        .collect();
    if kept.is_empty() {
        return Err(Error::Config(format!(
            "no demonstrations left after the length filter (started with {})",
            demos.len()
        )));
    }
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..kept.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = rng::stream(config.seed, &[purpose::SFT_SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Demonstration> = chunk.iter().map(|&i| kept[i]).collect();
            let (_, gradient) = sft_loss(params, &batch)?;
            for d in 0..FEATURE_DIM {
                params.weights[d] -= config.learning_rate * gradient[d];
            }
        }
        let (loss, _) = sft_loss(params, &kept)?;
        epoch_losses.push(loss);
    }
    Ok(epoch_losses)
}
