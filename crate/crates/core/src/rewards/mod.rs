//! Hybrid reward: rule verification, LLM-judge fallback, overlong shaping.
//!
//! Scoring a model response proceeds in stages:
//!
//! 1. [`extract_answer`] pulls the predicted answer out of the response
//!    text (last `the answer is` occurrence, optional `\boxed{...}`).
//! 2. [`rule_score`] grants 1 for a normalized exact match with gold.
//! 3. When the rule fails and an extraction exists, the judge backend
//!    ([`judge`]) is asked whether predicted and gold are equivalent.
//! 4. The final reward is `max(rule, judge)` — the judge can rescue a
//!    string mismatch but can never take a rule-verified point away.
//! 5. The DAPO path additionally applies [`shape_overlong`], a soft
//!    penalty ramp for outputs approaching the length budget.
//!
//! A missing extraction scores 0 without consulting the judge: the answer
//! format is part of the task contract.

pub mod judge;

use serde::{Deserialize, Serialize};

use crate::corpus::{render_response, ToyCodec};
use crate::error::{Error, Result};
use crate::policy::Trajectory;

pub use judge::{JudgeBackend, JudgeClient, JudgeConfig, JudgeVerdict, MockJudge};

const MARKER: &str = "the answer is";

/// Extract the predicted answer from a response text.
///
/// Finds the last ASCII-case-insensitive occurrence of `the answer is`,
/// takes the trailing span, trims whitespace, removes one trailing period,
/// and unwraps a `\boxed{...}` expression if one is present. Returns
/// `None` when the marker never occurs.
pub fn extract_answer(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let marker = MARKER.as_bytes();
    let mut last: Option<usize> = None;
    if bytes.len() >= marker.len() {
        for i in 0..=bytes.len() - marker.len() {
            if bytes[i..i + marker.len()].eq_ignore_ascii_case(marker) {
                last = Some(i);
            }
        }
    }
    let start = last? + marker.len();
    let mut span = text[start..].trim();
    if let Some(stripped) = span.strip_suffix('.') {
        span = stripped.trim_end();
    }
    Some(unbox(span))
}

/// Unwrap the first `\boxed{...}` in the span, if any, handling nested
/// braces; `\$` inside the box is unescaped to `$`.
fn unbox(span: &str) -> String {
    const OPEN: &str = "\\boxed{";
    let Some(start) = span.find(OPEN) else {
        return span.to_string();
    };
    let inner_start = start + OPEN.len();
    let mut depth = 1usize;
    for (off, ch) in span[inner_start..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    let inner = span[inner_start..inner_start + off].trim();
                    return inner.replace("\\$", "$");
                }
            }
            _ => {}
        }
    }
    // Unbalanced braces: fall back to the raw span.
    span.to_string()
}

fn normalize(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Deterministic string verification: case-folded, whitespace-collapsed
/// exact match.
pub fn rule_score(predicted: &str, gold: &str) -> u8 {
    u8::from(normalize(predicted) == normalize(gold))
}

/// Final reward: the maximum of the rule score and the judge score.
pub fn combined_reward(rule: u8, judge: Option<u8>) -> u8 {
    rule.max(judge.unwrap_or(0))
}

/// Overlong-output shaping configuration: `l_max` is the hard output
/// budget and `l_cache` the width of the soft penalty ramp before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapingConfig {
    pub l_max: usize,
    pub l_cache: usize,
}

impl ShapingConfig {
    /// Default ramp width: one tenth of the budget, at least one token.
    pub fn with_default_cache(l_max: usize) -> Self {
        Self { l_max, l_cache: std::cmp::max(1, l_max / 10) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_cache == 0 || self.l_cache >= self.l_max {
            return Err(Error::Config(format!(
                "shaping requires 0 < l_cache < l_max, got l_cache {} l_max {}",
                self.l_cache, self.l_max
            )));
        }
        Ok(())
    }
}

/// Soft overlong penalty: rewards are unchanged up to `l_max - l_cache`,
/// ramp down linearly by up to 1 across the cache zone, and are down a
/// full point beyond `l_max`. Continuous at both breakpoints, monotonically
/// non-increasing in length.
pub fn shape_overlong(reward: f64, output_len: usize, config: &ShapingConfig) -> Result<f64> {
    config.validate()?;
    let len = output_len as f64;
    let l_max = config.l_max as f64;
    let l_cache = config.l_cache as f64;
    let shaped = if len <= l_max - l_cache {
        reward
    } else if len <= l_max {
        reward + ((l_max - l_cache) - len) / l_cache
    } else {
        reward - 1.0
    };
    Ok(shaped)
}

/// Everything scoring one response produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardOutcome {
    pub rule: u8,
    /// Judge score, when the judge was consulted.
    pub judge: Option<u8>,
    pub combined: u8,
    /// Shaped reward; equals `combined` until a shaping pass replaces it.
    pub shaped: f64,
    pub judge_parse_failed: bool,
    /// The extracted answer, when extraction succeeded.
    pub predicted: Option<String>,
}

/// Score a response text against the gold answer. The judge is consulted
/// only when extraction succeeded and the rule failed; judge transport
/// errors propagate to the caller.
pub fn score_response(
    question: &str,
    response_text: &str,
    gold: &str,
    judge: &JudgeClient,
) -> Result<RewardOutcome> {
    let predicted = extract_answer(response_text);
    let (rule, judge_score, parse_failed) = match &predicted {
        None => (0, None, false),
        Some(p) => {
            let rule = rule_score(p, gold);
            if rule == 1 {
                (rule, None, false)
            } else {
                let verdict = judge.score(question, p, gold)?;
                (rule, Some(verdict.score), verdict.parse_failed)
            }
        }
    };
    let combined = combined_reward(rule, judge_score);
    Ok(RewardOutcome {
        rule,
        judge: judge_score,
        combined,
        shaped: f64::from(combined),
        judge_parse_failed: parse_failed,
        predicted,
    })
}

/// Render a sampled trajectory into the answer-sentence scaffold the task
/// prompt demands, then score it. Format compliance is assumed of the
/// underlying model, so the scaffold is supplied by construction.
pub fn score_trajectory(
    codec: &ToyCodec,
    question: &str,
    trajectory: &Trajectory,
    gold: &str,
    judge: &JudgeClient,
) -> Result<RewardOutcome> {
    let answer_text = codec.decode(trajectory.answer_tokens())?;
    score_response(question, &render_response(&answer_text), gold, judge)
}
